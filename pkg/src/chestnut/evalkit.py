"""CVE mitigation scoring against an allowlist.

A sample is one way to trigger a CVE: the set of syscalls the exploit
variant needs.  Blocking any one of them mitigates that variant; a CVE is
fully mitigated when every variant is.  Samples are expanded with
equivalent syscalls (openat for open, and so on) before scoring so an
exploit cannot sidestep the filter by switching to a sibling syscall.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

from .filtergen import Allowlist
from .syscalls import EXEC_FAMILY, MPROTECT, number_of

# Syscall equivalence table (name -> interchangeable names). Substitution
# is per entry and not implied to be bidirectional.
EQUIVALENT_SYSCALLS: dict[str, tuple[str, ...]] = {
    "munlockall": ("munlock",),
    "listxattr": ("llistxattr", "flistxattr"),
    "epoll_create": ("epoll_create1",),
    "mlockall": ("mlock", "mlock2"),
    "execve": ("execveat",),
    "recvfrom": ("recvmsg", "recvmmsg"),
    "writev": ("pwritev",),
    "mknod": ("mknodat",),
    "open": ("openat",),
    "accept": ("accept4",),
    "getdents": ("getdents64",),
    "sendto": ("sendmmsg", "sendmsg"),
    "getxattr": ("fgetxattr", "lgetxattr"),
    "rename": ("renameat", "rename2"),
    "epoll_ctl": ("epoll_ctl_old",),
}


@dataclass(frozen=True)
class CveSample:
    cve_id: str
    required: frozenset[int]

    def __post_init__(self):
        if not self.required:
            raise ValueError(f"{self.cve_id}: a sample needs at least one syscall")


def _table_by_number(table: dict[str, tuple[str, ...]]) -> dict[int, tuple[int, ...]]:
    out = {}
    for name, equivs in table.items():
        if name in equivs:
            raise ValueError(f"equivalence table maps {name} to itself")
        out[number_of(name)] = tuple(number_of(e) for e in equivs)
    return out


def expand_equivalents(
    samples: list[CveSample],
    table: dict[str, tuple[str, ...]] | None = None,
) -> list[CveSample]:
    """Add one sample per substitution combination; originals kept first."""
    by_number = _table_by_number(EQUIVALENT_SYSCALLS if table is None else table)
    out: list[CveSample] = []
    seen: set[tuple[str, frozenset[int]]] = set()
    for sample in samples:
        positions = sorted(sample.required)
        choices = [(n, *by_number.get(n, ())) for n in positions]
        for combo in itertools.product(*choices):
            required = frozenset(combo)
            key = (sample.cve_id, required)
            if key not in seen:
                seen.add(key)
                out.append(CveSample(sample.cve_id, required))
    return out


@dataclass(frozen=True)
class MitigationReport:
    total_cves: int
    fully_mitigated: int
    total_samples: int
    samples_mitigated: int
    exec_blocked: bool
    mprotect_blocked: bool
    per_cve: dict[str, tuple[int, int]]  # cve -> (mitigated samples, total samples)

    @property
    def fully_pct(self) -> float:
        return 100.0 * self.fully_mitigated / self.total_cves if self.total_cves else 100.0

    @property
    def subvariant_pct(self) -> float:
        return 100.0 * self.samples_mitigated / self.total_samples if self.total_samples else 100.0

    def to_json(self) -> dict:
        return {
            "total_cves": self.total_cves,
            "fully_mitigated": self.fully_mitigated,
            "fully_mitigated_pct": round(self.fully_pct, 2),
            "total_samples": self.total_samples,
            "samples_mitigated": self.samples_mitigated,
            "subvariant_mitigated_pct": round(self.subvariant_pct, 2),
            "exec_blocked": self.exec_blocked,
            "mprotect_blocked": self.mprotect_blocked,
            "per_cve": {
                cve: {"mitigated": m, "total": t} for cve, (m, t) in sorted(self.per_cve.items())
            },
        }

    def human_table(self) -> str:
        lines = [
            f"{'CVE':24} {'mitigated':>10} {'total':>6}",
            "-" * 42,
        ]
        for cve, (m, t) in sorted(self.per_cve.items()):
            lines.append(f"{cve:24} {m:>10} {t:>6}")
        lines.append("-" * 42)
        lines.append(
            f"fully mitigated: {self.fully_mitigated}/{self.total_cves}"
            f" ({self.fully_pct:.1f}%)  subvariants: {self.samples_mitigated}/"
            f"{self.total_samples} ({self.subvariant_pct:.1f}%)"
        )
        lines.append(
            f"exec family blocked: {'yes' if self.exec_blocked else 'no'}   "
            f"mprotect blocked: {'yes' if self.mprotect_blocked else 'no'}"
        )
        return "\n".join(lines)


def evaluate(
    allowlist: Allowlist,
    samples: list[CveSample],
    use_equivalents: bool = True,
    table: dict[str, tuple[str, ...]] | None = None,
) -> MitigationReport:
    """Score every sample: mitigated iff some required syscall is blocked."""
    if use_equivalents:
        samples = expand_equivalents(samples, table)
    allowed = allowlist.numbers

    per_cve: dict[str, list[bool]] = {}
    for sample in samples:
        mitigated = not sample.required <= allowed
        per_cve.setdefault(sample.cve_id, []).append(mitigated)

    fully = sum(1 for verdicts in per_cve.values() if all(verdicts))
    sample_hits = sum(v for verdicts in per_cve.values() for v in verdicts)
    return MitigationReport(
        total_cves=len(per_cve),
        fully_mitigated=fully,
        total_samples=len(samples),
        samples_mitigated=sample_hits,
        exec_blocked=not (allowed & EXEC_FAMILY),
        mprotect_blocked=MPROTECT not in allowed,
        per_cve={cve: (sum(v), len(v)) for cve, v in per_cve.items()},
    )


def load_samples(path) -> list[CveSample]:
    """Samples file: JSON array of {"cve": id, "syscalls": [names or numbers]}."""
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, list):
        raise ValueError("samples file must be a JSON array")
    samples = []
    for i, entry in enumerate(doc):
        cve = entry.get("cve")
        calls = entry.get("syscalls")
        if not cve or not calls:
            raise ValueError(f"samples[{i}]: needs 'cve' and non-empty 'syscalls'")
        numbers = set()
        for c in calls:
            numbers.add(c if isinstance(c, int) else number_of(c))
        samples.append(CveSample(cve, frozenset(numbers)))
    return samples
