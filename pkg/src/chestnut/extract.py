"""Syscall site discovery and number recovery on x86_64 images.

Site discovery is a byte-level linear sweep for the two-byte syscall
opcode; false positives inside data are tolerated and surface as
unresolved sites.  Number recovery walks the enclosing region's forward
disassembly backward from the site, tracking which register bits still
feed the syscall-number register until an immediate pins them down.

The walk never merges paths: it steps to an instruction's unique
predecessor, following a single incoming direct jump, and gives up at any
join with multiple predecessors, at another function's entry, and on any
write it cannot model, leaving the site unresolved rather than guessed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import decoder
from .decoder import (
    CLASS_ARITH,
    CLASS_BRANCH,
    CLASS_CALL,
    CLASS_MOVE_IMM,
    CLASS_MOVE_REG,
    CLASS_RETURN,
    CLASS_SYSCALL,
    FULL,
    RAX,
)
from .elfio import ElfImage
from .errors import UnsupportedArch
from .syscalls import MAX_SYSCALL_NUMBER

DEFAULT_BUDGET = 30

SYSCALL_OPCODE = b"\x0f\x05"

RES_IMMEDIATE = "immediate"
RES_REGISTER_CHAIN = "register-chain"
RES_UNRESOLVED = "unresolved"


@dataclass(frozen=True)
class SyscallSite:
    vaddr: int
    number: int | None
    resolution: str
    chain_length: int

    def to_json(self) -> dict:
        return {
            "vaddr": self.vaddr,
            "number": self.number,
            "resolution": self.resolution,
            "chain_length": self.chain_length,
        }


@dataclass(frozen=True)
class ExtractionResult:
    numbers: frozenset[int]
    sites: tuple[SyscallSite, ...]
    diagnostics: tuple[str, ...] = ()

    @property
    def unresolved(self) -> tuple[SyscallSite, ...]:
        return tuple(s for s in self.sites if s.resolution == RES_UNRESOLVED)

    def to_json(self) -> dict:
        return {
            "numbers": sorted(self.numbers),
            "sites": [s.to_json() for s in self.sites],
            "unresolved_count": len(self.unresolved),
            "diagnostics": list(self.diagnostics),
        }


def _require_x86_64(image: ElfImage) -> None:
    if image.arch != "x86_64":
        raise UnsupportedArch(
            f"syscall extraction implemented for x86_64 only, image is {image.arch} ({image.path})"
        )


def find_syscall_sites(image: ElfImage) -> list[int]:
    """Virtual addresses of every syscall opcode in executable regions."""
    _require_x86_64(image)
    data = image.data
    sites = []
    for region in image.exec_regions:
        lo, hi = region.offset, region.offset + region.size
        pos = data.find(SYSCALL_OPCODE, lo, hi)
        while pos >= 0:
            sites.append(region.vaddr + (pos - region.offset))
            pos = data.find(SYSCALL_OPCODE, pos + 1, hi)
    return sorted(set(sites))


class _RegionDisasm:
    def __init__(self, code: bytes, vaddr: int):
        self.instructions = decoder.linear_sweep(code, vaddr)
        self.index = {ins.vaddr: i for i, ins in enumerate(self.instructions)}


@dataclass
class ImageAnalysis:
    """Shared per-image disassembly state for repeated backtracking."""

    image: ElfImage
    function_bounds: list[tuple[int, int]] | None = None
    _cache: dict[tuple[int, int], _RegionDisasm] = field(default_factory=dict)
    _targets: set[int] | None = None
    _call_targets: set[int] | None = None
    _branch_sources: dict[int, list[int]] | None = None
    _int80: list[int] | None = None

    def region_code(self, start: int, end: int) -> bytes:
        for r in self.image.exec_regions:
            if r.vaddr <= start and end <= r.vaddr + r.size:
                off = r.offset + (start - r.vaddr)
                return self.image.data[off : off + (end - start)]
        return b""

    def bounds_for(self, vaddr: int) -> tuple[int, int] | None:
        if self.function_bounds:
            for start, end in self.function_bounds:
                if start <= vaddr < end:
                    return (start, end)
        for r in self.image.exec_regions:
            if r.vaddr <= vaddr < r.vaddr + r.size:
                return (r.vaddr, r.vaddr + r.size)
        return None

    def disasm(self, bounds: tuple[int, int]) -> _RegionDisasm:
        d = self._cache.get(bounds)
        if d is None:
            d = _RegionDisasm(self.region_code(*bounds), bounds[0])
            self._cache[bounds] = d
        return d

    def _sweep_all(self) -> None:
        targets: set[int] = set()
        call_targets: set[int] = set()
        branch_sources: dict[int, list[int]] = {}
        int80: list[int] = []
        for r in self.image.exec_regions:
            code = self.image.data[r.offset : r.offset + r.size]
            for ins in decoder.linear_sweep(code, r.vaddr):
                if ins.target is not None:
                    targets.add(ins.target)
                    if ins.klass == decoder.CLASS_CALL:
                        call_targets.add(ins.target)
                    else:
                        branch_sources.setdefault(ins.target, []).append(ins.vaddr)
                if ins.mnemonic == "int" and ins.imm == 0x80:
                    int80.append(ins.vaddr)
        self._targets = targets
        self._call_targets = call_targets
        self._branch_sources = branch_sources
        self._int80 = int80

    @property
    def branch_targets(self) -> set[int]:
        if self._targets is None:
            self._sweep_all()
        return self._targets

    @property
    def call_targets(self) -> set[int]:
        if self._targets is None:
            self._sweep_all()
        return self._call_targets

    @property
    def branch_sources(self) -> dict[int, list[int]]:
        if self._targets is None:
            self._sweep_all()
        return self._branch_sources

    @property
    def int80_sites(self) -> list[int]:
        if self._int80 is None:
            self._sweep_all()
        return self._int80


def _contiguous_low(mask: int) -> int | None:
    """Bit width k if mask == 2^k - 1, else None."""
    k = mask.bit_length()
    return k if mask == (1 << k) - 1 else None


def _sext_val(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value ^ sign) - sign


def _falls_through(ins) -> bool:
    if ins.barrier or ins.klass in (CLASS_RETURN,):
        return False
    if ins.klass == CLASS_BRANCH and ins.mnemonic == "jmp":
        return False
    return True


def backtrack_number(
    image: ElfImage,
    site: int,
    budget: int = DEFAULT_BUDGET,
    analysis: ImageAnalysis | None = None,
) -> SyscallSite:
    """Recover the syscall number feeding the syscall instruction at `site`."""
    _require_x86_64(image)
    if analysis is None:
        analysis = ImageAnalysis(image)
    bounds = analysis.bounds_for(site)
    if bounds is None:
        return SyscallSite(site, None, RES_UNRESOLVED, 0)
    dis = analysis.disasm(bounds)
    idx = dis.index.get(site)
    if idx is None or dis.instructions[idx].klass != CLASS_SYSCALL:
        # Byte-scan false positive: the opcode is not on the instruction grid.
        return SyscallSite(site, None, RES_UNRESOLVED, 0)

    tracked = RAX
    needed = FULL
    acc = 0
    # Transforms applied to the eventually-concrete value, recorded while
    # walking backward: ("+"/"-", imm, width) or ("sext", from, to).
    pending: list[tuple[str, int, int]] = []
    retargeted = False
    steps = 0

    def resolved() -> SyscallSite:
        value = acc
        if pending:
            part = acc
            for op, a, b in reversed(pending):
                if op == "sext":
                    part = _sext_val(part & ((1 << a) - 1), a) & ((1 << b) - 1)
                else:
                    part = (part + a if op == "+" else part - a) & ((1 << b) - 1)
            out_w = pending[0][2]
            value = (acc & ~((1 << out_w) - 1)) | part
        kind = RES_REGISTER_CHAIN if retargeted else RES_IMMEDIATE
        return SyscallSite(site, value, kind, steps)

    def step_back(idx: int) -> int | None:
        """Index of the unique predecessor of instructions[idx], or None.

        Stepping across a join with multiple predecessors (or into a call
        target: another function's entry) is where the straight-line walk
        must give up; a single incoming direct jump is followed.
        """
        vaddr = dis.instructions[idx].vaddr
        if vaddr in analysis.call_targets:
            return None
        branch_preds = [
            src for src in analysis.branch_sources.get(vaddr, ()) if src in dis.index
        ]
        fall_pred = None
        if idx > 0 and _falls_through(dis.instructions[idx - 1]):
            fall_pred = idx - 1
        if len(branch_preds) + (1 if fall_pred is not None else 0) != 1:
            return None
        return fall_pred if fall_pred is not None else dis.index[branch_preds[0]]

    while steps < budget:
        prev = step_back(idx)
        if prev is None:
            break  # region boundary, join point, or another function's entry
        idx = prev
        ins = dis.instructions[idx]
        steps += 1
        if ins.klass == CLASS_BRANCH and ins.mnemonic == "jmp":
            continue  # the followed jump itself touches no registers
        if ins.klass in (CLASS_BRANCH, CLASS_CALL, CLASS_RETURN, CLASS_SYSCALL) or ins.barrier:
            break
        if ins.writes_unknown:
            break

        write = None
        for w in ins.writes:
            if w.family == tracked and w.write_mask & needed:
                write = w
                break
        if write is None:
            continue

        overlap_src = needed & write.src_bits
        overlap_zero = needed & (write.write_mask & ~write.src_bits)
        rest = needed & ~write.write_mask

        if ins.klass == CLASS_MOVE_IMM:
            if pending and rest:
                break  # pending arithmetic needs one concrete fill
            acc |= ins.imm & overlap_src
            needed = rest
            if needed == 0:
                return resolved()
        elif ins.klass == CLASS_MOVE_REG:
            if rest and overlap_src:
                break  # needed bits would come from two registers
            sign = needed & write.sign_mask
            if sign:
                if rest or not overlap_src:
                    break
                to_w = _contiguous_low(overlap_src | sign)
                from_w = _contiguous_low(overlap_src)
                if to_w is None or from_w is None:
                    break
                pending.append(("sext", from_w, to_w))
                needed = overlap_src
                tracked = ins.src_reg.family
                retargeted = True
            elif overlap_src:
                needed = overlap_src
                tracked = ins.src_reg.family
                retargeted = True
            else:
                needed = rest
                if needed == 0:
                    return resolved()
        elif ins.klass == CLASS_ARITH:
            if rest:
                break
            needed = overlap_src  # zero-filled part resolves to 0
            if needed == 0:
                return resolved()
            width = _contiguous_low(needed)
            if width is None:
                break
            pending.append((ins.arith_op, ins.imm, width))
        else:
            break  # unmodeled write to the tracked register
    return SyscallSite(site, None, RES_UNRESOLVED, steps)


def extract_all(
    image: ElfImage,
    budget: int = DEFAULT_BUDGET,
    function_bounds: list[tuple[int, int]] | None = None,
) -> ExtractionResult:
    """Union of resolved syscall numbers plus the per-site evidence."""
    _require_x86_64(image)
    analysis = ImageAnalysis(image, function_bounds)
    sites = []
    numbers = set()
    diagnostics = []
    for vaddr in find_syscall_sites(image):
        s = backtrack_number(image, vaddr, budget, analysis)
        sites.append(s)
        if s.number is not None:
            if s.number <= MAX_SYSCALL_NUMBER:
                numbers.add(s.number)
            else:
                diagnostics.append(
                    f"site {s.vaddr:#x} resolves outside the syscall table ({s.number}); ignored"
                )
    for vaddr in analysis.int80_sites:
        diagnostics.append(
            f"int 0x80 at {vaddr:#x}: 32-bit syscall ABI is not supported, instruction rejected"
        )
    return ExtractionResult(frozenset(numbers), tuple(sites), tuple(diagnostics))
