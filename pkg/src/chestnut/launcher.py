"""Filter enforcement: launcher process and binary patching.

The launcher forks, installs no-new-privileges plus the allowlist filter
in the child, and execs the target, so the filter is in force before the
target's first instruction.  The exec handoff itself must pass the
filter, so execve is appended to the installed list and reported; the
patch path installs from inside the process and needs no such addition.
"""

from __future__ import annotations

import ctypes
import importlib.resources
import os
import shutil
import signal
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .elfio import inject_dependency, load_image, syscall_list_note, write_annotation
from .errors import ChestnutError, LoadRejected, TargetNotFound
from .filtergen import Allowlist, FilterProgram, KILL_PROCESS, build_filter
from .syscalls import EXECVE

PR_SET_NO_NEW_PRIVS = 38
PR_SET_SECCOMP = 22
SECCOMP_MODE_FILTER = 2
SYS_SECCOMP = 317
SECCOMP_SET_MODE_FILTER = 1

# Environment knob stripped before exec so a sandboxed target cannot be
# talked out of enforcement by its environment.
DISABLE_KNOB = "CHESTNUT_DISABLE"

MODE_ENFORCE_KILL = "enforce-kill"
MODE_ENFORCE_ERRNO = "enforce-errno"
MODE_LOG_ONLY = "log-only"

EPERM = 1

INSTALLER_LIB = "libchestnut.so"


class _SockFprog(ctypes.Structure):
    _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.c_void_p)]


def install_filter(program: FilterProgram) -> None:
    """Install `program` on the calling process (no-new-privileges first)."""
    libc = ctypes.CDLL(None, use_errno=True)
    if libc.prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0:
        raise LoadRejected(f"PR_SET_NO_NEW_PRIVS failed: {os.strerror(ctypes.get_errno())}")
    raw = program.encode()
    buf = (ctypes.c_char * len(raw)).from_buffer_copy(raw)
    prog = _SockFprog(len(program.instructions), ctypes.cast(buf, ctypes.c_void_p))
    rc = libc.syscall(SYS_SECCOMP, SECCOMP_SET_MODE_FILTER, 0, ctypes.byref(prog))
    if rc != 0:
        rc = libc.prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, ctypes.byref(prog))
    if rc != 0:
        raise LoadRejected(f"kernel refused the filter: {os.strerror(ctypes.get_errno())}")


@dataclass
class LaunchResult:
    raw_status: int
    exit_code: int | None
    term_signal: int | None
    seccomp_killed: bool
    added_for_exec: bool
    violations: frozenset[int] = frozenset()
    warnings: list[str] = field(default_factory=list)


def _resolve_target(target) -> Path:
    p = Path(target)
    if not p.is_file():
        found = shutil.which(str(target))
        if found is None:
            raise TargetNotFound(f"no such executable: {target}")
        p = Path(found)
    if not os.access(p, os.X_OK):
        raise TargetNotFound(f"not executable: {p}")
    return p


def launch(
    target,
    args: list[str],
    allowlist: Allowlist,
    mode: str = MODE_ENFORCE_KILL,
    stdout=None,
    stderr=None,
) -> LaunchResult:
    """Run target under the allowlist filter; returns its wait status."""
    path = _resolve_target(target)
    if not allowlist.numbers:
        raise ValueError("refusing to launch with an empty allowlist")

    if mode == MODE_LOG_ONLY:
        return _launch_log_only(path, args, allowlist, stdout, stderr)
    if mode == MODE_ENFORCE_KILL:
        default = KILL_PROCESS
    elif mode == MODE_ENFORCE_ERRNO:
        default = ("errno", EPERM)
    else:
        raise ValueError(f"unknown launch mode: {mode}")

    added_for_exec = EXECVE not in allowlist.numbers
    effective = Allowlist(allowlist.arch, allowlist.numbers | {EXECVE})
    program = build_filter(effective, default)

    pid = os.fork()
    if pid == 0:
        try:
            os.environ.pop(DISABLE_KNOB, None)
            if stdout is not None:
                os.dup2(stdout if isinstance(stdout, int) else os.open(stdout, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644), 1)
            if stderr is not None:
                os.dup2(stderr if isinstance(stderr, int) else os.open(stderr, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644), 2)
            install_filter(program)
            os.execv(str(path), [str(path), *args])
        except BaseException as exc:  # no return from a fork child
            print(f"launch child failed: {exc}", file=sys.stderr, flush=True)
        finally:
            os._exit(127)

    _, status = os.waitpid(pid, 0)
    exit_code = os.WEXITSTATUS(status) if os.WIFEXITED(status) else None
    term_signal = os.WTERMSIG(status) if os.WIFSIGNALED(status) else None
    return LaunchResult(
        raw_status=status,
        exit_code=exit_code,
        term_signal=term_signal,
        seccomp_killed=term_signal == signal.SIGSYS,
        added_for_exec=added_for_exec,
        warnings=(["execve added to the installed filter for the launch handoff"] if added_for_exec else []),
    )


def _launch_log_only(path, args, allowlist, stdout, stderr) -> LaunchResult:
    from .tracer import trace  # local import: tracer never enforces

    report = trace(str(path), args, follow_children=True, stdout=stdout, stderr=stderr)
    violations = frozenset(report.observed - allowlist.numbers)
    return LaunchResult(
        raw_status=report.raw_status,
        exit_code=report.exit_code,
        term_signal=report.term_signal,
        seccomp_killed=False,
        added_for_exec=False,
        violations=violations,
        warnings=[f"log-only: {len(violations)} syscalls outside the allowlist observed"] if violations else [],
    )


def _installer_source() -> str:
    return (
        importlib.resources.files("chestnut").joinpath("installer/libchestnut.c").read_text()
    )


def build_installer_library(outdir) -> Path:
    """Compile the constructor-only installer shared object."""
    cc = shutil.which("cc") or shutil.which("gcc") or shutil.which("clang")
    if cc is None:
        raise ChestnutError("no C compiler available to build the installer library")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    src = outdir / "libchestnut.c"
    src.write_text(_installer_source())
    out = outdir / INSTALLER_LIB
    proc = subprocess.run(
        [cc, "-shared", "-fPIC", "-O2", "-o", str(out), str(src)],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise ChestnutError(f"installer library build failed:\n{proc.stderr}")
    return out


@dataclass(frozen=True)
class PatchResult:
    patched: Path
    installer: Path


def patch(target, allowlist: Allowlist, out_path=None, libdir=None) -> PatchResult:
    """Self-enforcing binary: annotation note + injected installer library."""
    path = _resolve_target(target)
    image, _ = load_image(path)
    out = Path(out_path) if out_path else Path(str(path) + ".chestnut")
    libdir = Path(libdir) if libdir else out.parent
    installer = libdir / INSTALLER_LIB
    if not installer.exists():
        installer = build_installer_library(libdir)

    annotated = write_annotation(image, syscall_list_note(allowlist.numbers), out_path=out)
    image2, _ = load_image(annotated)
    patched = inject_dependency(image2, INSTALLER_LIB, out_path=out, runpath=str(libdir))
    return PatchResult(patched, installer)
