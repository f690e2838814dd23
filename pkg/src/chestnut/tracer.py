"""Dynamic syscall observation and allowlist refinement.

The tracer forks the target, installs a defer-to-tracer seccomp filter in
the child (or falls back to plain syscall-stop stepping), and logs every
syscall number across the process tree: new children are picked up
automatically and resumed after each notification, so the run is
observation-only.

Syscalls before the root process reaches its entry point are tagged as
startup and kept apart; refinement excludes them unless asked otherwise.
"""

from __future__ import annotations

import ctypes
import errno as errno_mod
import os
import signal
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AttachFailed, TargetNotFound, TraceeVanished
from .filtergen import Allowlist, SECCOMP_RET_TRACE, SockFilter, BPF_RET, BPF_K

PTRACE_TRACEME = 0
PTRACE_PEEKTEXT = 1
PTRACE_POKETEXT = 4
PTRACE_CONT = 7
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_SYSCALL = 24
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201

PTRACE_O_TRACESYSGOOD = 0x01
PTRACE_O_TRACEFORK = 0x02
PTRACE_O_TRACEVFORK = 0x04
PTRACE_O_TRACECLONE = 0x08
PTRACE_O_TRACEEXEC = 0x10
PTRACE_O_TRACESECCOMP = 0x80
PTRACE_O_EXITKILL = 0x100000

PTRACE_EVENT_FORK = 1
PTRACE_EVENT_VFORK = 2
PTRACE_EVENT_CLONE = 3
PTRACE_EVENT_EXEC = 4
PTRACE_EVENT_SECCOMP = 7

AT_ENTRY = 9
_WALL = 0x40000000

PR_SET_NO_NEW_PRIVS = 38
PR_SET_SECCOMP = 22
SECCOMP_MODE_FILTER = 2

# user_regs_struct field indices (x86_64, 27 u64 slots).
_NREGS = 27
_REG_ORIG_RAX = 15
_REG_RIP = 16

MODE_AUTO = "auto"
MODE_SECCOMP = "seccomp"
MODE_PTRACE = "ptrace"

_libc = ctypes.CDLL(None, use_errno=True)
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]


def _ptrace(request: int, pid: int = 0, addr: int = 0, data: int = 0) -> int:
    ctypes.set_errno(0)
    res = _libc.ptrace(request, pid, addr, data & 0xFFFFFFFFFFFFFFFF)
    err = ctypes.get_errno()
    if res == -1 and err:
        raise OSError(err, os.strerror(err))
    return res


def _getregs(pid: int) -> tuple[int, ...] | None:
    buf = (ctypes.c_ulonglong * _NREGS)()
    try:
        _ptrace(PTRACE_GETREGS, pid, 0, ctypes.addressof(buf))
    except OSError:
        return None
    return tuple(buf)


def _setreg_rip(pid: int, rip: int) -> None:
    buf = (ctypes.c_ulonglong * _NREGS)()
    _ptrace(PTRACE_GETREGS, pid, 0, ctypes.addressof(buf))
    buf[_REG_RIP] = rip
    _ptrace(PTRACE_SETREGS, pid, 0, ctypes.addressof(buf))


def _geteventmsg(pid: int) -> int:
    msg = ctypes.c_ulonglong()
    _ptrace(PTRACE_GETEVENTMSG, pid, 0, ctypes.addressof(msg))
    return msg.value


def _read_auxv_entry(pid: int, key: int) -> int | None:
    try:
        raw = Path(f"/proc/{pid}/auxv").read_bytes()
    except OSError:
        return None
    for off in range(0, len(raw) - 15, 16):
        a_type, a_val = struct.unpack_from("<QQ", raw, off)
        if a_type == key:
            return a_val
        if a_type == 0:
            break
    return None


def _install_trace_all_filter() -> None:
    """Defer every syscall of this process to the attached tracer."""
    insn = SockFilter(BPF_RET | BPF_K, 0, 0, SECCOMP_RET_TRACE).encode()
    buf = ctypes.create_string_buffer(insn, len(insn))

    class _Prog(ctypes.Structure):
        _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.c_void_p)]

    prog = _Prog(1, ctypes.cast(buf, ctypes.c_void_p))
    if _libc.prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0:
        raise OSError(ctypes.get_errno(), "PR_SET_NO_NEW_PRIVS failed")
    if _libc.prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, ctypes.byref(prog)) != 0:
        raise OSError(ctypes.get_errno(), "trace filter rejected")


def seccomp_trace_supported() -> bool:
    """Can this environment install seccomp filters at all?

    Probed with an allow-everything filter: a RET_TRACE filter without an
    attached tracer would turn even exit_group into ENOSYS and wedge the
    probe child.
    """
    from .filtergen import SECCOMP_RET_ALLOW

    pid = os.fork()
    if pid == 0:
        try:
            insn = SockFilter(BPF_RET | BPF_K, 0, 0, SECCOMP_RET_ALLOW).encode()
            buf = ctypes.create_string_buffer(insn, len(insn))

            class _Prog(ctypes.Structure):
                _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.c_void_p)]

            prog = _Prog(1, ctypes.cast(buf, ctypes.c_void_p))
            if _libc.prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0:
                os._exit(1)
            if _libc.prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, ctypes.byref(prog)) != 0:
                os._exit(1)
        except Exception:
            os._exit(1)
        os._exit(0)
    _, status = os.waitpid(pid, 0)
    return os.WIFEXITED(status) and os.WEXITSTATUS(status) == 0


@dataclass(frozen=True)
class TraceReport:
    observed: frozenset[int]
    per_pid: dict[int, frozenset[int]]
    first_seen: dict[int, tuple[int, int]]
    startup: frozenset[int]
    raw_status: int
    exit_code: int | None
    term_signal: int | None
    mode: str

    def to_json(self) -> dict:
        return {
            "observed": sorted(self.observed),
            "per_pid": {str(pid): sorted(s) for pid, s in sorted(self.per_pid.items())},
            "first_seen": {str(nr): list(v) for nr, v in sorted(self.first_seen.items())},
            "startup": sorted(self.startup),
            "exit_code": self.exit_code,
            "term_signal": self.term_signal,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TraceReport":
        return cls(
            observed=frozenset(doc.get("observed", ())),
            per_pid={int(k): frozenset(v) for k, v in doc.get("per_pid", {}).items()},
            first_seen={int(k): tuple(v) for k, v in doc.get("first_seen", {}).items()},
            startup=frozenset(doc.get("startup", ())),
            raw_status=0,
            exit_code=doc.get("exit_code"),
            term_signal=doc.get("term_signal"),
            mode=doc.get("mode", MODE_AUTO),
        )


class _Collector:
    def __init__(self):
        self.per_pid: dict[int, set[int]] = {}
        self.first_seen: dict[int, tuple[int, int]] = {}
        self.startup: set[int] = set()
        self.seq = 0

    def log(self, pid: int, nr: int, startup: bool) -> None:
        if nr < 0:
            return
        if startup:
            self.startup.add(nr)
            return
        self.per_pid.setdefault(pid, set()).add(nr)
        self.first_seen.setdefault(nr, (pid, self.seq))
        self.seq += 1


def trace(
    target,
    args: list[str] | None = None,
    follow_children: bool = True,
    mode: str = MODE_AUTO,
    stdout=None,
    stderr=None,
) -> TraceReport:
    """Run target under syscall interception and report everything it did."""
    path = Path(target)
    if not path.is_file() or not os.access(path, os.X_OK):
        raise TargetNotFound(f"no such executable: {target}")
    args = list(args or [])

    if mode == MODE_AUTO:
        # An untraced child would inherit a RET_TRACE filter and break, so
        # partial tracing must use plain syscall stops.
        if follow_children and seccomp_trace_supported():
            mode = MODE_SECCOMP
        else:
            mode = MODE_PTRACE
    use_seccomp = mode == MODE_SECCOMP

    child = os.fork()
    if child == 0:
        try:
            if stdout is not None:
                os.dup2(stdout if isinstance(stdout, int) else os.open(stdout, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644), 1)
            if stderr is not None:
                os.dup2(stderr if isinstance(stderr, int) else os.open(stderr, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644), 2)
            _ptrace(PTRACE_TRACEME)
            os.kill(os.getpid(), signal.SIGSTOP)
            if use_seccomp:
                _install_trace_all_filter()
            os.execv(str(path), [str(path), *args])
        except BaseException:
            pass
        finally:
            os._exit(127)

    try:
        return _trace_loop(child, follow_children, use_seccomp, mode)
    except OSError as exc:
        if exc.errno == errno_mod.ESRCH:
            raise TraceeVanished(f"tracee {child} disappeared mid-trace") from exc
        raise


def _trace_loop(root: int, follow_children: bool, use_seccomp: bool, mode: str) -> TraceReport:
    _, status = os.waitpid(root, 0)
    if not os.WIFSTOPPED(status) or os.WSTOPSIG(status) != signal.SIGSTOP:
        raise AttachFailed(f"tracee did not stop for attach (status {status:#x})")

    options = PTRACE_O_EXITKILL | PTRACE_O_TRACEEXEC | PTRACE_O_TRACESYSGOOD
    if use_seccomp:
        options |= PTRACE_O_TRACESECCOMP
    if follow_children:
        options |= PTRACE_O_TRACEFORK | PTRACE_O_TRACEVFORK | PTRACE_O_TRACECLONE
    try:
        _ptrace(PTRACE_SETOPTIONS, root, 0, options)
    except OSError as exc:
        raise AttachFailed(f"PTRACE_SETOPTIONS failed: {exc}") from exc

    resume_req = PTRACE_CONT if use_seccomp else PTRACE_SYSCALL
    collector = _Collector()
    alive = {root}
    in_syscall: dict[int, bool] = {}
    root_status: int | None = None
    entry_vaddr: int | None = None
    entry_saved_word: int | None = None
    started = False
    exec_seen = False

    def resume(pid: int, sig: int = 0) -> None:
        try:
            _ptrace(resume_req, pid, 0, sig)
        except OSError as exc:
            if exc.errno != errno_mod.ESRCH:
                raise

    def plant_entry_breakpoint(pid: int) -> bool:
        nonlocal entry_vaddr, entry_saved_word
        entry = _read_auxv_entry(pid, AT_ENTRY)
        if not entry:
            return False
        try:
            word = _ptrace(PTRACE_PEEKTEXT, pid, entry) & 0xFFFFFFFFFFFFFFFF
            patched = (word & ~0xFF) | 0xCC
            _ptrace(PTRACE_POKETEXT, pid, entry, patched)
        except OSError:
            return False
        entry_vaddr, entry_saved_word = entry, word
        return True

    try:
        resume(root)
        while alive:
            try:
                pid, status = os.waitpid(-1, _WALL)
            except ChildProcessError:
                break
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                alive.discard(pid)
                if pid == root:
                    root_status = status
                    if not follow_children:
                        break
                continue
            if not os.WIFSTOPPED(status):
                continue

            sig = os.WSTOPSIG(status)
            event = status >> 16
            startup_phase = not started and pid == root

            if event == PTRACE_EVENT_SECCOMP:
                regs = _getregs(pid)
                if regs is not None:
                    collector.log(pid, _signed(regs[_REG_ORIG_RAX]), startup_phase)
                resume(pid)
            elif event in (PTRACE_EVENT_FORK, PTRACE_EVENT_VFORK, PTRACE_EVENT_CLONE):
                try:
                    alive.add(_geteventmsg(pid))
                except OSError:
                    pass
                resume(pid)
            elif event == PTRACE_EVENT_EXEC:
                if pid == root and not exec_seen:
                    exec_seen = True
                    if not plant_entry_breakpoint(pid):
                        started = True  # cannot tag startup, count everything
                resume(pid)
            elif sig == (signal.SIGTRAP | 0x80):  # syscall stop (ptrace mode)
                enter = not in_syscall.get(pid, False)
                in_syscall[pid] = enter
                if enter:
                    regs = _getregs(pid)
                    if regs is not None:
                        collector.log(pid, _signed(regs[_REG_ORIG_RAX]), startup_phase)
                resume(pid)
            elif sig == signal.SIGTRAP and entry_vaddr is not None and not started:
                regs = _getregs(pid)
                if regs is not None and regs[_REG_RIP] == entry_vaddr + 1:
                    _ptrace(PTRACE_POKETEXT, pid, entry_vaddr, entry_saved_word)
                    _setreg_rip(pid, entry_vaddr)
                    started = True
                resume(pid)
            elif sig in (signal.SIGSTOP, signal.SIGTRAP):
                resume(pid)  # attach stop of a new child / exec trap: swallow
            else:
                resume(pid, sig)  # genuine signal: deliver it
    except BaseException:
        for pid in alive:
            try:
                os.kill(pid, signal.SIGKILL)
            except OSError:
                pass
        raise

    if root_status is None:
        raise TraceeVanished(f"root tracee {root} never reported an exit status")

    per_pid = {pid: frozenset(s) for pid, s in collector.per_pid.items()}
    observed = frozenset().union(*per_pid.values()) if per_pid else frozenset()
    return TraceReport(
        observed=observed,
        per_pid=per_pid,
        first_seen=dict(collector.first_seen),
        startup=frozenset(collector.startup),
        raw_status=root_status,
        exit_code=os.WEXITSTATUS(root_status) if os.WIFEXITED(root_status) else None,
        term_signal=os.WTERMSIG(root_status) if os.WIFSIGNALED(root_status) else None,
        mode=mode,
    )


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= 1 << 63 else value


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

POLICY_ADD_ONLY = "add-only"
POLICY_ADD_AND_REMOVE = "add-and-remove"


@dataclass(frozen=True)
class RefinementResult:
    added: frozenset[int]
    removable: frozenset[int]
    final: frozenset[int]
    policy: str

    def to_json(self) -> dict:
        return {
            "added": sorted(self.added),
            "removable": sorted(self.removable),
            "final": sorted(self.final),
            "policy": self.policy,
        }


def refine(
    static: Allowlist,
    report: TraceReport,
    policy: str = POLICY_ADD_ONLY,
    include_startup: bool = False,
) -> RefinementResult:
    """Cross-reference a trace against the static allowlist."""
    observed = report.observed | (report.startup if include_startup else frozenset())
    added = observed - static.numbers
    removable = static.numbers - observed
    if policy == POLICY_ADD_ONLY:
        final = static.numbers | added
    elif policy == POLICY_ADD_AND_REMOVE:
        final = frozenset(observed)
    else:
        raise ValueError(f"unknown refinement policy: {policy}")
    return RefinementResult(frozenset(added), frozenset(removable), frozenset(final), policy)


def overapproximation_ratio(static: Allowlist, report: TraceReport, include_startup: bool = False) -> float:
    """|static - observed| / |static|: how loose the static set was."""
    if not static.numbers:
        return 0.0
    observed = report.observed | (report.startup if include_startup else frozenset())
    return len(static.numbers - observed) / len(static.numbers)
