from __future__ import annotations

import ctypes
import os
import signal
import struct
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import asmlib  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "linux_gated: needs seccomp/ptrace permissions")


@pytest.fixture(scope="session")
def fixdir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("fixtures")


def _probe_seccomp() -> bool:
    if not sys.platform.startswith("linux"):
        return False
    pid = os.fork()
    if pid == 0:
        try:
            libc = ctypes.CDLL(None, use_errno=True)
            if libc.prctl(38, 1, 0, 0, 0) != 0:  # PR_SET_NO_NEW_PRIVS
                os._exit(1)
            insns = struct.pack("<HBBI", 0x20, 0, 0, 0) + struct.pack("<HBBI", 0x06, 0, 0, 0x7FFF0000)
            buf = ctypes.create_string_buffer(insns)

            class _Prog(ctypes.Structure):
                _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.c_void_p)]

            prog = _Prog(2, ctypes.cast(buf, ctypes.c_void_p))
            rc = libc.syscall(317, 1, 0, ctypes.byref(prog))  # seccomp(SET_MODE_FILTER)
            os._exit(0 if rc == 0 else 1)
        except Exception:
            os._exit(1)
    _, status = os.waitpid(pid, 0)
    return os.waitstatus_to_exitcode(status) == 0


def _probe_ptrace() -> bool:
    if not sys.platform.startswith("linux"):
        return False
    pid = os.fork()
    if pid == 0:
        try:
            libc = ctypes.CDLL(None, use_errno=True)
            if libc.ptrace(0, 0, 0, 0) != 0:  # PTRACE_TRACEME
                os._exit(1)
            os.kill(os.getpid(), signal.SIGSTOP)
            os._exit(0)
        except Exception:
            os._exit(1)
    _, status = os.waitpid(pid, 0)
    if os.WIFSTOPPED(status):
        libc = ctypes.CDLL(None, use_errno=True)
        libc.ptrace(7, pid, 0, 0)  # PTRACE_CONT
        os.waitpid(pid, 0)
        return True
    return False


_SECCOMP_OK: bool | None = None
_PTRACE_OK: bool | None = None


def seccomp_available() -> bool:
    global _SECCOMP_OK
    if _SECCOMP_OK is None:
        _SECCOMP_OK = _probe_seccomp()
    return _SECCOMP_OK


def ptrace_available() -> bool:
    global _PTRACE_OK
    if _PTRACE_OK is None:
        _PTRACE_OK = _probe_ptrace()
    return _PTRACE_OK


requires_toolchain = pytest.mark.skipif(
    not asmlib.HAVE_TOOLCHAIN, reason="binutils toolchain not available"
)


def requires_seccomp():
    return pytest.mark.skipif(not seccomp_available(), reason="seccomp not permitted here")


def requires_ptrace():
    return pytest.mark.skipif(not ptrace_available(), reason="ptrace not permitted here")
