"""Enforcement: launcher mode, errno mode, log-only, and binary patching."""

from __future__ import annotations

import os
import signal
import subprocess

import pytest

import asmlib
import progs
from conftest import requires_ptrace, requires_seccomp, requires_toolchain
from chestnut.elfio import load_image, read_annotation, decode_syscall_list
from chestnut.errors import TargetNotFound
from chestnut.filtergen import Allowlist
from chestnut.launcher import (
    DISABLE_KNOB,
    MODE_ENFORCE_ERRNO,
    MODE_ENFORCE_KILL,
    MODE_LOG_ONLY,
    build_installer_library,
    launch,
    patch,
)
from chestnut.tracer import trace

pytestmark = [requires_toolchain, requires_seccomp()]


@pytest.fixture(scope="module")
def e2e(fixdir):
    return progs.build_e2e(fixdir)


def _allow(*numbers):
    return Allowlist("x86_64", frozenset(numbers))


def test_allowed_run_completes(e2e, tmp_path):
    out = tmp_path / "out"
    result = launch(e2e, [], _allow(1, 60, 231), stdout=str(out))
    assert result.exit_code == 0
    assert not result.seccomp_killed
    assert out.read_text() == "ok\n"
    assert result.added_for_exec  # 59 was not in the list


def test_blocked_syscall_kills(e2e, tmp_path):
    result = launch(e2e, [], _allow(60, 231), stdout=str(tmp_path / "out"))
    assert result.seccomp_killed
    assert result.term_signal == signal.SIGSYS


def test_errno_mode_soft_fails(e2e, tmp_path):
    out = tmp_path / "out"
    result = launch(e2e, [], _allow(60, 231), mode=MODE_ENFORCE_ERRNO, stdout=str(out))
    # write() came back EPERM; the fixture carries on and exits cleanly.
    assert result.exit_code == 0
    assert out.read_text() == ""


def test_log_only_reports_without_enforcing(e2e, tmp_path):
    if not pytest.importorskip("conftest").ptrace_available():
        pytest.skip("needs ptrace")
    out = tmp_path / "out"
    result = launch(e2e, [], _allow(60, 231), mode=MODE_LOG_ONLY, stdout=str(out))
    assert result.exit_code == 0
    assert out.read_text() == "ok\n"
    assert 1 in result.violations


def test_empty_allowlist_rejected(e2e):
    with pytest.raises(ValueError):
        launch(e2e, [], _allow())


def test_missing_target():
    with pytest.raises(TargetNotFound):
        launch("/no/such/target", [], _allow(1))


def test_disable_knob_cleared(fixdir, tmp_path):
    # A fixture that reports whether the knob survived into its environment:
    # exit code 1 when CHESTNUT_DISABLE is present, 0 otherwise.
    src = r"""
        .text
        .globl _start
        _start:
            mov (%rsp), %rax           # argc
            lea 16(%rsp,%rax,8), %rbx  # &envp[0]
        env_loop:
            mov (%rbx), %rdi
            test %rdi, %rdi
            jz not_found
            # compare leading "CHESTNUT_DISABLE=" (17 bytes)
            lea knob(%rip), %rsi
            mov $17, %ecx
        cmp_loop:
            mov (%rdi), %al
            cmp (%rsi), %al
            jne next_var
            inc %rdi
            inc %rsi
            dec %ecx
            jnz cmp_loop
            mov $1, %edi
            jmp out
        next_var:
            add $8, %rbx
            jmp env_loop
        not_found:
            xor %edi, %edi
        out:
            mov $231, %eax
            syscall
        knob: .ascii "CHESTNUT_DISABLE="
    """
    prog = asmlib.build_static(fixdir, "prog_envknob", src)
    os.environ[DISABLE_KNOB] = "1"
    try:
        baseline = subprocess.run([str(prog)])
        assert baseline.returncode == 1  # knob visible without the launcher
        result = launch(prog, [], _allow(231))
        assert result.exit_code == 0  # launcher stripped it
    finally:
        os.environ.pop(DISABLE_KNOB, None)


# --- patch mode --------------------------------------------------------------

DYN_LIB_SRC = """
    .text
    .globl dwrite
    .type dwrite, @function
    dwrite:
        mov $1, %eax
        mov $1, %edi
        lea dmsg(%rip), %rsi
        mov $3, %edx
        syscall
        ret
    dmsg: .ascii "dy\\n"
"""

DYN_ROOT_SRC = """
    .text
    .globl _start
    _start:
        call dwrite@plt
        xor %edi, %edi
        mov $231, %eax
        syscall
"""


@pytest.fixture(scope="module")
def dynamic_prog(fixdir):
    lib = asmlib.build_shared(fixdir, "libdwrite.so", DYN_LIB_SRC)
    return asmlib.build_dynamic(fixdir, "prog_dyn", DYN_ROOT_SRC, libs=[lib], rpath=fixdir)


@pytest.fixture(scope="module")
def dynamic_runtime_set(dynamic_prog):
    if not pytest.importorskip("conftest").ptrace_available():
        pytest.skip("needs ptrace to establish the runtime baseline")
    report = trace(str(dynamic_prog), [])
    assert report.exit_code == 0
    return report.observed | report.startup


def test_installer_library_builds(tmp_path):
    lib = build_installer_library(tmp_path)
    assert lib.exists()
    image, table = load_image(lib)
    assert image.kind == "shared-object"


def test_patch_roundtrip_allowlist(dynamic_prog, tmp_path):
    allowlist = _allow(1, 231, 60)
    result = patch(dynamic_prog, allowlist, out_path=tmp_path / "patched", libdir=tmp_path)
    image, table = load_image(result.patched)
    assert table.needed[0] == "libchestnut.so"
    note = read_annotation(image)
    assert decode_syscall_list(note.payload) == frozenset({1, 60, 231})


def test_patched_binary_self_enforces(dynamic_prog, dynamic_runtime_set, tmp_path):
    full = Allowlist("x86_64", frozenset(dynamic_runtime_set))
    result = patch(dynamic_prog, full, out_path=tmp_path / "patched_ok", libdir=tmp_path)
    ok = subprocess.run([str(result.patched)], capture_output=True)
    assert ok.returncode == 0, ok.stderr
    assert ok.stdout == b"dy\n"

    # Same binary, write removed: the filter must kill it at the write.
    smaller = Allowlist("x86_64", frozenset(dynamic_runtime_set) - {1})
    result2 = patch(dynamic_prog, smaller, out_path=tmp_path / "patched_kill", libdir=tmp_path)
    killed = subprocess.run([str(result2.patched)], capture_output=True)
    assert killed.returncode == -signal.SIGSYS
    assert killed.stdout == b""


def test_patch_and_launch_verdicts_agree(dynamic_prog, dynamic_runtime_set, tmp_path):
    full = frozenset(dynamic_runtime_set)
    for numbers, want_kill in ((full, False), (full - {1}, True)):
        allowlist = Allowlist("x86_64", numbers)
        lres = launch(dynamic_prog, [], allowlist, stdout=str(tmp_path / "l.out"))
        pres = patch(dynamic_prog, allowlist, out_path=tmp_path / "p.bin", libdir=tmp_path)
        prun = subprocess.run([str(pres.patched)], capture_output=True)
        assert lres.seccomp_killed == want_kill
        assert (prun.returncode == -signal.SIGSYS) == want_kill
        if not want_kill:
            assert lres.exit_code == 0 and prun.returncode == 0


def test_filter_precedes_target_entry(fixdir, tmp_path):
    # A probe syscall as the fixture's very first instruction must already
    # be filtered: nothing of the target runs unsandboxed.
    src = """
        .text
        .globl _start
        _start:
            mov $39, %eax
            syscall
            xor %edi, %edi
            mov $231, %eax
            syscall
    """
    prog = asmlib.build_static(fixdir, "prog_probe_first", src)
    result = launch(prog, [], _allow(231), stdout=str(tmp_path / "o"))
    assert result.seccomp_killed
    ok = launch(prog, [], _allow(39, 231), stdout=str(tmp_path / "o2"))
    assert ok.exit_code == 0
