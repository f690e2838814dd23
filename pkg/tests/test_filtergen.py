"""Filter builder vs the reference interpreter, plus kernel semantics."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chestnut.errors import LoadRejected
from chestnut.filtergen import (
    ALLOW,
    AUDIT_ARCH_AARCH64,
    AUDIT_ARCH_X86_64,
    Allowlist,
    BPF_ABS,
    BPF_JEQ,
    BPF_JMP,
    BPF_K,
    BPF_LD,
    BPF_MAXINSNS,
    BPF_RET,
    BPF_W,
    FilterProgram,
    KILL,
    KILL_PROCESS,
    SECCOMP_RET_ALLOW,
    SECCOMP_RET_KILL_PROCESS,
    SockFilter,
    Verdict,
    build_filter,
    emit_raw,
    interpret,
    parse_raw,
    read_allowlist,
    validate_program,
    write_allowlist,
)


def verdicts(numbers, default=KILL_PROCESS):
    program = build_filter(Allowlist("x86_64", frozenset(numbers)), default)
    return program


def test_membership_basic():
    program = verdicts({0, 1, 60})
    assert interpret(program, AUDIT_ARCH_X86_64, 1) == ALLOW
    assert interpret(program, AUDIT_ARCH_X86_64, 0) == ALLOW
    assert interpret(program, AUDIT_ARCH_X86_64, 60) == ALLOW
    assert interpret(program, AUDIT_ARCH_X86_64, 59) == KILL  # execve blocked
    assert interpret(program, AUDIT_ARCH_X86_64, 2) == KILL


def test_wrong_arch_never_allows():
    program = verdicts({0, 1, 60})
    for nr in (0, 1, 60, 59):
        assert interpret(program, AUDIT_ARCH_AARCH64, nr) == KILL


def test_empty_allowlist_errno_mode():
    program = verdicts(set(), default=("errno", 1))
    for nr in range(0, 512, 37):
        assert interpret(program, AUDIT_ARCH_X86_64, nr) == Verdict("ERRNO", 1)


def test_empty_program_is_load_error():
    empty = FilterProgram((), KILL_PROCESS, AUDIT_ARCH_X86_64)
    with pytest.raises(LoadRejected):
        interpret(empty, AUDIT_ARCH_X86_64, 0)


def test_handwritten_four_instruction_filter():
    # Hand-computed trace: allow only nr 60.
    program = FilterProgram(
        (
            SockFilter(BPF_LD | BPF_W | BPF_ABS, 0, 0, 0),  # A := nr
            SockFilter(BPF_JMP | BPF_JEQ | BPF_K, 0, 1, 60),
            SockFilter(BPF_RET | BPF_K, 0, 0, SECCOMP_RET_ALLOW),
            SockFilter(BPF_RET | BPF_K, 0, 0, SECCOMP_RET_KILL_PROCESS),
        ),
        KILL_PROCESS,
        AUDIT_ARCH_X86_64,
    )
    assert interpret(program, AUDIT_ARCH_X86_64, 60) == ALLOW
    assert interpret(program, AUDIT_ARCH_X86_64, 59) == KILL
    assert interpret(program, AUDIT_ARCH_X86_64, 61) == KILL


def test_out_of_bounds_jump_rejected():
    program = FilterProgram(
        (SockFilter(BPF_JMP | BPF_JEQ | BPF_K, 5, 0, 1),
         SockFilter(BPF_RET | BPF_K, 0, 0, SECCOMP_RET_ALLOW)),
        KILL_PROCESS,
        AUDIT_ARCH_X86_64,
    )
    with pytest.raises(LoadRejected):
        validate_program(program)


def test_program_not_ending_in_ret_rejected():
    program = FilterProgram(
        (SockFilter(BPF_LD | BPF_W | BPF_ABS, 0, 0, 0),),
        KILL_PROCESS,
        AUDIT_ARCH_X86_64,
    )
    with pytest.raises(LoadRejected):
        validate_program(program)


def test_349_entry_allowlist_fits():
    numbers = frozenset(range(335)) | frozenset(range(400, 414))
    assert len(numbers) == 349
    program = build_filter(Allowlist("x86_64", numbers))
    assert len(program.instructions) <= BPF_MAXINSNS
    for nr in (0, 334, 399, 400, 413, 414, 511):
        want = ALLOW if nr in numbers else KILL
        assert interpret(program, AUDIT_ARCH_X86_64, nr) == want


def test_worst_case_alternating_allowlist_fits():
    numbers = frozenset(range(0, 512, 2))
    program = build_filter(Allowlist("x86_64", numbers))
    assert len(program.instructions) <= BPF_MAXINSNS
    for nr in range(512):
        want = ALLOW if nr % 2 == 0 else KILL
        assert interpret(program, AUDIT_ARCH_X86_64, nr) == want


def test_exhaustive_random_allowlists():
    rng = random.Random(0xC0FFEE)
    for _ in range(50):
        size = rng.randint(0, 120)
        numbers = frozenset(rng.sample(range(512), size))
        program = build_filter(Allowlist("x86_64", numbers))
        for nr in range(512):
            got = interpret(program, AUDIT_ARCH_X86_64, nr)
            assert (got == ALLOW) == (nr in numbers), (sorted(numbers), nr, got)


@given(st.sets(st.integers(0, 511), max_size=511))
@settings(max_examples=40, deadline=None)
def test_membership_property(numbers):
    program = build_filter(Allowlist("x86_64", frozenset(numbers)))
    probe = set(range(0, 512, 13)) | set(numbers) | {0, 511}
    for nr in probe:
        got = interpret(program, AUDIT_ARCH_X86_64, nr)
        assert (got == ALLOW) == (nr in numbers)


def test_allowlist_validation():
    with pytest.raises(ValueError):
        Allowlist("x86_64", frozenset({512}))
    with pytest.raises(ValueError):
        Allowlist("mips", frozenset({1}))


def test_raw_roundtrip(tmp_path):
    program = verdicts({1, 2, 3, 60})
    out = tmp_path / "f.bpf"
    emit_raw(program, out)
    raw = out.read_bytes()
    assert len(raw) == 8 * len(program.instructions)
    again = parse_raw(raw)
    assert again.instructions == program.instructions
    for nr in range(80):
        assert interpret(again, AUDIT_ARCH_X86_64, nr) == interpret(
            program, AUDIT_ARCH_X86_64, nr
        )


def test_allowlist_file_roundtrip(tmp_path):
    out = tmp_path / "allow.json"
    write_allowlist(out, Allowlist("x86_64", frozenset({3, 1, 2})))
    loaded = read_allowlist(out)
    assert loaded.numbers == frozenset({1, 2, 3})
    assert out.read_text() == out.read_text()  # stable bytes
