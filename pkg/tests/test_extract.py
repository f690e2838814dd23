"""Syscall-number recovery against hand-assembled ground truth.

Each fixture is assembled from source; expected numbers come from the
source itself and site addresses from nm, so the assembler listing is the
oracle for the whole corpus.
"""

from __future__ import annotations

import time

import pytest

import asmlib
from conftest import requires_toolchain
from chestnut.elfio import load_image
from chestnut.extract import (
    DEFAULT_BUDGET,
    RES_IMMEDIATE,
    RES_REGISTER_CHAIN,
    RES_UNRESOLVED,
    backtrack_number,
    extract_all,
    find_syscall_sites,
)

pytestmark = requires_toolchain

# name -> (source, {site label: (number, resolution)}, extra unresolved count)
CORPUS: dict[str, tuple[str, dict[str, tuple[int | None, str]], int]] = {
    "imm_three": (
        """
        .text
        .globl _start
        _start:
            mov $0, %eax
        site_a: syscall
            mov $1, %eax
        site_b: syscall
            mov $60, %eax
        site_c: syscall
            ret
        """,
        {"site_a": (0, RES_IMMEDIATE), "site_b": (1, RES_IMMEDIATE), "site_c": (60, RES_IMMEDIATE)},
        0,
    ),
    "reg_chain": (
        """
        .text
        .globl _start
        _start:
            mov $1, %ebx
            mov %ebx, %eax
        site_a: syscall
            ret
        """,
        {"site_a": (1, RES_REGISTER_CHAIN)},
        0,
    ),
    "two_hop_chain": (
        """
        .text
        .globl _start
        _start:
            mov $39, %ecx
            mov %ecx, %ebx
            mov %ebx, %eax
        site_a: syscall
            ret
        """,
        {"site_a": (39, RES_REGISTER_CHAIN)},
        0,
    ),
    "subreg_al": (
        """
        .text
        .globl _start
        _start:
            xor %eax, %eax
            mov $3, %al
        site_a: syscall
            ret
        """,
        {"site_a": (3, RES_IMMEDIATE)},
        0,
    ),
    "subreg_ax": (
        """
        .text
        .globl _start
        _start:
            xor %eax, %eax
            mov $0x3c, %ax
        site_a: syscall
            ret
        """,
        {"site_a": (60, RES_IMMEDIATE)},
        0,
    ),
    "subreg_high8": (
        """
        .text
        .globl _start
        _start:
            xor %eax, %eax
            mov $1, %ah
            mov $4, %al
        site_a: syscall
            ret
        """,
        {"site_a": (260, RES_IMMEDIATE)},
        0,
    ),
    "movzx_chain": (
        """
        .text
        .globl _start
        _start:
            mov $7, %bl
            movzbl %bl, %eax
        site_a: syscall
            ret
        """,
        {"site_a": (7, RES_REGISTER_CHAIN)},
        0,
    ),
    "imm64_forms": (
        """
        .text
        .globl _start
        _start:
            movq $60, %rax
        site_a: syscall
            movabs $61, %rax
        site_b: syscall
            ret
        """,
        {"site_a": (60, RES_IMMEDIATE), "site_b": (61, RES_IMMEDIATE)},
        0,
    ),
    "arith": (
        """
        .text
        .globl _start
        _start:
            mov $58, %eax
            add $2, %eax
        site_a: syscall
            mov $65, %eax
            sub $5, %eax
        site_b: syscall
            ret
        """,
        {"site_a": (60, RES_IMMEDIATE), "site_b": (60, RES_IMMEDIATE)},
        0,
    ),
    "sign_extend_movslq": (
        """
        .text
        .globl _start
        _start:
            mov $9, %ebx
            movslq %ebx, %rax
        site_a: syscall
            ret
        """,
        {"site_a": (9, RES_REGISTER_CHAIN)},
        0,
    ),
    "sign_extend_cltq": (
        """
        .text
        .globl _start
        _start:
            mov $11, %eax
            cltq
        site_a: syscall
            ret
        """,
        {"site_a": (11, RES_REGISTER_CHAIN)},
        0,
    ),
    "jump_target_ambiguous": (
        """
        .text
        .globl _start
        _start:
            mov $0, %eax
            jmp site_a
        second:
            mov $1, %eax
            jmp site_a
        site_a: syscall
            ret
        """,
        {"site_a": (None, RES_UNRESOLVED)},
        0,
    ),
    "shared_stub": (
        """
        .text
        .globl _start
        _start:
            mov $39, %eax
        site_a: syscall
            mov $110, %eax
        site_b: syscall
            mov $102, %edi
            call stub
            mov $60, %eax
        site_c: syscall
            ret
        stub:
            mov %edi, %eax
        site_s: syscall
            ret
        """,
        {
            "site_a": (39, RES_IMMEDIATE),
            "site_b": (110, RES_IMMEDIATE),
            "site_c": (60, RES_IMMEDIATE),
            "site_s": (None, RES_UNRESOLVED),
        },
        0,
    ),
    "data_in_text": (
        """
        .text
        .globl _start
        _start:
            mov $60, %eax
        site_a: syscall
            ret
        blob:
            .byte 0xb8, 0x0f, 0x05, 0x00, 0x00
        """,
        {"site_a": (60, RES_IMMEDIATE)},
        1,
    ),
    "clobber_between": (
        """
        .text
        .globl _start
        _start:
            mov $1, %eax
            mov $2, %edi
            lea 8(%rsp), %rsi
            mov $6, %edx
        site_a: syscall
            ret
        """,
        {"site_a": (1, RES_IMMEDIATE)},
        0,
    ),
}


@pytest.fixture(scope="module")
def built(fixdir):
    out = {}
    for name, (source, expected, extra) in CORPUS.items():
        path = asmlib.build_static(fixdir, f"x_{name}", source)
        out[name] = (path, asmlib.symbol_addrs(path), expected, extra)
    return out


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_fixture_sites_and_numbers(built, name):
    path, addrs, expected, extra_unresolved = built[name]
    image, _ = load_image(path)
    start = time.monotonic()
    result = extract_all(image)
    assert time.monotonic() - start < 1.0

    expected_vaddrs = {addrs[label] for label in expected}
    found = {s.vaddr for s in result.sites}
    assert expected_vaddrs <= found

    by_vaddr = {s.vaddr: s for s in result.sites}
    for label, (number, resolution) in expected.items():
        site = by_vaddr[addrs[label]]
        assert site.number == number, f"{name}/{label}: {site}"
        assert site.resolution == resolution, f"{name}/{label}: {site}"
        assert site.chain_length <= DEFAULT_BUDGET

    want_numbers = {n for n, _ in expected.values() if n is not None}
    assert result.numbers == frozenset(want_numbers)
    want_unresolved = sum(1 for n, _ in expected.values() if n is None) + extra_unresolved
    assert len(result.unresolved) == want_unresolved


def test_empty_region_no_sites(fixdir):
    path = asmlib.build_static(
        fixdir,
        "x_nosyscall",
        """
        .text
        .globl _start
        _start:
            mov $1, %ebx
            ret
        """,
    )
    image, _ = load_image(path)
    assert find_syscall_sites(image) == []
    assert extract_all(image).numbers == frozenset()


def test_sites_ascending_and_unique(built):
    path, _, _, _ = built["shared_stub"]
    image, _ = load_image(path)
    sites = find_syscall_sites(image)
    assert sites == sorted(set(sites))
    for v in sites:
        off = None
        for r in image.exec_regions:
            if r.vaddr <= v < r.vaddr + r.size:
                off = r.offset + (v - r.vaddr)
        assert image.data[off : off + 2] == b"\x0f\x05"


def test_budget_constant_and_monotonicity(fixdir):
    source = """
        .text
        .globl _start
        _start:
            mov $60, %eax
            .rept 30
            nop
            .endr
        site_a: syscall
            ret
    """
    path = asmlib.build_static(fixdir, "x_chain31", source)
    addrs = asmlib.symbol_addrs(path)
    image, _ = load_image(path)
    site = addrs["site_a"]

    assert DEFAULT_BUDGET == 30
    at_default = backtrack_number(image, site)
    assert at_default.resolution == RES_UNRESOLVED
    assert at_default.chain_length == 30

    at_35 = backtrack_number(image, site, budget=35)
    assert at_35.number == 60
    assert at_35.chain_length == 31

    # Monotonicity: growing the budget never loses or changes resolutions.
    previous: dict[int, int] = {}
    for budget in (5, 10, 30, 31, 40, 100):
        res = extract_all(image, budget=budget)
        current = {s.vaddr: s.number for s in res.sites if s.number is not None}
        for vaddr, number in previous.items():
            assert current.get(vaddr) == number
        previous = current


def test_int80_diagnostic(fixdir):
    path = asmlib.build_static(
        fixdir,
        "x_int80",
        """
        .text
        .globl _start
        _start:
            mov $1, %eax
            int $0x80
            mov $60, %eax
        site_a: syscall
            ret
        """,
    )
    image, _ = load_image(path)
    result = extract_all(image)
    assert result.numbers == frozenset({60})
    assert any("int 0x80" in d for d in result.diagnostics)


def test_determinism(built):
    path, _, _, _ = built["shared_stub"]
    image, _ = load_image(path)
    a = extract_all(image)
    b = extract_all(image)
    assert a == b


def test_aarch64_interface_reserved(fixdir, tmp_path):
    import struct as _struct

    from chestnut.errors import UnsupportedArch

    path = asmlib.build_static(fixdir, "x_forelf", CORPUS["imm_three"][0])
    data = bytearray(path.read_bytes())
    _struct.pack_into("<H", data, 18, 183)  # e_machine = EM_AARCH64
    alt = tmp_path / "aarch64_elf"
    alt.write_bytes(data)

    image, _ = load_image(alt)
    assert image.arch == "aarch64"
    with pytest.raises(UnsupportedArch):
        extract_all(image)
    with pytest.raises(UnsupportedArch):
        find_syscall_sites(image)
