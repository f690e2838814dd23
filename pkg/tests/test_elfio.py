"""ELF load, note round-trips, and dependency injection."""

from __future__ import annotations

import struct
import subprocess

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import asmlib
from conftest import requires_toolchain
from chestnut import elfio
from chestnut.elfio import (
    NOTE_OWNER,
    NOTE_TYPE_SYSCALL_LIST,
    decode_syscall_list,
    encode_syscall_list,
    inject_dependency,
    load_image,
    read_annotation,
    syscall_list_note,
    write_annotation,
)
from chestnut.errors import NoRoomForNote, NotElf, StaticBinary, Truncated, UnsupportedArch

pytestmark = requires_toolchain

STATIC_SRC = """
    .text
    .globl _start
    _start:
        mov $60, %eax
        xor %edi, %edi
        syscall
"""

LIB_SRC = """
    .text
    .globl fa
    fa:
        mov $39, %eax
        syscall
        ret
"""


@pytest.fixture(scope="module")
def static_bin(fixdir):
    return asmlib.build_static(fixdir, "e_static", STATIC_SRC)


@pytest.fixture(scope="module")
def shared_lib(fixdir):
    return asmlib.build_shared(fixdir, "libfa.so", LIB_SRC)


@pytest.fixture(scope="module")
def dynamic_bin(fixdir, shared_lib):
    src = """
        .text
        .globl _start
        _start:
            call fa@plt
            mov $60, %eax
            xor %edi, %edi
            syscall
    """
    return asmlib.build_dynamic(fixdir, "e_dynamic", src, libs=[shared_lib], rpath=fixdir)


def test_load_static(static_bin):
    image, table = load_image(static_bin)
    assert image.arch == "x86_64"
    assert image.kind == "executable-static"
    assert image.is_pic is False
    assert table.needed == ()
    assert table.imports == ()
    assert image.exec_regions
    for region in image.exec_regions:
        assert region.offset + region.size <= len(image.data)


def test_load_dynamic_needed_order(dynamic_bin):
    image, table = load_image(dynamic_bin)
    assert image.kind == "executable-dynamic"
    assert table.needed == ("libfa.so",)
    assert any(name == "fa" for name, _ in table.imports)


def test_load_shared(shared_lib):
    image, table = load_image(shared_lib)
    assert image.kind == "shared-object"
    assert image.is_pic is True
    assert any(name == "fa" for name, _ in table.exports)


def test_not_elf(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"\x7fELX not an elf")
    with pytest.raises(NotElf):
        load_image(p)
    with pytest.raises(NotElf):
        load_image(tmp_path / "missing")


def test_unsupported_class(tmp_path, static_bin):
    data = bytearray(static_bin.read_bytes())
    data[4] = 1  # ELFCLASS32
    p = tmp_path / "elf32"
    p.write_bytes(data)
    with pytest.raises(UnsupportedArch):
        load_image(p)


def test_truncated_sections(tmp_path, static_bin):
    data = static_bin.read_bytes()
    p = tmp_path / "trunc"
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises((Truncated, NotElf)):
        load_image(p)


def test_parser_never_crashes_on_mutations(static_bin):
    data = bytearray(static_bin.read_bytes())
    for cut in (17, 52, 63, 64, 100, len(data) - 1):
        try:
            elfio.ElfFile(bytes(data[:cut]), origin="mutant")
        except (NotElf, UnsupportedArch, Truncated):
            pass
    for off in range(16, 64):
        mutant = bytearray(data)
        mutant[off] = 0xFF
        try:
            elfio.ElfFile(bytes(mutant), origin="mutant")
        except (NotElf, UnsupportedArch, Truncated):
            pass


@given(st.lists(st.integers(min_value=0, max_value=511), unique=True))
@settings(max_examples=200, deadline=None)
def test_payload_roundtrip(nums):
    payload = encode_syscall_list(nums)
    assert decode_syscall_list(payload) == frozenset(nums)
    assert encode_syscall_list(sorted(set(nums))) == payload


def test_payload_rejects_malformed():
    with pytest.raises(ValueError):
        decode_syscall_list(b"\x01")
    with pytest.raises(ValueError):
        decode_syscall_list(struct.pack("<I", 3) + struct.pack("<II", 1, 2))
    with pytest.raises(ValueError):
        decode_syscall_list(struct.pack("<III", 2, 5, 5))


def test_note_roundtrip(static_bin, tmp_path):
    image, _ = load_image(static_bin)
    assert read_annotation(image) is None
    note = syscall_list_note({0, 1, 60})
    out = write_annotation(image, note, out_path=tmp_path / "annotated")

    image2, _ = load_image(out)
    got = read_annotation(image2)
    assert got is not None
    assert got.note_name == NOTE_OWNER
    assert got.note_type == NOTE_TYPE_SYSCALL_LIST
    assert decode_syscall_list(got.payload) == frozenset({0, 1, 60})

    # Structure preserved.
    image1, table1 = load_image(static_bin)
    assert image2.exec_regions == image1.exec_regions
    assert image2.entry_vaddr == image1.entry_vaddr


def test_note_replacement_not_accumulation(static_bin, tmp_path):
    image, _ = load_image(static_bin)
    first = write_annotation(image, syscall_list_note({0, 1, 60}), out_path=tmp_path / "a1")
    image1, _ = load_image(first)
    second = write_annotation(image1, syscall_list_note({2}), out_path=tmp_path / "a2")
    image2, _ = load_image(second)
    assert decode_syscall_list(read_annotation(image2).payload) == frozenset({2})


def test_note_readable_by_readelf(static_bin, tmp_path):
    image, _ = load_image(static_bin)
    out = write_annotation(image, syscall_list_note({1, 2, 3}), out_path=tmp_path / "rdelf")
    proc = subprocess.run(["readelf", "-S", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert ".note.chestnut" in proc.stdout


def test_annotated_binary_still_runs(static_bin, tmp_path):
    image, _ = load_image(static_bin)
    out = write_annotation(image, syscall_list_note({60}), out_path=tmp_path / "runnable")
    proc = subprocess.run([str(out)], capture_output=True)
    assert proc.returncode == 0


def test_in_place_requires_existing(static_bin, tmp_path):
    image, _ = load_image(static_bin)
    with pytest.raises(NoRoomForNote):
        write_annotation(image, syscall_list_note({1}), out_path=tmp_path / "x", in_place=True)
    big = write_annotation(image, syscall_list_note(range(100)), out_path=tmp_path / "big")
    image_big, _ = load_image(big)
    small = write_annotation(image_big, syscall_list_note({4}), out_path=tmp_path / "small", in_place=True)
    image_small, _ = load_image(small)
    assert decode_syscall_list(read_annotation(image_small).payload) == frozenset({4})
    with pytest.raises(NoRoomForNote):
        write_annotation(
            load_image(small)[0],
            syscall_list_note(range(200)),
            out_path=tmp_path / "toobig",
            in_place=True,
        )


def test_inject_static_rejected(static_bin, tmp_path):
    image, _ = load_image(static_bin)
    with pytest.raises(StaticBinary):
        inject_dependency(image, "libx.so", out_path=tmp_path / "nope")


def test_inject_prepends_needed(dynamic_bin, tmp_path):
    image, table = load_image(dynamic_bin)
    assert table.needed == ("libfa.so",)
    out = inject_dependency(image, "libinjected.so", out_path=tmp_path / "injected")
    _, table2 = load_image(out)
    assert table2.needed == ("libinjected.so", "libfa.so")


def test_inject_idempotent(dynamic_bin, tmp_path):
    image, _ = load_image(dynamic_bin)
    once = inject_dependency(image, "libinjected.so", out_path=tmp_path / "i1")
    image1, _ = load_image(once)
    twice = inject_dependency(image1, "libinjected.so", out_path=tmp_path / "i2")
    assert once.read_bytes() == twice.read_bytes()


def test_injected_binary_runs(dynamic_bin, fixdir, tmp_path):
    # The injected library must exist somewhere the loader finds it.
    lib = asmlib.build_c_shared(fixdir, "libnoop.so", "int chestnut_noop;\n")
    image, _ = load_image(dynamic_bin)
    out = inject_dependency(image, "libnoop.so", out_path=tmp_path / "runs", runpath=str(fixdir))
    proc = subprocess.run([str(out)], capture_output=True)
    assert proc.returncode == 0, proc.stderr
