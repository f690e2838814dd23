"""ELF64 reading and rewriting.

Covers exactly what the pipeline needs: executable regions, dynamic
symbols and DT_NEEDED, custom note sections carrying syscall annotations
or call-graph documents, and two binary patches (append/replace the
annotation note, inject a shared-object dependency up front).

Only 64-bit little-endian ELF is supported.  All parsing is bounds-checked
against the file: malformed input raises a typed error, never IndexError.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import NoRoomForNote, NotElf, StaticBinary, Truncated, UnsupportedArch

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1

ET_EXEC = 2
ET_DYN = 3

EM_X86_64 = 62
EM_AARCH64 = 183

PT_LOAD = 1
PT_DYNAMIC = 2
PT_INTERP = 3
PT_NOTE = 4
PT_PHDR = 6

PF_X = 0x1
PF_W = 0x2
PF_R = 0x4

SHT_PROGBITS = 1
SHT_SYMTAB = 2
SHT_STRTAB = 3
SHT_RELA = 4
SHT_DYNAMIC = 6
SHT_NOTE = 7
SHT_DYNSYM = 11
SHT_INIT_ARRAY = 14
SHT_FINI_ARRAY = 15
SHT_GNU_VERSYM = 0x6FFFFFFF
SHT_GNU_VERNEED = 0x6FFFFFFE

SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4

DT_NULL = 0
DT_NEEDED = 1
DT_STRTAB = 5
DT_SYMTAB = 6
DT_STRSZ = 10
DT_INIT = 12
DT_FINI = 13
DT_RUNPATH = 29
DT_FLAGS_1 = 0x6FFFFFFB
DF_1_PIE = 0x08000000

STB_LOCAL = 0
STB_GLOBAL = 1
STB_WEAK = 2

STT_NOTYPE = 0
STT_OBJECT = 1
STT_FUNC = 2
STT_GNU_IFUNC = 10

SHN_UNDEF = 0

R_X86_64_64 = 1
R_X86_64_GLOB_DAT = 6
R_X86_64_JUMP_SLOT = 7
R_X86_64_RELATIVE = 8
R_X86_64_IRELATIVE = 37

# Identity of the annotation note this toolchain owns.
NOTE_OWNER = "CHESTNUT"
NOTE_SECTION = ".note.chestnut"
NOTE_TYPE_SYSCALL_LIST = 1
NOTE_TYPE_CALLGRAPH_DOC = 2

OUTPUT_SUFFIX = ".chestnut"

_EHDR = struct.Struct("<HHIQQQIHHHHHH")  # after e_ident[16]
_PHDR = struct.Struct("<IIQQQQQQ")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")
_DYN = struct.Struct("<qQ")
_RELA = struct.Struct("<QQq")


@dataclass(frozen=True)
class Section:
    name: str
    sh_type: int
    flags: int
    addr: int
    offset: int
    size: int
    link: int
    info: int
    addralign: int
    entsize: int


@dataclass(frozen=True)
class Segment:
    p_type: int
    flags: int
    offset: int
    vaddr: int
    filesz: int
    memsz: int
    align: int


@dataclass(frozen=True)
class Symbol:
    name: str
    value: int
    size: int
    bind: int
    sym_type: int
    shndx: int
    version: str | None = None


@dataclass(frozen=True)
class Rela:
    offset: int
    r_type: int
    sym_index: int
    addend: int


class ElfFile:
    """Parsed view of one ELF64 little-endian file."""

    def __init__(self, data: bytes, origin: str = "<bytes>"):
        self.data = data
        self.origin = origin
        self._parse_header()
        self.segments = self._parse_segments()
        self.sections = self._parse_sections()
        self.dynamic = self._parse_dynamic()
        self.needed = self._needed_names()
        self.symtab = self._parse_symbols(SHT_SYMTAB)
        self.dynsym = self._parse_symbols(SHT_DYNSYM)
        self._attach_versions()

    @classmethod
    def from_path(cls, path: str | os.PathLike) -> "ElfFile":
        p = Path(path)
        try:
            data = p.read_bytes()
        except FileNotFoundError:
            raise NotElf(f"no such file: {p}") from None
        return cls(data, origin=str(p))

    # -- low-level helpers -------------------------------------------------

    def _slice(self, offset: int, size: int, what: str) -> bytes:
        if offset < 0 or size < 0 or offset + size > len(self.data):
            raise Truncated(
                f"{what} at offset {offset:#x} size {size:#x} exceeds "
                f"file size {len(self.data):#x} ({self.origin})"
            )
        return self.data[offset : offset + size]

    def _cstr(self, table: bytes, offset: int) -> str:
        if offset >= len(table):
            return ""
        end = table.find(b"\x00", offset)
        if end < 0:
            end = len(table)
        return table[offset:end].decode("utf-8", errors="replace")

    def vaddr_to_offset(self, vaddr: int) -> int | None:
        for seg in self.segments:
            if seg.p_type == PT_LOAD and seg.vaddr <= vaddr < seg.vaddr + seg.filesz:
                return seg.offset + (vaddr - seg.vaddr)
        return None

    def read_vaddr(self, vaddr: int, size: int, what: str = "virtual range") -> bytes:
        off = self.vaddr_to_offset(vaddr)
        if off is None:
            raise Truncated(f"{what}: vaddr {vaddr:#x} not file-backed ({self.origin})")
        return self._slice(off, size, what)

    # -- header / tables ---------------------------------------------------

    def _parse_header(self) -> None:
        if len(self.data) < 16 or self.data[:4] != ELF_MAGIC:
            raise NotElf(f"bad ELF magic ({self.origin})")
        if self.data[4] != ELFCLASS64:
            raise UnsupportedArch(f"only ELF64 supported, ei_class={self.data[4]} ({self.origin})")
        if self.data[5] != ELFDATA2LSB:
            raise UnsupportedArch(f"only little-endian supported, ei_data={self.data[5]} ({self.origin})")
        if len(self.data) < 16 + _EHDR.size:
            raise Truncated(f"ELF header: file only {len(self.data)} bytes ({self.origin})")
        (
            self.e_type,
            self.e_machine,
            _version,
            self.e_entry,
            self.e_phoff,
            self.e_shoff,
            _flags,
            _ehsize,
            self.e_phentsize,
            self.e_phnum,
            self.e_shentsize,
            self.e_shnum,
            self.e_shstrndx,
        ) = _EHDR.unpack_from(self.data, 16)

    def _parse_segments(self) -> list[Segment]:
        segs: list[Segment] = []
        if self.e_phoff == 0:
            return segs
        if self.e_phentsize < _PHDR.size:
            raise Truncated(f"program header entsize {self.e_phentsize} ({self.origin})")
        for i in range(self.e_phnum):
            raw = self._slice(self.e_phoff + i * self.e_phentsize, _PHDR.size, f"program header {i}")
            p_type, flags, off, vaddr, _paddr, filesz, memsz, align = _PHDR.unpack(raw)
            if p_type != 0 and filesz and off + filesz > len(self.data):
                raise Truncated(f"segment {i} data (offset {off:#x}+{filesz:#x}) ({self.origin})")
            segs.append(Segment(p_type, flags, off, vaddr, filesz, memsz, align))
        return segs

    def _parse_sections(self) -> list[Section]:
        if self.e_shoff == 0 or self.e_shnum == 0:
            return []
        if self.e_shentsize < _SHDR.size:
            raise Truncated(f"section header entsize {self.e_shentsize} ({self.origin})")
        raws = []
        for i in range(self.e_shnum):
            raw = self._slice(self.e_shoff + i * self.e_shentsize, _SHDR.size, f"section header {i}")
            raws.append(_SHDR.unpack(raw))
        if self.e_shstrndx >= len(raws):
            raise Truncated(f"e_shstrndx {self.e_shstrndx} out of range ({self.origin})")
        str_off, str_size = raws[self.e_shstrndx][4], raws[self.e_shstrndx][5]
        shstr = self._slice(str_off, str_size, "section name string table")
        out = []
        for i, (nameoff, sh_type, flags, addr, off, size, link, info, align, entsize) in enumerate(raws):
            if sh_type != 8 and sh_type != 0 and size and off + size > len(self.data):  # 8 = SHT_NOBITS
                raise Truncated(f"section {i} data (offset {off:#x}+{size:#x}) ({self.origin})")
            out.append(Section(self._cstr(shstr, nameoff), sh_type, flags, addr, off, size, link, info, align, entsize))
        return out

    def section_by_name(self, name: str) -> Section | None:
        for s in self.sections:
            if s.name == name:
                return s
        return None

    def section_data(self, s: Section) -> bytes:
        return self._slice(s.offset, s.size, f"section {s.name or '?'}")

    def _parse_dynamic(self) -> list[tuple[int, int]]:
        for seg in self.segments:
            if seg.p_type == PT_DYNAMIC:
                raw = self._slice(seg.offset, seg.filesz, "dynamic segment")
                entries = []
                for i in range(len(raw) // _DYN.size):
                    tag, val = _DYN.unpack_from(raw, i * _DYN.size)
                    if tag == DT_NULL:
                        break
                    entries.append((tag, val))
                return entries
        return []

    def dyn_val(self, tag: int) -> int | None:
        for t, v in self.dynamic:
            if t == tag:
                return v
        return None

    def _dynstr(self) -> bytes:
        strtab = self.dyn_val(DT_STRTAB)
        strsz = self.dyn_val(DT_STRSZ)
        if strtab is None or strsz is None:
            sec = self.section_by_name(".dynstr")
            return self.section_data(sec) if sec else b""
        return self.read_vaddr(strtab, strsz, "dynamic string table")

    def _needed_names(self) -> list[str]:
        if not self.dynamic:
            return []
        strtab = self._dynstr()
        return [self._cstr(strtab, val) for tag, val in self.dynamic if tag == DT_NEEDED]

    def _parse_symbols(self, sh_type: int) -> list[Symbol]:
        for s in self.sections:
            if s.sh_type != sh_type:
                continue
            if s.entsize == 0:
                raise Truncated(f"symbol table {s.name} entsize 0 ({self.origin})")
            if s.link >= len(self.sections):
                raise Truncated(f"symbol table {s.name} string link {s.link} ({self.origin})")
            strtab = self.section_data(self.sections[s.link])
            raw = self.section_data(s)
            syms = []
            for i in range(len(raw) // s.entsize):
                nameoff, info, _other, shndx, value, size = _SYM.unpack_from(raw, i * s.entsize)
                syms.append(
                    Symbol(self._cstr(strtab, nameoff), value, size, info >> 4, info & 0xF, shndx)
                )
            return syms
        return []

    def _attach_versions(self) -> None:
        """Resolve .gnu.version indices to version names on import symbols."""
        versym = next((s for s in self.sections if s.sh_type == SHT_GNU_VERSYM), None)
        verneed = next((s for s in self.sections if s.sh_type == SHT_GNU_VERNEED), None)
        if versym is None or verneed is None or not self.dynsym:
            return
        raw = self.section_data(versym)
        indices = list(struct.unpack_from(f"<{len(raw) // 2}H", raw))
        names: dict[int, str] = {}
        data = self.section_data(verneed)
        strtab = self._dynstr()
        pos = 0
        for _ in range(verneed.info):
            if pos + 16 > len(data):
                break
            _ver, cnt, _file, aux, nxt = struct.unpack_from("<HHIII", data, pos)
            apos = pos + aux
            for _ in range(cnt):
                if apos + 16 > len(data):
                    break
                _hash, _flags, other, nameoff, anext = struct.unpack_from("<IHHII", data, apos)
                names[other & 0x7FFF] = self._cstr(strtab, nameoff)
                if anext == 0:
                    break
                apos += anext
            if nxt == 0:
                break
            pos += nxt
        versioned = []
        for i, sym in enumerate(self.dynsym):
            ver = None
            if i < len(indices):
                ver = names.get(indices[i] & 0x7FFF)
            versioned.append(Symbol(sym.name, sym.value, sym.size, sym.bind, sym.sym_type, sym.shndx, ver))
        self.dynsym = versioned

    def interp(self) -> str | None:
        for seg in self.segments:
            if seg.p_type == PT_INTERP and seg.filesz:
                raw = self._slice(seg.offset, seg.filesz, "interpreter path")
                return raw.rstrip(b"\x00").decode("utf-8", errors="replace")
        return None

    def relocations(self) -> list[Rela]:
        out = []
        for s in self.sections:
            if s.sh_type != SHT_RELA:
                continue
            raw = self.section_data(s)
            for i in range(len(raw) // _RELA.size):
                off, info, addend = _RELA.unpack_from(raw, i * _RELA.size)
                out.append(Rela(off, info & 0xFFFFFFFF, info >> 32, addend))
        return out


# ---------------------------------------------------------------------------
# Public image / symbol-table views
# ---------------------------------------------------------------------------

KIND_STATIC = "executable-static"
KIND_DYNAMIC = "executable-dynamic"
KIND_SHARED = "shared-object"


@dataclass(frozen=True)
class ExecRegion:
    vaddr: int
    size: int
    offset: int


@dataclass(frozen=True)
class ElfImage:
    path: str
    arch: str
    kind: str
    entry_vaddr: int
    exec_regions: tuple[ExecRegion, ...]
    is_pic: bool
    elf: ElfFile = field(repr=False, compare=False)

    @property
    def data(self) -> bytes:
        return self.elf.data


@dataclass(frozen=True)
class DynamicSymbolTable:
    imports: tuple[tuple[str, str | None], ...]
    exports: tuple[tuple[str, int], ...]
    needed: tuple[str, ...]


@dataclass(frozen=True)
class AnnotationNote:
    note_name: str
    note_type: int
    payload: bytes


def _classify(elf: ElfFile) -> tuple[str, bool]:
    has_interp = any(s.p_type == PT_INTERP for s in elf.segments)
    if elf.e_type == ET_EXEC:
        kind = KIND_DYNAMIC if (has_interp or elf.dynamic) else KIND_STATIC
        return kind, False
    if elf.e_type == ET_DYN:
        flags1 = elf.dyn_val(DT_FLAGS_1) or 0
        if has_interp or flags1 & DF_1_PIE:
            return KIND_DYNAMIC, True
        return KIND_SHARED, True
    raise UnsupportedArch(f"unsupported ELF type e_type={elf.e_type} ({elf.origin})")


def load_image(path: str | os.PathLike) -> tuple[ElfImage, DynamicSymbolTable]:
    """Parse an ELF file into the pipeline's image + dynamic-symbol views."""
    elf = ElfFile.from_path(path)
    if elf.e_machine == EM_X86_64:
        arch = "x86_64"
    elif elf.e_machine == EM_AARCH64:
        arch = "aarch64"
    else:
        raise UnsupportedArch(f"unsupported machine e_machine={elf.e_machine} ({elf.origin})")
    kind, is_pic = _classify(elf)

    regions = []
    for seg in elf.segments:
        if seg.p_type == PT_LOAD and seg.flags & PF_X and seg.filesz:
            regions.append(ExecRegion(seg.vaddr, seg.filesz, seg.offset))
    regions.sort(key=lambda r: r.vaddr)
    for a, b in zip(regions, regions[1:]):
        if a.vaddr + a.size > b.vaddr:
            raise NotElf(f"overlapping executable segments at {a.vaddr:#x}/{b.vaddr:#x} ({elf.origin})")

    imports = []
    exports = []
    for sym in elf.dynsym:
        if not sym.name:
            continue
        if sym.shndx == SHN_UNDEF:
            imports.append((sym.name, sym.version))
        else:
            exports.append((sym.name, sym.value))

    image = ElfImage(str(path), arch, kind, elf.e_entry, tuple(regions), is_pic, elf)
    table = DynamicSymbolTable(tuple(imports), tuple(exports), tuple(elf.needed))
    return image, table


# ---------------------------------------------------------------------------
# Annotation notes
# ---------------------------------------------------------------------------

def encode_syscall_list(numbers) -> bytes:
    """count:u32le followed by that many u32le syscall numbers, ascending."""
    nums = sorted(set(int(n) for n in numbers))
    if nums and (nums[0] < 0 or nums[-1] > 0xFFFFFFFF):
        raise ValueError(f"syscall number out of u32 range: {nums[0]}..{nums[-1]}")
    return struct.pack(f"<I{len(nums)}I", len(nums), *nums)


def decode_syscall_list(payload: bytes) -> frozenset[int]:
    if len(payload) < 4:
        raise ValueError("syscall-list payload shorter than its count field")
    (count,) = struct.unpack_from("<I", payload, 0)
    if len(payload) != 4 + 4 * count:
        raise ValueError(f"syscall-list payload length {len(payload)} does not match count {count}")
    nums = struct.unpack_from(f"<{count}I", payload, 4)
    for a, b in zip(nums, nums[1:]):
        if b <= a:
            raise ValueError(f"syscall-list not strictly ascending at {a}, {b}")
    return frozenset(nums)


def syscall_list_note(numbers) -> AnnotationNote:
    return AnnotationNote(NOTE_OWNER, NOTE_TYPE_SYSCALL_LIST, encode_syscall_list(numbers))


def callgraph_note(doc_json: bytes) -> AnnotationNote:
    return AnnotationNote(NOTE_OWNER, NOTE_TYPE_CALLGRAPH_DOC, doc_json)


def _pad4(b: bytes) -> bytes:
    return b + b"\x00" * (-len(b) % 4)


def _encode_note(note: AnnotationNote) -> bytes:
    name = note.note_name.encode() + b"\x00"
    return (
        struct.pack("<III", len(name), len(note.payload), note.note_type)
        + _pad4(name)
        + _pad4(note.payload)
    )


def _decode_notes(raw: bytes) -> list[AnnotationNote]:
    notes = []
    pos = 0
    while pos + 12 <= len(raw):
        namesz, descsz, ntype = struct.unpack_from("<III", raw, pos)
        pos += 12
        name = raw[pos : pos + namesz].rstrip(b"\x00").decode("utf-8", errors="replace")
        pos += len(_pad4(raw[pos : pos + namesz]))
        payload = raw[pos : pos + descsz]
        if len(payload) != descsz:
            break
        pos += len(_pad4(payload))
        notes.append(AnnotationNote(name, ntype, payload))
    return notes


def read_annotation(image: ElfImage) -> AnnotationNote | None:
    """Return the toolchain's note from the image, if present."""
    elf = image.elf
    candidates: list[bytes] = []
    for s in elf.sections:
        if s.sh_type == SHT_NOTE:
            candidates.append(elf.section_data(s))
    if not candidates:
        for seg in elf.segments:
            if seg.p_type == PT_NOTE and seg.filesz:
                candidates.append(elf._slice(seg.offset, seg.filesz, "note segment"))
    for raw in candidates:
        for note in _decode_notes(raw):
            if note.note_name == NOTE_OWNER:
                return note
    return None


def _default_out(path: str, out_path: str | os.PathLike | None) -> Path:
    return Path(out_path) if out_path else Path(str(path) + OUTPUT_SUFFIX)


def _write_replacing(out: Path, data: bytes) -> Path:
    fd, tmp = tempfile.mkstemp(dir=str(out.parent), prefix=out.name + ".")
    try:
        os.write(fd, data)
    finally:
        os.close(fd)
    os.chmod(tmp, 0o755)
    os.replace(tmp, out)
    return out


def _align(n: int, a: int) -> int:
    return (n + a - 1) & ~(a - 1)


def write_annotation(
    image: ElfImage,
    note: AnnotationNote,
    out_path: str | os.PathLike | None = None,
    in_place: bool = False,
) -> Path:
    """Write (or replace) the annotation note, returning the new file's path.

    Default mode appends the note content at end of file and either reuses
    the existing section header or appends a new section (rewriting the
    section header table at the end of the file).  Segments are never
    touched, so the output loads exactly like the input.
    """
    if not note.payload:
        raise ValueError("annotation payload must be non-empty")
    elf = image.elf
    data = bytearray(elf.data)
    content = _encode_note(note)
    existing_idx = next(
        (i for i, s in enumerate(elf.sections) if s.name == NOTE_SECTION), None
    )

    if in_place:
        if existing_idx is None:
            raise NoRoomForNote(f"no existing {NOTE_SECTION} section to reuse ({elf.origin})")
        old = elf.sections[existing_idx]
        if len(content) > old.size:
            raise NoRoomForNote(
                f"note needs {len(content)} bytes, section has {old.size} ({elf.origin})"
            )
        data[old.offset : old.offset + len(content)] = content
        data[old.offset + len(content) : old.offset + old.size] = b"\x00" * (old.size - len(content))
        return _write_replacing(_default_out(image.path, out_path), bytes(data))

    content_off = _align(len(data), 4)
    data.extend(b"\x00" * (content_off - len(data)))
    data.extend(content)

    if existing_idx is not None:
        # Repoint the existing header at the fresh copy; the old bytes
        # become dead padding.
        hdr_off = elf.e_shoff + existing_idx * elf.e_shentsize
        # sh_addr=0 (unmapped), sh_offset, sh_size
        struct.pack_into("<QQQ", data, hdr_off + 16, 0, content_off, len(content))
        return _write_replacing(_default_out(image.path, out_path), bytes(data))

    if elf.e_shoff == 0 or not elf.sections:
        raise NoRoomForNote(f"file has no section header table to extend ({elf.origin})")

    shstr_sec = elf.sections[elf.e_shstrndx]
    new_shstr = elf.section_data(shstr_sec) + NOTE_SECTION.encode() + b"\x00"
    name_off = shstr_sec.size
    shstr_off = len(data)
    data.extend(new_shstr)

    shdr_off = _align(len(data), 8)
    data.extend(b"\x00" * (shdr_off - len(data)))
    old_table = elf.data[elf.e_shoff : elf.e_shoff + elf.e_shnum * elf.e_shentsize]
    table = bytearray(old_table)
    # Repoint the section-name string table at its grown copy.
    struct.pack_into("<Q", table, elf.e_shstrndx * elf.e_shentsize + 24, shstr_off)
    struct.pack_into("<Q", table, elf.e_shstrndx * elf.e_shentsize + 32, len(new_shstr))
    table.extend(
        _SHDR.pack(name_off, SHT_NOTE, 0, 0, content_off, len(content), 0, 0, 4, 0)
    )
    data.extend(table)
    struct.pack_into("<Q", data, 40, shdr_off)  # e_shoff
    struct.pack_into("<H", data, 60, elf.e_shnum + 1)  # e_shnum

    return _write_replacing(_default_out(image.path, out_path), bytes(data))


# ---------------------------------------------------------------------------
# Dependency injection
# ---------------------------------------------------------------------------

def inject_dependency(
    image: ElfImage,
    libname: str,
    out_path: str | os.PathLike | None = None,
    runpath: str | None = None,
) -> Path:
    """Prepend a DT_NEEDED entry so the loader resolves `libname` first.

    Relocates the program header table, the dynamic string table, and the
    dynamic array into a fresh PT_LOAD segment appended past the existing
    address space; original segment contents keep their offsets and vaddrs.
    """
    if image.kind == KIND_STATIC:
        raise StaticBinary(f"cannot inject a dependency into a static executable ({image.path})")
    elf = image.elf
    if not elf.dynamic:
        raise StaticBinary(f"no dynamic segment in {image.path}")

    out = _default_out(image.path, out_path)
    if libname in elf.needed:
        return _write_replacing(out, elf.data)

    old_dynstr = elf._dynstr()
    new_dynstr = bytearray(old_dynstr)
    lib_off = len(new_dynstr)
    new_dynstr += libname.encode() + b"\x00"

    entries = list(elf.dynamic)
    runpath_off = None
    if runpath is not None:
        existing = elf.dyn_val(DT_RUNPATH)
        combined = runpath
        if existing is not None:
            old_rp = elf._cstr(bytes(old_dynstr), existing)
            if old_rp:
                combined = runpath + ":" + old_rp
        runpath_off = len(new_dynstr)
        new_dynstr += combined.encode() + b"\x00"
        entries = [e for e in entries if e[0] != DT_RUNPATH]

    load_segs = [s for s in elf.segments if s.p_type == PT_LOAD]
    if not load_segs:
        raise Truncated(f"no PT_LOAD segments ({elf.origin})")
    page = 0x1000
    base_vaddr = _align(max(s.vaddr + s.memsz for s in load_segs), page)
    file_base = _align(len(elf.data), page)

    # Blob layout: phdr table, dynstr, dynamic array.
    phnum = elf.e_phnum + 1
    phdr_size = phnum * elf.e_phentsize
    dynstr_rel = _align(phdr_size, 8)
    new_entries: list[tuple[int, int]] = [(DT_NEEDED, lib_off)]
    for tag, val in entries:
        if tag == DT_STRTAB:
            val = base_vaddr + dynstr_rel
        elif tag == DT_STRSZ:
            val = len(new_dynstr)
        new_entries.append((tag, val))
    if runpath_off is not None:
        new_entries.append((DT_RUNPATH, runpath_off))
    dyn_rel = _align(dynstr_rel + len(new_dynstr), 8)
    dyn_bytes = b"".join(_DYN.pack(t, v) for t, v in new_entries) + _DYN.pack(DT_NULL, 0)
    blob_size = dyn_rel + len(dyn_bytes)

    new_phdrs = bytearray()
    for i, seg in enumerate(elf.segments):
        p_type, flags, off, vaddr, paddr, filesz, memsz, align = struct.unpack(
            "<IIQQQQQQ", elf.data[elf.e_phoff + i * elf.e_phentsize :][: _PHDR.size]
        )
        if p_type == PT_PHDR:
            off, vaddr, paddr = file_base, base_vaddr, base_vaddr
            filesz = memsz = phdr_size
        elif p_type == PT_DYNAMIC:
            off = file_base + dyn_rel
            vaddr = paddr = base_vaddr + dyn_rel
            filesz = memsz = len(dyn_bytes)
        new_phdrs += _PHDR.pack(p_type, flags, off, vaddr, paddr, filesz, memsz, align)
    new_phdrs += _PHDR.pack(
        PT_LOAD, PF_R | PF_W, file_base, base_vaddr, base_vaddr, blob_size, blob_size, page
    )

    blob = bytearray(blob_size)
    blob[0:phdr_size] = new_phdrs
    blob[dynstr_rel : dynstr_rel + len(new_dynstr)] = new_dynstr
    blob[dyn_rel:] = dyn_bytes

    data = bytearray(elf.data)
    data.extend(b"\x00" * (file_base - len(data)))
    data.extend(blob)
    struct.pack_into("<Q", data, 32, file_base)  # e_phoff
    struct.pack_into("<H", data, 56, phnum)  # e_phnum

    # Keep the section view consistent with the runtime view.
    for i, s in enumerate(elf.sections):
        if s.sh_type == SHT_DYNAMIC:
            hdr = elf.e_shoff + i * elf.e_shentsize
            struct.pack_into("<QQQ", data, hdr + 16, base_vaddr + dyn_rel, file_base + dyn_rel, len(dyn_bytes))
        elif s.name == ".dynstr":
            hdr = elf.e_shoff + i * elf.e_shentsize
            struct.pack_into("<QQQ", data, hdr + 16, base_vaddr + dynstr_rel, file_base + dynstr_rel, len(new_dynstr))

    return _write_replacing(out, bytes(data))
