"""Function-region recovery and export-to-syscall mapping on binaries.

Regions are seeded from dynamic exports, the entry point, symbol-table
functions, and direct call targets found by sweeping; the gaps between
seeds close each region.  Indirect calls are not resolved here: any
function whose address escapes (relocations, init arrays, address
materialization in code) is marked address-taken and counts as reachable
from every export, which is the documented source of overapproximation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import decoder
from .elfio import (
    R_X86_64_64,
    R_X86_64_GLOB_DAT,
    R_X86_64_IRELATIVE,
    R_X86_64_JUMP_SLOT,
    R_X86_64_RELATIVE,
    SHT_FINI_ARRAY,
    SHT_INIT_ARRAY,
    DT_FINI,
    DT_INIT,
    STT_FUNC,
    STT_GNU_IFUNC,
    STT_NOTYPE,
    SHN_UNDEF,
    ElfImage,
)
from .extract import SyscallSite
from .graphs import reachable_from

MAP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FunctionRegion:
    start: int
    end: int
    name: str | None
    exported: bool
    import_stub: str | None = None  # PLT stub: name of the import it forwards to

    def contains(self, vaddr: int) -> bool:
        return self.start <= vaddr < self.end


@dataclass
class BinCallGraph:
    regions: list[FunctionRegion]
    edges: dict[int, set[int]]  # region start -> callee region starts
    site_owner: dict[int, FunctionRegion]
    address_taken: set[int]
    entry: int | None


@dataclass(frozen=True)
class ExportSyscallMap:
    exports: dict[str, frozenset[int]]
    entry_set: frozenset[int]
    init_set: frozenset[int]
    all_set: frozenset[int] = frozenset()
    warnings: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "version": MAP_FORMAT_VERSION,
            "arch": "x86_64",
            "exports": {k: sorted(v) for k, v in sorted(self.exports.items())},
            "entry": sorted(self.entry_set),
            "init": sorted(self.init_set),
            "all": sorted(self.all_set),
            "unresolved_warnings": {k: list(v) for k, v in sorted(self.warnings.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExportSyscallMap":
        if doc.get("version") != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported export-map version: {doc.get('version')!r}")
        return cls(
            exports={k: frozenset(v) for k, v in doc.get("exports", {}).items()},
            entry_set=frozenset(doc.get("entry", ())),
            init_set=frozenset(doc.get("init", ())),
            all_set=frozenset(doc.get("all", ())),
            warnings={k: tuple(v) for k, v in doc.get("unresolved_warnings", {}).items()},
        )


def _in_exec(image: ElfImage, vaddr: int) -> bool:
    return any(r.vaddr <= vaddr < r.vaddr + r.size for r in image.exec_regions)


def _sweep(image: ElfImage) -> list[decoder.DecodedInstruction]:
    out = []
    for r in image.exec_regions:
        code = image.data[r.offset : r.offset + r.size]
        out.extend(decoder.linear_sweep(code, r.vaddr))
    return out


def _plt_slot_names(image: ElfImage) -> dict[int, str]:
    """GOT-slot vaddr -> symbol name, from jump-slot style relocations."""
    elf = image.elf
    out = {}
    for rel in elf.relocations():
        if rel.r_type in (R_X86_64_JUMP_SLOT, R_X86_64_GLOB_DAT) and rel.sym_index < len(elf.dynsym):
            name = elf.dynsym[rel.sym_index].name
            if name:
                out[rel.offset] = name
    return out


def recover_functions(image: ElfImage) -> list[FunctionRegion]:
    """Tile the executable regions into function regions."""
    named: dict[int, tuple[str, bool]] = {}

    def seed(vaddr: int, name: str | None = None, exported: bool = False) -> None:
        if not _in_exec(image, vaddr):
            return
        old = named.get(vaddr)
        if old is None:
            named[vaddr] = (name, exported)
        else:
            named[vaddr] = (old[0] or name, old[1] or exported)

    # Untyped symbols (hand-written assembly) count when they land in an
    # executable region; seed() drops anything outside one.
    def is_func(sym) -> bool:
        return sym.sym_type in (STT_FUNC, STT_GNU_IFUNC, STT_NOTYPE)

    elf = image.elf
    for sym in elf.dynsym:
        if is_func(sym) and sym.shndx != SHN_UNDEF and sym.name:
            seed(sym.value, sym.name, exported=True)
    for sym in elf.symtab:
        if is_func(sym) and sym.shndx != SHN_UNDEF and sym.name:
            seed(sym.value, sym.name, exported=False)
    if image.entry_vaddr:
        seed(image.entry_vaddr)

    instructions = _sweep(image)
    for ins in instructions:
        if ins.klass == decoder.CLASS_CALL and ins.target is not None:
            seed(ins.target)

    slots = _plt_slot_names(image)
    stub_names: dict[int, str] = {}
    for ins in instructions:
        if ins.klass == decoder.CLASS_BRANCH and ins.mem_ref is not None and ins.mem_ref in slots:
            stub_names[ins.vaddr] = slots[ins.mem_ref]
            seed(ins.vaddr)

    regions = []
    for exec_region in image.exec_regions:
        lo, hi = exec_region.vaddr, exec_region.vaddr + exec_region.size
        starts = sorted(v for v in named if lo <= v < hi)
        if not starts or starts[0] > lo:
            starts.insert(0, lo)
        for i, start in enumerate(starts):
            end = starts[i + 1] if i + 1 < len(starts) else hi
            if end <= start:
                continue
            name, exported = named.get(start, (None, False))
            stub = stub_names.get(start)
            if stub is not None and name is None:
                name = f"{stub}@plt"
            regions.append(FunctionRegion(start, end, name, exported, stub))
    regions.sort(key=lambda r: r.start)
    return regions


def _init_targets(image: ElfImage) -> set[int]:
    elf = image.elf
    targets: set[int] = set()
    for s in elf.sections:
        if s.sh_type in (SHT_INIT_ARRAY, SHT_FINI_ARRAY) or s.name == ".preinit_array":
            raw = elf.section_data(s)
            for i in range(0, len(raw) - 7, 8):
                targets.add(int.from_bytes(raw[i : i + 8], "little"))
    for tag in (DT_INIT, DT_FINI):
        v = elf.dyn_val(tag)
        if v:
            targets.add(v)
    return targets


def build_callgraph(
    image: ElfImage,
    regions: list[FunctionRegion] | None = None,
    sites: list[SyscallSite] | None = None,
) -> BinCallGraph:
    if regions is None:
        regions = recover_functions(image)
    by_start = {r.start: r for r in regions}
    sorted_regions = sorted(regions, key=lambda r: r.start)

    def region_of(vaddr: int) -> FunctionRegion | None:
        lo, hi = 0, len(sorted_regions)
        while lo < hi:
            mid = (lo + hi) // 2
            r = sorted_regions[mid]
            if vaddr < r.start:
                hi = mid
            elif vaddr >= r.end:
                lo = mid + 1
            else:
                return r
        return None

    edges: dict[int, set[int]] = {r.start: set() for r in regions}
    address_taken: set[int] = set()

    elf = image.elf
    export_values = {sym.value for sym in elf.dynsym if sym.shndx != SHN_UNDEF}
    for rel in elf.relocations():
        if rel.r_type in (R_X86_64_RELATIVE, R_X86_64_IRELATIVE):
            if rel.addend in by_start:
                address_taken.add(rel.addend)
        elif rel.r_type == R_X86_64_64:
            if rel.sym_index < len(elf.dynsym):
                v = elf.dynsym[rel.sym_index].value + rel.addend
                if v in by_start:
                    address_taken.add(v)
    for v in _init_targets(image):
        if v in by_start:
            address_taken.add(v)

    for r in regions:
        code = image.data[0:0]
        for er in image.exec_regions:
            if er.vaddr <= r.start and r.end <= er.vaddr + er.size:
                off = er.offset + (r.start - er.vaddr)
                code = image.data[off : off + (r.end - r.start)]
                break
        for ins in decoder.linear_sweep(code, r.start):
            if ins.klass == decoder.CLASS_CALL and ins.target is not None:
                callee = region_of(ins.target)
                if callee is not None:
                    edges[r.start].add(callee.start)
            elif ins.klass == decoder.CLASS_BRANCH and ins.target is not None:
                callee = region_of(ins.target)
                if callee is not None and callee.start != r.start:
                    edges[r.start].add(callee.start)  # tail jump
            if ins.lea_target is not None and ins.lea_target in by_start:
                address_taken.add(ins.lea_target)
            if ins.klass == decoder.CLASS_MOVE_IMM and ins.imm in by_start:
                address_taken.add(ins.imm)

    # A PLT stub whose symbol is defined in this very image binds back to
    # the local definition; stubs for true imports stay unresolved here
    # and are satisfied across libraries by the merge stage.
    local_defs = {
        sym.name: sym.value
        for sym in elf.dynsym
        if sym.shndx != SHN_UNDEF and sym.name
    }
    for r in regions:
        if r.import_stub and r.import_stub in local_defs:
            callee = region_of(local_defs[r.import_stub])
            if callee is not None and callee.start != r.start:
                edges[r.start].add(callee.start)

    site_owner: dict[int, FunctionRegion] = {}
    for s in sites or ():
        owner = region_of(s.vaddr)
        if owner is not None:
            site_owner[s.vaddr] = owner

    entry = image.entry_vaddr if image.entry_vaddr and region_of(image.entry_vaddr) else None
    return BinCallGraph(sorted_regions, edges, site_owner, address_taken, entry)


def export_closure(edges, address_taken, roots, _at_closure=None) -> set:
    """Regions reachable from `roots`, plus every address-taken closure.

    Address-taken functions count as reachable from any root: indirect
    calls are not resolved at this layer.
    """
    if _at_closure is None:
        _at_closure = reachable_from(address_taken, edges)
    return reachable_from(roots, edges) | _at_closure


def map_exports(
    image: ElfImage,
    regions: list[FunctionRegion] | None = None,
    sites: list[SyscallSite] | None = None,
) -> ExportSyscallMap:
    """Per-export reachable syscall sets, plus entry- and init-rooted sets."""
    graph = build_callgraph(image, regions, sites)

    by_vaddr = {s.vaddr: s for s in sites or ()}
    numbers_by_region: dict[int, set[int]] = {}
    unresolved_by_region: dict[int, list[int]] = {}
    for vaddr, owner in graph.site_owner.items():
        site = by_vaddr[vaddr]
        if site.number is not None:
            numbers_by_region.setdefault(owner.start, set()).add(site.number)
        else:
            unresolved_by_region.setdefault(owner.start, []).append(vaddr)

    at_closure = reachable_from(graph.address_taken, graph.edges)

    def collect(roots) -> tuple[frozenset[int], tuple[int, ...]]:
        reach = export_closure(graph.edges, graph.address_taken, roots, _at_closure=at_closure)
        nums: set[int] = set()
        warn: list[int] = []
        for start in reach:
            nums.update(numbers_by_region.get(start, ()))
            warn.extend(unresolved_by_region.get(start, ()))
        return frozenset(nums), tuple(sorted(warn))

    exports: dict[str, frozenset[int]] = {}
    warnings: dict[str, tuple[int, ...]] = {}
    for r in graph.regions:
        if r.exported and r.name:
            nums, warn = collect([r.start])
            exports[r.name] = nums
            if warn:
                warnings[r.name] = warn

    entry_set: frozenset[int] = frozenset()
    if graph.entry is not None:
        entry_region = next((r for r in graph.regions if r.contains(graph.entry)), None)
        roots = [entry_region.start] if entry_region else []
        entry_set, warn = collect(roots)
        if warn:
            warnings["<entry>"] = warn

    init_set, _ = collect([])
    all_set = frozenset().union(*numbers_by_region.values()) if numbers_by_region else frozenset()
    return ExportSyscallMap(exports, entry_set, init_set, all_set, warnings)


def write_map(path, mapping: ExportSyscallMap) -> None:
    with open(path, "w") as f:
        json.dump(mapping.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_map(path) -> ExportSyscallMap:
    with open(path) as f:
        return ExportSyscallMap.from_json(json.load(f))
