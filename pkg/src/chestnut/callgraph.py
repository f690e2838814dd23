"""Linkage resolution and syscall propagation over call-graph documents.

A call-graph document is the serialized per-object analysis a frontend
emits: one JSON document per object or library, listing every function
with its canonical signature, linkage, direct calls, indirect-call
signatures, address-taken flag, and directly-issued syscall numbers.

This module resolves symbols the way a linker would (strong over weak,
unit-scoped locals, aliases as extra names), adds signature-heuristic
edges for indirect calls restricted to address-taken functions, condenses
cycles, and propagates reachable syscall sets in one post-order pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import DuplicateStrongSymbol, MissingEntry
from .graphs import propagate_reachable

DOC_VERSION = 1

LINKAGE_LOCAL = "local"
LINKAGE_STRONG = "global-strong"
LINKAGE_WEAK = "global-weak"
_LINKAGES = (LINKAGE_LOCAL, LINKAGE_STRONG, LINKAGE_WEAK)

INIT_ENTRY = "init"
DEFAULT_ENTRIES = ("main", "exit")


@dataclass(frozen=True)
class FunctionDecl:
    name: str
    signature: str
    linkage: str = LINKAGE_STRONG
    aliases: tuple[str, ...] = ()
    direct_calls: tuple[str, ...] = ()
    indirect_call_sigs: tuple[str, ...] = ()
    address_taken: bool = False
    own_syscalls: frozenset[int] = frozenset()

    def __post_init__(self):
        if not self.signature:
            raise ValueError(f"function {self.name!r}: signature must be non-empty")
        if self.linkage not in _LINKAGES:
            raise ValueError(f"function {self.name!r}: unknown linkage {self.linkage!r}")


@dataclass(frozen=True)
class Unit:
    name: str
    functions: tuple[FunctionDecl, ...]
    initializer_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class CallGraphDoc:
    units: tuple[Unit, ...]

    def to_json(self) -> dict:
        return {
            "version": DOC_VERSION,
            "units": [
                {
                    "name": u.name,
                    "initializer_refs": list(u.initializer_refs),
                    "functions": [
                        {
                            "name": f.name,
                            "signature": f.signature,
                            "linkage": f.linkage,
                            "aliases": list(f.aliases),
                            "direct_calls": list(f.direct_calls),
                            "indirect_call_sigs": list(f.indirect_call_sigs),
                            "address_taken": f.address_taken,
                            "syscalls": sorted(f.own_syscalls),
                        }
                        for f in u.functions
                    ],
                }
                for u in self.units
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CallGraphDoc":
        if doc.get("version") != DOC_VERSION:
            raise ValueError(f"unsupported call-graph document version: {doc.get('version')!r}")
        units = []
        for u in doc.get("units", []):
            functions = tuple(
                FunctionDecl(
                    name=f["name"],
                    signature=f["signature"],
                    linkage=f.get("linkage", LINKAGE_STRONG),
                    aliases=tuple(f.get("aliases", ())),
                    direct_calls=tuple(f.get("direct_calls", ())),
                    indirect_call_sigs=tuple(f.get("indirect_call_sigs", ())),
                    address_taken=bool(f.get("address_taken", False)),
                    own_syscalls=frozenset(f.get("syscalls", ())),
                )
                for f in u.get("functions", [])
            )
            units.append(Unit(u.get("name", "?"), functions, tuple(u.get("initializer_refs", ()))))
        return cls(tuple(units))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CallGraphDoc":
        return cls.from_json(json.loads(raw.decode()))

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode()


@dataclass
class Node:
    uid: int
    unit: str
    decl: FunctionDecl
    names: tuple[str, ...]
    address_taken: bool

    @property
    def label(self) -> str:
        if self.decl.linkage == LINKAGE_LOCAL:
            return f"{self.unit}::{self.decl.name}"
        return self.decl.name


@dataclass
class ResolvedProgram:
    nodes: list[Node]
    by_global_name: dict[str, int]
    edges: dict[int, set[int]]
    external_calls: dict[int, tuple[str, ...]]
    warnings: list[str] = field(default_factory=list)


def resolve_linkage(docs: list[CallGraphDoc]) -> ResolvedProgram:
    """Turn documents into one node set with linker symbol semantics."""
    nodes: list[Node] = []
    strong: dict[str, int] = {}
    weak: dict[str, int] = {}
    unit_views: list[tuple[dict[str, int], list[int], tuple[str, ...]]] = []

    for doc in docs:
        for unit in doc.units:
            local: dict[str, int] = {}
            uids: list[int] = []
            for decl in unit.functions:
                uid = len(nodes)
                uids.append(uid)
                node = Node(uid, unit.name, decl, (decl.name, *decl.aliases), decl.address_taken)
                nodes.append(node)
                for name in node.names:
                    if decl.linkage == LINKAGE_LOCAL:
                        if name in local:
                            raise DuplicateStrongSymbol(f"{unit.name}::{name} (duplicate local)")
                        local[name] = uid
                    elif decl.linkage == LINKAGE_STRONG:
                        if name in strong:
                            raise DuplicateStrongSymbol(name)
                        strong[name] = uid
                    else:
                        weak.setdefault(name, uid)
            unit_views.append((local, uids, unit.initializer_refs))

    by_global = dict(weak)
    by_global.update(strong)

    warnings: list[str] = []
    edges: dict[int, set[int]] = {n.uid: set() for n in nodes}
    external: dict[int, tuple[str, ...]] = {}

    for local, uids, _refs in unit_views:
        for uid in uids:
            missing = []
            for callee in nodes[uid].decl.direct_calls:
                target = local.get(callee)
                if target is None:
                    target = by_global.get(callee)
                if target is None:
                    missing.append(callee)
                else:
                    edges[uid].add(target)
            if missing:
                external[uid] = tuple(missing)
    # Distinguished init entry: one synthetic root calling every function
    # referenced from a global initializer; those become address-taken.
    init_targets: set[int] = set()
    for local, _uids, refs in unit_views:
        for ref in refs:
            target = local.get(ref, by_global.get(ref))
            if target is None:
                warnings.append(f"initializer reference to undefined function: {ref}")
            else:
                init_targets.add(target)
                nodes[target].address_taken = True
    if INIT_ENTRY not in by_global:
        uid = len(nodes)
        decl = FunctionDecl(INIT_ENTRY, "void()", LINKAGE_STRONG)
        nodes.append(Node(uid, "<synthetic>", decl, (INIT_ENTRY,), False))
        by_global[INIT_ENTRY] = uid
        edges[uid] = set()
    edges[by_global[INIT_ENTRY]].update(init_targets)

    return ResolvedProgram(nodes, by_global, edges, external, warnings)


def resolve_indirect(program: ResolvedProgram) -> list[tuple[int, int]]:
    """Signature-heuristic edges: match address-taken functions exactly."""
    by_sig: dict[str, list[int]] = {}
    for node in program.nodes:
        if node.address_taken:
            by_sig.setdefault(node.decl.signature, []).append(node.uid)

    added: list[tuple[int, int]] = []
    for node in program.nodes:
        for sig in node.decl.indirect_call_sigs:
            targets = by_sig.get(sig, ())
            if not targets:
                program.warnings.append(
                    f"{node.label}: indirect call signature {sig!r} matches no "
                    f"address-taken function (possible under-approximation)"
                )
            for t in targets:
                if t not in program.edges[node.uid]:
                    program.edges[node.uid].add(t)
                    added.append((node.uid, t))
    return added


@dataclass(frozen=True)
class FlattenedGraph:
    reachable: dict[str, frozenset[int]]  # node label -> syscall numbers
    by_global_name: dict[str, str]        # global name -> node label
    stats: dict

    def lookup(self, name: str) -> frozenset[int] | None:
        label = self.by_global_name.get(name, name)
        return self.reachable.get(label)


def condense_and_propagate(program: ResolvedProgram) -> FlattenedGraph:
    """Tarjan condensation then one-pass post-order propagation."""
    own = {n.uid: n.decl.own_syscalls for n in program.nodes}
    flat, stats = propagate_reachable([n.uid for n in program.nodes], program.edges, own)
    reachable = {program.nodes[uid].label: s for uid, s in flat.items()}
    by_name = {
        name: program.nodes[uid].label for name, uid in program.by_global_name.items()
    }
    return FlattenedGraph(reachable, by_name, stats)


def reachable_from_entries(
    flat: FlattenedGraph,
    entries: tuple[str, ...] = DEFAULT_ENTRIES,
    require_all: bool = True,
) -> tuple[frozenset[int], list[str]]:
    """Union of the entry functions' reachable sets.

    Missing entries raise in static-link mode (`require_all`) and are
    returned as warnings in library mode.
    """
    out: set[int] = set()
    warnings = []
    for entry in entries:
        got = flat.lookup(entry)
        if got is None:
            if require_all:
                raise MissingEntry(entry)
            warnings.append(f"entry function not defined: {entry}")
        else:
            out.update(got)
    return frozenset(out), warnings
