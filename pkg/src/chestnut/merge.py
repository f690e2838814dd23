"""Cross-library syscall-set merging over the shared-object closure.

Walks DT_NEEDED breadth-first the way the loader builds its global search
scope, resolves every import of every object to its first provider in
scope order, and unions the providers' per-export reachable sets into one
application-level allowlist.  Library initializer sets always join: their
constructors run no matter which exports get called.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .elfio import load_image
from .errors import MissingExportMap, MissingLibrary, UnresolvedImport
from .funcmap import ExportSyscallMap
from .syscalls import EXEC_FAMILY

ROOT_NAME = "<root>"

SEARCH_PATH_ENV = "CHESTNUT_LIBRARY_PATH"
DEFAULT_SEARCH_PATHS = (
    "/lib/x86_64-linux-gnu",
    "/usr/lib/x86_64-linux-gnu",
    "/lib64",
    "/usr/lib",
    "/lib",
)

_DLOPEN_IMPORTS = {"dlopen", "dlmopen", "__libc_dlopen_mode"}

# Exports the dynamic loader calls through programmatic lookup rather than
# a relocation, so no import edge ever witnesses them.
_LOADER_INVOKED_EXPORTS = ("__libc_early_init",)


def default_search_paths(explicit=()) -> list[str]:
    """Loader-like precedence: flags, then environment, then built-ins."""
    paths = list(explicit)
    env = os.environ.get(SEARCH_PATH_ENV, "")
    paths.extend(p for p in env.split(":") if p)
    paths.extend(DEFAULT_SEARCH_PATHS)
    return paths


@dataclass(frozen=True)
class ObjectInfo:
    name: str
    path: str | None
    imports: tuple[str, ...]
    exports: frozenset[str]
    needed: tuple[str, ...]
    weak_imports: frozenset[str] = frozenset()
    is_interp: bool = False


@dataclass
class DependencyClosure:
    root: ObjectInfo
    libraries: list[ObjectInfo]
    resolution_log: dict[str, str] = field(default_factory=dict)
    missing_libraries: list[str] = field(default_factory=list)
    unresolved_imports: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def scope(self) -> list[ObjectInfo]:
        return [self.root, *self.libraries]


def _object_info(name: str, path: Path) -> ObjectInfo:
    from .elfio import SHN_UNDEF, STB_WEAK

    image, table = load_image(path)
    weak = frozenset(
        sym.name
        for sym in image.elf.dynsym
        if sym.shndx == SHN_UNDEF and sym.bind == STB_WEAK and sym.name
    )
    return ObjectInfo(
        name=name,
        path=str(path),
        imports=tuple(n for n, _ in table.imports),
        exports=frozenset(n for n, _ in table.exports),
        needed=table.needed,
        weak_imports=weak,
    )


def _find_library(name: str, search_paths: list[Path]) -> Path | None:
    for d in search_paths:
        candidate = Path(d) / name
        if candidate.is_file():
            return candidate
    return None


def resolve_dependencies(
    root_path, search_paths, strict: bool = True, include_interp: bool = True
) -> DependencyClosure:
    """Breadth-first DT_NEEDED closure with loader-like first-wins scope.

    The program interpreter joins the closure by default: launcher-style
    filters are in force while it maps the libraries, so its syscalls are
    part of what the application can reach.
    """
    root = _object_info(ROOT_NAME, Path(root_path))
    closure = DependencyClosure(root, [])

    seen: set[str] = set()
    queue: list[str] = list(root.needed)
    paths = [Path(p) for p in search_paths]
    while queue:
        name = queue.pop(0)
        if name in seen:
            continue
        seen.add(name)
        found = _find_library(name, paths)
        if found is None:
            if strict:
                raise MissingLibrary(name)
            closure.missing_libraries.append(name)
            closure.warnings.append(f"library not found on search path: {name}")
            continue
        lib = _object_info(name, found)
        closure.libraries.append(lib)
        queue.extend(lib.needed)

    if include_interp:
        image, _ = load_image(root_path)
        interp = image.elf.interp()
        if interp and Path(interp).is_file():
            info = _object_info(Path(interp).name, Path(interp))
            closure.libraries.append(
                ObjectInfo(
                    info.name, info.path, info.imports, info.exports,
                    info.needed, info.weak_imports, is_interp=True,
                )
            )

    for obj in closure.scope:
        for imp in obj.imports:
            if imp in closure.resolution_log:
                continue
            provider = next((o for o in closure.scope if imp in o.exports), None)
            if provider is None:
                # Weak undefined imports are legitimate loader behavior.
                if strict and imp not in obj.weak_imports:
                    raise UnresolvedImport(imp)
                if imp not in closure.unresolved_imports:
                    closure.unresolved_imports.append(imp)
                    closure.warnings.append(f"import not provided by any dependency: {imp}")
            else:
                closure.resolution_log[imp] = provider.name
    return closure


@dataclass
class MergeResult:
    numbers: frozenset[int]
    contributions: dict[str, frozenset[int]]
    warnings: list[str]


def merge_sets(
    closure: DependencyClosure,
    maps: dict[str, ExportSyscallMap],
    strict: bool = True,
) -> MergeResult:
    """Union the root's own set with every resolved import's export set."""
    warnings = list(closure.warnings)
    contributions: dict[str, set[int]] = {}

    def contribute(owner: str, numbers) -> None:
        contributions.setdefault(owner, set()).update(numbers)

    def map_for(name: str) -> ExportSyscallMap | None:
        m = maps.get(name)
        if m is None:
            if strict:
                raise MissingExportMap(name)
            warnings.append(f"no export syscall map for {name}; its syscalls are missing")
        return m

    root_map = map_for(closure.root.name)
    if root_map is not None:
        contribute(closure.root.name, root_map.entry_set | root_map.init_set)

    for lib in closure.libraries:
        m = map_for(lib.name)
        if m is None:
            continue
        # Constructors run unconditionally at load time.
        contribute(lib.name, m.init_set)
        if lib.is_interp:
            # The loader itself runs wall to wall before the target entry.
            contribute(lib.name, m.all_set | m.entry_set)
        for hook in _LOADER_INVOKED_EXPORTS:
            if hook in m.exports:
                contribute(lib.name, m.exports[hook])

    for obj in closure.scope:
        for imp in obj.imports:
            provider = closure.resolution_log.get(imp)
            if provider is None:
                continue
            m = maps.get(provider)
            if m is None:
                continue  # already warned / raised above
            entry = m.exports.get(imp)
            if entry is None:
                warnings.append(f"{provider} exports {imp} but its map has no entry for it")
            else:
                contribute(provider, entry)

    merged = frozenset().union(*contributions.values()) if contributions else frozenset()

    if merged & EXEC_FAMILY:
        warnings.append(
            "exec-family syscalls are reachable; statically merged sets cannot "
            "cover a replaced program image, consider dynamic tracing"
        )
    dlopeners = [
        o.name for o in closure.scope if set(o.imports) & _DLOPEN_IMPORTS
    ]
    if dlopeners:
        warnings.append(
            "dlopen-style loading detected in: "
            + ", ".join(dlopeners)
            + "; libraries loaded at runtime are invisible to the static merge"
        )
    return MergeResult(merged, {k: frozenset(v) for k, v in contributions.items()}, warnings)
