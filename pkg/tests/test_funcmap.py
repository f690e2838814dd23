"""Function-region recovery and export-to-syscall mapping."""

from __future__ import annotations

import random

import pytest

import asmlib
from conftest import requires_toolchain
from chestnut.elfio import load_image
from chestnut.extract import extract_all
from chestnut.funcmap import (
    build_callgraph,
    export_closure,
    map_exports,
    recover_functions,
)
from test_graphs import brute_force_closure

pestmark = requires_toolchain
pytestmark = requires_toolchain


def _analyze(path):
    image, _ = load_image(path)
    regions = recover_functions(image)
    result = extract_all(image, function_bounds=[(r.start, r.end) for r in regions])
    return image, regions, result


def test_two_exports_with_edge(fixdir):
    lib = asmlib.build_shared(
        fixdir,
        "libfg.so",
        """
        .text
        .globl f
        .type f, @function
        f:
            call g
            ret
        .globl g
        .type g, @function
        g:
            mov $1, %eax
            syscall
            ret
        """,
    )
    image, regions, result = _analyze(lib)
    names = {r.name for r in regions if r.name}
    assert {"f", "g"} <= names
    mapping = map_exports(image, regions, list(result.sites))
    assert mapping.exports["f"] == frozenset({1})
    assert mapping.exports["g"] == frozenset({1})


def test_stripped_ownership_total(fixdir):
    import subprocess

    path = asmlib.build_static(
        fixdir,
        "fm_stripped",
        """
        .text
        .globl _start
        _start:
            call worker
            mov $60, %eax
            syscall
        worker:
            mov $39, %eax
            syscall
            ret
        """,
    )
    stripped = path.with_name("fm_stripped2")
    subprocess.run(["cp", str(path), str(stripped)], check=True)
    subprocess.run(["strip", "--strip-all", str(stripped)], check=True)

    image, regions, result = _analyze(stripped)
    graph = build_callgraph(image, regions, list(result.sites))
    # Names are gone but every site still has exactly one owner.
    assert len(graph.site_owner) == len(result.sites) == 2
    mapping = map_exports(image, regions, list(result.sites))
    assert mapping.entry_set == frozenset({39, 60})


def test_empty_text(fixdir):
    path = asmlib.build_shared(fixdir, "libempty2.so", ".text\n.globl e\ne: ret\n")
    image, regions, result = _analyze(path)
    mapping = map_exports(image, regions, list(result.sites))
    assert mapping.exports == {"e": frozenset()}


def test_diamond_closure(fixdir):
    lib = asmlib.build_shared(
        fixdir,
        "libdiamond.so",
        """
        .text
        .globl f
        .type f, @function
        f:
            call a
            call b
            ret
        .type a, @function
        a:
            call c
            mov $0, %eax
            syscall
            ret
        .type b, @function
        b:
            call c
            mov $1, %eax
            syscall
            ret
        .type c, @function
        c:
            mov $60, %eax
            syscall
            ret
        """,
    )
    image, regions, result = _analyze(lib)
    mapping = map_exports(image, regions, list(result.sites))
    # Brute-force oracle over the source-level graph.
    edges = {"f": {"a", "b"}, "a": {"c"}, "b": {"c"}, "c": set()}
    own = {"a": {0}, "b": {1}, "c": {60}, "f": set()}
    oracle = brute_force_closure(list(edges), edges, own)
    assert mapping.exports["f"] == oracle["f"] == frozenset({0, 1, 60})


def test_unreachable_unexported_absent(fixdir):
    lib = asmlib.build_shared(
        fixdir,
        "libunreach.so",
        """
        .text
        .globl f
        .type f, @function
        f:
            mov $0, %eax
            syscall
            ret
        .type h, @function
        h:
            mov $39, %eax
            syscall
            ret
        """,
    )
    image, regions, result = _analyze(lib)
    mapping = map_exports(image, regions, list(result.sites))
    assert "h" not in mapping.exports
    assert mapping.exports["f"] == frozenset({0})
    assert 39 not in mapping.exports["f"]


def test_address_taken_joins_every_export(fixdir):
    lib = asmlib.build_shared(
        fixdir,
        "libat.so",
        """
        .text
        .globl f
        .type f, @function
        f:
            lea hook(%rip), %rax
            ret
        .type hook, @function
        hook:
            mov $102, %eax
            syscall
            ret
        .globl g
        .type g, @function
        g:
            ret
        """,
    )
    image, regions, result = _analyze(lib)
    graph = build_callgraph(image, regions, list(result.sites))
    hook = next(r for r in graph.regions if r.name == "hook")
    assert hook.start in graph.address_taken
    mapping = map_exports(image, regions, list(result.sites))
    # No direct edges to hook, yet both exports include its syscalls.
    assert mapping.exports["f"] == frozenset({102})
    assert mapping.exports["g"] == frozenset({102})


def test_plt_stub_named_for_import(fixdir):
    callee = asmlib.build_shared(
        fixdir, "libcallee.so",
        ".text\n.globl fn\n.type fn, @function\nfn: ret\n",
    )
    root = asmlib.build_dynamic(
        fixdir,
        "fm_pltroot",
        """
        .text
        .globl _start
        _start:
            call fn@plt
            mov $60, %eax
            syscall
        """,
        libs=[callee],
        rpath=fixdir,
    )
    image, _ = load_image(root)
    regions = recover_functions(image)
    stubs = [r for r in regions if r.import_stub]
    assert any(r.import_stub == "fn" for r in stubs)
    assert any(r.name == "fn@plt" for r in stubs)


def test_tail_jump_counts_as_edge(fixdir):
    lib = asmlib.build_shared(
        fixdir,
        "libtail.so",
        """
        .text
        .globl f
        .type f, @function
        f:
            jmp g
        .globl g
        .type g, @function
        g:
            mov $7, %eax
            syscall
            ret
        """,
    )
    image, regions, result = _analyze(lib)
    mapping = map_exports(image, regions, list(result.sites))
    assert mapping.exports["f"] == frozenset({7})


def test_monotone_adding_edge_never_shrinks(fixdir):
    base = """
        .text
        .globl f
        .type f, @function
        f:
            {extra}
            mov $0, %eax
            syscall
            ret
        .globl g
        .type g, @function
        g:
            mov $1, %eax
            syscall
            ret
    """
    lib1 = asmlib.build_shared(fixdir, "libmono1.so", base.format(extra="nop"))
    lib2 = asmlib.build_shared(fixdir, "libmono2.so", base.format(extra="call g"))
    m1 = map_exports(*_analyze(lib1)[0:2], list(_analyze(lib1)[2].sites))
    m2 = map_exports(*_analyze(lib2)[0:2], list(_analyze(lib2)[2].sites))
    for name in m1.exports:
        assert m1.exports[name] <= m2.exports[name]


def test_generated_graphs_match_source_oracle(fixdir):
    """Random call graphs rendered to real assembly, mapped, and checked."""
    rng = random.Random(2024)
    for trial in range(6):
        n = rng.randint(3, 14)
        edges = {i: set() for i in range(n)}
        for _ in range(rng.randint(0, 2 * n)):
            a, b = rng.randrange(n), rng.randrange(n)
            if a != b:
                edges[a].add(b)
        own = {i: ({100 + i} if rng.random() < 0.7 else set()) for i in range(n)}

        parts = [".text"]
        for i in range(n):
            parts.append(f".globl fn{i}")
            parts.append(f".type fn{i}, @function")
            parts.append(f"fn{i}:")
            parts.append("    push %rbp")
            for j in sorted(edges[i]):
                parts.append(f"    call fn{j}")
            for nr in sorted(own[i]):
                parts.append(f"    mov ${nr}, %eax")
                parts.append("    syscall")
            parts.append("    pop %rbp")
            parts.append("    ret")
        lib = asmlib.build_shared(fixdir, f"librand{trial}.so", "\n".join(parts) + "\n")

        image, regions, result = _analyze(lib)
        mapping = map_exports(image, regions, list(result.sites))
        oracle = brute_force_closure(list(range(n)), edges, own)
        for i in range(n):
            assert mapping.exports[f"fn{i}"] == oracle[i], f"trial {trial} fn{i}"


def test_synthetic_closure_equals_brute_force():
    rng = random.Random(77)
    for _ in range(100):
        n = rng.randint(1, 60)
        edges = {i: set() for i in range(n)}
        for _ in range(rng.randint(0, 240)):
            edges[rng.randrange(n)].add(rng.randrange(n))
        at = set(rng.sample(range(n), rng.randint(0, 2)))
        for root in range(0, n, 7):
            got = export_closure(edges, at, [root])
            want_nodes = set()
            for r in [root, *at]:
                stack = [r]
                while stack:
                    x = stack.pop()
                    if x in want_nodes:
                        continue
                    want_nodes.add(x)
                    stack.extend(edges.get(x, ()))
            assert got == want_nodes
