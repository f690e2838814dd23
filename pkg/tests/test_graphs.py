"""Tarjan condensation and propagation vs brute-force closure oracles."""

from __future__ import annotations

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from chestnut.graphs import propagate_reachable, reachable_from, tarjan_scc


def brute_force_closure(nodes, edges, own):
    """Per-node DFS union of own sets: the independent oracle."""
    out = {}
    for root in nodes:
        seen = set()
        stack = [root]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(edges.get(n, ()))
        acc = set()
        for n in seen:
            acc.update(own.get(n, ()))
        out[root] = frozenset(acc)
    return out


def random_graph(rng, max_nodes=200, max_edges=1000):
    n = rng.randint(1, max_nodes)
    nodes = list(range(n))
    edges = {i: set() for i in nodes}
    for _ in range(rng.randint(0, max_edges)):
        a, b = rng.randrange(n), rng.randrange(n)
        edges[a].add(b)
    own = {i: frozenset(rng.sample(range(512), rng.randint(0, 3))) for i in nodes}
    return nodes, edges, own


def test_tarjan_simple_cycle():
    edges = {1: [2], 2: [1], 3: [1]}
    sccs = tarjan_scc([1, 2, 3], lambda n: edges.get(n, ()))
    comps = [frozenset(c) for c in sccs]
    assert frozenset({1, 2}) in comps
    assert frozenset({3}) in comps
    # Reverse topological: the cycle (callee) comes before its caller.
    assert comps.index(frozenset({1, 2})) < comps.index(frozenset({3}))


def test_propagate_cycle_merges():
    edges = {"a": ["b"], "b": ["a"]}
    own = {"a": frozenset({0}), "b": frozenset({1})}
    flat, stats = propagate_reachable(["a", "b"], edges, own)
    assert flat["a"] == flat["b"] == frozenset({0, 1})
    assert stats["scc_count"] == 1
    assert stats["updates"] == [1]


def test_propagate_chain():
    edges = {"a": ["b"], "b": ["c"]}
    own = {"c": frozenset({60})}
    flat, _ = propagate_reachable(["a", "b", "c"], edges, own)
    assert flat["a"] == frozenset({60})


def test_propagate_matches_oracle_on_many_random_graphs():
    rng = random.Random(1234)
    for _ in range(60):
        nodes, edges, own = random_graph(rng, max_nodes=60, max_edges=240)
        flat, stats = propagate_reachable(nodes, edges, own)
        assert flat == brute_force_closure(nodes, edges, own)
        assert all(u == 1 for u in stats["updates"])


def test_deep_chain_no_recursion_limit():
    n = 5000
    nodes = list(range(n))
    edges = {i: [i + 1] for i in range(n - 1)}
    own = {n - 1: frozenset({7})}
    flat, _ = propagate_reachable(nodes, edges, own)
    assert flat[0] == frozenset({7})


@given(st.data())
@settings(max_examples=60, deadline=None)
def test_propagation_order_independent(data):
    n = data.draw(st.integers(min_value=1, max_value=25))
    edge_list = data.draw(
        st.lists(
            st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=80
        )
    )
    own = {
        i: frozenset(data.draw(st.sets(st.integers(0, 30), max_size=3)))
        for i in range(n)
    }
    edges = {i: set() for i in range(n)}
    for a, b in edge_list:
        edges[a].add(b)

    base, _ = propagate_reachable(list(range(n)), edges, own)
    perm = data.draw(st.permutations(list(range(n))))
    permuted, _ = propagate_reachable(perm, edges, own)
    assert base == permuted


def test_reachable_from_includes_roots():
    edges = {1: [2]}
    assert reachable_from([1], edges) == {1, 2}
    assert reachable_from([], edges) == set()
