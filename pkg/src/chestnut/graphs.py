"""Graph machinery shared by the call-graph layers.

Tarjan's algorithm emits strongly connected components in reverse
topological order of the condensation, so reachable-set propagation can
update each condensed node exactly once: callees are always finished
before their callers.
"""

from __future__ import annotations

from typing import Callable, Hashable, Iterable, Mapping

Node = Hashable


def tarjan_scc(nodes: Iterable[Node], successors: Callable[[Node], Iterable[Node]]) -> list[list[Node]]:
    """Strongly connected components, in reverse topological order."""
    index: dict[Node, int] = {}
    lowlink: dict[Node, int] = {}
    on_stack: set[Node] = set()
    stack: list[Node] = []
    sccs: list[list[Node]] = []
    counter = 0

    for root in nodes:
        if root in index:
            continue
        # Iterative DFS: (node, iterator over successors).
        work = [(root, iter(tuple(successors(root))))]
        index[root] = lowlink[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for succ in it:
                if succ not in index:
                    index[succ] = lowlink[succ] = counter
                    counter += 1
                    stack.append(succ)
                    on_stack.add(succ)
                    work.append((succ, iter(tuple(successors(succ)))))
                    advanced = True
                    break
                if succ in on_stack:
                    lowlink[node] = min(lowlink[node], index[succ])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
            if lowlink[node] == index[node]:
                comp = []
                while True:
                    n = stack.pop()
                    on_stack.discard(n)
                    comp.append(n)
                    if n == node:
                        break
                sccs.append(comp)
    return sccs


def propagate_reachable(
    nodes: Iterable[Node],
    edges: Mapping[Node, Iterable[Node]],
    own: Mapping[Node, frozenset],
) -> tuple[dict[Node, frozenset], dict[str, object]]:
    """Per-node set of values reachable along edges, each SCC computed once.

    Returns the flattened map plus instrumentation: `scc_count` and
    `updates`, the per-component computation counter (always 1 by
    construction; tests assert it).
    """
    node_list = list(nodes)
    node_set = set(node_list)

    def succ(n: Node):
        return (s for s in edges.get(n, ()) if s in node_set)

    sccs = tarjan_scc(node_list, succ)
    comp_of: dict[Node, int] = {}
    for i, comp in enumerate(sccs):
        for n in comp:
            comp_of[n] = i

    comp_sets: list[frozenset] = [frozenset()] * len(sccs)
    updates = [0] * len(sccs)
    for i, comp in enumerate(sccs):
        acc: set = set()
        for n in comp:
            acc.update(own.get(n, ()))
            for s in succ(n):
                j = comp_of[s]
                if j != i:
                    acc.update(comp_sets[j])
        comp_sets[i] = frozenset(acc)
        updates[i] += 1

    flat = {n: comp_sets[comp_of[n]] for n in node_list}
    stats = {"scc_count": len(sccs), "updates": updates}
    return flat, stats


def reachable_from(
    roots: Iterable[Node], edges: Mapping[Node, Iterable[Node]]
) -> set[Node]:
    """Plain worklist reachability over the node ids themselves."""
    seen: set[Node] = set()
    work = list(roots)
    while work:
        n = work.pop()
        if n in seen:
            continue
        seen.add(n)
        work.extend(edges.get(n, ()))
    return seen
