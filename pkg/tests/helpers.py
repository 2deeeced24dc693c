"""Shared fixtures: in-memory graph construction and independent oracles.

The oracles here deliberately avoid the production CSR/BFS machinery:
they work on raw edge tuples so they can cross-check it.
"""

from __future__ import annotations

import numpy as np

from kgcf.graph import FORWARD, INVERSE, Edge, Graph, LoadReport, Triplet


def make_graph(triples, n_entities=None, n_relations=None, ent_texts=None, rel_texts=None):
    """Build a Graph directly from integer triples, bypassing file IO."""
    arr = np.array(sorted(set(map(tuple, triples))), dtype=np.int32).reshape(-1, 3)
    n_ent = n_entities if n_entities is not None else int(arr[:, [0, 2]].max()) + 1
    n_rel = n_relations if n_relations is not None else int(arr[:, 1].max()) + 1
    ent_ids = [f"e{i}" for i in range(n_ent)]
    rel_ids = [f"r{i}" for i in range(n_rel)]
    report = LoadReport(len(arr), n_ent, n_rel, 0, 0, 0)
    return Graph(
        ent_ids,
        rel_ids,
        list(ent_texts) if ent_texts else list(ent_ids),
        list(rel_texts) if rel_texts else list(rel_ids),
        arr,
        report,
    )


def random_graph(rng, max_nodes=12, max_edges=30):
    n = int(rng.integers(2, max_nodes + 1))
    n_rel = int(rng.integers(1, 4))
    m = int(rng.integers(1, max_edges + 1))
    triples = set()
    for _ in range(m):
        h = int(rng.integers(0, n))
        t = int(rng.integers(0, n))
        r = int(rng.integers(0, n_rel))
        triples.add((h, r, t))
    return make_graph(triples, n_entities=n, n_relations=n_rel)


def directed_edges(graph):
    """Every traversable edge of the graph as (start, end, Edge), from raw triples."""
    out = []
    for h, r, t in map(tuple, graph.triples.tolist()):
        trip = Triplet(h, r, t)
        out.append((h, t, Edge(trip, FORWARD)))
        out.append((t, h, Edge(trip, INVERSE)))
    return out


def layered_graph(rng, n_src=20, n_mid=10, n_dst=20, noise_edges=15):
    """Layered compositional graph: r0(x,z) iff r1(x,y) and r2(y,z) for some y.

    Relations: 0 = query, 1 and 2 = composition steps, 3 = noise.
    Returns (graph, query_triples, rules) with rules keyed by handle.
    """
    src = list(range(n_src))
    mid = list(range(n_src, n_src + n_mid))
    dst = list(range(n_src + n_mid, n_src + n_mid + n_dst))
    triples = set()
    for x in src:
        for y in rng.choice(mid, size=int(rng.integers(1, 3)), replace=False):
            triples.add((x, 1, int(y)))
    for y in mid:
        for z in rng.choice(dst, size=int(rng.integers(1, 4)), replace=False):
            triples.add((int(y), 2, int(z)))
    closure = set()
    for x, r, y in list(triples):
        if r != 1:
            continue
        for y2, r2, z in list(triples):
            if r2 == 2 and y2 == y:
                closure.add((x, 0, z))
    triples |= closure
    n_ent = n_src + n_mid + n_dst
    for _ in range(noise_edges):
        a, b = int(rng.integers(0, n_ent)), int(rng.integers(0, n_ent))
        if a != b:
            triples.add((a, 3, b))
    g = make_graph(triples, n_entities=n_ent, n_relations=4)
    rules = {0: frozenset({(1, 2)})}
    return g, sorted(closure), rules


def oracle_paths(graph, source, target, max_len, excluded=None):
    """All simple trajectories by recursive scan over raw edge tuples.

    Filters each candidate edge sequence for chaining, simplicity, length,
    and exclusion; independent of the CSR adjacency and BFS ordering.
    """
    edges = directed_edges(graph)
    found = set()

    def extend(node, visited, acc):
        for u, v, edge in edges:
            if u != node:
                continue
            if excluded is not None and tuple(edge.triplet) == tuple(excluded):
                continue
            if v == target:
                found.add(tuple(acc + [edge]))
                continue
            if v in visited:
                continue
            if len(acc) + 1 < max_len:
                extend(v, visited | {v}, acc + [edge])

    if source != target:
        extend(source, {source}, [])
    return found
