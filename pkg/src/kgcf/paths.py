"""Bounded simple-path enumeration and path textualization.

A trajectory is a chain of edges with no repeated entity; an inference
path pairs a candidate completion triplet with a trajectory connecting
its head to its tail. Enumeration order is breadth-first and neighbor
ordered, so truncation by `cap` keeps the shortest paths.
"""

from __future__ import annotations

from typing import NamedTuple

from . import _kernels
from .graph import FORWARD, Edge, Graph, Triplet

DEFAULT_CAP = 50
CONTEXT_SEPARATOR = " ; "


class InferencePath(NamedTuple):
    completion: Triplet
    trajectory: tuple[Edge, ...]


def enumerate_paths(
    graph: Graph,
    source: int,
    target: int,
    max_len: int,
    excluded: Triplet | tuple[int, int, int] | None = None,
    cap: int | None = DEFAULT_CAP,
) -> list[tuple[Edge, ...]]:
    """All simple trajectories from source to target with length <= max_len.

    Both traversal directions of `excluded` are banned. `cap=None` removes
    the truncation limit.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if cap is not None and cap < 1:
        raise ValueError("cap must be >= 1 or None")
    for e in (source, target):
        if not 0 <= e < graph.n_entities:
            raise KeyError(f"unknown entity handle {e}")
    flat, offsets = _kernels.enumerate_path_edges(
        graph.adj_indptr,
        graph.adj_rel,
        graph.adj_nbr,
        graph.n_relations,
        source,
        target,
        max_len,
        tuple(excluded) if excluded is not None else None,
        cap,
    )
    out = []
    for i in range(len(offsets) - 1):
        out.append(
            tuple(graph.edge_from_adj(int(k)) for k in flat[offsets[i] : offsets[i + 1]])
        )
    return out


def infer_paths_for(
    graph: Graph,
    completion: Triplet,
    max_len: int,
    cap: int | None = DEFAULT_CAP,
    excluded: Triplet | None = None,
) -> list[InferencePath]:
    """Inference paths supporting `completion`, excluding the completion edge itself."""
    ban = completion if excluded is None else excluded
    trajs = enumerate_paths(graph, completion.head, completion.tail, max_len, ban, cap)
    return [InferencePath(completion, t) for t in trajs]


def textualize_triplet(graph: Graph, item: Edge | Triplet | tuple[int, int, int]) -> str:
    """Render a triplet or edge as a sentence in stored forward order.

    Inverse edges render their stored triplet, so both directions of one
    stored triplet produce identical text.
    """
    trip = item.triplet if isinstance(item, Edge) else Triplet(*item)
    return (
        f"{graph.entity_text(trip.head)} "
        f"{graph.relation_text(trip.relation)} "
        f"{graph.entity_text(trip.tail)}."
    )


def _trajectory_entity_order(trajectory: tuple[Edge, ...]) -> dict[int, int]:
    # Anonymous labels follow first appearance along the traversal.
    order: dict[int, int] = {}
    for edge in trajectory:
        for e in (edge.start, edge.end):
            if e not in order:
                order[e] = len(order) + 1
    return order


def textualize_path(
    graph: Graph, path: InferencePath, anonymize_entities: bool = False
) -> tuple[str, str]:
    """(claim, context) text pair for a path; the segments stay distinct.

    With `anonymize_entities`, trajectory entity names become "entity<k>"
    by order of first appearance while relation texts are kept; the claim
    is left untouched.
    """
    claim = textualize_triplet(graph, path.completion)
    if not anonymize_entities:
        context = CONTEXT_SEPARATOR.join(
            textualize_triplet(graph, edge) for edge in path.trajectory
        )
        return claim, context
    alias = _trajectory_entity_order(path.trajectory)
    parts = []
    for edge in path.trajectory:
        h, r, t = edge.triplet
        parts.append(
            f"entity{alias[h]} {graph.relation_text(r)} entity{alias[t]}."
        )
    return claim, CONTEXT_SEPARATOR.join(parts)


def relation_sequence(path: InferencePath, n_relations: int) -> tuple[int, ...]:
    """Direction-encoded relation handles along the trajectory (inverse = r + |R|)."""
    return tuple(
        e.triplet.relation + (0 if e.direction == FORWARD else n_relations)
        for e in path.trajectory
    )
