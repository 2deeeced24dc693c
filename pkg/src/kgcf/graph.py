"""Knowledge graph loading, indexing, and adjacency queries.

Graphs are loaded from tab-separated triple files plus id-to-text mapping
files, re-indexed to dense integer handles, and indexed for O(degree)
traversal in both edge directions. A graph is immutable after load and
safe for unsynchronized concurrent reads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

FORWARD = 0
INVERSE = 1

TRANSDUCTIVE = "transductive"
INDUCTIVE = "inductive"


class GraphLoadError(Exception):
    """Raised for malformed or empty input files."""


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


class Edge(NamedTuple):
    """A stored triplet traversed in a given direction.

    The stored triplet is always kept in forward order; an inverse edge
    from A to B corresponds to a stored triplet (B, r, A).
    """

    triplet: Triplet
    direction: int

    @property
    def start(self) -> int:
        return self.triplet.head if self.direction == FORWARD else self.triplet.tail

    @property
    def end(self) -> int:
        return self.triplet.tail if self.direction == FORWARD else self.triplet.head


@dataclass(frozen=True)
class LoadReport:
    n_triples: int
    n_entities: int
    n_relations: int
    n_duplicate_lines: int
    n_missing_entity_text: int
    n_missing_relation_text: int


def _read_text_map(path: Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise GraphLoadError(f"{path}: line {lineno}: expected 'id<TAB>text'")
            ident, text = line.split("\t", 1)
            mapping[ident] = text
    return mapping


def _read_triple_rows(path: Path) -> list[tuple[str, str, str]]:
    rows: list[tuple[str, str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphLoadError(
                    f"{path}: line {lineno}: expected 3 tab-separated columns, got {len(parts)}"
                )
            rows.append((parts[0], parts[1], parts[2]))
    if not rows:
        raise GraphLoadError(f"{path}: no triples found")
    return rows


class Graph:
    """Immutable indexed knowledge graph over dense integer handles.

    Adjacency is stored in CSR form with one entry per traversable edge:
    every stored triplet contributes a forward edge at its head and an
    inverse edge at its tail. Edge order per entity is forward edges first
    (sorted by relation then neighbor), then inverse edges likewise, which
    equals sorting by the direction-encoded relation handle r + |R|.
    """

    def __init__(
        self,
        entity_ids: list[str],
        relation_ids: list[str],
        entity_texts: list[str],
        relation_texts: list[str],
        triples: np.ndarray,
        report: LoadReport,
    ):
        self.entity_ids = entity_ids
        self.relation_ids = relation_ids
        self.entity_texts = entity_texts
        self.relation_texts = relation_texts
        self.entity_index = {e: i for i, e in enumerate(entity_ids)}
        self.relation_index = {r: i for i, r in enumerate(relation_ids)}
        self.triples = triples
        self.report = report
        self.triple_set: frozenset[tuple[int, int, int]] = frozenset(
            map(tuple, triples.tolist())
        )
        self._build_adjacency()
        sig = hashlib.sha256("\n".join(entity_ids).encode("utf-8")).hexdigest()
        self.entity_signature = sig

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def n_relations(self) -> int:
        return len(self.relation_ids)

    def _build_adjacency(self) -> None:
        n_ent = self.n_entities
        n_rel = self.n_relations
        m = len(self.triples)
        src = np.empty(2 * m, dtype=np.int32)
        enc = np.empty(2 * m, dtype=np.int32)
        nbr = np.empty(2 * m, dtype=np.int32)
        if m:
            h, r, t = self.triples[:, 0], self.triples[:, 1], self.triples[:, 2]
            src[:m], enc[:m], nbr[:m] = h, r, t
            src[m:], enc[m:], nbr[m:] = t, r + n_rel, h
        order = np.lexsort((nbr, enc, src))
        self.adj_src = src[order]
        self.adj_rel = enc[order]
        self.adj_nbr = nbr[order]
        self.adj_indptr = np.zeros(n_ent + 1, dtype=np.int64)
        np.add.at(self.adj_indptr, self.adj_src + 1, 1)
        np.cumsum(self.adj_indptr, out=self.adj_indptr)

    def contains(self, triplet: tuple[int, int, int] | Triplet) -> bool:
        """True iff the forward triplet is stored; inverse direction is not consulted."""
        h, r, t = triplet
        return (h, r, t) in self.triple_set

    def neighbors(self, entity: int) -> list[Edge]:
        """All edges out of `entity`, forward and inverse, in deterministic order."""
        if not 0 <= entity < self.n_entities:
            raise KeyError(f"unknown entity handle {entity}")
        lo, hi = self.adj_indptr[entity], self.adj_indptr[entity + 1]
        n_rel = self.n_relations
        out = []
        for k in range(lo, hi):
            enc = int(self.adj_rel[k])
            v = int(self.adj_nbr[k])
            if enc < n_rel:
                out.append(Edge(Triplet(entity, enc, v), FORWARD))
            else:
                out.append(Edge(Triplet(v, enc - n_rel, entity), INVERSE))
        return out

    def edge_from_adj(self, k: int) -> Edge:
        """Decode the CSR entry at global index k into an Edge."""
        u = int(self.adj_src[k])
        enc = int(self.adj_rel[k])
        v = int(self.adj_nbr[k])
        if enc < self.n_relations:
            return Edge(Triplet(u, enc, v), FORWARD)
        return Edge(Triplet(v, enc - self.n_relations, u), INVERSE)

    def tails_for(self, head: int, relation: int) -> np.ndarray:
        """Tail handles of stored triplets (head, relation, *)."""
        lo, hi = self.adj_indptr[head], self.adj_indptr[head + 1]
        rels = self.adj_rel[lo:hi]
        sel = rels == relation
        return self.adj_nbr[lo:hi][sel]

    def entity_text(self, handle: int) -> str:
        return self.entity_texts[handle]

    def relation_text(self, handle: int) -> str:
        return self.relation_texts[handle]


def _build_graph(
    rows: Iterable[tuple[str, str, str]],
    entity_text_map: dict[str, str],
    relation_text_map: dict[str, str],
    entity_vocab: list[str] | None = None,
    relation_vocab: list[str] | None = None,
) -> Graph:
    ent_ids = list(entity_vocab) if entity_vocab is not None else []
    rel_ids = list(relation_vocab) if relation_vocab is not None else []
    ent_index = {e: i for i, e in enumerate(ent_ids)}
    rel_index = {r: i for i, r in enumerate(rel_ids)}

    raw: list[tuple[int, int, int]] = []
    for h, r, t in rows:
        for e in (h, t):
            if e not in ent_index:
                ent_index[e] = len(ent_ids)
                ent_ids.append(e)
        if r not in rel_index:
            rel_index[r] = len(rel_ids)
            rel_ids.append(r)
        raw.append((ent_index[h], rel_index[r], ent_index[t]))

    arr = np.array(raw, dtype=np.int32).reshape(-1, 3)
    uniq = np.unique(arr, axis=0) if len(arr) else arr
    n_dup = len(arr) - len(uniq)

    missing_e = 0
    ent_texts = []
    for e in ent_ids:
        text = entity_text_map.get(e, "")
        if not text:
            text = e
            missing_e += 1
        ent_texts.append(text)
    missing_r = 0
    rel_texts = []
    for r in rel_ids:
        text = relation_text_map.get(r, "")
        if not text:
            text = r
            missing_r += 1
        rel_texts.append(text)

    report = LoadReport(
        n_triples=len(uniq),
        n_entities=len(ent_ids),
        n_relations=len(rel_ids),
        n_duplicate_lines=n_dup,
        n_missing_entity_text=missing_e,
        n_missing_relation_text=missing_r,
    )
    return Graph(ent_ids, rel_ids, ent_texts, rel_texts, uniq, report)


def load_graph(
    triples_file: str | Path,
    entity_text_file: str | Path,
    relation_text_file: str | Path,
) -> Graph:
    """Load one graph from a 3-column tab-separated triples file.

    Duplicate triple lines are deduplicated. Identifiers without display
    text fall back to the raw identifier; the fallback count is recorded
    in the graph's load report.
    """
    rows = _read_triple_rows(Path(triples_file))
    ent_map = _read_text_map(Path(entity_text_file))
    rel_map = _read_text_map(Path(relation_text_file))
    return _build_graph(rows, ent_map, rel_map)


def _map_rows(rows: list[tuple[str, str, str]], graph: Graph, source: str) -> np.ndarray:
    out = []
    for h, r, t in rows:
        if r not in graph.relation_index:
            raise GraphLoadError(f"{source}: relation '{r}' not present in the graph vocabulary")
        out.append((graph.entity_index[h], graph.relation_index[r], graph.entity_index[t]))
    arr = np.array(out, dtype=np.int32).reshape(-1, 3)
    return np.unique(arr, axis=0)


@dataclass
class GraphSplit:
    """Train/valid/test triple sets plus the graphs path queries run over.

    Transductive: one shared entity space; `test_graph` is `train_graph`.
    Inductive: `test_graph` is built from a disjoint test-graph triples
    file; its entity space is separate while relations are shared.
    """

    scenario: str
    train_graph: Graph
    test_graph: Graph
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    # Membership filter for candidate sampling, in test_graph handle space.
    full_filter_set: frozenset = field(repr=False)

    def validate(self) -> None:
        tr = set(map(tuple, self.train.tolist()))
        va = set(map(tuple, self.valid.tolist()))
        te = set(map(tuple, self.test.tolist()))
        if self.scenario == TRANSDUCTIVE:
            if tr & va or tr & te or va & te:
                raise GraphLoadError("train/valid/test splits are not pairwise disjoint")
        else:
            if tr & va:
                raise GraphLoadError("train/valid splits are not pairwise disjoint")
            if self.test_graph.triple_set & te:
                raise GraphLoadError("test-graph triples overlap the test split")
            shared = set(self.train_graph.entity_ids) & set(self.test_graph.entity_ids)
            if shared:
                raise GraphLoadError(
                    f"inductive test-graph entities overlap train entities ({len(shared)} shared)"
                )


def load_split(data_dir: str | Path, scenario: str = TRANSDUCTIVE) -> GraphSplit:
    """Load a dataset directory into a GraphSplit.

    Expects train.txt / valid.txt / test.txt plus entity2text.txt and
    relation2text.txt; inductive datasets also provide test_graph.txt
    holding the disjoint test-graph triples.
    """
    d = Path(data_dir)
    if scenario not in (TRANSDUCTIVE, INDUCTIVE):
        raise GraphLoadError(f"unknown scenario '{scenario}'")
    ent_map = _read_text_map(d / "entity2text.txt")
    rel_map = _read_text_map(d / "relation2text.txt")
    train_rows = _read_triple_rows(d / "train.txt")
    valid_rows = _read_triple_rows(d / "valid.txt")
    test_rows = _read_triple_rows(d / "test.txt")

    if scenario == TRANSDUCTIVE:
        # One handle space covering every split; edges come from train only.
        vocab_rows = train_rows + valid_rows + test_rows
        ent_vocab: list[str] = []
        rel_vocab: list[str] = []
        seen_e: set[str] = set()
        seen_r: set[str] = set()
        for h, r, t in vocab_rows:
            for e in (h, t):
                if e not in seen_e:
                    seen_e.add(e)
                    ent_vocab.append(e)
            if r not in seen_r:
                seen_r.add(r)
                rel_vocab.append(r)
        graph = _build_graph(train_rows, ent_map, rel_map, ent_vocab, rel_vocab)
        train = graph.triples
        valid = _map_rows(valid_rows, graph, str(d / "valid.txt"))
        test = _map_rows(test_rows, graph, str(d / "test.txt"))
        full = graph.triple_set | set(map(tuple, valid.tolist())) | set(
            map(tuple, test.tolist())
        )
        split = GraphSplit(scenario, graph, graph, train, valid, test, frozenset(full))
    else:
        tg_rows = _read_triple_rows(d / "test_graph.txt")
        train_vocab_e: list[str] = []
        seen: set[str] = set()
        for h, r, t in train_rows + valid_rows:
            for e in (h, t):
                if e not in seen:
                    seen.add(e)
                    train_vocab_e.append(e)
        train_graph = _build_graph(train_rows, ent_map, rel_map, train_vocab_e)
        test_vocab_e = []
        seen = set()
        for h, r, t in tg_rows + test_rows:
            for e in (h, t):
                if e not in seen:
                    seen.add(e)
                    test_vocab_e.append(e)
        # Relations are shared with the training graph; new ones are an error.
        test_graph = _build_graph(
            tg_rows, ent_map, rel_map, test_vocab_e, list(train_graph.relation_ids)
        )
        for h, r, t in test_rows:
            if r not in train_graph.relation_index:
                raise GraphLoadError(
                    f"{d / 'test.txt'}: relation '{r}' unseen during training"
                )
        train = train_graph.triples
        valid = _map_rows(valid_rows, train_graph, str(d / "valid.txt"))
        test = _map_rows(test_rows, test_graph, str(d / "test.txt"))
        full = test_graph.triple_set | set(map(tuple, test.tolist()))
        split = GraphSplit(
            scenario, train_graph, test_graph, train, valid, test, frozenset(full)
        )
    split.validate()
    return split
