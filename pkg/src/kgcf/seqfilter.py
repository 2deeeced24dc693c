"""Recurrent path classifier and the filtered scorer-dataset build.

The classifier embeds entities and direction-encoded relations, feeds one
gated recurrent step per trajectory edge with the step input
(e_i, r_i, e_{i+1}, r_q), and applies a sigmoid head to the final hidden
state. Entities outside the training graph map to a shared unknown row.
Training is plain seeded mini-batch gradient descent on binary
cross-entropy, single-threaded and bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .ckpt import read_checkpoint, write_checkpoint
from .graph import FORWARD, Graph, Triplet
from .labeling import ScDataset
from .paths import InferencePath, infer_paths_for, textualize_path

CKPT_KIND = b"SEQC"


class DegenerateDataError(Exception):
    """Training data contains a single class."""


class TrainingDivergedError(Exception):
    """Loss became non-finite; carries epoch/batch diagnostics."""


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_from_logits(logits, y):
    # -[y log yhat + (1-y) log(1-yhat)] in a numerically stable form.
    return np.logaddexp(0.0, logits) - y * logits


@dataclass
class SeqTrainConfig:
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 11
    d_e: int = 32
    d_r: int = 32
    d_h: int = 64
    # Reweight so each class carries half the loss mass; labeled path sets
    # are usually negative-heavy and the downstream threshold sits at 0.5.
    balance_classes: bool = True


class SeqClassifier:
    """GRU-style path classifier over entity/relation embedding tables."""

    def __init__(self, n_entities: int, n_relations: int, d_e: int, d_r: int, d_h: int,
                 entity_signature: str, rng: np.random.Generator | None = None):
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.d_e = d_e
        self.d_r = d_r
        self.d_h = d_h
        self.entity_signature = entity_signature
        d_in = 2 * d_e + 2 * d_r
        if rng is None:
            rng = np.random.default_rng(0)

        def init(*shape):
            fan = shape[-1]
            return rng.normal(0.0, 1.0 / np.sqrt(fan), size=shape)

        # Entities start at zero so rows never seen in training stay inert
        # (unseen and unknown entities then contribute nothing to a step).
        self.ent_emb = np.zeros((n_entities + 1, d_e))
        self.rel_emb = init(2 * n_relations, d_r)
        self.Wz = init(d_h, d_in)
        self.Wr = init(d_h, d_in)
        self.Wh = init(d_h, d_in)
        self.Uz = init(d_h, d_h)
        self.Ur = init(d_h, d_h)
        self.Uh = init(d_h, d_h)
        self.bz = np.zeros(d_h)
        self.br = np.zeros(d_h)
        self.bh = np.zeros(d_h)
        # Zero head: a fresh model outputs exactly 0.5 for any path.
        self.w_out = np.zeros(d_h)
        self.b_out = np.zeros(1)

    PARAM_NAMES = (
        "ent_emb", "rel_emb", "Wz", "Wr", "Wh", "Uz", "Ur", "Uh",
        "bz", "br", "bh", "w_out", "b_out",
    )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @property
    def unknown_entity(self) -> int:
        return self.n_entities

    def encode(self, graph: Graph, paths: Sequence[InferencePath]):
        """Index arrays (U, Rho, V, Q, mask) for a batch of paths.

        Paths from a graph with a different entity space map every entity
        to the unknown row; relations are assumed shared.
        """
        if graph.n_relations != self.n_relations:
            raise ValueError("relation vocabulary does not match the trained model")
        known = graph.entity_signature == self.entity_signature
        B = len(paths)
        T = max(len(p.trajectory) for p in paths)
        U = np.zeros((B, T), dtype=np.int64)
        Rho = np.zeros((B, T), dtype=np.int64)
        V = np.zeros((B, T), dtype=np.int64)
        Q = np.zeros(B, dtype=np.int64)
        mask = np.zeros((B, T))
        unk = self.unknown_entity

        def ent(e: int) -> int:
            return e if known and e < self.n_entities else unk

        for b, p in enumerate(paths):
            if not p.trajectory:
                raise ValueError("path has an empty trajectory")
            Q[b] = p.completion.relation
            for t, edge in enumerate(p.trajectory):
                rel = edge.triplet.relation
                Rho[b, t] = rel if edge.direction == FORWARD else rel + self.n_relations
                U[b, t] = ent(edge.start)
                V[b, t] = ent(edge.end)
                mask[b, t] = 1.0
        return U, Rho, V, Q, mask

    def _step_input(self, U_t, Rho_t, V_t, Q):
        return np.concatenate(
            [self.ent_emb[U_t], self.rel_emb[Rho_t], self.ent_emb[V_t], self.rel_emb[Q]],
            axis=1,
        )

    def forward(self, batch, want_cache: bool = False):
        U, Rho, V, Q, mask = batch
        B, T = U.shape
        h = np.zeros((B, self.d_h))
        cache = []
        for t in range(T):
            x = self._step_input(U[:, t], Rho[:, t], V[:, t], Q)
            z = _sigmoid(x @ self.Wz.T + h @ self.Uz.T + self.bz)
            r = _sigmoid(x @ self.Wr.T + h @ self.Ur.T + self.br)
            c = np.tanh(x @ self.Wh.T + (r * h) @ self.Uh.T + self.bh)
            h_new = (1.0 - z) * h + z * c
            m = mask[:, t : t + 1]
            if want_cache:
                cache.append((x, z, r, c, h, m))
            h = m * h_new + (1.0 - m) * h
        logits = h @ self.w_out + self.b_out[0]
        return (logits, h, cache) if want_cache else (logits, h, None)

    def predict_proba(self, graph: Graph, paths: Sequence[InferencePath]) -> np.ndarray:
        if not paths:
            return np.zeros(0)
        logits, _, _ = self.forward(self.encode(graph, paths))
        return _sigmoid(logits)

    def loss_and_grads(self, batch, y: np.ndarray, sample_weight: np.ndarray | None = None):
        """Weighted mean BCE over the batch and gradients for every parameter."""
        U, Rho, V, Q, mask = batch
        B, T = U.shape
        w = np.ones(B) if sample_weight is None else sample_weight
        logits, h_final, cache = self.forward(batch, want_cache=True)
        loss = float(np.mean(w * _bce_from_logits(logits, y)))
        dlogit = w * (_sigmoid(logits) - y) / B

        g = {name: np.zeros_like(arr) for name, arr in self.params().items()}
        g["w_out"] += h_final.T @ dlogit
        g["b_out"] += dlogit.sum(keepdims=True)
        dh = dlogit[:, None] * self.w_out[None, :]
        d_e, d_r = self.d_e, self.d_r
        s_eu = slice(0, d_e)
        s_rho = slice(d_e, d_e + d_r)
        s_ev = slice(d_e + d_r, 2 * d_e + d_r)
        s_q = slice(2 * d_e + d_r, 2 * d_e + 2 * d_r)
        for t in range(T - 1, -1, -1):
            x, z, r, c, h_prev, m = cache[t]
            dh_new = dh * m
            dz = dh_new * (c - h_prev)
            dc = dh_new * z
            dh_prev = dh * (1.0 - m) + dh_new * (1.0 - z)
            dac = dc * (1.0 - c * c)
            drh = dac @ self.Uh
            dr = drh * h_prev
            dh_prev = dh_prev + drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            g["Wz"] += daz.T @ x
            g["Wr"] += dar.T @ x
            g["Wh"] += dac.T @ x
            g["Uz"] += daz.T @ h_prev
            g["Ur"] += dar.T @ h_prev
            g["Uh"] += dac.T @ (r * h_prev)
            g["bz"] += daz.sum(axis=0)
            g["br"] += dar.sum(axis=0)
            g["bh"] += dac.sum(axis=0)
            dx = daz @ self.Wz + dar @ self.Wr + dac @ self.Wh
            dh_prev = dh_prev + daz @ self.Uz + dar @ self.Ur
            np.add.at(g["ent_emb"], U[:, t], dx[:, s_eu])
            np.add.at(g["rel_emb"], Rho[:, t], dx[:, s_rho])
            np.add.at(g["ent_emb"], V[:, t], dx[:, s_ev])
            np.add.at(g["rel_emb"], Q, dx[:, s_q])
            dh = dh_prev
        return loss, g

    def save(self, path) -> None:
        meta = json.dumps({"entity_signature": self.entity_signature}).encode("utf-8")
        header = (self.d_e, self.d_r, self.d_h, self.n_entities, self.n_relations)
        write_checkpoint(path, CKPT_KIND, header, meta, list(self.params().values()))

    @classmethod
    def load(cls, path) -> "SeqClassifier":
        _, header, meta, arrays = read_checkpoint(path, CKPT_KIND)
        d_e, d_r, d_h, n_ent, n_rel = header
        sig = json.loads(meta.decode("utf-8"))["entity_signature"]
        model = cls(n_ent, n_rel, d_e, d_r, d_h, sig)
        for name, arr in zip(cls.PARAM_NAMES, arrays):
            cur = getattr(model, name)
            setattr(model, name, arr.reshape(cur.shape))
        return model


def classify_path(model: SeqClassifier, graph: Graph, path: InferencePath) -> float:
    """Probability that the path rationalizes its completion; always in (0, 1)."""
    return float(model.predict_proba(graph, [path])[0])


def train_sc(
    graph: Graph,
    dataset: ScDataset | Sequence,
    hyper: SeqTrainConfig = SeqTrainConfig(),
) -> tuple[SeqClassifier, list[float]]:
    """Train the classifier; returns the model plus the per-epoch loss log.

    The log's first entry is the loss of the untrained model. Fixed seeds
    give bit-identical parameters across runs.
    """
    items = dataset.items if isinstance(dataset, ScDataset) else list(dataset)
    paths = [it.path for it in items]
    y = np.array([float(it.label) for it in items])
    if len(set(y.tolist())) < 2:
        raise DegenerateDataError("training data must contain both classes")
    rng = np.random.default_rng(hyper.seed)
    model = SeqClassifier(
        graph.n_entities, graph.n_relations, hyper.d_e, hyper.d_r, hyper.d_h,
        graph.entity_signature, rng,
    )
    full = model.encode(graph, paths)
    n = len(paths)
    if hyper.balance_classes:
        n_pos = y.sum()
        weights = np.where(y == 1.0, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        weights = np.ones(n)
    logits, _, _ = model.forward(full)
    log = [float(np.mean(weights * _bce_from_logits(logits, y)))]
    order = np.arange(n)
    for epoch in range(hyper.epochs):
        rng.shuffle(order)
        total = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            batch = tuple(arr[idx] for arr in full[:4]) + (full[4][idx],)
            loss, grads = model.loss_and_grads(batch, y[idx], weights[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch offset {lo}"
                )
            total += loss * len(idx)
            for name, grad in grads.items():
                getattr(model, name)[...] -= hyper.lr * grad
        log.append(total / n)
    return model, log


@dataclass
class FilterConfig:
    """Thresholded filtering knobs and ablation switches."""

    threshold: float = 0.5
    neg_num: int = 5
    max_len: int = 3
    cap: int | None = 50
    disable_positive_filter: bool = False
    disable_negative_filter: bool = False
    anonymize_entities: bool = False

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.neg_num < 1:
            raise ValueError("neg_num must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class PlmItem:
    path: InferencePath
    label: bool
    claim: str
    context: str


@dataclass
class PlmDataset:
    items: list[PlmItem] = field(default_factory=list)
    neg_shortfall: int = 0

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for it in self.items:
                fh.write(
                    json.dumps(
                        {"claim": it.claim, "context": it.context, "label": it.label},
                        sort_keys=True,
                    )
                    + "\n"
                )


def _corrupt_tails(graph: Graph, head: int, relation: int, count: int, rng) -> tuple[np.ndarray, int]:
    existing = set(graph.tails_for(head, relation).tolist())
    existing.add(head)
    pool = np.array(
        [e for e in range(graph.n_entities) if e not in existing], dtype=np.int64
    )
    if len(pool) == 0:
        return pool, count
    take = min(count, len(pool))
    picked = rng.choice(pool, size=take, replace=False)
    return np.sort(picked), count - take


def build_plm_dataset(
    graph: Graph,
    model: SeqClassifier,
    config: FilterConfig,
    seed: int = 0,
) -> PlmDataset:
    """Filtered true/false path dataset for scorer training.

    True items are paths of stored triplets scoring above the threshold;
    false items come from seeded tail corruption and score below it.
    Ablation flags bypass either filter; entity anonymization rewrites
    trajectory entity names in the rendered context only.
    """
    ds = PlmDataset()
    th = config.threshold
    for row in graph.triples.tolist():
        trip = Triplet(*map(int, row))
        pos = infer_paths_for(graph, trip, config.max_len, config.cap)
        if pos:
            scores = model.predict_proba(graph, pos)
            for p, s in zip(pos, scores):
                if config.disable_positive_filter or s > th:
                    claim, context = textualize_path(
                        graph, p, anonymize_entities=config.anonymize_entities
                    )
                    ds.items.append(PlmItem(p, True, claim, context))
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, trip.head, trip.relation, trip.tail])
        )
        tails, shortfall = _corrupt_tails(graph, trip.head, trip.relation, config.neg_num, rng)
        ds.neg_shortfall += shortfall
        for e in tails.tolist():
            neg = infer_paths_for(
                graph, Triplet(trip.head, trip.relation, int(e)), config.max_len,
                config.cap,
            )
            if not neg:
                continue
            scores = model.predict_proba(graph, neg)
            for p, s in zip(neg, scores):
                if config.disable_negative_filter or s < th:
                    claim, context = textualize_path(
                        graph, p, anonymize_entities=config.anonymize_entities
                    )
                    ds.items.append(PlmItem(p, False, claim, context))
    return ds
