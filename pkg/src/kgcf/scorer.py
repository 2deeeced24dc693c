"""Path scoring: a small trainable text-pair model and a remote adapter.

A (claim, context) pair is scored in [0, 1]. The builtin backend runs a
gated recurrent cell over the token sequence of both segments, with each
token vector carrying its sentence slot and a claim-overlap annotation,
so relation order, traversal orientation, and path length survive
encoding. A completion's score is the maximum over its paths' scores;
candidates without any path get a NO_PATH sentinel that ranks below
every numeric score.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .ckpt import read_checkpoint, write_checkpoint
from .graph import Graph, Triplet
from .paths import CONTEXT_SEPARATOR, InferencePath, infer_paths_for, textualize_path
from .seqfilter import DegenerateDataError, TrainingDivergedError, _bce_from_logits, _sigmoid

CKPT_KIND = b"TXTS"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ScorerError(Exception):
    """Remote scorer failure (timeout, transport, or malformed response)."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class CompletionScore(NamedTuple):
    candidate: int
    score: float | None  # None is the NO_PATH sentinel
    best_path: InferencePath | None

    @property
    def is_no_path(self) -> bool:
        return self.score is None


def score_sort_key(cs: CompletionScore) -> tuple:
    """NO_PATH compares below every numeric score."""
    return (0, 0.0) if cs.score is None else (1, cs.score)


def _ramp(n: int) -> np.ndarray:
    """Linear position weights from -1 to 1 over n slots (0 for a single slot)."""
    if n <= 1:
        return np.zeros(max(n, 0))
    return 2.0 * np.arange(n) / (n - 1) - 1.0


@dataclass
class ScorerTrainConfig:
    epochs: int = 40
    lr: float = 0.1
    batch_size: int = 64
    seed: int = 13
    d_tok: int = 32
    d_hidden: int = 48
    # Context sentences are tagged with this many hop slots.
    n_slots: int = 3
    # Reweight so each class carries half the loss mass; filtered datasets
    # are usually negative-heavy.
    balance_classes: bool = True
    # Decoupled L2 shrinkage; keeps rarely seen tokens near zero so ranking
    # rests on structural signals instead of memorized entity tokens.
    weight_decay: float = 1e-4
    # Soft targets bound the optimal logits; completion ranking needs
    # usable margins near the top, not saturated probabilities.
    label_smoothing: float = 0.1
    # Train-time probability of masking a token to unknown. Blocks
    # memorization of entity-token combinations; endpoint binding survives
    # through the claim-overlap channel, which ignores token identity.
    word_dropout: float = 0.3


class BuiltinScorer:
    """Recurrent text-pair scorer over slot-tagged token embeddings.

    Both segments become one token sequence: claim tokens first, then
    context tokens tagged by sentence slot (sentences past the last slot
    share it). A context token also occurring in the claim carries a
    shared overlap vector scaled by its claim position, tying the claim's
    endpoints to where they appear along the path without entity-specific
    parameters. Bag pooling is not enough here: forward and inverse
    traversals of the same stored triplets, or the same hops reordered,
    produce identical bags yet opposite labels.
    """

    kind = "builtin"

    def __init__(self, vocab: list[str], d_tok: int, d_hidden: int,
                 n_slots: int = 3, rng: np.random.Generator | None = None):
        self.vocab = list(vocab)
        self.token_index = {t: i + 1 for i, t in enumerate(self.vocab)}  # 0 = unknown
        self.d_tok = d_tok
        self.d_hidden = d_hidden
        self.n_slots = n_slots
        if rng is None:
            rng = np.random.default_rng(0)

        def init(*shape):
            return rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), size=shape)

        v = len(self.vocab) + 1
        # Token rows start at zero so types unseen in training stay inert.
        self.tok_emb = np.zeros((v, d_tok))
        self.ovl_emb = init(d_tok)
        self.slot_emb = init(1 + n_slots, d_tok)
        self.Wz = init(d_hidden, d_tok)
        self.Wr = init(d_hidden, d_tok)
        self.Wh = init(d_hidden, d_tok)
        self.Uz = init(d_hidden, d_hidden)
        self.Ur = init(d_hidden, d_hidden)
        self.Uh = init(d_hidden, d_hidden)
        self.bz = np.zeros(d_hidden)
        self.br = np.zeros(d_hidden)
        self.bh = np.zeros(d_hidden)
        # Zero head: a fresh model scores 0.5 for any input.
        self.w2 = np.zeros(d_hidden)
        self.b2 = np.zeros(1)

    PARAM_NAMES = (
        "tok_emb", "ovl_emb", "slot_emb", "Wz", "Wr", "Wh", "Uz", "Ur", "Uh",
        "bz", "br", "bh", "w2", "b2",
    )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def token_ids(self, text: str) -> list[int]:
        return [self.token_index.get(t, 0) for t in tokenize(text)]

    def encode_pair(self, claim: str, context: str):
        """(ids, slots, claim-overlap weights) for one pair."""
        cids = self.token_ids(claim)
        ids = list(cids)
        slots = [0] * len(cids)
        pos = _ramp(len(cids))
        claim_pos: dict[int, list[float]] = {}
        for t, p in zip(cids, pos):
            claim_pos.setdefault(t, []).append(p)
        cmap = {t: float(np.mean(ps)) for t, ps in claim_pos.items()}
        wclaim = [cmap[t] for t in cids]
        for i, sentence in enumerate(context.split(CONTEXT_SEPARATOR)):
            slot = 1 + min(i, self.n_slots - 1)
            for t in self.token_ids(sentence):
                ids.append(t)
                slots.append(slot)
                wclaim.append(cmap.get(t, 0.0))
        return ids, slots, wclaim

    @staticmethod
    def _pad(encoded):
        B = len(encoded)
        T = max(len(ids) for ids, _, _ in encoded)
        ID = np.zeros((B, T), dtype=np.int64)
        SL = np.zeros((B, T), dtype=np.int64)
        WC = np.zeros((B, T))
        mask = np.zeros((B, T))
        for b, (ids, slots, wclaim) in enumerate(encoded):
            n = len(ids)
            ID[b, :n] = ids
            SL[b, :n] = slots
            WC[b, :n] = wclaim
            mask[b, :n] = 1.0
        return ID, SL, WC, mask

    def _forward(self, batch, want_cache: bool = False):
        ID, SL, WC, mask = batch
        B, T = ID.shape
        h = np.zeros((B, self.d_hidden))
        cache = []
        for t in range(T):
            x = self.tok_emb[ID[:, t]] + self.slot_emb[SL[:, t]] + WC[:, t, None] * self.ovl_emb
            z = _sigmoid(x @ self.Wz.T + h @ self.Uz.T + self.bz)
            r = _sigmoid(x @ self.Wr.T + h @ self.Ur.T + self.br)
            c = np.tanh(x @ self.Wh.T + (r * h) @ self.Uh.T + self.bh)
            h_new = (1.0 - z) * h + z * c
            m = mask[:, t : t + 1]
            if want_cache:
                cache.append((x, z, r, c, h, m))
            h = m * h_new + (1.0 - m) * h
        logits = h @ self.w2 + self.b2[0]
        return (logits, h, cache) if want_cache else (logits, h, None)

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        if not pairs:
            return np.zeros(0)
        encoded = [self.encode_pair(c, k) for c, k in pairs]
        logits, _, _ = self._forward(self._pad(encoded))
        return _sigmoid(logits)

    def loss_and_grads(self, batch, y: np.ndarray, sample_weight: np.ndarray | None = None):
        """Weighted mean BCE and parameter gradients for a padded batch."""
        ID, SL, WC, mask = batch
        B, T = ID.shape
        w = np.ones(B) if sample_weight is None else sample_weight
        logits, h_final, cache = self._forward(batch, want_cache=True)
        loss = float(np.mean(w * _bce_from_logits(logits, y)))
        dlogit = w * (_sigmoid(logits) - y) / B

        g = {name: np.zeros_like(arr) for name, arr in self.params().items()}
        g["w2"] += h_final.T @ dlogit
        g["b2"] += dlogit.sum(keepdims=True)
        dh = dlogit[:, None] * self.w2[None, :]
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
            dh = dh_prev + daz @ self.Uz + dar @ self.Ur
            np.add.at(g["tok_emb"], ID[:, t], dx)
            np.add.at(g["slot_emb"], SL[:, t], dx)
            g["ovl_emb"] += WC[:, t] @ dx
        return loss, g

    def save(self, path) -> None:
        meta = json.dumps({"vocab": self.vocab}).encode("utf-8")
        header = (self.d_tok, self.d_hidden, len(self.vocab), self.n_slots)
        write_checkpoint(path, CKPT_KIND, header, meta, list(self.params().values()))

    @classmethod
    def load(cls, path) -> "BuiltinScorer":
        _, header, meta, arrays = read_checkpoint(path, CKPT_KIND)
        d_tok, d_hidden, _, n_slots = header
        vocab = json.loads(meta.decode("utf-8"))["vocab"]
        model = cls(vocab, d_tok, d_hidden, n_slots)
        for name, arr in zip(cls.PARAM_NAMES, arrays):
            cur = getattr(model, name)
            setattr(model, name, arr.reshape(cur.shape))
        return model


def build_vocab(texts) -> list[str]:
    seen = set()
    for text in texts:
        seen.update(tokenize(text))
    return sorted(seen)


def train_scorer(
    items: Sequence[tuple[str, str, bool]],
    hyper: ScorerTrainConfig = ScorerTrainConfig(),
) -> tuple[BuiltinScorer, list[float]]:
    """Train the builtin scorer on (claim, context, label) triples.

    The vocabulary is built from the training texts; unseen tokens at
    inference time share the unknown embedding. The returned log starts
    with the untrained model's loss.
    """
    items = list(items)
    y = np.array([1.0 if lab else 0.0 for _, _, lab in items])
    if len(set(y.tolist())) < 2:
        raise DegenerateDataError("training data must contain both classes")
    rng = np.random.default_rng(hyper.seed)
    vocab = build_vocab([c for c, _, _ in items] + [k for _, k, _ in items])
    model = BuiltinScorer(vocab, hyper.d_tok, hyper.d_hidden, hyper.n_slots, rng)
    encoded = [model.encode_pair(c, k) for c, k, _ in items]
    n = len(items)
    if hyper.balance_classes:
        n_pos = y.sum()
        weights = np.where(y == 1.0, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        weights = np.ones(n)
    ls = hyper.label_smoothing
    y = y * (1.0 - 2.0 * ls) + ls
    logits, _, _ = model._forward(model._pad(encoded))
    log = [float(np.mean(weights * _bce_from_logits(logits, y)))]
    order = np.arange(n)
    for epoch in range(hyper.epochs):
        rng.shuffle(order)
        total = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            ID, SL, WC, mask = model._pad([encoded[i] for i in idx])
            if hyper.word_dropout > 0.0:
                drop = (rng.random(ID.shape) < hyper.word_dropout) & (mask > 0)
                ID = np.where(drop, 0, ID)
            loss, grads = model.loss_and_grads((ID, SL, WC, mask), y[idx], weights[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch offset {lo}"
                )
            total += loss * len(idx)
            for name, grad in grads.items():
                arr = getattr(model, name)
                arr[...] -= hyper.lr * (grad + hyper.weight_decay * arr)
        log.append(total / n)
    return model, log


class RemoteScorer:
    """Adapter for a scoring service speaking the /score wire protocol."""

    kind = "remote_plm"

    def __init__(self, base_url: str, timeout: float = 60.0, session=None):
        import requests

        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = session or requests.Session()

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        import requests

        body = {"pairs": [{"claim": c, "context": k} for c, k in pairs]}
        try:
            resp = self._session.post(
                f"{self.base_url}/score", json=body, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ScorerError(f"scoring request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ScorerError(f"scoring request failed with status {resp.status_code}")
        try:
            scores = resp.json()["scores"]
        except Exception as exc:
            raise ScorerError(f"malformed scoring response: {exc}") from exc
        if len(scores) != len(pairs):
            raise ScorerError(
                f"scoring response has {len(scores)} scores for {len(pairs)} pairs"
            )
        arr = np.asarray(scores, dtype=np.float64)
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ScorerError("scores outside [0, 1]")
        return arr

    def start_training(self, dataset_path: str, **options) -> str:
        import requests

        body = {"dataset_path": dataset_path, **options}
        try:
            resp = self._session.post(
                f"{self.base_url}/train", json=body, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ScorerError(f"training request failed: {exc}") from exc
        if resp.status_code not in (200, 202):
            raise ScorerError(f"training request failed with status {resp.status_code}")
        return resp.json()["job_id"]

    def health(self) -> dict:
        import requests

        try:
            resp = self._session.get(f"{self.base_url}/health", timeout=self.timeout)
        except requests.RequestException as exc:
            raise ScorerError(f"health request failed: {exc}") from exc
        return {"status_code": resp.status_code, **(resp.json() if resp.content else {})}


def score_path(backend, claim: str, context: str) -> float:
    """Probability for one (claim, context) pair."""
    if not claim or not context:
        raise ValueError("claim and context must be non-empty")
    return float(backend.score_pairs([(claim, context)])[0])


def score_completions(
    backend,
    graph: Graph,
    completions: Sequence[Triplet],
    max_len: int,
    cap: int | None = 50,
    classifier=None,
    classifier_threshold: float = 0.5,
    anonymize_entities: bool = False,
    candidates: Sequence[int] | None = None,
) -> list[CompletionScore]:
    """Max-aggregated scores for a batch of completions (one backend call).

    `candidates` names the entity each completion stands for (defaults to
    the completion tail; head prediction passes heads).
    """
    if candidates is None:
        candidates = [c.tail for c in completions]
    per_completion: list[list[InferencePath]] = []
    pairs: list[tuple[str, str]] = []
    spans: list[tuple[int, int]] = []
    for comp in completions:
        paths = infer_paths_for(graph, comp, max_len, cap)
        if classifier is not None and paths:
            probs = classifier.predict_proba(graph, paths)
            paths = [p for p, s in zip(paths, probs) if s > classifier_threshold]
        start = len(pairs)
        for p in paths:
            pairs.append(textualize_path(graph, p, anonymize_entities=anonymize_entities))
        spans.append((start, len(pairs)))
        per_completion.append(paths)
    scores = backend.score_pairs(pairs) if pairs else np.zeros(0)
    out: list[CompletionScore] = []
    for cand, paths, (lo, hi) in zip(candidates, per_completion, spans):
        if lo == hi:
            out.append(CompletionScore(cand, None, None))
            continue
        seg = scores[lo:hi]
        best = int(np.argmax(seg))
        out.append(CompletionScore(cand, float(seg[best]), paths[best]))
    return out


def score_completion(
    backend,
    graph: Graph,
    completion: Triplet,
    max_len: int,
    cap: int | None = 50,
    classifier=None,
    classifier_threshold: float = 0.5,
) -> CompletionScore:
    """Highest path score for one completion; NO_PATH when no path exists."""
    return score_completions(
        backend, graph, [completion], max_len, cap, classifier, classifier_threshold
    )[0]
