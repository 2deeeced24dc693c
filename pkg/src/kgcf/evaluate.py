"""Ranking evaluation: candidate sampling, head/tail prediction, Hits@k and MRR.

Every test triplet yields one task per direction. A task holds the gold
entity plus seeded negatives whose completed triplet appears nowhere in
the full graph. Gold rank uses the pessimistic tie rule, with NO_PATH
candidates below every numeric score.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import Graph, GraphSplit, Triplet
from .scorer import CompletionScore, score_completions, score_sort_key

HEAD = "head"
TAIL = "tail"
DEFAULT_KS = (1, 3, 10)
DEFAULT_NEGATIVES = 49


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class RankingTask:
    triplet: Triplet
    direction: str  # which endpoint is being predicted
    gold: int
    candidates: tuple[int, ...]  # gold first, then sampled negatives
    shortfall: int = 0

    def completion_for(self, candidate: int) -> Triplet:
        h, r, t = self.triplet
        if self.direction == TAIL:
            return Triplet(h, r, candidate)
        return Triplet(candidate, r, t)


def sample_candidates(
    n_entities: int,
    full_triple_set,
    test_triplet: Triplet,
    direction: str,
    count: int = DEFAULT_NEGATIVES,
    seed: int = 0,
) -> RankingTask:
    """Gold plus up to `count` corrupted entities, sampled uniformly.

    An entity is eligible when it differs from the query's fixed endpoint
    and its completed triplet is absent from the full graph. Fewer
    eligible entities than requested are all taken, with the shortfall
    recorded; zero eligible entities is an error.
    """
    h, r, t = test_triplet
    if direction == TAIL:
        gold, fixed = t, h
        completed = lambda e: (h, r, e)
    elif direction == HEAD:
        gold, fixed = h, t
        completed = lambda e: (e, r, t)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    eligible = np.array(
        [
            e
            for e in range(n_entities)
            if e != fixed and e != gold and completed(e) not in full_triple_set
        ],
        dtype=np.int64,
    )
    if len(eligible) == 0:
        raise EvaluationError(
            f"no eligible negative candidates for {tuple(test_triplet)} ({direction})"
        )
    dir_code = 0 if direction == TAIL else 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, h, r, t, dir_code]))
    take = min(count, len(eligible))
    picked = rng.choice(eligible, size=take, replace=False)
    return RankingTask(
        triplet=test_triplet,
        direction=direction,
        gold=gold,
        candidates=(gold, *map(int, picked)),
        shortfall=count - take,
    )


def rank_and_score(
    task: RankingTask, scores: Mapping[int, CompletionScore]
) -> tuple[int, list[CompletionScore]]:
    """Pessimistic gold rank plus the score-descending candidate list.

    Rank counts every other candidate scoring >= gold (NO_PATH ties
    included), so tied golds take the worst position.
    """
    missing = [c for c in task.candidates if c not in scores]
    if missing:
        raise EvaluationError(f"missing score entries for candidates {missing}")
    gold_key = score_sort_key(scores[task.gold])
    rank = 1 + sum(
        1
        for c in task.candidates
        if c != task.gold and score_sort_key(scores[c]) >= gold_key
    )
    ordered = sorted(
        (scores[c] for c in task.candidates),
        key=lambda cs: (score_sort_key(cs), -cs.candidate),
        reverse=True,
    )
    return rank, ordered


@dataclass
class DirectionMetrics:
    hits: dict[int, float]
    mrr: float
    n_tasks: int
    no_path_gold_count: int = 0

    def to_dict(self) -> dict:
        return {
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "mrr": self.mrr,
            "n_tasks": self.n_tasks,
            "no_path_gold_count": self.no_path_gold_count,
        }


def compute_metrics(ranks: Sequence[int], ks: Sequence[int] = DEFAULT_KS) -> DirectionMetrics:
    """Hits@k and mean reciprocal rank over 1-based ranks."""
    if not ranks:
        raise EvaluationError("cannot compute metrics over zero ranks")
    if any(rk < 1 for rk in ranks):
        raise EvaluationError("ranks must be >= 1")
    arr = np.asarray(ranks, dtype=np.float64)
    hits = {int(k): float(np.mean(arr <= k)) for k in ks}
    return DirectionMetrics(hits=hits, mrr=float(np.mean(1.0 / arr)), n_tasks=len(ranks))


@dataclass
class MetricsReport:
    scenario: str
    per_direction: dict[str, DirectionMetrics]
    averaged: dict
    n_tasks: int
    no_path_gold_count: int

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "per_direction": {d: m.to_dict() for d, m in self.per_direction.items()},
            "averaged": self.averaged,
            "n_tasks": self.n_tasks,
            "no_path_gold_count": self.no_path_gold_count,
        }

    def table(self) -> str:
        ks = sorted(next(iter(self.per_direction.values())).hits)
        headers = ["direction"] + [f"hits@{k}" for k in ks] + ["mrr", "tasks"]
        rows = []
        for d, m in sorted(self.per_direction.items()):
            rows.append([d] + [f"{m.hits[k]:.4f}" for k in ks] + [f"{m.mrr:.4f}", str(m.n_tasks)])
        rows.append(
            ["average"]
            + [f"{self.averaged['hits'][str(k)]:.4f}" for k in ks]
            + [f"{self.averaged['mrr']:.4f}", str(self.n_tasks)]
        )
        widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)


def _average_directions(per_direction: dict[str, DirectionMetrics]) -> dict:
    ks = sorted(next(iter(per_direction.values())).hits)
    return {
        "hits": {
            str(k): float(np.mean([m.hits[k] for m in per_direction.values()])) for k in ks
        },
        "mrr": float(np.mean([m.mrr for m in per_direction.values()])),
    }


@dataclass
class EvalConfig:
    max_len: int = 3
    cap: int | None = 50
    ks: tuple[int, ...] = DEFAULT_KS
    n_candidates: int = DEFAULT_NEGATIVES
    seed: int = 17
    jobs: int = 1
    directions: tuple[str, ...] = (HEAD, TAIL)
    anonymize_entities: bool = False


def build_tasks(split: GraphSplit, cfg: EvalConfig) -> list[RankingTask]:
    tasks = []
    n_ent = split.test_graph.n_entities
    for row in split.test.tolist():
        trip = Triplet(*map(int, row))
        for direction in cfg.directions:
            tasks.append(
                sample_candidates(
                    n_ent, split.full_filter_set, trip, direction,
                    cfg.n_candidates, cfg.seed,
                )
            )
    return tasks


def evaluate_task(
    backend, graph: Graph, task: RankingTask, cfg: EvalConfig, classifier=None
) -> tuple[int, bool]:
    """(gold rank, gold had no path) for one task."""
    completions = [task.completion_for(c) for c in task.candidates]
    scored = score_completions(
        backend,
        graph,
        completions,
        cfg.max_len,
        cfg.cap,
        classifier=classifier,
        anonymize_entities=cfg.anonymize_entities,
        candidates=list(task.candidates),
    )
    by_candidate = {cs.candidate: cs for cs in scored}
    rank, _ = rank_and_score(task, by_candidate)
    return rank, by_candidate[task.gold].is_no_path


def run_evaluation(
    split: GraphSplit, backend, cfg: EvalConfig, classifier=None
) -> MetricsReport:
    """Score every test triplet in both directions and aggregate metrics.

    Task evaluation is independent; with jobs > 1 the tasks fan out over a
    thread pool and results join by task index, so parallel runs match
    serial ones exactly. Scorer errors abort the run with the task named.
    """
    tasks = build_tasks(split, cfg)
    graph = split.test_graph
    results: list[tuple[int, bool] | None] = [None] * len(tasks)

    def run_one(i: int):
        try:
            return evaluate_task(backend, graph, tasks[i], cfg, classifier)
        except Exception as exc:
            raise EvaluationError(
                f"task {i} ({tuple(tasks[i].triplet)}, {tasks[i].direction}): {exc}"
            ) from exc

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            for i, res in enumerate(pool.map(run_one, range(len(tasks)))):
                results[i] = res
    else:
        for i in range(len(tasks)):
            results[i] = run_one(i)

    per_direction: dict[str, DirectionMetrics] = {}
    total_no_path = 0
    for direction in cfg.directions:
        ranks = [r for t, (r, _) in zip(tasks, results) if t.direction == direction]
        no_path = sum(1 for t, (_, np_) in zip(tasks, results) if t.direction == direction and np_)
        metrics = compute_metrics(ranks, cfg.ks)
        metrics.no_path_gold_count = no_path
        per_direction[direction] = metrics
        total_no_path += no_path
    return MetricsReport(
        scenario=split.scenario,
        per_direction=per_direction,
        averaged=_average_directions(per_direction),
        n_tasks=len(tasks),
        no_path_gold_count=total_no_path,
    )
