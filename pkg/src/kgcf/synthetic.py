"""Synthetic compositional knowledge graph generator.

Builds a homogeneous random graph in which the query relation holds
between distinct x and z exactly when some y gives step_one(x, y) and
step_two(y, z). A direct_link relation shadows part of the train-split
query pairs, so even length-1 path datasets contain positive labels while
held-out queries still require the two-hop pattern. A configurable share
of noise edges provides distractor paths. Keeping one entity pool (rather
than layers) makes head and tail corruption distributions symmetric, so a
scorer trained on tail corruptions transfers to head prediction. The
accompanying rules file drives the rule-oracle labeler.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

QUERY_REL = "target_link"
STEP_ONE = "step_one"
STEP_TWO = "step_two"
DIRECT = "direct_link"
NOISE_A = "noise_alpha"
NOISE_B = "noise_beta"

RELATION_TEXTS = {
    QUERY_REL: "target link",
    STEP_ONE: "step one",
    STEP_TWO: "step two",
    DIRECT: "direct link",
    NOISE_A: "noise alpha",
    NOISE_B: "noise beta",
}

ORACLE_RULES = {
    QUERY_REL: [[STEP_ONE, STEP_TWO], [DIRECT]],
}


@dataclass
class SynthConfig:
    n_entities: int = 300
    n_step_one: int = 300
    n_step_two: int = 300
    direct_fraction: float = 0.35
    distractor_fraction: float = 0.10
    n_valid: int = 20
    n_test: int = 100
    seed: int = 7
    inductive: bool = False
    # Inductive test universe (ignored when transductive).
    n_entities_test: int = 150
    n_step_test: int = 175


def _entity_name(prefix: str, i: int) -> str:
    return f"{prefix}ent{i:03d}"


def _entity_text(name: str) -> str:
    prefix, num = name.split("ent", 1)
    return f"entity {prefix}{num}"


def _sample_pairs(rng, entities, count):
    pairs = set()
    guard = 0
    while len(pairs) < count and guard < 50 * count:
        guard += 1
        a = entities[int(rng.integers(0, len(entities)))]
        b = entities[int(rng.integers(0, len(entities)))]
        if a != b:
            pairs.add((a, b))
    return sorted(pairs)


def _generate_universe(rng, n_entities, n_step_one, n_step_two,
                       distractor_fraction, prefix: str = ""):
    entities = [_entity_name(prefix, i) for i in range(n_entities)]
    edges: set[tuple[str, str, str]] = set()
    for a, b in _sample_pairs(rng, entities, n_step_one):
        edges.add((a, STEP_ONE, b))
    for a, b in _sample_pairs(rng, entities, n_step_two):
        edges.add((a, STEP_TWO, b))
    out_two: dict[str, list[str]] = {}
    for h, r, t in edges:
        if r == STEP_TWO:
            out_two.setdefault(h, []).append(t)
    # Query closure: the two-hop composition over distinct endpoints.
    closure = set()
    for h, r, t in list(edges):
        if r != STEP_ONE:
            continue
        for z in out_two.get(t, []):
            if z != h:
                closure.add((h, QUERY_REL, z))
    n_noise = int(round(distractor_fraction * (len(edges) + len(closure))))
    noise = set()
    guard = 0
    while len(noise) < n_noise and guard < 50 * max(1, n_noise):
        guard += 1
        a = entities[int(rng.integers(0, len(entities)))]
        b = entities[int(rng.integers(0, len(entities)))]
        if a == b:
            continue
        r = NOISE_A if rng.random() < 0.5 else NOISE_B
        if (a, r, b) in edges or (a, r, b) in noise:
            continue
        noise.add((a, r, b))
    edges |= noise
    return entities, sorted(edges), sorted(closure)


def _write_triples(path: Path, rows) -> None:
    path.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows), encoding="utf-8")


def generate_dataset(out_dir: str | Path, cfg: SynthConfig = SynthConfig()) -> dict:
    """Write a dataset directory; returns a summary of what was generated."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    entities, edges, closure = _generate_universe(
        rng, cfg.n_entities, cfg.n_step_one, cfg.n_step_two, cfg.distractor_fraction,
    )
    need = cfg.n_test + cfg.n_valid
    if len(closure) < need + 50:
        raise ValueError(
            f"closure too small ({len(closure)} vs {need} requested); add more edges"
        )
    order = rng.permutation(len(closure))
    closure = [closure[i] for i in order]
    test = sorted(closure[: cfg.n_test])
    valid = sorted(closure[cfg.n_test : cfg.n_test + cfg.n_valid])
    train_closure = sorted(closure[cfg.n_test + cfg.n_valid :])
    # Shortcut edges shadow train-split query pairs only, so held-out
    # queries still require the two-hop pattern.
    for h, _, t in train_closure:
        if rng.random() < cfg.direct_fraction:
            edges.append((h, DIRECT, t))
    edges = sorted(set(edges))

    all_entities = list(entities)
    if cfg.inductive:
        t_entities, t_edges, t_closure = _generate_universe(
            rng, cfg.n_entities_test, cfg.n_step_test, cfg.n_step_test,
            cfg.distractor_fraction, prefix="t",
        )
        if len(t_closure) < cfg.n_test + 5:
            raise ValueError("inductive test closure too small; add more edges")
        t_order = rng.permutation(len(t_closure))
        t_closure = [t_closure[i] for i in t_order]
        test = sorted(t_closure[: cfg.n_test])
        graph_closure = t_closure[cfg.n_test :]
        t_edges = list(t_edges)
        for h, _, t in sorted(graph_closure):
            if rng.random() < cfg.direct_fraction:
                t_edges.append((h, DIRECT, t))
        test_graph_rows = sorted(set(t_edges) | set(graph_closure))
        _write_triples(out / "test_graph.txt", test_graph_rows)
        all_entities += t_entities

    _write_triples(out / "train.txt", sorted(edges + train_closure))
    _write_triples(out / "valid.txt", valid)
    _write_triples(out / "test.txt", test)
    (out / "entity2text.txt").write_text(
        "".join(f"{e}\t{_entity_text(e)}\n" for e in sorted(all_entities)),
        encoding="utf-8",
    )
    (out / "relation2text.txt").write_text(
        "".join(f"{r}\t{text}\n" for r, text in sorted(RELATION_TEXTS.items())),
        encoding="utf-8",
    )
    (out / "oracle_rules.json").write_text(
        json.dumps(ORACLE_RULES, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    summary = {
        "config": asdict(cfg),
        "n_entities": len(all_entities),
        "n_relations": len(RELATION_TEXTS),
        "n_train": len(edges) + len(train_closure),
        "n_valid": len(valid),
        "n_test": len(test),
        "n_query_closure": len(closure),
        "scenario": "inductive" if cfg.inductive else "transductive",
    }
    (out / "synth_meta.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary
