"""Stage orchestration: versioned artifacts, dependency checks, manifests.

Each stage writes its artifact plus a sidecar meta file recording the
artifact hash, the hash of the config subset that produced it, and the
meta hashes of its upstream artifacts. A downstream stage refuses to run
when that chain is stale unless forced. All artifacts are byte-stable for
a fixed config and seed set.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, PipelineConfig
from .evaluate import EvalConfig, run_evaluation
from .graph import Graph, GraphSplit, Triplet, load_split
from .labeling import (
    BackendError,
    LabeledPath,
    LabelFailure,
    RemoteLLM,
    ReplayCache,
    RuleOracle,
    label_paths,
    rules_from_identifiers,
)
from .paths import InferencePath, infer_paths_for, textualize_path
from .scorer import BuiltinScorer, RemoteScorer, ScorerError, train_scorer, ScorerTrainConfig
from .seqfilter import (
    FilterConfig,
    SeqClassifier,
    SeqTrainConfig,
    build_plm_dataset,
    train_sc,
)


class StageDependencyError(Exception):
    pass


STAGE_ARTIFACTS = {
    "paths": "paths.jsonl",
    "label": "sc_dataset.jsonl",
    "train-sc": "sc_model.bin",
    "build-plm": "plm_dataset.jsonl",
    "train-scorer": "scorer_model.bin",
    "eval": "report.json",
}

STAGE_DEPS = {
    "paths": [],
    "label": ["paths"],
    "train-sc": ["label"],
    "build-plm": ["train-sc"],
    "train-scorer": ["build-plm"],
    "eval": ["train-scorer"],
}

_STAGE_CONFIG_SECTIONS = {
    "paths": ("dataset", "paths", "labeling"),
    "label": ("dataset", "paths", "labeling"),
    "train-sc": ("dataset", "paths", "labeling", "classifier"),
    "build-plm": ("dataset", "paths", "labeling", "classifier", "filter"),
    "train-scorer": ("dataset", "paths", "labeling", "classifier", "filter", "scorer"),
    "eval": ("dataset", "paths", "labeling", "classifier", "filter", "scorer", "eval"),
}

RUN_ORDER = ["paths", "label", "train-sc", "build-plm", "train-scorer", "eval"]


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _meta_path(out_dir: Path, stage: str) -> Path:
    return out_dir / (STAGE_ARTIFACTS[stage] + ".meta.json")


def _write_meta(out_dir: Path, stage: str, cfg: PipelineConfig, extra: dict | None = None) -> None:
    artifact = out_dir / STAGE_ARTIFACTS[stage]
    meta = {
        "stage": stage,
        "artifact": STAGE_ARTIFACTS[stage],
        "artifact_sha256": _sha256_file(artifact),
        "config_hash": cfg.section_hash(*_STAGE_CONFIG_SECTIONS[stage]),
        "upstream": {
            dep: hashlib.sha256(_meta_path(out_dir, dep).read_bytes()).hexdigest()
            for dep in STAGE_DEPS[stage]
        },
    }
    if extra:
        meta.update(extra)
    _meta_path(out_dir, stage).write_text(_canonical(meta) + "\n", encoding="utf-8")


def _check_chain(out_dir: Path, stage: str, cfg: PipelineConfig, force: bool) -> None:
    """Verify every transitive upstream artifact exists and is current."""
    for dep in STAGE_DEPS[stage]:
        artifact = out_dir / STAGE_ARTIFACTS[dep]
        meta_file = _meta_path(out_dir, dep)
        if not artifact.exists() or not meta_file.exists():
            raise StageDependencyError(
                f"stage '{stage}' needs artifact '{artifact.name}'; run stage '{dep}' first"
            )
        if force:
            continue
        meta = json.loads(meta_file.read_text(encoding="utf-8"))
        if meta.get("artifact_sha256") != _sha256_file(artifact):
            raise StageDependencyError(
                f"artifact '{artifact.name}' does not match its metadata; rerun stage '{dep}' "
                "or pass --force"
            )
        want = cfg.section_hash(*_STAGE_CONFIG_SECTIONS[dep])
        if meta.get("config_hash") != want:
            raise StageDependencyError(
                f"configuration changed since stage '{dep}' produced '{artifact.name}'; "
                f"rerun stage '{dep}' or pass --force"
            )
        for up, rec_hash in meta.get("upstream", {}).items():
            up_meta = _meta_path(out_dir, up)
            if not up_meta.exists() or hashlib.sha256(up_meta.read_bytes()).hexdigest() != rec_hash:
                raise StageDependencyError(
                    f"artifact '{artifact.name}' was built from a different '{up}' artifact; "
                    f"rerun stage '{dep}' or pass --force"
                )
        _check_chain(out_dir, dep, cfg, force)


def load_graphs(cfg: PipelineConfig) -> GraphSplit:
    return load_split(cfg.dataset.dir, cfg.dataset.scenario)


def _build_label_backend(cfg: PipelineConfig, graph: Graph):
    lab = cfg.labeling
    if lab.backend == "rule_oracle":
        rules_by_name = json.loads(Path(lab.rules_file).read_text(encoding="utf-8"))
        rules = rules_from_identifiers(graph, rules_by_name)
        return RuleOracle(
            rules, graph.n_relations,
            distractor_flip_fraction=lab.distractor_flip_fraction,
            flip_seed=lab.flip_seed,
        )
    if lab.backend == "replay_cache":
        return ReplayCache(lab.cache_file)
    kwargs = dict(
        base_url=lab.base_url,
        model=lab.model,
        max_retries=lab.max_retries,
        timeout=lab.timeout,
        temperature=lab.temperature,
        token_budget=lab.token_budget,
        max_concurrency=lab.max_concurrency,
        requests_per_second=lab.requests_per_second,
    )
    if lab.instruction:
        kwargs["instruction"] = lab.instruction
    if lab.cache_file:
        kwargs["cache"] = ReplayCache(lab.cache_file)
    return RemoteLLM(**kwargs)


def _edges_to_json(path: InferencePath) -> list[list[int]]:
    return [[e.triplet.head, e.triplet.relation, e.triplet.tail, e.direction] for e in path.trajectory]


def _path_from_json(completion: Triplet, edges: list[list[int]]) -> InferencePath:
    from .graph import Edge

    return InferencePath(
        completion,
        tuple(Edge(Triplet(h, r, t), d) for h, r, t, d in edges),
    )


def stage_paths(cfg: PipelineConfig, force: bool = False) -> Path:
    """Enumerate candidate paths per train triplet under the per-relation cap."""
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_chain(out_dir, "paths", cfg, force)
    split = load_graphs(cfg)
    g = split.train_graph
    counts = {r: 0 for r in range(g.n_relations)}
    artifact = out_dir / STAGE_ARTIFACTS["paths"]
    n_paths = 0
    with open(artifact, "w", encoding="utf-8") as fh:
        for row in g.triples.tolist():
            trip = Triplet(*map(int, row))
            if counts[trip.relation] >= cfg.labeling.per_relation:
                continue
            counts[trip.relation] += 1
            paths = infer_paths_for(g, trip, cfg.paths.max_len, cfg.paths.cap)
            n_paths += len(paths)
            fh.write(
                _canonical(
                    {
                        "head": trip.head,
                        "relation": trip.relation,
                        "tail": trip.tail,
                        "paths": [_edges_to_json(p) for p in paths],
                    }
                )
                + "\n"
            )
    _write_meta(out_dir, "paths", cfg, {"n_paths": n_paths, "per_relation_counts": counts})
    return artifact


def stage_label(cfg: PipelineConfig, force: bool = False) -> Path:
    """Label every enumerated path with the configured backend."""
    out_dir = Path(cfg.output.dir)
    _check_chain(out_dir, "label", cfg, force)
    split = load_graphs(cfg)
    g = split.train_graph
    backend = _build_label_backend(cfg, g)
    artifact = out_dir / STAGE_ARTIFACTS["label"]
    n_failures = 0
    n_items = 0
    with open(out_dir / STAGE_ARTIFACTS["paths"], encoding="utf-8") as src, open(
        artifact, "w", encoding="utf-8"
    ) as dst:
        for line in src:
            rec = json.loads(line)
            trip = Triplet(rec["head"], rec["relation"], rec["tail"])
            paths = [_path_from_json(trip, edges) for edges in rec["paths"]]
            if not paths:
                continue
            for item in label_paths(backend, g, paths):
                if isinstance(item, LabelFailure):
                    if cfg.labeling.on_failure == "abort":
                        raise BackendError(f"labeling failed: {item.reason}")
                    n_failures += 1
                    continue
                claim, context = textualize_path(g, item.path)
                n_items += 1
                dst.write(
                    _canonical(
                        {
                            "head": trip.head,
                            "relation": trip.relation,
                            "tail": trip.tail,
                            "edges": _edges_to_json(item.path),
                            "label": item.label,
                            "provenance": item.provenance,
                            "claim": claim,
                            "context": context,
                        }
                    )
                    + "\n"
                )
    _write_meta(out_dir, "label", cfg, {"n_items": n_items, "n_label_failures": n_failures})
    return artifact


def _read_sc_dataset(out_dir: Path) -> list[LabeledPath]:
    items = []
    with open(out_dir / STAGE_ARTIFACTS["label"], encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            trip = Triplet(rec["head"], rec["relation"], rec["tail"])
            items.append(
                LabeledPath(
                    _path_from_json(trip, rec["edges"]), rec["label"], rec["provenance"]
                )
            )
    return items


def stage_train_sc(cfg: PipelineConfig, force: bool = False) -> Path:
    out_dir = Path(cfg.output.dir)
    _check_chain(out_dir, "train-sc", cfg, force)
    split = load_graphs(cfg)
    items = _read_sc_dataset(out_dir)
    c = cfg.classifier
    hyper = SeqTrainConfig(
        epochs=c.epochs, lr=c.lr, batch_size=c.batch_size, seed=c.seed,
        d_e=c.d_e, d_r=c.d_r, d_h=c.d_h,
    )
    model, log = train_sc(split.train_graph, items, hyper)
    artifact = out_dir / STAGE_ARTIFACTS["train-sc"]
    model.save(artifact)
    (out_dir / "sc_train_log.json").write_text(
        _canonical({"loss": log}) + "\n", encoding="utf-8"
    )
    _write_meta(out_dir, "train-sc", cfg, {"final_loss": log[-1], "n_items": len(items)})
    return artifact


def stage_build_plm(cfg: PipelineConfig, force: bool = False) -> Path:
    out_dir = Path(cfg.output.dir)
    _check_chain(out_dir, "build-plm", cfg, force)
    split = load_graphs(cfg)
    model = SeqClassifier.load(out_dir / STAGE_ARTIFACTS["train-sc"])
    ablate = set(cfg.filter.ablate)
    fc = FilterConfig(
        threshold=cfg.filter.threshold,
        neg_num=cfg.filter.neg_num,
        max_len=cfg.paths.max_len,
        cap=cfg.paths.cap,
        disable_positive_filter="pf" in ablate,
        disable_negative_filter="nf" in ablate,
        anonymize_entities="te" in ablate,
    )
    ds = build_plm_dataset(split.train_graph, model, fc, seed=cfg.filter.seed)
    artifact = out_dir / STAGE_ARTIFACTS["build-plm"]
    ds.to_jsonl(artifact)
    n_true = sum(1 for it in ds.items if it.label)
    _write_meta(
        out_dir, "build-plm", cfg,
        {"n_items": len(ds.items), "n_true": n_true, "neg_shortfall": ds.neg_shortfall},
    )
    return artifact


def stage_train_scorer(cfg: PipelineConfig, force: bool = False) -> Path:
    out_dir = Path(cfg.output.dir)
    _check_chain(out_dir, "train-scorer", cfg, force)
    plm_file = out_dir / STAGE_ARTIFACTS["build-plm"]
    artifact = out_dir / STAGE_ARTIFACTS["train-scorer"]
    s = cfg.scorer
    if s.backend == "builtin":
        items = []
        with open(plm_file, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                items.append((rec["claim"], rec["context"], bool(rec["label"])))
        hyper = ScorerTrainConfig(
            epochs=s.epochs, lr=s.lr, batch_size=s.batch_size, seed=s.seed,
            d_tok=s.d_tok, d_hidden=s.d_hidden, n_slots=cfg.paths.max_len,
        )
        model, log = train_scorer(items, hyper)
        model.save(artifact)
        (out_dir / "scorer_train_log.json").write_text(
            _canonical({"loss": log}) + "\n", encoding="utf-8"
        )
        _write_meta(out_dir, "train-scorer", cfg, {"final_loss": log[-1], "n_items": len(items)})
    else:
        remote = RemoteScorer(s.base_url, timeout=s.timeout)
        job_id = remote.start_training(str(plm_file.resolve()))
        deadline = time.monotonic() + s.train_timeout
        while True:
            health = remote.health()
            if health.get("status") == "ready" and not health.get("training_active", False):
                break
            if time.monotonic() > deadline:
                raise ScorerError(f"remote training job {job_id} timed out")
            time.sleep(s.train_poll_seconds)
        # The artifact stands in for the remote checkpoint reference.
        artifact.write_bytes(
            (_canonical({"job_id": job_id, "model_id": health.get("model_id")}) + "\n").encode()
        )
        _write_meta(out_dir, "train-scorer", cfg, {"job_id": job_id})
    return artifact


def _build_score_backend(cfg: PipelineConfig, out_dir: Path):
    if cfg.scorer.backend == "builtin":
        return BuiltinScorer.load(out_dir / STAGE_ARTIFACTS["train-scorer"])
    return RemoteScorer(cfg.scorer.base_url, timeout=cfg.scorer.timeout)


def _dataset_file_hashes(cfg: PipelineConfig) -> dict[str, str]:
    d = Path(cfg.dataset.dir)
    names = ["train.txt", "valid.txt", "test.txt", "entity2text.txt", "relation2text.txt"]
    if cfg.dataset.scenario == "inductive":
        names.append("test_graph.txt")
    return {name: _sha256_file(d / name) for name in names}


def stage_eval(cfg: PipelineConfig, force: bool = False) -> Path:
    """Rank every test triplet both ways; write report, table, and manifest."""
    out_dir = Path(cfg.output.dir)
    _check_chain(out_dir, "eval", cfg, force)
    split = load_graphs(cfg)
    backend = _build_score_backend(cfg, out_dir)
    classifier = None
    if cfg.eval.use_classifier_filter:
        classifier = SeqClassifier.load(out_dir / STAGE_ARTIFACTS["train-sc"])
    ecfg = EvalConfig(
        max_len=cfg.test_max_len(),
        cap=cfg.paths.cap,
        ks=tuple(cfg.eval.ks),
        n_candidates=cfg.eval.n_candidates,
        seed=cfg.eval.seed,
        jobs=cfg.eval.jobs,
        anonymize_entities="te" in cfg.filter.ablate,
    )
    report = run_evaluation(split, backend, ecfg, classifier=classifier)
    artifact = out_dir / STAGE_ARTIFACTS["eval"]
    artifact.write_text(_canonical(report.to_dict()) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    checkpoints = {}
    for stage in ("train-sc", "train-scorer"):
        p = out_dir / STAGE_ARTIFACTS[stage]
        if p.exists():
            checkpoints[STAGE_ARTIFACTS[stage]] = _sha256_file(p)
    manifest = {
        "config": cfg.to_dict(),
        "seeds": {
            "classifier": cfg.classifier.seed,
            "filter": cfg.filter.seed,
            "scorer": cfg.scorer.seed,
            "eval": cfg.eval.seed,
            "labeling_flip": cfg.labeling.flip_seed,
        },
        "input_hashes": _dataset_file_hashes(cfg),
        "checkpoint_hashes": checkpoints,
        "test_max_len": cfg.test_max_len(),
        "setting": cfg.eval.setting,
    }
    (out_dir / "manifest.json").write_text(_canonical(manifest) + "\n", encoding="utf-8")
    _write_meta(out_dir, "eval", cfg, {"averaged": report.averaged})
    return artifact


STAGE_FUNCS = {
    "paths": stage_paths,
    "label": stage_label,
    "train-sc": stage_train_sc,
    "build-plm": stage_build_plm,
    "train-scorer": stage_train_scorer,
    "eval": stage_eval,
}


def run_all(cfg: PipelineConfig, force: bool = False) -> Path:
    for stage in RUN_ORDER:
        STAGE_FUNCS[stage](cfg, force=force)
    return Path(cfg.output.dir) / STAGE_ARTIFACTS["eval"]


@dataclass
class SweepResult:
    setting: str
    per_length: dict[int, dict]

    def table(self) -> str:
        lines = [f"setting: {self.setting}", "m  hits@1  mrr"]
        for m in sorted(self.per_length):
            avg = self.per_length[m]["averaged"]
            lines.append(f"{m}  {avg['hits']['1']:.4f}  {avg['mrr']:.4f}")
        return "\n".join(lines)


def sweep_maxlen(
    cfg: PipelineConfig, lengths: list[int], setting: str, force: bool = False
) -> SweepResult:
    """Train at each max length; evaluate per the fixed or diff setting."""
    if setting not in ("fixed", "diff"):
        raise ConfigError("sweep setting must be 'fixed' or 'diff'")
    base_out = Path(cfg.output.dir)
    per_length: dict[int, dict] = {}
    for m in lengths:
        import copy

        sub = copy.deepcopy(cfg)
        sub.paths.max_len = m
        sub.eval.setting = setting
        sub.output.dir = str(base_out / f"maxlen_{m}")
        run_all(sub, force=force)
        report = json.loads(
            (Path(sub.output.dir) / STAGE_ARTIFACTS["eval"]).read_text(encoding="utf-8")
        )
        per_length[m] = report
    result = SweepResult(setting, per_length)
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "sweep_report.json").write_text(
        _canonical({"setting": setting, "per_length": {str(k): v for k, v in per_length.items()}})
        + "\n",
        encoding="utf-8",
    )
    (base_out / "sweep_report.txt").write_text(result.table() + "\n", encoding="utf-8")
    return result
