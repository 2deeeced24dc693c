"""Pipeline configuration: TOML file, flag overrides, validation, hashing.

Precedence is flag > file > default. Every stage hashes the config subset
it depends on, so artifact metadata can detect configuration drift.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

VALID_ABLATIONS = ("pf", "nf", "te")


class ConfigError(Exception):
    pass


@dataclass
class DatasetConfig:
    dir: str = "data/synth"
    scenario: str = "transductive"


@dataclass
class PathsConfig:
    max_len: int = 3
    cap: int = 50


@dataclass
class LabelingConfig:
    backend: str = "rule_oracle"
    per_relation: int = 20
    rules_file: str = ""
    distractor_flip_fraction: float = 0.0
    flip_seed: int = 0
    cache_file: str = ""
    on_failure: str = "drop"
    # remote_llm settings
    base_url: str = ""
    model: str = ""
    instruction: str = ""
    max_retries: int = 2
    timeout: float = 60.0
    temperature: float = 0.0
    token_budget: int = 3000
    max_concurrency: int = 4
    requests_per_second: float = 4.0


@dataclass
class ClassifierConfig:
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 11
    d_e: int = 32
    d_r: int = 32
    d_h: int = 64


@dataclass
class FilterSection:
    threshold: float = 0.5
    neg_num: int = 5
    seed: int = 23
    ablate: list[str] = field(default_factory=list)


@dataclass
class ScorerSection:
    backend: str = "builtin"
    epochs: int = 40
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 13
    d_tok: int = 64
    d_hidden: int = 64
    base_url: str = ""
    timeout: float = 120.0
    train_poll_seconds: float = 1.0
    train_timeout: float = 600.0


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [1, 3, 10])
    n_candidates: int = 49
    seed: int = 17
    jobs: int = 1
    setting: str = "diff"
    fixed_test_max_len: int = 3
    use_classifier_filter: bool = False
    classifier_threshold: float = 0.5


@dataclass
class OutputConfig:
    dir: str = "out/run"


_SECTIONS = {
    "dataset": DatasetConfig,
    "paths": PathsConfig,
    "labeling": LabelingConfig,
    "classifier": ClassifierConfig,
    "filter": FilterSection,
    "scorer": ScorerSection,
    "eval": EvalSection,
    "output": OutputConfig,
}


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    filter: FilterSection = field(default_factory=FilterSection)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def section_hash(self, *sections: str) -> str:
        payload = {s: asdict(getattr(self, s)) for s in sorted(sections)}
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> None:
        d = Path(self.dataset.dir)
        if self.dataset.scenario not in ("transductive", "inductive"):
            raise ConfigError(f"unknown scenario '{self.dataset.scenario}'")
        required = ["train.txt", "valid.txt", "test.txt", "entity2text.txt", "relation2text.txt"]
        if self.dataset.scenario == "inductive":
            required.append("test_graph.txt")
        for name in required:
            if not (d / name).exists():
                raise ConfigError(f"dataset file missing: {d / name}")
        if self.paths.max_len < 1:
            raise ConfigError("paths.max_len must be >= 1")
        if self.paths.cap < 1:
            raise ConfigError("paths.cap must be >= 1")
        if not 0.0 < self.filter.threshold < 1.0:
            raise ConfigError("filter.threshold must lie strictly between 0 and 1")
        if self.filter.neg_num < 1:
            raise ConfigError("filter.neg_num must be >= 1")
        if self.labeling.per_relation < 1:
            raise ConfigError("labeling.per_relation must be >= 1")
        for a in self.filter.ablate:
            if a not in VALID_ABLATIONS:
                raise ConfigError(f"unknown ablation '{a}' (expected pf, nf, or te)")
        if self.labeling.backend not in ("rule_oracle", "replay_cache", "remote_llm"):
            raise ConfigError(f"unknown labeling backend '{self.labeling.backend}'")
        if self.labeling.backend == "rule_oracle" and not self.labeling.rules_file:
            raise ConfigError("labeling.rules_file is required for the rule_oracle backend")
        if self.labeling.backend == "rule_oracle" and not Path(self.labeling.rules_file).exists():
            raise ConfigError(f"rules file missing: {self.labeling.rules_file}")
        if self.labeling.backend == "replay_cache" and not self.labeling.cache_file:
            raise ConfigError("labeling.cache_file is required for the replay_cache backend")
        if self.labeling.backend == "remote_llm" and not self.labeling.base_url:
            raise ConfigError("labeling.base_url is required for the remote_llm backend")
        if self.scorer.backend not in ("builtin", "remote_plm"):
            raise ConfigError(f"unknown scorer backend '{self.scorer.backend}'")
        if self.scorer.backend == "remote_plm" and not self.scorer.base_url:
            raise ConfigError("scorer.base_url is required for the remote_plm backend")
        if self.eval.setting not in ("fixed", "diff"):
            raise ConfigError("eval.setting must be 'fixed' or 'diff'")
        if self.eval.n_candidates < 1:
            raise ConfigError("eval.n_candidates must be >= 1")

    def test_max_len(self) -> int:
        return self.eval.fixed_test_max_len if self.eval.setting == "fixed" else self.paths.max_len


def _coerce(value: str, target):
    if isinstance(target, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got '{value}'")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, list):
        return [v for v in value.split(",") if v]
    return value


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> PipelineConfig:
    """Config from a TOML file plus `section.key=value` overrides."""
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config file {p}: {exc}") from exc
        for section, values in data.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            target = getattr(cfg, section)
            for key, value in values.items():
                if not hasattr(target, key):
                    raise ConfigError(f"unknown key '{key}' in section [{section}]")
                if isinstance(getattr(target, key), list) and isinstance(value, list):
                    # Eval ks come in as ints; ablations as strings.
                    setattr(target, key, list(value))
                else:
                    current = getattr(target, key)
                    if isinstance(current, bool) and not isinstance(value, bool):
                        raise ConfigError(f"{section}.{key} must be a boolean")
                    if isinstance(current, float) and isinstance(value, int):
                        value = float(value)
                    if type(value) is not type(current) and not isinstance(current, str):
                        raise ConfigError(
                            f"{section}.{key}: expected {type(current).__name__}, "
                            f"got {type(value).__name__}"
                        )
                    setattr(target, key, value)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got '{item}'")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        target = getattr(cfg, section)
        if not hasattr(target, key):
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        current = getattr(target, key)
        if isinstance(current, list) and current and isinstance(current[0], int):
            setattr(target, key, [int(v) for v in value.split(",") if v])
        else:
            setattr(target, key, _coerce(value, current))
    return cfg
