"""Binary rationality labeling of inference paths and the classifier dataset build.

Three interchangeable backends produce labels in {0, 1}: a remote chat
model, a deterministic rule oracle, and a replay cache of previous remote
responses. The dataset builder walks train triplets with a per-relation
cap, enumerates each triplet's paths (excluding the triplet itself), and
labels them.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

from .graph import Graph, Triplet
from .paths import InferencePath, infer_paths_for, relation_sequence, textualize_path

PROVENANCE_LLM = "llm"
PROVENANCE_ORACLE = "oracle"
PROVENANCE_CACHE = "cache"

DEFAULT_INSTRUCTION = (
    "You will see a claim about a knowledge graph and several numbered "
    "contexts, each a chain of known facts. For each context, decide "
    "whether it logically supports the claim."
)

_ANSWER_LINE = re.compile(r"^\s*(\d+)\s*[:.]\s*(yes|no)\b", re.IGNORECASE)


class BackendError(Exception):
    """Remote labeling failed after retries; carries retry metadata."""

    def __init__(self, message: str, attempts: int = 0, last_status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.last_status = last_status


class LabeledPath(NamedTuple):
    path: InferencePath
    label: int
    provenance: str
    raw_response: str | None = None


class LabelFailure(NamedTuple):
    path: InferencePath
    reason: str


def build_prompt(graph: Graph, instruction: str, paths: Sequence[InferencePath]) -> str:
    """One deterministic prompt covering every path of a single completion."""
    if not paths:
        raise ValueError("paths must be non-empty")
    completion = paths[0].completion
    if any(p.completion != completion for p in paths):
        raise ValueError("all paths must share one completion")
    claim, _ = textualize_path(graph, paths[0])
    lines = [instruction, "", f"Claim: {claim}", "", "Contexts:"]
    for i, p in enumerate(paths, start=1):
        _, context = textualize_path(graph, p)
        lines.append(f"{i}. {context}")
    lines.append("")
    lines.append(
        'Answer with exactly one line per context, in the form "<index>: yes" '
        'or "<index>: no".'
    )
    return "\n".join(lines)


def parse_answer_lines(text: str, n_paths: int) -> dict[int, int]:
    """Extract {1-based index: label} from a model response; tolerant of case."""
    out: dict[int, int] = {}
    for line in text.splitlines():
        m = _ANSWER_LINE.match(line)
        if not m:
            continue
        idx = int(m.group(1))
        if 1 <= idx <= n_paths and idx not in out:
            out[idx] = 1 if m.group(2).lower() == "yes" else 0
    return out


def _path_key(graph: Graph, path: InferencePath) -> tuple[str, str]:
    return textualize_path(graph, path)


def _stable_unit_interval(*parts: object) -> float:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class RuleOracle:
    """Labels a path 1 iff its encoded relation sequence matches a rule.

    Rules map a query relation handle to accepted trajectory relation
    sequences (direction-encoded, inverse = r + |R|). Optionally flips a
    deterministic fraction of non-matching (distractor) path labels to 1,
    emulating an unreliable teacher.
    """

    kind = "rule_oracle"

    def __init__(
        self,
        rules: dict[int, frozenset[tuple[int, ...]]],
        n_relations: int,
        distractor_flip_fraction: float = 0.0,
        flip_seed: int = 0,
    ):
        self.rules = {k: frozenset(map(tuple, v)) for k, v in rules.items()}
        self.n_relations = n_relations
        self.distractor_flip_fraction = distractor_flip_fraction
        self.flip_seed = flip_seed

    def label_one(self, graph: Graph, path: InferencePath) -> int:
        seq = relation_sequence(path, self.n_relations)
        matches = seq in self.rules.get(path.completion.relation, frozenset())
        if matches:
            return 1
        if self.distractor_flip_fraction > 0.0:
            claim, context = _path_key(graph, path)
            u = _stable_unit_interval(self.flip_seed, claim, context)
            if u < self.distractor_flip_fraction:
                return 1
        return 0

    def label(self, graph: Graph, paths: Sequence[InferencePath]):
        return [
            LabeledPath(p, self.label_one(graph, p), PROVENANCE_ORACLE) for p in paths
        ]


def rules_from_identifiers(
    graph: Graph, rules_by_name: dict[str, list[list[str]]]
) -> dict[int, frozenset[tuple[int, ...]]]:
    """Translate identifier-level rules to handles; "~name" marks an inverse hop."""
    out: dict[int, frozenset[tuple[int, ...]]] = {}
    for rel_name, seqs in rules_by_name.items():
        rq = graph.relation_index[rel_name]
        encoded = set()
        for seq in seqs:
            enc = []
            for token in seq:
                if token.startswith("~"):
                    enc.append(graph.relation_index[token[1:]] + graph.n_relations)
                else:
                    enc.append(graph.relation_index[token])
            encoded.add(tuple(enc))
        out[rq] = frozenset(encoded)
    return out


class ReplayCache:
    """Append-only JSON-lines store of labeled (claim, context) pairs.

    As a backend it fails closed: paths without a cached record come back
    as LabelFailure, never as a guessed label.
    """

    kind = "replay_cache"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[tuple[str, str], dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._records[(rec["claim"], rec["context"])] = rec

    def lookup(self, claim: str, context: str) -> dict | None:
        return self._records.get((claim, context))

    def append(self, claim: str, context: str, label: int, provenance: str,
               raw_response: str | None, prompt_hash: str) -> None:
        rec = {
            "claim": claim,
            "context": context,
            "label": label,
            "provenance": provenance,
            "raw_response": raw_response,
            "prompt_hash": prompt_hash,
        }
        with self._lock:
            self._records[(claim, context)] = rec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def label(self, graph: Graph, paths: Sequence[InferencePath]):
        out = []
        for p in paths:
            claim, context = _path_key(graph, p)
            rec = self.lookup(claim, context)
            if rec is None:
                out.append(LabelFailure(p, "cache_miss"))
            else:
                out.append(
                    LabeledPath(p, int(rec["label"]), PROVENANCE_CACHE, rec.get("raw_response"))
                )
        return out


class _TokenBucket:
    def __init__(self, rate_per_second: float, burst: int):
        self.rate = rate_per_second
        self.capacity = burst
        self.tokens = float(burst)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


API_KEY_ENV = "KGCF_LLM_API_KEY"


class RemoteLLM:
    """Chat-completion backend speaking JSON over HTTPS.

    Paths of one completion go into a single prompt, split into chunks when
    the estimated token count exceeds `token_budget`. Responses are parsed
    as one `<index>: yes|no` line per path; unparsed indices are retried up
    to `max_retries` times and then reported per path. Successful labels
    are appended to the replay cache when one is attached.
    """

    kind = "remote_llm"

    def __init__(
        self,
        base_url: str,
        model: str,
        instruction: str = DEFAULT_INSTRUCTION,
        api_key: str | None = None,
        max_retries: int = 2,
        timeout: float = 60.0,
        temperature: float = 0.0,
        token_budget: int = 3000,
        max_concurrency: int = 4,
        requests_per_second: float = 4.0,
        cache: ReplayCache | None = None,
        session=None,
    ):
        import requests

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.instruction = instruction
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.max_retries = max_retries
        self.timeout = timeout
        self.temperature = temperature
        self.token_budget = token_budget
        self.max_concurrency = max_concurrency
        self.cache = cache
        self._bucket = _TokenBucket(requests_per_second, max(1, max_concurrency))
        self._session = session or requests.Session()

    def _estimate_tokens(self, text: str) -> int:
        return max(1, len(text) // 4)

    def _chunk(self, graph: Graph, paths: list[InferencePath]) -> list[list[int]]:
        chunks: list[list[int]] = [[]]
        budget = 0
        for i, p in enumerate(paths):
            _, context = _path_key(graph, p)
            cost = self._estimate_tokens(context) + 8
            if chunks[-1] and budget + cost > self.token_budget:
                chunks.append([])
                budget = 0
            chunks[-1].append(i)
            budget += cost
        return chunks

    def _post_chat(self, prompt: str) -> str:
        import requests

        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        last_exc: Exception | None = None
        last_status = None
        for attempt in range(self.max_retries + 1):
            self._bucket.acquire()
            try:
                resp = self._session.post(url, json=body, headers=headers, timeout=self.timeout)
                last_status = resp.status_code
                if resp.status_code in (429, 500, 502, 503, 504):
                    last_exc = BackendError(f"status {resp.status_code}", attempt + 1, resp.status_code)
                    time.sleep(min(2.0, 0.1 * 2**attempt))
                    continue
                if resp.status_code != 200:
                    raise BackendError(
                        f"labeling request failed with status {resp.status_code}",
                        attempt + 1,
                        resp.status_code,
                    )
                data = resp.json()
                return data["choices"][0]["message"]["content"]
            except BackendError:
                raise
            except requests.RequestException as exc:
                last_exc = exc
                time.sleep(min(2.0, 0.1 * 2**attempt))
        raise BackendError(
            f"labeling request failed after {self.max_retries + 1} attempts: {last_exc}",
            self.max_retries + 1,
            last_status,
        )

    def _label_chunk(self, graph: Graph, paths: list[InferencePath]):
        n = len(paths)
        labels: dict[int, tuple[int, str]] = {}
        prompt = build_prompt(graph, self.instruction, paths)
        prompt_hash = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        for _ in range(self.max_retries + 1):
            raw = self._post_chat(prompt)
            parsed = parse_answer_lines(raw, n)
            for idx, label in parsed.items():
                labels.setdefault(idx, (label, raw))
            if len(labels) == n:
                break
        out = []
        for i, p in enumerate(paths, start=1):
            if i in labels:
                label, raw = labels[i]
                out.append(LabeledPath(p, label, PROVENANCE_LLM, raw))
                if self.cache is not None:
                    claim, context = _path_key(graph, p)
                    self.cache.append(claim, context, label, PROVENANCE_LLM, raw, prompt_hash)
            else:
                out.append(LabelFailure(p, "unparseable_response"))
        return out

    def label(self, graph: Graph, paths: Sequence[InferencePath]):
        from concurrent.futures import ThreadPoolExecutor

        paths = list(paths)
        by_completion: dict[Triplet, list[int]] = {}
        for i, p in enumerate(paths):
            by_completion.setdefault(p.completion, []).append(i)
        jobs: list[tuple[list[int], list[InferencePath]]] = []
        for idxs in by_completion.values():
            group = [paths[i] for i in idxs]
            for chunk in self._chunk(graph, group):
                jobs.append(([idxs[j] for j in chunk], [group[j] for j in chunk]))
        results: list = [None] * len(paths)
        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            futs = [(idxs, pool.submit(self._label_chunk, graph, group)) for idxs, group in jobs]
            for idxs, fut in futs:
                for orig_idx, item in zip(idxs, fut.result()):
                    results[orig_idx] = item
        return results


def label_paths(backend, graph: Graph, paths: Sequence[InferencePath]):
    """One result per input path, order preserved; failures stay in place."""
    results = backend.label(graph, list(paths))
    if len(results) != len(paths):
        raise BackendError(
            f"backend returned {len(results)} results for {len(paths)} paths"
        )
    for item in results:
        if isinstance(item, LabeledPath) and item.label not in (0, 1):
            raise BackendError(f"backend produced out-of-range label {item.label!r}")
    return results


@dataclass
class ScDataset:
    """Labeled paths for classifier training plus per-relation triplet counts."""

    items: list[LabeledPath] = field(default_factory=list)
    per_relation_counts: dict[int, int] = field(default_factory=dict)
    n_label_failures: int = 0

    def labels(self) -> list[int]:
        return [it.label for it in self.items]


def build_sc_dataset(
    graph: Graph,
    backend,
    max_len: int,
    per_relation: int,
    cap: int | None = 50,
    on_failure: str = "drop",
) -> ScDataset:
    """Walk train triplets, enumerate and label each one's paths.

    At most `per_relation` triplets are processed per relation; a triplet
    with zero paths still consumes its relation slot. Label failures are
    dropped or abort the build depending on `on_failure`.
    """
    if max_len < 1 or per_relation < 1:
        raise ValueError("max_len and per_relation must be >= 1")
    if on_failure not in ("drop", "abort"):
        raise ValueError("on_failure must be 'drop' or 'abort'")
    ds = ScDataset(per_relation_counts={r: 0 for r in range(graph.n_relations)})
    for row in graph.triples.tolist():
        trip = Triplet(*map(int, row))
        if ds.per_relation_counts[trip.relation] >= per_relation:
            continue
        ds.per_relation_counts[trip.relation] += 1
        paths = infer_paths_for(graph, trip, max_len, cap)
        if not paths:
            continue
        for item in label_paths(backend, graph, paths):
            if isinstance(item, LabelFailure):
                if on_failure == "abort":
                    raise BackendError(f"labeling failed for a path: {item.reason}")
                ds.n_label_failures += 1
            else:
                ds.items.append(item)
    return ds
