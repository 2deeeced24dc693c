import math

import numpy as np
import pytest

from kgcf.graph import Triplet
from kgcf.labeling import RuleOracle, build_sc_dataset
from kgcf.scorer import (
    BuiltinScorer,
    CompletionScore,
    RemoteScorer,
    ScorerError,
    ScorerTrainConfig,
    build_vocab,
    score_completion,
    score_completions,
    score_path,
    score_sort_key,
    tokenize,
    train_scorer,
)
from kgcf.seqfilter import (
    DegenerateDataError,
    FilterConfig,
    SeqTrainConfig,
    build_plm_dataset,
    train_sc,
)

from helpers import layered_graph, make_graph, oracle_paths


def toy_items():
    return [
        ("alpha links beta.", "alpha steps gamma. ; gamma steps beta.", True),
        ("alpha links delta.", "alpha noise delta.", False),
        ("gamma links beta.", "gamma steps epsilon. ; epsilon steps beta.", True),
        ("gamma links alpha.", "gamma noise alpha.", False),
    ]


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Japan has_city Tokyo.") == ["japan", "has", "city", "tokyo"]
    assert tokenize("A-B c;d") == ["a", "b", "c", "d"]


def test_fresh_model_scores_half():
    model = BuiltinScorer(build_vocab(["a b", "c"]), 8, 8)
    assert score_path(model, "a b", "c") == 0.5
    assert score_path(model, "unseen tokens", "only here") == 0.5


def test_scoring_deterministic():
    model, _ = train_scorer(toy_items(), ScorerTrainConfig(epochs=5, d_tok=8, d_hidden=8))
    a = score_path(model, "alpha links beta.", "alpha steps gamma.")
    b = score_path(model, "alpha links beta.", "alpha steps gamma.")
    assert a == b


def test_score_rejects_empty_text():
    model = BuiltinScorer([], 4, 4)
    with pytest.raises(ValueError):
        score_path(model, "", "x")


def test_initial_loss_ln2_and_separable_training():
    model, log = train_scorer(
        toy_items(), ScorerTrainConfig(epochs=200, lr=0.5, batch_size=2, d_tok=8, d_hidden=8)
    )
    assert log[0] == pytest.approx(math.log(2), abs=0.1)
    preds = [
        score_path(model, c, k) > 0.5 for c, k, _ in toy_items()
    ]
    assert preds == [lab for _, _, lab in toy_items()]


def test_single_class_rejected():
    with pytest.raises(DegenerateDataError):
        train_scorer([("a", "b", True), ("c", "d", True)])


def test_training_reproducible():
    cfg = ScorerTrainConfig(epochs=10, d_tok=8, d_hidden=8)
    m1, log1 = train_scorer(toy_items(), cfg)
    m2, log2 = train_scorer(toy_items(), cfg)
    assert log1 == log2
    for name in m1.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(m1, name), getattr(m2, name))


def test_gradients_match_finite_differences():
    model = BuiltinScorer(build_vocab([c for c, _, _ in toy_items()]
                                      + [k for _, k, _ in toy_items()]), 5, 4,
                          n_slots=2, rng=np.random.default_rng(3))
    rng = np.random.default_rng(4)
    model.tok_emb = rng.normal(0, 0.2, size=model.tok_emb.shape)
    model.w2 = rng.normal(0, 0.5, size=model.d_hidden)
    model.b2 = rng.normal(0, 0.5, size=1)
    items = toy_items()[:3]
    batch = model._pad([model.encode_pair(c, k) for c, k, _ in items])
    y = np.array([1.0, 0.0, 1.0])
    _, grads = model.loss_and_grads(batch, y)
    eps = 1e-6
    for name, arr in model.params().items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + eps
            lp, _ = model.loss_and_grads(batch, y)
            arr[ix] = orig - eps
            lm, _ = model.loss_and_grads(batch, y)
            arr[ix] = orig
            fd = (lp - lm) / (2 * eps)
            an = grads[name][ix]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            assert rel <= 1e-4, (name, ix, fd, an)


def test_checkpoint_roundtrip(tmp_path):
    model, _ = train_scorer(toy_items(), ScorerTrainConfig(epochs=5, d_tok=8, d_hidden=8))
    p1, p2 = tmp_path / "s1.bin", tmp_path / "s2.bin"
    model.save(p1)
    loaded = BuiltinScorer.load(p1)
    assert loaded.vocab == model.vocab
    loaded.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    a = loaded.score_pairs([("alpha links beta.", "alpha steps gamma.")])
    b = BuiltinScorer.load(p1).score_pairs([("alpha links beta.", "alpha steps gamma.")])
    np.testing.assert_array_equal(a, b)


def test_stateless_inference_order_invariant():
    model, _ = train_scorer(toy_items(), ScorerTrainConfig(epochs=10, d_tok=8, d_hidden=8))
    pairs = [(c, k) for c, k, _ in toy_items()]
    fwd = model.score_pairs(pairs)
    rev = model.score_pairs(pairs[::-1])
    np.testing.assert_allclose(fwd, rev[::-1], atol=1e-12)


def trained_pipeline(seed=0):
    rng = np.random.default_rng(seed)
    g, closure, rules = layered_graph(rng)
    oracle = RuleOracle(rules, g.n_relations)
    sc_ds = build_sc_dataset(g, oracle, max_len=2, per_relation=20, cap=None)
    sc_model, _ = train_sc(g, sc_ds, SeqTrainConfig(epochs=50, lr=0.2))
    plm = build_plm_dataset(g, sc_model, FilterConfig(neg_num=3, max_len=2, cap=None), seed=1)
    return g, plm


def test_trained_scorer_separates_held_out_items():
    g, plm = trained_pipeline()
    items = [(it.claim, it.context, it.label) for it in plm.items]
    held = items[::4]
    train_items = [it for i, it in enumerate(items) if i % 4]
    model, _ = train_scorer(train_items, ScorerTrainConfig(epochs=40, lr=0.3))
    true_scores = [score_path(model, c, k) for c, k, lab in held if lab]
    false_scores = [score_path(model, c, k) for c, k, lab in held if not lab]
    assert true_scores and false_scores
    assert np.mean(true_scores) - np.mean(false_scores) >= 0.3


def test_score_completion_max_semantics():
    class StubBackend:
        def __init__(self, scores):
            self.scores = scores

        def score_pairs(self, pairs):
            return np.array([self.scores[p] for p in pairs])

    g = make_graph(
        [(0, 0, 1), (1, 0, 2), (0, 1, 2), (0, 0, 2), (0, 0, 3), (3, 0, 2)],
        n_relations=2,
    )
    comp = Triplet(0, 1, 2)
    from kgcf.paths import infer_paths_for, textualize_path

    paths = infer_paths_for(g, comp, 2, cap=None)
    assert len(paths) == 3
    texts = [textualize_path(g, p) for p in paths]
    table = dict(zip(texts, [0.2, 0.9, 0.4]))
    backend = StubBackend(table)
    got = score_completion(backend, g, comp, max_len=2, cap=None)
    assert got.score == pytest.approx(0.9)
    assert table[tuple(textualize_path(g, got.best_path))] == 0.9


def test_score_completion_no_path_sentinel():
    g = make_graph([(0, 0, 1)], n_entities=3)
    model = BuiltinScorer([], 4, 4)
    got = score_completion(model, g, Triplet(0, 0, 2), max_len=3, cap=None)
    assert got.is_no_path and got.score is None and got.best_path is None


def test_no_path_sorts_below_any_numeric_score():
    scored = CompletionScore(1, 0.0, None)
    empty = CompletionScore(2, None, None)
    assert score_sort_key(empty) < score_sort_key(scored)


def test_score_completion_matches_bruteforce_max():
    rng = np.random.default_rng(9)
    from helpers import random_graph

    model, _ = train_scorer(toy_items(), ScorerTrainConfig(epochs=5, d_tok=8, d_hidden=8))
    from kgcf.paths import InferencePath, textualize_path

    for _ in range(20):
        g = random_graph(rng)
        h = int(rng.integers(0, g.n_entities))
        t = int(rng.integers(0, g.n_entities))
        comp = Triplet(h, 0, t)
        got = score_completion(model, g, comp, max_len=3, cap=None)
        want = oracle_paths(g, h, t, 3, excluded=comp)
        if not want:
            assert got.is_no_path
            continue
        best = max(
            float(model.score_pairs([textualize_path(g, InferencePath(comp, traj))])[0])
            for traj in want
        )
        assert got.score == pytest.approx(best, abs=1e-12)


def test_adding_paths_never_lowers_score():
    model, _ = train_scorer(toy_items(), ScorerTrainConfig(epochs=5, d_tok=8, d_hidden=8))
    g_small = make_graph([(0, 0, 1), (1, 0, 2)], n_entities=4, n_relations=2)
    g_big = make_graph([(0, 0, 1), (1, 0, 2), (0, 0, 3), (3, 0, 2)], n_relations=2)
    comp = Triplet(0, 1, 2)
    a = score_completion(model, g_small, comp, max_len=2, cap=None)
    b = score_completion(model, g_big, comp, max_len=2, cap=None)
    assert b.score >= a.score


def test_classifier_hook_filters_paths():
    class HalfBackend:
        def score_pairs(self, pairs):
            return np.full(len(pairs), 0.5)

    class RejectAll:
        def predict_proba(self, graph, paths):
            return np.zeros(len(paths))

    g = make_graph([(0, 0, 1), (1, 0, 2), (0, 1, 2)], n_relations=2)
    comp = Triplet(0, 1, 2)
    unfiltered = score_completion(HalfBackend(), g, comp, max_len=2, cap=None)
    assert not unfiltered.is_no_path
    filtered = score_completion(
        HalfBackend(), g, comp, max_len=2, cap=None, classifier=RejectAll()
    )
    assert filtered.is_no_path


class FakeResponse:
    def __init__(self, status_code, payload=None, content=b"x"):
        self.status_code = status_code
        self._payload = payload
        self.content = content

    def json(self):
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append((url, json))
        return self.responses.pop(0)

    def get(self, url, timeout=None):
        self.calls.append((url, None))
        return self.responses.pop(0)


def test_remote_scorer_roundtrip():
    session = FakeSession([FakeResponse(200, {"scores": [0.25, 0.75]})])
    remote = RemoteScorer("http://svc.test", session=session)
    got = remote.score_pairs([("a", "b"), ("c", "d")])
    np.testing.assert_allclose(got, [0.25, 0.75])
    url, body = session.calls[0]
    assert url.endswith("/score")
    assert body == {"pairs": [{"claim": "a", "context": "b"}, {"claim": "c", "context": "d"}]}


def test_remote_scorer_error_paths():
    remote = RemoteScorer("http://svc.test", session=FakeSession([FakeResponse(503)]))
    with pytest.raises(ScorerError):
        remote.score_pairs([("a", "b")])
    remote = RemoteScorer(
        "http://svc.test", session=FakeSession([FakeResponse(200, {"scores": [0.1]})])
    )
    with pytest.raises(ScorerError, match="2 pairs"):
        remote.score_pairs([("a", "b"), ("c", "d")])
    remote = RemoteScorer(
        "http://svc.test", session=FakeSession([FakeResponse(200, {"scores": [1.5]})])
    )
    with pytest.raises(ScorerError, match="outside"):
        remote.score_pairs([("a", "b")])


def test_remote_scorer_train_and_health():
    session = FakeSession(
        [FakeResponse(202, {"job_id": "j-1"}), FakeResponse(200, {"status": "ready"})]
    )
    remote = RemoteScorer("http://svc.test", session=session)
    assert remote.start_training("/tmp/ds.jsonl") == "j-1"
    assert remote.health()["status"] == "ready"
