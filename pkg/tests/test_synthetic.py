import json

import pytest

from kgcf.graph import load_split
from kgcf.synthetic import (
    DIRECT,
    QUERY_REL,
    STEP_ONE,
    STEP_TWO,
    SynthConfig,
    generate_dataset,
)


def read_triples(path):
    return [tuple(line.split("\t")) for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    summary = generate_dataset(out, SynthConfig(seed=3))
    return out, summary


def test_sizes(dataset):
    out, summary = dataset
    assert summary["n_entities"] == 300
    assert summary["n_relations"] == 6
    assert summary["n_test"] == 100
    split = load_split(out, "transductive")
    assert len(split.test) == 100


def test_query_relation_iff_two_hop_pattern(dataset):
    out, _ = dataset
    rows = (
        read_triples(out / "train.txt")
        + read_triples(out / "valid.txt")
        + read_triples(out / "test.txt")
    )
    step1 = {(h, t) for h, r, t in rows if r == STEP_ONE}
    step2 = {(h, t) for h, r, t in rows if r == STEP_TWO}
    closure = {
        (x, z) for x, y in step1 for y2, z in step2 if y2 == y and z != x
    }
    queries = {(h, t) for h, r, t in rows if r == QUERY_REL}
    assert queries == closure


def test_direct_shadows_train_queries_only(dataset):
    out, _ = dataset
    train = read_triples(out / "train.txt")
    direct = {(h, t) for h, r, t in train if r == DIRECT}
    train_queries = {(h, t) for h, r, t in train if r == QUERY_REL}
    held_out = {
        (h, t)
        for h, r, t in read_triples(out / "valid.txt") + read_triples(out / "test.txt")
        if r == QUERY_REL
    }
    assert direct and direct <= train_queries
    assert not (direct & held_out)


def test_distractor_fraction(dataset):
    out, _ = dataset
    rows = (
        read_triples(out / "train.txt")
        + read_triples(out / "valid.txt")
        + read_triples(out / "test.txt")
    )
    noise = [r for r in rows if r[1].startswith("noise")]
    other = [r for r in rows if not r[1].startswith("noise")]
    assert len(noise) == pytest.approx(0.10 * len(other), rel=0.15)


def test_deterministic_given_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(a, SynthConfig(seed=5))
    generate_dataset(b, SynthConfig(seed=5))
    for name in ("train.txt", "valid.txt", "test.txt", "entity2text.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_inductive_variant(tmp_path):
    out = tmp_path / "ind"
    cfg = SynthConfig(seed=9, inductive=True, n_test=40)
    summary = generate_dataset(out, cfg)
    assert summary["scenario"] == "inductive"
    split = load_split(out, "inductive")
    train_ents = set(split.train_graph.entity_ids)
    test_ents = set(split.test_graph.entity_ids)
    assert not (train_ents & test_ents)
    assert split.train_graph.relation_ids == split.test_graph.relation_ids
    assert len(split.test) == 40


def test_rules_file_names_relations(dataset):
    out, _ = dataset
    rules = json.loads((out / "oracle_rules.json").read_text())
    assert rules[QUERY_REL] == [[STEP_ONE, STEP_TWO], [DIRECT]]
    assert set(rules) == {QUERY_REL}


def test_entity_texts_have_shared_and_unique_tokens(dataset):
    out, _ = dataset
    lines = (out / "entity2text.txt").read_text().splitlines()
    pairs = [line.split("\t") for line in lines]
    assert all(text.startswith("entity ") for _, text in pairs)
    assert len({text for _, text in pairs}) == len(pairs)
