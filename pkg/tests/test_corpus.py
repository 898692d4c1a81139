import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphsent.corpus import (Message, School, SentimentLabel, SplitMix64, SplitSpec,
                              collapse_scores, load_edges, load_embeddings,
                              load_messages, load_scores, make_splits,
                              write_embeddings, write_messages, write_scores)
from graphsent.errors import InputError
from synthcorpus import TABLE2_COUNTS, table2_corpus


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_load_messages_densifies_in_file_order(tmp_path):
    path = tmp_path / "messages.jsonl"
    _write_lines(path, [
        json.dumps({"node_id": 7, "user_id": 1, "school": "UCLA", "year": 2019}),
        json.dumps({"node_id": 9, "user_id": 2, "school": "UCB", "year": 2020}),
    ])
    messages, id_map = load_messages(path)
    assert [m.node_id for m in messages] == [0, 1]
    assert id_map == {7: 0, 9: 1}


def test_load_messages_field_mapping(tmp_path):
    path = tmp_path / "messages.jsonl"
    _write_lines(path, [json.dumps({
        "node_id": 3, "user_id": 11, "school": "ND", "year": 2020,
        "label": "Negative", "text": "hmm",
    })])
    (msg,), _ = load_messages(path)
    assert msg.school is School.ND
    assert msg.year == 2020
    assert msg.gold_label is SentimentLabel.NEGATIVE
    assert msg.text == "hmm"


@pytest.mark.parametrize("line, fragment", [
    ("{not json", "line 2"),
    (json.dumps({"node_id": 1, "user_id": 1, "school": "Oxford", "year": 2019}),
     "Oxford"),
    (json.dumps({"node_id": 1, "user_id": 1, "school": "UCLA", "year": 2021}),
     "2021"),
    (json.dumps({"user_id": 1, "school": "UCLA", "year": 2019}), "node_id"),
    (json.dumps({"node_id": 0, "user_id": 1, "school": "UCLA", "year": 2019}),
     "duplicate"),
])
def test_load_messages_errors(tmp_path, line, fragment):
    path = tmp_path / "messages.jsonl"
    first = json.dumps({"node_id": 0, "user_id": 1, "school": "UCLA", "year": 2019})
    _write_lines(path, [first, line])
    with pytest.raises(InputError, match=fragment):
        load_messages(path)


def test_load_edges_applies_id_map(tmp_path):
    path = tmp_path / "edges.csv"
    _write_lines(path, ["9,7"])
    assert load_edges(path, {7: 0, 9: 1}) == [(1, 0)]


def test_load_edges_empty_file(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("", encoding="utf-8")
    assert load_edges(path, {}) == []


def test_load_edges_preserves_duplicates(tmp_path):
    path = tmp_path / "edges.csv"
    _write_lines(path, ["9,7", "9,7"])
    assert load_edges(path, {7: 0, 9: 1}) == [(1, 0), (1, 0)]


def test_load_edges_unknown_id(tmp_path):
    path = tmp_path / "edges.csv"
    _write_lines(path, ["5,7"])
    with pytest.raises(InputError, match="line 1"):
        load_edges(path, {7: 0})


def test_embeddings_round_trip_is_byte_identical(tmp_path):
    values = np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0
    first = tmp_path / "a.gsem"
    second = tmp_path / "b.gsem"
    write_embeddings(first, values)
    write_embeddings(second, load_embeddings(first))
    assert first.read_bytes() == second.read_bytes()


def test_embeddings_header_mismatch(tmp_path):
    path = tmp_path / "bad.gsem"
    with path.open("wb") as fh:
        fh.write(b"GSEM")
        fh.write(np.array([2, 3], dtype="<u4").tobytes())
        fh.write(np.zeros(5, dtype="<f8").tobytes())  # header says 6 floats
    with pytest.raises(InputError, match="header"):
        load_embeddings(path)


def test_embeddings_shape_args_checked(tmp_path):
    path = tmp_path / "e.gsem"
    write_embeddings(path, np.zeros((4, 3)))
    assert load_embeddings(path, n=4, d=3).shape == (4, 3)
    with pytest.raises(InputError, match="rows"):
        load_embeddings(path, n=5)
    with pytest.raises(InputError, match="dimension"):
        load_embeddings(path, d=2)


def test_embeddings_csv_fallback(tmp_path):
    path = tmp_path / "e.csv"
    _write_lines(path, ["1.0,2.0", "3.0,4.0"])
    np.testing.assert_array_equal(load_embeddings(path), [[1.0, 2.0], [3.0, 4.0]])


def test_embeddings_reject_non_finite(tmp_path):
    path = tmp_path / "e.gsem"
    values = np.zeros((2, 2))
    values[1, 0] = np.nan
    with pytest.raises(InputError, match=r"\(1, 0\)"):
        write_embeddings(path, values)


def test_scores_round_trip_and_validation(tmp_path):
    path = tmp_path / "scores.csv"
    scores = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    write_scores(path, scores)
    np.testing.assert_allclose(load_scores(path, n=2), scores)
    _write_lines(path, ["negative,neutral,positive", "0.5,0.4,0.3"])
    with pytest.raises(InputError, match="sum"):
        load_scores(path)


def test_collapse_scores_examples():
    scores = np.array([
        [0.2, 0.3, 0.5],
        [1.0, 0.0, 0.0],
        [0.3334, 0.3333, 0.3333],
    ])
    np.testing.assert_allclose(collapse_scores(scores), [0.8, 0.0, 0.6666])


def test_collapse_scores_stays_in_unit_interval():
    rng = np.random.default_rng(5)
    raw = rng.dirichlet([1.0, 1.0, 1.0], size=200)
    out = collapse_scores(raw)
    assert np.all(out >= 0.0) and np.all(out <= 1.0)


# ---------------------------------------------------------------------------
# SplitMix64 and splits


def test_splitmix64_known_answers():
    # reference stream for seed 0 (Steele et al. test vector)
    rng = SplitMix64(0)
    assert [rng.next_u64() for _ in range(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_paper_default_split_sizes():
    messages = table2_corpus(seed=3)
    splits = make_splits(messages, SplitSpec.paper_default(seed=42))
    assert splits.gat_train.size == 695
    assert splits.test.size == 750
    assert splits.stack_train.size == 750
    label_of = {m.node_id: m.gold_label for m in messages}
    test_labels = [label_of[i] for i in splits.test]
    assert sum(1 for l in test_labels if l is SentimentLabel.NEGATIVE) == 375
    assert sum(1 for l in test_labels if l is SentimentLabel.NON_NEGATIVE) == 375
    gat_labels = [label_of[i] for i in splits.gat_train]
    assert sum(1 for l in gat_labels if l is SentimentLabel.NON_NEGATIVE) == 601
    assert sum(1 for l in gat_labels if l is SentimentLabel.NEGATIVE) == 94


def test_split_determinism_and_disjointness():
    messages = table2_corpus(seed=3)
    spec = SplitSpec.paper_default(seed=99)
    first = make_splits(messages, spec)
    second = make_splits(messages, spec)
    np.testing.assert_array_equal(first.gat_train, second.gat_train)
    np.testing.assert_array_equal(first.test, second.test)
    np.testing.assert_array_equal(first.stack_train, second.stack_train)
    sets = [set(first.gat_train), set(first.test), set(first.stack_train)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])


def test_train_school_2020_never_in_test_or_stack():
    messages = table2_corpus(seed=3)
    splits = make_splits(messages, SplitSpec.paper_default(seed=7))
    by_node = {m.node_id: m for m in messages}
    for node in np.concatenate([splits.test, splits.stack_train]):
        msg = by_node[int(node)]
        if msg.school is School.DARTMOUTH:
            assert msg.year == 2019
    # and all Dartmouth-2020 labeled cases sit in gat_train
    d2020 = {m.node_id for m in messages
             if m.school is School.DARTMOUTH and m.year == 2020 and m.gold_label}
    assert d2020 <= set(splits.gat_train.tolist())


def test_split_counts_respected_per_stratum():
    messages = table2_corpus(seed=3)
    spec = SplitSpec.paper_default(seed=0, test_per_class=10, stack_per_class=5)
    splits = make_splits(messages, spec)
    by_node = {m.node_id: m for m in messages}
    per_cell = {}
    for node in splits.test:
        msg = by_node[int(node)]
        key = (msg.school, None if msg.school is School.DARTMOUTH else msg.year,
               msg.gold_label)
        per_cell[key] = per_cell.get(key, 0) + 1
    assert set(per_cell.values()) == {10}
    assert len(per_cell) == 30  # 15 strata x 2 classes


def test_split_insufficient_cases():
    messages = table2_corpus(seed=3)
    spec = SplitSpec.paper_default(seed=0, gat_train_nonneg=100_000)
    with pytest.raises(InputError, match="Dartmouth"):
        make_splits(messages, spec)


def test_split_train_count_below_mandatory_2020():
    messages = table2_corpus(seed=3)
    spec = SplitSpec.paper_default(seed=0, gat_train_nonneg=100)  # < 327
    with pytest.raises(InputError, match="mandatory"):
        make_splits(messages, spec)


@st.composite
def _small_split_case(draw):
    seed = draw(st.integers(min_value=0, max_value=2**32))
    per_cell = draw(st.integers(min_value=3, max_value=8))
    test_k = draw(st.integers(min_value=0, max_value=1))
    stack_k = draw(st.integers(min_value=0, max_value=1))
    # gat_train must cover the mandatory year-2020 share of the train pool
    mandatory = per_cell + 2 + test_k + stack_k
    gat_nn = draw(st.integers(min_value=mandatory, max_value=2 * per_cell + 2))
    gat_neg = draw(st.integers(min_value=mandatory, max_value=2 * per_cell + 2))
    return seed, per_cell, test_k, stack_k, gat_nn, gat_neg


@given(_small_split_case())
@settings(max_examples=25, deadline=None)
def test_split_properties_random_specs(case):
    seed, per_cell, test_k, stack_k, gat_nn, gat_neg = case
    extra = 2 + test_k + stack_k  # head-room above the 2020-mandatory share
    messages = []
    node = 0
    for school in School:
        for year in (2019, 2020):
            for label in (SentimentLabel.NON_NEGATIVE, SentimentLabel.NEGATIVE):
                for _ in range(per_cell + extra):
                    messages.append(Message(node, 0, school, year, gold_label=label))
                    node += 1
    spec = SplitSpec.paper_default(
        seed=seed, gat_train_nonneg=gat_nn, gat_train_neg=gat_neg,
        test_per_class=test_k, stack_per_class=stack_k)
    splits = make_splits(messages, spec)
    sets = [set(splits.gat_train), set(splits.test), set(splits.stack_train)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert splits.gat_train.size == gat_nn + gat_neg
    assert splits.test.size == 15 * 2 * test_k
    assert splits.stack_train.size == 15 * 2 * stack_k


def test_write_messages_round_trip(tmp_path):
    messages = table2_corpus(seed=1, n_unlabeled=5)
    path = tmp_path / "messages.jsonl"
    write_messages(path, messages)
    loaded, _ = load_messages(path)
    assert loaded == messages


def test_table2_totals():
    # the fixture itself must agree with the study's labeled totals
    totals = {2019: [0, 0], 2020: [0, 0]}
    for (school, year), (nn, neg) in TABLE2_COUNTS.items():
        totals[year][0] += nn
        totals[year][1] += neg
    assert totals[2019] == [1405, 476] and sum(totals[2019]) == 1881
    assert totals[2020] == [1297, 533] and sum(totals[2020]) == 1830
