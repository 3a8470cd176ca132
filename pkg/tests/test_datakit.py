import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ad2bench import datakit as dk
from ad2bench.pilot import make_pilot
from ad2bench.world import SimConfig, bundled_scenario


def mann_whitney_auc(pos, score):
    """Pairwise oracle: P(score_pos > score_neg) + 0.5 P(tie)."""
    p = score[pos]
    n = score[~pos]
    gt = (p[:, None] > n[None, :]).sum()
    eq = (p[:, None] == n[None, :]).sum()
    return (gt + 0.5 * eq) / (len(p) * len(n))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 60), st.integers(1, 6))
def test_roc_auc_matches_pairwise_oracle(seed, n, levels):
    rng = np.random.default_rng(seed)
    pos = rng.random(n) < 0.5
    pos[0], pos[1] = True, False
    score = rng.integers(0, levels + 1, n).astype(float)
    assert abs(dk.roc_auc(pos, score) - mann_whitney_auc(pos, score)) < 1e-12


def test_roc_auc_hard_decision_is_balanced_accuracy():
    pos = np.array([1, 1, 1, 0, 0, 0, 0], bool)
    dec = np.array([1, 1, 0, 1, 0, 0, 0], float)
    tpr, fpr = 2 / 3, 1 / 4
    assert dk.roc_auc(pos, dec) == pytest.approx((tpr + 1 - fpr) / 2)
    with pytest.raises(ValueError):
        dk.roc_auc(np.ones(3, bool), np.zeros(3))


@pytest.mark.parametrize("n,expected", [(2000, [800, 400, 400, 400]), (800, [320, 160, 160, 160]),
                                        (7, [3, 2, 1, 1]), (5, [2, 1, 1, 1])])
def test_class_counts_examples(n, expected):
    assert dk.class_counts(n) == expected


@settings(max_examples=300, deadline=None)
@given(st.integers(5, 10_000))
def test_class_counts_ratio_within_one(n):
    counts = dk.class_counts(n)
    assert sum(counts) == n
    for c, w in zip(counts, dk.CLASS_WEIGHTS):
        assert abs(c - n * w / 5) < 1


def test_label_rule():
    cfg = {"kind": "esia"}
    assert dk.label_from(("clean", "clean"), None) == 0
    assert dk.label_from(("attack", "clean"), None) == 0
    assert dk.label_from(("clean", "attack"), cfg) == 3
    assert dk.label_from(("attack", "attack"), {"kind": "poltergeist"}) == 1


def test_evaluate_confusion_and_rates():
    labels = np.array([0, 0, 1, 2, 3, 3])
    pred = np.array([0, 1, 1, 2, 3, 0])
    rep = dk.evaluate(labels, pred, dk.one_hot(pred), "m")
    assert rep.accuracy == pytest.approx(4 / 6)
    assert rep.confusion.tolist() == [[1, 1, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [1, 0, 0, 1]]
    assert rep.tpr[3] == 0.5 and rep.fpr[0] == pytest.approx(1 / 4)
    assert dk.table5_row(rep).startswith("m,0.666667,")
    assert dk.TABLE5_HEADER.split(",")[:6] == ["method", "accuracy", "auc_benign", "auc_polt", "auc_snal", "auc_esia"]
    with pytest.raises(ValueError):
        dk.evaluate(np.array([0, 1]), np.array([0, 1]), np.eye(4)[:2])


@pytest.fixture(scope="module")
def short_archives(tmp_path_factory):
    root = tmp_path_factory.mktemp("arc")
    pilot = make_pilot("reference")
    arcs = []
    for fam in ("train", "test"):
        sc = bundled_scenario(fam)
        arcs.append(dk.record_run(sc, pilot, SimConfig(), root / sc.route.route_id, duration_s=20.0))
    return root, arcs


def test_record_run_count_and_index(short_archives):
    root, arcs = short_archives
    arc = arcs[0]
    assert len(arc) == 400 and arc.frames.shape[1:] == (3, 64, 96, 3)
    rows = [json.loads(l) for l in (root / arc.route_id / "index.jsonl").read_text().splitlines()]
    assert len(rows) == 400 and rows[20]["t_seconds"] == 1.0
    assert all(os.path.exists(root / arc.route_id / p) for r in rows for p in r["paths"])
    back = dk.load_archive(root / arc.route_id)
    assert np.array_equal(back.frames, arc.frames) and back.record_hz == 20


def test_record_run_deterministic(short_archives):
    _, arcs = short_archives
    again = dk.record_run(bundled_scenario("train"), make_pilot("reference"), SimConfig(), duration_s=20.0)
    assert np.array_equal(again.frames, arcs[0].frames)


def test_record_hz_must_divide_sim_rate():
    with pytest.raises(ValueError):
        dk.record_run(bundled_scenario("train"), make_pilot("oracle"), SimConfig(), duration_s=1.0, record_hz=7)


def test_build_dataset_protocol(short_archives, tmp_path):
    _, arcs = short_archives
    spec = dk.DatasetSpec((arcs[0].route_id,), (arcs[1].route_id,), n_train=60, n_test=25)
    train, test = dk.build_dataset(arcs, spec, seed=7)
    assert train.class_counts() == [24, 12, 12, 12] and test.class_counts() == [10, 5, 5, 5]
    assert dk.audit_labels(train) == 0 and dk.audit_labels(test) == 0
    assert {r["route"] for r in train.provenance} == {arcs[0].route_id}
    assert {r["route"] for r in test.provenance} == {arcs[1].route_id}
    # the pair offset is exactly one second of recorded steps
    for rec, fr in zip(train.provenance[:10], train.frames[:10]):
        if rec["combo"] == ["clean", "clean"]:
            assert np.array_equal(fr[:3], arcs[0].frames[rec["t"] - 20])
    # benign pairs never carry an attacked current triple
    for rec in train.provenance:
        if rec["label"] == 0:
            assert rec["attack_params"]["curr"] is None
    again = dk.build_dataset(arcs, spec, seed=7)[0]
    assert np.array_equal(again.frames, train.frames)
    path = tmp_path / "idx.jsonl"
    dk.write_index(train, path)
    back = dk.read_index(path, arcs, offset=spec.offset)
    assert np.array_equal(back.frames, train.frames) and np.array_equal(back.labels, train.labels)
    # the same index rebuilt from the PPM files alone
    assert np.array_equal(dk.read_index(path, offset=spec.offset).frames, train.frames)


def test_dataset_spec_rejects_overlap_and_missing(short_archives):
    _, arcs = short_archives
    with pytest.raises(ValueError):
        dk.DatasetSpec(("a",), ("a",))
    spec = dk.DatasetSpec(("nope",), (arcs[1].route_id,), n_train=10, n_test=10)
    with pytest.raises(ValueError, match="nope"):
        dk.build_dataset(arcs, spec)


def test_bench_reports_positive_median():
    frames = np.zeros((4, 2))
    assert dk.bench(lambda x: sum(range(1000)), frames, repeats=3) > 0.0
    with pytest.raises(ValueError):
        dk.bench(lambda x: None, frames[:0])
