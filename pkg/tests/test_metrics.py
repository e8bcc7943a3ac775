import json
import math

import numpy as np
import pytest

import oracles
from s3tunet import metrics
from s3tunet.metrics import (MetricReport, accuracy, bce_dice_loss, confusion, dsc, metric_report, miou,
                             precision, roc_auc, sensitivity)


def test_perfect_prediction():
    g = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    for fn in (dsc, sensitivity, precision, accuracy, miou):
        assert fn(g, g) == 1.0


def test_all_ones_against_half():
    g = np.zeros(64)
    g[:32] = 1
    assert dsc(np.ones(64), g) == pytest.approx(2 / 3, abs=1e-15)


def test_complement_scores_zero():
    g = np.array([1.0, 0, 1, 1, 0, 0])
    assert sensitivity(1 - g, g) == 0.0
    assert precision(1 - g, g) == 0.0


def test_empty_conventions():
    z = np.zeros((4, 4))
    assert dsc(z, z) == 1.0
    assert sensitivity(z, z) == 1.0 and precision(z, z) == 1.0 and miou(z, z) == 1.0
    one = z.copy()
    one[0, 0] = 1
    # no reference foreground but a false positive
    assert sensitivity(one, z) == 0.0
    # nothing predicted but a missed pixel
    assert precision(z, one) == 0.0


def test_threshold_is_inclusive():
    assert confusion(np.array([0.5, 0.4999]), np.array([1.0, 1.0])) == (1, 0, 0, 1)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros(4), np.zeros(5))


def test_set_counting_oracle_many_instances():
    r = np.random.default_rng(1)
    for _ in range(200):
        shape = (4, 4) if r.random() < 0.5 else (16,)
        p = r.random(shape)
        g = (r.random(shape) < r.random()).astype(float)
        ref = oracles.hard_metrics(p, g)
        assert confusion(p, g) == oracles.confusion(p, g)
        for name, fn in (("dsc", dsc), ("sensitivity", sensitivity), ("precision", precision),
                         ("acc", accuracy), ("miou", miou)):
            assert fn(p, g) == pytest.approx(ref[name], abs=1e-12)


def test_soft_dice():
    p = np.array([0.2, 0.9, 0.6, 0.0])
    g = np.array([0.0, 1.0, 1.0, 0.0])
    expected = 2 * (0.9 + 0.6) / ((0.04 + 0.81 + 0.36) + 2)
    assert dsc(p, g, soft=True) == pytest.approx(expected, abs=1e-15)


def test_dsc_symmetric_for_binary():
    r = np.random.default_rng(2)
    for _ in range(50):
        a, b = (r.random(20) > 0.5).astype(float), (r.random(20) > 0.5).astype(float)
        assert dsc(a, b) == dsc(b, a)


def test_permutation_invariance():
    r = np.random.default_rng(3)
    p, g = r.random(30), (r.random(30) > 0.6).astype(float)
    perm = r.permutation(30)
    for fn in (dsc, sensitivity, precision, accuracy, miou):
        assert fn(p[perm], g[perm]) == fn(p, g)


def test_monotone_rescaling_invariance():
    r = np.random.default_rng(4)
    p, g = r.random(50), (r.random(50) > 0.5).astype(float)
    squashed = 0.5 + 0.5 * np.tanh(3 * (p - 0.5)) * 0.999
    assert np.array_equal(p >= 0.5, squashed >= 0.5)
    for fn in (dsc, sensitivity, precision, accuracy, miou):
        assert fn(squashed, g) == fn(p, g)


def test_roc_auc():
    assert roc_auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1.0])) == pytest.approx(0.75)
    assert roc_auc(np.array([0.1, 0.9]), np.array([0, 1.0])) == 1.0
    with pytest.raises(ValueError):
        roc_auc(np.ones(3), np.ones(3))


# ---------------------------------------------------------------- report

def test_report_is_mean_of_samples():
    r = np.random.default_rng(5)
    preds = [r.random((4, 4)) for _ in range(5)]
    gts = [(r.random((4, 4)) > 0.5).astype(float) for _ in range(5)]
    rep = metric_report(preds, gts, ids=list("abcde"))
    assert rep.n_samples == 5
    assert rep.dsc == pytest.approx(np.mean([oracles.hard_metrics(p, g)["dsc"] for p, g in zip(preds, gts)]))
    assert rep.per_sample[2]["id"] == "c"
    for key in metrics.REPORT_KEYS[:-1]:
        assert 0.0 <= getattr(rep, key) <= 1.0


def test_report_json_keys():
    rep = metric_report([np.ones(4)], [np.ones(4)])
    doc = json.loads(rep.to_json())
    assert list(doc) == ["dsc", "acc", "miou", "precision", "sensitivity", "n_samples"]
    assert "per_sample" in json.loads(rep.to_json(include_per_sample=True))
    assert MetricReport.from_dict(doc).to_dict() == doc


def test_report_needs_samples():
    with pytest.raises(ValueError):
        metric_report([], [])


# ---------------------------------------------------------------- loss

def test_loss_perfect_prediction_near_zero():
    g = (np.random.default_rng(6).random((2, 1, 4, 4)) > 0.5).astype(float)
    assert abs(float(bce_dice_loss(g, g).data)) < 1e-6


def test_loss_half_probability_bce_is_ln2():
    g = (np.random.default_rng(7).random(10) > 0.5).astype(float)
    loss = float(bce_dice_loss(np.full(10, 0.5), g, w_bce=1.0, w_dice=0.0).data)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_loss_matches_scalar_oracle():
    r = np.random.default_rng(8)
    for _ in range(100):
        p = r.random(8)
        g = (r.random(8) > 0.5).astype(float)
        w = r.random()
        got = float(bce_dice_loss(p, g, w, 1 - w).data)
        assert got == pytest.approx(oracles.bce_dice(p, g, w, 1 - w), abs=1e-12)


def test_loss_clamps_exact_extremes():
    p = np.array([0.0, 1.0, 1.0])
    g = np.array([1.0, 0.0, 1.0])
    got = float(bce_dice_loss(p, g).data)
    assert np.isfinite(got)
    assert got == pytest.approx(oracles.bce_dice(p, g), abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        bce_dice_loss(np.zeros(3), np.zeros(4))
