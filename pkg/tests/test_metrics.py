import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from terraseg.core import Raster, ValidationError
from terraseg.metrics import Counts, auc, confusion, evaluate, per_class_report, scores
from terraseg.synth import oracle_auc


def raster(**ch):
    h, w = next(iter(ch.values())).shape
    return Raster((0, 0), 1.0, w, h, {k: np.asarray(v, float) for k, v in ch.items()})


def formulas(tp, fp, tn, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    acc = (tp + tn) / (tp + fp + tn + fn)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    return p, r, f1, acc, mcc


def test_perfect_prediction_counts():
    lab = np.array([[1, 0], [0, 1]])
    c = confusion(raster(prob=lab), raster(label=lab))
    assert c.fp == 0 and c.fn == 0


def test_half_is_positive():
    c = confusion(raster(prob=np.full((2, 2), 0.5)), raster(label=np.array([[1, 0], [1, 1]])))
    assert c.fn == 0 and c.tp == 3


def test_confusion_double_loop(rng):
    p, y = rng.random((9, 11)), (rng.random((9, 11)) > 0.6).astype(float)
    y[0, 0] = -9999.0
    c = confusion(raster(prob=p), raster(label=y))
    want = Counts()
    for i in range(9):
        for j in range(11):
            if y[i, j] == -9999.0:
                continue
            pos, lab = p[i, j] >= 0.5, y[i, j] == 1
            if pos and lab:
                want.tp += 1
            elif pos:
                want.fp += 1
            elif lab:
                want.fn += 1
            else:
                want.tn += 1
    assert c == want


def test_misaligned_rejected():
    with pytest.raises(ValidationError):
        confusion(raster(prob=np.zeros((2, 2))), raster(label=np.zeros((2, 3))))


def test_score_examples():
    s = scores(Counts(tp=1, fp=0, tn=1, fn=0))
    assert all(s[k] == 1 for k in ("precision", "recall", "f1", "accuracy", "mcc"))
    s = scores(Counts(tp=8, fp=2, tn=88, fn=2))
    assert (s["precision"], s["recall"], s["f1"]) == pytest.approx((0.8, 0.8, 0.8))


def test_zero_denominators_flagged():
    s = scores(Counts(tp=0, fp=0, tn=5, fn=0))
    assert s["precision"] == 0 and s["mcc"] == 0
    assert "precision" in s["zero_denominator"]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_scores_match_formulas_and_ranges(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    s = scores(Counts(tp, fp, tn, fn))
    want = formulas(tp, fp, tn, fn)
    got = (s["precision"], s["recall"], s["f1"], s["accuracy"], s["mcc"])
    assert got == pytest.approx(want, abs=1e-12)
    assert -1 <= s["mcc"] <= 1 and all(0 <= v <= 1 for v in got[:4])
    swapped = scores(Counts(tn, fn, tp, fp))
    assert swapped["mcc"] == pytest.approx(s["mcc"], abs=1e-12)
    assert swapped["accuracy"] == pytest.approx(s["accuracy"], abs=1e-12)


def test_auc_examples(rng):
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    s = np.round(rng.random(200), 2)
    y = rng.random(200) > 0.4
    assert auc(s, y) == pytest.approx(oracle_auc(s, y), abs=1e-12)
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_monotone_transform_invariant(rng):
    s = rng.normal(size=300)
    y = rng.random(300) > 0.5
    assert auc(np.exp(3 * s) + 1, y) == auc(s, y)


def class_case(rng):
    h, w = 10, 12
    code = rng.integers(0, 5, (h, w)).astype(float)
    y = (code > 0).astype(float)
    return code, y


def test_per_class_perfect(rng):
    code, y = class_case(rng)
    rows, defined = per_class_report(raster(prob=y), raster(label=y), raster(class_tag=code))
    assert not defined
    assert all(r.accuracy == 1 for r in rows if r.area > 0)
    assert all(r.error_part == 0 for r in rows)


def test_errors_only_in_road(rng):
    code, y = class_case(rng)
    p = y.copy()
    road = np.argwhere(code == 1)[:3]
    p[tuple(road.T)] = 0.0
    rows, defined = per_class_report(raster(prob=p), raster(label=y), raster(class_tag=code))
    parts = {r.name: r.error_part for r in rows}
    assert defined and parts["road"] == 1 and sum(parts.values()) == 1


def test_per_class_hand_tally(rng):
    code, y = class_case(rng)
    p = rng.random(y.shape)
    rows, _ = per_class_report(raster(prob=p), raster(label=y), raster(class_tag=code))
    names = {1: "road", 2: "sidewalk", 3: "terrace", 4: "unpaved-road", 0: "rest"}
    wrong = (p >= 0.5) != (y > 0.5)
    total_err = wrong.sum()
    by = {r.name: r for r in rows}
    for c, name in names.items():
        cells = [(i, j) for i in range(y.shape[0]) for j in range(y.shape[1]) if code[i, j] == c]
        errs = sum(1 for i, j in cells if wrong[i, j])
        assert by[name].area == pytest.approx(len(cells) / y.size)
        assert by[name].accuracy == pytest.approx(1 - errs / len(cells) if cells else 0.0)
        assert by[name].error_part == pytest.approx(errs / total_err)
    assert sum(r.error_part for r in rows) == pytest.approx(1.0, abs=1e-9)


def test_report_json_is_flat(rng):
    code, y = class_case(rng)
    rep = evaluate(raster(prob=rng.random(y.shape)), raster(label=y), raster(class_tag=code))
    d = json.loads(rep.to_json())
    assert {"tp", "f1", "mcc", "auc", "road.accuracy", "rest.error_part"} <= set(d)
    assert not any(isinstance(v, (dict, list)) and k != "zero_denominator" for k, v in d.items())
