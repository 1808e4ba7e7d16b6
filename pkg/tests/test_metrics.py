from fractions import Fraction
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rehab_assess.errors import DataError, UsageError
from rehab_assess.metrics import (
    accuracy, binarize_kimore_scores, cohens_kappa, confusion_counts, f1_score,
    krippendorff_alpha, merge_annotations,
)

C, I = "correct", "incorrect"
labels = st.sampled_from([C, I])


def f1_oracle(pred, truth):
    tp = fp = fn = 0
    for p, t in zip(pred, truth):
        if p == C and t == C:
            tp += 1
        elif p == C:
            fp += 1
        elif t == C:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = Fraction(tp, tp + fp), Fraction(tp, tp + fn)
    return float(2 * precision * recall / (precision + recall))


def kappa_oracle(a, b):
    n = len(a)
    table = {(x, y): 0 for x in (C, I) for y in (C, I)}
    for x, y in zip(a, b):
        table[x, y] += 1
    p_o = Fraction(table[C, C] + table[I, I], n)
    p_e = Fraction(0)
    for c in (C, I):
        row = table[c, C] + table[c, I]
        col = table[C, c] + table[I, c]
        p_e += Fraction(row * col, n * n)
    if p_e == 1:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def alpha_oracle(units):
    """Nominal alpha from explicit enumeration of ordered value pairs."""
    units = [[v for v in u if v is not None] for u in units]
    units = [u for u in units if len(u) >= 2]
    values = [v for u in units for v in u]
    n = len(values)
    d_o = Fraction(0)
    for u in units:
        d_o += Fraction(sum(a != b for a, b in permutations(u, 2)), len(u) - 1)
    d_o /= n
    d_e = Fraction(sum(a != b for a, b in permutations(values, 2)), n * (n - 1))
    return float(1 - d_o / d_e)


def test_f1_examples():
    assert f1_score([C, I, C], [C, I, C]) == 1.0
    pred = [C, C, C, I]
    truth = [C, C, I, C]
    assert f1_score(pred, truth) == pytest.approx(2 / 3)
    assert f1_score([I, I], [I, I]) == 1.0
    assert f1_score([I, I], [C, C]) == 0.0
    with pytest.raises(UsageError):
        f1_score([C], [C, I])


def test_accuracy_examples():
    assert accuracy([C, I], [C, I]) == 1.0
    assert accuracy([C, I, C, I], [C, C, I, I]) == 0.5


@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=40))
@settings(max_examples=200, deadline=None)
def test_classification_metrics_oracle(pairs):
    pred, truth = [p for p, _ in pairs], [t for _, t in pairs]
    assert f1_score(pred, truth) == f1_oracle(pred, truth)
    assert accuracy(pred, truth) == float(Fraction(sum(p == t for p, t in pairs), len(pairs)))
    order = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert f1_score([pred[i] for i in order], [truth[i] for i in order]) == f1_score(pred, truth)
    assert sum(confusion_counts(pred, truth)) == len(pairs)


def test_kappa_examples():
    assert cohens_kappa([C, I, C], [C, I, C]) == 1.0
    assert cohens_kappa([C, C, I, I], [C, I, C, I]) == 0.0
    assert cohens_kappa([C, C], [C, C]) == 1.0


@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=40))
@settings(max_examples=200, deadline=None)
def test_kappa_oracle(pairs):
    a, b = [x for x, _ in pairs], [y for _, y in pairs]
    assert cohens_kappa(a, b) == pytest.approx(kappa_oracle(a, b), abs=1e-12)
    assert cohens_kappa(b, a) == pytest.approx(cohens_kappa(a, b), abs=1e-12)


def test_alpha_examples():
    assert krippendorff_alpha([[C, C, C], [I, I, I], [C, C, C]]) == 1.0
    value = krippendorff_alpha([[C, I], [I, C]])
    assert value == pytest.approx(alpha_oracle([[C, I], [I, C]]), abs=1e-12)
    with pytest.raises(UsageError, match="single observed category"):
        krippendorff_alpha([[C, C], [C, C]])
    with pytest.raises(UsageError):
        krippendorff_alpha([[C], [I]])


@st.composite
def annotation_sets(draw):
    raters = draw(st.integers(2, 4))
    n = draw(st.integers(2, 25))
    units = [draw(st.lists(st.sampled_from([C, I, None]), min_size=raters, max_size=raters)) for _ in range(n)]
    pairable = [u for u in units if sum(v is not None for v in u) >= 2]
    values = {v for u in pairable for v in u if v is not None}
    if len(pairable) < 2 or len(values) < 2:
        units += [[C, I] + [None] * (raters - 2), [I, I] + [None] * (raters - 2)]
    return units


@given(annotation_sets())
@settings(max_examples=200, deadline=None)
def test_alpha_oracle(units):
    assert krippendorff_alpha(units) == pytest.approx(alpha_oracle(units), abs=1e-12)
    swapped = [[{C: I, I: C}.get(v) for v in u] for u in units]
    assert krippendorff_alpha(swapped) == pytest.approx(krippendorff_alpha(units), abs=1e-12)


def test_merge_annotations():
    assert merge_annotations([[C, C]], "unanimous_correct") == [C]
    assert merge_annotations([[C, C]], "majority") == [C]
    assert merge_annotations([[C, I]], "unanimous_correct") == [I]
    assert merge_annotations([[C, I]], "majority") == [I]
    assert merge_annotations([[C, C, I]], "majority") == [C]
    with pytest.raises(DataError):
        merge_annotations([[]])
    with pytest.raises(UsageError):
        merge_annotations([[C]], "loudest")


@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=100))
@settings(max_examples=100, deadline=None)
def test_unanimous_is_and(pairs):
    merged = merge_annotations([list(p) for p in pairs], "unanimous_correct")
    assert merged == [C if a == C and b == C else I for a, b in pairs]


def test_kimore_binarization():
    assert binarize_kimore_scores([50.0], cutoff=50.0) == [C]
    assert binarize_kimore_scores([30.0, 29.9], cutoff=30.0) == [C, I]
    assert binarize_kimore_scores([25.0, 24.0]) == [C, I]
    with pytest.raises(DataError):
        binarize_kimore_scores([51.0])
    with pytest.raises(DataError):
        binarize_kimore_scores([-1.0])


def test_kimore_median_balance(rng):
    for n in (10, 11, 50, 101):
        scores = rng.uniform(0, 50, size=n)
        out = binarize_kimore_scores(scores, cutoff=float(np.median(scores)))
        assert abs(out.count(C) - out.count(I)) <= 1
