"""Classification metrics, annotation merging and inter-rater agreement."""
from __future__ import annotations

from collections import Counter
from typing import Hashable, Sequence

import numpy as np

from .errors import DataError, UsageError

POSITIVE = "correct"

# one inner list per sequence, one entry per annotator (None = not rated)
AnnotationSet = Sequence[Sequence[Hashable | None]]


def _check_pair(a: Sequence, b: Sequence, what: str) -> None:
    if len(a) != len(b):
        raise UsageError(f"{what}: length mismatch ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise UsageError(f"{what}: inputs are empty")


def confusion_counts(predictions, truth, positive=POSITIVE) -> tuple[int, int, int, int]:
    """Return ``(tp, fp, fn, tn)`` with ``positive`` as the positive class."""
    _check_pair(predictions, truth, "confusion_counts")
    p = np.asarray([x == positive for x in predictions])
    t = np.asarray([x == positive for x in truth])
    return (
        int(np.sum(p & t)),
        int(np.sum(p & ~t)),
        int(np.sum(~p & t)),
        int(np.sum(~p & ~t)),
    )


def f1_score(predictions, truth, positive=POSITIVE) -> float:
    """F1 of the ``positive`` class.

    With no positives anywhere (TP = FP = FN = 0) the predictor agrees
    perfectly with the truth and 1.0 is returned.
    """
    tp, fp, fn, _ = confusion_counts(predictions, truth, positive)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def accuracy(predictions, truth) -> float:
    _check_pair(predictions, truth, "accuracy")
    return sum(p == t for p, t in zip(predictions, truth)) / len(truth)


def merge_annotations(annotations: AnnotationSet, policy: str = "unanimous_correct") -> list[str]:
    """Merge per-annotator labels into one label per sequence.

    ``unanimous_correct``: correct only if every annotator says correct.
    ``majority``: correct if strictly more than half say correct.
    """
    if policy not in ("unanimous_correct", "majority"):
        raise UsageError(f"unknown merge policy {policy!r}")
    merged = []
    for i, labels in enumerate(annotations):
        labels = [x for x in labels if x is not None]
        if not labels:
            raise DataError(f"sequence {i} has no annotations")
        n_correct = sum(x == POSITIVE for x in labels)
        if policy == "unanimous_correct":
            ok = n_correct == len(labels)
        else:
            ok = 2 * n_correct > len(labels)
        merged.append("correct" if ok else "incorrect")
    return merged


def binarize_kimore_scores(scores, cutoff: float | None = None, s_max: float = 50.0) -> list[str]:
    """Threshold graded clinical scores in ``[0, s_max]``; ``score >= cutoff`` is correct.

    The cutoff defaults to ``s_max / 2``.
    """
    if cutoff is None:
        cutoff = s_max / 2.0
    out = []
    for i, s in enumerate(scores):
        s = float(s)
        if not 0.0 <= s <= s_max:
            raise DataError(f"score {s} at index {i} is outside [0, {s_max}]")
        out.append("correct" if s >= cutoff else "incorrect")
    return out


def cohens_kappa(annotator_a, annotator_b) -> float:
    _check_pair(annotator_a, annotator_b, "cohens_kappa")
    n = len(annotator_a)
    p_o = sum(a == b for a, b in zip(annotator_a, annotator_b)) / n
    ca, cb = Counter(annotator_a), Counter(annotator_b)
    p_e = sum(ca[c] * cb[c] for c in ca) / (n * n)
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def krippendorff_alpha(annotations: AnnotationSet) -> float:
    """Nominal Krippendorff's alpha; ``None`` marks a missing rating.

    Units with fewer than two ratings are not pairable and are dropped.
    """
    units = [[x for x in unit if x is not None] for unit in annotations]
    max_raters = max((len(u) for u in annotations), default=0)
    if max_raters < 2:
        raise UsageError("krippendorff_alpha needs at least 2 annotators")
    units = [u for u in units if len(u) >= 2]
    if len(units) < 2:
        raise UsageError("krippendorff_alpha needs at least 2 items with 2 or more ratings")
    categories = sorted({x for u in units for x in u}, key=repr)
    if len(categories) < 2:
        raise UsageError("krippendorff_alpha is undefined with a single observed category")
    index = {c: i for i, c in enumerate(categories)}
    counts = np.zeros((len(units), len(categories)))
    for r, u in enumerate(units):
        for x in u:
            counts[r, index[x]] += 1
    m = counts.sum(axis=1)
    # coincidences within units: o_ck = sum_u n_uc (n_uk - [c == k]) / (m_u - 1)
    coincidence = np.einsum("uc,uk->ck", counts / (m - 1)[:, None], counts)
    coincidence -= np.diag((counts / (m - 1)[:, None]).sum(axis=0))
    n_c = coincidence.sum(axis=1)
    n = n_c.sum()
    observed = coincidence.sum() - np.trace(coincidence)
    expected = (n_c.sum() ** 2 - (n_c**2).sum()) / (n - 1)
    return float(1.0 - observed / expected)
