"""Gaussian mixture movement model over ``[time, joint positions]`` vectors.

The model is fit by EM on correct executions only; a sequence is scored by
its average per-frame log-likelihood and classified against a threshold
chosen on validation data.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import ConfigurationError, NumericalError, SchemaError
from .sequence import MotionSequence, to_gmm_datapoints

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmFitConfig:
    K: int = 8
    max_iterations: int = 200
    tolerance: float = 1e-6
    covariance_floor: float = 1e-6
    init: str = "time_uniform"
    seed: int = 0

    def __post_init__(self):
        if int(self.K) < 1:
            raise ConfigurationError(f"K must be positive, got {self.K}")
        if int(self.max_iterations) < 1:
            raise ConfigurationError("max_iterations must be positive")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")
        if not self.covariance_floor > 0:
            raise ConfigurationError("covariance_floor must be positive")
        if self.init not in ("time_uniform", "kmeans"):
            raise ConfigurationError(f"unknown init {self.init!r}")


@dataclass(frozen=True)
class GmmComponent:
    weight: float
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def mean_t(self) -> float:
        return float(self.mean[0])

    @property
    def mean_x(self) -> np.ndarray:
        return self.mean[1:]

    @property
    def cov_t(self) -> float:
        return float(self.covariance[0, 0])

    @property
    def cov_x(self) -> np.ndarray:
        return self.covariance[1:, 1:]

    @property
    def cov_xt(self) -> np.ndarray:
        return self.covariance[1:, 0]


@dataclass(frozen=True, eq=False)
class GmmModel:
    """K weighted Gaussians; arrays have shapes (K,), (K, d), (K, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    exercise_id: str = ""
    config: GmmFitConfig = field(default_factory=GmmFitConfig)
    fit_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("weights", "means", "covariances"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        k = self.weights.shape[0]
        if k < 1 or self.means.shape[0] != k or self.covariances.shape[0] != k:
            raise SchemaError("weights, means and covariances disagree on K")
        d = self.means.shape[1]
        if self.covariances.shape[1:] != (d, d):
            raise SchemaError("covariances must be K x d x d")
        object.__setattr__(self, "_chol", None)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GmmComponent]:
        return [
            GmmComponent(float(w), m, c)
            for w, m, c in zip(self.weights, self.means, self.covariances)
        ]

    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            object.__setattr__(self, "_chol", _cholesky_all(self.covariances))
        return self._chol

    def permuted(self, order: Sequence[int]) -> "GmmModel":
        order = list(order)
        return GmmModel(
            self.weights[order], self.means[order], self.covariances[order],
            self.exercise_id, self.config, dict(self.fit_metadata),
        )


def _cholesky_all(covariances: np.ndarray) -> np.ndarray:
    chol = np.empty_like(covariances)
    for i, cov in enumerate(covariances):
        try:
            chol[i] = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise NumericalError(f"covariance of component {i} is not positive definite") from None
    return chol


def gaussian_log_density(point, mean, covariance, component: int | None = None) -> float:
    """``log N(point; mean, covariance)`` through a Cholesky factorization."""
    point = np.atleast_1d(np.asarray(point, dtype=np.float64))
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(covariance, dtype=np.float64))
    if point.shape != mean.shape or cov.shape != (mean.size, mean.size):
        raise SchemaError(
            f"dimension mismatch: point {point.shape}, mean {mean.shape}, covariance {cov.shape}"
        )
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        where = "" if component is None else f" of component {component}"
        raise NumericalError(f"covariance{where} is not positive definite") from None
    return float(_log_density_chol(point[None, :], mean, chol)[0])


def _log_density_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    z = solve_triangular(chol, (x - mean).T, lower=True, check_finite=False)
    maha = np.einsum("ij,ij->j", z, z)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (mean.size * LOG_2PI + log_det + maha)


def component_log_densities(x: np.ndarray, means, chols) -> np.ndarray:
    """(N, K) matrix of per-component log densities."""
    out = np.empty((x.shape[0], len(means)))
    for k, (m, c) in enumerate(zip(means, chols)):
        out[:, k] = _log_density_chol(x, m, c)
    return out


def log_density(model: GmmModel, points) -> np.ndarray:
    """Mixture log-density ``log p(theta)`` for each row of ``points``."""
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[1] != model.dimension:
        raise SchemaError(f"points have dimension {x.shape[1]}, model expects {model.dimension}")
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    comp = component_log_densities(x, model.means, model.cholesky())
    return logsumexp(comp + log_w[None, :], axis=1)


# --- EM -----------------------------------------------------------------------


def _init_responsibilities(x: np.ndarray, config: GmmFitConfig) -> np.ndarray:
    n, k = x.shape[0], config.K
    if config.init == "time_uniform":
        t = x[:, 0]
        span = t.max() - t.min()
        u = (t - t.min()) / span if span > 0 else np.zeros(n)
        labels = np.minimum((u * k).astype(int), k - 1)
        if np.bincount(labels, minlength=k).min() == 0:
            # some time bin is empty: fall back to equal-count chunks in time order
            order = np.argsort(t, kind="stable")
            labels = np.empty(n, dtype=int)
            labels[order] = np.arange(n) * k // n
    else:
        labels = _kmeans_labels(x, k, np.random.default_rng(config.seed))
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    return resp


def _kmeans_labels(x: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 50) -> np.ndarray:
    # k-means++ seeding followed by Lloyd iterations
    centers = [x[rng.integers(x.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        p = d2 / total if total > 0 else np.full(x.shape[0], 1.0 / x.shape[0])
        centers.append(x[rng.choice(x.shape[0], p=p)])
    centers = np.array(centers)
    labels = np.zeros(x.shape[0], dtype=int)
    for _ in range(iterations):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        for j in range(k):
            members = x[new == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def _m_step(x: np.ndarray, resp: np.ndarray, floor: float):
    n, d = x.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(np.float64).eps
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    for k in range(resp.shape[1]):
        diff = x - means[k]
        cov = (resp[:, k : k + 1] * diff).T @ diff / nk[k]
        cov = 0.5 * (cov + cov.T)
        cov.flat[:: d + 1] += floor
        covs[k] = cov
    return weights, means, covs


def _e_step(x: np.ndarray, weights, means, covs, iteration: int):
    try:
        chols = _cholesky_all(covs)
    except NumericalError as exc:
        raise NumericalError(f"EM iteration {iteration}: {exc}") from None
    with np.errstate(divide="ignore"):
        log_prob = component_log_densities(x, means, chols) + np.log(weights)[None, :]
    lse = logsumexp(log_prob, axis=1)
    total = float(lse.sum())
    if not math.isfinite(total):
        raise NumericalError(f"EM produced a non-finite log-likelihood at iteration {iteration}")
    return total, np.exp(log_prob - lse[:, None])


def fit_points(points, config: GmmFitConfig = GmmFitConfig()):
    """Run EM on an (N, d) array.

    Returns ``(weights, means, covariances, history)`` where ``history`` holds
    the total training log-likelihood after initialization and after every
    accepted M-step. Iteration stops on relative change below ``tolerance``,
    after ``max_iterations``, or at the first step that would lower the
    likelihood (that step is discarded).
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[0] < config.K:
        raise ConfigurationError(
            f"{x.shape[0]} datapoints are fewer than K={config.K} components"
        )
    if not np.all(np.isfinite(x)):
        raise NumericalError("training datapoints contain non-finite values")
    params = _m_step(x, _init_responsibilities(x, config), config.covariance_floor)
    history: list[float] = []
    previous = params
    for iteration in range(config.max_iterations + 1):
        ll, resp = _e_step(x, *params, iteration)
        if history and ll < history[-1]:
            # the floored M-step is not an exact maximizer and can overshoot
            # near a fixed point; keep the last non-decreasing estimate
            params = previous
            break
        history.append(ll)
        if iteration > 0 and abs(ll - history[-2]) <= config.tolerance * abs(history[-2]):
            break
        if iteration == config.max_iterations:
            break
        previous = params
        params = _m_step(x, resp, config.covariance_floor)
    weights, means, covs = params
    return weights, means, covs, history


def pooled_datapoints(sequences: Sequence[MotionSequence]) -> np.ndarray:
    return np.vstack([to_gmm_datapoints(s) for s in sequences])


def fit(correct_sequences: Sequence[MotionSequence], config: GmmFitConfig = GmmFitConfig()) -> GmmModel:
    """Fit one movement model on correct, preprocessed executions of one exercise."""
    seqs = list(correct_sequences)
    if not seqs:
        raise ConfigurationError("fit needs at least one sequence")
    shapes = {s.frames.shape[1:] for s in seqs}
    if len(shapes) != 1:
        raise SchemaError(f"sequences disagree on joints/dimensionality: {sorted(shapes)}")
    exercises = {s.exercise_id for s in seqs}
    if len(exercises) != 1:
        raise ConfigurationError(f"sequences mix exercises {sorted(exercises)}; fit one model per exercise")
    x = pooled_datapoints(seqs)
    weights, means, covs, history = fit_points(x, config)
    logger.debug("GMM fit: K=%d, %d iterations, final ll %.6g", config.K, len(history) - 1, history[-1])
    meta = {
        "iterations": len(history) - 1,
        "final_log_likelihood": history[-1],
        "log_likelihood_history": history,
        "seed": config.seed,
        "n_sequences": len(seqs),
        "n_datapoints": int(x.shape[0]),
    }
    return GmmModel(weights, means, covs, exercises.pop(), config, meta)


def score(model: GmmModel, sequence: MotionSequence) -> float:
    """Average per-frame log-likelihood of a (preprocessed) sequence."""
    x = to_gmm_datapoints(sequence)
    if x.shape[1] != model.dimension:
        raise SchemaError(
            f"sequence yields {x.shape[1]}-dim datapoints, model expects {model.dimension}"
        )
    return float(log_density(model, x).mean())


# --- thresholding -----------------------------------------------------------


@dataclass(frozen=True)
class GmmClassifier:
    model: GmmModel
    threshold: float

    def __post_init__(self):
        if math.isnan(self.threshold):
            raise ConfigurationError("threshold must not be NaN")


def best_threshold(scores, labels) -> tuple[float, float]:
    """F1-optimal threshold for the rule ``score >= threshold -> correct``.

    Candidates are -inf, +inf and midpoints between consecutive distinct
    scores; ties go to the smallest candidate. Returns ``(threshold, f1)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray([lab == "correct" for lab in labels])
    if scores.size == 0 or scores.size != truth.size:
        raise ConfigurationError("validation must be non-empty with one label per score")
    distinct = np.unique(scores)
    candidates = np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]])
    pred = scores[None, :] >= candidates[:, None]
    tp = (pred & truth).sum(axis=1)
    fp = (pred & ~truth).sum(axis=1)
    fn = (~pred & truth).sum(axis=1)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))
    best = int(np.argmax(f1))  # first maximum == smallest threshold
    return float(candidates[best]), float(f1[best])


def calibrate_threshold(model: GmmModel, validation) -> GmmClassifier:
    """Choose the threshold maximizing validation F1.

    ``validation`` is a list of ``(sequence, label)`` pairs.
    """
    validation = list(validation)
    if not validation:
        raise ConfigurationError("threshold calibration needs validation data")
    scores = [score(model, s) for s, _ in validation]
    threshold, f1 = best_threshold(scores, [lab for _, lab in validation])
    logger.debug("calibrated threshold %.6g (validation F1 %.4f)", threshold, f1)
    return GmmClassifier(model, threshold)


def classify(classifier: GmmClassifier, sequence: MotionSequence) -> str:
    return "correct" if score(classifier.model, sequence) >= classifier.threshold else "incorrect"


# --- persistence ------------------------------------------------------------


def model_to_dict(model: GmmModel) -> dict:
    return {
        "kind": "gmm",
        "K": model.K,
        "dimension": model.dimension,
        "exercise_id": model.exercise_id,
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "covariances": [c.ravel().tolist() for c in model.covariances],
        "fit_config": asdict(model.config),
        "fit_metadata": model.fit_metadata,
    }


def model_from_dict(doc: dict) -> GmmModel:
    try:
        k, d = int(doc["K"]), int(doc["dimension"])
        covs = np.array(doc["covariances"], dtype=np.float64).reshape(k, d, d)
        return GmmModel(
            np.array(doc["weights"], dtype=np.float64),
            np.array(doc["means"], dtype=np.float64).reshape(k, d),
            covs,
            doc.get("exercise_id", ""),
            GmmFitConfig(**doc.get("fit_config", {})),
            doc.get("fit_metadata", {}),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"invalid GMM model document: {exc}") from exc


def save_model(model: GmmModel | GmmClassifier, path: str | os.PathLike) -> None:
    if isinstance(model, GmmClassifier):
        doc = model_to_dict(model.model)
        doc["threshold"] = model.threshold
    else:
        doc = model_to_dict(model)
    Path(path).write_text(json.dumps(doc))


def load_model(path: str | os.PathLike) -> GmmModel | GmmClassifier:
    doc = json.loads(Path(path).read_text())
    model = model_from_dict(doc)
    if "threshold" in doc:
        return GmmClassifier(model, float(doc["threshold"]))
    return model
