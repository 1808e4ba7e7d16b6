from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rehab_assess import gmm
from rehab_assess.errors import ConfigurationError, NumericalError, SchemaError
from rehab_assess.sequence import MotionSequence, PreprocessConfig, preprocess, to_gmm_datapoints
from rehab_assess.skeleton import chain_graph


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T / d + 0.5 * np.eye(d))


def random_model(rng, k, d):
    w = rng.dirichlet(np.ones(k))
    mu = rng.normal(size=(k, d))
    cov = np.stack([random_spd(rng, d) for _ in range(k)])
    return gmm.GmmModel(w, mu, cov)


def mp_log_density(model, x, dps=40):
    """Naive summation of weighted densities in extended precision."""
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for w, m, c in zip(model.weights, model.means, model.covariances):
            cm = mpmath.matrix(c.tolist())
            diff = mpmath.matrix((x - m).tolist())
            maha = (diff.T * mpmath.inverse(cm) * diff)[0]
            norm = mpmath.sqrt((2 * mpmath.pi) ** len(x) * mpmath.det(cm))
            total += mpmath.mpf(w) * mpmath.exp(-maha / 2) / norm
        return float(mpmath.log(total))


def test_standard_normal_values():
    assert gmm.gaussian_log_density([0, 0], [0, 0], np.eye(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert gmm.gaussian_log_density(1.0, 0.0, 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5, abs=1e-12)


def test_diagonal_product_of_marginals(rng):
    for _ in range(20):
        x, m = rng.normal(size=5), rng.normal(size=5)
        var = rng.uniform(0.1, 3, size=5)
        marg = sum(gmm.gaussian_log_density(x[i], m[i], var[i]) for i in range(5))
        assert gmm.gaussian_log_density(x, m, np.diag(var)) == pytest.approx(marg, abs=1e-12)


def test_non_spd_names_component():
    with pytest.raises(NumericalError, match="component 3"):
        gmm.gaussian_log_density([0, 0], [0, 0], [[1, 2], [2, 1]], component=3)
    with pytest.raises(SchemaError):
        gmm.gaussian_log_density([0, 0, 0], [0, 0], np.eye(2))


def test_log_density_matches_mpmath(rng):
    model = random_model(rng, 3, 4)
    x = rng.normal(size=(25, 4)) * 2
    ours = gmm.log_density(model, x)
    ref = np.array([mp_log_density(model, p) for p in x])
    np.testing.assert_allclose(ours, ref, rtol=1e-10)


def test_score_matches_mpmath(rng):
    model = random_model(rng, 2, 3)
    s = MotionSequence(rng.normal(size=(6, 1, 2)), np.linspace(0, 1, 6), chain_graph(1, 2))
    ref = np.mean([mp_log_density(model, p) for p in to_gmm_datapoints(s)])
    assert gmm.score(model, s) == pytest.approx(ref, rel=1e-10)


def test_score_bounds_and_permutation(rng):
    model = random_model(rng, 4, 3)
    s = MotionSequence(rng.normal(size=(7, 1, 2)), np.linspace(0, 1, 7), chain_graph(1, 2))
    value = gmm.score(model, s)
    modes = [gmm.gaussian_log_density(m, m, c) for m, c in zip(model.means, model.covariances)]
    assert np.isfinite(value) and value <= max(modes)
    for perm in ([3, 2, 1, 0], [1, 0, 3, 2]):
        assert gmm.score(model.permuted(perm), s) == pytest.approx(value, abs=1e-12)


def test_k1_closed_form(rng):
    x = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4))
    cfg = gmm.GmmFitConfig(K=1, covariance_floor=1e-6)
    w, mu, cov, hist = gmm.fit_points(x, cfg)
    np.testing.assert_allclose(mu[0], x.mean(0), atol=1e-9)
    np.testing.assert_allclose(cov[0], np.cov(x.T, bias=True) + 1e-6 * np.eye(4), atol=1e-9)
    assert w.tolist() == [1.0]


def _oracle_em_1d(x, mu, var, w, iters=500):
    # independent scalar EM, loops and all
    for _ in range(iters):
        r = np.array([[wk * np.exp(-(xi - mk) ** 2 / (2 * vk)) / np.sqrt(2 * np.pi * vk)
                       for wk, mk, vk in zip(w, mu, var)] for xi in x])
        r /= r.sum(1, keepdims=True)
        nk = r.sum(0)
        w = nk / len(x)
        mu = (r * x[:, None]).sum(0) / nk
        var = (r * (x[:, None] - mu) ** 2).sum(0) / nk
    return np.sort(mu)


def test_two_clusters_1d():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(-5, 1, 150), rng.normal(5, 1, 150)])
    _, mu, _, _ = gmm.fit_points(x[:, None], gmm.GmmFitConfig(K=2, init="kmeans", seed=1, tolerance=1e-12))
    ours = np.sort(mu[:, 0])
    assert np.all(np.abs(ours - [-5, 5]) < 0.1)
    np.testing.assert_allclose(ours, _oracle_em_1d(x, np.array([-1.0, 1.0]), np.ones(2), np.full(2, 0.5)), atol=1e-4)


def test_fit_monotone_and_deterministic(small_dataset):
    correct = [s for s in small_dataset if s.label == "correct"]
    for k in (1, 2, 4):
        for init in ("time_uniform", "kmeans"):
            cfg = gmm.GmmFitConfig(K=k, init=init, seed=3)
            m1, m2 = gmm.fit(correct, cfg), gmm.fit(correct, cfg)
            hist = np.array(m1.fit_metadata["log_likelihood_history"])
            assert np.all(np.diff(hist) >= -1e-8)
            assert np.array_equal(m1.means, m2.means) and np.array_equal(m1.covariances, m2.covariances)
            assert m1.weights.sum() == pytest.approx(1, abs=1e-9)
            for c in m1.covariances:
                np.testing.assert_allclose(c, c.T, atol=1e-9)
                np.linalg.cholesky(c - 0.5 * cfg.covariance_floor * np.eye(len(c)))


def test_fit_errors(small_dataset):
    with pytest.raises(ConfigurationError):
        gmm.fit([])
    with pytest.raises(ConfigurationError):
        gmm.fit(small_dataset[:1], gmm.GmmFitConfig(K=100))
    other = small_dataset[0].__class__(
        small_dataset[0].frames, small_dataset[0].timestamps, small_dataset[0].graph, "other"
    )
    with pytest.raises(ConfigurationError):
        gmm.fit([small_dataset[0], other])
    with pytest.raises(ConfigurationError):
        gmm.GmmFitConfig(init="random")


def brute_force_f1(scores, labels):
    """Best F1 over all candidate thresholds, in exact rational arithmetic."""
    distinct = sorted(set(scores))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [np.inf]
    best = None
    for c in cands:
        tp = sum(s >= c and l == "correct" for s, l in zip(scores, labels))
        fp = sum(s >= c and l != "correct" for s, l in zip(scores, labels))
        fn = sum(s < c and l == "correct" for s, l in zip(scores, labels))
        f1 = Fraction(1) if tp + fp + fn == 0 else Fraction(2 * tp, 2 * tp + fp + fn)
        if best is None or f1 > best[1]:
            best = (c, f1)
    return best


def test_threshold_examples():
    t, f1 = gmm.best_threshold([-1, -2, -5, -6], ["correct", "correct", "incorrect", "incorrect"])
    assert (t, f1) == (-3.5, 1.0)
    assert gmm.best_threshold([-1, -3], ["correct", "correct"])[0] == -np.inf
    t, f1 = gmm.best_threshold([-2, -1], ["correct", "incorrect"])
    assert t == -np.inf and f1 == pytest.approx(2 / 3)


@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans()), min_size=4, max_size=50))
@settings(max_examples=100, deadline=None)
def test_threshold_matches_brute_force(pairs):
    scores = [float(s) / 4 for s, _ in pairs]
    labels = ["correct" if b else "incorrect" for _, b in pairs]
    t, f1 = gmm.best_threshold(scores, labels)
    bt, bf1 = brute_force_f1(scores, labels)
    assert f1 == float(bf1)
    assert t == bt


def _k1_model(d=3):
    return gmm.GmmModel(np.ones(1), np.zeros((1, d)), np.eye(d)[None])


def test_classify_boundaries():
    s = MotionSequence(np.zeros((2, 1, 2)), [0, 1], chain_graph(1, 2))
    m = gmm.GmmModel(np.ones(1), np.array([[0.5, 0, 0]]), np.eye(3)[None])
    sc = gmm.score(m, s)
    assert gmm.classify(gmm.GmmClassifier(m, -np.inf), s) == "correct"
    assert gmm.classify(gmm.GmmClassifier(m, np.inf), s) == "incorrect"
    assert gmm.classify(gmm.GmmClassifier(m, sc), s) == "correct"
    with pytest.raises(ConfigurationError):
        gmm.GmmClassifier(m, float("nan"))


def test_score_at_mean():
    m = gmm.GmmModel(np.ones(1), np.array([[0.5, 1.0, 2.0]]), np.diag([1.0, 2.0, 3.0])[None])
    s = MotionSequence([[[1.0, 2.0]], [[1.0, 2.0]], [[1.0, 2.0]]], [0.5, 0.6, 0.7], chain_graph(1, 2))
    # timestamps differ from the mean, so compare against per-frame densities
    ref = np.mean([gmm.gaussian_log_density([t, 1, 2], m.means[0], m.covariances[0]) for t in s.timestamps])
    assert gmm.score(m, s) == pytest.approx(ref, abs=1e-12)
    s2 = MotionSequence([[[1.0, 2.0]], [[1.0, 2.0]]], [0.5, 0.5 + 1e-12], chain_graph(1, 2))
    mode = gmm.gaussian_log_density(m.means[0], m.means[0], m.covariances[0])
    assert gmm.score(m, s2) == pytest.approx(mode, abs=1e-9)


def test_score_dimension_mismatch(small_dataset):
    with pytest.raises(SchemaError):
        gmm.score(_k1_model(2), small_dataset[0])


def test_translation_leaves_decisions(small_dataset):
    pre = PreprocessConfig(target_length=16, center_on_root=False)
    def shifted(s, off):
        return MotionSequence(s.frames + off, s.timestamps, s.graph, s.exercise_id, s.subject_id, s.label)
    labels = None
    for off in (0.0, 3.7):
        seqs = [preprocess(shifted(s, off), pre) for s in small_dataset]
        train = [s for s in seqs[:8]]
        val = [(s, s.label) for s in seqs[8:10] + seqs[12:16]]
        clf = gmm.calibrate_threshold(gmm.fit(train, gmm.GmmFitConfig(K=2)), val)
        pred = [gmm.classify(clf, s) for s in seqs]
        labels = pred if labels is None else labels
        assert pred == labels


def test_persistence_roundtrip(tmp_path, small_dataset):
    correct = [s for s in small_dataset if s.label == "correct"][:6]
    model = gmm.fit(correct, gmm.GmmFitConfig(K=2))
    clf = gmm.calibrate_threshold(model, [(s, s.label) for s in small_dataset[6:18]])
    gmm.save_model(clf, tmp_path / "m.json")
    back = gmm.load_model(tmp_path / "m.json")
    assert back.threshold == clf.threshold
    for s in small_dataset:
        assert gmm.score(back.model, s) == pytest.approx(gmm.score(model, s), abs=1e-12)
    gmm.save_model(model, tmp_path / "raw.json")
    assert isinstance(gmm.load_model(tmp_path / "raw.json"), gmm.GmmModel)


def test_synthetic_separability_k4():
    from rehab_assess.synthetic import SyntheticSpec, generate_dataset

    seqs = [preprocess(s, PreprocessConfig(target_length=32)) for s in generate_dataset(SyntheticSpec(), 50, 50)]
    train = seqs[:30]
    val = seqs[30:50] + seqs[50:70]
    model = gmm.fit(train, gmm.GmmFitConfig(K=4))
    _, f1 = gmm.best_threshold([gmm.score(model, s) for s in val], [s.label for s in val])
    assert f1 >= 0.9
