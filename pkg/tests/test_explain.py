import numpy as np
import pytest

from evadelab.explain import (RelevanceVector, attribution_gradient,
                              attribution_gradient_input,
                              attribution_integrated_gradients,
                              relevance_percentages, top_features)
from evadelab.featurespace import SparseBinaryVector
from evadelab.models import KernelModel, LinearModel, score


def vec(indices, d):
    return SparseBinaryVector.from_indices(indices, d)


def random_kernel_model(rng, d, n_sv, gamma):
    svs = tuple(vec(np.flatnonzero(rng.random(d) < 0.5), d) for _ in range(n_sv))
    return KernelModel(svs, rng.normal(size=n_sv), float(rng.normal() * 0.2),
                       gamma)


class TestGradient:
    def test_linear_constant_across_samples(self):
        w = np.array([1.0, -2.0, 3.0])
        m = LinearModel(w, 0.0)
        r1 = attribution_gradient(m, vec([0], 3))
        r2 = attribution_gradient(m, vec([1, 2], 3))
        assert np.array_equal(r1.values, w)
        assert np.array_equal(r1.values, r2.values)

    def test_kernel_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        m = random_kernel_model(rng, 6, 5, 0.6)
        x = vec([0, 3, 5], 6)
        r = attribution_gradient(m, x)
        h = 1e-4
        base = x.to_dense()
        for i in range(6):
            up = base.copy()
            up[i] += h
            dn = base.copy()
            dn[i] -= h
            fd = (m.decision_batch(up[None])[0]
                  - m.decision_batch(dn[None])[0]) / (2 * h)
            assert abs(r.values[i] - fd) / max(abs(fd), 1e-12) < 1e-5


class TestGradientInput:
    def test_masked_product(self):
        m = LinearModel(np.array([1.0, -2.0, 3.0]), 0.0)
        r = attribution_gradient_input(m, vec([0, 1], 3))
        assert np.array_equal(r.values, [1.0, -2.0, 0.0])

    def test_empty_sample_all_zero(self):
        m = LinearModel(np.array([1.0, -2.0, 3.0]), 0.0)
        r = attribution_gradient_input(m, vec([], 3))
        assert np.array_equal(r.values, np.zeros(3))

    def test_support_containment_on_kernel(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            m = random_kernel_model(rng, 8, 4, 0.5)
            x = vec(np.flatnonzero(rng.random(8) < 0.4), 8)
            r = attribution_gradient_input(m, x)
            absent = [i for i in range(8) if i not in x.indices]
            assert np.all(r.values[absent] == 0.0)


class TestIntegratedGradients:
    def test_linear_equals_gradient_input(self):
        rng = np.random.default_rng(5)
        for p in (1, 10, 100):
            m = LinearModel(rng.normal(size=12), float(rng.normal()))
            x = vec(np.flatnonzero(rng.random(12) < 0.5), 12)
            gi = attribution_gradient_input(m, x)
            ig = attribution_integrated_gradients(m, x, p=p)
            assert np.max(np.abs(gi.values - ig.values)) < 1e-12

    def test_zero_path(self):
        rng = np.random.default_rng(6)
        m = random_kernel_model(rng, 5, 3, 0.4)
        x = vec([1, 3], 5)
        r = attribution_integrated_gradients(m, x, baseline=x, p=50)
        assert np.array_equal(r.values, np.zeros(5))

    def test_completeness_on_trained_kernel(self):
        # a trained machine keeps f(x) - f(0) away from the cancellation
        # regime where the relative tolerance loses meaning
        from evadelab.featurespace import SyntheticConfig, generate_synthetic
        from evadelab.models import TrainConfig, train_rbf_svm
        cfg = SyntheticConfig(d=10, n_benign=60, n_malware=60, n_strong=3,
                              strong_rate_gap=0.5, weak_rate_gap=0.2,
                              base_density=0.1, seed=23)
        ds = generate_synthetic(cfg)
        m = train_rbf_svm(ds, 10.0, 0.1, TrainConfig(epochs=30, seed=0))
        malware = [s for s, y in zip(ds.samples, ds.labels) if y == 1]
        for x in malware[:5]:
            r = attribution_integrated_gradients(m, x, p=1000)
            f_x = score(m, x)
            f_0 = float(m.decision_batch(np.zeros(10)[None])[0])
            gap = abs(r.values.sum() - (f_x - f_0))
            assert gap <= max(1e-6, 1e-3 * abs(f_x - f_0))

    def test_cauchy_refinement(self):
        # halving the step keeps shrinking the change between refinements
        rng = np.random.default_rng(8)
        m = random_kernel_model(rng, 6, 4, 0.5)
        x = vec([0, 1, 4], 6)
        r = {p: attribution_integrated_gradients(m, x, p=p).values
             for p in (250, 500, 1000, 2000)}
        d1 = np.max(np.abs(r[500] - r[250]))
        d2 = np.max(np.abs(r[1000] - r[500]))
        d3 = np.max(np.abs(r[2000] - r[1000]))
        assert d2 < d1 and d3 < d2

    def test_chunking_is_invisible(self):
        rng = np.random.default_rng(9)
        m = random_kernel_model(rng, 5, 3, 0.3)
        x = vec([1, 2], 5)
        a = attribution_integrated_gradients(m, x, p=300, chunk=7)
        b = attribution_integrated_gradients(m, x, p=300, chunk=300)
        assert np.max(np.abs(a.values - b.values)) < 1e-12

    def test_validation(self):
        m = LinearModel(np.ones(3), 0.0)
        with pytest.raises(ValueError):
            attribution_integrated_gradients(m, vec([0], 3), p=0)
        with pytest.raises(ValueError):
            attribution_integrated_gradients(m, vec([0], 3),
                                             baseline=np.zeros(4))


class TestReporting:
    def test_percentages_sum_to_100_in_magnitude(self):
        r = RelevanceVector(np.array([2.0, -1.0, 1.0]), "gradient")
        pct = relevance_percentages(r)
        assert np.abs(pct).sum() == pytest.approx(100.0)
        assert pct[0] == pytest.approx(50.0)
        assert pct[1] == pytest.approx(-25.0)

    def test_top_features_ordering(self):
        r = RelevanceVector(np.array([0.5, -3.0, 1.0, 0.0]), "gradient")
        top = top_features(r, 2)
        assert [t[0] for t in top] == [1, 2]
        assert top[0][1] == -3.0

    def test_all_zero_percentages(self):
        r = RelevanceVector(np.zeros(4), "gradient_input")
        assert np.array_equal(relevance_percentages(r), np.zeros(4))
