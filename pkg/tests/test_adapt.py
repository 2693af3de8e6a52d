"""Stage 2: fingerprinting, kernel weights, adaptation, prediction."""

import numpy as np
import pytest

from usbd.adapt import (
    AdaptConfig,
    SpectralFingerprint,
    adapt,
    basis_weights,
    covering_discrepancy,
    fingerprint,
    predict,
)
from usbd.datagen import ShiftSpec, gen_shift_pair
from usbd.distill import anchor_spacing, covering_residual, init_basis
from usbd.errors import AllGraphsDegenerate, ConfigError, FeatureDimMismatch
from usbd.gnn import TrainConfig, init_params
from usbd.graphs import Domain, Graph

from test_distill import exact_basis, exact_energy_features

EDGE = np.array([[0.0, 1.0], [1.0, 0.0]])


def graph_with_energy(mu: float, label=None) -> Graph:
    return Graph(EDGE, exact_energy_features(mu), label)


class TestFingerprint:
    def test_singleton_mean(self):
        dom = Domain([graph_with_energy(0.7)], 1, 0)
        fp = fingerprint(dom)
        assert fp.value == pytest.approx(0.7, abs=1e-12)
        assert fp.n_graphs == 1 and fp.skipped == 0

    def test_two_graph_mean(self):
        dom = Domain([graph_with_energy(0.2), graph_with_energy(0.4)], 1, 0)
        assert fingerprint(dom).value == pytest.approx(0.3, abs=1e-12)

    def test_degenerate_graphs_skipped(self):
        dom = Domain([graph_with_energy(0.2), Graph(EDGE, np.zeros((2, 1))),
                      graph_with_energy(0.6)], 1, 0)
        fp = fingerprint(dom)
        assert fp.value == pytest.approx(0.4, abs=1e-12)
        assert fp.n_graphs == 2 and fp.skipped == 1

    def test_all_degenerate_raises(self):
        dom = Domain([Graph(EDGE, np.zeros((2, 1)))], 1, 0)
        with pytest.raises(AllGraphsDegenerate):
            fingerprint(dom)


class TestBasisWeights:
    def test_equidistant_is_half_half(self):
        w = basis_weights(0.5, [0.0, 1.0], sigma=0.7)
        assert w.tolist() == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_closed_form_two_anchor_case(self):
        w = basis_weights(0.0, [0.0, 1.0], sigma=1.0)
        assert w[0] == pytest.approx(0.622459, abs=1e-6)
        assert w[1] == pytest.approx(0.377541, abs=1e-6)

    def test_tiny_sigma_nearest_anchor(self):
        w = basis_weights(0.1, [0.0, 1.0], sigma=0.01)
        assert w[0] >= 1 - 1e-12
        assert w[1] <= 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            anchors = np.sort(rng.random(int(rng.integers(1, 9))))
            w = basis_weights(float(rng.random() * 2), anchors, float(rng.random() + 0.05))
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all(w >= 0)

    def test_shift_invariance_of_softmax(self):
        # adding a constant to all squared distances cancels in the softmax;
        # equivalently the weights depend only on anchor offsets
        w1 = basis_weights(0.3, [0.0, 0.5, 1.0], sigma=0.8)
        w2 = basis_weights(0.3 + 2.0, [2.0, 2.5, 3.0], sigma=0.8)
        assert np.max(np.abs(w1 - w2)) <= 1e-12

    def test_monotone_in_distance(self):
        w = basis_weights(0.25, [0.0, 0.2, 0.6, 1.0], sigma=0.5)
        dist = np.abs(0.25 - np.array([0.0, 0.2, 0.6, 1.0]))
        order = np.argsort(dist)
        assert all(w[order[i]] >= w[order[i + 1]] - 1e-15 for i in range(3))

    def test_argmax_is_nearest_anchor(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            anchors = np.linspace(0, 1.2, int(rng.integers(2, 10)))
            e = float(rng.random() * 1.4)
            w = basis_weights(e, anchors, sigma=float(rng.random() + 0.05))
            nearest = np.min(np.abs(anchors - e))
            assert abs(abs(anchors[int(np.argmax(w))] - e) - nearest) <= 1e-12

    def test_sigma_zero_rejected(self):
        with pytest.raises(ConfigError):
            basis_weights(0.5, [0.0, 1.0], sigma=0.0)


class TestAdapt:
    def small_pair(self, seed=0):
        src = ShiftSpec(regime="clustered", n_graphs=16, seed=seed, feature_dim=3)
        tgt = ShiftSpec(regime="chain", n_graphs=16, seed=seed + 500, feature_dim=3)
        return gen_shift_pair(src, tgt)

    def cfg(self, **kw):
        defaults = dict(proxy=TrainConfig(learning_rate=0.02, steps=40, optimizer="adam"),
                        proxy_hidden=8, proxy_layers=2, seed=0)
        defaults.update(kw)
        return AdaptConfig(**defaults)

    def test_labeled_domain_rejected(self):
        source, target, _ = self.small_pair()
        basis = init_basis(3, 6, 3, 2, e_max=1.2, seed=0)
        with pytest.raises(ConfigError):
            adapt(basis, source, self.cfg())

    def test_feature_dim_mismatch(self):
        _, target, _ = self.small_pair()
        basis = init_basis(3, 6, 5, 2, e_max=1.2, seed=0)
        with pytest.raises(FeatureDimMismatch):
            adapt(basis, target, self.cfg())

    def test_uniform_vs_kernel_weights_differ(self):
        _, target, _ = self.small_pair()
        basis = init_basis(6, 6, 3, 2, e_max=1.2, seed=1)
        rng = np.random.default_rng(2)
        for k in range(6):  # make prototypes disagree across the spectrum
            basis.features[k] = rng.normal(size=(6, 3)) * (1 + k)
        full = adapt(basis, target, self.cfg())
        unif = adapt(basis, target, self.cfg(uniform_weights=True))
        assert np.max(np.abs(full.weights - unif.weights)) > 1e-3
        diffs = [np.max(np.abs(a - b)) for a, b in
                 zip(full.phi_star.arrays(), unif.phi_star.arrays())]
        assert max(diffs) > 1e-6

    def test_k1_singleton_softmax(self):
        w = basis_weights(0.9, [0.4], sigma=2.0)
        assert w.tolist() == [1.0]

    def test_adapt_returns_fingerprint_and_weights(self):
        _, target, _ = self.small_pair()
        basis = init_basis(4, 6, 3, 2, e_max=1.2, seed=3)
        res = adapt(basis, target, self.cfg())
        assert isinstance(res.fingerprint, SpectralFingerprint)
        assert len(res.weights) == 4
        assert abs(res.weights.sum() - 1.0) <= 1e-12
        assert res.train_ms >= 0.0


class TestPredict:
    def test_tie_breaks_to_smaller_index(self):
        params = init_params(2, 4, 1, 2, seed=0)
        for layer in params.layers:
            layer.w1[:] = 0
            layer.w2[:] = 0
        params.cls_w[:] = 0
        params.cls_b[:] = 0.3  # both logits equal
        dom = Domain([Graph(EDGE, np.ones((2, 2)))], 2, 0)
        assert predict(params, dom) == [0]

    def test_prediction_permutation_invariant(self):
        params = init_params(3, 6, 2, 2, seed=1)
        rng = np.random.default_rng(4)
        a = rng.random((6, 6))
        a = np.triu((a < 0.5).astype(np.float64), 1)
        a = a + a.T
        x = rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        d1 = Domain([Graph(a, x)], 3, 0)
        d2 = Domain([Graph(a[np.ix_(perm, perm)], x[perm])], 3, 0)
        assert predict(params, d1) == predict(params, d2)

    def test_feature_dim_mismatch(self):
        params = init_params(5, 4, 1, 2, seed=0)
        dom = Domain([Graph(EDGE, np.ones((2, 2)))], 2, 0)
        with pytest.raises(FeatureDimMismatch):
            predict(params, dom)


class TestCoveringDiscrepancy:
    def test_zero_when_targets_sit_on_prototypes(self):
        basis = exact_basis(5)
        target = Domain([graph_with_energy(mu) for mu in basis.anchors], 1, 0)
        assert covering_discrepancy(basis, target) <= 1e-12

    def test_single_gap(self):
        basis = exact_basis(5)  # nearest prototype energy to 0.5 is 0.45
        e = basis.anchors[1] + 0.25  # 0.3 + 0.25 = 0.55; nearest anchor 0.6 -> 0.05
        target = Domain([graph_with_energy(e)], 1, 0)
        expected = min(abs(e - mu) for mu in basis.anchors)
        assert covering_discrepancy(basis, target) == pytest.approx(expected, abs=1e-10)

    def test_bounded_by_certified_radius(self):
        basis = exact_basis(8)
        rng = np.random.default_rng(5)
        target = Domain([graph_with_energy(float(rng.random() * 1.2)) for _ in range(30)], 1, 0)
        eps, _ = covering_residual(basis)
        radius = anchor_spacing(basis.k, basis.e_max) / 2 + eps
        assert covering_discrepancy(basis, target) <= radius + 1e-12

    def test_weakly_decreasing_in_k(self):
        rng = np.random.default_rng(6)
        target = Domain([graph_with_energy(float(rng.random() * 1.2)) for _ in range(50)], 1, 0)
        values = [covering_discrepancy(exact_basis(k), target) for k in (5, 10, 20)]
        assert values[0] >= values[1] >= values[2]
