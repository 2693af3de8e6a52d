"""GIN-style proxy model: forward contract, CE, training, serialization."""

import numpy as np
import pytest

from usbd import autodiff as ad
from usbd import gnn
from usbd.errors import AllZeroWeights, ConfigError, LabelOutOfRange
from usbd.graphs import Graph


def toy_graph(seed, n=5, d=4, label=0):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n))
    a = np.triu((a < 0.5).astype(np.float64), 1)
    a = a + a.T
    return Graph(a, rng.normal(size=(n, d)), label)


def separable_set(n_graphs=12, d=3, margin=2.0, seed=0):
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(n_graphs):
        n = int(rng.integers(4, 8))
        a = rng.random((n, n))
        a = np.triu((a < 0.4).astype(np.float64), 1)
        a = a + a.T
        y = i % 2
        shift = margin if y else -margin
        x = rng.normal(size=(n, d)) * 0.3
        x[:, 0] += shift
        graphs.append(Graph(a, x, y))
    return graphs


class TestInit:
    def test_deterministic_in_seed(self):
        p1 = gnn.init_params(4, 8, 3, 2, seed=7)
        p2 = gnn.init_params(4, 8, 3, 2, seed=7)
        assert all(np.array_equal(a, b) for a, b in zip(p1.arrays(), p2.arrays()))

    def test_biases_zero_eps_zero(self):
        p = gnn.init_params(4, 8, 3, 2, seed=1)
        for layer in p.layers:
            assert np.all(layer.b1 == 0) and np.all(layer.b2 == 0)
            assert np.all(layer.eps == 0)
        assert np.all(p.cls_b == 0)

    def test_weight_range_scales_with_fan_in(self):
        p = gnn.init_params(100, 8, 1, 2, seed=2)
        assert np.max(np.abs(p.layers[0].w1)) <= 1 / np.sqrt(100)


class TestForward:
    def test_logits_shape(self):
        p = gnn.init_params(4, 8, 2, 3, seed=0)
        g = toy_graph(5)
        assert gnn.forward_numpy(p, g.adjacency, g.features).shape == (1, 3)

    def test_zero_graph_gives_classifier_bias(self):
        p = gnn.init_params(3, 6, 2, 4, seed=3)
        logits = gnn.forward_numpy(p, np.zeros((5, 5)), np.zeros((5, 3)))
        assert np.array_equal(logits, p.cls_b)

    def test_permutation_equivariance(self):
        p = gnn.init_params(4, 8, 3, 2, seed=4)
        g = toy_graph(9, n=7)
        perm = np.random.default_rng(1).permutation(7)
        base = gnn.forward_numpy(p, g.adjacency, g.features)
        permuted = gnn.forward_numpy(p, g.adjacency[np.ix_(perm, perm)], g.features[perm])
        assert np.max(np.abs(base - permuted)) <= 1e-8

    def test_param_gradients_match_finite_differences(self):
        g = toy_graph(11, n=5, d=3, label=1)
        params = gnn.init_params(3, 5, 2, 2, seed=5)
        checked = {"w1": params.layers[0].w1, "b1": params.layers[0].b1,
                   "eps": params.layers[1].eps, "cls_w": params.cls_w}
        for name, x0 in checked.items():
            def f(p):
                tape = p.tape
                lifted = gnn.lift_params(tape, params, trainable=False)
                if name == "w1":
                    lifted.layers[0][0] = p
                elif name == "b1":
                    lifted.layers[0][1] = p
                elif name == "eps":
                    lifted.layers[1][4] = p
                else:
                    lifted.cls_w = p
                logits = gnn.forward(lifted, tape.const(g.adjacency), tape.const(g.features))
                return gnn.cross_entropy(logits, 1)

            assert ad.grad_check(f, x0, h=1e-5) <= 1e-4, name


class TestCrossEntropy:
    def test_two_equal_logits(self):
        tape = ad.Tape()
        assert gnn.cross_entropy(tape.const([[0.0, 0.0]]), 0).item() == pytest.approx(np.log(2))

    def test_large_logit_no_overflow(self):
        tape = ad.Tape()
        v = gnn.cross_entropy(tape.const([[1000.0, 0.0]]), 0).item()
        assert np.isfinite(v) and abs(v) <= 1e-12

    def test_three_equal_logits(self):
        tape = ad.Tape()
        assert gnn.cross_entropy(tape.const([[0.0, 0.0, 0.0]]), 2).item() == pytest.approx(np.log(3))

    def test_label_out_of_range(self):
        tape = ad.Tape()
        with pytest.raises(LabelOutOfRange):
            gnn.cross_entropy(tape.const([[0.0, 0.0]]), 2)


class TestTrain:
    def test_separable_reaches_full_accuracy(self):
        graphs = separable_set()
        params = gnn.init_params(3, 8, 2, 2, seed=0)
        cfg = gnn.TrainConfig(learning_rate=0.01, steps=200, optimizer="adam")
        trained = gnn.train(params, graphs, cfg)
        preds = [int(np.argmax(gnn.forward_numpy(trained, g.adjacency, g.features)))
                 for g in graphs]
        assert np.mean([p == g.label for p, g in zip(preds, graphs)]) == 1.0

    def test_weight_scale_lr_equivalence_for_sgd(self):
        graphs = separable_set(n_graphs=6)
        params = gnn.init_params(3, 6, 2, 2, seed=1)
        a = gnn.train(params, graphs, gnn.TrainConfig(learning_rate=0.1, steps=5, optimizer="sgd"),
                      weights=np.full(6, 1.0))
        b = gnn.train(params, graphs, gnn.TrainConfig(learning_rate=0.05, steps=5, optimizer="sgd"),
                      weights=np.full(6, 2.0))
        for x, y in zip(a.arrays(), b.arrays()):
            assert np.allclose(x, y, atol=1e-12)

    def test_zero_steps_rejected(self):
        with pytest.raises(ConfigError):
            gnn.TrainConfig(steps=0)

    def test_all_zero_weights_rejected(self):
        graphs = separable_set(n_graphs=4)
        params = gnn.init_params(3, 6, 2, 2, seed=2)
        with pytest.raises(AllZeroWeights):
            gnn.train(params, graphs, gnn.TrainConfig(), weights=np.zeros(4))

    def test_loss_non_increasing_small_lr(self):
        graphs = separable_set(n_graphs=8)
        params = gnn.init_params(3, 6, 2, 2, seed=3)
        losses = []
        current = params
        for _ in range(10):
            tape = ad.Tape()
            lifted = gnn.lift_params(tape, current, trainable=False)
            data = [(g.adjacency, g.features) for g in graphs]
            w = np.full(len(graphs), 1.0 / len(graphs))
            losses.append(gnn.weighted_loss(lifted, data, [g.label for g in graphs], w).item())
            current = gnn.train(current, graphs,
                                gnn.TrainConfig(learning_rate=1e-3, steps=1, optimizer="sgd"))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        graphs = separable_set(n_graphs=6)
        params = gnn.init_params(3, 6, 2, 2, seed=4)
        cfg = gnn.TrainConfig(learning_rate=0.01, steps=20, optimizer="adam")
        a = gnn.train(params, graphs, cfg)
        b = gnn.train(params, graphs, cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


class TestCheckpoint:
    def test_json_roundtrip_bit_exact(self, tmp_path):
        params = gnn.init_params(4, 8, 3, 2, seed=9)
        path = tmp_path / "params.json"
        gnn.save_params(params, path)
        again = gnn.load_params(path)
        assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), again.arrays()))
        assert (again.d_in, again.d_hidden, again.n_classes) == (4, 8, 2)
