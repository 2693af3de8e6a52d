"""Tape, primitive backward rules, and the finite-difference harness."""

import numpy as np
import pytest

from usbd import autodiff as ad
from usbd.errors import NotScalarLoss, ShapeMismatch
from usbd.graphs import Graph, dirichlet_energy


def rand(seed, shape):
    return np.random.default_rng(seed).normal(size=shape)


class TestShapes:
    def test_matmul_shape(self):
        tape = ad.Tape()
        out = ad.matmul(tape.const(np.ones((2, 3))), tape.const(np.ones((3, 1))))
        assert out.shape == (2, 1)

    def test_matmul_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(ShapeMismatch):
            ad.matmul(tape.const(np.ones((2, 3))), tape.const(np.ones((2, 3))))

    def test_trace_value(self):
        tape = ad.Tape()
        assert ad.trace(tape.const([[1.0, 2.0], [3.0, 4.0]])).item() == 5.0

    def test_frobenius_value(self):
        tape = ad.Tape()
        assert ad.frobenius_norm_sq(tape.const([[1.0, -1.0], [-1.0, 1.0]])).item() == 4.0

    def test_not_scalar_loss(self):
        tape = ad.Tape()
        x = tape.param(np.ones((2, 2)))
        with pytest.raises(NotScalarLoss):
            ad.grad(ad.scale(x, 2.0), [x])


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        tape = ad.Tape()
        x = tape.param(rand(0, (2, 2)))
        g = ad.grad(ad.tsum(x), [x])[0]
        assert np.array_equal(g.value, np.ones((2, 2)))

    def test_frobenius_gradient_is_2x(self):
        tape = ad.Tape()
        v = rand(1, (3, 3))
        x = tape.param(v)
        g = ad.grad(ad.frobenius_norm_sq(x), [x])[0]
        assert np.allclose(g.value, 2 * v, atol=1e-14)

    def test_constant_loss_gradient_exactly_zero(self):
        tape = ad.Tape()
        x = tape.param(rand(2, (2, 3)))
        loss = ad.tsum(tape.const(np.ones((1, 1))))
        g = ad.grad(loss, [x])[0]
        assert np.all(g.value == 0.0)

    def test_backward_covers_params(self):
        tape = ad.Tape()
        x = tape.param(rand(3, (2, 2)))
        y = tape.param(rand(4, (2, 2)))
        loss = ad.tsum(ad.mul(x, y))
        grads = ad.backward(tape, loss)
        assert set(grads) == {x.node, y.node}
        assert np.allclose(grads[x.node].value, y.value)


# One gradcheck per primitive, random inputs up to 8x8.
def _seg_ids(n):
    return [i % 3 for i in range(n)]


PRIMITIVE_CASES = [
    ("matmul", lambda p, t: ad.tsum(ad.matmul(p, t.const(rand(51, (6, 4))))), (5, 6)),
    ("matmul_rhs", lambda p, t: ad.tsum(ad.matmul(t.const(rand(52, (4, 7))), p)), (7, 3)),
    ("transpose", lambda p, t: ad.tsum(ad.mul(ad.transpose(p), t.const(rand(53, (4, 6))))), (6, 4)),
    ("add", lambda p, t: ad.tsum(ad.add(p, t.const(rand(54, (5, 5))))), (5, 5)),
    ("sub", lambda p, t: ad.tsum(ad.sub(t.const(rand(55, (5, 5))), p)), (5, 5)),
    ("mul", lambda p, t: ad.tsum(ad.mul(p, t.const(rand(56, (6, 6))))), (6, 6)),
    ("div", lambda p, t: ad.tsum(ad.div(t.const(rand(57, (4, 4))),
                                        ad.add(ad.mul(p, p), t.const(np.ones((4, 4)))))), (4, 4)),
    ("smul_scalar", lambda p, t: ad.tsum(ad.smul(p, t.const(rand(58, (5, 5))))), (1, 1)),
    ("smul_matrix", lambda p, t: ad.tsum(ad.smul(t.const([[0.7]]), p)), (5, 5)),
    ("scale", lambda p, t: ad.tsum(ad.scale(p, -2.5)), (4, 7)),
    ("add_rowvec", lambda p, t: ad.tsum(ad.relu(ad.add_rowvec(t.const(rand(59, (6, 3))), p))), (1, 3)),
    ("trace", lambda p, t: ad.trace(ad.matmul(p, p)), (5, 5)),
    ("frobenius", lambda p, t: ad.frobenius_norm_sq(p), (6, 6)),
    ("sigmoid", lambda p, t: ad.tsum(ad.sigmoid(p)), (8, 8)),
    ("relu", lambda p, t: ad.tsum(ad.mul(ad.relu(p), t.const(rand(60, (8, 8))))), (8, 8)),
    ("exp", lambda p, t: ad.tsum(ad.texp(ad.scale(p, 0.3))), (5, 5)),
    ("powf", lambda p, t: ad.tsum(ad.powf(ad.add(ad.mul(p, p), t.const(np.full((4, 4), 0.5))), -0.5)), (4, 4)),
    ("clamp_min", lambda p, t: ad.tsum(ad.clamp_min(p, 0.25)), (6, 6)),
    ("log_softmax", lambda p, t: ad.tsum(ad.mul(ad.log_softmax_rows(p), t.const(rand(61, (4, 5))))), (4, 5)),
    ("gather_rows", lambda p, t: ad.tsum(ad.gather_rows(p, [2, 0, 2, 1])), (4, 3)),
    ("segment_sum", lambda p, t: ad.tsum(ad.mul(ad.segment_sum_rows(p, _seg_ids(6), 3),
                                                t.const(rand(62, (3, 4))))), (6, 4)),
    ("mean_rows", lambda p, t: ad.tsum(ad.mul(ad.mean_rows(p), t.const(rand(63, (1, 5))))), (7, 5)),
]


@pytest.mark.parametrize("name,builder,shape", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradcheck(name, builder, shape):
    x0 = rand(hash(name) % 1000, shape)
    if name == "relu":  # keep entries away from the kink
        x0 = x0 + 0.05 * np.sign(x0)
    err = ad.grad_check(lambda p: builder(p, p.tape), x0, h=1e-6)
    assert err <= 1e-4, f"{name}: {err}"


class TestGradCheckHarness:
    def test_sum_of_squares_near_machine_precision(self):
        err = ad.grad_check(lambda p: ad.tsum(ad.mul(p, p)), rand(7, (3, 3)))
        assert err <= 1e-8

    def test_sigmoid_chain(self):
        err = ad.grad_check(lambda p: ad.tsum(ad.sigmoid(p)), rand(8, (3, 3)), h=1e-6)
        assert err <= 1e-6

    def test_constant_function(self):
        tape_out = []

        def f(p):
            return p.tape.const(np.array([[3.14]]))

        err = ad.grad_check(f, rand(9, (2, 2)))
        assert err == 0.0


class TestDirichletGradient:
    def test_energy_ratio_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        n, d = 4, 2
        a = rng.random((n, n))
        a = np.triu((a < 0.7).astype(np.float64), 1)
        a = a + a.T
        lap = np.eye(n) - np.diag(1 / np.sqrt(np.maximum(a.sum(1), 1e-8))) @ a \
            @ np.diag(1 / np.sqrt(np.maximum(a.sum(1), 1e-8)))

        def f(x):
            tape = x.tape
            num = ad.trace(ad.matmul(ad.transpose(x), ad.matmul(tape.const(lap), x)))
            return ad.div(num, ad.frobenius_norm_sq(x))

        x0 = rng.normal(size=(n, d))
        assert ad.grad_check(f, x0, h=1e-5) <= 1e-4
        # and the expression agrees with the plain numpy energy
        tape = ad.Tape()
        x_t = tape.param(x0)
        assert f(x_t).item() == pytest.approx(dirichlet_energy(Graph(a, x0)), abs=1e-12)


class TestUnrolledHypergradient:
    def test_quadratic_inner_loop_matches_analytic(self):
        # theta_{t+1} = theta_t - a * (theta_t - s);   L = 0.5 ||theta_U - c||^2
        # dL/ds = (theta_U - c) (1 - (1-a)^U)
        a, steps = 0.3, 6
        theta0 = np.array([[0.5, -1.0]])
        c = np.array([[2.0, 1.0]])
        s0 = np.array([[1.0, 3.0]])

        tape = ad.Tape()
        s = tape.param(s0)
        theta = tape.const(theta0)
        for _ in range(steps):
            q = ad.scale(ad.frobenius_norm_sq(ad.sub(theta, s)), 0.5)
            g = ad.grad(q, [theta])[0]
            theta = ad.sub(theta, ad.scale(g, a))
        loss = ad.scale(ad.frobenius_norm_sq(ad.sub(theta, tape.const(c))), 0.5)
        hyper = ad.grad(loss, [s])[0].value

        theta_u = s0 + (1 - a) ** steps * (theta0 - s0)
        expected = (theta_u - c) * (1 - (1 - a) ** steps)
        rel = np.max(np.abs(hyper - expected) / np.maximum(1, np.abs(expected)))
        assert rel <= 1e-4

    def test_replay_is_bit_deterministic(self):
        def run():
            tape = ad.Tape()
            x = tape.param(rand(11, (4, 4)))
            y = ad.tsum(ad.sigmoid(ad.matmul(x, ad.transpose(x))))
            return ad.grad(y, [x])[0].value

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)


class TestDetachedTensors:
    def test_detached_values_can_mix_as_constants(self):
        tape = ad.Tape()
        x = tape.param(np.ones((2, 2)))
        d = ad.scale(x, 3.0).detach()
        assert d.tape is None
        y = ad.tsum(ad.mul(x, d))
        g = ad.grad(y, [x])[0]
        assert np.allclose(g.value, 3 * np.ones((2, 2)))
