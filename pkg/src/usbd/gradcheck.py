"""Registry of gradient oracles: every differentiable loss checked against
central finite differences on small fixed instances.

Each entry returns its max relative error; `run_all` compares against the
per-entry tolerance. The GW envelope check runs at a loose tolerance because
finite differences of the full solver also move the coupling.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import gnn, gw
from .distill import (
    DistillConfig,
    SyntheticBasis,
    init_basis,
    lift_basis,
    realize_adjacency_expr,
    realized_prototypes,
    sem_loss_expr,
    span_loss_expr,
)
from .errors import ConfigError
from .graphs import Graph

DEFAULT_TOL = 1e-4
GW_TOL = 5e-2


def _toy_graph(seed: int, n: int = 5, d: int = 3, label: int = 0) -> Graph:
    rng = np.random.default_rng(seed)
    a = rng.random((n, n))
    a = np.triu((a < 0.6).astype(np.float64), 1)
    a = a + a.T
    return Graph(a, rng.normal(size=(n, d)), label)


def _toy_basis(k: int = 3, n_proto: int = 4, d: int = 3, classes: int = 2,
               seed: int = 11) -> SyntheticBasis:
    return init_basis(k, n_proto, d, classes, e_max=1.2, seed=seed)


def _check_sigmoid() -> float:
    rng = np.random.default_rng(5)
    return ad.grad_check(lambda p: ad.tsum(ad.sigmoid(p)), rng.normal(size=(4, 4)), h=1e-6)


def _check_cross_entropy() -> float:
    """CE of the GNN forward w.r.t. one weight matrix, everything else fixed."""
    g = _toy_graph(3, label=1)
    params = gnn.init_params(3, 6, 2, 2, seed=9)

    def f(w1):
        tape = w1.tape
        lifted = gnn.lift_params(tape, params, trainable=False)
        lifted.layers[0][0] = w1
        logits = gnn.forward(lifted, tape.const(g.adjacency), tape.const(g.features))
        return gnn.cross_entropy(logits, 1)

    return ad.grad_check(f, params.layers[0].w1, h=1e-5)


def _check_span() -> float:
    basis = _toy_basis()

    def f(z0):
        tape = z0.tape
        lifted = lift_basis(tape, basis)
        lifted.logits[0] = z0
        lifted.realized[0] = realize_adjacency_expr(z0)
        return span_loss_expr(lifted)

    return ad.grad_check(f, basis.adj_logits[0], h=1e-5)


def _check_span_features() -> float:
    basis = _toy_basis()

    def f(x0):
        tape = x0.tape
        lifted = lift_basis(tape, basis)
        lifted.features[0] = x0
        return span_loss_expr(lifted)

    return ad.grad_check(f, basis.features[0], h=1e-5)


def _sem_checker(meta_mode: str, steps: int = 3):
    # first_order drops the indirect theta-trajectory terms, so its gradient
    # only equals the true derivative of the evaluated loss at horizon 1;
    # longer horizons are covered by the unrolled check and the
    # mode-distinctness test.
    basis = _toy_basis(k=3, n_proto=4, d=3)
    batch = [_toy_graph(21, label=0), _toy_graph(22, label=1)]
    cfg = DistillConfig(
        inner=gnn.TrainConfig(learning_rate=0.05, steps=steps, optimizer="sgd"),
        meta_mode=meta_mode, proxy_hidden=5, proxy_layers=2)
    theta0 = gnn.init_params(3, cfg.proxy_hidden, cfg.proxy_layers, 2, seed=cfg.inner.seed)

    def check() -> float:
        def f(x0):
            tape = x0.tape
            lifted = lift_basis(tape, basis)
            lifted.features[0] = x0
            return sem_loss_expr(lifted, batch, theta0, cfg)

        return ad.grad_check(f, basis.features[0], h=1e-5)

    return check


def _check_weighted_proxy() -> float:
    basis = _toy_basis()
    protos = realized_prototypes(basis)
    weights = np.array([0.5, 0.3, 0.2])
    params = gnn.init_params(3, 6, 2, 2, seed=4)

    def f(w):
        tape = w.tape
        lifted = gnn.lift_params(tape, params, trainable=False)
        lifted.cls_w = w
        data = [(g.adjacency, g.features) for g in protos]
        return gnn.weighted_loss(lifted, data, [g.label for g in protos], weights)

    return ad.grad_check(f, params.cls_w, h=1e-5)


def _check_gw_envelope() -> float:
    """Envelope gradient vs finite differences of the full solver, over the
    upper-triangle coordinates (perturbations must stay symmetric)."""
    rng = np.random.default_rng(17)
    n = 3
    a = rng.random((n, n))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 0.0)
    b = rng.random((n, n))
    b = (b + b.T) / 2
    np.fill_diagonal(b, 0.0)
    cfg = gw.GwConfig(epsilon=0.02, outer_iters=200, sinkhorn_iters=200, tol=1e-12)

    _, coupling = gw.entropic_gw(a, b, cfg)
    tape = ad.Tape()
    a_t = tape.param(a)
    cost = gw.pair_cost_expr(a_t, tape.const(b), coupling)
    analytic = ad.grad(cost, [a_t])[0].value

    h = 1e-5
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = h
            plus, _ = gw.entropic_gw(a + e, b, cfg)
            minus, _ = gw.entropic_gw(a - e, b, cfg)
            numeric = (plus - minus) / (2 * h)
            exact = analytic[i, j] + analytic[j, i]
            worst = max(worst, abs(exact - numeric) / max(1.0, abs(numeric)))
    return worst


REGISTRY: list[tuple[str, object, float]] = [
    ("sigmoid", _check_sigmoid, DEFAULT_TOL),
    ("cross_entropy_gnn", _check_cross_entropy, DEFAULT_TOL),
    ("span_adjacency", _check_span, DEFAULT_TOL),
    ("span_features", _check_span_features, DEFAULT_TOL),
    ("sem_unrolled", _sem_checker("unrolled", steps=3), DEFAULT_TOL),
    ("sem_first_order", _sem_checker("first_order", steps=1), DEFAULT_TOL),
    ("weighted_proxy", _check_weighted_proxy, DEFAULT_TOL),
    ("gw_envelope", _check_gw_envelope, GW_TOL),
]


def run_all(registry=None) -> list[tuple[str, float, float, bool]]:
    """Run every oracle; rows are (name, max_rel_err, tolerance, passed)."""
    registry = REGISTRY if registry is None else registry
    if not registry:
        raise ConfigError("gradient oracle registry is empty")
    rows = []
    for name, fn, tol in registry:
        err = float(fn())
        rows.append((name, err, tol, err <= tol))
    return rows
