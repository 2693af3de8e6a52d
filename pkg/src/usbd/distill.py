"""Stage 1: bi-level distillation of the universal structural basis.

The basis is a set of K learnable prototype graphs (adjacency logits plus
features, labels fixed round-robin) whose realized Dirichlet energies are
pulled onto a uniform anchor grid over [0, e_max]. The outer objective adds a
semantic term (proxy trained on the basis, evaluated on real source graphs,
differentiated through the inner loop) and a GW diversity term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gnn
from .errors import (
    ConfigError,
    CorruptField,
    KTooSmall,
    SchemaVersionMismatch,
    ZeroFeatures,
)
from .graphs import DEGREE_EPS, Domain, Graph
from .gw import GwConfig, div_loss

BASIS_SCHEMA_VERSION = 1


def make_anchors(k: int, e_max: float) -> list[float]:
    """Evenly spaced energy anchors mu_k = e_max * (k-1)/(K-1)."""
    if k < 2:
        raise KTooSmall(f"need at least 2 anchors, got k={k}")
    if not e_max > 0:
        raise ConfigError(f"e_max must be positive, got {e_max}")
    return [e_max * i / (k - 1) for i in range(k)]


def anchor_spacing(k: int, e_max: float) -> float:
    if k < 2:
        raise KTooSmall(f"need at least 2 anchors, got k={k}")
    return e_max / (k - 1)


@dataclass
class SyntheticBasis:
    """K prototype graphs as learnable tensors plus their spectral anchors."""

    adj_logits: list[np.ndarray]
    features: list[np.ndarray]
    labels: list[int]
    anchors: list[float]
    e_max: float

    @property
    def k(self) -> int:
        return len(self.adj_logits)

    @property
    def n_proto(self) -> int:
        return self.adj_logits[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features[0].shape[1]

    def validate(self):
        if self.k < 2:
            raise KTooSmall(f"basis needs K >= 2, got {self.k}")
        if not (len(self.features) == len(self.labels) == len(self.anchors) == self.k):
            raise CorruptField("basis field lengths disagree")
        expected = make_anchors(self.k, self.e_max)
        if max(abs(a - b) for a, b in zip(self.anchors, expected)) > 1e-12:
            raise CorruptField("anchors do not form the uniform grid over [0, e_max]")
        n = self.n_proto
        for i, (z, x) in enumerate(zip(self.adj_logits, self.features)):
            if z.shape != (n, n):
                raise CorruptField(f"prototype {i}: logits shape {z.shape}")
            if x.shape[0] != n:
                raise CorruptField(f"prototype {i}: features rows {x.shape[0]} != {n}")
        classes = set(self.labels)
        c = max(self.labels) + 1
        if self.k >= c and classes != set(range(c)):
            raise CorruptField("some class missing from prototype labels")

    def copy(self) -> "SyntheticBasis":
        return SyntheticBasis([z.copy() for z in self.adj_logits],
                              [x.copy() for x in self.features],
                              list(self.labels), list(self.anchors), self.e_max)


def init_basis(k: int, n_proto: int, feature_dim: int, num_classes: int,
               e_max: float, seed: int = 0) -> SyntheticBasis:
    """Random start: logits near 0 (edge prob ~ 0.5), small Gaussian features,
    labels assigned round-robin so every class is represented."""
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    logits, feats = [], []
    for _ in range(k):
        z = rng.normal(0.0, 0.1, size=(n_proto, n_proto))
        z = (z + z.T) / 2.0
        np.fill_diagonal(z, 0.0)
        logits.append(z)
        feats.append(rng.normal(0.0, 0.5, size=(n_proto, feature_dim)))
    labels = [i % num_classes for i in range(k)]
    basis = SyntheticBasis(logits, feats, labels, make_anchors(k, e_max), e_max)
    basis.validate()
    return basis


@dataclass
class DistillConfig:
    lambda1: float = 0.9
    lambda2: float = 0.5
    outer_iters: int = 20
    inner: gnn.TrainConfig = field(default_factory=lambda: gnn.TrainConfig(
        learning_rate=1e-3, steps=20, optimizer="sgd"))
    outer_lr: float = 1e-3
    source_batch: int = 64
    meta_mode: str = "unrolled"
    no_sem: bool = False
    proxy_hidden: int = 32
    proxy_layers: int = 3
    gw: GwConfig = field(default_factory=GwConfig)
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be nonnegative")
        if self.outer_iters < 1:
            raise ConfigError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if not self.outer_lr > 0:
            raise ConfigError(f"outer_lr must be positive, got {self.outer_lr}")
        if self.meta_mode not in ("unrolled", "first_order"):
            raise ConfigError(f"meta_mode must be unrolled or first_order, got {self.meta_mode!r}")
        if self.source_batch < 1:
            raise ConfigError("source_batch must be >= 1")


# --- differentiable realization -------------------------------------------------

def realize_adjacency_np(logits: np.ndarray) -> np.ndarray:
    z = (logits + logits.T) / 2.0
    a = 1.0 / (1.0 + np.exp(-z))
    a = a * (1.0 - np.eye(z.shape[0]))
    return a


def realize_adjacency_expr(z: ad.Tensor) -> ad.Tensor:
    tape = z.tape
    sym = ad.scale(ad.add(z, ad.transpose(z)), 0.5)
    mask = tape.const(1.0 - np.eye(z.rows))
    return ad.mul(ad.sigmoid(sym), mask)


def energy_expr(adj: ad.Tensor, feat: ad.Tensor, eps: float = DEGREE_EPS) -> ad.Tensor:
    """Differentiable normalized Dirichlet energy Tr(X^T L X) / ||X||_F^2."""
    tape = adj.tape
    n = adj.rows
    ones_col = tape.const(np.ones((n, 1)))
    deg = ad.clamp_min(ad.matmul(adj, ones_col), eps)
    d_inv_sqrt = ad.powf(deg, -0.5)
    s = ad.mul(ad.matmul(d_inv_sqrt, ad.transpose(d_inv_sqrt)), adj)
    lap = ad.sub(tape.const(np.eye(n)), s)
    num = ad.trace(ad.matmul(ad.transpose(feat), ad.matmul(lap, feat)))
    den = ad.frobenius_norm_sq(feat)
    return ad.div(num, den)


@dataclass
class LiftedBasis:
    logits: list[ad.Tensor]
    features: list[ad.Tensor]
    realized: list[ad.Tensor]
    labels: list[int]
    anchors: list[float]


def lift_basis(tape: ad.Tape, basis: SyntheticBasis) -> LiftedBasis:
    logits = [tape.param(z) for z in basis.adj_logits]
    feats = [tape.param(x) for x in basis.features]
    realized = [realize_adjacency_expr(z) for z in logits]
    return LiftedBasis(logits, feats, realized, list(basis.labels), list(basis.anchors))


def _check_feature_norms(basis: SyntheticBasis):
    for i, x in enumerate(basis.features):
        if float(np.sum(x * x)) < 1e-30:
            raise ZeroFeatures(f"prototype {i} has zero feature norm")


def span_loss_expr(lifted: LiftedBasis, eps: float = DEGREE_EPS) -> ad.Tensor:
    tape = lifted.logits[0].tape
    total = tape.const(np.zeros((1, 1)))
    for adj, feat, mu in zip(lifted.realized, lifted.features, lifted.anchors):
        diff = ad.sub(energy_expr(adj, feat, eps), tape.const(np.array([[mu]])))
        total = ad.add(total, ad.mul(diff, diff))
    return total


def span_loss(basis: SyntheticBasis) -> ad.Tensor:
    """Sum_k (E(G_k) - mu_k)^2 on a fresh tape."""
    _check_feature_norms(basis)
    tape = ad.Tape()
    return span_loss_expr(lift_basis(tape, basis))


def _proxy_params(basis_dim: int, num_classes: int, cfg: DistillConfig) -> gnn.GnnParams:
    return gnn.init_params(basis_dim, cfg.proxy_hidden, cfg.proxy_layers,
                           num_classes, seed=cfg.inner.seed)


def sem_loss_expr(lifted: LiftedBasis, source_batch: list[Graph],
                  theta0: gnn.GnnParams, cfg: DistillConfig) -> ad.Tensor:
    tape = lifted.logits[0].tape
    theta = gnn.lift_params(tape, theta0, trainable=False)
    protos = list(zip(lifted.realized, lifted.features))
    theta_star = gnn.train_unrolled(tape, theta, protos, lifted.labels, cfg.inner,
                                    first_order=(cfg.meta_mode == "first_order"))
    total = tape.const(np.zeros((1, 1)))
    for g in source_batch:
        logits = gnn.forward(theta_star, tape.const(g.adjacency), tape.const(g.features))
        total = ad.add(total, gnn.cross_entropy(logits, g.label))
    return ad.scale(total, 1.0 / len(source_batch))


def sem_loss(basis: SyntheticBasis, source_batch: list[Graph], cfg: DistillConfig,
             num_classes: int | None = None) -> ad.Tensor:
    """Mean CE of the inner-trained proxy on real source graphs; the returned
    tensor back-propagates into the basis per cfg.meta_mode."""
    if not source_batch:
        raise ConfigError("source batch is empty")
    _check_feature_norms(basis)
    c = num_classes or (max(g.label for g in source_batch) + 1)
    tape = ad.Tape()
    lifted = lift_basis(tape, basis)
    theta0 = _proxy_params(basis.feature_dim, c, cfg)
    return sem_loss_expr(lifted, source_batch, theta0, cfg)


# --- the outer loop -------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    l_sem: float
    l_span: float
    l_div: float
    l_meta: float
    epsilon_resid: float


def _sample_batch(source: Domain, cfg: DistillConfig, iteration: int) -> list[Graph]:
    n = len(source.graphs)
    size = min(cfg.source_batch, n)
    rng = np.random.default_rng([cfg.seed, 7919, iteration])
    idx = rng.choice(n, size=size, replace=False)
    return [source.graphs[i] for i in sorted(idx)]


def distill(source: Domain, cfg: DistillConfig,
            basis_init: SyntheticBasis) -> tuple[SyntheticBasis, list[TraceRow]]:
    """Run the outer loop: inner-train the proxy, assemble the meta loss,
    step the basis by plain gradient descent, and re-project the logits."""
    if source.num_classes < 1:
        raise ConfigError("distillation needs a labeled source domain")
    source.validate()
    basis_init.validate()
    if basis_init.feature_dim != source.feature_dim:
        raise ConfigError(
            f"basis feature dim {basis_init.feature_dim} != source dim {source.feature_dim}")

    basis = basis_init.copy()
    theta0 = _proxy_params(basis.feature_dim, source.num_classes, cfg)
    trace: list[TraceRow] = []

    for it in range(cfg.outer_iters):
        _check_feature_norms(basis)
        tape = ad.Tape()
        lifted = lift_basis(tape, basis)

        if cfg.no_sem:
            l_sem = tape.const(np.zeros((1, 1)))
        else:
            batch = _sample_batch(source, cfg, it)
            l_sem = sem_loss_expr(lifted, batch, theta0, cfg)
        l_span = span_loss_expr(lifted)
        if cfg.lambda2 > 0:
            l_div = div_loss(lifted.realized, cfg.gw)
        else:
            l_div = tape.const(np.zeros((1, 1)))
        l_meta = ad.add(ad.add(l_sem, ad.scale(l_span, cfg.lambda1)),
                        ad.scale(l_div, cfg.lambda2))

        params = lifted.logits + lifted.features
        grads = ad.grad(l_meta, params)
        k = basis.k
        for i in range(k):
            z = basis.adj_logits[i] - cfg.outer_lr * grads[i].value
            z = (z + z.T) / 2.0
            np.fill_diagonal(z, 0.0)
            basis.adj_logits[i] = z
            basis.features[i] = basis.features[i] - cfg.outer_lr * grads[k + i].value

        eps_resid, _ = covering_residual(basis)
        trace.append(TraceRow(it, l_sem.item(), l_span.item(), l_div.item(),
                              l_meta.item(), eps_resid))
    return basis, trace


def realized_prototypes(basis: SyntheticBasis) -> list[Graph]:
    """The basis as ordinary labeled graphs with continuous adjacency."""
    return [Graph(realize_adjacency_np(z), x.copy(), y)
            for z, x, y in zip(basis.adj_logits, basis.features, basis.labels)]


def prototype_energies(basis: SyntheticBasis, eps: float = DEGREE_EPS) -> list[float]:
    from .graphs import dirichlet_energy
    return [dirichlet_energy(g, eps) for g in realized_prototypes(basis)]


def covering_residual(basis: SyntheticBasis) -> tuple[float, list[float]]:
    """max_k |E(G_k) - mu_k| plus the per-prototype energies; the certified
    covering radius is anchor_spacing/2 + residual."""
    energies = prototype_energies(basis)
    resid = max(abs(e - mu) for e, mu in zip(energies, basis.anchors))
    return float(resid), energies


# --- persistence -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def basis_to_json(basis: SyntheticBasis) -> str:
    basis.validate()
    doc = {
        "schema_version": BASIS_SCHEMA_VERSION,
        "k": basis.k,
        "n_proto": basis.n_proto,
        "feature_dim": basis.feature_dim,
        "e_max": _fmt(basis.e_max),
        "labels": basis.labels,
        "anchors": [_fmt(a) for a in basis.anchors],
        "prototypes": [
            {"adj_logits": [_fmt(v) for v in z.reshape(-1)],
             "features": [_fmt(v) for v in x.reshape(-1)]}
            for z, x in zip(basis.adj_logits, basis.features)
        ],
    }
    return json.dumps(doc, indent=1)


def basis_from_json(text: str) -> SyntheticBasis:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptField(f"not valid JSON: {exc}") from exc
    if doc.get("schema_version") != BASIS_SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"expected schema {BASIS_SCHEMA_VERSION}, got {doc.get('schema_version')}")
    try:
        k = int(doc["k"])
        n = int(doc["n_proto"])
        d = int(doc["feature_dim"])
        e_max = float(doc["e_max"])
        labels = [int(v) for v in doc["labels"]]
        anchors = [float(v) for v in doc["anchors"]]
        protos = doc["prototypes"]
        if k < 2:
            raise CorruptField(f"k must be >= 2, got {k}")
        if len(protos) != k or len(labels) != k or len(anchors) != k:
            raise CorruptField("prototype/label/anchor counts disagree with k")
        logits, feats = [], []
        for i, p in enumerate(protos):
            z = np.asarray([float(v) for v in p["adj_logits"]])
            x = np.asarray([float(v) for v in p["features"]])
            if z.size != n * n:
                raise CorruptField(f"prototype {i}: expected {n * n} logits, got {z.size}")
            if x.size != n * d:
                raise CorruptField(f"prototype {i}: expected {n * d} features, got {x.size}")
            logits.append(z.reshape(n, n))
            feats.append(x.reshape(n, d))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptField(f"malformed basis file: {exc}") from exc
    basis = SyntheticBasis(logits, feats, labels, anchors, e_max)
    try:
        basis.validate()
    except KTooSmall as exc:
        raise CorruptField(str(exc)) from exc
    return basis


def save_basis(basis: SyntheticBasis, path) -> None:
    Path(path).write_text(basis_to_json(basis))


def load_basis(path) -> SyntheticBasis:
    return basis_from_json(Path(path).read_text())
