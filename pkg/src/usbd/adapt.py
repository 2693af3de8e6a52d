"""Stage 2: spectral fingerprinting, kernel-weighted basis activation,
label-free proxy training, and prediction on the target domain.

The only target statistic that ever reaches training is the domain-level mean
Dirichlet energy; the proxy classifier is trained exclusively on the realized
prototypes, so the adaptation cost does not grow with the target size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import gnn
from .distill import SyntheticBasis, realized_prototypes
from .errors import (
    AllGraphsDegenerate,
    ConfigError,
    FeatureDimMismatch,
)
from .graphs import DEGREE_EPS, Domain, ZERO_FEATURE_TOL, dirichlet_energy


@dataclass
class SpectralFingerprint:
    value: float
    n_graphs: int
    skipped: int


@dataclass
class AdaptConfig:
    sigma: float = 1.0
    proxy: gnn.TrainConfig = field(default_factory=lambda: gnn.TrainConfig(steps=20))
    warm_start: bool = False
    uniform_weights: bool = False  # the "w/o AD" ablation
    proxy_hidden: int = 32
    proxy_layers: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


def fingerprint(target: Domain, eps: float = DEGREE_EPS) -> SpectralFingerprint:
    """Mean normalized Dirichlet energy; zero-feature graphs are skipped."""
    if not target.graphs:
        raise AllGraphsDegenerate("target domain is empty")
    total = 0.0
    used = 0
    skipped = 0
    for g in target.graphs:
        if float(np.sum(g.features * g.features)) < ZERO_FEATURE_TOL:
            skipped += 1
            continue
        total += dirichlet_energy(g, eps)
        used += 1
    if used == 0:
        raise AllGraphsDegenerate(f"all {skipped} graphs have zero feature norm")
    return SpectralFingerprint(total / used, used, skipped)


def basis_weights(fp: SpectralFingerprint | float, anchors, sigma: float) -> np.ndarray:
    """Softmax over -(E_T - mu_k)^2 / (2 sigma^2)."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    value = fp.value if isinstance(fp, SpectralFingerprint) else float(fp)
    mu = np.asarray(anchors, dtype=np.float64)
    scores = -((value - mu) ** 2) / (2.0 * sigma * sigma)
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


@dataclass
class AdaptResult:
    phi_star: gnn.GnnParams
    weights: np.ndarray
    fingerprint: SpectralFingerprint
    fingerprint_ms: float
    train_ms: float


def adapt(basis: SyntheticBasis, target: Domain, cfg: AdaptConfig,
          theta_star: gnn.GnnParams | None = None) -> AdaptResult:
    """Kernel-weighted proxy training on the realized prototypes only.

    target must be an unlabeled view; pass Domain.unlabeled() if needed. The
    proxy never sees target labels or target gradients.
    """
    if target.num_classes != 0 or any(g.label is not None for g in target.graphs):
        raise ConfigError("adapt only accepts an unlabeled Domain view")
    if basis.feature_dim != target.feature_dim:
        raise FeatureDimMismatch(
            f"basis feature dim {basis.feature_dim} != target dim {target.feature_dim}")

    t0 = time.perf_counter()
    fp = fingerprint(target)
    t1 = time.perf_counter()

    if cfg.uniform_weights:
        weights = np.full(basis.k, 1.0 / basis.k)
    else:
        weights = basis_weights(fp, basis.anchors, cfg.sigma)

    num_classes = max(basis.labels) + 1
    if cfg.warm_start:
        if theta_star is None:
            raise ConfigError("warm_start requires the distilled proxy parameters")
        phi = theta_star.copy()
    else:
        phi = gnn.init_params(basis.feature_dim, cfg.proxy_hidden, cfg.proxy_layers,
                              num_classes, seed=cfg.seed)

    protos = realized_prototypes(basis)
    t2 = time.perf_counter()
    phi_star = gnn.train(phi, protos, cfg.proxy, weights=weights)
    t3 = time.perf_counter()

    return AdaptResult(phi_star, weights, fp,
                       fingerprint_ms=(t1 - t0) * 1e3,
                       train_ms=(t3 - t2) * 1e3)


def predict(phi_star: gnn.GnnParams, target: Domain) -> list[int]:
    """Argmax class per graph; ties break toward the smaller class index."""
    if target.feature_dim != phi_star.d_in:
        raise FeatureDimMismatch(
            f"target feature dim {target.feature_dim} != model dim {phi_star.d_in}")
    out = []
    for g in target.graphs:
        logits = gnn.forward_numpy(phi_star, g.adjacency, g.features)
        out.append(int(np.argmax(logits[0])))
    return out


def covering_discrepancy(basis: SyntheticBasis, target: Domain,
                         eps: float = DEGREE_EPS) -> float:
    """Mean over target graphs of the minimum energy gap to any prototype."""
    if not target.graphs:
        raise AllGraphsDegenerate("target domain is empty")
    from .distill import prototype_energies
    proto_e = np.asarray(prototype_energies(basis, eps))
    total = 0.0
    used = 0
    for g in target.graphs:
        if float(np.sum(g.features * g.features)) < ZERO_FEATURE_TOL:
            continue
        e = dirichlet_energy(g, eps)
        total += float(np.min(np.abs(proto_e - e)))
        used += 1
    if used == 0:
        raise AllGraphsDegenerate("all target graphs have zero feature norm")
    return total / used
