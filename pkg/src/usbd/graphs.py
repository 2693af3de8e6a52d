"""Graph and domain containers, the normalized Laplacian, and Dirichlet energy.

Adjacencies are dense symmetric float64 matrices with entries in [0, 1] and a
zero diagonal. Dense storage keeps everything differentiable downstream and
costs nothing at prototype scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AsymmetricAdjacency,
    FeatureShapeMismatch,
    NegativeWeight,
    NonzeroDiagonal,
    WeightOutOfRange,
    ZeroFeatures,
)

SYMMETRY_TOL = 1e-12
DEGREE_EPS = 1e-8
ZERO_FEATURE_TOL = 1e-30


@dataclass
class Graph:
    """One classification unit: weighted adjacency, node features, optional label."""

    adjacency: np.ndarray
    features: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Domain:
    """Ordered graph collection sharing a feature space.

    num_classes = 0 marks an unlabeled domain; then no graph may carry a label.
    """

    graphs: list[Graph] = field(default_factory=list)
    feature_dim: int = 1
    num_classes: int = 0

    def __len__(self):
        return len(self.graphs)

    def validate(self):
        for i, g in enumerate(self.graphs):
            validate(g)
            if g.feature_dim != self.feature_dim:
                raise FeatureShapeMismatch(
                    f"graph {i}: feature dim {g.feature_dim} != domain dim {self.feature_dim}")
            if self.num_classes == 0:
                if g.label is not None:
                    raise FeatureShapeMismatch(f"graph {i}: unlabeled domain carries label {g.label}")
            else:
                if g.label is None or not (0 <= g.label < self.num_classes):
                    raise FeatureShapeMismatch(
                        f"graph {i}: label {g.label} outside [0, {self.num_classes})")

    def unlabeled(self) -> "Domain":
        """Label-free view: what the adaptation stage is allowed to see."""
        return Domain([Graph(g.adjacency, g.features) for g in self.graphs],
                      self.feature_dim, 0)


def validate(g: Graph) -> None:
    """Raise the first violated invariant; return silently when all hold."""
    a = g.adjacency
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise FeatureShapeMismatch(f"adjacency must be square, got {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise AsymmetricAdjacency(f"max |A - A^T| = {np.max(np.abs(a - a.T)):.3e}")
    if np.any(a < 0):
        raise NegativeWeight(f"min entry {a.min():.3e}")
    if np.any(a > 1.0):
        raise WeightOutOfRange(f"entry {a.max():.6f} exceeds 1")
    if np.any(np.diag(a) != 0):
        raise NonzeroDiagonal(f"max diagonal entry {np.max(np.abs(np.diag(a))):.3e}")
    if g.features.ndim != 2 or g.features.shape[0] != a.shape[0]:
        raise FeatureShapeMismatch(
            f"features shape {g.features.shape} does not match {a.shape[0]} nodes")


def normalized_laplacian(g: Graph, eps: float = DEGREE_EPS) -> np.ndarray:
    """I - D^{-1/2} A D^{-1/2} with degrees floored at eps for isolated nodes."""
    a = g.adjacency
    deg = np.maximum(a.sum(axis=1), eps)
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return np.eye(g.n) - (d_inv_sqrt[:, None] * a) * d_inv_sqrt[None, :]


def dirichlet_energy(g: Graph, eps: float = DEGREE_EPS) -> float:
    """Normalized Dirichlet energy Tr(X^T L X) / ||X||_F^2, a scalar in [0, 2]."""
    x = g.features
    norm_sq = float(np.sum(x * x))
    if norm_sq < ZERO_FEATURE_TOL:
        raise ZeroFeatures("feature matrix has zero Frobenius norm")
    lap = normalized_laplacian(g, eps)
    return float(np.trace(x.T @ lap @ x)) / norm_sq
