"""Universal structural basis distillation for source-free graph adaptation.

Stage 1 distills a labeled source into K synthetic prototype graphs whose
Dirichlet energies tile [0, e_max]; Stage 2 adapts a classifier to any
unlabeled target by kernel-weighted retraining on the basis alone.
"""

__version__ = "0.1.0"

from .adapt import (
    AdaptConfig,
    SpectralFingerprint,
    adapt,
    basis_weights,
    covering_discrepancy,
    fingerprint,
    predict,
)
from .datagen import ShiftSpec, gen_domain, gen_shift_pair
from .distill import (
    DistillConfig,
    SyntheticBasis,
    covering_residual,
    distill,
    init_basis,
    load_basis,
    make_anchors,
    save_basis,
    sem_loss,
    span_loss,
)
from .gnn import GnnParams, TrainConfig, cross_entropy, forward, init_params, train
from .graphs import Domain, Graph, dirichlet_energy, normalized_laplacian, validate
from .gw import GwConfig, div_loss, entropic_gw
from .tudata import load_tudataset, save_tudataset

__all__ = [
    "AdaptConfig", "SpectralFingerprint", "adapt", "basis_weights",
    "covering_discrepancy", "fingerprint", "predict",
    "ShiftSpec", "gen_domain", "gen_shift_pair",
    "DistillConfig", "SyntheticBasis", "covering_residual", "distill",
    "init_basis", "load_basis", "make_anchors", "save_basis", "sem_loss",
    "span_loss",
    "GnnParams", "TrainConfig", "cross_entropy", "forward", "init_params",
    "train",
    "Domain", "Graph", "dirichlet_energy", "normalized_laplacian", "validate",
    "GwConfig", "div_loss", "entropic_gw",
    "load_tudataset", "save_tudataset",
]
