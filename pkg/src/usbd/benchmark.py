"""Desk-scale trend benchmark: clustered source -> chain target, full method
against the three ablation variants the trend criteria compare
(uniform weights, no span loss, no semantic loss).

Settings are sized so five seeded repetitions finish in minutes on one core
while every variant comparison stays deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapt import AdaptConfig, adapt, predict
from .datagen import ShiftSpec, gen_shift_pair
from .distill import DistillConfig, distill, init_basis
from .gnn import TrainConfig
from .gw import GwConfig


@dataclass
class BenchmarkSettings:
    n_graphs: int = 60
    k: int = 12
    n_proto: int = 12
    e_max: float = 1.2
    feature_dim: int = 4
    hidden: int = 16
    layers: int = 2
    outer_iters: int = 20
    outer_lr: float = 1.0
    source_batch: int = 48
    inner: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.2, steps=10, optimizer="sgd"))
    sigma: float = 1.0
    adapt_steps: int = 300
    adapt_lr: float = 0.01


VARIANTS = ("full", "no_ad", "no_sp", "no_se")


@dataclass
class SeedResult:
    seed: int
    accuracy: dict[str, float]
    majority: float
    fingerprint: float


def _distill_cfg(s: BenchmarkSettings, seed: int, **overrides) -> DistillConfig:
    kw = dict(lambda1=0.9, lambda2=0.5, outer_iters=s.outer_iters,
              outer_lr=s.outer_lr, source_batch=s.source_batch, seed=seed,
              inner=s.inner, gw=GwConfig(), proxy_hidden=s.hidden,
              proxy_layers=s.layers)
    kw.update(overrides)
    return DistillConfig(**kw)


def run_seed(seed: int, s: BenchmarkSettings | None = None) -> SeedResult:
    s = s or BenchmarkSettings()
    src_spec = ShiftSpec(regime="clustered", n_graphs=s.n_graphs,
                         feature_dim=s.feature_dim, seed=seed)
    tgt_spec = ShiftSpec(regime="chain", n_graphs=s.n_graphs,
                         feature_dim=s.feature_dim, seed=seed + 1000)
    source, target, held_out = gen_shift_pair(src_spec, tgt_spec)

    def fresh_basis():
        return init_basis(s.k, s.n_proto, source.feature_dim,
                          source.num_classes, s.e_max, seed=seed)

    bases = {
        "full": distill(source, _distill_cfg(s, seed), fresh_basis())[0],
        "no_sp": distill(source, _distill_cfg(s, seed, lambda1=0.0), fresh_basis())[0],
        "no_se": distill(source, _distill_cfg(s, seed, no_sem=True), fresh_basis())[0],
    }

    def score(basis, uniform_weights=False):
        cfg = AdaptConfig(sigma=s.sigma, uniform_weights=uniform_weights,
                          proxy_hidden=s.hidden, proxy_layers=s.layers,
                          proxy=TrainConfig(learning_rate=s.adapt_lr,
                                            steps=s.adapt_steps, optimizer="adam"),
                          seed=seed)
        result = adapt(basis, target, cfg)
        preds = predict(result.phi_star, target)
        acc = float(np.mean([p == y for p, y in zip(preds, held_out)]))
        return acc, result.fingerprint.value

    accuracy = {}
    accuracy["full"], fp = score(bases["full"])
    accuracy["no_ad"], _ = score(bases["full"], uniform_weights=True)
    accuracy["no_sp"], _ = score(bases["no_sp"])
    accuracy["no_se"], _ = score(bases["no_se"])
    majority = float(np.max(np.bincount(held_out)) / len(held_out))
    return SeedResult(seed, accuracy, majority, fp)


def run_trend_benchmark(seeds=range(5), settings: BenchmarkSettings | None = None,
                        verbose: bool = False) -> list[SeedResult]:
    results = []
    for seed in seeds:
        r = run_seed(seed, settings)
        if verbose:
            accs = " ".join(f"{k}={v:.3f}" for k, v in r.accuracy.items())
            print(f"seed {r.seed}: {accs} majority={r.majority:.3f} "
                  f"fingerprint={r.fingerprint:.3f}")
        results.append(r)
    return results


def summarize(results: list[SeedResult]) -> dict[str, float]:
    means = {v: float(np.mean([r.accuracy[v] for r in results])) for v in VARIANTS}
    means["majority"] = float(np.mean([r.majority for r in results]))
    return means
