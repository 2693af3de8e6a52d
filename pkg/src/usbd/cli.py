"""Command-line driver: gen-data | distill | adapt | eval | grad-check.

Configuration is a nested JSON document; any leaf can be overridden on the
command line with a dotted flag, e.g. `--distill.lambda1 0.9`. Reports embed
the fully resolved config and a content hash of the inputs. Wall-clock
timings go to a separate timings.json so that the deterministic outputs
(basis, report, predictions) stay byte-identical across reruns.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import AdaptConfig, adapt, covering_discrepancy, predict
from .datagen import ShiftSpec, gen_domain, gen_shift_pair
from .distill import (
    DistillConfig,
    anchor_spacing,
    covering_residual,
    distill,
    init_basis,
    load_basis,
    save_basis,
)
from .errors import (
    ConfigError,
    DataError,
    LengthMismatch,
    NumericalError,
    UsbdError,
)
from .gnn import TrainConfig, save_params
from .gradcheck import run_all
from .gw import GwConfig
from .tudata import load_tudataset, save_tudataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


DEFAULT_CONFIG: dict = {
    "schema_version": 1,
    "seed": 0,
    "out_dir": "out",
    "data": {
        "generate": {
            "source": {"regime": "clustered"},
            "target": {"regime": "chain"},
        },
        "dataset": None,
    },
    "gnn": {"hidden": 32, "layers": 3},
    "basis": {"k": 20, "n_proto": 12, "e_max": 1.2},
    "distill": {
        "lambda1": 0.9,
        "lambda2": 0.5,
        "outer_iters": 20,
        "outer_lr": 1e-3,
        "source_batch": 64,
        "meta_mode": "unrolled",
        "inner": {"learning_rate": 1e-3, "steps": 20, "optimizer": "sgd"},
    },
    "adapt": {
        "sigma": 1.0,
        "warm_start": False,
        "proxy": {"learning_rate": 1e-3, "steps": 20, "optimizer": "adam"},
    },
    "gw": {"epsilon": 0.05, "outer_iters": 50, "sinkhorn_iters": 100, "tol": 1e-7},
    "ablation": {"no_sem": False, "no_span": False, "no_div": False,
                 "uniform_weights": False},
}


# --- config plumbing ---------------------------------------------------------

def _deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(cfg: dict, dotted: str, value: str):
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = _parse_scalar(value)


def _parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name = tok[2:]
        if "=" in name:
            name, value = name.split("=", 1)
        else:
            i += 1
            if i >= len(tokens):
                raise ConfigError(f"missing value for override --{name}")
            value = tokens[i]
        pairs.append((name, value))
        i += 1
    return pairs


def resolve_config(config_path: str | None, overrides: list[str],
                   seed: int | None = None, out_dir: str | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _deep_merge(cfg, loaded)
    for name, value in _parse_overrides(overrides):
        _apply_override(cfg, name, value)
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    _check_data_section(cfg)
    return cfg


def _check_data_section(cfg: dict):
    data = cfg.get("data", {})
    gen = data.get("generate")
    ds = data.get("dataset")
    if (gen is None) == (ds is None):
        raise ConfigError("exactly one data source must be set: data.generate or data.dataset")


def _shift_spec(d: dict, seed: int) -> ShiftSpec:
    known = {f for f in ShiftSpec.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown ShiftSpec fields: {sorted(unknown)}")
    merged = {"seed": seed, **d}
    return ShiftSpec(**merged)


def _train_config(d: dict, seed: int) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
    return TrainConfig(**{"seed": seed, **d})


def _gw_config(cfg: dict) -> GwConfig:
    d = cfg.get("gw", {})
    known = {f for f in GwConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown GwConfig fields: {sorted(unknown)}")
    return GwConfig(**d)


def _distill_config(cfg: dict) -> DistillConfig:
    d = dict(cfg.get("distill", {}))
    seed = cfg.get("seed", 0)
    inner = _train_config(d.pop("inner", {}), seed)
    ablation = cfg.get("ablation", {})
    kwargs = {
        "inner": inner,
        "gw": _gw_config(cfg),
        "proxy_hidden": cfg.get("gnn", {}).get("hidden", 32),
        "proxy_layers": cfg.get("gnn", {}).get("layers", 3),
        "seed": seed,
        "no_sem": bool(ablation.get("no_sem", False)),
        **d,
    }
    if ablation.get("no_span", False):
        kwargs["lambda1"] = 0.0
    if ablation.get("no_div", False):
        kwargs["lambda2"] = 0.0
    known = {f for f in DistillConfig.__dataclass_fields__}
    unknown = set(kwargs) - known
    if unknown:
        raise ConfigError(f"unknown DistillConfig fields: {sorted(unknown)}")
    return DistillConfig(**kwargs)


def _adapt_config(cfg: dict) -> AdaptConfig:
    d = dict(cfg.get("adapt", {}))
    seed = cfg.get("seed", 0)
    proxy = _train_config(d.pop("proxy", {}), seed)
    kwargs = {
        "proxy": proxy,
        "proxy_hidden": cfg.get("gnn", {}).get("hidden", 32),
        "proxy_layers": cfg.get("gnn", {}).get("layers", 3),
        "uniform_weights": bool(cfg.get("ablation", {}).get("uniform_weights", False)),
        "seed": seed,
        **d,
    }
    known = {f for f in AdaptConfig.__dataclass_fields__}
    unknown = set(kwargs) - known
    if unknown:
        raise ConfigError(f"unknown AdaptConfig fields: {sorted(unknown)}")
    return AdaptConfig(**kwargs)


def _hash_paths(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(x) for x in paths):
        path = Path(p)
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _resolve_source(cfg: dict):
    """Returns (labeled source Domain, input content hash)."""
    data = cfg["data"]
    if data.get("generate"):
        spec = _shift_spec(data["generate"]["source"], cfg["seed"])
        src = gen_domain(spec)
        digest = _hash_text(json.dumps(data["generate"]["source"], sort_keys=True)
                            + f"|seed={cfg['seed']}")
        return src, digest
    ds = data["dataset"]
    root = Path(ds["source_dir"])
    name = ds.get("source_name", "source")
    src = load_tudataset(root, name)
    files = sorted(root.glob(f"{name}_*.txt"))
    return src, _hash_paths(files)


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=1) + "\n")


# --- commands ------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    data = cfg["data"]
    if not data.get("generate"):
        raise ConfigError("gen-data requires the data.generate section")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    src_spec = _shift_spec(data["generate"]["source"], cfg["seed"])
    tgt_spec = _shift_spec(data["generate"]["target"], cfg["seed"] + 1)
    source, target, held_out = gen_shift_pair(src_spec, tgt_spec)
    save_tudataset(source, out / "source", "source")
    save_tudataset(target, out / "target", "target")
    (out / "target_labels.txt").write_text("\n".join(str(y) for y in held_out) + "\n")
    manifest = {
        "schema_version": 1,
        "config": cfg,
        "source": {"n_graphs": len(source), "classes": source.num_classes,
                   "feature_dim": source.feature_dim},
        "target": {"n_graphs": len(target), "feature_dim": target.feature_dim},
        "paths": {"source": "source", "target": "target",
                  "held_out_labels": "target_labels.txt"},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(source)} source and {len(target)} target graphs to {out}")
    return EXIT_OK


def cmd_distill(cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    source, input_hash = _resolve_source(cfg)
    if source.num_classes < 1:
        raise DataError("distillation requires a labeled source")
    dcfg = _distill_config(cfg)
    bcfg = cfg.get("basis", {})
    basis0 = init_basis(int(bcfg.get("k", 20)), int(bcfg.get("n_proto", 12)),
                        source.feature_dim, source.num_classes,
                        float(bcfg.get("e_max", 1.2)), seed=cfg["seed"])
    basis, trace = distill(source, dcfg, basis0)
    save_basis(basis, out / "basis.json")

    lines = ["iteration,l_sem,l_span,l_div,l_meta,epsilon_resid"]
    for row in trace:
        lines.append(f"{row.iteration},{row.l_sem:.17g},{row.l_span:.17g},"
                     f"{row.l_div:.17g},{row.l_meta:.17g},{row.epsilon_resid:.17g}")
    (out / "trace.csv").write_text("\n".join(lines) + "\n")

    eps_resid, energies = covering_residual(basis)
    delta = anchor_spacing(basis.k, basis.e_max)
    radius = delta / 2 + eps_resid
    probes = np.linspace(0.0, basis.e_max, 100)
    proto_e = np.asarray(energies)
    gaps = np.min(np.abs(probes[:, None] - proto_e[None, :]), axis=1)
    report = {
        "schema_version": 1,
        "epsilon_resid": eps_resid,
        "delta": delta,
        "certified_radius": radius,
        "probes_checked": int(len(probes)),
        "probes_within_radius": int(np.sum(gaps <= radius + 1e-12)),
        "max_probe_gap": float(gaps.max()),
        "span_within_half_delta": bool(eps_resid <= delta / 2),
        "prototype_energies": [float(e) for e in energies],
        "anchors": [float(a) for a in basis.anchors],
        "config": cfg,
        "input_hash": input_hash,
    }
    _write_json(out / "covering.json", report)
    print(f"distilled K={basis.k} basis: epsilon_resid={eps_resid:.6f} "
          f"delta/2={delta / 2:.6f} certified_radius={radius:.6f}")
    return EXIT_OK


def cmd_adapt(cfg: dict, basis_path: str, target_dir: str,
              target_name: str = "target") -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    basis = load_basis(basis_path)
    target = load_tudataset(Path(target_dir), target_name).unlabeled()
    acfg = _adapt_config(cfg)

    result = adapt(basis, target, acfg)
    t0 = time.perf_counter()
    preds = predict(result.phi_star, target)
    predict_ms = (time.perf_counter() - t0) * 1e3

    (out / "predictions.txt").write_text("\n".join(str(p) for p in preds) + "\n")
    save_params(result.phi_star, out / "phi_star.json")

    eps_resid, _ = covering_residual(basis)
    counts: dict[str, int] = {}
    for p in preds:
        counts[str(p)] = counts.get(str(p), 0) + 1
    report = {
        "schema_version": 1,
        "variant": "w/o AD (uniform weights)" if acfg.uniform_weights else "full",
        "fingerprint": {"value": result.fingerprint.value,
                        "n_graphs": result.fingerprint.n_graphs,
                        "skipped": result.fingerprint.skipped},
        "weights": [float(w) for w in result.weights],
        "covering_discrepancy": covering_discrepancy(basis, target),
        "epsilon_resid": eps_resid,
        "per_class_predictions": dict(sorted(counts.items())),
        "config": cfg,
        "input_hash": _hash_paths(sorted(Path(target_dir).glob(f"{target_name}_*.txt"))
                                  + [Path(basis_path)]),
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timings.json", {
        "fingerprint_ms": result.fingerprint_ms,
        "proxy_train_ms": result.train_ms,
        "predict_ms": predict_ms,
    })
    print(f"adapted on {len(target)} target graphs: fingerprint="
          f"{result.fingerprint.value:.6f} train_ms={result.train_ms:.1f}")
    return EXIT_OK


def cmd_eval(pred_path: str, labels_path: str, out_dir: str | None = None) -> int:
    preds = [int(x) for x in Path(pred_path).read_text().split()]
    labels = [int(x) for x in Path(labels_path).read_text().split()]
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    matches = sum(p == y for p, y in zip(preds, labels))
    accuracy = matches / len(labels)
    n_classes = max(max(preds), max(labels)) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, y in zip(preds, labels):
        confusion[y, p] += 1
    print(f"accuracy {accuracy:.6f}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "accuracy.txt").write_text(f"{accuracy:.6f}\n")
        rows = ["true\\pred," + ",".join(str(c) for c in range(n_classes))]
        for y in range(n_classes):
            rows.append(str(y) + "," + ",".join(str(confusion[y, p]) for p in range(n_classes)))
        (out / "confusion.csv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_grad_check(out_dir: str | None = None) -> int:
    rows = run_all()
    lines = [f"{'loss':24s} {'max_rel_err':>12s} {'tolerance':>10s} {'status':>7s}"]
    ok = True
    for name, err, tol, passed in rows:
        ok &= passed
        lines.append(f"{name:24s} {err:12.3e} {tol:10.0e} {'PASS' if passed else 'FAIL':>7s}")
    table = "\n".join(lines)
    print(table)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(table + "\n")
    return EXIT_OK if ok else EXIT_NUMERICAL


# --- entry point -----------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="usbd",
        description="Universal structural basis distillation and spectral-aware adaptation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    common(sub.add_parser("gen-data", help="write a shifted source/target pair"))
    common(sub.add_parser("distill", help="run Stage 1 and save the basis"))

    p_adapt = sub.add_parser("adapt", help="run Stage 2 against a saved basis")
    common(p_adapt)
    p_adapt.add_argument("--basis", required=True)
    p_adapt.add_argument("--target", required=True, help="TUDataset directory")
    p_adapt.add_argument("--target-name", default="target")

    p_eval = sub.add_parser("eval", help="score predictions against labels")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--out", default=None)

    p_gc = sub.add_parser("grad-check", help="run every gradient oracle")
    p_gc.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "eval":
            if extra:
                raise ConfigError(f"unexpected arguments: {extra}")
            return cmd_eval(args.pred, args.labels, args.out)
        if args.command == "grad-check":
            if extra:
                raise ConfigError(f"unexpected arguments: {extra}")
            return cmd_grad_check(args.out)
        cfg = resolve_config(args.config, extra, seed=args.seed, out_dir=args.out)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "distill":
            return cmd_distill(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg, args.basis, args.target, args.target_name)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UsbdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
