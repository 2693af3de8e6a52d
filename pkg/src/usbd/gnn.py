"""GIN-style graph classifier used as the proxy model in both stages.

Layer update: H <- MLP((1 + eps) H + A H) with a two-affine-map MLP and a relu
in between; readout is the mean over node embeddings, followed by an affine
classifier head. The adjacency may be continuous, so synthetic prototypes stay
differentiable end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    AllZeroWeights,
    ConfigError,
    FeatureDimMismatch,
    LabelOutOfRange,
)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 20
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")


@dataclass
class LayerParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    eps: np.ndarray  # learnable 1x1 scalar


@dataclass
class GnnParams:
    layers: list[LayerParams]
    cls_w: np.ndarray
    cls_b: np.ndarray
    d_in: int
    d_hidden: int
    n_classes: int

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.w1, layer.b1, layer.w2, layer.b2, layer.eps])
        out.extend([self.cls_w, self.cls_b])
        return out

    def copy(self) -> "GnnParams":
        return GnnParams(
            [LayerParams(l.w1.copy(), l.b1.copy(), l.w2.copy(), l.b2.copy(), l.eps.copy())
             for l in self.layers],
            self.cls_w.copy(), self.cls_b.copy(),
            self.d_in, self.d_hidden, self.n_classes)


def init_params(d_in: int, d_hidden: int, layers: int, classes: int, seed: int = 0) -> GnnParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero epsilons."""
    if min(d_in, d_hidden, layers, classes) < 1:
        raise ConfigError("all GNN dimensions must be positive")
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    layer_params = []
    in_dim = d_in
    for _ in range(layers):
        layer_params.append(LayerParams(
            w1=uniform(in_dim, (in_dim, d_hidden)),
            b1=np.zeros((1, d_hidden)),
            w2=uniform(d_hidden, (d_hidden, d_hidden)),
            b2=np.zeros((1, d_hidden)),
            eps=np.zeros((1, 1)),
        ))
        in_dim = d_hidden
    return GnnParams(layer_params, uniform(d_hidden, (d_hidden, classes)),
                     np.zeros((1, classes)), d_in, d_hidden, classes)


@dataclass
class LiftedParams:
    """The same parameter structure as GnnParams, but as tape tensors."""

    layers: list[list[ad.Tensor]]  # [w1, b1, w2, b2, eps] per layer
    cls_w: ad.Tensor
    cls_b: ad.Tensor
    d_in: int
    n_classes: int

    def flat(self) -> list[ad.Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer)
        out.extend([self.cls_w, self.cls_b])
        return out

    def replace_flat(self, tensors: list[ad.Tensor]) -> "LiftedParams":
        per_layer = 5
        layers = []
        for i in range(len(self.layers)):
            layers.append(list(tensors[i * per_layer:(i + 1) * per_layer]))
        return LiftedParams(layers, tensors[-2], tensors[-1], self.d_in, self.n_classes)


def lift_params(tape: ad.Tape, params: GnnParams, trainable: bool = True) -> LiftedParams:
    wrap = tape.param if trainable else tape.const
    layers = [[wrap(l.w1), wrap(l.b1), wrap(l.w2), wrap(l.b2), wrap(l.eps)]
              for l in params.layers]
    return LiftedParams(layers, wrap(params.cls_w), wrap(params.cls_b),
                        params.d_in, params.n_classes)


def materialize(lifted: LiftedParams, template: GnnParams) -> GnnParams:
    out = template.copy()
    for lo, lt in zip(lifted.layers, out.layers):
        lt.w1, lt.b1, lt.w2, lt.b2, lt.eps = (t.value.copy() for t in lo)
    out.cls_w = lifted.cls_w.value.copy()
    out.cls_b = lifted.cls_b.value.copy()
    return out


def forward(params: LiftedParams, adjacency: ad.Tensor, features: ad.Tensor) -> ad.Tensor:
    """Logits (1 x C) for one graph given continuous adjacency and features."""
    if features.cols != params.d_in:
        raise FeatureDimMismatch(
            f"features have dim {features.cols}, model expects {params.d_in}")
    tape = features.tape
    one = tape.const(np.ones((1, 1)))
    h = features
    for w1, b1, w2, b2, eps in params.layers:
        pre = ad.add(ad.smul(ad.add(one, eps), h), ad.matmul(adjacency, h))
        z = ad.relu(ad.add_rowvec(ad.matmul(pre, w1), b1))
        h = ad.add_rowvec(ad.matmul(z, w2), b2)
    emb = ad.mean_rows(h)
    return ad.add(ad.matmul(emb, params.cls_w), params.cls_b)


def cross_entropy(logits: ad.Tensor, label: int) -> ad.Tensor:
    """-log softmax(logits)[label], stabilized by max subtraction."""
    c = logits.cols
    if not (0 <= label < c):
        raise LabelOutOfRange(f"label {label} outside [0, {c})")
    onehot = np.zeros((1, c))
    onehot[0, label] = 1.0
    picked = ad.mul(ad.log_softmax_rows(logits), logits.tape.const(onehot))
    return ad.scale(ad.tsum(picked), -1.0)


def forward_numpy(params: GnnParams, adjacency: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Detached logits; throwaway tape keeps one forward implementation."""
    tape = ad.Tape()
    lifted = lift_params(tape, params, trainable=False)
    logits = forward(lifted, tape.const(adjacency), tape.const(features))
    return logits.value.copy()


def _check_weights(weights, n):
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != n:
        raise AllZeroWeights(f"{len(w)} weights for {n} graphs")
    if np.any(w < 0):
        raise AllZeroWeights("weights must be nonnegative")
    if not np.any(w > 0):
        raise AllZeroWeights("all training weights are zero")
    return w


def weighted_loss(params: LiftedParams, graphs, labels, weights) -> ad.Tensor:
    """Sum_k w_k * CE(forward(g_k), y_k) as a tape expression.

    graphs is a list of (adjacency, features) pairs of tensors or arrays.
    """
    total = None
    tape = params.cls_w.tape
    for (adj, feat), label, w in zip(graphs, labels, weights):
        adj_t = adj if isinstance(adj, ad.Tensor) else tape.const(adj)
        feat_t = feat if isinstance(feat, ad.Tensor) else tape.const(feat)
        term = ad.scale(cross_entropy(forward(params, adj_t, feat_t), label), float(w))
        total = term if total is None else ad.add(total, term)
    return total


def train(params: GnnParams, graphs, cfg: TrainConfig, weights=None) -> GnnParams:
    """Full-batch weighted-CE training, detached from any caller tape.

    graphs: list of Graph-like objects with .adjacency, .features, .label.
    """
    w = _check_weights(weights, len(graphs))
    out = params.copy()
    arrays = out.arrays()
    opt = _OptState(cfg, arrays)
    data = [(g.adjacency, g.features) for g in graphs]
    labels = [g.label for g in graphs]
    for _ in range(cfg.steps):
        tape = ad.Tape()
        lifted = lift_params(tape, out, trainable=True)
        loss = weighted_loss(lifted, data, labels, w)
        grads = ad.grad(loss, lifted.flat())
        opt.step(arrays, [g.value for g in grads])
    return out


class _OptState:
    """SGD or Adam over a list of numpy arrays, updated in place."""

    def __init__(self, cfg: TrainConfig, arrays):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads):
        cfg = self.cfg
        self.t += 1
        if cfg.optimizer == "sgd":
            for a, g in zip(arrays, grads):
                a -= cfg.learning_rate * g
            return
        b1, b2 = cfg.beta1, cfg.beta2
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            a -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train_unrolled(tape: ad.Tape, lifted: LiftedParams, graphs, labels,
                   cfg: TrainConfig, weights=None, first_order: bool = False) -> LiftedParams:
    """Inner-loop training recorded on the tape so outer losses can
    differentiate through every update.

    With first_order=True the current parameters are detached before each
    gradient, keeping only the direct dependence of each step on the training
    graphs (the cheap hypergradient approximation).
    """
    w = _check_weights(weights, len(graphs))
    current = lifted
    opt_m = None
    opt_v = None
    for step in range(cfg.steps):
        if first_order:
            current = current.replace_flat(
                [tape.const(t.value) for t in current.flat()])
        loss = weighted_loss(current, graphs, labels, w)
        grads = ad.grad(loss, current.flat())
        if cfg.optimizer == "sgd":
            updated = [ad.sub(p, ad.scale(g, cfg.learning_rate))
                       for p, g in zip(current.flat(), grads)]
        else:
            if opt_m is None:
                opt_m = [tape.const(np.zeros(p.shape)) for p in current.flat()]
                opt_v = [tape.const(np.zeros(p.shape)) for p in current.flat()]
            b1, b2 = cfg.beta1, cfg.beta2
            t = step + 1
            updated = []
            for i, (p, g) in enumerate(zip(current.flat(), grads)):
                opt_m[i] = ad.add(ad.scale(opt_m[i], b1), ad.scale(g, 1 - b1))
                opt_v[i] = ad.add(ad.scale(opt_v[i], b2), ad.scale(ad.mul(g, g), 1 - b2))
                m_hat = ad.scale(opt_m[i], 1.0 / (1 - b1 ** t))
                v_hat = ad.scale(opt_v[i], 1.0 / (1 - b2 ** t))
                # sqrt shifted away from zero: unrolling through sqrt(0) is singular
                denom = ad.add(ad.powf(ad.add(v_hat, tape.const(np.full(p.shape, 1e-16))), 0.5),
                               tape.const(np.full(p.shape, cfg.adam_eps)))
                updated.append(ad.sub(p, ad.scale(ad.div(m_hat, denom), cfg.learning_rate)))
        current = current.replace_flat(updated)
    return current


# --- JSON checkpoint ----------------------------------------------------------

def params_to_json(params: GnnParams) -> str:
    def mat(a):
        return {"shape": list(a.shape), "values": [f"{x:.17g}" for x in a.reshape(-1)]}

    doc = {
        "schema_version": 1,
        "d_in": params.d_in,
        "d_hidden": params.d_hidden,
        "n_layers": len(params.layers),
        "n_classes": params.n_classes,
        "layers": [{"w1": mat(l.w1), "b1": mat(l.b1), "w2": mat(l.w2),
                    "b2": mat(l.b2), "eps": mat(l.eps)} for l in params.layers],
        "classifier": {"w": mat(params.cls_w), "b": mat(params.cls_b)},
    }
    return json.dumps(doc, indent=1)


def params_from_json(text: str) -> GnnParams:
    doc = json.loads(text)

    def mat(d):
        return np.asarray([float(v) for v in d["values"]]).reshape(d["shape"])

    layers = [LayerParams(mat(l["w1"]), mat(l["b1"]), mat(l["w2"]), mat(l["b2"]), mat(l["eps"]))
              for l in doc["layers"]]
    return GnnParams(layers, mat(doc["classifier"]["w"]), mat(doc["classifier"]["b"]),
                     doc["d_in"], doc["d_hidden"], doc["n_classes"])


def save_params(params: GnnParams, path) -> None:
    Path(path).write_text(params_to_json(params))


def load_params(path) -> GnnParams:
    return params_from_json(Path(path).read_text())
