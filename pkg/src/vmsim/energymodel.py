"""Power models: a linear energy-proportional curve and a fitted MLP predictor."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .optim import TrainConfig, central_difference, clip_by_global_norm, max_relative_error, sgd_update

ACTIVATIONS = ("tanh", "relu")


@dataclass
class MlpModel:
    """Feed-forward net with activated hidden layers and an affine output layer.

    ``layer_weights[k]`` has shape (out_k, in_k).
    """

    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.layer_weights or len(self.layer_weights) != len(self.layer_biases):
            raise ValueError("need n >= 1 layers with matching biases")
        self.layer_weights = [np.asarray(w, dtype=float) for w in self.layer_weights]
        self.layer_biases = [np.asarray(b, dtype=float) for b in self.layer_biases]
        for k, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k + 1}: weight/bias shapes do not match")
            if k and w.shape[1] != self.layer_weights[k - 1].shape[0]:
                raise ValueError(f"layer {k + 1}: input dim does not match previous layer")

    @property
    def n(self) -> int:
        return len(self.layer_weights)

    @property
    def input_dim(self) -> int:
        return self.layer_weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layer_weights[-1].shape[0]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, scale: float = 0.1,
             activation: str = "tanh") -> MlpModel:
        ws = [rng.uniform(-scale, scale, size=(sizes[k + 1], sizes[k])) for k in range(len(sizes) - 1)]
        bs = [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)]
        return cls(ws, bs, activation)

    def params(self) -> list[np.ndarray]:
        return [*self.layer_weights, *self.layer_biases]

    def copy(self) -> MlpModel:
        return MlpModel([w.copy() for w in self.layer_weights],
                        [b.copy() for b in self.layer_biases], self.activation)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "activation": self.activation,
            "layer_sizes": [self.input_dim] + [w.shape[0] for w in self.layer_weights],
            "layer_weights": [w.reshape(-1).tolist() for w in self.layer_weights],
            "layer_biases": [b.tolist() for b in self.layer_biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpModel:
        sizes = d["layer_sizes"]
        ws = [np.asarray(w, dtype=float).reshape(sizes[k + 1], sizes[k])
              for k, w in enumerate(d["layer_weights"])]
        return cls(ws, [np.asarray(b, dtype=float) for b in d["layer_biases"]], d["activation"])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> MlpModel:
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(float)


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Evaluate the net on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"expected input dim {model.input_dim}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    a = x
    for k, (w, b) in enumerate(zip(model.layer_weights, model.layer_biases)):
        z = a @ w.T + b
        a = z if k == model.n - 1 else _act(model.activation, z)
    return a


def mlp_forward_cache(model: MlpModel, X: np.ndarray):
    acts, pre = [X], []
    a = X
    for k, (w, b) in enumerate(zip(model.layer_weights, model.layer_biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if k == model.n - 1 else _act(model.activation, z)
        acts.append(a)
    return a, (acts, pre)


def mlp_backward(model: MlpModel, cache, dY: np.ndarray) -> list[np.ndarray]:
    """Gradients for ``model.params()`` order given dL/dY for a batch."""
    acts, pre = cache
    gw, gb = [None] * model.n, [None] * model.n
    delta = dY
    for k in range(model.n - 1, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.layer_weights[k]) * _act_grad(model.activation, pre[k - 1], acts[k])
    return gw + gb


def mlp_mse(model: MlpModel, X, Y) -> float:
    err = mlp_forward(model, X) - np.asarray(Y, dtype=float)
    return float(np.mean(err * err))


def mlp_loss_and_grad(model: MlpModel, X, Y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    out, cache = mlp_forward_cache(model, X)
    err = out - Y
    loss = float(np.mean(err * err))
    grads = mlp_backward(model, cache, 2.0 * err / err.size)
    return loss, grads


def train_mlp(model: MlpModel, X, Y, cfg: TrainConfig):
    """Full-batch gradient descent on MSE. Returns a new model and per-epoch losses."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    curve = []
    for _ in range(cfg.epochs):
        loss, grads = mlp_loss_and_grad(model, X, Y)
        curve.append(loss)
        sgd_update(model.params(), clip_by_global_norm(grads, cfg.clip_norm), cfg.learning_rate)
    return model, curve


def mlp_gradient_check(model: MlpModel, X, Y, eps: float = 1e-5) -> float:
    model = model.copy()
    _, analytic = mlp_loss_and_grad(model, X, Y)
    numeric = central_difference(lambda: mlp_mse(model, X, Y), model.params(), eps)
    return max_relative_error(analytic, numeric)


def linear_power(pm, utilization: float) -> float:
    if not (0.0 <= utilization <= 1.0):
        raise ValueError(f"utilization {utilization} outside [0, 1]")
    return pm.power_idle + (pm.power_peak - pm.power_idle) * utilization


@dataclass
class PowerModel:
    """Which per-PM power curve the simulator uses.

    With ``mlp`` set, per-PM watts come from the fitted net applied to
    (utilization, hosted VM count / cpu capacity, normalized net I/O).
    """

    power_off_empty: bool = False
    mlp: MlpModel | None = field(default=None, repr=False)

    def pm_power(self, pm, utilization: float, vm_count: int = 0, net_io: float = 0.0) -> float:
        if self.mlp is None:
            return linear_power(pm, utilization)
        x = [utilization, vm_count / pm.cpu_capacity, net_io]
        return max(0.0, float(mlp_forward(self.mlp, x)[0]))


def pm_utilizations(state) -> dict[str, float]:
    serving = state.serving_load()
    return {pm.id: min(1.0, serving[pm.id] / pm.cpu_capacity) for pm in state.pms}


def per_pm_power(state, model: PowerModel | None = None) -> dict[str, float]:
    model = model or PowerModel()
    util = pm_utilizations(state)
    counts = state.hosted_counts()
    net = {pm.id: 0.0 for pm in state.pms}
    if model.mlp is not None:
        for vm in state.vms.values():
            if vm.placement is not None:
                net[vm.placement] += vm.net_io
    out = {}
    for pm in state.pms:
        if model.power_off_empty and counts[pm.id] == 0 and not _is_migration_target(state, pm.id):
            out[pm.id] = 0.0
        else:
            net_norm = min(1.0, net[pm.id] / state.max_net_io) if state.max_net_io > 0 else 0.0
            out[pm.id] = model.pm_power(pm, util[pm.id], counts[pm.id], net_norm)
    return out


def _is_migration_target(state, pm_id: str) -> bool:
    return any(job.target == pm_id for job in state.migrations)


def cluster_power(state, model: PowerModel | None = None) -> float:
    return float(sum(per_pm_power(state, model).values()))
