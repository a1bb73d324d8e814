"""Single-layer LSTM demand forecaster trained with truncated BPTT.

Gate pre-activations use the concatenation ``[h_prev, x]``; the affine output
layer maps ``h_t`` to a prediction ``Y_t = W_out h_t + b_out``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .optim import TrainConfig, central_difference, clip_by_global_norm, max_relative_error, sgd_update

GATES = ("f", "i", "o", "c")
PARAM_NAMES = ("W_f", "W_i", "W_o", "W_c", "b_f", "b_i", "b_o", "b_c", "W_out", "b_out")


def sigmoid(z):
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int) -> LstmState:
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


@dataclass
class LstmModel:
    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        h, z = self.W_f.shape
        for g in GATES:
            if getattr(self, f"W_{g}").shape != (h, z) or getattr(self, f"b_{g}").shape != (h,):
                raise ValueError(f"gate {g}: inconsistent parameter shapes")
        if z <= h:
            raise ValueError("gate weights must cover [h_prev, x] with input_dim >= 1")
        if self.W_out.ndim != 2 or self.W_out.shape[1] != h or self.b_out.shape != (self.W_out.shape[0],):
            raise ValueError("output layer shapes inconsistent with hidden_dim")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValueError("non-finite parameters")

    @property
    def hidden_dim(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.hidden_dim

    @property
    def output_dim(self) -> int:
        return self.W_out.shape[0]

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> LstmModel:
        return LstmModel(*[p.copy() for p in self.params()])

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, output_dim: int | None = None) -> LstmModel:
        output_dim = input_dim if output_dim is None else output_dim
        z = hidden_dim + input_dim
        gates = [np.zeros((hidden_dim, z)) for _ in GATES]
        biases = [np.zeros(hidden_dim) for _ in GATES]
        return cls(*gates, *biases, np.zeros((output_dim, hidden_dim)), np.zeros(output_dim))

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, output_dim: int | None = None,
             seed: int = 0, init_scale: float = 0.1, forget_bias: float = 1.0) -> LstmModel:
        output_dim = input_dim if output_dim is None else output_dim
        rng = np.random.default_rng(seed)
        z = hidden_dim + input_dim
        gates = [rng.uniform(-init_scale, init_scale, size=(hidden_dim, z)) for _ in GATES]
        biases = [np.zeros(hidden_dim) for _ in GATES]
        biases[0][:] = forget_bias
        w_out = rng.uniform(-init_scale, init_scale, size=(output_dim, hidden_dim))
        return cls(*gates, *biases, w_out, np.zeros(output_dim))

    def to_dict(self) -> dict:
        d = {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim, "output_dim": self.output_dim}
        for name in PARAM_NAMES:
            d[name] = getattr(self, name).reshape(-1).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LstmModel:
        h, x, y = d["hidden_dim"], d["input_dim"], d["output_dim"]
        shapes = {f"W_{g}": (h, h + x) for g in GATES}
        shapes.update({f"b_{g}": (h,) for g in GATES})
        shapes.update({"W_out": (y, h), "b_out": (y,)})
        return cls(*[np.asarray(d[n], dtype=float).reshape(shapes[n]) for n in PARAM_NAMES])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> LstmModel:
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _gates(model: LstmModel, state: LstmState, x: np.ndarray):
    hx = np.concatenate([state.h, x])
    f = sigmoid(model.W_f @ hx + model.b_f)
    i = sigmoid(model.W_i @ hx + model.b_i)
    o = sigmoid(model.W_o @ hx + model.b_o)
    g = np.tanh(model.W_c @ hx + model.b_c)
    c = f * state.c + i * g
    tc = np.tanh(c)
    return hx, f, i, o, g, c, tc


def lstm_step(model: LstmModel, state: LstmState, x) -> LstmState:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (model.input_dim,):
        raise ValueError(f"expected input of length {model.input_dim}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    _, _, _, o, _, c, tc = _gates(model, state, x)
    return LstmState(o * tc, c)


def predict(model: LstmModel, state: LstmState) -> np.ndarray:
    return model.W_out @ state.h + model.b_out


def forecast(model: LstmModel, history: Sequence, horizon: int) -> list[np.ndarray]:
    """Roll the history from a zero state, then feed predictions back for ``horizon`` steps."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    if model.output_dim != model.input_dim:
        raise ValueError("autoregressive forecasting needs output_dim == input_dim")
    state = LstmState.zeros(model.hidden_dim)
    for x in history:
        state = lstm_step(model, state, x)
    out = []
    for k in range(horizon):
        y = predict(model, state)
        out.append(y)
        if k + 1 < horizon:
            state = lstm_step(model, state, y)
    return out


def sequence_loss_and_grad(model: LstmModel, xs: np.ndarray, ys: np.ndarray,
                           state: LstmState | None = None):
    """MSE of one-step predictions over a sequence plus BPTT gradients.

    Returns (loss, grads in PARAM_NAMES order, final state). Gradients do not
    flow into the supplied initial state.
    """
    H = model.hidden_dim
    T = len(xs)
    state = state or LstmState.zeros(H)
    h, c = state.h, state.c
    cache = []
    preds = np.empty((T, model.output_dim))
    for t in range(T):
        hx, f, i, o, g, c_new, tc = _gates(model, LstmState(h, c), xs[t])
        cache.append((hx, f, i, o, g, c, tc))
        h, c = o * tc, c_new
        preds[t] = model.W_out @ h + model.b_out
        cache[-1] = cache[-1] + (h,)
    err = preds - ys
    loss = float(np.mean(err * err))
    dY = 2.0 * err / err.size

    grads = {n: np.zeros_like(getattr(model, n)) for n in PARAM_NAMES}
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        hx, f, i, o, g, c_prev, tc, h_t = cache[t]
        grads["W_out"] += np.outer(dY[t], h_t)
        grads["b_out"] += dY[t]
        dh = model.W_out.T @ dY[t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        dz = {
            "f": df * f * (1.0 - f),
            "i": di * i * (1.0 - i),
            "o": do * o * (1.0 - o),
            "c": dg * (1.0 - g * g),
        }
        dhx = np.zeros(hx.shape[0])
        for gate, d in dz.items():
            grads[f"W_{gate}"] += np.outer(d, hx)
            grads[f"b_{gate}"] += d
            dhx += getattr(model, f"W_{gate}").T @ d
        dh_next = dhx[:H]
        dc_next = dc * f
    return loss, [grads[n] for n in PARAM_NAMES], LstmState(h, c)


def sequence_mse(model: LstmModel, xs, ys, state: LstmState | None = None) -> float:
    state = state or LstmState.zeros(model.hidden_dim)
    total = 0.0
    n = 0
    for x, y in zip(xs, ys):
        state = lstm_step(model, state, x)
        e = predict(model, state) - np.asarray(y, dtype=float)
        total += float(np.sum(e * e))
        n += e.size
    return total / n


def _as_2d(seq) -> np.ndarray:
    a = np.asarray(seq, dtype=float)
    return a.reshape(len(a), -1)


def train(model: LstmModel, inputs, targets, cfg: TrainConfig):
    """Stateful truncated BPTT over consecutive windows of ``cfg.bptt_window``.

    The recurrent state carries across windows but gradients stop at window
    boundaries. Returns a new model and the mean window loss of each epoch.
    """
    xs, ys = _as_2d(inputs), _as_2d(targets)
    if len(xs) != len(ys):
        raise ValueError("inputs and targets differ in length")
    if len(xs) < cfg.bptt_window:
        raise ValueError(f"series length {len(xs)} shorter than bptt_window {cfg.bptt_window}")
    if xs.shape[1] != model.input_dim or ys.shape[1] != model.output_dim:
        raise ValueError("series dimensions do not match the model")
    model = model.copy()
    W = cfg.bptt_window
    curve = []
    for _ in range(cfg.epochs):
        state = LstmState.zeros(model.hidden_dim)
        losses = []
        for start in range(0, len(xs) - W + 1, W):
            loss, grads, state = sequence_loss_and_grad(model, xs[start:start + W], ys[start:start + W], state)
            losses.append(loss)
            sgd_update(model.params(), clip_by_global_norm(grads, cfg.clip_norm), cfg.learning_rate)
        curve.append(float(np.mean(losses)))
    return model, curve


def gradient_check(model: LstmModel, inputs, targets, eps: float = 1e-5) -> float:
    """Max relative error between BPTT and central-difference gradients of the MSE."""
    xs, ys = _as_2d(inputs), _as_2d(targets)
    model = model.copy()
    _, analytic, _ = sequence_loss_and_grad(model, xs, ys)
    numeric = central_difference(lambda: sequence_mse(model, xs, ys), model.params(), eps)
    return max_relative_error(analytic, numeric)
