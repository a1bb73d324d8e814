"""Report figures. Rendered through the Agg canvas directly so no global
pyplot state is touched; PNG metadata is stripped so reruns are byte-identical.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "figsize": (7.0, 4.3),
    "dpi": 100,
}


def _new(nrows=1, sharex=True):
    fig = Figure(figsize=(STYLE["figsize"][0], STYLE["figsize"][1] * (0.6 + 0.4 * nrows)), dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, 1, sharex=sharex, squeeze=False)[:, 0]
    for ax in axes:
        ax.grid(True, alpha=0.3)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    return fig, axes


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})


def plot_metrics(metrics, path):
    t = [m.time for m in metrics]
    fig, (ax_p, ax_u, ax_m) = _new(3)
    ax_p.plot(t, [m.total_power for m in metrics], color="tab:red", lw=1.2)
    ax_p.set_ylabel("power (W)")
    ax_u.plot(t, [m.cpu_utilization for m in metrics], color="tab:blue", lw=1.2)
    ax_u.set_ylabel("cpu util.")
    ax_u.set_ylim(0, 1.05)
    ax_m.step(t, [m.migrations_active for m in metrics], where="post", color="tab:green", lw=1.2,
              label="active migrations")
    ax_m.step(t, [m.deferred_requests for m in metrics], where="post", color="tab:gray", lw=1.0,
              label="deferred requests")
    ax_m.set_ylabel("count")
    ax_m.set_xlabel("step")
    ax_m.legend(frameon=False, fontsize=8)
    _save(fig, path)


def plot_returns(curves: dict[str, list[float]], path, window: int = 20):
    fig, (ax,) = _new(1)
    for label, curve in curves.items():
        y = np.asarray(curve, dtype=float)
        if y.size == 0:
            continue
        x = np.arange(y.size)
        ax.plot(x, y, lw=0.6, alpha=0.35)
        if y.size >= window:
            smooth = np.convolve(y, np.ones(window) / window, mode="valid")
            ax.plot(x[window - 1:], smooth, lw=1.6, label=f"{label} ({window}-ep mean)")
        else:
            ax.lines[-1].set_label(label)
    ax.set_xlabel("episode")
    ax.set_ylabel("return")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def plot_forecast(actual, predicted, path, start: int = 0):
    fig, (ax,) = _new(1)
    actual = np.asarray(actual, dtype=float)
    ax.plot(np.arange(actual.size), actual, color="black", lw=1.0, label="observed")
    pred = np.asarray(predicted, dtype=float)
    ax.plot(start + np.arange(pred.size), pred, color="tab:orange", lw=1.4, ls="--", label="forecast")
    ax.set_xlabel("step")
    ax.set_ylabel("cpu")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
