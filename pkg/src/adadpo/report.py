"""Delimited output and matplotlib figures for runs, sweeps and gradient checks."""

import csv
import json
import math

from .trainer import METRIC_COLUMNS

# solid for adaptive methods, dashed for their bases
STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
}


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([repr(v) if isinstance(v, float) else v for v in m.row()])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _series(metrics, key):
    return [m[key] if isinstance(m, dict) else getattr(m, key) for m in metrics]


def _linestyle(label):
    return "-" if "Ada" in label else "--"


def plot_dynamics(runs, path):
    """Training-dynamics panels for one or more runs.

    ``runs`` maps a legend label to a list of StepMetrics (or CSV row dicts).
    """
    plt = _pyplot()
    panels = [
        ("eval_loss", "eval loss", False),
        ("reward_accuracy", "reward accuracy", False),
        ("kl_margin_mean", r"$\beta\times$KL margin", False),
        ("reward_margin_mean", "reward margin", False),
        (None, r"mean $|\partial L/\partial P_w|$ / mean $|\partial L/\partial P_l|$", True),
        ("balance_ratio", "in-space balance (unclamped)", False),
    ]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(10, 5.6))
        for ax, (key, title, logy) in zip(axes.flat, panels):
            for label, metrics in runs.items():
                steps = _series(metrics, "step")
                if key is None:
                    ys = [a / b if b else math.nan for a, b in zip(_series(metrics, "mean_abs_dPw"), _series(metrics, "mean_abs_dPl"))]
                else:
                    ys = _series(metrics, key)
                ax.plot(steps, ys, _linestyle(label), label=label)
            if key is None:
                ax.axhline(1.0, color="0.6", lw=0.8, zorder=0)
            if logy:
                ax.set_yscale("log")
            ax.set_title(title)
            ax.set_xlabel("step")
        axes.flat[0].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_sweep(summary, path, metrics=("eval_loss", "reward_accuracy", "reward_margin_mean", "kl_margin_mean")):
    """Final metrics against log10(beta), one line per (method, lr)."""
    plt = _pyplot()
    cells = [c for c in summary["grid"] if c["status"] == "ok"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0))
        for ax, key in zip(axes, metrics):
            groups = {}
            for c in cells:
                groups.setdefault((c["method"], c["lr"]), []).append((math.log10(c["beta"]), c["final"][key]))
            for (method, lr), pts in sorted(groups.items()):
                pts.sort()
                ax.plot([p[0] for p in pts], [p[1] for p in pts], _linestyle(method), marker="o", ms=3,
                        label=f"{method} lr={lr:g}")
            ax.set_xlabel(r"$\log_{10}\beta$")
            ax.set_title(key)
        axes[0].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_balance(points, path, ceiling_C):
    """Scatter of the in-space balance ratio against the raw adaptive log-ratio.

    ``points`` maps a method name to a list of (raw log-ratio, balanced ratio).
    """
    plt = _pyplot()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.6))
        for method, pts in points.items():
            ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=4, label=method, alpha=0.6)
        if math.isfinite(ceiling_C):
            ax.axvline(math.log(ceiling_C), color="0.5", lw=0.8, ls=":")
        ax.set_yscale("log")
        ax.set_xlabel("raw adaptive log-ratio")
        ax.set_ylabel("balance ratio")
        ax.legend(frameon=False, markerscale=3)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
