"""Learning-curve and per-achievement figures written straight to image files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import read_jsonl  # noqa: E402

LOSS_TERMS = ("cdp", "aux", "dyn", "rep", "recon", "action")

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 9,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}

# purple for the full method, then the ablation arms
PALETTE = ["#7b3294", "#e66101", "#1b9e77", "#000000", "#2166ac", "#b2182b"]


class PlotError(RuntimeError):
    pass


def smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def _require(run_dirs: Sequence[Path], name: str) -> dict[Path, list[dict]]:
    missing = [str(d / name) for d in run_dirs if not (d / name).is_file()]
    if missing:
        raise PlotError("missing metrics file(s): " + ", ".join(missing))
    data = {d: read_jsonl(d / name) for d in run_dirs}
    empty = [str(d / name) for d, rows in data.items() if not rows]
    if empty:
        raise PlotError("empty metrics file(s): " + ", ".join(empty))
    return data


def loss_curves(run_dir: Path, out: Path) -> Path:
    """One panel per active loss term for a single run."""
    rows = _require([run_dir], "metrics.jsonl")[run_dir]
    step = np.array([r["step"] for r in rows])
    terms = [t for t in LOSS_TERMS if any(abs(r.get(t, 0.0)) > 0 for r in rows)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(terms), figsize=(2.2 * len(terms), 2.4), squeeze=False)
        for ax, term in zip(axes[0], terms):
            y = np.array([r.get(term, 0.0) for r in rows])
            ax.plot(step, y, lw=0.6, color="0.7")
            w = max(1, len(y) // 50)
            ys = smooth(y, w)
            ax.plot(step[len(step) - len(ys) :], ys, lw=1.2, color=PALETTE[0])
            ax.set_title(term)
            ax.set_xlabel("train step")
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return out


def return_curves(run_dirs: Sequence[Path], out: Path, labels: Sequence[str] | None = None) -> Path:
    """Episode return against environment steps.

    Labels of the form ``arm/seed`` share one colour and one legend entry per arm.
    """
    data = _require(run_dirs, "episodes.jsonl")
    labels = labels or [d.name for d in run_dirs]
    groups = list(dict.fromkeys(lab.split("/")[0] for lab in labels))
    grouped = len(groups) < len(labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        seen = set()
        for i, (d, label) in enumerate(zip(run_dirs, labels)):
            key = label.split("/")[0] if grouped else label
            color = PALETTE[(groups.index(key) if grouped else i) % len(PALETTE)]
            rows = data[d]
            x = np.array([r["env_step"] for r in rows])
            y = np.array([r["return"] for r in rows], dtype=float)
            w = max(1, len(y) // 20)
            ys = smooth(y, w)
            ax.plot(x[len(x) - len(ys) :], ys, color=color, lw=1.0, label=None if key in seen else key)
            seen.add(key)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("episode return")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return out


def achievement_bars(series: dict[str, dict[str, float]], out: Path, errors: dict[str, dict[str, float]] | None = None) -> Path:
    """Grouped log-scale bars of success rate per achievement."""
    if not series:
        raise PlotError("no achievement tables to plot")
    names = list(next(iter(series.values())))
    x = np.arange(len(names))
    width = 0.8 / len(series)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(names) + 2), 3.2))
        for i, (label, rates) in enumerate(series.items()):
            y = np.array([rates[n] for n in names])
            err = None if errors is None else np.array([errors[label][n] for n in names])
            ax.bar(x + i * width, np.maximum(y, 1e-2), width, yerr=err, label=label, color=PALETTE[i % len(PALETTE)])
        ax.set_yscale("log")
        ax.set_ylim(1e-2, 100)
        ax.set_ylabel("success rate (%)")
        ax.set_xticks(x + width * (len(series) - 1) / 2)
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.legend(loc="upper left", bbox_to_anchor=(1.0, 1.0))
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return out


def run_labels(run_dirs: Sequence[Path]) -> list[str]:
    """Directory names, prefixed by the parent where names repeat (arm/seed0)."""
    names = [d.name for d in run_dirs]
    if len(set(names)) == len(names):
        return names
    return [f"{d.parent.name}/{d.name}" for d in run_dirs]


def plot_runs(run_dirs: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    run_dirs = [Path(d) for d in run_dirs]
    out_dir = Path(out_dir)
    _require(run_dirs, "metrics.jsonl")
    _require(run_dirs, "episodes.jsonl")
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = run_labels(run_dirs)
    written = [loss_curves(d, out_dir / f"losses_{lab.replace('/', '_')}.png") for d, lab in zip(run_dirs, labels)]
    written.append(return_curves(run_dirs, out_dir / "returns.png", labels))
    reports = {}
    for d, lab in zip(run_dirs, labels):
        if (d / "report.json").is_file():
            reports[lab] = json.loads((d / "report.json").read_text())["achievements"]
    if reports and any("/" in lab for lab in reports):
        # several seeds per arm: bars are seed means, error bars the seed std
        arms: dict[str, list[dict]] = {}
        for lab, rates in reports.items():
            arms.setdefault(lab.split("/")[0], []).append(rates)
        means, stds = {}, {}
        for arm, tables in arms.items():
            vals = {a: np.array([t[a] for t in tables]) for a in tables[0]}
            means[arm] = {a: float(v.mean()) for a, v in vals.items()}
            stds[arm] = {a: float(v.std(ddof=1)) if len(v) > 1 else 0.0 for a, v in vals.items()}
        written.append(achievement_bars(means, out_dir / "achievements.png", errors=stds))
    elif reports:
        written.append(achievement_bars(reports, out_dir / "achievements.png"))
    return written
