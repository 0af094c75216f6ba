"""Static SVG figures for fits and training traces.

Rendering is pinned for byte-stable output: Agg backend, a fixed SVG hash
salt and no creation date in the metadata.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "ntkcorr",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.right": False,
    "axes.spines.top": False,
    "figure.figsize": (4.8, 3.4),
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_fit(samples, fit, path, title: str | None = None) -> None:
    """Per-seed values, per-width quantiles and the fitted envelope on log-log axes."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ns = np.array([s.n for s in samples], float)
        vals = np.array([s.value for s in samples], float)
        pos = vals > 0
        ax.scatter(ns[pos], vals[pos], s=8, color="0.6", label="seeds")
        widths = np.array(fit.widths, float)
        q = np.array([fit.per_width_stats[n]["q_quantile"] for n in fit.widths])
        ax.scatter(widths[q > 0], q[q > 0], s=24, color="C0", marker="s",
                   label=f"q={fit.quantile:g}")
        if not fit.degenerate:
            grid = np.geomspace(widths.min(), widths.max(), 50)
            ax.plot(grid, fit.envelope(grid), color="C1",
                    label=f"slope {fit.exponent:.3f}")
        if np.any(pos) or np.any(q > 0):
            ax.set_xscale("log")
            ax.set_yscale("log")
        else:
            ax.text(0.5, 0.5, "all values zero", transform=ax.transAxes, ha="center")
        ax.set_xlabel("width n")
        ax.set_ylabel("value")
        ax.set_title(title or fit.statistic)
        ax.legend(frameon=False, fontsize=7)
        _save(fig, path)


def plot_traces(traces: dict, column: str, path, title: str | None = None) -> None:
    """Overlay one trace column per run; ``traces`` maps label -> (steps, values)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        any_pos = False
        for i, (label, (steps, values)) in enumerate(sorted(traces.items())):
            values = np.asarray(values, float)
            keep = values > 0
            any_pos |= bool(np.any(keep))
            ax.plot(np.asarray(steps)[keep], values[keep], lw=0.8, color=f"C{i % 10}", label=label)
        if any_pos:
            ax.set_yscale("log")
        else:
            ax.text(0.5, 0.5, "identically zero", transform=ax.transAxes, ha="center")
        ax.set_xlabel("step s")
        ax.set_ylabel(column)
        ax.set_title(title or column)
        if traces:
            ax.legend(frameon=False, fontsize=6, ncol=2)
        _save(fig, path)


def plot_exponent_index(entries: dict, path) -> None:
    """Horizontal bars of fitted exponents; ``entries`` maps statistic -> fit dict."""
    names = sorted(entries)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.6, 0.22 * max(len(names), 4) + 1.0))
        ys = np.arange(len(names))
        exps, errs, colors = [], [], []
        for name in names:
            e = entries[name].get("exponent")
            exps.append(0.0 if e is None else e)
            errs.append(entries[name].get("exponent_stderr") or 0.0)
            colors.append("0.7" if e is None else "C0")
        ax.barh(ys, exps, xerr=errs, color=colors, height=0.6)
        ax.axvline(0.0, color="k", lw=0.6)
        ax.set_yticks(ys)
        ax.set_yticklabels(names, fontsize=6)
        ax.invert_yaxis()
        ax.set_xlabel("fitted exponent (grey: degenerate)")
        _save(fig, path)
