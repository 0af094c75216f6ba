"""Finite-width surrogates for stochastic big-O: quantile envelopes and bound tables."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

ZERO_FLOOR = 1e-300
CSV_HEADER = ("statistic", "n", "seed", "value")


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSample:
    n: int
    seed: int
    value: float
    statistic: str = ""

    def __post_init__(self):
        if not self.value >= 0:  # also rejects NaN
            raise ValueError(f"sample value must be >= 0, got {self.value}")
        if self.n <= 0:
            raise ValueError("width must be positive")


@dataclass
class AsymptoticFit:
    exponent: float
    log_prefactor: float
    exponent_stderr: float
    r_squared: float
    quantile: float
    per_width_stats: dict
    status: str = "ok"
    floored: bool = False
    statistic: str = ""

    @property
    def widths(self) -> list[int]:
        return sorted(self.per_width_stats)

    @property
    def degenerate(self) -> bool:
        return self.status != "ok"

    def envelope(self, n) -> np.ndarray:
        return np.exp(self.log_prefactor) * np.asarray(n, float) ** self.exponent

    def to_json(self) -> dict:
        def num(x):
            return None if x is None or not math.isfinite(x) else float(x)

        counts = sorted({s["count"] for s in self.per_width_stats.values()})
        return {
            "statistic": self.statistic,
            "exponent": num(self.exponent),
            "exponent_stderr": num(self.exponent_stderr),
            "log_prefactor": num(self.log_prefactor),
            "r_squared": num(self.r_squared),
            "quantile": self.quantile,
            "widths": self.widths,
            "seeds_per_width": counts[0] if len(counts) == 1 else counts,
        }


def _group(samples: Iterable[SweepSample]) -> dict[int, np.ndarray]:
    by_n = defaultdict(list)
    for s in samples:
        by_n[int(s.n)].append(float(s.value))
    return {n: np.asarray(v) for n, v in sorted(by_n.items())}


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    """Slope, intercept, slope stderr, r^2 of y ~ a + b x."""
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    dof = len(x) - 2
    sxx = float(np.sum((x - x.mean()) ** 2))
    stderr = math.sqrt(ss_res / dof / sxx) if dof > 0 and sxx > 0 else 0.0
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[1]), float(coef[0]), stderr, min(max(r2, 0.0), 1.0)


def fit_power_law(samples: Sequence[SweepSample], quantile: float = 0.95,
                  min_widths: int = 3, min_seeds: int = 3,
                  floor: float = ZERO_FLOOR) -> AsymptoticFit:
    """Least-squares power law through the per-width ``quantile`` of the values.

    The fitted envelope exp(log_prefactor) * n**exponent is the empirical
    stand-in for the tightest f with value = O(f). Zero quantiles are floored
    at ``floor`` (``floored`` is set); a width whose values are all zero makes
    the fit degenerate and the exponent NaN.
    """
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    groups = _group(samples)
    if len(groups) < min_widths:
        raise InsufficientDataError(
            f"need >= {min_widths} distinct widths, got {len(groups)}")
    thin = [n for n, v in groups.items() if len(v) < min_seeds]
    if thin:
        raise InsufficientDataError(f"need >= {min_seeds} seeds at widths {thin}")
    stat_name = next((s.statistic for s in samples if s.statistic), "")

    per_width = {}
    for n, vals in groups.items():
        per_width[n] = {
            "mean": float(np.mean(vals)),
            "median": float(np.median(vals)),
            "q_quantile": float(np.quantile(vals, quantile)),
            "count": int(len(vals)),
        }
    zero_widths = [n for n, v in groups.items() if not np.any(v > 0)]
    if zero_widths:
        return AsymptoticFit(float("nan"), float("nan"), float("nan"), float("nan"),
                             quantile, per_width,
                             status=f"degenerate: all values zero at widths {zero_widths}",
                             floored=True, statistic=stat_name)

    ns = np.array(list(per_width), float)
    q = np.array([per_width[n]["q_quantile"] for n in per_width])
    floored = bool(np.any(q <= 0))
    q = np.maximum(q, floor)
    slope, intercept, stderr, r2 = _ols(np.log(ns), np.log(q))
    return AsymptoticFit(slope, intercept, stderr, r2, quantile, per_width,
                         floored=floored, statistic=stat_name)


@dataclass
class BoundTable:
    rows: list  # (c, n, probability)
    consistent: bool
    spearman: float

    def probability(self, c: float, n: int) -> float:
        for cc, nn, p in self.rows:
            if cc == c and nn == n:
                return p
        raise KeyError((c, n))


def verify_bound(samples: Sequence[SweepSample], f_exponent: float,
                 c_grid: Sequence[float], target: float = 0.95) -> BoundTable:
    """Fraction of seeds with value <= c * n**f_exponent, for every (c, n).

    Consistent means: at the largest c the probability at the largest width
    reaches ``target`` and does not trend downward over the upper half of
    the width grid (Spearman rho >= 0; a constant sequence counts as 0).
    """
    if len(c_grid) == 0:
        raise ValueError("c_grid must be nonempty")
    c_grid = [float(c) for c in c_grid]
    if any(c <= 0 for c in c_grid) or c_grid != sorted(c_grid):
        raise ValueError("c_grid must be positive and ascending")
    groups = _group(samples)
    rows = []
    for c in c_grid:
        for n, vals in groups.items():
            bound = c * float(n) ** f_exponent
            rows.append((c, n, float(np.mean(vals <= bound))))
    c_max = c_grid[-1]
    top = [(n, p) for c, n, p in rows if c == c_max]
    half = top[len(top) // 2:] if len(top) >= 4 else top
    probs = [p for _, p in half]
    if len(half) < 2 or np.ptp(probs) == 0:
        rho = 0.0
    else:
        rho = float(stats.spearmanr([n for n, _ in half], probs)[0])
    consistent = top[-1][1] >= target and rho >= 0
    return BoundTable(rows, bool(consistent), rho)


def uniform_family_fit(families: Mapping[str, Sequence[SweepSample]],
                       quantile: float = 0.95) -> tuple[dict, AsymptoticFit]:
    """Fit each family, then the pointwise max of the per-width quantiles.

    The shared envelope is the finite-family analogue of a uniform bound.
    """
    fits = {label: fit_power_law(s, quantile) for label, s in families.items()}
    widths = sorted(set.intersection(*(set(f.per_width_stats) for f in fits.values())))
    if len(widths) < 3:
        raise InsufficientDataError("families share fewer than 3 widths")
    per_width = {}
    for n in widths:
        q = max(f.per_width_stats[n]["q_quantile"] for f in fits.values())
        per_width[n] = {
            "mean": max(f.per_width_stats[n]["mean"] for f in fits.values()),
            "median": max(f.per_width_stats[n]["median"] for f in fits.values()),
            "q_quantile": q,
            "count": min(f.per_width_stats[n]["count"] for f in fits.values()),
        }
    if any(per_width[n]["q_quantile"] <= 0 for n in widths):
        shared = AsymptoticFit(float("nan"), float("nan"), float("nan"), float("nan"),
                               quantile, per_width, status="degenerate: zero envelope",
                               statistic="shared")
        return fits, shared
    ns = np.array(widths, float)
    q = np.array([per_width[n]["q_quantile"] for n in widths])
    slope, intercept, stderr, r2 = _ols(np.log(ns), np.log(q))
    return fits, AsymptoticFit(slope, intercept, stderr, r2, quantile, per_width,
                               statistic="shared")


# --- CSV / JSON ------------------------------------------------------------------

def fmt_float(x: float) -> str:
    return repr(float(x))


def write_samples_csv(path, samples: Iterable[SweepSample]) -> None:
    rows = sorted(samples, key=lambda s: (s.statistic, s.n, s.seed))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in rows:
            w.writerow((s.statistic, s.n, s.seed, fmt_float(s.value)))


def read_samples_csv(path) -> list[SweepSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        return [SweepSample(int(r["n"]), int(r["seed"]), float(r["value"]), r["statistic"])
                for r in reader]


def by_statistic(samples: Iterable[SweepSample]) -> dict[str, list[SweepSample]]:
    out = defaultdict(list)
    for s in samples:
        out[s.statistic].append(s)
    return dict(sorted(out.items()))


def write_fit_json(path, fit: AsymptoticFit) -> None:
    Path(path).write_text(json.dumps(fit.to_json(), indent=2, sort_keys=False) + "\n")
