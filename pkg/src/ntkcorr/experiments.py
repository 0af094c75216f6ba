"""Experiment configs and the sweep drivers behind the command line."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import multiprocessing
import re
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import plotting
from .asymptotics import (
    InsufficientDataError, SweepSample, by_statistic, fit_power_law, write_fit_json,
    write_samples_csv,
)
from .derivatives import TangentFactors, correlation, correlation_norm_hopm
from .dynamics import pgdml_audit, train_and_trace
from .network import ConfigError, NetworkConfig, Task, TaskSpec, init_params, layer_norm_audit
from .selftest import run_norm_battery

CORR_ORDERS = ((0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (2, 1))
CORR_STATS = tuple(f"corr_D{D}_d{d}_{mode}" for D, d in CORR_ORDERS
                   for mode in ("distinct", "same"))
INIT_STATS = ("kernel_diag", "pgdml1_output", "pgdml2_first_step", "pgdml3_kernel_ratio",
              "pgdml4_D2", "pgdml4_D3")
_CORR_RE = re.compile(r"corr_D(\d)_d(\d)_(distinct|same)$")
_LAYER_RE = re.compile(r"layer\d+_norm$")
_DEV_RE = re.compile(r"delta_(max_s\d+|max_all|final)_r[0-9.]+$")
STATUS_HEADER = ("statistic", "n", "seed", "status", "message")


class InputError(ValueError):
    """Bad configuration or missing inputs; maps to exit code 2."""


def is_registered(stat: str) -> bool:
    return (stat in CORR_STATS or stat in INIT_STATS or bool(_LAYER_RE.match(stat))
            or bool(_DEV_RE.match(stat)))


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str = "experiment"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    widths: tuple = (32, 64, 128, 256, 512, 1024)
    seeds: int = 16
    statistics: tuple = ()
    steps: int = 200
    rescales: tuple = (1.0,)
    out_dir: str | None = None
    jobs: int = 1
    master_seed: int = 0
    quantile: float = 0.95
    fixed_step: int = 100

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(n) for n in self.widths))
        object.__setattr__(self, "statistics", tuple(self.statistics))
        object.__setattr__(self, "rescales", tuple(float(r) for r in self.rescales))
        if not self.widths or any(n <= 0 for n in self.widths):
            raise ConfigError("widths must be positive")
        if self.seeds < 1 or self.jobs < 1 or self.steps < 1:
            raise ConfigError("seeds, jobs and steps must be >= 1")
        if any(r <= 0 for r in self.rescales):
            raise ConfigError("rescale factors must be > 0")
        if not 0 <= self.fixed_step <= self.steps:
            raise ConfigError("fixed_step must lie in [0, steps]")
        if not 0 < self.quantile <= 1:
            raise ConfigError("quantile must lie in (0, 1]")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        bad = [s for s in self.statistics if not is_registered(s)]
        if bad:
            raise ConfigError(f"unregistered statistics: {bad}")
        if (self.network.input_dim, self.network.output_dim) != (self.task.input_dim,
                                                                 self.task.output_dim):
            raise ConfigError("network and task disagree on input/output dimensions")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["network"] = self.network.to_dict()
        d["task"] = self.task.to_dict()
        for k in ("widths", "statistics", "rescales"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        d = dict(d)
        if "network" in d:
            d["network"] = NetworkConfig.from_dict(d["network"])
        if "task" in d:
            d["task"] = TaskSpec.from_dict(d["task"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_json(Path(path).read_text())
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


def cell_seed(master_seed: int, statistic: str, n: int, seed_index: int) -> int:
    """Stable 63-bit seed for one sweep cell; independent of the grid around it."""
    key = f"{master_seed}|{statistic}|{n}|{seed_index}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


# --- cell execution --------------------------------------------------------------

@dataclass
class CellResult:
    statistic: str
    n: int
    seed: int
    status: str
    samples: list
    payload: object = None
    message: str = ""


def _guarded(job):
    fn, args = job
    try:
        return fn(*args)
    except Exception as exc:  # crash isolation: the sweep keeps going
        stat, n, seed = args[1], args[2], args[3]
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return CellResult(stat, n, seed, "failed", [], None, msg)


def run_cells(jobs: list, workers: int = 1) -> list[CellResult]:
    """Run (fn, args) jobs, in-process or on a bounded process pool.

    Results come back in submission order, so downstream output does not
    depend on the worker count.
    """
    if workers <= 1 or len(jobs) <= 1:
        return [_guarded(j) for j in jobs]
    # spawn, not fork: the parent may hold threads (BLAS, or jax in tests)
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_guarded, jobs, chunksize=1))


def _corr_cell(cfg: ExperimentConfig, stat: str, n: int, seed: int) -> CellResult:
    D, d, mode = _parse_corr(stat)
    params_seed = cell_seed(cfg.master_seed, stat, n, seed)
    params = init_params(cfg.network.with_width(n), params_seed)
    probes = Task(cfg.task).probes
    xs = [probes[i] for i in range(d + 1)] if mode == "distinct" else [probes[0]] * (d + 1)
    if D == 2:
        res = correlation_norm_hopm(params, d, xs, restarts=2, tol=1e-8, max_iters=200,
                                    seed=params_seed % 2 ** 32)
    else:
        res = correlation(params, D, d, xs)
    return CellResult(stat, n, seed, "ok", [SweepSample(n, seed, res.magnitude, stat)])


def _parse_corr(stat):
    m = _CORR_RE.match(stat)
    if not m or stat not in CORR_STATS:
        raise ConfigError(f"unsupported correlation statistic {stat!r}")
    return int(m.group(1)), int(m.group(2)), m.group(3)


def _init_cell(cfg: ExperimentConfig, stat: str, n: int, seed: int) -> CellResult:
    s = cell_seed(cfg.master_seed, stat, n, seed)
    task = Task(cfg.task)
    net = cfg.network.with_width(n)
    out = []
    if net.model_kind != "quadratic-perp":
        for samples in layer_norm_audit(net, [n], [s], task=task).values():
            out += [replace(x, seed=seed) for x in samples]
    for samples in pgdml_audit(net, [n], [s], task).values():
        out += [replace(x, seed=seed) for x in samples]
    tf = TangentFactors(init_params(net, s), task.probes[:1])
    out.append(SweepSample(n, seed, abs(float(tf.kernel(tf, net.eta)[0, 0, 0, 0])),
                           "kernel_diag"))
    return CellResult(stat, n, seed, "ok", out)


def _dev_stat(kind: str, r: float) -> str:
    return f"delta_{kind}_r{r:g}"


def _deviation_cell(cfg: ExperimentConfig, stat: str, n: int, seed: int,
                    r: float) -> CellResult:
    s = cell_seed(cfg.master_seed, stat, n, seed)
    trace = train_and_trace(cfg.network.with_width(n), Task(cfg.task), cfg.steps, seed=s,
                            rescale=r)
    trace.context, trace.checkpoints = {}, {}
    if trace.status != "ok":
        return CellResult(stat, n, seed, trace.status, [], trace, "diverged")
    dm = trace.column("delta_max")
    samples = [SweepSample(n, seed, float(dm[cfg.fixed_step]), _dev_stat(f"max_s{cfg.fixed_step}", r)),
               SweepSample(n, seed, float(dm.max()), _dev_stat("max_all", r)),
               SweepSample(n, seed, float(dm[-1]), _dev_stat("final", r))]
    return CellResult(stat, n, seed, "ok", samples, trace)


# --- shared output ---------------------------------------------------------------

def _write_status(path, results):
    rows = sorted((r.statistic, r.n, r.seed, r.status, r.message) for r in results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATUS_HEADER)
        w.writerows(rows)


def _fit_and_plot(out: Path, samples: list, quantile: float) -> dict:
    """Fit every statistic; returns {statistic: AsymptoticFit or error string}."""
    (out / "fits").mkdir(exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    fits = {}
    for stat, group in by_statistic(samples).items():
        try:
            fit = fit_power_law(group, quantile)
        except InsufficientDataError as exc:
            fits[stat] = str(exc)
            continue
        fit.statistic = stat
        write_fit_json(out / "fits" / f"{stat}.json", fit)
        plotting.plot_fit(group, fit, out / "plots" / f"{stat}.svg")
        fits[stat] = fit
    return fits


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, fits: dict,
                    extra: dict | None = None) -> None:
    man = {
        "experiment_id": cfg.experiment_id,
        "command": command,
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.master_seed,
        "fits": sorted(f"fits/{s}.json" for s, f in fits.items() if not isinstance(f, str)),
        "statuses": {s: ("insufficient-data: " + f if isinstance(f, str) else f.status)
                     for s, f in sorted(fits.items())},
    }
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(cfg.to_json())


def _prepare(cfg: ExperimentConfig, out) -> Path:
    out = Path(out if out is not None else (cfg.out_dir or "out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _require_widths(cfg):
    if len(set(cfg.widths)) < 3:
        raise InputError(f"need >= 3 distinct widths for a fit, got {list(cfg.widths)}")
    if cfg.seeds < 3:
        raise InputError("need >= 3 seeds per width for a fit")


@dataclass
class SweepOutcome:
    out: Path
    samples: list
    fits: dict
    results: list
    summary: dict = field(default_factory=dict)


# --- commands --------------------------------------------------------------------

def run_init_audit(cfg: ExperimentConfig, out=None) -> SweepOutcome:
    _require_widths(cfg)
    out = _prepare(cfg, out)
    jobs = [(_init_cell, (cfg, "init", n, k)) for n in cfg.widths for k in range(cfg.seeds)]
    results = run_cells(jobs, cfg.jobs)
    samples = [s for r in results for s in r.samples]
    write_samples_csv(out / "samples.csv", samples)
    _write_status(out / "cells_status.csv", results)
    fits = _fit_and_plot(out, samples, cfg.quantile)
    _write_manifest(out, cfg, "init-audit", fits)
    return SweepOutcome(out, samples, fits, results)


def corr_statistics(cfg: ExperimentConfig) -> tuple:
    stats = cfg.statistics or CORR_STATS
    for s in stats:
        _parse_corr(s)
    return tuple(stats)


def run_corr_sweep(cfg: ExperimentConfig, out=None) -> SweepOutcome:
    stats = corr_statistics(cfg)  # config errors surface before any cell runs
    _require_widths(cfg)
    out = _prepare(cfg, out)
    jobs = [(_corr_cell, (cfg, s, n, k)) for s in stats for n in cfg.widths
            for k in range(cfg.seeds)]
    results = run_cells(jobs, cfg.jobs)
    samples = [s for r in results for s in r.samples]
    write_samples_csv(out / "samples.csv", samples)
    _write_status(out / "cells_status.csv", results)
    fits = _fit_and_plot(out, samples, cfg.quantile)
    with open(out / "exponent_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("statistic", "exponent", "exponent_stderr", "r_squared", "status"))
        for s in stats:
            f = fits.get(s)
            if f is None or isinstance(f, str):
                w.writerow((s, "", "", "", f or "no samples"))
            else:
                j = f.to_json()
                w.writerow((s, j["exponent"], j["exponent_stderr"], j["r_squared"], f.status))
    _write_manifest(out, cfg, "corr-sweep", fits)
    return SweepOutcome(out, samples, fits, results)


def _loglog_slope(values, lo: int, hi: int) -> float:
    s = np.arange(lo, hi + 1)
    v = np.asarray(values[lo:hi + 1], float)
    keep = (v > 0) & (s > 0)
    if keep.sum() < 3:
        return math.nan
    return float(np.polyfit(np.log(s[keep]), np.log(v[keep]), 1)[0])


def run_ntk_deviation(cfg: ExperimentConfig, out=None) -> SweepOutcome:
    out = _prepare(cfg, out)
    (out / "traces").mkdir(exist_ok=True)
    jobs = []
    for r in cfg.rescales:
        for n in cfg.widths:
            for k in range(cfg.seeds):
                jobs.append((_deviation_cell, (cfg, f"deviation_r{r:g}", n, k, r)))
    results = run_cells(jobs, cfg.jobs)
    S = cfg.steps
    per_run = []
    overlays = {}
    for res, (_, args) in zip(results, jobs):
        r = args[4]
        tr = res.payload
        if tr is None:
            continue
        stem = f"trace_r{r:g}_n{res.n}_seed{res.seed}"
        tr.write_csv(out / "traces" / f"{stem}.csv")
        meta = tr.metadata()
        meta.update({"config_hash": cfg.config_hash(), "seed_index": res.seed})
        (out / "traces" / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if res.status == "ok":
            dm = tr.column("delta_max")
            per_run.append({"r": r, "n": res.n, "seed": res.seed,
                            "slope": _loglog_slope(dm, S // 2, S),
                            "T_r2": tr.decay.r_squared, "exponential": tr.decay.exponential,
                            "delta_fixed": float(dm[cfg.fixed_step])})
            if res.seed == 0:
                overlays.setdefault(r, {})[f"n={res.n}"] = (tr.column("step"), dm)
    _write_status(out / "cells_status.csv", results)
    samples = [s for r in results for s in r.samples]
    write_samples_csv(out / "samples.csv", samples)
    ok_cells = [r for r in results if r.status == "ok"]
    fits = _fit_and_plot(out, samples, cfg.quantile) if len(cfg.widths) >= 3 and ok_cells else {}
    (out / "plots").mkdir(exist_ok=True)
    for r, tr in overlays.items():
        plotting.plot_traces(tr, "delta_max", out / "plots" / f"delta_overlay_r{r:g}.svg",
                             title=f"max probe deviation, r={r:g}")
    summary = _deviation_summary(cfg, per_run, results)
    (out / "deviation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, cfg, "ntk-deviation", fits, {"all_diverged": not ok_cells})
    return SweepOutcome(out, samples, fits, results, summary)


def _deviation_summary(cfg, per_run, results) -> dict:
    def finite(xs):
        return [x for x in xs if x is not None and math.isfinite(x)]

    summary = {"steps": cfg.steps, "fixed_step": cfg.fixed_step, "by_width": {},
               "diverged": sum(r.status == "diverged" for r in results),
               "failed": sum(r.status == "failed" for r in results)}
    for r in cfg.rescales:
        for n in cfg.widths:
            runs = [p for p in per_run if p["r"] == r and p["n"] == n]
            if not runs:
                continue
            slopes = finite([p["slope"] for p in runs])
            summary["by_width"][f"r{r:g}_n{n}"] = {
                "runs": len(runs),
                "slope_median": float(np.median(slopes)) if slopes else None,
                "slope_max": float(np.max(slopes)) if slopes else None,
                "exponential_fraction": float(np.mean([p["exponential"] for p in runs])),
                "T_r2_median": float(np.median([p["T_r2"] for p in runs])),
                "delta_fixed_median": float(np.median([p["delta_fixed"] for p in runs])),
            }
    base = min(cfg.rescales)
    ratios = {}
    for r in cfg.rescales:
        if r == base:
            continue
        for n in cfg.widths:
            a = summary["by_width"].get(f"r{base:g}_n{n}")
            b = summary["by_width"].get(f"r{r:g}_n{n}")
            if a and b and a["delta_fixed_median"] > 0:
                ratios[f"r{r:g}/r{base:g}_n{n}"] = b["delta_fixed_median"] / a["delta_fixed_median"]
    summary["rescale_ratios"] = ratios
    return summary


def run_norm_selftest(out=None, cases: int = 50, seed: int = 0, fault: str | None = None,
                      dump_csv: bool = False):
    results = run_norm_battery(cases=cases, seed=seed, fault=fault)
    if dump_csv and out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "selftest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("group", "case", "margin"))
            for res in results:
                for g, c, m in res.rows:
                    w.writerow((g, c, repr(float(m))))
    return results


# --- report ----------------------------------------------------------------------

def build_report(directory) -> dict:
    """Aggregate every manifest's fits under ``directory`` into one report.

    Writes report.json and index.svg into the directory; raises InputError
    when nothing is found or a manifest names files that are absent.
    """
    root = Path(directory)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    manifests = sorted(root.rglob("manifest.json"))
    if not manifests:
        raise InputError(f"no manifest.json under {root}")
    missing, entries, experiments = [], {}, []
    for man_path in manifests:
        man = json.loads(man_path.read_text())
        base = man_path.parent
        rel = base.relative_to(root).as_posix() or "."
        experiments.append({"experiment_id": man.get("experiment_id"), "command": man.get("command"),
                            "path": rel, "config_hash": man.get("config_hash")})
        for f in man.get("fits", []):
            p = base / f
            if not p.exists():
                missing.append(str(p))
                continue
            fit = json.loads(p.read_text())
            key = fit["statistic"]
            if key in entries:
                key = f"{rel}:{key}"
            fit["source"] = f"{rel}/{f}"
            fit["status"] = man.get("statuses", {}).get(fit["statistic"], "ok")
            entries[key] = fit
    if missing:
        raise InputError("missing inputs: " + ", ".join(sorted(missing)))
    if not entries:
        raise InputError(f"no fit files listed under {root}")
    report = {"experiments": experiments, "statistics": dict(sorted(entries.items()))}
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plotting.plot_exponent_index(entries, root / "index.svg")
    return report
