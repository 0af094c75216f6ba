"""Measurements behind the default experiment bundle and their pass bands."""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .derivatives import finite_difference_mixed, jet_forward, kernel_eval, kernel_layerwise
from .experiments import (
    ExperimentConfig, build_report, run_corr_sweep, run_init_audit, run_norm_selftest,
    run_ntk_deviation,
)
from .network import NetworkConfig, QuadraticPerpParams, Task, init_params


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool | None  # None: not evaluated in this run
    detail: str

    def line(self) -> str:
        tag = {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]
        return f"criterion {self.number:2d} [{tag}] {self.name}: {self.detail}"


def measure_jets(cases: int = 50, seed: int = 0, width: int = 8) -> dict:
    """Worst relative jet/finite-difference error per order, plus linear-model jets."""
    rng = np.random.default_rng(seed)
    worst = {1: 0.0, 2: 0.0, 3: 0.0}
    for case in range(cases):
        cfg = NetworkConfig(depth=3, input_dim=3, output_dim=2, hidden_width=width)
        params = init_params(cfg, int(rng.integers(2 ** 32)))
        x = rng.standard_normal(cfg.input_dim)
        for k in (1, 2, 3):
            dirs = [v / np.linalg.norm(v) for v in rng.standard_normal((k, params.n_params))]
            jet = jet_forward(params, x, dirs).top
            fd = finite_difference_mixed(params, x, dirs, k)
            err = float(np.max(np.abs(jet - fd) / np.maximum(np.abs(jet), 1.0)))
            worst[k] = max(worst[k], err)
    lin = NetworkConfig(depth=1, input_dim=3, output_dim=2, activation="identity")
    lin_max = 0.0
    for case in range(10):
        params = init_params(lin, case)
        x = rng.standard_normal(3)
        for k in (2, 3, 4):
            dirs = list(rng.standard_normal((k, params.n_params)))
            lin_max = max(lin_max, float(np.max(np.abs(jet_forward(params, x, dirs).top))))
    return {"worst": worst, "linear_max": lin_max}


def measure_kernels(cases: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(cases):
        cfg = NetworkConfig(depth=int(rng.integers(2, 5)), input_dim=3,
                            output_dim=int(rng.integers(1, 3)),
                            hidden_width=int(rng.integers(4, 33)),
                            activation=("tanh", "sin", "erf", "softplus")[case % 4])
        params = init_params(cfg, case)
        x, x2 = rng.standard_normal((2, 3))
        a, b = kernel_layerwise(params, x, x2), kernel_eval(params, x, x2)
        worst = max(worst, float(np.max(np.abs(a - b)) / np.max(np.abs(b))))
    return worst


def fit_exponent(outcome, stat: str):
    f = outcome.fits.get(stat)
    return None if f is None or isinstance(f, str) or f.degenerate else f.exponent


def flatness(outcome, width: int, r: float = 1.0) -> dict:
    return outcome.summary["by_width"][f"r{r:g}_n{width}"]


def quad_deviation(outcome, task: Task, quantile: float = 0.95) -> dict:
    """Per feature count: quantile over seeds of max_s delta_max / output scale."""
    scale = task.output_scale()
    out = {}
    for res in outcome.results:
        if res.payload is not None and res.status == "ok":
            out.setdefault(res.n, []).append(float(res.payload.column("delta_max").max()) / scale)
    return {n: float(np.quantile(v, quantile)) for n, v in sorted(out.items())}


def quad_hessian_norm(cfg: NetworkConfig, task: Task) -> float:
    p = QuadraticPerpParams.initialize(cfg, 0)
    g = p.rotate(p.features(task.probes[:1]))[0]
    return float(np.linalg.norm(2.0 * np.outer(g, g), 2))


def determinism(cfg: ExperimentConfig) -> bool:
    small = replace(cfg, widths=(16, 24, 32), seeds=3,
                    statistics=("corr_D0_d1_distinct", "corr_D0_d2_distinct"))
    with tempfile.TemporaryDirectory() as tmp:
        a = run_corr_sweep(replace(small, jobs=1), Path(tmp) / "a")
        b = run_corr_sweep(replace(small, jobs=2), Path(tmp) / "b")
        return (a.out / "samples.csv").read_bytes() == (b.out / "samples.csv").read_bytes()


def check_norm_algebra(cfg, out) -> CriterionResult:
    battery = run_norm_selftest(out / "selftest", dump_csv=True)
    return CriterionResult(1, "norm algebra", all(b.passed for b in battery),
                           ", ".join(f"{b.group} {b.cases - b.failures}/{b.cases}" for b in battery))


def check_jets(cfg, out) -> CriterionResult:
    jets = measure_jets()
    ok = max(jets["worst"].values()) <= 1e-5 and jets["linear_max"] == 0.0
    worst = ", ".join(f"order {k} {v:.1e}" for k, v in jets["worst"].items())
    return CriterionResult(2, "jet vs finite differences", ok,
                           f"worst rel err {worst}; linear-model max {jets['linear_max']}")


def check_dense_oracle(cfg, out) -> CriterionResult:
    return CriterionResult(3, "dense oracle equivalence", None,
                           "needs the jax dense oracle; run tests/test_acceptance.py")


def check_kernels(cfg, out) -> CriterionResult:
    kern = measure_kernels()
    return CriterionResult(4, "kernel recursion", kern <= 1e-8, f"worst rel diff {kern:.2e}")


def check_init_flatness(cfg, out) -> CriterionResult:
    init = run_init_audit(replace(cfg, experiment_id="init-audit"), out / "init")
    names = ["pgdml1_output", "kernel_diag"] + sorted(s for s in init.fits if s.startswith("layer"))
    exps = {s: fit_exponent(init, s) for s in names}
    ok = all(e is not None and abs(e) <= 0.15 for e in exps.values())
    return CriterionResult(5, "initial flatness", ok,
                           ", ".join(f"{s} {e:+.3f}" if e is not None else f"{s} n/a"
                                     for s, e in exps.items()) + " (0 +- 0.15)")


CORR_BANDS = {"corr_D0_d2_distinct": -0.4, "corr_D1_d1_distinct": -0.25,
              "corr_D0_d2_same": -0.2, "corr_D1_d2_same": -0.2}


def check_correlation_decay(cfg, out) -> CriterionResult:
    corr = run_corr_sweep(replace(cfg, experiment_id="corr-sweep", statistics=()), out / "corr")
    exps = {s: fit_exponent(corr, s) for s in CORR_BANDS}
    ok = all(e is not None and e <= CORR_BANDS[s] for s, e in exps.items())
    return CriterionResult(6, "correlation decay", ok, ", ".join(
        f"{s} {e:+.3f} (<= {CORR_BANDS[s]})" if e is not None else f"{s} n/a"
        for s, e in exps.items()))


def check_linearization_decay(cfg, out) -> CriterionResult:
    s_fix = cfg.fixed_step
    dev = run_ntk_deviation(replace(cfg, experiment_id="deviation", steps=s_fix, rescales=(1.0,)),
                            out / "deviation")
    e = fit_exponent(dev, f"delta_max_s{s_fix}_r1")
    return CriterionResult(7, "linearization decay", e is not None and abs(e + 1) <= 0.4,
                           f"delta_max at s={s_fix} exponent "
                           + (f"{e:+.3f}" if e is not None else "n/a") + " (-1 +- 0.4)")


def check_flat_in_time(cfg, out, width: int = 512, steps: int = 400) -> CriterionResult:
    flat = run_ntk_deviation(replace(cfg, experiment_id="flatness", widths=(width,), steps=steps,
                                     fixed_step=min(cfg.fixed_step, steps), rescales=(1.0,)),
                             out / "flatness")
    fs = flatness(flat, width)
    slope = fs["slope_median"]
    ok = fs["T_r2_median"] >= 0.9 and slope is not None and slope <= 0.1
    return CriterionResult(8, "deviation flat in time", ok,
                           f"width {width}, S={steps}: median decay r2 {fs['T_r2_median']:.3f} "
                           f"(>= 0.9), median slope "
                           + (f"{slope:.3f}" if slope is not None else "n/a") + " (<= 0.1)")


def check_reparametrization(cfg, out) -> CriterionResult:
    s_fix = cfg.fixed_step
    rep = run_ntk_deviation(replace(cfg, experiment_id="rescale", widths=(128, 256), steps=s_fix,
                                    rescales=(1.0, 2.0)), out / "rescale")
    r_ratio = rep.summary["rescale_ratios"]["r2/r1_n256"]
    bw = rep.summary["by_width"]
    n_ratio = bw["r1_n128"]["delta_fixed_median"] / bw["r1_n256"]["delta_fixed_median"]
    return CriterionResult(9, "reparametrization response",
                           abs(r_ratio - 2) <= 1 and abs(n_ratio - 2) <= 1,
                           f"r doubled {r_ratio:.2f}, n halved {n_ratio:.2f} (2 +- 1)")


def check_quadratic_perp(cfg, out) -> CriterionResult:
    qcfg = replace(cfg, experiment_id="quadratic-perp", widths=(256, 512, 1024), steps=200,
                   network=replace(cfg.network, model_kind="quadratic-perp"), rescales=(1.0,))
    quad = run_ntk_deviation(qcfg, out / "quad")
    task = Task(cfg.task)
    qd = quad_deviation(quad, task)
    hess = quad_hessian_norm(qcfg.network.with_width(256), task)
    return CriterionResult(10, "quadratic-perpendicular linearization",
                           bool(qd) and all(v <= 1e-3 for v in qd.values()) and hess > 0,
                           "max delta/scale " + ", ".join(f"n={n}: {v:.2e}" for n, v in qd.items())
                           + f" (<= 1e-3); hessian norm {hess:.3g}")


def check_determinism(cfg, out) -> CriterionResult:
    return CriterionResult(11, "determinism", determinism(cfg),
                           "jobs=1 vs jobs=2 reruns, sample CSV bytes")


CHECKS = (check_norm_algebra, check_jets, check_dense_oracle, check_kernels, check_init_flatness,
          check_correlation_decay, check_linearization_decay, check_flat_in_time,
          check_reparametrization, check_quadratic_perp, check_determinism)


def run_suite(cfg: ExperimentConfig, out, log=print) -> list[CriterionResult]:
    """Run every experiment of the default bundle into ``out`` and grade it."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for check in CHECKS:
        res = check(cfg, out)
        results.append(res)
        log(res.line())
    build_report(out)
    (out / "acceptance.json").write_text(json.dumps(
        [{"criterion": r.number, "name": r.name, "passed": r.passed, "detail": r.detail}
         for r in results], indent=2) + "\n")
    return results
