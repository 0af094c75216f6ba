"""Single-input SGD next to its linearized counterparts, with deviation tracking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .asymptotics import SweepSample, fmt_float
from .derivatives import TangentFactors, correlation_prefactor, jet_forward
from .network import NetworkConfig, Task, forward_batch, init_params

DIVERGENCE_LOSS = 1e6
TRACE_HEADER = ("step", "x_id", "loss_sgd", "loss_lin", "cprime_norm", "delta_max",
                "delta_mean", "zeta_norm", "rho", "kernel_drift")


class CacheMissError(KeyError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Convex cost C(u, y); only mean squared error ships."""

    id: str = "mse"

    def value(self, u, y) -> float:
        r = np.asarray(u) - np.asarray(y)
        return 0.5 * float(np.sum(r * r))

    def d1(self, u, y) -> np.ndarray:
        return np.asarray(u, float) - np.asarray(y, float)

    def d2(self, u, y) -> np.ndarray:
        return np.eye(np.size(u))


MSE = CostSpec()


def convexity_audit(cost: CostSpec, dim: int, samples: int = 64, seed: int = 0,
                    scale: float = 10.0) -> float:
    """Smallest eigenvalue of C'' over random (u, y) in [-scale, scale]^dim."""
    rng = np.random.default_rng(seed)
    worst = math.inf
    for _ in range(samples):
        u, y = rng.uniform(-scale, scale, (2, dim))
        worst = min(worst, float(np.min(np.linalg.eigvalsh(cost.d2(u, y)))))
    return worst


def sgd_step(params, x, task: Task, cost: CostSpec = MSE, eta: float | None = None):
    """theta <- theta - eta * grad F(x) C'(F(x), y(x))."""
    eta = params.config.eta if eta is None else eta
    if eta <= 0:
        raise ValueError("eta must be > 0")
    tf = TangentFactors(params, np.asarray(x, float)[None, :])
    cp = cost.d1(tf.outputs[0], task.target(x)[0])
    if not np.any(cp):
        return params
    return params.with_flat(params.flat - eta * tf.vjp(0, cp))


def f_hat_eval(params, params0, X) -> np.ndarray:
    """F(theta_0) + grad F(theta_0)^T (theta - theta_0) at a batch of inputs."""
    X = np.atleast_2d(np.asarray(X, float))
    tf = TangentFactors(params0, X)
    return tf.outputs + tf.jvp(params0, params.flat - params0.flat)


class LinearizedTracker:
    """Kernel-driven linear dynamics F_lin on a fixed set of tracked inputs.

    Theta_0 rows are computed on demand from factored tangents at theta_0.
    theta_lin is maintained alongside so that F_hat(theta_lin) = F_lin.
    """

    def __init__(self, params0, tracked: np.ndarray, targets: np.ndarray, eta: float,
                 cost: CostSpec = MSE, keep_theta: bool = True):
        self.params0 = params0
        self.tracked = np.atleast_2d(np.asarray(tracked, float))
        self.targets = np.asarray(targets, float)
        self.eta = eta
        self.cost = cost
        self.factors0 = TangentFactors(params0, self.tracked)
        self.F = self.factors0.outputs.copy()
        self.theta = params0.flat.copy() if keep_theta else None
        self._index = {self.tracked[i].tobytes(): i for i in range(len(self.tracked))}

    def index_of(self, x) -> int:
        try:
            return self._index[np.asarray(x, float).tobytes()]
        except KeyError:
            raise CacheMissError("input is not tracked; fix the tracked set up front") from None

    def cprime(self, i: int) -> np.ndarray:
        return self.cost.d1(self.F[i], self.targets[i])

    def step(self, i: int) -> np.ndarray:
        """Train on tracked input i; returns the C' used."""
        cp = self.cprime(i)
        if np.any(cp):
            rows = self.factors0.kernel(self.factors0.take([i]), self.eta)[:, 0]
            self.F -= np.einsum("tij,j->ti", rows, cp)
            if self.theta is not None:
                self.theta -= self.eta * self.factors0.vjp(i, cp)
        return cp


def lin_step(F_lin: np.ndarray, theta0_rows: np.ndarray, cprime) -> np.ndarray:
    """One linearized update given Theta_0(p, x_s) rows of shape (P, d_Y, d_Y)."""
    return F_lin - np.einsum("tij,j->ti", theta0_rows, np.asarray(cprime, float))


def theta_lin_step(theta_lin: np.ndarray, grad0_xs_vjp: np.ndarray, eta: float) -> np.ndarray:
    """theta_lin - eta * grad F(theta_0)(x_s) C'; pass the vector-Jacobian product."""
    return theta_lin - eta * grad0_xs_vjp


@dataclass
class ExpFit:
    T: float
    r_squared: float
    exponential: bool


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)
    status: str = "ok"
    eta: float = 0.0
    rescale: float = 1.0
    seed: int = 0
    width: int = 0
    decay: ExpFit | None = None
    checkpoints: dict = field(default_factory=dict, repr=False)
    context: dict = field(default_factory=dict, repr=False)

    def column(self, name: str) -> np.ndarray:
        i = TRACE_HEADER.index(name)
        return np.array([r[i] for r in self.rows], float)

    def at(self, step: int, name: str) -> float:
        return float(self.rows[step][TRACE_HEADER.index(name)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for r in self.rows:
                w.writerow([r[0], r[1]] + [fmt_float(v) for v in r[2:]])

    def metadata(self) -> dict:
        d = self.decay
        return {"seed": self.seed, "width": self.width, "eta": self.eta, "r": self.rescale,
                "status": self.status,
                "T_fit": None if d is None else {"T": d.T if math.isfinite(d.T) else None,
                                                 "r_squared": d.r_squared,
                                                 "exponential": d.exponential}}


def fit_decay_time(cprime_norms, window: int = 8) -> ExpFit:
    """Fit log ||C'|| = a - s/T on a trailing RMS over ``window`` steps.

    Single-step values fluctuate with the fresh input, so the log-linear fit
    runs on the windowed root-mean-square.
    """
    c = np.asarray(cprime_norms, float)
    if len(c) < window + 3:
        return ExpFit(math.nan, 0.0, False)
    sq = np.convolve(c * c, np.ones(window) / window, mode="valid")
    y = np.log(np.maximum(np.sqrt(sq), 1e-300))
    s = np.arange(len(y)) + (window - 1) / 2.0
    A = np.column_stack([np.ones_like(s), s])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 0.0
    T = -1.0 / coef[1] if coef[1] < 0 else math.inf
    return ExpFit(float(T), float(r2), bool(r2 >= 0.9 and coef[1] < 0))


def train_and_trace(config: NetworkConfig, task: Task, steps: int, seed: int,
                    rescale: float = 1.0, cost: CostSpec = MSE,
                    checkpoints=(), stream_seed: int | None = None,
                    params0=None, decay_window: int = 8) -> TrainingTrace:
    """Run SGD and the linearized trackers on one shared input stream.

    Rows cover states s = 0..steps; row s evaluates losses on x_s before the
    update it drives. ``checkpoints`` lists steps whose theta(s) and
    theta_lin(s) are kept for the perturbation identity.
    """
    eta = rescale * config.eta
    rng = np.random.default_rng([seed, 1] if stream_seed is None else stream_seed)
    if params0 is None:
        params0 = init_params(config, int(np.random.default_rng([seed, 0]).integers(2 ** 63)))
    path = task.stream(rng, steps + 1)
    probes = task.probes
    P = len(probes)
    tracked = np.concatenate([probes, path])
    targets = task.target(tracked)
    tracker = LinearizedTracker(params0, tracked, targets, eta, cost)
    pair = probes[:2]
    theta0_pair = TangentFactors(params0, pair)
    K0 = theta0_pair.kernel(theta0_pair, eta)
    K0n = float(np.linalg.norm(K0))

    trace = TrainingTrace(eta=eta, rescale=rescale, seed=seed, width=config.hidden_width)
    trace.context = {"params0": params0, "path": path, "cprimes": [], "task": task,
                     "cost": cost}
    params = params0
    rho = 0.0
    cp_norms = []
    for s in range(steps + 1):
        i = P + s
        x = path[s]
        batch = np.concatenate([x[None, :], pair])
        tf = TangentFactors(params, batch)
        out_probe = forward_batch(params, probes)
        F_lin_probe = tracker.F[:P]
        dev = np.linalg.norm(out_probe - F_lin_probe, axis=1)
        cp_lin = tracker.cprime(i)
        cpn = float(np.linalg.norm(cp_lin))
        loss_sgd = cost.value(tf.outputs[0], targets[i])
        loss_lin = cost.value(tracker.F[i], targets[i])
        zeta = float(np.linalg.norm(params.flat - tracker.theta))
        pair_tf = tf.take([1, 2])
        drift = float(np.linalg.norm(pair_tf.kernel(pair_tf, eta) - K0)) / K0n if K0n > 0 else 0.0
        trace.rows.append((s, s if s < steps else -1, loss_sgd, loss_lin, cpn,
                           float(dev.max()), float(dev.mean()), zeta, rho, drift))
        if s in checkpoints:
            trace.checkpoints[s] = (params, tracker.theta.copy())
        if not (loss_sgd <= DIVERGENCE_LOSS and loss_lin <= DIVERGENCE_LOSS):
            trace.status = "diverged"
            break
        if s == steps:
            break
        cp_norms.append(cpn)
        trace.context["cprimes"].append(cp_lin)
        rho += cpn
        cp_sgd = cost.d1(tf.outputs[0], targets[i])
        if np.any(cp_sgd):
            params = params.with_flat(params.flat - eta * tf.vjp(0, cp_sgd))
        tracker.step(i)
    trace.context["tracker"] = tracker
    trace.context["params"] = params
    half = max(len(cp_norms) // 2, 1)
    trace.decay = fit_decay_time(cp_norms[:half], decay_window)
    return trace


def perturbation_identity_check(trace: TrainingTrace, s: int) -> dict:
    """Second-order expansion of delta(s) around theta_0.

        delta ~ grad F . (theta - theta_lin)
                + 1/2 grad^2 F[Dl, Dl]          (= sum C^{0,2} C' C')
                + grad^2 F[Dl, theta - theta_lin] (= -sum C^{1,1} zeta C')
                + 1/2 grad^2 F[theta - theta_lin]^2

    with Dl = theta_lin(s) - theta_0. Reports residuals over the probe set.
    """
    if s not in trace.checkpoints:
        raise KeyError(f"step {s} was not checkpointed")
    ctx = trace.context
    params0, task = ctx["params0"], ctx["task"]
    params_s, theta_lin = trace.checkpoints[s]
    probes = task.probes
    if s == 0:
        return {"step": 0, "residual": 0.0, "first_order_residual": 0.0, "delta_max": 0.0,
                "terms": {}}
    Dl = theta_lin - params0.flat
    Dz = params_s.flat - theta_lin
    delta = forward_batch(params_s, probes) - f_hat_eval(params0.with_flat(theta_lin), params0, probes)
    tf0 = TangentFactors(params0, probes)
    first = tf0.jvp(params0, Dz)
    quad_ll = np.stack([jet_forward(params0, p, [Dl, Dl]).top for p in probes]) / 2
    cross = np.stack([jet_forward(params0, p, [Dl, Dz]).top for p in probes])
    quad_zz = np.stack([jet_forward(params0, p, [Dz, Dz]).top for p in probes]) / 2
    rhs = first + quad_ll + cross + quad_zz
    scale = float(np.max(np.abs(delta)))
    if scale == 0:
        return {"step": s, "residual": 0.0, "first_order_residual": 0.0, "delta_max": 0.0,
                "terms": {}}
    return {
        "step": s,
        "delta_max": scale,
        "residual": float(np.max(np.abs(delta - rhs))) / scale,
        "first_order_residual": float(np.max(np.abs(delta - first))) / scale,
        "terms": {"grad_zeta": float(np.max(np.abs(first))),
                  "C2_cc": float(np.max(np.abs(quad_ll))),
                  "C11_zeta_c": float(np.max(np.abs(cross))),
                  "hess_zeta_zeta": float(np.max(np.abs(quad_zz)))},
    }


def eom_step_prediction(params, x, x_s, cprime, eta: float, max_d: int = 4) -> np.ndarray:
    """Change of F(x) over one SGD step predicted by sum_d C^{0,d}(x; x_s^d)(-C')^d.

    With u = grad F(x_s) C', the d-th term is eta^d/d! grad^d F(x)[-u, ..., -u].
    """
    tf = TangentFactors(params, np.asarray(x_s, float)[None, :])
    u = -tf.vjp(0, np.asarray(cprime, float))
    total = 0.0
    for d in range(1, max_d + 1):
        total = total + correlation_prefactor(0, d, eta) * jet_forward(params, x, [u] * d).top
    return total


# --- audits ----------------------------------------------------------------------

def pgdml_audit(config: NetworkConfig, widths, seeds, task: Task,
                cost: CostSpec = MSE) -> dict[str, list[SweepSample]]:
    """Sweep samples for the four proper-normalization conditions.

    pgdml1_output      RMS over probes of ||F(theta_0)(x)||
    pgdml2_first_step  RMS over probes of ||F(theta(1)) - F(theta_0)||
    pgdml3_kernel_ratio |Theta_0(p1, p2)| / (eta * mean ||grad F||^2 over p1, p2)
    pgdml4_D{2,3}      |grad^D F[g^D]| / ||g||^(2D) with g = grad F(x) at the first probe
    """
    out = {k: [] for k in ("pgdml1_output", "pgdml2_first_step", "pgdml3_kernel_ratio",
                           "pgdml4_D2", "pgdml4_D3")}
    probes = task.probes
    for n in widths:
        cfg = config.with_width(n)
        for seed in seeds:
            params = init_params(cfg, seed)
            F0 = forward_batch(params, probes)
            out["pgdml1_output"].append(SweepSample(n, seed, float(np.sqrt(np.mean(F0 ** 2))),
                                                    "pgdml1_output"))
            x_first = task.stream(np.random.default_rng([seed, 7]), 1)[0]
            p1 = sgd_step(params, x_first, task, cost, cfg.eta)
            d1 = forward_batch(p1, probes) - F0
            out["pgdml2_first_step"].append(SweepSample(
                n, seed, float(np.sqrt(np.mean(d1 ** 2))), "pgdml2_first_step"))
            tf = TangentFactors(params, probes[:2])
            K = tf.kernel(tf, cfg.eta)
            norm_sq = [float(K[a, a, 0, 0]) for a in range(2)]  # eta ||g||^2
            ratio = abs(float(K[0, 1, 0, 0])) / (0.5 * sum(norm_sq))
            out["pgdml3_kernel_ratio"].append(SweepSample(n, seed, ratio, "pgdml3_kernel_ratio"))
            g = tf.gradient(0, 0)
            gn2 = float(g @ g)
            for D in (2, 3):
                val = abs(float(jet_forward(params, probes[0], [g] * D).top[0])) / gn2 ** D
                out[f"pgdml4_D{D}"].append(SweepSample(n, seed, val, f"pgdml4_D{D}"))
    return out


def calibrate_c_eta(config: NetworkConfig, task: Task, seed: int = 0, steps: int = 100,
                    block: int = 20, start: float = 0.125, ceiling: float = 64.0,
                    cost: CostSpec = MSE) -> float:
    """Largest c_eta (doubling from ``start``) whose linearized run decreases monotonically.

    Monotone means the probe-set mean loss, sampled every ``block`` steps, never
    increases; runs on the configured width with a fixed stream.
    """
    params0 = init_params(config, seed)
    path = task.stream(np.random.default_rng([seed, 99]), steps)
    tracked = np.concatenate([task.probes, path])
    targets = task.target(tracked)
    P = len(task.probes)
    best = None
    c = start
    while c <= ceiling:
        tr = LinearizedTracker(params0, tracked, targets, c / config.hidden_width, cost,
                               keep_theta=False)
        losses = [float(np.mean((tr.F[:P] - targets[:P]) ** 2))]
        ok = True
        for s in range(steps):
            tr.step(P + s)
            if (s + 1) % block == 0:
                cur = float(np.mean((tr.F[:P] - targets[:P]) ** 2))
                if not np.isfinite(cur) or cur > losses[-1]:
                    ok = False
                    break
                losses.append(cur)
        if not ok:
            break
        best = c
        c *= 2
    if best is None:
        raise RuntimeError("no learning rate in the search range trains monotonically")
    return best
