"""Model families: fully connected networks, the per-neuron variant and the
quadratic model with a rotated second-order term."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .activations import PerNeuronActivation, get_activation
from .asymptotics import SweepSample

MODEL_KINDS = ("fcnn", "fcnn-per-neuron", "quadratic-perp")
INIT_SCHEMES = ("gaussian", "uniform-symmetric", "rademacher-scaled")
VARIANCE_RULES = ("fan-in", "fan-out")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 3
    input_dim: int = 4
    output_dim: int = 1
    hidden_width: int = 64
    activation: str = "tanh"
    model_kind: str = "fcnn"
    init_scheme: str = "gaussian"
    weight_variance_rule: str = "fan-in"
    bias_variance: float = 1.0
    c_eta: float = 1.0
    apply_input_activation: bool = False
    feature_scale: float = 1.0  # quadratic-perp only: frequency std of the Fourier features

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")
        if self.weight_variance_rule not in VARIANCE_RULES:
            raise ConfigError(f"unknown variance rule {self.weight_variance_rule!r}")
        if self.depth < 1 or self.input_dim < 1 or self.output_dim < 1 or self.hidden_width < 1:
            raise ConfigError("depth and widths must be positive")
        if self.c_eta <= 0:
            raise ConfigError("c_eta must be > 0")
        if self.bias_variance < 0:
            raise ConfigError("bias_variance must be >= 0")
        if self.model_kind == "quadratic-perp":
            if self.hidden_width % 2:
                raise ConfigError("quadratic-perp needs an even feature count")
            if self.output_dim != 1:
                raise ConfigError("quadratic-perp has a scalar output")
        else:
            get_activation(self.activation)

    @property
    def per_neuron(self) -> bool:
        return self.model_kind == "fcnn-per-neuron"

    @property
    def widths(self) -> list[int]:
        if self.model_kind == "quadratic-perp":
            return [self.input_dim, self.hidden_width, 1]
        return [self.input_dim] + [self.hidden_width] * (self.depth - 1) + [self.output_dim]

    @property
    def eta(self) -> float:
        return self.c_eta / self.hidden_width

    def with_width(self, n: int) -> NetworkConfig:
        return replace(self, hidden_width=int(n))

    def layer_activation(self, l: int):
        """Activation applied to F^(l) before it feeds layer l+1."""
        if l == 0 and not self.apply_input_activation:
            return get_activation("identity")
        if self.per_neuron and l > 0:
            return PerNeuronActivation()
        return get_activation(self.activation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


# --- task -----------------------------------------------------------------------

def sample_inputs(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Uniform draws on the sphere of radius sqrt(dim) (unit second moment per coordinate)."""
    z = rng.standard_normal((count, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * math.sqrt(dim)


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int = 4
    output_dim: int = 1
    target: str = "teacher"  # teacher | sin
    teacher_width: int = 16
    teacher_activation: str = "tanh"
    probe_count: int = 32
    task_seed: int = 1234

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TaskSpec:
        return cls(**d)


class Task:
    """Target function, input distribution and a fixed probe set."""

    def __init__(self, spec: TaskSpec = TaskSpec()):
        self.spec = spec
        rng = np.random.default_rng([spec.task_seed, 0])
        if spec.target == "teacher":
            tcfg = NetworkConfig(depth=2, input_dim=spec.input_dim, output_dim=spec.output_dim,
                                 hidden_width=spec.teacher_width,
                                 activation=spec.teacher_activation)
            self.teacher = init_params(tcfg, int(rng.integers(2 ** 32)))
        elif spec.target == "sin":
            self.teacher = None
        else:
            raise ConfigError(f"unknown target {spec.target!r}")
        self.probes = sample_inputs(rng, spec.probe_count, spec.input_dim)

    @property
    def input_dim(self):
        return self.spec.input_dim

    @property
    def output_dim(self):
        return self.spec.output_dim

    def target(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.teacher is not None:
            return forward_batch(self.teacher, X)
        return np.sin(X[:, : self.output_dim])

    def stream(self, rng: np.random.Generator, steps: int) -> np.ndarray:
        """One fresh input per step; continuous draws, so no input repeats."""
        xs = sample_inputs(rng, steps, self.input_dim)
        if len(np.unique(xs, axis=0)) != steps:
            raise RuntimeError("input stream repeated a draw")
        return xs

    def output_scale(self) -> float:
        return float(np.sqrt(np.mean(self.target(self.probes) ** 2)))


# --- parameters -----------------------------------------------------------------

class NetworkParams:
    """Weights and biases of an FCNN as views into one flat vector.

    Flat order: for l = 1..L, the row-major weight matrix theta^(l,l-1)
    (shape n_l x n_{l-1}) followed by the bias theta^(l).
    """

    def __init__(self, config: NetworkConfig, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (fcnn_param_count(config),):
            raise ValueError(f"flat vector has length {flat.shape}, expected "
                             f"{fcnn_param_count(config)}")
        self.config = config
        self.flat = flat
        self.weights, self.biases = _split_blocks(config, flat)

    @property
    def n_params(self) -> int:
        return self.flat.size

    @property
    def depth(self) -> int:
        return len(self.weights)

    def with_flat(self, flat) -> NetworkParams:
        return NetworkParams(self.config, flat)

    def blocks(self, flat: np.ndarray):
        """Split a direction vector into (weight, bias) blocks shaped like the params."""
        return _split_blocks(self.config, np.asarray(flat, float))


def fcnn_param_count(config: NetworkConfig) -> int:
    w = config.widths
    return sum(w[l] * w[l - 1] + w[l] for l in range(1, len(w)))


def _split_blocks(config, flat):
    w = config.widths
    weights, biases = [], []
    off = 0
    for l in range(1, len(w)):
        k = w[l] * w[l - 1]
        weights.append(flat[off:off + k].reshape(w[l], w[l - 1]))
        off += k
        biases.append(flat[off:off + w[l]])
        off += w[l]
    return weights, biases


def _draw(rng, scheme, variance, size):
    if variance == 0:
        return np.zeros(size)
    sd = math.sqrt(variance)
    if scheme == "gaussian":
        return rng.normal(0.0, sd, size)
    if scheme == "uniform-symmetric":
        a = sd * math.sqrt(3.0)
        return rng.uniform(-a, a, size)
    if scheme == "rademacher-scaled":
        return sd * (2.0 * rng.integers(0, 2, size) - 1.0)
    raise ConfigError(f"unknown init scheme {scheme!r}")


def init_params(config: NetworkConfig, seed: int):
    """Independent, zero-symmetric draws; weight variance 1/fan-in by default."""
    if config.model_kind == "quadratic-perp":
        return QuadraticPerpParams.initialize(config, seed)
    rng = np.random.default_rng(seed)
    w = config.widths
    chunks = []
    for l in range(1, len(w)):
        fan = w[l - 1] if config.weight_variance_rule == "fan-in" else w[l]
        chunks.append(_draw(rng, config.init_scheme, 1.0 / fan, w[l] * w[l - 1]))
        chunks.append(_draw(rng, config.init_scheme, config.bias_variance, w[l]))
    return NetworkParams(config, np.concatenate(chunks))


# --- forward --------------------------------------------------------------------

def forward(params: NetworkParams, x) -> list[np.ndarray]:
    """All layer activations F^(0) = x, ..., F^(L) for a single input."""
    x = np.asarray(x, float)
    if x.shape != (params.config.input_dim,):
        raise ValueError(f"input has shape {x.shape}, expected ({params.config.input_dim},)")
    return [a[0] for a in forward_layers(params, x[None, :])]


def forward_layers(params: NetworkParams, X: np.ndarray) -> list[np.ndarray]:
    cfg = params.config
    layers = [np.asarray(X, float)]
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = cfg.layer_activation(l)(layers[-1])
        layers.append(h @ W.T + b)
    return layers


def forward_batch(params, X: np.ndarray) -> np.ndarray:
    """Network outputs for a batch, shape (B, d_Y)."""
    X = np.atleast_2d(np.asarray(X, float))
    if isinstance(params, QuadraticPerpParams):
        return params.outputs(X)
    if X.shape[1] != params.config.input_dim:
        raise ValueError("input dimension mismatch")
    return forward_layers(params, X)[-1]


def layer_norm_audit(config: NetworkConfig, widths, seeds, inputs=None,
                     task: Task | None = None) -> dict[int, list[SweepSample]]:
    """Samples of the per-layer norm expectation ||F^(l)|| / sqrt(n_l).

    One sample per (width, seed), averaged over the probe inputs; keyed by
    layer index 1..L-1 (hidden layers).
    """
    if inputs is None:
        inputs = (task or Task(TaskSpec(input_dim=config.input_dim,
                                        output_dim=config.output_dim))).probes
    out = {l: [] for l in range(1, config.depth)}
    for n in widths:
        cfg = config.with_width(n)
        for seed in seeds:
            params = init_params(cfg, seed)
            layers = forward_layers(params, inputs)
            for l in out:
                F = layers[l]
                val = float(np.sqrt(np.mean(np.sum(F * F, axis=1)) / F.shape[1]))
                out[l].append(SweepSample(n, seed, val, f"layer{l}_norm"))
    return out


# --- quadratic model with perpendicular second derivative -------------------------

class QuadraticPerpParams:
    """z(x) = theta.f(x) + (theta.g(x))^2 with g = A f.

    f are random Fourier features sqrt(2) cos(w.x + b); A rotates each
    feature pair (2k, 2k+1) by 90 degrees, so g(x).f(x) = 0 for every x.
    """

    def __init__(self, config: NetworkConfig, omegas: np.ndarray, phases: np.ndarray,
                 theta: np.ndarray):
        self.config = config
        self.omegas = omegas
        self.phases = phases
        self.flat = np.asarray(theta, float)

    @classmethod
    def initialize(cls, config: NetworkConfig, seed: int) -> QuadraticPerpParams:
        rng = np.random.default_rng(seed)
        n, d = config.hidden_width, config.input_dim
        omegas = rng.normal(0.0, config.feature_scale / math.sqrt(d), (n, d))
        phases = rng.uniform(0.0, 2 * math.pi, n)
        return cls(config, omegas, phases, np.zeros(n))

    @property
    def n_params(self) -> int:
        return self.flat.size

    def with_flat(self, theta) -> QuadraticPerpParams:
        return QuadraticPerpParams(self.config, self.omegas, self.phases, theta)

    def features(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return math.sqrt(2.0) * np.cos(X @ self.omegas.T + self.phases)

    @staticmethod
    def rotate(F: np.ndarray) -> np.ndarray:
        G = np.empty_like(F)
        G[..., 0::2] = -F[..., 1::2]
        G[..., 1::2] = F[..., 0::2]
        return G

    def outputs(self, X) -> np.ndarray:
        f = self.features(X)
        g = self.rotate(f)
        return (f @ self.flat + (g @ self.flat) ** 2)[:, None]


def quadratic_perp_forward(features: np.ndarray, theta: np.ndarray,
                           rotation: np.ndarray | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of the quadratic model at one input.

    ``features`` is f(x); ``rotation`` defaults to the pairwise 90-degree map.
    """
    f = np.asarray(features, float)
    theta = np.asarray(theta, float)
    if f.shape != theta.shape:
        raise ValueError("features and theta must have equal length")
    g = QuadraticPerpParams.rotate(f) if rotation is None else np.asarray(rotation) @ f
    tg = theta @ g
    value = float(theta @ f + tg ** 2)
    grad = f + 2.0 * tg * g
    hess = 2.0 * np.outer(g, g)
    return value, grad, hess


# --- serialization ----------------------------------------------------------------

def save_params(path, params) -> None:
    """JSON header line (config, block shapes) then little-endian float64 data."""
    cfg = params.config
    if isinstance(params, QuadraticPerpParams):
        blocks = [params.omegas, params.phases, params.flat]
    else:
        blocks = [params.flat]
    header = {"config": cfg.to_dict(), "kind": cfg.model_kind,
              "shapes": [list(b.shape) for b in blocks]}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = fh.read()
    cfg = NetworkConfig.from_dict(header["config"])
    arrays, off = [], 0
    for shape in header["shapes"]:
        count = math.prod(shape)
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off)
                      .reshape(shape).astype(float))
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in parameter snapshot")
    if header["kind"] == "quadratic-perp":
        return QuadraticPerpParams(cfg, *arrays)
    return NetworkParams(cfg, arrays[0])
