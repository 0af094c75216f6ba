import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntkcorr.activations import (
    ACTIVATIONS, ActivationAuditError, ActivationSpec, PerNeuronActivation,
    activation_bound_audit, get_activation,
)
from ntkcorr.asymptotics import fit_power_law
from ntkcorr.network import (
    ConfigError, NetworkConfig, NetworkParams, QuadraticPerpParams, Task, TaskSpec,
    fcnn_param_count, forward, forward_batch, init_params, layer_norm_audit, load_params,
    quadratic_perp_forward, sample_inputs, save_params,
)
from ntkcorr.tensor_core import elementwise_power

SCHEMES = ("gaussian", "uniform-symmetric", "rademacher-scaled")
NUMPY_ACT = {"tanh": np.tanh, "sin": np.sin, "identity": lambda x: x,
             "softplus": lambda x: np.log1p(np.exp(x))}


def naive_forward(cfg, flat, x):
    """Scalar-loop re-implementation of the layer recursion."""
    w = cfg.widths
    off, h = 0, list(map(float, x))
    for l in range(1, len(w)):
        act = (lambda v: v) if (l == 1 and not cfg.apply_input_activation) else NUMPY_ACT[cfg.activation]
        a = [act(v) for v in h]
        W = flat[off:off + w[l] * w[l - 1]]
        off += w[l] * w[l - 1]
        b = flat[off:off + w[l]]
        off += w[l]
        h = [sum(W[i * w[l - 1] + j] * a[j] for j in range(w[l - 1])) + b[i] for i in range(w[l])]
    return np.array(h)


# --- config ----------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(init_scheme="cauchy")
    with pytest.raises(ConfigError):
        NetworkConfig(c_eta=0.0)
    with pytest.raises(ValueError):
        NetworkConfig(activation="relu")
    with pytest.raises(ConfigError):
        NetworkConfig(model_kind="quadratic-perp", hidden_width=7)


def test_config_round_trip():
    cfg = NetworkConfig(depth=4, activation="erf", init_scheme="rademacher-scaled", c_eta=0.5)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"depth": 3, "bogus": 1})


def test_eta_rule_and_widths():
    cfg = NetworkConfig(depth=3, input_dim=5, output_dim=2, hidden_width=64, c_eta=2.0)
    assert cfg.eta == 2.0 / 64
    assert cfg.widths == [5, 64, 64, 2]
    assert fcnn_param_count(cfg) == 5 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2


# --- initialization --------------------------------------------------------------

def test_rademacher_values():
    cfg = NetworkConfig(depth=3, input_dim=4, hidden_width=64, init_scheme="rademacher-scaled")
    W = init_params(cfg, 0).weights[1]
    assert set(np.unique(W).tolist()) == {-1 / 8, 1 / 8}


def test_gaussian_variance_width_256():
    p = init_params(NetworkConfig(depth=3, hidden_width=256), 0)
    assert np.var(p.weights[1]) == pytest.approx(1 / 256, rel=0.15)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_odd_moments_vanish(scheme):
    p = init_params(NetworkConfig(depth=3, hidden_width=256, init_scheme=scheme), 3)
    W = p.weights[1].ravel()
    for k in (1, 3):
        m = elementwise_power(W, k).array
        assert abs(m.mean()) <= 3 * m.std() / math.sqrt(m.size)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_fan_in_second_moment(scheme):
    p = init_params(NetworkConfig(depth=3, input_dim=4, hidden_width=128, init_scheme=scheme), 1)
    for l, W in enumerate(p.weights):
        fan = W.shape[1]
        # relative sd of the mean of squared gaussians is sqrt(2 / size); allow 4 sd
        assert elementwise_power(W, 2).array.mean() == pytest.approx(1 / fan, rel=4 * math.sqrt(2 / W.size))


def test_moment_estimate_over_seeds():
    cfg = NetworkConfig(depth=3, hidden_width=256)
    est = np.mean([elementwise_power(init_params(cfg, s).weights[1], 2).array.mean()
                   for s in range(4)])
    assert est == pytest.approx(1 / 256, rel=0.2)


def test_fan_out_flag():
    p = init_params(NetworkConfig(depth=2, input_dim=4, hidden_width=400,
                                  weight_variance_rule="fan-out"), 0)
    assert np.var(p.weights[0]) == pytest.approx(1 / 400, rel=0.2)


def test_zero_bias_variance():
    p = init_params(NetworkConfig(bias_variance=0.0), 0)
    assert all(not np.any(b) for b in p.biases)


def test_init_deterministic():
    cfg = NetworkConfig(hidden_width=32)
    assert np.array_equal(init_params(cfg, 5).flat, init_params(cfg, 5).flat)


# --- forward ---------------------------------------------------------------------

def test_forward_all_zero_params():
    cfg = NetworkConfig(depth=3, hidden_width=8)
    p = NetworkParams(cfg, np.zeros(fcnn_param_count(cfg)))
    assert np.all(forward(p, np.ones(4))[-1] == 0.0)


def test_forward_scalar_chain_by_hand():
    cfg = NetworkConfig(depth=2, input_dim=1, output_dim=1, hidden_width=1)
    p = NetworkParams(cfg, np.array([1.0, 0.0, 1.0, 0.0]))
    layers = forward(p, np.array([2.0]))
    assert layers[1][0] == 2.0  # identity on the input layer
    assert layers[2][0] == pytest.approx(math.tanh(2.0), abs=1e-15)
    cfg_in = NetworkConfig(depth=2, input_dim=1, output_dim=1, hidden_width=1,
                           apply_input_activation=True)
    out = forward(NetworkParams(cfg_in, p.flat), np.array([2.0]))[-1][0]
    assert out == pytest.approx(math.tanh(math.tanh(2.0)), abs=1e-15)


@pytest.mark.parametrize("act", ["tanh", "sin", "softplus"])
@pytest.mark.parametrize("input_act", [False, True])
def test_forward_matches_naive(act, input_act):
    cfg = NetworkConfig(depth=3, input_dim=3, output_dim=2, hidden_width=6, activation=act,
                        apply_input_activation=input_act)
    p = init_params(cfg, 7)
    x = np.random.default_rng(0).standard_normal(3)
    assert np.allclose(forward(p, x)[-1], naive_forward(cfg, p.flat, x), atol=1e-12, rtol=0)


def test_forward_batch_matches_single():
    cfg = NetworkConfig(depth=3, hidden_width=10)
    p = init_params(cfg, 0)
    X = np.random.default_rng(1).standard_normal((5, 4))
    batch = forward_batch(p, X)
    for i in range(5):
        assert np.allclose(batch[i], forward(p, X[i])[-1], atol=1e-14)


def test_forward_dimension_mismatch():
    p = init_params(NetworkConfig(), 0)
    with pytest.raises(ValueError):
        forward(p, np.ones(3))


def test_per_neuron_assignment():
    act = PerNeuronActivation()
    x = np.linspace(-1, 1, 8)
    d = act.derivs(x, 1)
    for j in range(8):
        spec = get_activation(("tanh", "sin", "erf", "softplus")[j % 4])
        assert d[0, j] == spec(x[j]) and d[1, j] == spec.derivative(x[j], 1)


def test_per_neuron_network_runs():
    cfg = NetworkConfig(model_kind="fcnn-per-neuron", hidden_width=8)
    p = init_params(cfg, 0)
    out = forward(p, np.ones(4))[-1]
    assert np.all(np.isfinite(out))
    plain = forward(NetworkParams(NetworkConfig(hidden_width=8), p.flat), np.ones(4))[-1]
    assert not np.allclose(out, plain)


# --- activations -----------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(ACTIVATIONS))
def test_activation_audit_passes(name):
    rep = activation_bound_audit(get_activation(name))
    assert set(rep["orders"]) == {1, 2, 3, 4}


def test_tanh_first_derivative_peak():
    rep = activation_bound_audit(get_activation("tanh"), max_order=1)
    assert rep["orders"][1]["max_abs"] == pytest.approx(1.0, abs=1e-6)


def test_softplus_third_order_fd():
    rep = activation_bound_audit(get_activation("softplus"), max_order=3)
    assert rep["orders"][3]["fd_error"] <= 1e-5


def test_audit_names_violation():
    bad = ActivationSpec("steep", lambda x, k: np.stack([np.sinh(x)] + [np.cosh(x) if j % 2 else np.sinh(x) for j in range(1, k + 1)]), 0.5)
    with pytest.raises(ActivationAuditError, match="steep"):
        activation_bound_audit(bad)


def test_audit_detects_wrong_derivative():
    wrong = ActivationSpec("wrong", lambda x, k: np.stack([np.sin(x)] + [np.sin(x)] * k), 0.5)
    with pytest.raises(ActivationAuditError, match="finite difference"):
        activation_bound_audit(wrong)


def test_audit_order_cap():
    with pytest.raises(ValueError):
        activation_bound_audit(get_activation("tanh"), max_order=5)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["tanh", "erf", "softplus", "sin"]), st.floats(-6, 6), st.integers(1, 5))
def test_derivative_stack_matches_finite_difference(name, x, k):
    spec = get_activation(name)
    h = 1e-5
    fd = (spec.derivative(x + h, k - 1) - spec.derivative(x - h, k - 1)) / (2 * h)
    assert spec.derivative(x, k) == pytest.approx(fd, abs=1e-5 * max(1.0, abs(fd)))


# --- task ------------------------------------------------------------------------

def test_inputs_on_sphere():
    X = sample_inputs(np.random.default_rng(0), 100, 4)
    assert np.allclose(np.linalg.norm(X, axis=1), 2.0)


def test_task_fixed_and_n_independent():
    a, b = Task(TaskSpec()), Task(TaskSpec())
    assert np.array_equal(a.probes, b.probes)
    assert a.probes.shape == (32, 4)
    assert np.array_equal(a.target(a.probes), b.target(b.probes))


def test_stream_fresh_draws():
    xs = Task().stream(np.random.default_rng(0), 500)
    assert len(np.unique(xs, axis=0)) == 500


def test_sin_target():
    t = Task(TaskSpec(target="sin"))
    assert np.allclose(t.target(t.probes)[:, 0], np.sin(t.probes[:, 0]))


# --- layer norms -----------------------------------------------------------------

def test_identity_depth2_layer_scale():
    cfg = NetworkConfig(depth=2, activation="identity", bias_variance=0.0)
    samples = layer_norm_audit(cfg, [64, 256, 1024], range(8))[1]
    fit = fit_power_law(samples)
    assert fit.exponent == pytest.approx(0.0, abs=0.1)
    # ||W x|| / sqrt(n) with unit-variance-per-coordinate inputs concentrates at 1
    assert fit.per_width_stats[1024]["median"] == pytest.approx(1.0, abs=0.1)


@pytest.mark.slow
def test_tanh_depth4_flat_layers():
    cfg = NetworkConfig(depth=4)
    for samples in layer_norm_audit(cfg, [32, 64, 128, 256, 512, 1024], range(8)).values():
        assert fit_power_law(samples).exponent == pytest.approx(0.0, abs=0.1)


def test_zero_bias_zero_input_degenerate():
    cfg = NetworkConfig(depth=3, bias_variance=0.0)
    audit = layer_norm_audit(cfg, [16, 32, 64], range(3), inputs=np.zeros((2, 4)))
    assert all(fit_power_law(s).degenerate for s in audit.values())


# --- quadratic model -------------------------------------------------------------

def test_quad_at_zero():
    f = np.array([0.3, -1.2, 0.5, 2.0])
    z, grad, hess = quadratic_perp_forward(f, np.zeros(4))
    assert z == 0.0 and np.array_equal(grad, f)
    g = np.array([1.2, 0.3, -2.0, 0.5])
    assert np.array_equal(hess, 2 * np.outer(g, g))


def test_quad_rotation_2d():
    f = np.array([0.7, -0.2])
    A = np.array([[0.0, -1.0], [1.0, 0.0]])
    g = A @ f
    assert g.tolist() == [0.2, 0.7] and g @ f == pytest.approx(0.0, abs=1e-15)
    z, grad, _ = quadratic_perp_forward(f, np.array([1.0, 2.0]), rotation=A)
    assert z == pytest.approx(f @ [1, 2] + (g @ [1, 2]) ** 2)


def test_quad_model_perpendicular_everywhere():
    cfg = NetworkConfig(model_kind="quadratic-perp", hidden_width=64)
    p = QuadraticPerpParams.initialize(cfg, 0)
    F = p.features(Task().probes)
    assert np.allclose(np.sum(F * p.rotate(F), axis=1), 0.0, atol=1e-12)
    assert not np.any(p.flat)
    assert np.all(p.outputs(Task().probes) == 0.0)


def test_quad_dimension_mismatch():
    with pytest.raises(ValueError):
        quadratic_perp_forward(np.ones(4), np.ones(3))


# --- serialization ---------------------------------------------------------------

def test_params_round_trip(tmp_path):
    p = init_params(NetworkConfig(hidden_width=12), 4)
    save_params(tmp_path / "p.bin", p)
    q = load_params(tmp_path / "p.bin")
    assert q.config == p.config and np.array_equal(q.flat, p.flat)
    raw = (tmp_path / "p.bin").read_bytes()
    header, body = raw.split(b"\n", 1)
    assert len(body) == 8 * p.n_params
    assert np.array_equal(np.frombuffer(body, "<f8"), p.flat)


def test_quad_params_round_trip(tmp_path):
    cfg = NetworkConfig(model_kind="quadratic-perp", hidden_width=8)
    p = QuadraticPerpParams.initialize(cfg, 2).with_flat(np.arange(8.0))
    save_params(tmp_path / "q.bin", p)
    q = load_params(tmp_path / "q.bin")
    assert np.array_equal(q.omegas, p.omegas) and np.array_equal(q.flat, p.flat)
