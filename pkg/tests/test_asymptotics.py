import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntkcorr.asymptotics import (
    CSV_HEADER, InsufficientDataError, SweepSample, fit_power_law, read_samples_csv,
    uniform_family_fit, verify_bound, write_fit_json, write_samples_csv,
)

WIDTHS = [32, 64, 128, 256, 512, 1024]


def synth(fn, seeds=1, widths=WIDTHS, stat="s"):
    return [SweepSample(n, k, float(fn(n, k)), stat) for n in widths for k in range(seeds)]


def planted(b, seeds=32, sigma=0.1, seed=0):
    rng = np.random.default_rng(seed)
    noise = {(n, k): rng.normal(0, sigma) for n in WIDTHS for k in range(seeds)}
    return synth(lambda n, k: n ** b * math.exp(noise[n, k]), seeds)


def test_exact_line():
    fit = fit_power_law(synth(lambda n, k: n, seeds=3))
    assert fit.exponent == pytest.approx(1.0, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0)


def test_constant():
    fit = fit_power_law(synth(lambda n, k: 7.0, seeds=3))
    assert fit.exponent == pytest.approx(0.0, abs=1e-12)
    assert fit.log_prefactor == pytest.approx(math.log(7.0), abs=1e-12)


def test_noisy_half_power():
    fit = fit_power_law(planted(-0.5))
    assert fit.exponent == pytest.approx(-0.5, abs=0.1)


@pytest.mark.parametrize("b", [-1.5, -1.0, -0.5, 0.0])
def test_planted_exponent_recovery(b):
    assert fit_power_law(planted(b, seed=int(10 * abs(b)))).exponent == pytest.approx(b, abs=0.1)


def test_insufficient_widths():
    with pytest.raises(InsufficientDataError):
        fit_power_law(synth(lambda n, k: 1.0, seeds=3, widths=[32, 64]))


def test_insufficient_seeds():
    with pytest.raises(InsufficientDataError):
        fit_power_law(synth(lambda n, k: 1.0, seeds=2))


def test_all_zero_width_degenerate():
    fit = fit_power_law(synth(lambda n, k: 0.0 if n == 64 else 1.0, seeds=3))
    assert fit.degenerate and math.isnan(fit.exponent)
    assert "64" in fit.status
    assert fit.to_json()["exponent"] is None


def test_partial_zero_quantile_floored():
    fit = fit_power_law(synth(lambda n, k: 1.0 if k == 0 else 0.0, seeds=3), quantile=0.5)
    assert fit.floored and not fit.degenerate


def test_negative_sample_rejected():
    with pytest.raises(ValueError):
        SweepSample(32, 0, -1.0)
    with pytest.raises(ValueError):
        SweepSample(32, 0, float("nan"))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_scale_equivariance(lam, seed):
    base = planted(-0.7, seeds=4, seed=seed)
    scaled = [SweepSample(s.n, s.seed, s.value * lam, s.statistic) for s in base]
    f0, f1 = fit_power_law(base), fit_power_law(scaled)
    assert f1.exponent == pytest.approx(f0.exponent, abs=1e-12)
    assert f1.log_prefactor - f0.log_prefactor == pytest.approx(math.log(lam), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=6, max_size=6), st.integers(0, 1000))
def test_monotone_quantiles_nonpositive_exponent(levels, seed):
    levels = sorted(levels, reverse=True)
    rng = np.random.default_rng(seed)
    samples = [SweepSample(n, k, levels[i] * (1 - 0.01 * rng.random()))
               for i, n in enumerate(WIDTHS) for k in range(4)]
    fit = fit_power_law(samples, quantile=1.0)
    qs = [fit.per_width_stats[n]["q_quantile"] for n in WIDTHS]
    if all(a >= b for a, b in zip(qs, qs[1:])):
        assert fit.exponent <= fit.exponent_stderr + 1e-12


# --- verify_bound ----------------------------------------------------------------

def test_bound_constant_consistent():
    tab = verify_bound(synth(lambda n, k: 1.0, seeds=4), 0.0, [2.0])
    assert all(p == 1.0 for _, _, p in tab.rows) and tab.consistent


def test_bound_unbounded_inconsistent():
    tab = verify_bound(synth(lambda n, k: n, seeds=4), 0.0, [1.0, 10.0, 100.0])
    assert tab.probability(100.0, 1024) == 0.0 and not tab.consistent


def test_bound_lognormal_at_percentile():
    rng = np.random.default_rng(3)
    samples = synth(lambda n, k: math.exp(rng.normal(0, 0.3)) / n, seeds=64)
    ratios = [s.value * s.n for s in samples]
    c = float(np.quantile(ratios, 0.95)) * 1.5
    tab = verify_bound(samples, -1.0, [c])
    assert tab.consistent


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 10), min_size=2, max_size=5, unique=True), st.integers(0, 99))
def test_bound_monotone_in_c(cs, seed):
    cs = sorted(cs)
    tab = verify_bound(planted(-0.5, seeds=5, sigma=0.5, seed=seed), -0.5, cs)
    for n in WIDTHS:
        ps = [tab.probability(c, n) for c in cs]
        assert all(a <= b for a, b in zip(ps, ps[1:]))


def test_bound_input_errors():
    with pytest.raises(ValueError):
        verify_bound(synth(lambda n, k: 1.0, seeds=3), 0.0, [])
    with pytest.raises(ValueError):
        verify_bound(synth(lambda n, k: 1.0, seeds=3), 0.0, [2.0, 1.0])


# --- uniform families ------------------------------------------------------------

def test_uniform_identical_families():
    fam = planted(-0.5, seeds=8)
    fits, shared = uniform_family_fit({"a": fam, "b": list(fam)})
    assert shared.exponent == pytest.approx(fits["a"].exponent, abs=1e-12)


def test_uniform_single_family():
    fam = planted(-1.0, seeds=8)
    fits, shared = uniform_family_fit({"a": fam})
    assert shared.exponent == pytest.approx(fits["a"].exponent, abs=1e-12)
    assert shared.log_prefactor == pytest.approx(fits["a"].log_prefactor, abs=1e-12)


def test_uniform_envelope_follows_slowest_decay():
    _, shared = uniform_family_fit({"slow": planted(-0.5, seeds=16, seed=1),
                                    "fast": planted(-1.0, seeds=16, seed=2)})
    assert shared.exponent == pytest.approx(-0.5, abs=0.1)


# --- serialization ---------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    samples = planted(-0.5, seeds=3)
    path = tmp_path / "s.csv"
    write_samples_csv(path, samples)
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    back = read_samples_csv(path)
    assert sorted(back, key=lambda s: (s.n, s.seed)) == sorted(samples, key=lambda s: (s.n, s.seed))


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c,d\n")
    with pytest.raises(ValueError):
        read_samples_csv(path)


def test_fit_json_fields_exact(tmp_path):
    fit = fit_power_law(planted(-0.5, seeds=3))
    fit.statistic = "s"
    write_fit_json(tmp_path / "f.json", fit)
    data = json.loads((tmp_path / "f.json").read_text())
    assert list(data) == ["statistic", "exponent", "exponent_stderr", "log_prefactor",
                          "r_squared", "quantile", "widths", "seeds_per_width"]
    assert data["widths"] == WIDTHS and data["seeds_per_width"] == 3
