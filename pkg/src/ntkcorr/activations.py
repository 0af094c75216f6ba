"""Analytic activations with closed-form derivatives up to order ``MAX_ORDER``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import hermite, polynomial as P
from scipy import special

MAX_ORDER = 6


class ActivationAuditError(AssertionError):
    pass


@dataclass(frozen=True)
class ActivationSpec:
    """An activation and its derivative stack.

    ``derivs(x, k)`` returns an array of shape ``(k + 1, *x.shape)`` holding
    phi, phi', ..., phi^[k]. ``bound_constant`` B asserts
    |phi^[k]| <= B (k+1)! on the audit domain.
    """

    id: str
    derivs: Callable[[np.ndarray, int], np.ndarray]
    bound_constant: float

    def __call__(self, x):
        return self.derivs(np.asarray(x, float), 0)[0]

    def derivative(self, x, k: int):
        return self.derivs(np.asarray(x, float), k)[k]


def _poly_chain(inner_deriv: np.ndarray, orders: int) -> list[np.ndarray]:
    """Polynomials p_k with phi^[k](x) = p_k(u(x)) given u' = q(u).

    ``inner_deriv`` holds coefficients of q; p_1 = q.
    """
    polys = [np.array([0.0, 1.0]), inner_deriv]
    for _ in range(2, orders + 1):
        polys.append(P.polymul(P.polyder(polys[-1]), inner_deriv))
    return polys


_TANH_POLYS = _poly_chain(np.array([1.0, 0.0, -1.0]), MAX_ORDER)
_SIGMOID_POLYS = _poly_chain(np.array([0.0, 1.0, -1.0]), MAX_ORDER - 1)


def _tanh_derivs(x, k):
    t = np.tanh(x)
    return np.stack([P.polyval(t, _TANH_POLYS[j]) for j in range(k + 1)])


def _sin_derivs(x, k):
    s, c = np.sin(x), np.cos(x)
    cycle = (s, c, -s, -c)
    return np.stack([cycle[j % 4] for j in range(k + 1)])


def _erf_derivs(x, k):
    out = [special.erf(x)]
    g = 2.0 / math.sqrt(math.pi) * np.exp(-x * x)
    for j in range(1, k + 1):
        # d^j/dx^j erf = (-1)^(j-1) H_{j-1}(x) * 2/sqrt(pi) e^{-x^2}
        coef = np.zeros(j)
        coef[-1] = 1.0
        out.append((-1.0) ** (j - 1) * hermite.hermval(x, coef) * g)
    return np.stack(out)


def _softplus_derivs(x, k):
    out = [np.logaddexp(0.0, x)]
    if k >= 1:
        s = special.expit(x)
        for j in range(1, k + 1):
            out.append(P.polyval(s, _SIGMOID_POLYS[j - 1]))
    return np.stack(out)


def _identity_derivs(x, k):
    out = np.zeros((k + 1,) + np.shape(x))
    out[0] = x
    if k >= 1:
        out[1] = 1.0
    return out


ACTIVATIONS: dict[str, ActivationSpec] = {
    "tanh": ActivationSpec("tanh", _tanh_derivs, 0.5),
    "sin": ActivationSpec("sin", _sin_derivs, 0.5),
    "erf": ActivationSpec("erf", _erf_derivs, 0.6),
    "softplus": ActivationSpec("softplus", _softplus_derivs, 0.5),
    "identity": ActivationSpec("identity", _identity_derivs, 0.5),
}

# cyclic assignment for the per-neuron variant
PER_NEURON_POOL = ("tanh", "sin", "erf", "softplus")


def get_activation(name: str) -> ActivationSpec:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; known: {sorted(ACTIVATIONS)}") from None


class PerNeuronActivation:
    """Neuron j of a layer uses ``pool[j % len(pool)]``."""

    def __init__(self, pool=PER_NEURON_POOL):
        self.specs = [get_activation(p) for p in pool]
        self.id = "per-neuron(" + ",".join(pool) + ")"

    def derivs(self, x, k):
        x = np.asarray(x, float)
        out = np.empty((k + 1,) + x.shape)
        m = len(self.specs)
        for r, spec in enumerate(self.specs):
            out[..., r::m] = spec.derivs(x[..., r::m], k)
        return out

    def __call__(self, x):
        return self.derivs(x, 0)[0]


def activation_bound_audit(spec: ActivationSpec, domain=(-10.0, 10.0), max_order: int = 4,
                           samples: int = 2001, fd_step: float = 1e-4,
                           fd_rtol: float = 1e-5) -> dict:
    """Check the factorial derivative bound and finite-difference consistency.

    Returns a report dict; raises ActivationAuditError naming the first
    offending (x, k) on violation. The finite-difference check compares
    phi^[k] with a central difference of phi^[k-1], with the error scaled by
    max(|phi^[k]|, 1).
    """
    if max_order > 4:
        raise ValueError("audit supports orders up to 4")
    x = np.linspace(domain[0], domain[1], samples)
    d = spec.derivs(x, max_order)
    lo = spec.derivs(x - fd_step, max_order - 1)
    hi = spec.derivs(x + fd_step, max_order - 1)
    report = {"id": spec.id, "domain": list(domain), "orders": {}}
    for k in range(1, max_order + 1):
        peak = float(np.max(np.abs(d[k])))
        bound = spec.bound_constant * math.factorial(k + 1)
        if not np.all(np.isfinite(d[k])):
            raise ActivationAuditError(f"{spec.id}: non-finite phi^[{k}]")
        if peak > bound:
            i = int(np.argmax(np.abs(d[k])))
            raise ActivationAuditError(
                f"{spec.id}: |phi^[{k}]({x[i]:.4g})| = {peak:.4g} exceeds {bound:.4g}")
        fd = (hi[k - 1] - lo[k - 1]) / (2 * fd_step)
        err = np.abs(fd - d[k]) / np.maximum(np.abs(d[k]), 1.0)
        worst = float(np.max(err))
        if worst > fd_rtol:
            i = int(np.argmax(err))
            raise ActivationAuditError(
                f"{spec.id}: finite difference mismatch {worst:.3g} at x={x[i]:.4g}, k={k}")
        report["orders"][k] = {"max_abs": peak, "bound": bound, "fd_error": worst}
    return report
