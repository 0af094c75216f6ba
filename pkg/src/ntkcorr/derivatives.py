"""Mixed parameter derivatives by subset-indexed Taylor jets, and the
derivative-correlation tensors built from them.

A jet with k directions v_1..v_k carries, for every layer and every subset
S of {1..k}, the mixed partial d^|S| F^(l) / prod_{j in S} dt_j of
F^(l)(theta + sum_j t_j v_j) at t = 0. Because each direction enters at most
once, an affine layer maps coefficients linearly (plus the direction's own
weight block), and an activation expands by Faa di Bruno over set
partitions. Free parameter indices (D >= 1) come from one reverse sweep
through the recorded jets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .network import NetworkParams, QuadraticPerpParams, forward_batch, forward_layers
from .tensor_core import NormEstimate

MAX_DIRECTIONS = 4
MAX_ORDER = 4  # D + d


class UnsupportedOrderError(ValueError):
    pass


@lru_cache(maxsize=None)
def _partitions(mask: int) -> tuple[tuple[int, ...], ...]:
    """All set partitions of the bits of ``mask``, blocks given as masks."""
    if mask == 0:
        return ((),)
    low = mask & -mask
    rest = mask ^ low
    out = []
    sub = rest
    while True:  # every subset of rest joins the block holding the lowest bit
        block = low | sub
        for p in _partitions(rest ^ sub):
            out.append((block,) + p)
        if sub == 0:
            break
        sub = (sub - 1) & rest
    return tuple(out)


@dataclass
class JetBundle:
    """Per-layer subset coefficients; ``layers[l][S]`` has length n_l."""

    k: int
    layers: list  # list of arrays shaped (2**k, n_l)
    acts: list = field(default_factory=list, repr=False)  # activation jets fed into each layer

    @property
    def full(self) -> int:
        return (1 << self.k) - 1

    @property
    def top(self) -> np.ndarray:
        """Output-layer mixed partial over all k directions."""
        return self.layers[-1][self.full]


def _activation_jet(act, F: np.ndarray, k: int, extra: int = 0):
    dphi = act.derivs(F[0], k + extra)
    H = np.zeros_like(F)
    for S in range(1 << k):
        acc = 0.0
        for part in _partitions(S):
            term = dphi[len(part)]
            for B in part:
                term = term * F[B]
            acc = acc + term
        H[S] = acc
    return H, dphi


def _check_directions(params, directions):
    k = len(directions)
    if k > MAX_DIRECTIONS:
        raise UnsupportedOrderError(f"at most {MAX_DIRECTIONS} directions, got {k}")
    dirs = [np.asarray(v, float) for v in directions]
    for v in dirs:
        if v.shape != (params.n_params,):
            raise ValueError(f"direction has shape {v.shape}, expected ({params.n_params},)")
    return dirs


def jet_forward(params, x, directions: Sequence[np.ndarray]) -> JetBundle:
    """Mixed partials of every layer along up to four parameter directions."""
    dirs = _check_directions(params, directions)
    x = np.asarray(x, float)
    if isinstance(params, QuadraticPerpParams):
        return _quad_jet(params, x, dirs)
    k = len(dirs)
    cfg = params.config
    if x.shape != (cfg.input_dim,):
        raise ValueError("input dimension mismatch")
    blocks = [params.blocks(v) for v in dirs]
    F = np.zeros((1 << k, x.size))
    F[0] = x
    layers, acts = [F], []
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        H, _ = _activation_jet(cfg.layer_activation(l), F, k)
        acts.append(H)
        F = H @ W.T
        F[0] += b
        for j, (Vw, Vb) in enumerate(blocks):
            bit = 1 << j
            with_j = [S for S in range(1 << k) if S & bit]
            F[with_j] += H[[S ^ bit for S in with_j]] @ Vw[l].T
            F[bit] += Vb[l]
        layers.append(F)
    return JetBundle(k, layers, acts)


def jet_gradient(params, x, directions: Sequence[np.ndarray], output_weights) -> np.ndarray:
    """Gradient in theta of sum_i w_i * (top mixed partial)_i, directions held fixed.

    With no directions this is the plain reverse-mode gradient of w . F(x).
    """
    dirs = _check_directions(params, directions)
    w = np.asarray(output_weights, float)
    x = np.asarray(x, float)
    if isinstance(params, QuadraticPerpParams):
        return float(w[0]) * _quad_jet_gradient(params, x, dirs)
    k = len(dirs)
    cfg = params.config
    jet = jet_forward(params, x, dirs)
    blocks = [params.blocks(v) for v in dirs]
    full = (1 << k) - 1
    Fbar = np.zeros_like(jet.layers[-1])
    Fbar[full] = w
    grads_W, grads_b = [None] * params.depth, [None] * params.depth
    for l in range(params.depth - 1, -1, -1):
        W = params.weights[l]
        H = jet.acts[l]
        grads_W[l] = Fbar.T @ H
        grads_b[l] = Fbar[0].copy()
        if l == 0:
            break
        Hbar = Fbar @ W
        for j, (Vw, _) in enumerate(blocks):
            bit = 1 << j
            without = [S for S in range(1 << k) if not S & bit]
            Hbar[without] += Fbar[[S | bit for S in without]] @ Vw[l]
        Fprev = jet.layers[l]
        dphi = cfg.layer_activation(l).derivs(Fprev[0], k + 1)
        Fbar = np.zeros_like(Fprev)
        for S in range(1 << k):
            hb = Hbar[S]
            for part in _partitions(S):
                m = len(part)
                prod = np.ones_like(hb)
                for B in part:
                    prod = prod * Fprev[B]
                Fbar[0] += hb * dphi[m + 1] * prod
                for i, B in enumerate(part):
                    others = np.ones_like(hb)
                    for i2, B2 in enumerate(part):
                        if i2 != i:
                            others = others * Fprev[B2]
                    Fbar[B] += hb * dphi[m] * others
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_W, grads_b)])


def _quad_jet(params: QuadraticPerpParams, x, dirs):
    f = params.features(x)[0]
    g = params.rotate(f)
    th = params.flat
    k = len(dirs)
    c = np.zeros((1 << k, 1))
    tg = th @ g
    gv = [g @ v for v in dirs]
    for S in range(1 << k):
        bits = [j for j in range(k) if S >> j & 1]
        if not bits:
            c[S] = th @ f + tg ** 2
        elif len(bits) == 1:
            v = dirs[bits[0]]
            c[S] = f @ v + 2 * tg * gv[bits[0]]
        elif len(bits) == 2:
            c[S] = 2 * gv[bits[0]] * gv[bits[1]]
    return JetBundle(k, [x[None, :], c])


def _quad_jet_gradient(params: QuadraticPerpParams, x, dirs):
    f = params.features(x)[0]
    g = params.rotate(f)
    k = len(dirs)
    if k == 0:
        return f + 2 * (params.flat @ g) * g
    if k == 1:
        return 2 * (g @ dirs[0]) * g
    return np.zeros_like(f)


# --- first derivatives ------------------------------------------------------------

class TangentFactors:
    """Output Jacobians of a batch of inputs in factored form.

    For an FCNN the gradient of output i in layer-l weights is the outer
    product delta_l[i] h_{l-1}^T, so kernels and Jacobian-vector products
    need only O(sum n_l) numbers per input rather than N.
    """

    def __init__(self, params, X):
        X = np.atleast_2d(np.asarray(X, float))
        self.quad = isinstance(params, QuadraticPerpParams)
        self.count = X.shape[0]
        if self.quad:
            f = params.features(X)
            g = params.rotate(f)
            self.jac = (f + 2 * (g @ params.flat)[:, None] * g)[:, None, :]
            self.outputs = params.outputs(X)
            return
        cfg = params.config
        layers = forward_layers(params, X)
        self.outputs = layers[-1]
        self.hs, dphis = [], []
        for l in range(params.depth):
            d = cfg.layer_activation(l).derivs(layers[l], 1)
            self.hs.append(d[0])
            dphis.append(d[1])
        B, dY = X.shape[0], cfg.output_dim
        delta = np.broadcast_to(np.eye(dY), (B, dY, dY)).copy()
        self.deltas = [None] * params.depth
        for l in range(params.depth - 1, -1, -1):
            self.deltas[l] = delta
            if l > 0:
                delta = (delta @ params.weights[l]) * dphis[l][:, None, :]

    def gradient(self, b: int, i: int) -> np.ndarray:
        if self.quad:
            return self.jac[b, i].copy()
        parts = []
        for d, h in zip(self.deltas, self.hs):
            parts.append(np.outer(d[b, i], h[b]).ravel())
            parts.append(d[b, i])
        return np.concatenate(parts)

    def vjp(self, b: int, cotangent) -> np.ndarray:
        """Sum_i cot_i grad F_i(x_b) as a flat vector."""
        cot = np.asarray(cotangent, float)
        if self.quad:
            return cot @ self.jac[b]
        parts = []
        for d, h in zip(self.deltas, self.hs):
            e = cot @ d[b]
            parts.append(np.outer(e, h[b]).ravel())
            parts.append(e)
        return np.concatenate(parts)

    def jvp(self, params, v) -> np.ndarray:
        """grad F(x_b) . v for every input, shape (B, d_Y)."""
        v = np.asarray(v, float)
        if self.quad:
            return self.jac @ v
        Vw, Vb = params.blocks(v)
        out = 0.0
        for d, h, W, b in zip(self.deltas, self.hs, Vw, Vb):
            out = out + np.einsum("bip,bp->bi", d, h @ W.T) + d @ b
        return out

    def kernel(self, other: TangentFactors, eta: float) -> np.ndarray:
        """eta * grad F(a)^T grad F(b), shape (B_a, B_b, d_Y, d_Y)."""
        if self.quad:
            return eta * np.einsum("aip,bjp->abij", self.jac, other.jac)
        out = 0.0
        for da, ha, db, hb in zip(self.deltas, self.hs, other.deltas, other.hs):
            hh = ha @ hb.T + 1.0
            out = out + np.einsum("aip,bjp->abij", da, db) * hh[:, :, None, None]
        return eta * out

    def take(self, idx) -> TangentFactors:
        sub = object.__new__(TangentFactors)
        sub.quad = self.quad
        sub.count = len(np.atleast_1d(idx))
        sub.outputs = self.outputs[idx]
        if self.quad:
            sub.jac = self.jac[idx]
        else:
            sub.deltas = [d[idx] for d in self.deltas]
            sub.hs = [h[idx] for h in self.hs]
        return sub


def gradient(params, x, output_index: int = 0) -> np.ndarray:
    """Flat gradient of output ``output_index`` at input x."""
    dY = params.config.output_dim
    if not 0 <= output_index < dY:
        raise ValueError(f"output_index must be < {dY}")
    return TangentFactors(params, np.asarray(x, float)[None, :]).gradient(0, output_index)


def jacobian(params, x) -> np.ndarray:
    """All output gradients at x, shape (d_Y, N)."""
    tf = TangentFactors(params, np.asarray(x, float)[None, :])
    return np.stack([tf.gradient(0, i) for i in range(params.config.output_dim)])


def kernel_eval(params, x, x2, eta: float | None = None) -> np.ndarray:
    """Theta(x, x') = eta * J(x) J(x')^T from explicit flat gradients."""
    eta = params.config.eta if eta is None else eta
    return eta * jacobian(params, x) @ jacobian(params, x2).T


def kernel_layerwise(params, x, x2, eta: float | None = None) -> np.ndarray:
    """Kernel by the layer recursion

        Theta_l = eta (h_{l-1}.h'_{l-1} + 1) I
                  + W_l diag(phi'(F^(l-1))) Theta_{l-1} diag(phi'(F'^(l-1))) W_l^T,

    starting from Theta_0 = 0 on the input layer.
    """
    if not isinstance(params, NetworkParams):
        raise TypeError("layerwise kernel is defined for fully connected networks only")
    eta = params.config.eta if eta is None else eta
    cfg = params.config
    A = forward_layers(params, np.asarray(x, float)[None, :])
    B = forward_layers(params, np.asarray(x2, float)[None, :])
    theta = np.zeros((cfg.input_dim, cfg.input_dim))
    for l, W in enumerate(params.weights):
        act = cfg.layer_activation(l)
        da = act.derivs(A[l][0], 1)
        db = act.derivs(B[l][0], 1)
        inner = da[1][:, None] * theta * db[1][None, :]
        theta = W @ inner @ W.T + eta * (da[0] @ db[0] + 1.0) * np.eye(W.shape[0])
    return theta


# --- correlations -----------------------------------------------------------------

@dataclass
class CorrelationResult:
    D: int
    d: int
    inputs: list
    output_indices: tuple
    value: object  # float (D=0), flat vector (D=1) or NormEstimate (D=2)
    eta: float
    prefactor: float
    prefactor_applied: bool = True

    @property
    def magnitude(self) -> float:
        if self.D == 0:
            return abs(float(self.value))
        if self.D == 1:
            return float(np.linalg.norm(self.value))
        return float(self.value.value)


def correlation_prefactor(D: int, d: int, eta: float) -> float:
    return eta ** (D / 2 + d) / (math.factorial(D) * math.factorial(d))


def _normalize_inputs(d, inputs, output_indices):
    inputs = [np.asarray(x, float) for x in inputs]
    if len(inputs) != d + 1:
        raise ValueError(f"need {d + 1} inputs x_0..x_d, got {len(inputs)}")
    if output_indices is None:
        output_indices = (0,) * (d + 1)
    output_indices = tuple(int(i) for i in output_indices)
    if len(output_indices) != d + 1:
        raise ValueError("need one output index per input")
    return inputs, output_indices


def _gradients(params, inputs, output_indices):
    return [gradient(params, x, i) for x, i in zip(inputs[1:], output_indices[1:])]


def correlation(params, D: int, d: int, inputs, output_indices=None,
                eta: float | None = None) -> CorrelationResult:
    """C^{D,d} for D in {0, 1}.

    D=0: eta^d/d! * grad^d F_{i0}(x_0)[g_1, ..., g_d] with g_a = grad F_{i_a}(x_a).
    D=1: the flat vector d/dtheta of that mixed derivative (g held fixed),
    scaled by eta^{1/2+d}/d!.
    """
    if d < 1 or D < 0:
        raise ValueError("need d >= 1 and D >= 0")
    if D + d > MAX_ORDER:
        raise UnsupportedOrderError(f"D + d must be <= {MAX_ORDER}")
    if D >= 2:
        raise UnsupportedOrderError("D >= 2 has no dense value here; use correlation_norm_hopm")
    eta = params.config.eta if eta is None else eta
    inputs, output_indices = _normalize_inputs(d, inputs, output_indices)
    gs = _gradients(params, inputs, output_indices)
    pref = correlation_prefactor(D, d, eta)
    i0 = output_indices[0]
    if D == 0:
        value = pref * float(jet_forward(params, inputs[0], gs).top[i0])
    else:
        w = np.zeros(params.config.output_dim)
        w[i0] = 1.0
        value = pref * jet_gradient(params, inputs[0], gs, w)
    return CorrelationResult(D, d, inputs, output_indices, value, eta, pref)


def correlation_norm_hopm(params, d: int, inputs, output_indices=None,
                          eta: float | None = None, restarts: int = 2,
                          tol: float = 1e-10, max_iters: int = 500,
                          seed: int = 0) -> CorrelationResult:
    """Subordinate norm of C^{2,d} over its two free parameter modes.

    The free-mode matrix M is never formed: M u is one reverse sweep through
    a jet with directions (g_1, ..., g_d, u). Alternating maximization over
    the two unit vectors gives a certified lower bound.
    """
    D = 2
    if d < 0 or D + d > MAX_ORDER:
        raise UnsupportedOrderError(f"C^(2,{d}) exceeds order {MAX_ORDER}")
    eta = params.config.eta if eta is None else eta
    inputs, output_indices = _normalize_inputs(d, inputs, output_indices)
    gs = _gradients(params, inputs, output_indices)
    x0 = inputs[0]
    w = np.zeros(params.config.output_dim)
    w[output_indices[0]] = 1.0

    def matvec(u):
        return jet_gradient(params, x0, gs + [u], w)

    rng = np.random.default_rng(seed)
    starts = [gradient(params, x0, output_indices[0])]
    starts += [rng.standard_normal(params.n_params) for _ in range(max(restarts, 1) - 1)]
    best = None
    total = 0
    for v in starts:
        nv = np.linalg.norm(v)
        if nv == 0:
            continue
        v = v / nv
        value, converged, sign = 0.0, False, 1.0
        u = v
        for it in range(max_iters):
            Mv = matvec(v)
            nu = np.linalg.norm(Mv)
            total += 1
            if nu == 0:
                value, converged = 0.0, True
                break
            u = Mv / nu
            Mu = matvec(u)
            total += 1
            new = float(u @ Mu)  # = u^T M v' at the updated pair, M symmetric
            nv2 = np.linalg.norm(Mu)
            if nv2 == 0:
                value, converged = 0.0, True
                break
            v = Mu / nv2
            sign = 1.0 if new >= 0 else -1.0
            if abs(abs(new) - value) <= tol * max(abs(new), 1e-300):
                value, converged = abs(new), True
                break
            value = abs(new)
        if best is None or value > best[0]:
            # u^T M (sign u) = value is the certified pair
            best = (value, converged, (u, sign * u))
    if best is None:
        best = (0.0, True, ())
    pref = correlation_prefactor(D, d, eta)
    est = NormEstimate(best[0], "power-iteration", len(starts), total, best[1], True, best[2])
    return CorrelationResult(D, d, inputs, output_indices, est.scaled(pref), eta, pref)


# --- finite-difference oracle ---------------------------------------------------

def finite_difference_mixed(params, x, directions, order: int, step: float = 1e-2) -> np.ndarray:
    """Mixed partial d^order F / dt_1..dt_order by central polarization.

    Sums prod(eps) F(theta + h sum eps_j v_j) / (2h)^order over eps in {+-1}^order,
    then one Richardson pass (4 D(h/2) - D(h)) / 3; error O(step^4) for smooth F.
    """
    if not 1 <= order <= 3:
        raise ValueError("finite differences support orders 1..3")
    if step <= 0:
        raise ValueError("step must be > 0")
    dirs = [np.asarray(v, float) for v in directions[:order]]
    x = np.asarray(x, float)[None, :]
    theta = params.flat

    def polar(h):
        acc = 0.0
        for signs in np.ndindex(*(2,) * order):
            eps = [1.0 if s == 0 else -1.0 for s in signs]
            shift = sum(e * v for e, v in zip(eps, dirs))
            acc = acc + math.prod(eps) * forward_batch(params.with_flat(theta + h * shift), x)[0]
        return acc / (2 * h) ** order

    return (4.0 * polar(step / 2) - polar(step)) / 3.0
