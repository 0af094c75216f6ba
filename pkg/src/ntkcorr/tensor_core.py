"""Dense tensors, the subordinate (injective) norm and its brute-force oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize


class TensorInputError(ValueError):
    pass


class TensorSizeError(ValueError):
    pass


class DenseTensor:
    """Rank-r real array with explicit shape, stored flat in row-major order.

    Rank 0 is a scalar (shape ``()``). Entries must be finite.
    """

    __slots__ = ("_data",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.array(values, dtype=float)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise TensorInputError(f"extents must be positive, got {shape}")
            if arr.size != math.prod(shape):
                raise TensorInputError(
                    f"{arr.size} values do not fill shape {shape}")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise TensorInputError("tensor has non-finite entries")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self._data.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        return self._data

    def __add__(self, other: DenseTensor) -> DenseTensor:
        return DenseTensor(self._data + other._data)

    def __sub__(self, other: DenseTensor) -> DenseTensor:
        return DenseTensor(self._data - other._data)

    def __mul__(self, scalar: float) -> DenseTensor:
        return DenseTensor(self._data * float(scalar))

    __rmul__ = __mul__

    def __repr__(self):
        return f"DenseTensor(shape={self.shape})"

    def to_csv_rows(self) -> Iterable[tuple]:
        """One row per entry: multi-index followed by value."""
        for idx in np.ndindex(*self.shape):
            yield (*idx, float(self._data[idx]))


def as_tensor(M) -> DenseTensor:
    return M if isinstance(M, DenseTensor) else DenseTensor(M)


@dataclass
class NormEstimate:
    value: float
    method: str  # exact-matrix | power-iteration | brute-force
    restarts: int = 0
    iterations: int = 0
    converged: bool = True
    is_lower_bound: bool = False
    vectors: tuple = field(default=(), repr=False)

    def scaled(self, factor: float) -> NormEstimate:
        return NormEstimate(abs(factor) * self.value, self.method, self.restarts,
                            self.iterations, self.converged, self.is_lower_bound,
                            self.vectors)


def frobenius_norm(M) -> float:
    M = as_tensor(M)
    return float(np.sqrt(np.sum(M.array ** 2)))


def _contract_all_but(T: np.ndarray, vecs: Sequence[np.ndarray], skip: int) -> np.ndarray:
    """Contract every mode except ``skip`` with the matching vector."""
    out = T
    # contract from the last mode down so earlier axis numbers stay valid
    for mode in range(T.ndim - 1, -1, -1):
        if mode == skip:
            continue
        out = np.tensordot(out, vecs[mode], axes=([mode], [0]))
    return out


def _multilinear(T: np.ndarray, vecs: Sequence[np.ndarray]) -> float:
    out = T
    for v in reversed(vecs):
        out = out @ v
    return float(out)


def _is_symmetric(T: np.ndarray, tol: float = 1e-12) -> bool:
    if T.ndim < 2 or len(set(T.shape)) != 1:
        return False
    scale = max(np.max(np.abs(T)), 1e-300)
    for perm in itertools.permutations(range(T.ndim)):
        if np.max(np.abs(T - T.transpose(perm))) > tol * scale:
            return False
    return True


def _unit(v: np.ndarray) -> np.ndarray:
    nv = np.linalg.norm(v)
    return v / nv if nv > 0 else v


def _plain_hopm(T, start, tol, max_iters):
    vecs = [v.copy() for v in start]
    value = _multilinear(T, vecs)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        for mode in range(T.ndim):
            w = _contract_all_but(T, vecs, mode)
            nw = np.linalg.norm(w)
            if nw > 0:  # zero update: keep the previous vector
                vecs[mode] = w / nw
        new = _multilinear(T, vecs)
        if abs(new - value) < tol:
            value = new
            converged = True
            break
        value = new
    if value < 0:  # flip one factor; the norm is the sup of |.| by sign symmetry
        vecs[0] = -vecs[0]
        value = -value
    return value, vecs, it, converged


def _symmetric_hopm(T, start, tol, max_iters):
    """Shifted symmetric power iteration with one shared vector."""
    r = T.ndim
    # shift large enough to make the objective convex on the sphere
    alpha = (r - 1) * frobenius_norm(T)
    best = None
    total = 0
    for sign in (1.0, -1.0) if r % 2 == 0 else (1.0,):
        S = sign * T
        v = start.copy()
        value = _multilinear(S, [v] * r)
        converged = False
        for it in range(1, max_iters + 1):
            w = _contract_all_but(S, [v] * r, 0) + alpha * v
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            v = w / nw
            new = _multilinear(S, [v] * r)
            total += 1
            if abs(new - value) < tol:
                value = new
                converged = True
                break
            value = new
        if r % 2 == 1 and value < 0:
            v, value = -v, -value
        if best is None or value > best[0]:
            best = (value, v, converged)
    value, v, converged = best
    return max(value, 0.0), [v] * r, total, converged


def subordinate_norm(M, restarts: int = 16, tol: float = 1e-10, max_iters: int = 500,
                     seed: int = 0, symmetric: bool | None = None) -> NormEstimate:
    """Supremum of M contracted with unit vectors on every mode.

    Rank 1 is the Euclidean norm and rank 2 the largest singular value, both
    exact. Higher ranks use alternating maximization from ``restarts`` random
    starts (the first start is the leading singular vectors of each
    unfolding), which yields a certified lower bound. For tensors symmetric
    under all mode permutations a shared-vector iteration is also run and the
    better value kept; ``symmetric=True/False`` forces one route.
    """
    M = as_tensor(M)
    if M.rank == 0:
        raise TensorInputError("subordinate_norm needs rank >= 1; use abs() for scalars")
    if restarts < 1 or tol <= 0:
        raise TensorInputError("restarts must be >= 1 and tol > 0")
    T = M.array
    if M.rank == 1:
        v = _unit(T.copy())
        return NormEstimate(float(np.linalg.norm(T)), "exact-matrix", vectors=(v,))
    if M.rank == 2:
        if not np.any(T):
            return NormEstimate(0.0, "exact-matrix",
                                vectors=(np.eye(T.shape[0])[0], np.eye(T.shape[1])[0]))
        U, s, Vt = np.linalg.svd(T)
        return NormEstimate(float(s[0]), "exact-matrix", vectors=(U[:, 0], Vt[0]))

    rng = np.random.default_rng(seed)
    if not np.any(T):
        vecs = tuple(np.eye(n)[0] for n in T.shape)
        return NormEstimate(0.0, "power-iteration", restarts, 0, True, True, vecs)

    use_sym = _is_symmetric(T) if symmetric is None else symmetric
    use_plain = symmetric is not True

    starts = []
    # deterministic first start: leading left singular vector of each unfolding
    first = []
    for mode in range(T.ndim):
        unfold = np.moveaxis(T, mode, 0).reshape(T.shape[mode], -1)
        first.append(np.linalg.svd(unfold, full_matrices=False)[0][:, 0])
    starts.append(first)
    for _ in range(restarts - 1):
        starts.append([_unit(rng.standard_normal(n)) for n in T.shape])

    best_val, best_vecs, iters, all_conv = -1.0, None, 0, True
    plain_results = []
    if use_plain:
        for st in starts:
            val, vecs, it, conv = _plain_hopm(T, st, tol, max_iters)
            plain_results.append(vecs)
            iters += it
            if val > best_val:
                best_val, best_vecs, best_conv = val, vecs, conv
    if use_sym:
        # the shared-vector landscape has more spurious local maxima, so it
        # gets its own larger pool of random starts
        sym_starts = [st[0] for st in starts]
        sym_starts += [_unit(rng.standard_normal(T.shape[0])) for _ in range(max(4 * restarts, 32))]
        # seed the shared vector from every plain maximizer factor as well
        for vecs in plain_results:
            sym_starts.extend(vecs)
        for st in sym_starts:
            val, vecs, it, conv = _symmetric_hopm(T, st, tol, max_iters)
            iters += it
            if val > best_val:
                best_val, best_vecs, best_conv = val, vecs, conv
    return NormEstimate(float(best_val), "power-iteration", restarts, iters,
                        bool(best_conv), True, tuple(best_vecs))


# --- brute-force oracle ---------------------------------------------------------

BRUTE_FORCE_MAX_EXTENT = 4
BRUTE_FORCE_MAX_RANK = 4


def _sphere_grid(n: int, per_angle: int) -> np.ndarray:
    """Points on the upper half of S^{n-1} from a hyperspherical-angle grid."""
    if n == 1:
        return np.ones((1, 1))
    # angles phi_1..phi_{n-2} in [0, pi], last in [0, pi) (half sphere by sign symmetry)
    axes = [np.linspace(0, np.pi, per_angle) for _ in range(n - 2)]
    axes.append(np.linspace(0, np.pi, per_angle, endpoint=False))
    grids = np.meshgrid(*axes, indexing="ij")
    ang = np.stack([g.reshape(-1) for g in grids], axis=1)
    pts = np.ones((ang.shape[0], n))
    sin_prod = np.ones(ang.shape[0])
    for k in range(n - 1):
        pts[:, k] = sin_prod * np.cos(ang[:, k])
        sin_prod = sin_prod * np.sin(ang[:, k])
    pts[:, n - 1] = sin_prod
    return pts


def brute_force_norm(M, grid_density: int = 24, refine_top: int = 8,
                     max_grid_points: int = 2_000_000) -> NormEstimate:
    """Global grid search over products of unit spheres, then local refinement.

    The last mode is maximized in closed form (the norm of the partial
    contraction); the others are gridded with ``grid_density`` points per
    hyperspherical angle (reduced automatically to keep the product grid
    under ``max_grid_points``). The best ``refine_top`` grid points are
    polished with L-BFGS on the normalized-vector objective.
    """
    M = as_tensor(M)
    if M.rank == 0:
        raise TensorInputError("rank 0 has no norm oracle; use abs()")
    if M.rank > BRUTE_FORCE_MAX_RANK or max(M.shape) > BRUTE_FORCE_MAX_EXTENT:
        raise TensorSizeError(
            f"brute force capped at rank <= {BRUTE_FORCE_MAX_RANK} and extents <= "
            f"{BRUTE_FORCE_MAX_EXTENT}, got shape {M.shape}")
    T = M.array
    tol = 1.0 / grid_density
    if M.rank == 1:
        return NormEstimate(float(np.linalg.norm(T)), "brute-force", vectors=(_unit(T.copy()),))

    gridded = list(range(M.rank - 1))
    dims = sum(max(T.shape[m] - 1, 0) for m in gridded)
    per_angle = grid_density
    while dims > 0 and per_angle ** dims > max_grid_points and per_angle > 3:
        per_angle -= 1
    grids = [_sphere_grid(T.shape[m], per_angle) for m in gridded]

    # successive contraction over the gridded modes: shape (P1, ..., P_{r-1}, N_r)
    out = np.tensordot(grids[0], T, axes=([1], [0]))
    for k, g in enumerate(grids[1:], start=1):
        # contract axis k of out (mode k of T) with grid k, moving the new axis to k
        out = np.moveaxis(np.tensordot(out, g, axes=([k], [1])), -1, k)
    vals = np.linalg.norm(out, axis=-1).reshape(-1)

    top = np.argsort(vals)[::-1][:refine_top]
    sizes = [g.shape[0] for g in grids]
    best_val, best_vecs = -1.0, None
    for flat_idx in top:
        idx = np.unravel_index(flat_idx, sizes)
        vecs = [grids[m][idx[m]] for m in range(len(grids))]
        last = _unit(_contract_all_but(T, vecs + [np.zeros(T.shape[-1])], M.rank - 1))
        val, vecs = _refine(T, vecs + [last])
        if val > best_val:
            best_val, best_vecs = val, vecs
    return NormEstimate(float(max(best_val, 0.0)), "brute-force", 0, 0, True, False,
                        tuple(best_vecs))


def _refine(T: np.ndarray, vecs: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    shapes = [v.shape[0] for v in vecs]
    splits = np.cumsum(shapes)[:-1]

    def unpack(z):
        return np.split(z, splits)

    def objective(z):
        raw = unpack(z)
        norms = [max(np.linalg.norm(u), 1e-300) for u in raw]
        units = [u / nu for u, nu in zip(raw, norms)]
        val = _multilinear(T, units)
        grads = []
        for m, (u, nu) in enumerate(zip(units, norms)):
            g = _contract_all_but(T, units, m)
            # project onto the tangent space of the sphere, then chain through u/|u|
            grads.append((g - (g @ u) * u) / nu)
        return -val, -np.concatenate(grads)

    z0 = np.concatenate(vecs)
    res = optimize.minimize(objective, z0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12})
    raw = unpack(res.x)
    units = [_unit(u) for u in raw]
    return _multilinear(T, units), units


# --- algebra ---------------------------------------------------------------------

def contract(M, vectors: Sequence[tuple[int, np.ndarray]]) -> DenseTensor:
    """Contract the listed modes with vectors; remaining modes keep their order."""
    M = as_tensor(M)
    modes = [int(m) for m, _ in vectors]
    if len(set(modes)) != len(modes):
        raise TensorInputError("contraction modes must be distinct")
    out = M.array
    for mode, vec in sorted(zip(modes, (np.asarray(v, float) for _, v in vectors)),
                            key=lambda p: -p[0]):
        if not 0 <= mode < M.rank:
            raise TensorInputError(f"mode {mode} out of range for rank {M.rank}")
        if vec.shape != (M.shape[mode],):
            raise TensorInputError(
                f"vector of length {vec.shape} does not match extent {M.shape[mode]}")
        out = np.tensordot(out, vec, axes=([mode], [0]))
    return DenseTensor(out)


def direct_product(M1, M2) -> DenseTensor:
    M1, M2 = as_tensor(M1), as_tensor(M2)
    return DenseTensor(np.multiply.outer(M1.array, M2.array))


def norm_expectation(samples: Sequence, **norm_kw) -> float:
    """sqrt(mean ||M||^2 / N) over samples of one shape."""
    samples = [as_tensor(s) for s in samples]
    if not samples:
        raise TensorInputError("need at least one sample")
    shape = samples[0].shape
    if any(s.shape != shape for s in samples):
        raise TensorInputError("samples must share one shape")
    N = samples[0].size
    sq = []
    for s in samples:
        v = abs(float(s.array)) if s.rank == 0 else subordinate_norm(s, **norm_kw).value
        sq.append(v * v)
    return float(np.sqrt(np.mean(sq) / N))


def elementwise_power(M, p: int) -> DenseTensor:
    if p < 1:
        raise TensorInputError("power must be >= 1")
    M = as_tensor(M)
    return DenseTensor(M.array ** p)
