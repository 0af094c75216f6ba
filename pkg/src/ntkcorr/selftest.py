"""Seeded invariant battery for the tensor norms."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    DenseTensor, brute_force_norm, contract, direct_product, frobenius_norm, subordinate_norm,
)

FAULTS = ("product-sign",)


@dataclass
class InvariantResult:
    group: str
    cases: int
    failures: int
    worst: float  # largest violation margin seen (<= 0 means all held)
    detail: str = ""
    rows: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.failures == 0


def _shape(rng, max_rank=3, max_extent=3):
    r = int(rng.integers(3, max_rank + 1))
    return tuple(int(rng.integers(2, max_extent + 1)) for _ in range(r))


def _norm(T):
    return subordinate_norm(T).value


def _check(group, cases, fn, rng):
    failures, worst, rows, detail = 0, -np.inf, [], ""
    for case in range(cases):
        margin, info = fn(rng)
        rows.append((group, case, margin))
        worst = max(worst, margin)
        if margin > 0:
            failures += 1
            if not detail:
                detail = f"case {case}: {info}"
    return InvariantResult(group, cases, failures, float(worst), detail, rows)


def _triangle(rng):
    shape = _shape(rng)
    A, B = rng.standard_normal(shape), rng.standard_normal(shape)
    lhs, rhs = _norm(A + B), _norm(A) + _norm(B)
    return lhs - rhs - 1e-8, f"||A+B||={lhs:.10g} > {rhs:.10g}"


def _contraction(rng):
    shape = _shape(rng)
    M = DenseTensor(rng.standard_normal(shape))
    k = int(rng.integers(1, len(shape)))
    modes = sorted(rng.choice(len(shape), size=k, replace=False).tolist())
    vecs = []
    for m in modes:
        v = rng.standard_normal(shape[m])
        vecs.append((m, v / np.linalg.norm(v)))
    C = contract(M, vecs)
    lhs = _norm(C) if C.rank >= 1 else abs(float(C.array))
    rhs = _norm(M)
    return lhs - rhs - 1e-8, f"||M.v||={lhs:.10g} > ||M||={rhs:.10g}"


def _product(rng, flip=False):
    A = rng.standard_normal((int(rng.integers(2, 4)), int(rng.integers(2, 4))))
    B = rng.standard_normal(int(rng.integers(2, 5)))
    lhs = _norm(direct_product(A, B))
    rhs = _norm(A) * _norm(B)
    if flip:
        rhs = -rhs
    return abs(lhs - rhs) - 1e-6 * abs(rhs), f"||A x B||={lhs:.10g} vs {rhs:.10g}"


def _dominance(rng):
    if rng.random() < 0.25:
        shape = _shape(rng)
        vs = [rng.standard_normal(n) for n in shape]
        T = vs[0]
        for v in vs[1:]:
            T = np.multiply.outer(T, v)
        sub, fro = _norm(T), frobenius_norm(T)
        return abs(sub - fro) - 1e-8 * fro, f"rank-1 equality {sub:.10g} vs {fro:.10g}"
    T = rng.standard_normal(_shape(rng))
    sub, fro = _norm(T), frobenius_norm(T)
    return sub - fro - 1e-10, f"{sub:.10g} > frobenius {fro:.10g}"


def _oracle(rng):
    shape = _shape(rng, max_rank=4, max_extent=4)
    T = rng.standard_normal(shape)
    est = _norm(T)
    ref = brute_force_norm(T, grid_density=12).value
    return abs(est - ref) - 1e-5 * ref, f"power {est:.10g} vs brute force {ref:.10g}"


def _symmetric(rng):
    n = int(rng.integers(2, 5))
    T = rng.standard_normal((n, n, n))
    S = sum(np.transpose(T, p) for p in itertools.permutations(range(3))) / 6.0
    sym = subordinate_norm(S, symmetric=True).value
    plain = subordinate_norm(S, symmetric=False).value
    return plain - sym - 1e-8, f"symmetric {sym:.10g} < plain {plain:.10g}"


def run_norm_battery(cases: int = 50, seed: int = 0, fault: str | None = None) -> list[InvariantResult]:
    """Run every invariant group on ``cases`` seeded instances.

    ``fault`` deliberately breaks one check (for exercising the failure path).
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {FAULTS}")
    groups = [
        ("triangle", _triangle),
        ("contraction", _contraction),
        ("product", lambda r: _product(r, flip=fault == "product-sign")),
        ("frobenius-dominance", _dominance),
        ("oracle-agreement", _oracle),
        ("symmetric-maximizer", _symmetric),
    ]
    out = []
    for i, (name, fn) in enumerate(groups):
        out.append(_check(name, cases, fn, np.random.default_rng([seed, i])))
    return out
