"""Wasserstein distances between discrete phase-space measures.

The metric on phase space is the product metric
|z - z'|^2 = |x - x'|^2 + w^2 |v - v'|^2 with velocity weight w = 1 unless a
caller asks otherwise.  Three exact routes are provided on purpose:

  w2_exact_uniform   assignment problem, uniform equal-size measures
  w2_general         the full transport linear program (HiGHS dual simplex)
  w2_bruteforce      permutation enumeration, tiny instances only

so each can serve as an oracle for the others, plus an entropic
approximation (sinkhorn_w2) for sizes where the LP is uncomfortable.
"""
from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from .errors import ConfigError

_WEIGHT_TOL = 1e-12
_BRUTE_MAX = 8


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms in phase space R^(2d); weights sum to 1."""

    atoms: np.ndarray   # (M, 2d)
    weights: np.ndarray  # (M,)

    def __post_init__(self):
        a, w = self.atoms, self.weights
        if a.ndim != 2 or w.ndim != 1 or a.shape[0] != w.shape[0] or a.shape[0] == 0:
            raise ValueError("atoms must be (M, p) with matching (M,) weights, M >= 1")
        if a.shape[1] % 2 != 0:
            raise ValueError("atom coordinates must pair positions with velocities")
        if not np.all(np.isfinite(a)) or not np.all(np.isfinite(w)):
            raise ValueError("atoms and weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be >= 0")
        if abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("weights must sum to 1 within 1e-12")

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1] // 2

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.size) <= _WEIGHT_TOL))

    @staticmethod
    def uniform(atoms: np.ndarray) -> "EmpiricalMeasure":
        atoms = np.asarray(atoms, dtype=float)
        m = atoms.shape[0]
        return EmpiricalMeasure(atoms, np.full(m, 1.0 / m))

    @staticmethod
    def from_ensemble(ensemble) -> "EmpiricalMeasure":
        return EmpiricalMeasure.uniform(
            np.concatenate([ensemble.X, ensemble.V], axis=1)
        )


@dataclass(frozen=True)
class TransportPlan:
    """Sparse coupling: rows (source_idx, target_idx, mass), total cost."""

    source_idx: np.ndarray
    target_idx: np.ndarray
    mass: np.ndarray
    cost: float

    def marginals(self, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        row = np.bincount(self.source_idx, weights=self.mass, minlength=m)
        col = np.bincount(self.target_idx, weights=self.mass, minlength=n)
        return row, col


def _cost_matrix(a: EmpiricalMeasure, b: EmpiricalMeasure,
                 velocity_weight: float, squared: bool) -> np.ndarray:
    if a.atoms.shape[1] != b.atoms.shape[1]:
        raise ValueError("measures live in different phase-space dimensions")
    pa, pb = a.atoms, b.atoms
    if velocity_weight != 1.0:
        d = a.d
        scale = np.concatenate([np.ones(d), np.full(d, float(velocity_weight))])
        pa = pa * scale
        pb = pb * scale
    diff = pa[:, None, :] - pb[None, :, :]
    c2 = np.einsum("ijk,ijk->ij", diff, diff)
    return c2 if squared else np.sqrt(c2)


def w2_exact_uniform(a: EmpiricalMeasure, b: EmpiricalMeasure,
                     velocity_weight: float = 1.0) -> tuple[float, TransportPlan]:
    """W2 between uniform measures of equal size, by optimal assignment."""
    if a.size != b.size:
        raise ValueError("w2_exact_uniform needs equal sizes; use w2_general")
    if not (a.is_uniform and b.is_uniform):
        raise ValueError("w2_exact_uniform needs uniform weights; use w2_general")
    c = _cost_matrix(a, b, velocity_weight, squared=True)
    rows, cols = linear_sum_assignment(c)
    mass = np.full(a.size, 1.0 / a.size)
    cost = float((c[rows, cols] * mass).sum())
    plan = TransportPlan(rows, cols, mass, cost)
    return float(np.sqrt(max(cost, 0.0))), plan


def _solve_lp(c: np.ndarray, wa: np.ndarray, wb: np.ndarray):
    m, n = c.shape
    # row-sum and column-sum constraints on the flattened plan; one row is
    # redundant but HiGHS copes
    cols = np.arange(m * n)
    row_of = cols // n
    col_of = cols % n
    data = np.ones(2 * m * n)
    rows = np.concatenate([row_of, m + col_of])
    a_eq = sparse.csr_matrix(
        (data, (rows, np.concatenate([cols, cols]))), shape=(m + n, m * n)
    )
    b_eq = np.concatenate([wa, wb])
    res = linprog(c.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    x = res.x.reshape(m, n)
    src, tgt = np.nonzero(x > 0)
    mass = x[src, tgt]
    cost = float((c[src, tgt] * mass).sum())
    return cost, TransportPlan(src, tgt, mass, cost)


def _drop_zero_atoms(mu: EmpiricalMeasure) -> EmpiricalMeasure:
    keep = mu.weights > 0
    if keep.all():
        return mu
    warnings.warn("dropping zero-weight atoms", stacklevel=3)
    w = mu.weights[keep]
    return EmpiricalMeasure(mu.atoms[keep], w / w.sum())


def w2_general(a: EmpiricalMeasure, b: EmpiricalMeasure,
               velocity_weight: float = 1.0) -> tuple[float, TransportPlan]:
    """Exact W2 for arbitrary weighted measures via the transport LP."""
    a = _drop_zero_atoms(a)
    b = _drop_zero_atoms(b)
    c = _cost_matrix(a, b, velocity_weight, squared=True)
    cost, plan = _solve_lp(c, a.weights, b.weights)
    return float(np.sqrt(max(cost, 0.0))), plan


def w1_general(a: EmpiricalMeasure, b: EmpiricalMeasure,
               velocity_weight: float = 1.0) -> tuple[float, TransportPlan]:
    """Exact W1 (unsquared ground cost) via the same LP."""
    a = _drop_zero_atoms(a)
    b = _drop_zero_atoms(b)
    c = _cost_matrix(a, b, velocity_weight, squared=False)
    cost, plan = _solve_lp(c, a.weights, b.weights)
    return float(max(cost, 0.0)), plan


def w2_bruteforce(a: EmpiricalMeasure, b: EmpiricalMeasure,
                  velocity_weight: float = 1.0) -> float:
    """Permutation-enumeration W2 oracle for uniform instances with M <= 8."""
    if a.size != b.size or not (a.is_uniform and b.is_uniform):
        raise ValueError("w2_bruteforce needs uniform equal-size measures")
    m = a.size
    if m > _BRUTE_MAX:
        raise ValueError(f"w2_bruteforce limited to M <= {_BRUTE_MAX}")
    c = _cost_matrix(a, b, velocity_weight, squared=True)
    perms = np.array(list(itertools.permutations(range(m))))
    costs = c[np.arange(m)[None, :], perms].sum(axis=1) / m
    return float(np.sqrt(max(costs.min(), 0.0)))


def sinkhorn_w2(a: EmpiricalMeasure, b: EmpiricalMeasure, epsilon: float,
                max_iter: int = 20000, tol: float = 1e-9,
                velocity_weight: float = 1.0) -> float:
    """Entropically regularized W2 estimate.

    Runs log-domain Sinkhorn with stepwise epsilon scaling down to the target
    epsilon and returns sqrt of the plan cost <P, C> (the transport cost of
    the regularized plan, without the entropy term).  The plan is feasible up
    to `tol`, so the returned cost sits at or above the exact optimum apart
    from that feasibility slack.  Warns instead of raising when the marginal
    residual has not reached `tol` by max_iter.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    a = _drop_zero_atoms(a)
    b = _drop_zero_atoms(b)
    c = _cost_matrix(a, b, velocity_weight, squared=True)
    la = np.log(a.weights)
    lb = np.log(b.weights)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    # anneal from a large epsilon; each stage warm-starts the next
    eps_here = max(float(epsilon), float(c.max()) if c.max() > 0 else float(epsilon))
    spent = 0
    err = np.inf
    while True:
        for _ in range(max(1, (max_iter - spent) if eps_here == epsilon else 50)):
            f = -eps_here * logsumexp((g[None, :] - c) / eps_here + lb[None, :], axis=1)
            g = -eps_here * logsumexp((f[:, None] - c) / eps_here + la[:, None], axis=0)
            spent += 1
            logp = (f[:, None] + g[None, :] - c) / eps_here + la[:, None] + lb[None, :]
            rows = np.exp(logsumexp(logp, axis=1))
            err = np.abs(rows - a.weights).max()
            if err <= tol or spent >= max_iter:
                break
        if eps_here == epsilon or spent >= max_iter:
            break
        eps_here = max(float(epsilon), eps_here / 4.0)
    if err > tol:
        warnings.warn(
            f"sinkhorn did not converge: marginal residual {err:.3e} after {spent} iters"
        )
    p = np.exp((f[:, None] + g[None, :] - c) / epsilon + la[:, None] + lb[None, :])
    # renormalize the tiny feasibility slack before reading off the cost
    p /= p.sum()
    cost = float((p * c).sum())
    return float(np.sqrt(max(cost, 0.0)))


def quantize_grid(law, cells_per_dim: int, bounds=None) -> EmpiricalMeasure:
    """Project a law onto a regular grid: atoms at cell centers, exact masses.

    The grid covers `bounds` (defaults to the law's own support box) with
    cells_per_dim cells along every phase-space coordinate.  Cell mass is the
    law's exact probability of the cell, renormalized over the grid; cells of
    zero mass are dropped.
    """
    if int(cells_per_dim) != cells_per_dim or cells_per_dim < 1:
        raise ConfigError("cells_per_dim must be an integer >= 1")
    cells = int(cells_per_dim)
    lo, hi = law.bounds() if bounds is None else bounds
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    p = law.dim
    if lo.shape != (p,) or hi.shape != (p,) or np.any(hi <= lo):
        raise ConfigError("bounds must be (lo, hi) vectors with hi > lo")
    edges = [np.linspace(lo[k], hi[k], cells + 1) for k in range(p)]
    masses = law.grid_masses(edges).ravel()
    total = masses.sum()
    if total <= 0:
        raise ConfigError("law has zero mass inside the quantization bounds")
    centers = [0.5 * (e[:-1] + e[1:]) for e in edges]
    mesh = np.meshgrid(*centers, indexing="ij")
    atoms = np.stack([m.ravel() for m in mesh], axis=1)
    keep = masses > 0
    w = masses[keep] / total
    return EmpiricalMeasure(atoms[keep], w / w.sum())


def quantization_error_bound(law, cells_per_dim: int, bounds=None) -> float:
    """Half cell diagonal: an upper bound on W2(law, its grid quantization)."""
    lo, hi = law.bounds() if bounds is None else bounds
    widths = (np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)) / cells_per_dim
    return float(0.5 * np.sqrt((widths**2).sum()))


def to_uniform_ensemble(mu: EmpiricalMeasure, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Replicate weighted atoms into n equal-mass particles.

    Atom i receives round(w_i * n) copies by largest-remainder rounding,
    ties broken toward the lowest atom index.  Returns (X, V).
    """
    if int(n) != n or n < 1:
        raise ConfigError("particle count must be an integer >= 1")
    n = int(n)
    scaled = mu.weights * n
    counts = np.floor(scaled).astype(int)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(scaled - counts), kind="stable")
        counts[order[:short]] += 1
    rep = np.repeat(np.arange(mu.size), counts)
    atoms = mu.atoms[rep]
    d = mu.d
    return atoms[:, :d].copy(), atoms[:, d:].copy()


def export_plan_csv(plan: TransportPlan, file) -> None:
    close = False
    if isinstance(file, (str, bytes)):
        file = open(file, "w", newline="")
        close = True
    try:
        writer = csv.writer(file)
        writer.writerow(["source_idx", "target_idx", "mass"])
        for s, t, m in zip(plan.source_idx, plan.target_idx, plan.mass):
            writer.writerow([int(s), int(t), repr(float(m))])
    finally:
        if close:
            file.close()
