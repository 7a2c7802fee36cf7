"""Communication weights psi(r) and the velocity alignment force.

A kernel stores its exact bounds psi_min = inf_r psi(r), psi_max = sup_r psi(r)
and a Lipschitz constant alongside the evaluation rule, because the decay-rate
envelopes and the pathwise bounds consume those constants directly; inferring
them numerically would contaminate the checks they feed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

FAMILIES = ("constant", "rational", "exponential", "custom-tabulated")

# rows per block when forming pairwise distances, keeps memory ~chunk*N
_FORCE_CHUNK = 4096


@dataclass(frozen=True)
class CommunicationKernel:
    """Nonnegative, nonincreasing radial weight r -> psi(r).

    family     one of FAMILIES
    params     (k,) for constant, (k, beta, floor) for rational/exponential
    psi_min    infimum of psi over r >= 0
    psi_max    supremum of psi over r >= 0
    lip        Lipschitz constant of psi
    """

    family: str
    params: tuple[float, ...]
    psi_min: float
    psi_max: float
    lip: float
    table_r: np.ndarray | None = field(default=None, repr=False)
    table_v: np.ndarray | None = field(default=None, repr=False)

    @staticmethod
    def constant(k: float) -> "CommunicationKernel":
        _check_level(k)
        return CommunicationKernel("constant", (float(k),), float(k), float(k), 0.0)

    @staticmethod
    def rational(k: float, beta: float, floor: float = 0.0) -> "CommunicationKernel":
        """psi(r) = floor + k / (1 + r^2)^beta."""
        _check_level(k)
        if beta < 0:
            raise ValueError("beta must be >= 0")
        if floor < 0:
            raise ValueError("floor must be >= 0")
        if beta == 0:
            lo = hi = floor + k
            lip = 0.0
        else:
            lo, hi = floor, floor + k
            # |psi'(r)| = 2 k beta r / (1+r^2)^(beta+1) peaks at r^2 = 1/(2 beta + 1)
            rstar = 1.0 / np.sqrt(2.0 * beta + 1.0)
            lip = 2.0 * k * beta * rstar / (1.0 + rstar**2) ** (beta + 1.0)
        return CommunicationKernel(
            "rational", (float(k), float(beta), float(floor)), float(lo), float(hi), float(lip)
        )

    @staticmethod
    def exponential(k: float, beta: float, floor: float = 0.0) -> "CommunicationKernel":
        """psi(r) = floor + k * exp(-beta r)."""
        _check_level(k)
        if beta < 0:
            raise ValueError("beta must be >= 0")
        if floor < 0:
            raise ValueError("floor must be >= 0")
        lo = floor + k if beta == 0 else floor
        return CommunicationKernel(
            "exponential", (float(k), float(beta), float(floor)), float(lo), float(k + floor),
            float(k * beta),
        )

    @staticmethod
    def tabulated(r: np.ndarray, values: np.ndarray) -> "CommunicationKernel":
        """Piecewise-linear interpolation of (r, values) nodes starting at r = 0."""
        r = np.asarray(r, dtype=float)
        v = np.asarray(values, dtype=float)
        if r.ndim != 1 or r.shape != v.shape or r.size < 2:
            raise ValueError("table needs matching 1-d r and value arrays with >= 2 nodes")
        if r[0] != 0.0 or np.any(np.diff(r) <= 0):
            raise ValueError("table r must start at 0 and increase strictly")
        if np.any(v < 0):
            raise ValueError("table values must be >= 0")
        if np.any(np.diff(v) > 0):
            raise ValueError("table values must be nonincreasing")
        lip = float(np.max(np.abs(np.diff(v) / np.diff(r))))
        return CommunicationKernel(
            "custom-tabulated", (), float(v.min()), float(v.max()), lip, table_r=r, table_v=v
        )

    def __call__(self, r):
        return eval_psi(self, r)

    def _eval_sq(self, r2: np.ndarray, scratch: bool = False) -> np.ndarray:
        """Evaluate from squared radii; lets the force loop skip a sqrt.

        scratch=True lets the evaluation overwrite r2 instead of allocating.
        """
        if self.family == "constant":
            return np.full_like(r2, self.params[0])
        if self.family == "rational":
            k, beta, floor = self.params
            base = np.add(r2, 1.0, out=r2 if scratch else None)
            if beta == 1.0:
                out = np.divide(k, base, out=base if scratch else None)
            else:
                out = k * base**-beta
            return out if floor == 0.0 else np.add(out, floor,
                                                   out=out if scratch else None)
        if self.family == "exponential":
            k, beta, floor = self.params
            return floor + k * np.exp(-beta * np.sqrt(r2))
        return self._interp(np.sqrt(r2))

    def _interp(self, r: np.ndarray) -> np.ndarray:
        rmax = self.table_r[-1]
        if np.any(r > rmax):
            raise ValueError(f"r beyond table range [0, {rmax:g}]")
        return np.interp(r, self.table_r, self.table_v)


def _check_level(k: float) -> None:
    if not (k >= 0) or not np.isfinite(k):
        raise ValueError("kernel level k must be finite and >= 0")


def eval_psi(kernel: CommunicationKernel, r):
    """Evaluate psi at scalar or array r >= 0."""
    arr = np.asarray(r, dtype=float)
    if np.any(arr < 0):
        raise ValueError("r must be nonnegative")
    if kernel.family == "custom-tabulated":
        out = kernel._interp(arr)
    else:
        out = kernel._eval_sq(arr * arr)
    return float(out) if np.isscalar(r) or arr.ndim == 0 else out


def alignment_force(ensemble, kernel: CommunicationKernel, i: int) -> np.ndarray:
    """Average alignment pull on particle i.

    F_i = (1/N) sum_j psi(|X_i - X_j|) (V_j - V_i).  The j = i term is kept;
    it contributes zero and keeping it makes the loop uniform.
    """
    X, V = ensemble.X, ensemble.V
    n = X.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"particle index {i} out of range for N = {n}")
    if kernel.family == "constant":
        return kernel.params[0] * (V.mean(axis=0) - V[i])
    d2 = ((X - X[i]) ** 2).sum(axis=1)
    w = kernel._eval_sq(d2)
    return (w @ V - w.sum() * V[i]) / n


def alignment_force_all(ensemble, kernel: CommunicationKernel) -> np.ndarray:
    """All alignment forces, shape (N, d).

    Pairwise antisymmetry of the summand makes the rows sum to the zero
    vector, so the ensemble mean velocity feels no force.
    """
    X, V = ensemble.X, ensemble.V
    n = X.shape[0]
    if kernel.family == "constant":
        return kernel.params[0] * (V.mean(axis=0) - V)
    out = np.empty_like(V)
    for lo in range(0, n, _FORCE_CHUNK):
        hi = min(lo + _FORCE_CHUNK, n)
        r2 = cdist(X[lo:hi], X, "sqeuclidean")
        w = kernel._eval_sq(r2, scratch=True)
        out[lo:hi] = (w @ V - w.sum(axis=1)[:, None] * V[lo:hi]) / n
    return out
