"""Initial phase-space distributions with exact axis-box masses.

Each law lives on R^p with p = 2d (positions then velocities), factorizes
over coordinates (or is a mixture of such products), can be sampled, and
reports the exact probability mass of any axis-aligned cell.  Exact masses
are what grid quantization needs; sampling is what simulations need.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import norm, truncnorm

from .errors import ConfigError


def _as_vec(x, p: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = np.full(p, float(v))
    if v.shape != (p,):
        raise ConfigError(f"{name} must be a scalar or length-{p} vector")
    if not np.all(np.isfinite(v)):
        raise ConfigError(f"{name} must be finite")
    return v


class UniformBox:
    """Uniform law on an axis-aligned box."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ConfigError("lo and hi must be 1-d with matching shapes")
        if np.any(self.hi <= self.lo):
            raise ConfigError("box must have hi > lo in every coordinate")

    @property
    def dim(self) -> int:
        return self.lo.size

    def bounds(self):
        return self.lo.copy(), self.hi.copy()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def marginal_cell_masses(self, edges: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for k, e in enumerate(edges):
            a = np.clip(e[:-1], self.lo[k], self.hi[k])
            b = np.clip(e[1:], self.lo[k], self.hi[k])
            out.append((b - a) / (self.hi[k] - self.lo[k]))
        return out

    def grid_masses(self, edges: list[np.ndarray]) -> np.ndarray:
        return _outer(self.marginal_cell_masses(edges))


class GaussianBox:
    """Product Gaussian truncated to an axis box (default center +- 4 sd)."""

    def __init__(self, center, scale, lo=None, hi=None, dim=None):
        if dim is None:
            dim = np.asarray(center, dtype=float).size
        self.center = _as_vec(center, dim, "center")
        self.scale = _as_vec(scale, dim, "scale")
        if np.any(self.scale <= 0):
            raise ConfigError("scale must be > 0")
        self.lo = self.center - 4.0 * self.scale if lo is None else _as_vec(lo, dim, "lo")
        self.hi = self.center + 4.0 * self.scale if hi is None else _as_vec(hi, dim, "hi")
        if np.any(self.hi <= self.lo):
            raise ConfigError("box must have hi > lo in every coordinate")
        a = (self.lo - self.center) / self.scale
        b = (self.hi - self.center) / self.scale
        self._z = norm.cdf(b) - norm.cdf(a)  # per-dim truncation mass

    @property
    def dim(self) -> int:
        return self.center.size

    def bounds(self):
        return self.lo.copy(), self.hi.copy()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        cols = []
        for k in range(self.dim):
            a = (self.lo[k] - self.center[k]) / self.scale[k]
            b = (self.hi[k] - self.center[k]) / self.scale[k]
            cols.append(
                truncnorm.rvs(a, b, loc=self.center[k], scale=self.scale[k],
                              size=n, random_state=rng)
            )
        return np.stack(cols, axis=1)

    def marginal_cell_masses(self, edges: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for k, e in enumerate(edges):
            a = np.clip(e[:-1], self.lo[k], self.hi[k])
            b = np.clip(e[1:], self.lo[k], self.hi[k])
            za = (a - self.center[k]) / self.scale[k]
            zb = (b - self.center[k]) / self.scale[k]
            out.append((norm.cdf(zb) - norm.cdf(za)) / self._z[k])
        return out

    def grid_masses(self, edges: list[np.ndarray]) -> np.ndarray:
        return _outer(self.marginal_cell_masses(edges))


class TwoClusterBox:
    """Mixture of two truncated product Gaussians with a shared overall box."""

    def __init__(self, center_a, center_b, scale, weight_a=0.5, lo=None, hi=None):
        ca = np.asarray(center_a, dtype=float)
        p = ca.size
        if not 0 < weight_a < 1:
            raise ConfigError("weight_a must lie in (0, 1)")
        self.weight_a = float(weight_a)
        sc = _as_vec(scale, p, "scale")
        if lo is None:
            lo = np.minimum(ca, np.asarray(center_b, dtype=float)) - 4.0 * sc
        if hi is None:
            hi = np.maximum(ca, np.asarray(center_b, dtype=float)) + 4.0 * sc
        self._a = GaussianBox(center_a, sc, lo, hi, dim=p)
        self._b = GaussianBox(center_b, sc, lo, hi, dim=p)

    @property
    def dim(self) -> int:
        return self._a.dim

    def bounds(self):
        return self._a.bounds()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        n_a = int(rng.binomial(n, self.weight_a))
        parts = [self._a.sample(rng, n_a), self._b.sample(rng, n - n_a)]
        out = np.concatenate(parts, axis=0)
        rng.shuffle(out, axis=0)
        return out

    def grid_masses(self, edges: list[np.ndarray]) -> np.ndarray:
        return (self.weight_a * self._a.grid_masses(edges)
                + (1.0 - self.weight_a) * self._b.grid_masses(edges))


def _outer(marginals: list[np.ndarray]) -> np.ndarray:
    out = marginals[0]
    for m in marginals[1:]:
        out = np.multiply.outer(out, m)
    return out


def make_law(spec: dict, d: int):
    """Build a phase-space law on R^(2d) from a config fragment."""
    if not isinstance(spec, dict) or "law" not in spec:
        raise ConfigError("initial law spec must be a mapping with a 'law' key")
    kind = spec["law"]
    known = {
        "uniform_box": {"law", "x_low", "x_high", "v_low", "v_high"},
        "gaussian": {"law", "x_center", "v_center", "x_scale", "v_scale"},
        "two_cluster": {"law", "x_center", "v_center_a", "v_center_b", "scale", "weight_a"},
    }
    if kind not in known:
        raise ConfigError(f"unknown initial law '{kind}'")
    extra = set(spec) - known[kind]
    if extra:
        raise ConfigError(f"unknown key 'initial.{sorted(extra)[0]}'")
    if kind == "uniform_box":
        lo = np.concatenate([_as_vec(spec.get("x_low", 0.0), d, "x_low"),
                             _as_vec(spec.get("v_low", -1.0), d, "v_low")])
        hi = np.concatenate([_as_vec(spec.get("x_high", 1.0), d, "x_high"),
                             _as_vec(spec.get("v_high", 1.0), d, "v_high")])
        return UniformBox(lo, hi)
    if kind == "gaussian":
        center = np.concatenate([_as_vec(spec.get("x_center", 0.0), d, "x_center"),
                                 _as_vec(spec.get("v_center", 0.0), d, "v_center")])
        scale = np.concatenate([_as_vec(spec.get("x_scale", 1.0), d, "x_scale"),
                                _as_vec(spec.get("v_scale", 1.0), d, "v_scale")])
        return GaussianBox(center, scale)
    xc = _as_vec(spec.get("x_center", 0.0), d, "x_center")
    va = _as_vec(spec.get("v_center_a", 1.0), d, "v_center_a")
    vb = _as_vec(spec.get("v_center_b", -1.0), d, "v_center_b")
    scale = _as_vec(spec.get("scale", 0.25), 2 * d, "scale")
    return TwoClusterBox(np.concatenate([xc, va]), np.concatenate([xc, vb]),
                         scale, float(spec.get("weight_a", 0.5)))
