"""Particle dynamics: alignment drift plus a shared multiplicative noise term.

Every particle feels the same scalar Brownian increment through a coefficient
proportional to its deviation from the ensemble mean velocity, so the mean
velocity is conserved exactly and the noise never averages out across the
ensemble.  Two steppers are provided: an Euler scheme for the Ito form, whose
drift carries the conversion term -sigma (vbar - v), and a Heun
predictor-corrector for the Stratonovich form, which averages the diffusion
coefficient across the step instead.  Both evaluate coefficients at the left
endpoint, so stochastic sums are non-anticipating.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .brownian import BrownianPath
from .errors import BlowupError, ConfigError
from .kernels import CommunicationKernel, alignment_force_all

SCHEMES = ("ito_euler", "stratonovich_heun")


@dataclass(frozen=True)
class Ensemble:
    """Positions and velocities of N particles in R^d at time t."""

    X: np.ndarray
    V: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape != self.V.shape or self.X.shape[0] < 1:
            raise ValueError("X and V must be matching (N, d) arrays with N >= 1")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SimConfig:
    sigma: float
    dt: float = 1e-3
    horizon: float = 5.0
    scheme: str = "ito_euler"
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigError("T must be > 0")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        k = round(self.horizon / self.dt)
        if k < 1 or abs(k * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ConfigError("dt must divide T evenly")

    @property
    def steps(self) -> int:
        return round(self.horizon / self.dt)


def mean_velocity(ensemble: Ensemble) -> np.ndarray:
    return ensemble.V.mean(axis=0)


def variance_functional(ensemble: Ensemble, vbar0: np.ndarray) -> float:
    """Mean squared velocity deviation from the reference vbar0."""
    w = ensemble.V - vbar0
    return float((w * w).sum() / ensemble.N)


def kinetic_energy(ensemble: Ensemble) -> float:
    return float((ensemble.V * ensemble.V).sum() / ensemble.N)


def support_radius(ensemble: Ensemble, vbar0: np.ndarray) -> float:
    """Largest velocity deviation max_i |V_i - vbar0|."""
    w = ensemble.V - vbar0
    return float(np.sqrt((w * w).sum(axis=1).max()))


# beyond this magnitude squared observables overflow, so treat as divergence
_BLOWUP_LIMIT = 1e150


def _check_finite(X: np.ndarray, V: np.ndarray, t: float) -> None:
    if not (np.isfinite(V).all() and np.isfinite(X).all()):
        raise BlowupError(t)
    if max(np.abs(V).max(), np.abs(X).max()) > _BLOWUP_LIMIT:
        raise BlowupError(t)


def step_ito(ensemble: Ensemble, kernel: CommunicationKernel, sigma: float,
             dt: float, db: float) -> Ensemble:
    """One Euler step of the Ito form.

    V gains (F - sigma (vbar - V)) dt + sqrt(2 sigma) (vbar - V) dB, with all
    coefficients read off the incoming state; X gains V dt likewise.
    """
    f = alignment_force_all(ensemble, kernel)
    dev = ensemble.V.mean(axis=0) - ensemble.V
    xn = ensemble.X + ensemble.V * dt
    vn = ensemble.V + (f - sigma * dev) * dt + np.sqrt(2.0 * sigma) * db * dev
    _check_finite(xn, vn, ensemble.t + dt)
    return Ensemble(xn, vn, ensemble.t + dt)


def step_stratonovich_heun(ensemble: Ensemble, kernel: CommunicationKernel,
                           sigma: float, dt: float, db: float) -> Ensemble:
    """One Heun step of the Stratonovich form.

    The diffusion coefficient is averaged between the incoming state and an
    Euler predictor; the drift stays explicit Euler on the alignment force.
    """
    f = alignment_force_all(ensemble, kernel)
    g = np.sqrt(2.0 * sigma)
    dev = ensemble.V.mean(axis=0) - ensemble.V
    vp = ensemble.V + f * dt + g * db * dev
    devp = vp.mean(axis=0) - vp
    xn = ensemble.X + ensemble.V * dt
    vn = ensemble.V + f * dt + 0.5 * g * db * (dev + devp)
    _check_finite(xn, vn, ensemble.t + dt)
    return Ensemble(xn, vn, ensemble.t + dt)


_STEPPERS = {"ito_euler": step_ito, "stratonovich_heun": step_stratonovich_heun}


@dataclass(frozen=True)
class ObservableSeries:
    """Per-grid-point diagnostics of one trajectory.

    E is the mean squared deviation from the initial mean velocity (so it
    doubles as the kinetic energy of the centered ensemble), kinetic is the
    raw mean squared velocity, support_radius the largest centered velocity
    norm, and brownian the driving path values on the same grid.
    """

    times: np.ndarray
    E: np.ndarray
    kinetic: np.ndarray
    support_radius: np.ndarray
    mean_velocity: np.ndarray  # (K+1, d)
    brownian: np.ndarray
    vbar0: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.times.size
        for name in ("E", "kinetic", "support_radius", "brownian"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per grid point")
        if self.mean_velocity.shape[0] != n:
            raise ValueError("mean_velocity must have one row per grid point")
        if np.any(self.E < 0) or np.any(self.kinetic < 0):
            raise ValueError("E and kinetic must be nonnegative")


def simulate(init: Ensemble, config: SimConfig, kernel: CommunicationKernel,
             path: BrownianPath, stride: int = 1,
             record_trajectory: bool = True) -> tuple[list[Ensemble], ObservableSeries]:
    """Run the scheme named in config along one Brownian path.

    Observables are recorded at every grid point; the returned trajectory is
    thinned to every stride-th state (plus the final one).  The path grid
    must match (T, dt) from the config.
    """
    if int(stride) != stride or stride < 1:
        raise ConfigError("stride must be an integer >= 1")
    k_steps = config.steps
    if path.steps != k_steps or abs(path.horizon - config.horizon) > 1e-9 * config.horizon:
        raise ConfigError(
            f"path grid ({path.steps} steps over {path.horizon:g}) does not match "
            f"config ({k_steps} steps over {config.horizon:g})"
        )
    if not (np.isfinite(init.X).all() and np.isfinite(init.V).all()):
        raise ValueError("initial state must be finite")

    stepper = _STEPPERS[config.scheme]
    vbar0 = mean_velocity(init)
    times = np.empty(k_steps + 1)
    e_series = np.empty(k_steps + 1)
    kin = np.empty(k_steps + 1)
    rad = np.empty(k_steps + 1)
    vbar = np.empty((k_steps + 1, init.d))

    traj: list[Ensemble] = []
    ens = init
    for k in range(k_steps + 1):
        times[k] = ens.t
        w = ens.V - vbar0
        e_series[k] = (w * w).sum() / ens.N
        kin[k] = (ens.V * ens.V).sum() / ens.N
        rad[k] = np.sqrt((w * w).sum(axis=1).max())
        vbar[k] = ens.V.mean(axis=0)
        if record_trajectory and (k % stride == 0 or k == k_steps):
            traj.append(ens)
        if k == k_steps:
            break
        try:
            # a diverging state overflows in the very step that triggers the
            # blowup check; the exception already reports it
            with np.errstate(over="ignore", invalid="ignore"):
                ens = stepper(ens, kernel, config.sigma, config.dt,
                              path.increments[k])
        except BlowupError as err:
            raise BlowupError(err.time, step=k) from None

    obs = ObservableSeries(times, e_series, kin, rad, vbar, path.values(),
                           vbar0=vbar0)
    return traj, obs


# --- test functions for the weak formulation ---------------------------------


class GaussianBump:
    """phi(x, v) = exp(-(|x-cx|^2 + |v-cv|^2) / (2 s^2))."""

    family = "gaussian_bump"

    def __init__(self, center, scale: float):
        self.center = np.asarray(center, dtype=float)
        if self.center.ndim != 1 or self.center.size % 2 != 0:
            raise ValueError("center must be a phase-space point (x then v)")
        if scale <= 0:
            raise ValueError("scale must be > 0")
        self.scale = float(scale)

    def _split(self, X, V):
        d = X.shape[1]
        return X - self.center[:d], V - self.center[d:]

    def value(self, X, V):
        ux, uv = self._split(X, V)
        q = (ux * ux).sum(axis=1) + (uv * uv).sum(axis=1)
        return np.exp(-q / (2.0 * self.scale**2))

    def grad_x(self, X, V):
        ux, _ = self._split(X, V)
        return -ux / self.scale**2 * self.value(X, V)[:, None]

    def grad_v(self, X, V):
        _, uv = self._split(X, V)
        return -uv / self.scale**2 * self.value(X, V)[:, None]

    def hess_v(self, X, V):
        _, uv = self._split(X, V)
        s2 = self.scale**2
        val = self.value(X, V)
        eye = np.eye(X.shape[1])
        return val[:, None, None] * (
            uv[:, :, None] * uv[:, None, :] / s2**2 - eye[None, :, :] / s2
        )


class PolynomialCutoff:
    """phi = (1 - |z - c|^2 / R^2)^3 on its support, 0 outside; C^2 overall."""

    family = "polynomial_with_cutoff"

    def __init__(self, center, radius: float):
        self.center = np.asarray(center, dtype=float)
        if self.center.ndim != 1 or self.center.size % 2 != 0:
            raise ValueError("center must be a phase-space point (x then v)")
        if radius <= 0:
            raise ValueError("radius must be > 0")
        self.radius = float(radius)

    def _u(self, X, V):
        d = X.shape[1]
        ux = X - self.center[:d]
        uv = V - self.center[d:]
        q = (ux * ux).sum(axis=1) + (uv * uv).sum(axis=1)
        u = 1.0 - q / self.radius**2
        return np.maximum(u, 0.0), ux, uv

    def value(self, X, V):
        u, _, _ = self._u(X, V)
        return u**3

    def grad_x(self, X, V):
        u, ux, _ = self._u(X, V)
        return -6.0 * (u**2)[:, None] * ux / self.radius**2

    def grad_v(self, X, V):
        u, _, uv = self._u(X, V)
        return -6.0 * (u**2)[:, None] * uv / self.radius**2

    def hess_v(self, X, V):
        u, _, uv = self._u(X, V)
        r2 = self.radius**2
        eye = np.eye(X.shape[1])
        return (24.0 * u[:, None, None] * uv[:, :, None] * uv[:, None, :] / r2**2
                - 6.0 * (u**2)[:, None, None] * eye[None, :, :] / r2)


def make_test_function(family: str, center, scale: float):
    if family == "gaussian_bump":
        return GaussianBump(center, scale)
    if family == "polynomial_with_cutoff":
        return PolynomialCutoff(center, scale)
    raise ConfigError(f"unknown test function family '{family}'")


def validate_gradients(phi, d: int, rng: np.random.Generator,
                       n_points: int = 30, span: float = 2.0) -> float:
    """Max relative error of analytic derivatives vs central differences."""
    z = phi.center + span * rng.uniform(-1.0, 1.0, size=(n_points, 2 * d))
    X, V = z[:, :d].copy(), z[:, d:].copy()
    h = 1e-6 * max(1.0, span)
    worst = 0.0

    def _rel(a, b):
        scale = max(np.abs(a).max(), np.abs(b).max(), 1e-3)
        return np.abs(a - b).max() / scale

    for which, analytic in (("x", phi.grad_x(X, V)), ("v", phi.grad_v(X, V))):
        num = np.empty_like(analytic)
        for j in range(d):
            zp, zm = (X.copy(), V.copy()), (X.copy(), V.copy())
            tgt_p = zp[0] if which == "x" else zp[1]
            tgt_m = zm[0] if which == "x" else zm[1]
            tgt_p[:, j] += h
            tgt_m[:, j] -= h
            num[:, j] = (phi.value(*zp) - phi.value(*zm)) / (2 * h)
        worst = max(worst, _rel(analytic, num))

    hess = phi.hess_v(X, V)
    num = np.empty_like(hess)
    for j in range(d):
        vp, vm = V.copy(), V.copy()
        vp[:, j] += h
        vm[:, j] -= h
        num[:, :, j] = (phi.grad_v(X, vp) - phi.grad_v(X, vm)) / (2 * h)
    worst = max(worst, _rel(hess, num))
    return float(worst)


def weak_form_residual(trajectory: list[Ensemble], path: BrownianPath,
                       config: SimConfig, kernel: CommunicationKernel,
                       phi) -> float:
    """Defect of the time-discrete weak formulation along one trajectory.

    Tests <mu_T, phi> - <mu_0, phi> against left-endpoint quadrature of the
    drift terms (transport, alignment force with the Ito correction, and the
    second-order term in v) plus the stochastic sum.  Requires the trajectory
    at full grid resolution.
    """
    k_steps = config.steps
    if len(trajectory) != k_steps + 1:
        raise ConfigError("trajectory must be recorded at stride 1 (full resolution)")
    if path.steps != k_steps:
        raise ConfigError("path grid does not match config")
    sigma = config.sigma
    dt = config.dt
    inc = path.increments

    first, last = trajectory[0], trajectory[-1]
    total = phi.value(last.X, last.V).mean() - phi.value(first.X, first.V).mean()
    drift_sum = 0.0
    noise_sum = 0.0
    for k in range(k_steps):
        ens = trajectory[k]
        f = alignment_force_all(ens, kernel)
        dev = ens.V.mean(axis=0) - ens.V
        gx = phi.grad_x(ens.X, ens.V)
        gv = phi.grad_v(ens.X, ens.V)
        hv = phi.hess_v(ens.X, ens.V)
        quad = np.einsum("nd,ne,nde->n", dev, dev, hv)
        drift = ((ens.V * gx).sum(axis=1)
                 + ((f - sigma * dev) * gv).sum(axis=1)
                 + sigma * quad)
        drift_sum += drift.mean() * dt
        noise_sum += (dev * gv).sum(axis=1).mean() * inc[k]
    residual = total - drift_sum - np.sqrt(2.0 * sigma) * noise_sum
    return float(abs(residual))


# --- pathwise envelope checks -------------------------------------------------


def tolerance_epsilon(dt: float, brownian_values: np.ndarray, c: float = 10.0) -> float:
    """Discretization allowance for pathwise inequalities.

    Multiplicative slack eps = c sqrt(dt) (1 + sup_k |B_k|): scales with the
    scheme's strong error and loosens on wilder paths.
    """
    return float(c * np.sqrt(dt) * (1.0 + np.abs(brownian_values).max()))


@dataclass(frozen=True)
class BoundCheck:
    name: str
    n_points: int
    n_violations: int
    max_relative_excess: float
    # first offending grid point, for diagnosing a failed inequality
    first_violation_time: float = float("nan")
    first_violation_lhs: float = float("nan")
    first_violation_rhs: float = float("nan")

    @property
    def fraction(self) -> float:
        return self.n_violations / self.n_points

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "n_points": self.n_points,
            "n_violations": self.n_violations,
            "violation_fraction": self.fraction,
            "max_relative_excess": self.max_relative_excess,
            "first_violation_time": self.first_violation_time,
            "first_violation_lhs": self.first_violation_lhs,
            "first_violation_rhs": self.first_violation_rhs,
        }


@dataclass(frozen=True)
class PathwiseBoundsReport:
    eps_tol: float
    kinetic: BoundCheck
    support: BoundCheck
    support_stated: BoundCheck


def _compare(name: str, times: np.ndarray, lhs: np.ndarray, rhs: np.ndarray,
             eps: float) -> BoundCheck:
    bad = lhs > (1.0 + eps) * rhs
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(rhs > 0, lhs / rhs - 1.0, np.where(lhs > 0, np.inf, 0.0))
    if bad.any():
        k = int(np.argmax(bad))
        return BoundCheck(name, lhs.size, int(bad.sum()), float(rel.max()),
                          float(times[k]), float(lhs[k]), float(rhs[k]))
    return BoundCheck(name, lhs.size, 0, float(rel.max()))


def check_pathwise_bounds(obs: ObservableSeries, kernel: CommunicationKernel,
                          sigma: float, c_tol: float = 10.0) -> PathwiseBoundsReport:
    """Check the centered kinetic-energy and velocity-support envelopes.

    Kinetic:  E_t <= E_0 exp(-2 sqrt(2 sigma) B_t).
    Support:  max_i |V_i - vbar_0|^2 <= R_0^2 exp(psi_max t - 2 sqrt(2 sigma) B_t)
              * (E_0 G(t) + 1), where G(t) = (1 - exp(-psi_max t)) / psi_max.
    The variant with G replaced by its t -> inf limit 1/psi_max is evaluated
    too (it is the looser of the two) and reported separately.
    """
    t = obs.times
    b = obs.brownian
    dt = t[1] - t[0]
    eps = tolerance_epsilon(dt, b, c_tol)
    decay = np.exp(-2.0 * np.sqrt(2.0 * sigma) * b)

    kin = _compare("kinetic", t, obs.E, obs.E[0] * decay, eps)

    psi_max = kernel.psi_max
    r0sq = obs.support_radius[0] ** 2
    if psi_max > 0:
        growth = (1.0 - np.exp(-psi_max * t)) / psi_max
        growth_stated = np.full_like(t, 1.0 / psi_max)
    else:
        growth = t.copy()
        growth_stated = t.copy()
    lhs = obs.support_radius**2
    env = r0sq * np.exp(psi_max * t) * decay
    sup = _compare("support", t, lhs, env * (obs.E[0] * growth + 1.0), eps)
    sup_stated = _compare("support_stated", t, lhs,
                          env * (obs.E[0] * growth_stated + 1.0), eps)
    return PathwiseBoundsReport(eps, kin, sup, sup_stated)


# --- CSV exports ---------------------------------------------------------------


def export_trajectory_csv(trajectory: list[Ensemble], file) -> None:
    close = False
    if isinstance(file, (str, bytes)):
        file = open(file, "w", newline="")
        close = True
    try:
        d = trajectory[0].d
        writer = csv.writer(file)
        writer.writerow(["t", "particle_id"]
                        + [f"x_{j + 1}" for j in range(d)]
                        + [f"v_{j + 1}" for j in range(d)])
        for ens in trajectory:
            for i in range(ens.N):
                writer.writerow([repr(float(ens.t)), i]
                                + [repr(float(x)) for x in ens.X[i]]
                                + [repr(float(v)) for v in ens.V[i]])
    finally:
        if close:
            file.close()


def export_observables_csv(obs: ObservableSeries, file) -> None:
    close = False
    if isinstance(file, (str, bytes)):
        file = open(file, "w", newline="")
        close = True
    try:
        d = obs.mean_velocity.shape[1]
        writer = csv.writer(file)
        writer.writerow(["t", "E", "kinetic", "support_radius"]
                        + [f"vbar_{j + 1}" for j in range(d)] + ["B_t"])
        for k in range(obs.times.size):
            writer.writerow([repr(float(obs.times[k])), repr(float(obs.E[k])),
                             repr(float(obs.kinetic[k])),
                             repr(float(obs.support_radius[k]))]
                            + [repr(float(x)) for x in obs.mean_velocity[k]]
                            + [repr(float(obs.brownian[k]))])
    finally:
        if close:
            file.close()
