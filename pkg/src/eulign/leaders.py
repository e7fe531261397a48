"""Controlled leaders coupled to the fluid through an attracting potential."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import hydro
from .errors import ArgumentError, ConfigError
from .hydro import FluidState, SolverOptions
from .model import ModelParams, ZeroConfinement

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- controls

@dataclass
class ControlSchedule:
    """Piecewise-constant controls: ``values[i, p]`` acts on [breaks[p], breaks[p+1])."""

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.breaks = np.asarray(self.breaks, float)
        self.values = np.asarray(self.values, float)
        if self.breaks.ndim != 1 or len(self.breaks) < 2 or np.any(np.diff(self.breaks) <= 0):
            raise ConfigError("control breakpoints must increase strictly")
        if self.values.ndim != 3 or self.values.shape[1:] != (len(self.breaks) - 1, 3):
            raise ConfigError("control values must have shape (leaders, pieces, 3)")

    @classmethod
    def constant(cls, t0, t1, values):
        v = np.asarray(values, float).reshape(-1, 1, 3)
        return cls(np.array([t0, t1], float), v)

    @classmethod
    def zeros(cls, k: int, t0: float, t1: float, pieces: int = 1):
        return cls(np.linspace(t0, t1, pieces + 1), np.zeros((k, pieces, 3)))

    def covers(self, t0, t1, tol=1e-12) -> bool:
        return self.breaks[0] <= t0 + tol and self.breaks[-1] >= t1 - tol

    def at(self, t) -> np.ndarray:
        """Controls of every leader at time t (right-continuous)."""
        if t < self.breaks[0] - 1e-12 or t > self.breaks[-1] + 1e-12:
            raise ConfigError(f"no control defined at t={t:.6g}")
        p = int(np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.breaks) - 2))
        return self.values[:, p, :]

    def copy(self):
        return ControlSchedule(self.breaks.copy(), self.values.copy())


@dataclass
class LeaderSet:
    xi: np.ndarray
    ups: np.ndarray
    schedule: ControlSchedule
    t: float = 0.0

    def __post_init__(self):
        self.xi = np.atleast_2d(np.asarray(self.xi, float))
        self.ups = np.atleast_2d(np.asarray(self.ups, float))
        if self.xi.shape != self.ups.shape or self.xi.shape[1] != 3:
            raise ArgumentError("leader positions and velocities must have shape (k, 3)")
        if self.schedule.values.shape[0] != len(self.xi):
            raise ConfigError("control schedule does not match the leader count")

    @property
    def k(self) -> int:
        return len(self.xi)

    def copy(self):
        return LeaderSet(self.xi.copy(), self.ups.copy(), self.schedule, self.t)


# ---------------------------------------------------------------- forces

@dataclass(frozen=True)
class LeaderForceSpec:
    """F = f - gamma ups - grad W(xi) - feedback rho(xi) ups.

    W = beta/2 sum over the faces of the box ``region`` of (delta - d_face)_+^2,
    a wall band of width ``delta`` inside the region. ``brake`` is the
    deceleration used to define the invariant braking set and ``speed`` the
    speed bound s.
    """

    gamma: float = 4.0
    f_max: float = 0.5
    beta: float = 15.0
    delta: float = 0.1
    feedback: float = 0.0
    region: tuple = ((0.1, 0.1, 0.1), (0.9, 0.9, 0.9))
    speed: float = 1.0
    brake: float = 0.5

    def __post_init__(self):
        lo, hi = np.asarray(self.region[0], float), np.asarray(self.region[1], float)
        if np.any(hi <= lo):
            raise ConfigError("leader region must be a nonempty box")
        for name in ("gamma", "f_max", "beta", "delta", "feedback"):
            if getattr(self, name) < 0:
                raise ConfigError(f"leaders.force.{name} must be nonnegative")
        if self.speed <= 0 or self.brake <= 0:
            raise ConfigError("speed bound and braking deceleration must be positive")

    @property
    def lo(self):
        return np.asarray(self.region[0], float)

    @property
    def hi(self):
        return np.asarray(self.region[1], float)

    def barrier_grad(self, xi) -> np.ndarray:
        xi = np.asarray(xi, float)
        d_lo = xi - self.lo
        d_hi = self.hi - xi
        return self.beta * (-np.maximum(self.delta - d_lo, 0.0) + np.maximum(self.delta - d_hi, 0.0))

    def force(self, xi, ups, f, rho_at=0.0) -> np.ndarray:
        damp = self.gamma + self.feedback * np.asarray(rho_at, float)
        if np.ndim(damp):
            damp = damp[..., None]
        return np.asarray(f, float) - damp * np.asarray(ups, float) - self.barrier_grad(xi)


def interpolate(state: FluidState | None, x) -> np.ndarray:
    """Trilinear interpolation of the density at points x (zero without a fluid)."""
    x = np.atleast_2d(np.asarray(x, float))
    if state is None:
        return np.zeros(len(x))
    mask = state.mask
    s = (x - mask.origin) / mask.h - 0.5
    i0 = np.floor(s).astype(int)
    fr = s - i0
    out = np.zeros(len(x))
    for c in itertools.product((0, 1), repeat=3):
        w = np.prod(np.where(c, fr, 1.0 - fr), axis=1)
        idx = [np.clip(i0[:, a] + c[a], 0, mask.shape[a] - 1) for a in range(3)]
        out += w * state.rho[tuple(idx)]
    return out


def _rk4(xi, ups, f, spec, state, h):
    def rhs(x, u):
        return u, spec.force(x, u, f, interpolate(state, x))

    k1x, k1v = rhs(xi, ups)
    k2x, k2v = rhs(xi + 0.5 * h * k1x, ups + 0.5 * h * k1v)
    k3x, k3v = rhs(xi + 0.5 * h * k2x, ups + 0.5 * h * k2v)
    k4x, k4v = rhs(xi + h * k3x, ups + h * k3v)
    return (xi + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x),
            ups + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v))


def leader_step(leaders: LeaderSet, rho: FluidState | None, spec: LeaderForceSpec, dt: float) -> LeaderSet:
    """Classical RK4 over [t, t + dt], split at control breakpoints."""
    if dt <= 0:
        raise ArgumentError("dt must be positive")
    t0, t1 = leaders.t, leaders.t + dt
    sched = leaders.schedule
    if not sched.covers(t0, t1):
        raise ConfigError(f"control schedule does not cover [{t0:.6g}, {t1:.6g}]")
    inner = sched.breaks[(sched.breaks > t0 + 1e-14) & (sched.breaks < t1 - 1e-14)]
    cuts = np.concatenate([[t0], inner, [t1]])
    xi, ups = leaders.xi, leaders.ups
    for a, b in zip(cuts[:-1], cuts[1:]):
        xi, ups = _rk4(xi, ups, sched.at(0.5 * (a + b)), spec, rho, b - a)
    return LeaderSet(xi, ups, sched, t1)


# ---------------------------------------------------------------- invariance

@dataclass
class InvarianceResult:
    verdict: str
    margin: float
    witness: dict | None = None
    samples: int = 0

    @property
    def passed(self):
        return self.verdict == "PASS"


def _face_normals():
    for a in range(3):
        for sgn in (-1.0, 1.0):
            n = np.zeros(3)
            n[a] = sgn
            yield a, sgn, n


def invariance_check(spec: LeaderForceSpec, rho_levels=(0.0, 1.0), samples: int = 4000,
                     seed: int = 0) -> InvarianceResult:
    """Sampled check that the braking set K stays invariant.

    K = {xi in the region, |ups| <= s, (ups.n)_+^2 <= 2 a d_n(xi) for each face n}.
    On the braking surfaces (ups.n > 0, equality) we need F.n <= -a; on the
    speed sphere ups.F <= 0. Controls range over |f| <= f_max (worst-case
    directions plus random ones) and rho over ``rho_levels``. ``margin`` is the
    largest constraint value found (PASS iff <= 0).
    """
    if spec.speed <= 0:
        raise ArgumentError("speed bound must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = spec.lo, spec.hi
    s, a_br = spec.speed, spec.brake
    worst = -np.inf
    witness = None
    count = 0

    def controls(direction, m):
        f = rng.normal(size=(m, 3))
        f *= spec.f_max * rng.random((m, 1)) ** (1 / 3) / np.linalg.norm(f, axis=1, keepdims=True)
        f[0] = spec.f_max * direction
        return f

    def record(vals, kind, xi, ups, f, rho_val):
        nonlocal worst, witness
        k = int(np.argmax(vals))
        if vals[k] > worst:
            worst = float(vals[k])
            witness = {"kind": kind, "xi": xi.tolist(), "ups": ups.tolist(), "f": f[k].tolist(),
                       "rho": float(rho_val), "value": worst}

    m = max(samples // 12, 8)
    for rho_val in rho_levels:
        # braking surfaces of each face
        for axis, sgn, n in _face_normals():
            xi = lo + (hi - lo) * rng.random((m, 3))
            d_max = min(s * s / (2 * a_br), hi[axis] - lo[axis])
            d = d_max * rng.random(m) ** 2
            d[:4] = [0.0, 1e-6, spec.delta, d_max][: min(4, m)]
            xi[:, axis] = hi[axis] - d if sgn > 0 else lo[axis] + d
            un = np.sqrt(2 * a_br * d)
            ok = un <= s
            tang = rng.normal(size=(m, 3))
            tang[:, axis] = 0.0
            tn = np.linalg.norm(tang, axis=1, keepdims=True)
            room = np.sqrt(np.maximum(s * s - un**2, 0.0))[:, None]
            tang = tang / np.where(tn > 0, tn, 1.0) * room * rng.random((m, 1))
            ups = tang + un[:, None] * n
            for i in np.nonzero(ok & (un > 0))[0]:
                f = controls(n, 8)
                F = spec.force(xi[i], ups[i][None, :], f, np.full(len(f), rho_val))
                val = F @ n + a_br
                record(val, "brake", xi[i], ups[i], f, rho_val)
                count += len(f)
        # speed sphere
        xi = lo + (hi - lo) * rng.random((m, 3))
        ups = rng.normal(size=(m, 3))
        ups *= s / np.linalg.norm(ups, axis=1, keepdims=True)
        for i in range(m):
            f = controls(ups[i] / s, 8)
            F = spec.force(xi[i], ups[i][None, :], f, np.full(len(f), rho_val))
            val = F @ ups[i]
            record(val, "speed", xi[i], ups[i], f, rho_val)
            count += len(f)
    return InvarianceResult("PASS" if worst <= 0 else "FAIL", worst, witness if worst > 0 else None, count)


def in_braking_set(spec: LeaderForceSpec, xi, ups, tol: float = 1e-9) -> bool:
    xi = np.atleast_2d(xi)
    ups = np.atleast_2d(ups)
    if np.any(xi < spec.lo - tol) or np.any(xi > spec.hi + tol):
        return False
    if np.any(np.linalg.norm(ups, axis=1) > spec.speed + tol):
        return False
    for axis in range(3):
        d_hi = spec.hi[axis] - xi[:, axis]
        d_lo = xi[:, axis] - spec.lo[axis]
        if np.any(np.maximum(ups[:, axis], 0) ** 2 > 2 * spec.brake * d_hi + tol):
            return False
        if np.any(np.maximum(-ups[:, axis], 0) ** 2 > 2 * spec.brake * d_lo + tol):
            return False
    return True


# ---------------------------------------------------------------- coupling

@dataclass(frozen=True)
class LeaderPotential:
    """U(x) = U_conf(x) - A sum_i exp(-|x - xi_i|^2 / (2 sigma^2))."""

    positions: tuple
    A: float = 1.0
    sigma: float = 0.15
    base: object = field(default_factory=ZeroConfinement)

    def _wells(self, x):
        x = np.asarray(x, float)
        val = np.zeros(x.shape[:-1])
        grad = np.zeros(x.shape)
        for xi in self.positions:
            d = x - np.asarray(xi, float)
            e = self.A * np.exp(-np.sum(d * d, axis=-1) / (2 * self.sigma**2))
            val -= e
            grad += d / self.sigma**2 * e[..., None]
        return val, grad

    def value(self, x):
        return self.base.value(x) + self._wells(x)[0]

    def grad(self, x):
        return np.asarray(self.base.grad(x), float) + self._wells(x)[1]

    def gradient_bound(self, diameter: float) -> float:
        """omega^2 diam + A e^{-1/2} k / sigma."""
        omega = getattr(self.base, "omega", 0.0)
        return omega**2 * diameter + self.A * np.exp(-0.5) * len(self.positions) / self.sigma


def leader_potential(x, leaders: LeaderSet, A: float = 1.0, sigma: float = 0.15, base=None):
    """(U(x), grad U(x)) for the current leader positions."""
    pot = LeaderPotential(tuple(map(tuple, leaders.xi)), A, sigma, base or ZeroConfinement())
    return pot.value(x), pot.grad(x)


def audit_gradient_bound(pot: LeaderPotential, domain, samples: int = 20000, seed: int = 0):
    """Largest sampled |grad U| on the box of ``domain`` versus the closed-form bound."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(domain.lo, float), np.asarray(domain.hi, float)
    pts = lo + (hi - lo) * rng.random((samples, 3))
    # include points on the sphere of maximal well slope
    for xi in pot.positions:
        d = rng.normal(size=(200, 3))
        d *= pot.sigma / np.linalg.norm(d, axis=1, keepdims=True)
        pts = np.vstack([pts, np.clip(np.asarray(xi) + d, lo, hi)])
    g = np.linalg.norm(pot.grad(pts), axis=1)
    bound = pot.gradient_bound(float(np.linalg.norm(hi - lo)))
    return float(g.max()), float(bound)


@dataclass
class Coupling:
    spec: LeaderForceSpec = field(default_factory=LeaderForceSpec)
    A: float = 1.0
    sigma: float = 0.15

    def potential(self, leaders: LeaderSet, base) -> LeaderPotential:
        return LeaderPotential(tuple(map(tuple, leaders.xi)), self.A, self.sigma, base)


def coupled_step(fluid: FluidState, leaders: LeaderSet, params: ModelParams, coupling: Coupling,
                 dt: float, options: SolverOptions | None = None):
    """Leaders dt/2, fluid dt under the updated wells, leaders dt/2 with the new density."""
    if abs(fluid.t - leaders.t) > 1e-12:
        raise ArgumentError("fluid and leaders are at different times")
    half = leader_step(leaders, fluid, coupling.spec, 0.5 * dt)
    pot = coupling.potential(half, params.confinement)
    fluid_new = hydro.step(fluid, replace(params, confinement=pot), dt, options)
    return fluid_new, leader_step(half, fluid_new, coupling.spec, 0.5 * dt)


def simulate(fluid: FluidState, leaders: LeaderSet, params: ModelParams, coupling: Coupling,
             horizon: float, dt: float, options: SolverOptions | None = None, record=None):
    """Run the coupled system for ``horizon``.

    Steps are ``dt`` unless the fluid CFL limit (times 0.9) is smaller; the
    last step lands exactly on the horizon. ``record(fluid, leaders)`` is
    called after every step.
    """
    options = options or SolverOptions()
    t_end = fluid.t + horizon
    while t_end - fluid.t > 1e-12:
        h = min(dt, 0.9 * hydro.stable_dt(fluid, options), t_end - fluid.t)
        fluid, leaders = coupled_step(fluid, leaders, params, coupling, h, options)
        if record is not None:
            record(fluid, leaders)
    return fluid, leaders


def l1_distance(a: np.ndarray, b: np.ndarray, mask) -> float:
    return float(np.sum(np.abs(a - b) * mask.inside) * mask.h**3)


@dataclass
class SteerResult:
    schedule: ControlSchedule
    distance: float
    seed_distance: float
    evaluations: int
    history: list


def steer_to_target(fluid0: FluidState, leaders0: LeaderSet, params: ModelParams, coupling: Coupling,
                    target: np.ndarray, horizon: float, dt: float, budget: int = 40, pieces: int = 4,
                    step: float | None = None, seed_schedule: ControlSchedule | None = None,
                    options: SolverOptions | None = None) -> SteerResult:
    """Coordinate descent on piecewise-constant controls minimizing ||rho(T) - target||_1.

    Every trial costs one coupled simulation; the best schedule found within
    ``budget`` simulations is returned (never worse than the seed).
    """
    if budget < 1:
        raise ArgumentError("budget must be at least one simulation")
    mask = fluid0.mask
    t0 = fluid0.t
    if seed_schedule is None:
        seed_schedule = ControlSchedule.zeros(leaders0.k, t0, t0 + horizon, pieces)
    f_max = coupling.spec.f_max
    step = f_max if step is None else step
    evals = 0

    def evaluate(sched):
        nonlocal evals
        evals += 1
        lead = LeaderSet(leaders0.xi, leaders0.ups, sched, t0)
        fl, _ = simulate(fluid0, lead, params, coupling, horizon, dt, options)
        return l1_distance(fl.rho, target, mask)

    best = seed_schedule.copy()
    best_d = evaluate(best)
    seed_d = best_d
    history = [best_d]
    coords = [(i, p, a) for i in range(leaders0.k) for p in range(best.values.shape[1]) for a in range(3)]
    while evals < budget and step > 1e-3 * f_max:
        improved = False
        for i, p, a in coords:
            for sgn in (1.0, -1.0):
                if evals >= budget:
                    break
                trial = best.copy()
                trial.values[i, p, a] += sgn * step
                norm = np.linalg.norm(trial.values[i, p])
                if norm > f_max:
                    trial.values[i, p] *= f_max / norm
                if np.array_equal(trial.values, best.values):
                    continue
                d = evaluate(trial)
                history.append(d)
                if d < best_d:
                    best, best_d, improved = trial, d, True
                    break
            if evals >= budget:
                break
        if not improved:
            step *= 0.5
    log.info("steering: %d simulations, L1 %.4f -> %.4f", evals, seed_d, best_d)
    return SteerResult(best, best_d, seed_d, evals, history)
