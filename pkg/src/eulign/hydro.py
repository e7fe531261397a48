"""Finite-volume solver for the pressureless Euler alignment system on a masked grid.

Conserved variables are the cell averages of density and momentum. Wall faces
use mirrored ghost states (normal momentum flipped), so the numerical mass
flux through the wall vanishes identically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import StepSizeError
from .geometry import GridMask
from .kernels import PotentialSet, potentials, source_fields
from .model import ModelParams

log = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    cfl: float = 0.45
    floor: float | None = None
    ghost_depth: int = 2
    rk_stages: int = 2

    def __post_init__(self):
        if not 0.0 < self.cfl < 1.0:
            raise ValueError(f"CFL number must lie in (0, 1), got {self.cfl}")
        if self.floor is not None and self.floor <= 0:
            raise ValueError("vacuum floor must be positive")

    def floor_for(self, mask: GridMask) -> float:
        return self.floor if self.floor is not None else 1e-10 / mask.volume


@dataclass
class FluidState:
    t: float
    rho: np.ndarray
    j: np.ndarray
    mask: GridMask = field(repr=False)
    floor_mass: float = 0.0  # cumulative mass injected by the vacuum floor

    def copy(self) -> "FluidState":
        return FluidState(self.t, self.rho.copy(), self.j.copy(), self.mask, self.floor_mass)

    @property
    def u(self) -> np.ndarray:
        safe = np.where(self.mask.inside, self.rho, 1.0)
        return self.j / safe * self.mask.inside

    def mass(self) -> float:
        return float(self.rho[self.mask.inside].sum() * self.mask.h**3)

    def momentum(self) -> np.ndarray:
        return self.j[:, self.mask.inside].sum(axis=1) * self.mask.h**3


def state_potentials(state: FluidState, params: ModelParams) -> PotentialSet:
    return potentials(state.mask, state.rho, state.j, params.kernels, params.confinement)


def source(state: FluidState, pots: PotentialSet, params: ModelParams) -> np.ndarray:
    """rho pi_j - j pi_rho - rho grad(v_c + v_r + U) + kappa_p j (1 - P(|j|/rho))."""
    rho, j = state.rho, state.j
    s = rho * pots.pi_j - j * pots.pi_rho
    s -= rho * (pots.grad_v + pots.grad_U)
    if params.kappa_p:
        safe = np.where(state.mask.inside, rho, 1.0)
        speed = np.sqrt(np.sum(j * j, axis=0)) / safe
        s += params.kappa_p * j * (1.0 - params.P(speed))
    return s * state.mask.inside


@numba.njit(cache=True, inline="always")
def _minmod(a, b):
    if a * b <= 0.0:
        return 0.0
    return a if abs(a) < abs(b) else b


@numba.njit(cache=True)
def _sweep(q, ins, normal, inv_h, dq):
    """Accumulate face fluxes along the last axis; ``normal`` is the momentum component along it."""
    na, nb, nc = ins.shape
    lo = np.empty((4, nc))
    hi = np.empty((4, nc))
    L = np.empty(4)
    R = np.empty(4)
    for a in range(na):
        for b in range(nb):
            for c in range(nc):
                if not ins[a, b, c]:
                    continue
                left = c > 0 and ins[a, b, c - 1]
                right = c < nc - 1 and ins[a, b, c + 1]
                for m in range(4):
                    qc = q[m, a, b, c]
                    mirrored = -qc if m == normal else qc
                    ql = q[m, a, b, c - 1] if left else mirrored
                    qr = q[m, a, b, c + 1] if right else mirrored
                    s = _minmod(qc - ql, qr - qc)
                    lo[m, c] = qc - 0.5 * s
                    hi[m, c] = qc + 0.5 * s
            for c in range(nc + 1):
                in_a = c > 0 and ins[a, b, c - 1]
                in_b = c < nc and ins[a, b, c]
                if not (in_a or in_b):
                    continue
                if in_a:
                    for m in range(4):
                        L[m] = hi[m, c - 1]
                if in_b:
                    for m in range(4):
                        R[m] = lo[m, c]
                # wall faces: mirrored ghost state
                if not in_a:
                    for m in range(4):
                        L[m] = R[m]
                    L[normal] = -R[normal]
                if not in_b:
                    for m in range(4):
                        R[m] = L[m]
                    R[normal] = -L[normal]
                uL = L[normal] / L[0]
                uR = R[normal] / R[0]
                alpha = max(abs(uL), abs(uR))
                for m in range(4):
                    if m == 0:
                        fl = L[normal]
                        fr = R[normal]
                    else:
                        fl = L[m] * uL
                        fr = R[m] * uR
                    flux = (0.5 * (fl + fr) - 0.5 * alpha * (R[m] - L[m])) * inv_h
                    if in_a:
                        dq[m, a, b, c - 1] -= flux
                    if in_b:
                        dq[m, a, b, c] += flux


def _fv_divergence(q, ins, h):
    dq = np.zeros_like(q)
    for axis in range(3):
        order = [d for d in range(3) if d != axis] + [axis]
        perm = (0,) + tuple(d + 1 for d in order)
        _sweep(q.transpose(perm), ins.transpose(order), 1 + axis, 1.0 / h, dq.transpose(perm))
    return dq


def hyperbolic_rhs(state: FluidState):
    """Divergence of the pressureless flux pair (j, j j^T / rho), Rusanov + minmod."""
    q = np.ascontiguousarray(np.concatenate([state.rho[None], state.j]))
    dq = _fv_divergence(q, state.mask.inside, state.mask.h)
    return dq[0], dq[1:]


def rhs(state: FluidState, params: ModelParams):
    drho, dj = hyperbolic_rhs(state)
    pots = source_fields(state.mask, state.rho, state.j, params.kernels, params.confinement)
    return drho, dj + source(state, pots, params)


def apply_bc(state: FluidState, depth: int = 2):
    """Density and momentum padded with ``depth`` mirrored ghost layers.

    A ghost cell at distance ``d`` beyond a wall takes the values of the
    inside cell at distance ``d`` on the other side: same density, normal
    momentum negated. The solver's wall fluxes use the same rule, so the
    numerical mass flux through every wall face is zero.
    """
    ins = state.mask.inside
    pad = depth + 2 * depth
    width = ((pad, pad),) * 3
    ip = np.pad(ins, width, constant_values=False)
    rho = np.pad(state.rho * ins, width)
    j = np.pad(state.j * ins, ((0, 0),) + width)
    filled = ip.copy()
    rho_g = rho.copy()
    j_g = j.copy()
    for d in range(1, depth + 1):
        for a in range(3):
            for s in (1, -1):
                # wall between g - d*s*e and g - (d-1)*s*e; mirror source at g - (2d-1)*s*e
                wall_in = np.roll(ip, d * s, axis=a)
                between_out = np.ones_like(ip)
                for dd in range(1, d):
                    between_out &= ~np.roll(ip, dd * s, axis=a)
                src = 2 * d - 1
                src_in = np.roll(ip, src * s, axis=a)
                ghost = ~filled & wall_in & between_out & src_in
                if not ghost.any():
                    continue
                rho_g[ghost] = np.roll(rho, src * s, axis=a)[ghost]
                mj = np.roll(j, src * s, axis=a + 1)
                mj[a] = -mj[a]
                j_g[:, ghost] = mj[:, ghost]
                filled |= ghost
    crop = (slice(pad - depth, -(pad - depth)),) * 3
    return rho_g[crop], j_g[(slice(None),) + crop]


def max_wave_speed(state: FluidState) -> float:
    u = state.u
    return float(np.max(np.sum(np.abs(u), axis=0)))


def stable_dt(state: FluidState, options: SolverOptions | None = None, eps: float = 1e-12) -> float:
    options = options or SolverOptions()
    return options.cfl * state.mask.h / (max_wave_speed(state) + eps)


def _apply_floor(rho, mask, floor):
    low = mask.inside & (rho < floor)
    if not low.any():
        return rho, 0.0
    added = float((floor - rho[low]).sum() * mask.h**3)
    rho = rho.copy()
    rho[low] = floor
    return rho, added


def step(state: FluidState, params: ModelParams, dt: float, options: SolverOptions | None = None) -> FluidState:
    """One SSP-RK2 step; potentials are recomputed at every stage."""
    options = options or SolverOptions()
    limit = stable_dt(state, options)
    if dt > limit * (1 + 1e-12):
        raise StepSizeError(f"dt={dt:.3e} violates the CFL limit {limit:.3e}")
    floor = options.floor_for(state.mask)
    ins = state.mask.inside

    d_rho, d_j = rhs(state, params)
    rho1, added1 = _apply_floor(state.rho + dt * d_rho, state.mask, floor)
    s1 = FluidState(state.t + dt, rho1, (state.j + dt * d_j) * ins, state.mask)
    if options.rk_stages == 1:
        rho_new, j_new, added = rho1, s1.j, added1
    else:
        d_rho1, d_j1 = rhs(s1, params)
        rho_new = 0.5 * state.rho + 0.5 * (rho1 + dt * d_rho1)
        j_new = (0.5 * state.j + 0.5 * (s1.j + dt * d_j1)) * ins
        rho_new, added2 = _apply_floor(rho_new, state.mask, floor)
        added = 0.5 * added1 + added2
    if added > 1e-12:
        log.warning("vacuum floor injected %.3e mass at t=%.4f", added, state.t + dt)
    return FluidState(state.t + dt, rho_new * ins, j_new, state.mask, state.floor_mass + added)


def initial_state(mask: GridMask, rho0, u0=None, t0: float = 0.0, normalize: bool = True) -> FluidState:
    """Sample callables rho0(points), u0(points) at cell centres; j = rho u."""
    pts = mask.centers().reshape(-1, 3)
    rho = np.asarray(rho0(pts), float).reshape(mask.shape) * mask.inside
    if normalize:
        rho = rho / (rho[mask.inside].sum() * mask.h**3)
    if u0 is None:
        j = np.zeros((3,) + mask.shape)
    else:
        u = np.asarray(u0(pts), float).reshape(mask.shape + (3,))
        j = np.moveaxis(u, -1, 0) * rho
    return FluidState(t0, rho, j * mask.inside, mask)
