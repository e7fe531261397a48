"""Generalized Cucker-Smale particle system with specular wall reflections."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from . import kernels
from .errors import PreconditionError, SingularityError, StepSizeError
from .geometry import DomainSpec, GridMask, first_boundary_hit, reflect, signed_distance
from .kernels import YUKAWA
from .model import ModelParams

COINCIDENCE = 1e-12
MAX_REFLECTIONS = 8


@dataclass
class ParticleEnsemble:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    @property
    def N(self) -> int:
        return len(self.x)

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.x.copy(), self.v.copy(), self.t)


def generator(seed: int) -> np.random.Generator:
    """Counter-based RNG: streams do not depend on thread count."""
    return np.random.Generator(np.random.Philox(seed))


def sample_ensemble(domain: DomainSpec, N: int, seed: int, density=None, velocity=None,
                    density_max: float | None = None) -> ParticleEnsemble:
    """Rejection-sample positions from ``density`` (uniform on D by default).

    ``velocity`` is either a callable u0(points) (monokinetic data) or a
    ``(mean, cov)`` pair for Gaussian velocities; default zero.
    """
    rng = generator(seed)
    lo = np.asarray(domain.lo, float)
    hi = np.asarray(domain.hi, float)
    if density is not None and density_max is None:
        probe = lo + (hi - lo) * rng.random((20000, 3))
        density_max = 1.1 * float(np.max(density(probe)))
    out = []
    count = 0
    while count < N:
        pts = lo + (hi - lo) * rng.random((2 * (N - count) + 64, 3))
        keep = signed_distance(domain, pts) < 0.0
        if density is not None:
            keep &= rng.random(len(pts)) * density_max < density(pts)
        pts = pts[keep][: N - count]
        out.append(pts)
        count += len(pts)
    x = np.concatenate(out)
    if velocity is None:
        v = np.zeros_like(x)
    elif callable(velocity):
        v = np.asarray(velocity(x), float)
    else:
        mean, cov = velocity
        v = rng.multivariate_normal(np.asarray(mean, float), np.asarray(cov, float), size=N)
    return ParticleEnsemble(x, v, 0.0)


@numba.njit(parallel=True, cache=True)
def _yukawa_pair_acc(x, v, ka, la, kc, lc, kr, lr):
    n = x.shape[0]
    acc = np.zeros((n, 3))
    bad = np.full(n, -1)
    norm = 1.0 / (n - 1)
    for i in numba.prange(n):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for j in range(n):
            if j == i:
                continue
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            r = math.sqrt(dx * dx + dy * dy + dz * dz)
            if r < 1e-12:
                bad[i] = j
                continue
            inv = 1.0 / r
            s = 0.0
            if ka != 0.0:
                g = ka * math.exp(-la * r) * inv
                ax += g * (v[j, 0] - v[i, 0])
                ay += g * (v[j, 1] - v[i, 1])
                az += g * (v[j, 2] - v[i, 2])
            # minus the kernel gradient: -G'(r) (x_i - x_j) / r
            if kc != 0.0:
                s += kc * math.exp(-lc * r) * (1.0 + lc * r) * inv * inv * inv
            if kr != 0.0:
                s += kr * math.exp(-lr * r) * (1.0 + lr * r) * inv * inv * inv
            ax += s * dx
            ay += s * dy
            az += s * dz
        acc[i, 0] = ax * norm
        acc[i, 1] = ay * norm
        acc[i, 2] = az * norm
    return acc, bad


def _numpy_pair_acc(x, v, specs, rows=None, chunk=256):
    ka, kc, kr = specs
    n = len(x)
    rows = np.arange(n) if rows is None else np.asarray(rows)
    acc = np.zeros((len(rows), 3))
    for s in range(0, len(rows), chunk):
        blk = rows[s:s + chunk]
        d = x[blk, None, :] - x[None, :, :]
        r = np.linalg.norm(d, axis=2)
        self_mask = blk[:, None] == np.arange(n)[None, :]
        close = (r < COINCIDENCE) & ~self_mask
        if close.any():
            a, b = np.argwhere(close)[0]
            raise SingularityError(int(blk[a]), int(b), float(r[a, b]))
        r = np.where(self_mask, 1.0, r)
        out = np.zeros((len(blk), 3))
        if ka.active:
            g = np.where(self_mask, 0.0, kernels._eval(ka, r))
            out += np.einsum("ij,ijk->ik", g, v[None, :, :] - v[blk, None, :])
        for spec in (kc, kr):
            if spec.active:
                dg = np.where(self_mask, 0.0, kernels._radial_derivative(spec, r) / r)
                out -= np.einsum("ij,ijk->ik", dg, d)
        acc[s:s + len(blk)] = out / (n - 1)
    return acc


def pair_accelerations(ens: ParticleEnsemble, params: ModelParams) -> np.ndarray:
    """Alignment + cohesion + repulsion acceleration of every particle, shape (N, 3)."""
    specs = params.kernels
    if not any(s.active for s in specs):
        return np.zeros_like(ens.x)
    if ens.N < 2:
        raise PreconditionError("pairwise forces need at least two particles")
    if all(s.family == YUKAWA for s in specs):
        ka, kc, kr = specs
        acc, bad = _yukawa_pair_acc(ens.x, ens.v, ka.k, ka.lam, kc.k, kc.lam, kr.k, kr.lam)
        hit = np.nonzero(bad >= 0)[0]
        if len(hit):
            i = int(hit[0])
            j = int(bad[i])
            raise SingularityError(i, j, float(np.linalg.norm(ens.x[i] - ens.x[j])))
        return acc
    return _numpy_pair_acc(ens.x, ens.v, [s.yukawa_equivalent() for s in specs])


def pairwise_acceleration(ens: ParticleEnsemble, params: ModelParams, i: int) -> np.ndarray:
    """Phi_a + Phi_c + Phi_r for particle ``i``."""
    if ens.N < 2:
        raise PreconditionError("pairwise forces need at least two particles")
    return _numpy_pair_acc(ens.x, ens.v, [s.yukawa_equivalent() for s in params.kernels], rows=[i])[0]


def propulsion(v, kappa_p: float, P) -> np.ndarray:
    """kappa_p v (1 - P(|v|))."""
    v = np.asarray(v, float)
    speed = np.linalg.norm(v, axis=-1)
    return kappa_p * v * (1.0 - P(speed))[..., None]


def confinement(x, params: ModelParams) -> np.ndarray:
    """Confinement force -grad U(x)."""
    return -np.asarray(params.confinement.grad(np.asarray(x, float)), float)


def accelerations(ens: ParticleEnsemble, params: ModelParams) -> np.ndarray:
    acc = pair_accelerations(ens, params)
    if params.kappa_p:
        acc = acc + propulsion(ens.v, params.kappa_p, params.P)
    acc = acc + confinement(ens.x, params)
    return acc


def _advance_with_reflections(domain: DomainSpec, x, v, dt, index):
    remaining = dt
    bounces = 0
    while True:
        hit = first_boundary_hit(domain, x, v, remaining)
        if hit is None:
            return x + remaining * v, v
        t_hit, x, nu = hit
        v = reflect(v, nu)
        remaining -= t_hit
        bounces += 1
        if bounces > MAX_REFLECTIONS:
            raise StepSizeError(f"particle {index}: more than {MAX_REFLECTIONS} reflections in one step")
        if remaining <= 0.0:
            return x, v


def step(ens: ParticleEnsemble, params: ModelParams, dt: float, domain: DomainSpec) -> ParticleEnsemble:
    """One semi-implicit Euler step: kick with current forces, drift with the new velocity.

    Drifts that can reach the wall are traced segment by segment and
    reflected specularly at every crossing.
    """
    if dt <= 0:
        raise StepSizeError("time step must be positive")
    v_new = ens.v + dt * accelerations(ens, params)
    speed = np.linalg.norm(v_new, axis=1)
    if dt * float(speed.max(initial=0.0)) > domain.diagonal / 4:
        raise StepSizeError(f"dt={dt} too large: dt*max|v| exceeds a quarter of the box diagonal")
    x_new = ens.x + dt * v_new
    sd0 = signed_distance(domain, ens.x)
    cand = np.nonzero(sd0 + dt * speed >= 0.0)[0]
    for i in cand:
        x_new[i], v_new[i] = _advance_with_reflections(domain, ens.x[i], v_new[i], dt, int(i))
    return ParticleEnsemble(x_new, v_new, ens.t + dt)


def velocity_diameter(v: np.ndarray) -> float:
    """max_{i,j} |v_i - v_j|."""
    if len(v) < 2:
        return 0.0
    from scipy.spatial.distance import pdist

    return float(pdist(v).max())


def _nearest_inside(mask: GridMask) -> np.ndarray:
    cached = getattr(mask, "_nearest_inside", None)
    if cached is None:
        _, idx = ndimage.distance_transform_edt(~mask.inside, return_indices=True)
        cached = np.ravel_multi_index(tuple(idx), mask.shape)
        mask._nearest_inside = cached
    return cached


def deposit(ens: ParticleEnsemble, mask: GridMask):
    """Cloud-in-cell moments: density and momentum density, mass exactly 1.

    Corner weights landing on outside cells are moved to the nearest inside cell.
    """
    shape = mask.shape
    s = (ens.x - mask.origin) / mask.h - 0.5
    i0 = np.floor(s).astype(int)
    frac = s - i0
    nearest = _nearest_inside(mask).ravel()
    ncell = int(np.prod(shape))
    w_tot = np.zeros(ncell)
    mom = np.zeros((3, ncell))
    inv_n = 1.0 / ens.N
    for cx in (0, 1):
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        for cy in (0, 1):
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            for cz in (0, 1):
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                w = wx * wy * wz * inv_n
                idx = i0 + np.array([cx, cy, cz])
                for a in range(3):
                    np.clip(idx[:, a], 0, shape[a] - 1, out=idx[:, a])
                flat = nearest[np.ravel_multi_index(tuple(idx.T), shape)]
                w_tot += np.bincount(flat, weights=w, minlength=ncell)
                for a in range(3):
                    mom[a] += np.bincount(flat, weights=w * ens.v[:, a], minlength=ncell)
    vol = mask.h**3
    rho = w_tot.reshape(shape) / vol
    j = mom.reshape((3,) + shape) / vol
    return rho, j
