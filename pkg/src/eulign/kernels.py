"""Yukawa and Bessel interaction kernels and the nonlocal potentials built from them."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numba
import numpy as np
from scipy import fft, integrate, special

from .errors import ArgumentError, ConfigError, DomainError
from .geometry import GridMask

YUKAWA = "yukawa"
BESSEL = "bessel"
ROLES = ("alignment", "cohesion", "repulsion")


def fft_workers() -> int:
    return max(1, int(os.environ.get("EULIGN_THREADS", "1")))


@dataclass(frozen=True)
class KernelSpec:
    """One interaction kernel: ``k e^{-lam r}/r`` (Yukawa) or ``k G_lam`` (Bessel of order lam).

    ``k = 0`` switches the interaction off.
    """

    family: str = YUKAWA
    k: float = 0.0
    lam: float = 1.0
    role: str = "alignment"

    def __post_init__(self):
        if self.family not in (YUKAWA, BESSEL):
            raise ConfigError(f"unknown kernel family {self.family!r}")
        if self.role not in ROLES:
            raise ConfigError(f"unknown kernel role {self.role!r}")
        if self.role == "cohesion" and self.k > 0:
            raise ConfigError(f"kernels.cohesion.k must be negative (got {self.k})")
        if self.role != "cohesion" and self.k < 0:
            raise ConfigError(f"kernels.{self.role}.k must be positive (got {self.k})")
        if self.family == YUKAWA and not self.lam > 0:
            raise ConfigError(f"kernels.{self.role}.lambda must be positive for Yukawa (got {self.lam})")
        if self.family == BESSEL and not self.lam >= 2:
            raise ConfigError(f"kernels.{self.role}.lambda (Bessel order) must be >= 2 (got {self.lam})")

    @property
    def active(self) -> bool:
        return self.k != 0.0

    def yukawa_equivalent(self) -> "KernelSpec":
        """Order-2 Bessel kernels are Yukawa kernels with coupling k/4pi and unit rate."""
        if self.family == BESSEL and self.lam == 2.0:
            return KernelSpec(YUKAWA, self.k / (4.0 * math.pi), 1.0, self.role)
        return self


def _bessel_prefactor(order: float) -> float:
    return 1.0 / (2.0 ** ((order + 1.0) / 2.0) * math.pi**1.5 * math.gamma(order / 2.0))


def _eval(spec: KernelSpec, r):
    if spec.family == YUKAWA:
        return spec.k * np.exp(-spec.lam * r) / r
    nu = (3.0 - spec.lam) / 2.0
    return spec.k * _bessel_prefactor(spec.lam) * special.kv(nu, r) * r ** ((spec.lam - 3.0) / 2.0)


def eval_kernel(spec: KernelSpec, r):
    """Kernel value at distance ``r > 0`` (scalar or array)."""
    r = np.asarray(r, float)
    if np.any(r <= 0):
        raise DomainError("kernel evaluated at non-positive distance")
    out = _eval(spec, r)
    return float(out) if out.ndim == 0 else out


def _radial_derivative(spec: KernelSpec, r):
    if spec.family == YUKAWA:
        return -spec.k * np.exp(-spec.lam * r) * (1.0 + spec.lam * r) / r**2
    step = 1e-6 * r
    return (_eval(spec, r + step) - _eval(spec, r - step)) / (2.0 * step)


def grad_kernel(spec: KernelSpec, d) -> np.ndarray:
    """Gradient of the kernel with respect to its first argument at displacement ``d``."""
    d = np.asarray(d, float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r <= 0):
        raise DomainError("kernel gradient at zero displacement")
    return (_radial_derivative(spec, r) / r)[..., None] * d


def _ball_fraction(x: float) -> float:
    """(1 - e^{-x}(1+x)) / x^2 without cancellation for small x."""
    if x < 0.1:
        total = 0.0
        for m in range(2, 14):
            total += (-1) ** m * (m - 1) / math.factorial(m) * x ** (m - 2)
        return total
    return (1.0 - math.exp(-x) * (1.0 + x)) / x**2


def cell_average(spec: KernelSpec, h: float) -> float:
    """Mean of the kernel over the ball with the volume of one cell (h^3)."""
    if spec.k == 0.0:
        return 0.0
    a = h * (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)
    eq = spec.yukawa_equivalent()
    if eq.family == YUKAWA:
        return 3.0 * eq.k * _ball_fraction(eq.lam * a) / a
    integrand = lambda r: _eval(spec, r) * r * r
    val, _ = integrate.quad(integrand, 0.0, a, epsabs=0.0, epsrel=1e-11, limit=200)
    return 3.0 * val / a**3


@lru_cache(maxsize=64)
def _kernel_spectrum(spec: KernelSpec, shape: tuple, h: float):
    padded = tuple(2 * n for n in shape)
    axes = [np.fft.fftfreq(p, 1.0 / p) for p in padded]  # integer offsets with wrap-around
    mx, my, mz = np.meshgrid(*axes, indexing="ij", sparse=True)
    r = h * np.sqrt(mx * mx + my * my + mz * mz)
    r[0, 0, 0] = 1.0
    w = _eval(spec, r) * h**3
    w[0, 0, 0] = cell_average(spec, h) * h**3
    return fft.rfftn(w, workers=fft_workers())


def _check_field(mask: GridMask, f: np.ndarray) -> bool:
    if f.shape == mask.shape:
        return False
    if f.shape == (3,) + mask.shape:
        return True
    raise ArgumentError(f"field shape {f.shape} does not match grid {mask.shape}")


def _forward(mask: GridMask, f: np.ndarray):
    """Spectrum of the zero-padded field; transforms skip the all-zero padding."""
    if f.ndim == 4:
        # per-component transforms are faster than one batched call
        return np.stack([_forward(mask, c) for c in f])
    nx, ny, nz = mask.shape
    w = fft_workers()
    a = fft.rfft(f * mask.inside, n=2 * nz, axis=-1, workers=w)
    a = fft.fft(a, n=2 * ny, axis=-2, workers=w)
    return fft.fft(a, n=2 * nx, axis=-3, workers=w)


def _backward(mask: GridMask, spectrum) -> np.ndarray:
    """Inverse of :func:`_forward`, evaluated only on the unpadded block."""
    if spectrum.ndim == 4:
        return np.stack([_backward(mask, c) for c in spectrum])
    nx, ny, nz = mask.shape
    w = fft_workers()
    a = fft.ifft(spectrum, axis=-3, workers=w)[..., :nx, :, :]
    a = fft.ifft(a, axis=-2, workers=w)[..., :ny, :]
    out = fft.irfft(a, n=2 * nz, axis=-1, workers=w)[..., :nz]
    return out * mask.inside


def convolve(mask: GridMask, f, spec: KernelSpec) -> np.ndarray:
    """Discrete nonlocal operator: sum over inside cells of kernel(offset) f h^3.

    Zero-padded FFT convolution; exact (to rounding) for the truncated kernel.
    Vector fields carry the component axis first.
    """
    f = np.asarray(f, float)
    _check_field(mask, f)
    if not spec.active:
        return np.zeros_like(f)
    khat = _kernel_spectrum(spec, mask.shape, mask.h)
    return _backward(mask, _forward(mask, f) * khat)


def convolve_direct(mask: GridMask, f, spec: KernelSpec, chunk: int = 512) -> np.ndarray:
    """Brute-force reference for :func:`convolve` (O(cells^2))."""
    f = np.asarray(f, float)
    vector = _check_field(mask, f)
    out = np.zeros_like(f)
    if not spec.active:
        return out
    idx = np.argwhere(mask.inside)
    vals = f[(slice(None),) + tuple(idx.T)] if vector else f[tuple(idx.T)]
    vals = np.atleast_2d(vals)
    self_w = cell_average(spec, mask.h) * mask.h**3
    for start in range(0, len(idx), chunk):
        block = idx[start:start + chunk]
        r = mask.h * np.linalg.norm((block[:, None, :] - idx[None, :, :]).astype(float), axis=2)
        zero = r == 0.0
        r[zero] = 1.0
        w = _eval(spec, r) * mask.h**3
        w[zero] = self_w
        res = vals @ w.T
        if vector:
            out[(slice(None),) + tuple(block.T)] = res
        else:
            out[tuple(block.T)] = res[0]
    return out


@dataclass
class PotentialSet:
    """Nonlocal potentials of one (rho, j) state plus cached gradients."""

    pi_rho: np.ndarray
    pi_j: np.ndarray
    v_c: np.ndarray
    v_r: np.ndarray
    grad_vc: np.ndarray
    grad_vr: np.ndarray
    grad_U: np.ndarray

    @property
    def grad_v(self) -> np.ndarray:
        return self.grad_vc + self.grad_vr


def grid_gradient(mask: GridMask, f: np.ndarray) -> np.ndarray:
    """Second-order gradient on inside cells.

    Central differences where both neighbours are inside, second-order
    one-sided stencils next to the wall, first order when only one
    neighbour exists along an axis.
    """
    return _grid_gradient(np.ascontiguousarray(f, dtype=float), mask.inside, mask.h)


@numba.njit(cache=True)
def _grid_gradient(f, ins, h):
    n = ins.shape
    g = np.zeros((3,) + f.shape)
    idx = np.zeros(3, np.int64)
    vals = np.zeros(5)
    ok = np.zeros(5, np.bool_)
    for i in range(n[0]):
        for j in range(n[1]):
            for k in range(n[2]):
                if not ins[i, j, k]:
                    continue
                f0 = f[i, j, k]
                for a in range(3):
                    idx[0], idx[1], idx[2] = i, j, k
                    c = idx[a]
                    ok[:] = False
                    for s in range(-2, 3):
                        if s == 0 or not 0 <= c + s < n[a]:
                            continue
                        idx[a] = c + s
                        if ins[idx[0], idx[1], idx[2]]:
                            ok[s + 2] = True
                            vals[s + 2] = f[idx[0], idx[1], idx[2]]
                    if ok[1] and ok[3]:
                        d = (vals[3] - vals[1]) / (2 * h)
                    elif ok[3] and ok[4]:
                        d = (-3 * f0 + 4 * vals[3] - vals[4]) / (2 * h)
                    elif ok[1] and ok[0]:
                        d = (3 * f0 - 4 * vals[1] + vals[0]) / (2 * h)
                    elif ok[3]:
                        d = (vals[3] - f0) / h
                    elif ok[1]:
                        d = (f0 - vals[1]) / h
                    else:
                        d = 0.0
                    g[a, i, j, k] = d
    return g


def potentials(mask: GridMask, rho, j, specs, confinement=None) -> PotentialSet:
    """pi_rho, pi_j, v_c, v_r for one state; ``specs`` is the (alignment, cohesion, repulsion) triple.

    ``confinement`` is any object with ``grad(points)``; its gradient is
    evaluated analytically at the cell centres.
    """
    rho = np.asarray(rho, float)
    j = np.asarray(j, float)
    if rho.shape != mask.shape or j.shape != (3,) + mask.shape:
        raise ArgumentError("density/momentum shapes do not match the grid")
    ka, kc, kr = specs
    zero = np.zeros(mask.shape)
    rho_hat = _forward(mask, rho) if (ka.active or kc.active or kr.active) else None

    def conv_rho(spec):
        if not spec.active:
            return zero.copy()
        return _backward(mask, rho_hat * _kernel_spectrum(spec, mask.shape, mask.h))

    pi_rho = conv_rho(ka)
    pi_j = convolve(mask, j, ka) if ka.active else np.zeros_like(j)
    v_c = conv_rho(kc)
    v_r = conv_rho(kr)
    grad_vc = grid_gradient(mask, v_c) if kc.active else np.zeros_like(j)
    grad_vr = grid_gradient(mask, v_r) if kr.active else np.zeros_like(j)
    if confinement is None:
        grad_U = np.zeros_like(j)
    else:
        grad_U = confinement_gradient_on_grid(mask, confinement)
    return PotentialSet(pi_rho, pi_j, v_c, v_r, grad_vc, grad_vr, grad_U)


def confinement_gradient_on_grid(mask: GridMask, confinement) -> np.ndarray:
    """grad U at cell centres; cached on the mask for hashable (static) potentials."""
    cache = mask.__dict__.setdefault("_grad_U_cache", {})
    try:
        hit = cache.get(confinement)
    except TypeError:
        hit, cache = None, None
    if hit is not None:
        return hit
    pts = mask.center_points()
    g = np.asarray(confinement.grad(pts)).reshape(mask.shape + (3,))
    g = np.moveaxis(g, -1, 0) * mask.inside
    if cache is not None:
        g.flags.writeable = False
        if len(cache) > 8:
            cache.clear()
        cache[confinement] = g
    return g


class SourceFields(NamedTuple):
    """The subset of potentials entering the momentum source."""

    pi_rho: np.ndarray
    pi_j: np.ndarray
    grad_v: np.ndarray
    grad_U: np.ndarray


def source_fields(mask: GridMask, rho, j, specs, confinement=None) -> SourceFields:
    """Like :func:`potentials` but with v_c + v_r formed in one inverse transform."""
    ka, kc, kr = specs
    pi_rho = np.zeros(mask.shape)
    pi_j = np.zeros((3,) + mask.shape)
    grad_v = np.zeros((3,) + mask.shape)
    if ka.active or kc.active or kr.active:
        rho_hat = _forward(mask, rho)
    if ka.active:
        khat = _kernel_spectrum(ka, mask.shape, mask.h)
        pi_rho = _backward(mask, rho_hat * khat)
        for c in range(3):
            pi_j[c] = _backward(mask, _forward(mask, j[c]) * khat)
    if kc.active or kr.active:
        v = _backward(mask, rho_hat * _combined_spectrum(kc, kr, mask.shape, mask.h))
        grad_v = grid_gradient(mask, v)
    grad_U = np.zeros((3,) + mask.shape) if confinement is None else confinement_gradient_on_grid(mask, confinement)
    return SourceFields(pi_rho, pi_j, grad_v, grad_U)


@lru_cache(maxsize=32)
def _combined_spectrum(kc: KernelSpec, kr: KernelSpec, shape: tuple, h: float):
    out = 0.0
    for spec in (kc, kr):
        if spec.active:
            out = out + _kernel_spectrum(spec, shape, h)
    return out
