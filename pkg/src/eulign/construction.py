"""Momentum construction from a prescribed density path, and weak-form residuals.

Discrete operators live on the inside cells of a :class:`GridMask`. Wall
conditions are applied per stencil use: when a stencil at cell ``c`` reaches an
outside cell, that value is replaced by a ghost built from ``c`` itself
(``+f[c]`` for homogeneous Neumann, ``-f[c]`` for homogeneous Dirichlet, and
normal-component reversal for momentum).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg

from .errors import ArgumentError, PreconditionError, SolverError
from .geometry import GridMask, signed_distance

MAX_CG_ITER = 10_000


# ---------------------------------------------------------------- stencils

def _cell_index(mask: GridMask) -> np.ndarray:
    idx = mask.__dict__.get("_cell_index")
    if idx is None:
        idx = -np.ones(mask.shape, np.int64)
        idx[mask.inside] = np.arange(int(mask.inside.sum()))
        mask.__dict__["_cell_index"] = idx
    return idx


def _neighbours(mask: GridMask, axis: int, step: int):
    """For every inside cell (C order) the flat inside-index of its neighbour, or -1."""
    idx = _cell_index(mask)
    pad = np.pad(idx, 1, constant_values=-1)
    sl = [slice(1, -1)] * 3
    sl[axis] = slice(1 + step, pad.shape[axis] - 1 + step)
    return pad[tuple(sl)][mask.inside]


def _laplacian(mask: GridMask, ghost_sign: float) -> sparse.csr_matrix:
    """7-point Laplacian on inside cells; outside neighbours become ghost_sign * f[c]."""
    key = f"_laplacian_{ghost_sign:+g}"
    cached = mask.__dict__.get(key)
    if cached is not None:
        return cached
    n = int(mask.inside.sum())
    rows, cols, vals = [], [], []
    diag = np.full(n, -6.0)
    ar = np.arange(n)
    for axis in range(3):
        for step in (-1, 1):
            nb = _neighbours(mask, axis, step)
            ok = nb >= 0
            rows.append(ar[ok])
            cols.append(nb[ok])
            vals.append(np.ones(int(ok.sum())))
            diag[~ok] += ghost_sign
    rows.append(ar)
    cols.append(ar)
    vals.append(diag)
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ) / mask.h**2
    mask.__dict__[key] = A
    return A


def neumann_laplacian(mask: GridMask) -> sparse.csr_matrix:
    return _laplacian(mask, +1.0)


def dirichlet_laplacian(mask: GridMask) -> sparse.csr_matrix:
    return _laplacian(mask, -1.0)


def _central_difference(mask: GridMask, f: np.ndarray, axis: int, ghost_sign: float) -> np.ndarray:
    """Central difference along ``axis`` on inside cells with per-use ghosts."""
    fi = f[mask.inside]
    out = np.zeros(fi.shape)
    for step in (-1, 1):
        nb = _neighbours(mask, axis, step)
        val = np.where(nb >= 0, fi[np.maximum(nb, 0)], ghost_sign * fi)
        out += step * val
    res = np.zeros(mask.shape)
    res[mask.inside] = out / (2 * mask.h)
    return res


def neumann_gradient(mask: GridMask, f) -> np.ndarray:
    """Central gradient with the zero-normal-derivative ghost rule."""
    f = np.asarray(f, float)
    return np.stack([_central_difference(mask, f, a, +1.0) for a in range(3)])


def divergence(mask: GridMask, j) -> np.ndarray:
    """Central divergence; the normal component is reversed in wall ghosts (j.n = 0)."""
    j = np.asarray(j, float)
    return sum(_central_difference(mask, j[a], a, -1.0) for a in range(3))


def _dirichlet_div_matrix(mask: GridMask) -> sparse.csr_matrix:
    """Central divergence of a Dirichlet vector field as a matrix (cells x 3 cells)."""
    cached = mask.__dict__.get("_dirichlet_div")
    if cached is not None:
        return cached
    n = int(mask.inside.sum())
    ar = np.arange(n)
    blocks = []
    for axis in range(3):
        rows, cols, vals = [], [], []
        for step in (-1, 1):
            nb = _neighbours(mask, axis, step)
            ok = nb >= 0
            rows += [ar[ok], ar[~ok]]
            cols += [nb[ok], ar[~ok]]
            vals += [np.full(int(ok.sum()), step), np.full(int((~ok).sum()), -step)]
        blocks.append(sparse.csr_matrix(
            (np.concatenate(vals) / (2 * mask.h), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)))
    D = sparse.hstack(blocks).tocsr()
    mask.__dict__["_dirichlet_div"] = D
    return D


def _cg(A, b, x0=None, rtol=1e-12):
    it = [0]

    def count(_):
        it[0] += 1

    x, info = cg(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=MAX_CG_ITER, callback=count)
    if info != 0:
        raise SolverError(f"conjugate gradients did not converge in {MAX_CG_ITER} iterations")
    return x, it[0]


# ---------------------------------------------------------------- Neumann / Helmholtz

def solve_neumann(mask: GridMask, g, x0=None) -> np.ndarray:
    """Mean-zero solution of lap(Phi) = -g with zero normal derivative on the walls."""
    g = np.asarray(g, float)
    gi = g[mask.inside]
    vol = mask.h**3
    total = float(gi.sum() * vol)
    l1 = float(np.abs(gi).sum() * vol)
    # relative test plus an absolute floor at the rounding level of mass-1 samples
    if abs(total) > max(1e-8 * l1, 1e-12):
        raise PreconditionError(f"Neumann data incompatible: integral of g = {total:.3e}")
    phi = np.zeros(mask.shape)
    if l1 == 0.0:
        return phi
    b = gi - gi.mean()
    A = -neumann_laplacian(mask)
    start = None if x0 is None else np.asarray(x0, float)[mask.inside]
    x, _ = _cg(A, b, x0=start)
    phi[mask.inside] = x - x.mean()
    return phi


def neumann_residual(mask: GridMask, phi, g) -> float:
    """||lap(Phi) + g||_2 / ||g||_2 with g projected to mean zero."""
    gi = np.asarray(g, float)[mask.inside]
    gi = gi - gi.mean()
    r = neumann_laplacian(mask) @ np.asarray(phi, float)[mask.inside] + gi
    ng = np.linalg.norm(gi)
    return float(np.linalg.norm(r) / ng) if ng > 0 else float(np.linalg.norm(r))


def helmholtz_split(mask: GridMask, j, rho_dot, phi0=None):
    """j = v + grad(Phi) with lap(Phi) = -rho_dot; returns (v, grad Phi)."""
    j = np.asarray(j, float)
    phi = solve_neumann(mask, rho_dot, x0=phi0)
    grad_phi = neumann_gradient(mask, phi)
    return (j - grad_phi) * mask.inside, grad_phi


# ---------------------------------------------------------------- density paths

@dataclass
class DensityPath:
    """Density samples at uniform times on one mask."""

    times: np.ndarray
    rho: np.ndarray
    mask: GridMask = field(repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.rho = np.asarray(self.rho, float)
        if len(self.times) < 3:
            raise ArgumentError("a density path needs at least three samples")
        if self.rho.shape != (len(self.times),) + self.mask.shape:
            raise ArgumentError("density samples do not match times and mask")
        dts = np.diff(self.times)
        if np.any(dts <= 0) or np.ptp(dts) > 1e-9 * dts.mean():
            raise ArgumentError("density path times must be uniform and increasing")
        ins = self.mask.inside
        mass = self.rho[:, ins].sum(axis=1) * self.mask.h**3
        if np.max(np.abs(mass - 1.0)) > 1e-12:
            raise PreconditionError(f"density path mass deviates from 1 by {np.max(np.abs(mass - 1)):.2e}")
        if np.any(self.rho[:, ins] <= 0):
            raise PreconditionError("density path must be positive on inside cells")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def rho_dot(self) -> np.ndarray:
        """Second-order finite differences in time (one-sided at the ends)."""
        return np.gradient(self.rho, self.dt, axis=0, edge_order=2) * self.mask.inside


def sample_density_path(mask: GridMask, rho_fn, times) -> DensityPath:
    """Sample rho_fn(t, points) at cell centres and normalize every sample to mass 1."""
    pts = mask.center_points()
    out = []
    for t in times:
        r = np.asarray(rho_fn(t, pts), float).reshape(mask.shape) * mask.inside
        out.append(r / (r[mask.inside].sum() * mask.h**3))
    return DensityPath(np.asarray(times, float), np.stack(out), mask)


def discrete_curl(mask: GridMask, A) -> np.ndarray:
    """Central-difference curl of a vector potential, restricted to deep-interior support.

    A is zeroed wherever a cell within two cells is outside, so the result
    vanishes near the walls and its central divergence is zero to rounding.
    """
    A = np.asarray(A, float)
    deep = ndimage.binary_erosion(mask.inside, structure=np.ones((3, 3, 3), bool), iterations=2)
    A = A * deep
    h = mask.h

    def d(f, axis):
        return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * h)

    v = np.stack([
        d(A[2], 1) - d(A[1], 2),
        d(A[0], 2) - d(A[2], 0),
        d(A[1], 0) - d(A[0], 1),
    ])
    return v * mask.inside


def curl_field(mask: GridMask, potential) -> np.ndarray:
    """Divergence-free field from a callable vector potential A(points) -> (P, 3)."""
    pts = mask.center_points()
    A = np.asarray(potential(pts), float).reshape(mask.shape + (3,))
    return discrete_curl(mask, np.moveaxis(A, -1, 0))


def momentum_from_density(path: DensityPath, v0) -> np.ndarray:
    """Momenta j(t_m) = v0 + grad Phi(t_m), lap(Phi) = -d_t rho; shape (M, 3, ...)."""
    mask = path.mask
    v0 = np.asarray(v0, float)
    if v0.shape != (3,) + mask.shape:
        raise ArgumentError("v0 must be a vector field on the mask")
    div = divergence(mask, v0)
    if np.max(np.abs(div)) > 1e-9:
        raise PreconditionError(f"v0 is not discretely divergence free (max |div| = {np.max(np.abs(div)):.2e})")
    rho_dot = path.rho_dot()
    out = np.empty((len(path.times), 3) + mask.shape)
    for m in range(len(path.times)):
        phi = solve_neumann(mask, rho_dot[m])
        out[m] = (v0 + neumann_gradient(mask, phi)) * mask.inside
    return out


def continuity_residual(path: DensityPath, j) -> np.ndarray:
    """Max-norm of d_t rho + div j at every sample."""
    rd = path.rho_dot()
    return np.array([np.max(np.abs(rd[m] + divergence(path.mask, j[m]))) for m in range(len(path.times))])


# ---------------------------------------------------------------- elliptic system

def solve_elliptic_system(mask: GridMask, S, rtol: float = 1e-12):
    """Solve -div(grad w + grad w^T - 2/3 I tr grad w) = S with w = 0 on the walls.

    Uses the symmetric positive definite form -lap + (1/3) D^T D, where D is
    the central divergence with odd (Dirichlet) ghosts. Returns ``(w, M)``
    with M = grad w + grad w^T - 2/3 I tr grad w of shape (3, 3, ...).
    """
    S = np.asarray(S, float)
    if S.shape != (3,) + mask.shape:
        raise ArgumentError("S must be a vector field on the mask")
    ins = mask.inside
    if not np.all(np.isfinite(S[:, ins])):
        raise PreconditionError("S must be finite on inside cells")
    w = np.zeros((3,) + mask.shape)
    b = np.concatenate([S[a][ins] for a in range(3)])
    if np.any(b):
        L = -dirichlet_laplacian(mask)
        D = _dirichlet_div_matrix(mask)
        A = (sparse.block_diag([L, L, L]) + (D.T @ D) / 3.0).tocsr()
        x, _ = _cg(A, b, rtol=rtol)
        n = int(ins.sum())
        for a in range(3):
            w[a][ins] = x[a * n:(a + 1) * n]
    return w, trace_free_stress(mask, w)


def dirichlet_gradient(mask: GridMask, w) -> np.ndarray:
    """G[a, b] = d_b w_a with odd ghosts; shape (3, 3, ...)."""
    return np.stack([np.stack([_central_difference(mask, w[a], b, -1.0) for b in range(3)]) for a in range(3)])


def trace_free_stress(mask: GridMask, w) -> np.ndarray:
    """M = G + G^T - 2/3 I tr G, symmetric and trace free by construction."""
    G = dirichlet_gradient(mask, w)
    tr = G[0, 0] + G[1, 1] + G[2, 2]
    M = np.empty_like(G)
    for a in range(3):
        for b in range(a, 3):
            m = G[a, b] + G[b, a]
            M[a, b] = m
            M[b, a] = m
    M[0, 0] -= 2.0 / 3.0 * tr
    M[1, 1] -= 2.0 / 3.0 * tr
    M[2, 2] = -(M[0, 0] + M[1, 1])
    return M


def elliptic_energy(mask: GridMask, w) -> float:
    """sum <M, grad w> h^3, nonnegative for every w."""
    G = dirichlet_gradient(mask, w)
    M = trace_free_stress(mask, w)
    return float(np.sum(M * G) * mask.h**3)


# ---------------------------------------------------------------- test functions

def bump(s):
    """exp(-1/(1 - s^2)) on |s| < 1, zero elsewhere."""
    s = np.asarray(s, float)
    out = np.zeros_like(s)
    inn = np.abs(s) < 1
    out[inn] = np.exp(-1.0 / (1.0 - s[inn] ** 2))
    return out


def bump_derivative(s):
    s = np.asarray(s, float)
    out = np.zeros_like(s)
    inn = np.abs(s) < 1
    si = s[inn]
    out[inn] = np.exp(-1.0 / (1.0 - si**2)) * (-2.0 * si / (1.0 - si**2) ** 2)
    return out


@dataclass(frozen=True)
class TestFunction:
    """phi(t, x) = b((t - tc)/tw) prod_a b((x_a - c_a)/w_a); vector tests carry a component."""

    __test__ = False  # not a pytest class

    center: tuple
    width: tuple
    t_center: float
    t_width: float
    component: int | None = None

    @property
    def kind(self) -> str:
        return "scalar" if self.component is None else "vector"

    def time_factor(self, t):
        s = (np.asarray(t, float) - self.t_center) / self.t_width
        return bump(s), bump_derivative(s) / self.t_width

    def space_factors(self, mask: GridMask):
        """Per-axis (values, derivatives) at cell centres."""
        out = []
        for a in range(3):
            s = (mask.axis_centers(a) - self.center[a]) / self.width[a]
            out.append((bump(s), bump_derivative(s) / self.width[a]))
        return out


@dataclass
class TestFunctionBank:
    __test__ = False

    scalar: list
    vector: list
    dropped: int = 0

    def __len__(self):
        return len(self.scalar) + len(self.vector)


def _support_inside(mask: GridMask, tf: TestFunction) -> bool:
    dom = mask.domain
    lo = np.subtract(tf.center, tf.width)
    hi = np.add(tf.center, tf.width)
    corners = np.array(list(itertools.product(*zip(lo, hi))))
    pts = mask.center_points()
    inbox = np.all((pts > lo) & (pts < hi), axis=1)
    if dom is not None:
        if np.any(signed_distance(dom, corners) >= 0) or np.any(signed_distance(dom, pts[inbox]) >= 0):
            return False
    return bool(np.all(mask.inside.reshape(-1)[inbox]))


def make_test_bank(mask: GridMask, t0: float, tf: float, widths=(0.15, 0.2, 0.25),
                   centers=(0.3, 0.5, 0.7), time_centers=(0.35, 0.65), time_width=0.3) -> TestFunctionBank:
    """Tensor-product bump tests: widths x 9 spread centres x time bumps, times 3 components.

    Lengths are fractions of the box extent along each axis; the nine centres are
    the lattice points (i, j, k) of ``centers`` with i + j + k divisible by 3, so
    each axis position occurs three times. Tests whose support leaves D are dropped.
    """
    lo = mask.origin
    ext = np.array(mask.shape) * mask.h
    if mask.domain is not None:
        lo = np.asarray(mask.domain.lo, float)
        ext = np.asarray(mask.domain.hi, float) - lo
    pts = [p for p in itertools.product(range(len(centers)), repeat=3) if sum(p) % 3 == 0]
    T = tf - t0
    scalar = []
    dropped = 0
    for w in widths:
        for p in pts:
            c = tuple(float(lo[a] + ext[a] * centers[p[a]]) for a in range(3))
            width = tuple(float(ext[a] * w) for a in range(3))
            for tc in time_centers:
                test = TestFunction(c, width, t0 + T * tc, T * time_width)
                if _support_inside(mask, test):
                    scalar.append(test)
                else:
                    dropped += 1
    vector = [TestFunction(s.center, s.width, s.t_center, s.t_width, comp) for s in scalar for comp in range(3)]
    return TestFunctionBank(scalar, vector, dropped)


def trapezoid_weights(times) -> np.ndarray:
    t = np.asarray(times, float)
    w = np.zeros_like(t)
    d = np.diff(t)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def _pair(field_m, fx, fy, fz):
    """sum_ijk field[i,j,k] fx[i] fy[j] fz[k] for every sample: shape (M,)."""
    return np.einsum("mijk,i,j,k->m", field_m, fx, fy, fz, optimize=True)


def weak_residual(mask: GridMask, times, rho, j, bank: TestFunctionBank, sources=None):
    """Weak-form residuals of the continuity and momentum equations.

    Scalar tests: int int rho d_t phi + j . grad phi.
    Vector tests: int int j . d_t psi + (j j^T / rho) : grad psi + psi . S.
    ``sources`` is the momentum source S per sample (zero when omitted).
    Returns rows ``(test_id, kind, absolute, normalized)``; normalization is by
    the integral of the absolute values of the terms.
    """
    times = np.asarray(times, float)
    rho = np.asarray(rho, float)
    j = np.asarray(j, float)
    M = len(times)
    if rho.shape != (M,) + mask.shape or j.shape != (M, 3) + mask.shape:
        raise ArgumentError("trajectory sampling does not match times and mask")
    if sources is not None:
        sources = np.asarray(sources, float)
        if sources.shape != j.shape:
            raise ArgumentError("sources must match the momentum samples")
    ins = mask.inside
    vol = mask.h**3
    wt = trapezoid_weights(times)
    rho = rho * ins
    j = j * ins
    safe = np.where(ins, rho, 1.0)
    flux = {}
    for a in range(3):
        for b in range(a, 3):
            flux[a, b] = flux[b, a] = j[:, a] * j[:, b] / safe
    rows = []

    def spatial(tf):
        (bx, dx), (by, dy), (bz, dz) = tf.space_factors(mask)
        return (bx, by, bz), ((dx, by, bz), (bx, dy, bz), (bx, by, dz))

    k = 0
    for tf in bank.scalar:
        T, dT = tf.time_factor(times)
        val, grads = spatial(tf)
        a1 = dT * _pair(rho, *val)
        a1_abs = np.abs(dT) * _pair(np.abs(rho), *val)
        a2 = np.zeros(M)
        a2_abs = np.zeros(M)
        for a in range(3):
            a2 += T * _pair(j[:, a], *grads[a])
            a2_abs += np.abs(T) * _pair(np.abs(j[:, a]), *[np.abs(g) for g in grads[a]])
        res = float(np.sum(wt * (a1 + a2)) * vol)
        scale = float(np.sum(wt * (a1_abs + a2_abs)) * vol)
        rows.append((k, "scalar", abs(res), abs(res) / scale if scale > 0 else abs(res)))
        k += 1
    for tf in bank.vector:
        c = tf.component
        T, dT = tf.time_factor(times)
        val, grads = spatial(tf)
        terms = [dT * _pair(j[:, c], *val)]
        absterms = [np.abs(dT) * _pair(np.abs(j[:, c]), *val)]
        for b in range(3):
            terms.append(T * _pair(flux[c, b], *grads[b]))
            absterms.append(np.abs(T) * _pair(np.abs(flux[c, b]), *[np.abs(g) for g in grads[b]]))
        if sources is not None:
            terms.append(T * _pair(sources[:, c], *val))
            absterms.append(np.abs(T) * _pair(np.abs(sources[:, c]), *val))
        res = float(np.sum(wt * sum(terms)) * vol)
        scale = float(np.sum(wt * sum(absterms)) * vol)
        rows.append((k, "vector", abs(res), abs(res) / scale if scale > 0 else abs(res)))
        k += 1
    return rows


def bank_boundary_values(mask: GridMask, bank: TestFunctionBank, t0: float, tf: float) -> float:
    """Largest test-function value at t0, tf and on outside cells (should be ~0)."""
    worst = 0.0
    out = ~mask.inside
    for test in bank.scalar:
        T, _ = test.time_factor(np.array([t0, tf]))
        worst = max(worst, float(np.max(np.abs(T))))
        (bx, _), (by, _), (bz, _) = test.space_factors(mask)
        phi = np.einsum("i,j,k->ijk", bx, by, bz)
        if out.any():
            worst = max(worst, float(np.max(np.abs(phi[out]))))
    return worst


def observed_order(errors, sizes) -> float:
    """Least-squares slope of log(error) against log(1/size)."""
    e = np.log(np.asarray(errors, float))
    s = np.log(1.0 / np.asarray(sizes, float))
    return float(-np.polyfit(s, e, 1)[0])


__all__ = [
    "DensityPath", "TestFunction", "TestFunctionBank", "bump", "bump_derivative",
    "continuity_residual", "curl_field", "discrete_curl", "divergence", "elliptic_energy",
    "helmholtz_split", "make_test_bank", "momentum_from_density", "neumann_gradient",
    "neumann_residual", "observed_order", "sample_density_path", "solve_elliptic_system",
    "solve_neumann", "trace_free_stress", "weak_residual",
]
