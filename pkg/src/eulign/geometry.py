"""Bounded domains (box minus spherical obstacles), wall reflections and grid masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError, PreconditionError


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned box with rounded edges, minus closed balls.

    ``smoothing`` is the edge/corner rounding radius of the box. Obstacles
    must keep a clearance of at least two smoothing radii to the box walls,
    so the boundaries never touch and the plain max-combination of the
    distance functions is already smooth.
    """

    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    obstacles: tuple[Obstacle, ...] = ()
    smoothing: float = 0.0

    def __post_init__(self):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise DomainError("box corners must be 3-vectors")
        if np.any(hi <= lo):
            raise DomainError(f"empty box: lo={self.lo}, hi={self.hi}")
        if self.smoothing < 0 or self.smoothing >= 0.5 * float(np.min(hi - lo)):
            raise DomainError(f"smoothing radius {self.smoothing} out of range")
        for k, ob in enumerate(self.obstacles):
            if ob.radius <= 0:
                raise DomainError(f"obstacle {k}: radius must be positive")
            clearance = -_box_sd(self, np.asarray(ob.center, float)) - ob.radius
            need = 2.0 * self.smoothing
            if clearance <= need or (need == 0.0 and clearance <= 0.0):
                raise DomainError(
                    f"obstacle {k} must lie strictly inside the box with clearance "
                    f"> {need:g} (got {clearance:g})"
                )

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.subtract(self.hi, self.lo)))

    @property
    def volume(self) -> float:
        """Analytic Lebesgue measure of D."""
        ext = np.subtract(self.hi, self.lo)
        s = self.smoothing
        box = float(np.prod(ext))
        if s > 0:
            # rounded box: shrunk box dilated by a ball of radius s (Steiner formula)
            a, b, c = ext - 2 * s
            box = a * b * c + 2 * s * (a * b + b * c + a * c) + np.pi * s**2 * (a + b + c) + 4.0 / 3.0 * np.pi * s**3
        return box - sum(4.0 / 3.0 * np.pi * ob.radius**3 for ob in self.obstacles)


def _box_sd(domain: DomainSpec, p: np.ndarray) -> np.ndarray:
    lo = np.asarray(domain.lo, float)
    hi = np.asarray(domain.hi, float)
    s = domain.smoothing
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) - s
    q = np.abs(p - c) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside - s


def signed_distance(domain: DomainSpec, p) -> np.ndarray | float:
    """Signed distance to the boundary: negative in D, zero on the wall, positive outside.

    Accepts a single point or an array of points with trailing dimension 3.
    """
    p = np.asarray(p, float)
    d = _box_sd(domain, p)
    for ob in domain.obstacles:
        d = np.maximum(d, ob.radius - np.linalg.norm(p - np.asarray(ob.center, float), axis=-1))
    return float(d) if d.ndim == 0 else d


def sd_gradient(domain: DomainSpec, p) -> np.ndarray:
    """Analytic gradient of :func:`signed_distance` (unit length off the medial axis)."""
    p = np.atleast_2d(np.asarray(p, float))
    lo = np.asarray(domain.lo, float)
    hi = np.asarray(domain.hi, float)
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) - domain.smoothing
    rel = p - c
    sgn = np.where(rel >= 0, 1.0, -1.0)
    q = np.abs(rel) - half
    qp = np.maximum(q, 0.0)
    out_norm = np.linalg.norm(qp, axis=1)
    grad = np.zeros_like(p)
    outside = out_norm > 0
    grad[outside] = sgn[outside] * qp[outside] / out_norm[outside, None]
    ins = ~outside
    if np.any(ins):
        k = np.argmax(q[ins], axis=1)
        g = np.zeros((int(ins.sum()), 3))
        g[np.arange(len(k)), k] = sgn[ins][np.arange(len(k)), k]
        grad[ins] = g
    d = _box_sd(domain, p)
    for ob in domain.obstacles:
        off = p - np.asarray(ob.center, float)
        r = np.linalg.norm(off, axis=1)
        dob = ob.radius - r
        active = dob > d
        safe = np.where(r > 0, r, 1.0)
        grad[active] = -off[active] / safe[active, None]
        d = np.maximum(d, dob)
    return grad


def outward_normal(domain: DomainSpec, p) -> np.ndarray:
    """Unit outward normal of D at a boundary point (points into obstacles)."""
    p = np.asarray(p, float)
    tol = 1e-9 * domain.diagonal
    if abs(signed_distance(domain, p)) > tol:
        raise PreconditionError(f"point {p.tolist()} is not on the boundary")
    g = sd_gradient(domain, p)[0]
    return g / np.linalg.norm(g)


def reflect(v, nu) -> np.ndarray:
    """Specular reflection (I - 2 nu nu^T) v."""
    v = np.asarray(v, float)
    nu = np.asarray(nu, float)
    if abs(np.linalg.norm(nu) - 1.0) > 1e-12:
        raise PreconditionError("reflection normal must be a unit vector")
    return v - 2.0 * np.dot(v, nu) * nu


def first_boundary_hit(domain: DomainSpec, x, v, dt_max: float, min_step: float | None = None):
    """Earliest wall crossing of the ray x + t v for t in (0, dt_max].

    Marches with steps bounded below by the distance to the wall (the signed
    distance is 1-Lipschitz, so no crossing is skipped while |sd| exceeds
    ``min_step``), then bisects the bracketing interval down to 1e-12 of the
    box diagonal. Returns ``None`` or ``(t, x_hit, normal)``; ``x_hit`` is the
    last bracket point inside cl D.
    """
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    diag = domain.diagonal
    if signed_distance(domain, x) > 1e-9 * diag:
        raise PreconditionError(f"start point {x.tolist()} lies outside the domain")
    speed = float(np.linalg.norm(v))
    if speed == 0.0 or dt_max <= 0.0:
        return None
    if min_step is None:
        min_step = 1e-3 * diag
    t_prev = 0.0
    t = 0.0
    while True:
        d = signed_distance(domain, x + t * v)
        if d > 0.0:
            break
        if t >= dt_max:
            return None
        t_prev = t
        t = min(t + max(-d, min_step) / speed, dt_max)
    lo, hi = t_prev, t
    tol = 1e-12 * diag / speed
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if signed_distance(domain, x + mid * v) > 0.0:
            hi = mid
        else:
            lo = mid
    t_hit = lo if lo > 0.0 else hi
    x_hit = x + t_hit * v
    nu = sd_gradient(domain, x_hit)[0]
    return t_hit, x_hit, nu / np.linalg.norm(nu)


@dataclass
class GridMask:
    """Cell-centred raster of D.

    Cell ``(i, j, k)`` has centre ``origin + (idx + 0.5) * h``. Arrays are
    indexed ``[i, j, k]`` with ``i`` along x; flattening in Fortran order gives
    the x-fastest layout used by snapshot files.
    """

    h: float
    origin: np.ndarray
    inside: np.ndarray
    boundary_cells: np.ndarray = field(repr=False)
    boundary_normals: np.ndarray = field(repr=False)
    domain: DomainSpec | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.inside.shape

    @property
    def cell_volume(self) -> float:
        return self.h**3

    @property
    def volume(self) -> float:
        return float(self.inside.sum()) * self.h**3

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.shape[axis]) + 0.5) * self.h

    def centers(self) -> np.ndarray:
        """Cell centres, shape ``shape + (3,)``."""
        xs = [self.axis_centers(a) for a in range(3)]
        return np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1)

    def center_points(self) -> np.ndarray:
        """Cell centres flattened to shape (cells, 3); cached."""
        pts = self.__dict__.get("_center_points")
        if pts is None:
            pts = self.centers().reshape(-1, 3)
            pts.flags.writeable = False
            self.__dict__["_center_points"] = pts
        return pts

    def same_grid(self, other: "GridMask") -> bool:
        return (
            self.shape == other.shape
            and self.h == other.h
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.inside, other.inside)
        )


def rasterize(domain: DomainSpec, n: int) -> GridMask:
    """Rasterize D with ``n`` cells along the longest box axis."""
    if n < 8:
        raise PreconditionError(f"need at least 8 cells per axis, got {n}")
    lo = np.asarray(domain.lo, float)
    ext = np.asarray(domain.hi, float) - lo
    h = float(np.max(ext)) / n
    shape = tuple(int(np.ceil(e / h - 1e-9)) for e in ext)
    mask = GridMask(h, lo.copy(), np.zeros(shape, bool), np.zeros((0, 3), int), np.zeros((0, 3)), domain)
    centers = mask.centers()
    inside = signed_distance(domain, centers.reshape(-1, 3)).reshape(shape) < 0.0
    if not inside.any():
        raise DomainError(f"domain interior is empty at resolution n={n}")
    _, ncomp = ndimage.label(inside)
    if ncomp != 1:
        raise DomainError(f"domain interior splits into {ncomp} components at resolution n={n}")
    padded = np.pad(inside, 1, constant_values=False)
    all_nb = np.ones(shape, bool)
    for axis in range(3):
        for s in (-1, 1):
            all_nb &= np.roll(padded, s, axis=axis)[1:-1, 1:-1, 1:-1]
    bcells = np.argwhere(inside & ~all_nb)
    bnormals = sd_gradient(domain, centers[tuple(bcells.T)]) if len(bcells) else np.zeros((0, 3))
    mask.inside = inside
    mask.boundary_cells = bcells
    mask.boundary_normals = bnormals
    return mask
