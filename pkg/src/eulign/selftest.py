"""Quick kernel and geometry property checks for ``eulign selftest``."""

from __future__ import annotations

import math

import numpy as np

from .geometry import DomainSpec, Obstacle, outward_normal, rasterize, reflect, sd_gradient, signed_distance
from .kernels import BESSEL, YUKAWA, KernelSpec, convolve, eval_kernel


def _ball_potential(n: int) -> float:
    mask = rasterize(DomainSpec(), n)
    pts = mask.centers()
    r = np.linalg.norm(pts - 0.5, axis=-1)
    f = (r < 0.3).astype(float)
    out = convolve(mask, f, KernelSpec(YUKAWA, 1.0, 1.0))
    c = np.unravel_index(np.argmin(r), r.shape)
    return float(out[c])


def check_yukawa_ball(n: int = 32):
    exact = 4 * math.pi * (1 - math.exp(-0.3) * 1.3)
    err = abs(_ball_potential(n) - exact) / exact
    return err < 0.05, f"relative error {err:.3e} at n={n}"


def check_bessel_equivalence(n: int = 16, seed: int = 0):
    rng = np.random.default_rng(seed)
    r = np.linspace(0.01, 2.0, 200)
    b = KernelSpec(BESSEL, 1.0, 2.0)
    y = KernelSpec(YUKAWA, 1.0 / (4 * math.pi), 1.0)
    kerr = float(np.max(np.abs(eval_kernel(b, r) - eval_kernel(y, r)) / np.abs(eval_kernel(y, r))))
    mask = rasterize(DomainSpec(), n)
    f = rng.random(mask.shape)
    cb, cy = convolve(mask, f, b), convolve(mask, f, y)
    cerr = float(np.max(np.abs(cb - cy)) / np.max(np.abs(cy)))
    return max(kerr, cerr) < 1e-10, f"kernel {kerr:.2e}, convolution {cerr:.2e}"


def check_reflection(samples: int = 2000, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        v = rng.normal(size=3) * 10 ** rng.uniform(-3, 3)
        nu = rng.normal(size=3)
        nu /= np.linalg.norm(nu)
        w = reflect(v, nu)
        nv = np.linalg.norm(v)
        worst = max(worst, abs(np.linalg.norm(w) - nv) / nv, np.max(np.abs(reflect(w, nu) - v)) / nv)
    return worst <= 1e-14, f"worst relative deviation {worst:.2e}"


def check_normals(samples: int = 500, seed: int = 0):
    dom = DomainSpec(smoothing=0.05, obstacles=(Obstacle((0.5, 0.5, 0.5), 0.15),))
    rng = np.random.default_rng(seed)
    p = rng.random((samples, 3))
    g = sd_gradient(dom, p)
    eps = 1e-6
    fd = np.stack([(signed_distance(dom, p + eps * e) - signed_distance(dom, p - eps * e)) / (2 * eps)
                   for e in np.eye(3)], axis=1)
    err = float(np.max(np.abs(g - fd)))
    n = outward_normal(dom, np.array([[0.0, 0.5, 0.5]]))
    ok = err < 1e-5 and np.allclose(n, [[-1.0, 0.0, 0.0]])
    return ok, f"max gradient deviation {err:.2e}"


def check_volume(n: int = 48):
    dom = DomainSpec(smoothing=0.1, obstacles=(Obstacle((0.5, 0.5, 0.5), 0.2),))
    mask = rasterize(dom, n)
    err = abs(mask.volume - dom.volume) / dom.volume
    return err < 0.02, f"raster volume error {err:.2e}"


CHECKS = {
    "kernel.yukawa_ball": check_yukawa_ball,
    "kernel.bessel_order2": check_bessel_equivalence,
    "geometry.reflection": check_reflection,
    "geometry.normals": check_normals,
    "geometry.volume": check_volume,
}


def run_all():
    out = []
    for name, fn in CHECKS.items():
        ok, detail = fn()
        out.append((name, bool(ok), detail))
    return out
