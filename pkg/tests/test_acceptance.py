"""Acceptance criteria 1-14, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import sympy as sp

import conftest
from eulign import construction as C
from eulign import hydro, particles
from eulign.energy import check_inequality, gronwall_check, relative_energy_series
from eulign.geometry import rasterize, reflect, signed_distance
from eulign.kernels import BESSEL, YUKAWA, KernelSpec, convolve, eval_kernel
from eulign.leaders import LeaderForceSpec, invariance_check, l1_distance, steer_to_target
from eulign.model import HarmonicConfinement, ModelParams
from scenarios import BOX, gaussian, perturbation, smooth_params, smooth_velocity, steering_scenario

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


def report(num, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def ball_center_value(n):
    m = rasterize(BOX, n)
    c = m.centers()
    r = np.linalg.norm(c - 0.5, axis=-1)
    out = convolve(m, (r < 0.3).astype(float), KernelSpec(YUKAWA, 1.0, 1.0))
    # n even: the centre is a vertex shared by eight cells; average them
    k = n // 2
    return float(out[k - 1:k + 1, k - 1:k + 1, k - 1:k + 1].mean())


def test_c01_yukawa_ball():
    t = time.perf_counter()
    exact = 4 * math.pi * (1 - math.exp(-0.3) * 1.3)
    assert exact == pytest.approx(FROZEN["yukawa_ball_center"], rel=1e-12)
    errs = {n: abs(ball_center_value(n) - exact) / exact for n in (32, 64)}
    dt = time.perf_counter() - t
    ok = errs[64] <= 0.015 and errs[64] < errs[32] and dt < 10
    assert report(1, ok, f"rel err n=32 {errs[32]:.4f}, n=64 {errs[64]:.4f} (tol 0.015), {dt:.1f} s")


def test_c02_bessel_order2():
    t = time.perf_counter()
    b = KernelSpec(BESSEL, 1.0, 2.0)
    y = KernelSpec(YUKAWA, 1.0 / (4 * math.pi), 1.0)
    r = np.geomspace(1e-3, 5.0, 400)
    kerr = float(np.max(np.abs(eval_kernel(b, r) / eval_kernel(y, r) - 1)))
    m = rasterize(BOX, 32)
    f = np.random.default_rng(0).random(m.shape)
    cb, cy = convolve(m, f, b), convolve(m, f, y)
    cerr = float(np.max(np.abs(cb - cy) / np.abs(cy)))
    dt = time.perf_counter() - t
    ok = kerr <= 1e-10 and cerr <= 1e-10 and dt < 5
    assert report(2, ok, f"kernel rel {kerr:.1e}, convolution rel {cerr:.1e} (tol 1e-10), {dt:.1f} s")


def test_c03_reflection():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    v = rng.normal(size=(10000, 3)) * 10 ** rng.uniform(-3, 3, size=(10000, 1))
    nu = rng.normal(size=(10000, 3))
    nu /= np.linalg.norm(nu, axis=1, keepdims=True)
    iso = dbl = 0.0
    for a, n in zip(v, nu):
        w = reflect(a, n)
        s = np.linalg.norm(a)
        iso = max(iso, abs(np.linalg.norm(w) - s) / s)
        dbl = max(dbl, np.max(np.abs(reflect(w, n) - a)) / s)
    dt = time.perf_counter() - t
    ok = iso <= 1e-14 and dbl <= 1e-14 and dt < 1
    assert report(3, ok, f"norm defect {iso:.1e}, double reflection {dbl:.1e} (tol 1e-14), {dt:.2f} s")


def test_c04_particle_momentum():
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    N = 500
    g = (np.arange(8) + 0.5) / 8 - 0.5
    lattice = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)[:N]
    x = 0.5 + 0.3 * lattice + 0.005 * rng.normal(size=(N, 3))
    v = 0.1 * rng.normal(size=(N, 3))
    ens = particles.ParticleEnsemble(x, v)
    p = ModelParams(alignment=KernelSpec(YUKAWA, 1.0, 2.0, "alignment"),
                    cohesion=KernelSpec(YUKAWA, -0.5, 1.0, "cohesion"),
                    repulsion=KernelSpec(YUKAWA, 0.05, 4.0, "repulsion"))
    P0 = ens.v.sum(axis=0) / N
    worst = 0.0
    clearance = np.inf
    for _ in range(100):
        ens = particles.step(ens, p, 1e-3, BOX)
        P1 = ens.v.sum(axis=0) / N
        worst = max(worst, float(np.max(np.abs(P1 - P0))))
        P0 = P1
        clearance = min(clearance, float(-signed_distance(BOX, ens.x).max()))
    dt = time.perf_counter() - t
    ok = worst <= 1e-10 and clearance > 0.05 and dt < 30
    assert report(4, ok, f"max momentum drift per step {worst:.1e} (tol 1e-10), wall clearance {clearance:.2f}, {dt:.1f} s")


def test_c05_alignment_contraction():
    rng = np.random.default_rng(5)
    N = 200
    d = rng.normal(size=(N, 3))
    x = 0.5 + 0.15 * d / np.linalg.norm(d, axis=1, keepdims=True) * rng.random((N, 1)) ** (1 / 3)
    v = 0.03 * rng.normal(size=(N, 3))
    ens = particles.ParticleEnsemble(x, v)
    p = ModelParams(alignment=KernelSpec(YUKAWA, 1.0, 1.0, "alignment"))
    diam = [particles.velocity_diameter(ens.v)]
    clearance = np.inf
    for _ in range(2000):
        ens = particles.step(ens, p, 1e-3, BOX)
        diam.append(particles.velocity_diameter(ens.v))
        clearance = min(clearance, float(-signed_distance(BOX, ens.x).max()))
    rise = float(np.max(np.diff(diam)))
    ok = rise <= 1e-12 and clearance > 0
    assert report(5, ok, f"max diameter increase {rise:.1e} (tol 1e-12), diameter {diam[0]:.3f} -> {diam[-1]:.3f}")


def test_c06_propulsion_equilibrium():
    ens = particles.ParticleEnsemble(np.array([[0.5, 0.5, 0.5]]), np.array([[0.3, 0.4, 0.0]]) * 1.0)
    p = ModelParams(kappa_p=2.0)
    for _ in range(10000):
        ens = particles.step(ens, p, 1e-3, BOX)
    s = float(np.linalg.norm(ens.v[0]))
    ref = FROZEN["propulsion_speed_T10"]
    ok = abs(s - 1) < 1e-4 and abs(s - ref) < 1e-4
    assert report(6, ok, f"|v(10)| = {s:.10f}, ODE reference {ref:.10f} (tol 1e-4)")


def test_c07_hydro_conservation():
    t = time.perf_counter()
    m = rasterize(BOX, 48)
    s = hydro.initial_state(m, gaussian((0.5, 0.5, 0.5), 0.12, 0.2), smooth_velocity)
    # no cohesion: the blob stays smooth instead of collapsing to a concentration
    p = ModelParams(alignment=KernelSpec(YUKAWA, 0.5, 2.0, "alignment"),
                    repulsion=KernelSpec(YUKAWA, 0.2, 4.0, "repulsion"), confinement=HarmonicConfinement(0.5))
    peak = 0.0
    for _ in range(500):
        s = hydro.step(s, p, min(0.005, 0.9 * hydro.stable_dt(s)))
        peak = max(peak, float(s.rho.max()))
    mass = abs(s.mass() - 1)
    sym_x = max(np.abs(s.rho - s.rho[::-1]).max(), np.abs(s.j[0] + s.j[0][::-1]).max(),
                np.abs(s.j[1] - s.j[1][::-1]).max(), np.abs(s.j[2] - s.j[2][::-1]).max())
    sym_y = max(np.abs(s.rho - s.rho[:, ::-1]).max(), np.abs(s.j[1] + s.j[1][:, ::-1]).max(),
                np.abs(s.j[0] - s.j[0][:, ::-1]).max())
    dt = time.perf_counter() - t
    ok = mass <= 1e-11 and max(sym_x, sym_y) <= 1e-10 and dt < 120
    assert report(7, ok, f"|mass-1| {mass:.1e} (tol 1e-11), mirror defect x {sym_x:.1e} y {sym_y:.1e} "
                         f"(tol 1e-10), t = {s.t:.3f}, "
                         f"max rho {peak:.1f}, {dt:.0f} s")


X, Y, Z = sp.symbols("x y z")


def _lamb(expr):
    f = sp.lambdify((X, Y, Z), expr, "numpy")
    return lambda c: np.broadcast_to(f(c[..., 0], c[..., 1], c[..., 2]), c.shape[:-1]).astype(float)


def test_c08_neumann_manufactured():
    t = time.perf_counter()
    phi = sp.cos(sp.pi * X) * sp.cos(sp.pi * Y) * sp.cos(sp.pi * Z)
    g = -sum(sp.diff(phi, v, 2) for v in (X, Y, Z))
    fphi, fg = _lamb(phi), _lamb(g)
    errs, hs = [], []
    for n in (16, 32, 64):
        m = rasterize(BOX, n)
        c = m.centers()
        sol = C.solve_neumann(m, fg(c))
        errs.append(float(np.sqrt(np.mean((sol - fphi(c)) ** 2))))
        hs.append(m.h)
    order = C.observed_order(errs, hs)
    dt = time.perf_counter() - t
    ok = order >= 1.9 and dt < 30
    assert report(8, ok, f"L2 errors {', '.join(f'{e:.2e}' for e in errs)}, order {order:.2f} (min 1.9), {dt:.1f} s")


def test_c09_elliptic_manufactured():
    t = time.perf_counter()
    s = sp.sin(sp.pi * X) * sp.sin(sp.pi * Y) * sp.sin(sp.pi * Z)
    w = [s, -s, sp.sin(2 * sp.pi * X) * sp.sin(sp.pi * Y) * sp.sin(sp.pi * Z)]
    V = (X, Y, Z)
    grad = [[sp.diff(w[a], V[b]) for b in range(3)] for a in range(3)]
    div = sum(grad[a][a] for a in range(3))
    M = [[grad[a][b] + grad[b][a] - (sp.Rational(2, 3) * div if a == b else 0) for b in range(3)] for a in range(3)]
    S = [-sum(sp.diff(M[a][b], V[b]) for b in range(3)) for a in range(3)]
    fw, fS = [_lamb(e) for e in w], [_lamb(sp.simplify(e)) for e in S]
    errs, hs = [], []
    exact_struct = True
    for n in (16, 32, 64):
        m = rasterize(BOX, n)
        c = m.centers()
        wn, Mn = C.solve_elliptic_system(m, np.stack([f(c) for f in fS]))
        errs.append(float(np.sqrt(np.mean(sum((wn[a] - fw[a](c)) ** 2 for a in range(3))))))
        hs.append(m.h)
        exact_struct &= bool(np.array_equal(Mn, Mn.transpose(1, 0, 2, 3, 4)))
        exact_struct &= bool(np.all(Mn[0, 0] + Mn[1, 1] + Mn[2, 2] == 0))
    order = C.observed_order(errs, hs)
    dt = time.perf_counter() - t
    ok = order >= 1.9 and exact_struct and dt < 60
    assert report(9, ok, f"L2 errors {', '.join(f'{e:.2e}' for e in errs)}, order {order:.2f} (min 1.9), "
                         f"M symmetric and trace-free exactly: {exact_struct}, {dt:.1f} s")


def _bump_potential(center, radius, direction):
    c = np.asarray(center, float)
    d = np.asarray(direction, float)

    def A(p):
        s2 = np.sum((p - c) ** 2, axis=1) / radius**2
        b = np.where(s2 < 1, np.exp(-1 / (1 - np.minimum(s2, 1 - 1e-12))), 0.0)
        return b[:, None] * d
    return A


def test_c10_non_uniqueness():
    rho_fn = lambda t, p: 1 + 0.3 * np.sin(2 * np.pi * t) * np.prod(np.cos(np.pi * p), axis=1)
    A1 = _bump_potential((0.45, 0.5, 0.55), 0.3, (0, 0, 1))
    A2 = _bump_potential((0.55, 0.5, 0.45), 0.25, (1, 0.5, 0))
    res = {1: [], 2: []}
    hs, gaps = [], []
    same_path = True
    for n, M in ((12, 9), (24, 17), (48, 33)):
        m = rasterize(BOX, n)
        times = np.linspace(0, 1, M)
        path = C.sample_density_path(m, rho_fn, times)
        bank = C.make_test_bank(m, 0.0, 1.0)
        js = {}
        for k, A in ((1, A1), (2, A2)):
            js[k] = C.momentum_from_density(path, C.curl_field(m, A))
            rows = C.weak_residual(m, times, path.rho, js[k], bank)
            res[k].append(max(r[3] for r in rows if r[1] == "scalar"))
        gaps.append(float(np.abs(js[1] - js[2]).max()))
        same_path &= bool(np.allclose(C.continuity_residual(path, js[1]), C.continuity_residual(path, js[2]),
                                      atol=1e-12))
        hs.append(m.h)
    o1, o2 = C.observed_order(res[1], hs), C.observed_order(res[2], hs)
    ok = o1 >= 1.5 and o2 >= 1.5 and min(gaps) > 0.1 and same_path
    assert report(10, ok, f"weak residual orders {o1:.2f}, {o2:.2f} (min 1.5), "
                          f"min ||j1-j2||_inf {min(gaps):.2f}, shared density path: {same_path}")


def _hydro_run(n, dt, T, u0, params):
    m = rasterize(BOX, n)
    s = hydro.initial_state(m, gaussian((0.5, 0.5, 0.5), 0.15, 0.3), u0)
    out = [s]
    for _ in range(int(round(T / dt))):
        s = hydro.step(s, params, dt)
        out.append(s)
    return out


def test_c11_energy_inequality():
    p = smooth_params()
    slack = []
    verdicts = []
    for n, dt in ((24, 0.01), (48, 0.005)):
        rep = check_inequality(_hydro_run(n, dt, 0.4, smooth_velocity, p), p)
        verdicts.append(rep.verdict)
        slack.append(float(np.abs(rep.slack).max()))
    ratio = slack[0] / slack[1]
    ok = verdicts == ["PASS", "PASS"] and ratio >= 1.5
    assert report(11, ok, f"verdicts {verdicts}, max|slack| {slack[0]:.2e} -> {slack[1]:.2e}, "
                          f"ratio {ratio:.2f} (min 1.5)")


def test_c12_weak_strong():
    p = smooth_params()
    base = _hydro_run(24, 0.01, 0.5, smooth_velocity, p)
    again = _hydro_run(24, 0.01, 0.5, smooth_velocity, p)
    _, e_same = relative_energy_series(again, base)
    fits = {}
    for d in (1e-2, 1e-3):
        pert = _hydro_run(24, 0.01, 0.5, lambda x, d=d: smooth_velocity(x) + d * perturbation(x), p)
        t, e = relative_energy_series(pert, base)
        fits[d] = (e[0], gronwall_check(t, e))
    ratio = fits[1e-2][0] / fits[1e-3][0]
    C1, C2 = fits[1e-2][1].C_fit, fits[1e-3][1].C_fit
    spread = abs(C1 - C2) / max(abs(C1), abs(C2))
    ok = (e_same.max() <= 1e-12 and abs(ratio - 100) <= 10 and fits[1e-2][1].passed and fits[1e-3][1].passed
          and spread <= 0.2)
    assert report(12, ok, f"identical runs max E {e_same.max():.1e}; E(t0) ratio {ratio:.2f} (100 +- 10); "
                          f"Gronwall {fits[1e-2][1].verdict}/{fits[1e-3][1].verdict}, C_fit {C1:.3f}/{C2:.3f} "
                          f"(spread {spread:.1%}, max 20%)")


def test_c13_monokinetic():
    t0 = time.perf_counter()
    rho0 = gaussian((0.5, 0.5, 0.5), 0.15, 0.3)
    u0 = lambda p: np.stack([0.3 * np.sin(2 * np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1]) * np.sin(np.pi * p[:, 2]),
                             0 * p[:, 0], 0 * p[:, 0]], axis=1)
    params = ModelParams(alignment=KernelSpec(YUKAWA, 0.5, 2.0, "alignment"))
    T, dt, N = 0.5, 0.01, 10000
    ens = particles.sample_ensemble(BOX, N, 0, rho0, u0)
    for _ in range(int(round(T / dt))):
        ens = particles.step(ens, params, dt, BOX)
    fluid = {}
    for n in (16, 32):
        s = hydro.initial_state(rasterize(BOX, n), rho0, u0)
        while T - s.t > 1e-12:
            s = hydro.step(s, params, min(dt, 0.9 * hydro.stable_dt(s), T - s.t))
        fluid[n] = s
    m = fluid[32].mask
    rho_p, _ = particles.deposit(ens, m)
    coarse = np.repeat(np.repeat(np.repeat(fluid[16].rho, 2, 0), 2, 1), 2, 2)
    l1 = l1_distance(rho_p, fluid[32].rho, m)
    prob = np.clip(fluid[32].rho * m.h**3, 0, 1)
    mc = float(np.sqrt(2 / np.pi) * np.sum(np.sqrt(prob * (1 - prob) / N)))
    disc = l1_distance(coarse, fluid[32].rho, m)
    elapsed = time.perf_counter() - t0
    ok = l1 <= 3 * (mc + disc) and elapsed < 180
    assert report(13, ok, f"L1 {l1:.3f} <= 3 x (MC {mc:.3f} + discretization {disc:.3f}) = {3 * (mc + disc):.3f}, "
                          f"{elapsed:.0f} s")


def test_c14_leaders():
    t0 = time.perf_counter()
    inv = invariance_check(LeaderForceSpec())
    sc = steering_scenario()
    res = steer_to_target(sc["fluid"], sc["leaders"], sc["params"], sc["coupling"], sc["target"], sc["horizon"],
                          sc["dt"], budget=40, pieces=4)
    gain = 1 - res.distance / res.seed_distance
    baseline_ok = res.seed_distance == pytest.approx(FROZEN["steering_l1"]["uncontrolled"], rel=1e-8)
    elapsed = time.perf_counter() - t0
    ok = inv.passed and gain >= 0.25 and baseline_ok and elapsed < 600
    assert report(14, ok, f"invariance {inv.verdict} (margin {inv.margin:.3f}); L1 {res.seed_distance:.3f} -> "
                          f"{res.distance:.3f}, gain {gain:.1%} (min 25%) in {res.evaluations} runs, {elapsed:.0f} s")
