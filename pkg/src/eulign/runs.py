"""Run orchestration: scenario -> run directory, and the verification passes over run directories."""

from __future__ import annotations

import json
import logging
import platform
from dataclasses import replace
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__, hydro, particles
from .config import (Scenario, density_function, load, target_function, velocity_function)
from .construction import (continuity_residual, curl_field, make_test_bank, momentum_from_density,
                           sample_density_path, weak_residual)
from .energy import ENERGY_COLUMNS, check_inequality, gronwall_check, relative_energy
from .errors import ArgumentError
from .geometry import GridMask
from .hydro import FluidState, SolverOptions
from .kernels import source_fields
from .leaders import (LeaderPotential, LeaderSet, coupled_step, invariance_check,
                      l1_distance, simulate, steer_to_target)
from .snapshots import read_csv, read_snapshot, sha256, write_csv, write_snapshot

log = logging.getLogger("eulign")

SERIES_COLUMNS = ["t", "mass", "px", "py", "pz", "kinetic", "interaction", "floor_mass"]
TRAJ_COLUMNS = ["t", "id", "x", "y", "z", "vx", "vy", "vz"]
LEADER_COLUMNS = ["t", "id", "x", "y", "z", "vx", "vy", "vz", "fx", "fy", "fz"]


def configure_threads(n: int | None) -> int:
    if n is None:
        return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def _attach_log(out: Path):
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("eulign")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _detach_log(handler):
    logging.getLogger("eulign").removeHandler(handler)
    handler.close()


def solver_options(scen: Scenario) -> SolverOptions:
    floor = scen["hydro.floor"] or None
    return SolverOptions(cfl=scen["hydro.cfl"], floor=floor)


def initial_fluid(scen: Scenario, n: int | None = None) -> FluidState:
    mask = scen.mask(n)
    u0 = velocity_function(scen.config, scen.domain)
    return hydro.initial_state(mask, density_function(scen.config), u0, scen["t0"],
                               normalize=scen["initial.density.normalize"])


def _snapshot(out: Path, idx: int, state) -> None:
    write_snapshot(out / "snapshots" / f"snap_{idx:05d}.eulf", state.t, state.mask.h, state.rho, state.j)


def _series_row(state: FluidState, params) -> list:
    from .energy import energy

    pots = hydro.state_potentials(state, params)
    e = energy(state, pots)
    p = state.momentum()
    return [state.t, state.mass(), p[0], p[1], p[2], e["kinetic"], e["interaction"], state.floor_mass]


def _leader_rows(leaders: LeaderSet, t: float) -> list:
    f = leaders.schedule.at(min(t, leaders.schedule.breaks[-1]))
    return [[t, i, *leaders.xi[i], *leaders.ups[i], *f[i]] for i in range(leaders.k)]


def _fluid_loop(scen: Scenario, out: Path, coupled: bool):
    opts = solver_options(scen)
    params = scen.params
    state = initial_fluid(scen)
    leaders = scen.extras.get("leaders")
    coupling = scen.extras.get("coupling")
    dt_max = scen["hydro.dt"]
    interval = dt_max * scen["hydro.snapshot_stride"]
    t_end = scen["t0"] + scen["hydro.t_end"]
    series, lrows = [], []
    idx = 0

    def emit():
        nonlocal idx
        _snapshot(out, idx, state)
        p = params
        if coupled:
            p = replace(params, confinement=coupling.potential(leaders, params.confinement))
            lrows.extend(_leader_rows(leaders, state.t))
        series.append(_series_row(state, p))
        idx += 1

    emit()
    n_out = int(round(scen["hydro.t_end"] / interval))
    targets = [scen["t0"] + k * interval for k in range(1, n_out + 1)]
    if not targets or targets[-1] < t_end - 1e-12:
        targets.append(t_end)
    steps = 0
    for target in targets:
        while target - state.t > 1e-12:
            h = min(dt_max, 0.9 * hydro.stable_dt(state, opts), target - state.t)
            if coupled:
                state, leaders = coupled_step(state, leaders, params, coupling, h, opts)
            else:
                state = hydro.step(state, params, h, opts)
            steps += 1
        state.t = target
        if coupled:
            leaders.t = target
        emit()
    log.info("fluid run finished: %d steps, %d snapshots, final mass %.15f", steps, idx, state.mass())
    write_csv(out / "series.csv", SERIES_COLUMNS, series)
    if coupled:
        write_csv(out / "leaders.csv", LEADER_COLUMNS, lrows)
        spec = coupling.spec
        inside = bool(np.all([np.all((r[2:5] >= spec.lo - 1e-9) & (r[2:5] <= spec.hi + 1e-9))
                              for r in map(np.asarray, lrows)]))
        log.info("leaders stayed in the invariant region: %s", inside)


def _particle_loop(scen: Scenario, out: Path):
    params = scen.params
    cfg = scen.config
    u0 = velocity_function(cfg, scen.domain)
    if cfg["particles.init.velocity"] == "gaussian":
        mean = np.zeros(3)
        velocity = (mean, cfg["particles.init.sigma"] ** 2 * np.eye(3))
    else:
        velocity = u0
    ens = particles.sample_ensemble(scen.domain, cfg["particles.count"], cfg["particles.seed"],
                                    density_function(cfg), velocity)
    ens.t = cfg["t0"]
    mask = scen.mask()
    dt = cfg["particles.dt"]
    nsteps = int(round(cfg["particles.t_end"] / dt))
    traj, series = [], []
    idx = 0
    for step in range(nsteps + 1):
        if step % cfg["particles.trajectory_stride"] == 0 or step == nsteps:
            traj.extend([ens.t, i, *ens.x[i], *ens.v[i]] for i in range(ens.N))
        if step % cfg["particles.snapshot_stride"] == 0 or step == nsteps:
            rho, j = particles.deposit(ens, mask)
            write_snapshot(out / "snapshots" / f"snap_{idx:05d}.eulf", ens.t, mask.h, rho, j)
            p = ens.v.sum(axis=0) / ens.N
            series.append([ens.t, p[0], p[1], p[2], particles.velocity_diameter(ens.v)])
            idx += 1
        if step < nsteps:
            ens = particles.step(ens, params, dt, scen.domain)
            ens.t = cfg["t0"] + (step + 1) * dt
    write_csv(out / "trajectory.csv", TRAJ_COLUMNS, traj)
    write_csv(out / "series.csv", ["t", "px", "py", "pz", "velocity_diameter"], series)
    log.info("particle run finished: %d steps, N=%d", nsteps, ens.N)


def _construct(scen: Scenario, out: Path) -> dict:
    cfg = scen.config
    mask = scen.mask()
    base = density_function(cfg)
    eps = cfg["construct.epsilon"]
    T = cfg["construct.t_end"]
    t0 = cfg["t0"]
    lo = np.asarray(scen.domain.lo, float)
    ext = np.asarray(scen.domain.hi, float) - lo

    def rho_fn(t, p):
        q = (p - lo) / ext
        wave = np.prod(np.cos(np.pi * q), axis=1)
        return base(p) * (1.0 + eps * np.sin(2 * np.pi * (t - t0) / T) * wave)

    times = np.linspace(t0, t0 + T, cfg["construct.samples"])
    path = sample_density_path(mask, rho_fn, times)
    c = np.asarray(cfg["construct.v0.center"], float)
    R = cfg["construct.v0.radius"]
    direction = np.asarray(cfg["construct.v0.direction"], float)

    def potential(p):
        s2 = np.sum((p - c) ** 2, axis=1) / R**2
        b = np.where(s2 < 1, np.exp(-1.0 / (1.0 - np.minimum(s2, 1 - 1e-12))), 0.0)
        return b[:, None] * direction

    v0 = curl_field(mask, potential)
    j = momentum_from_density(path, v0)
    for m, t in enumerate(times):
        write_snapshot(out / "snapshots" / f"snap_{m:05d}.eulf", t, mask.h, path.rho[m], j[m])
    cres = continuity_residual(path, j)
    write_csv(out / "construct.csv", ["t", "continuity_residual"], zip(times, cres))
    bank = make_test_bank(mask, times[0], times[-1])
    rows = weak_residual(mask, times, path.rho, j, bank, None)
    scalar = [r for r in rows if r[1] == "scalar"]
    write_csv(out / "weak_residuals.csv", ["test_id", "kind", "absolute", "normalized"], scalar)
    summary = {"samples": len(times), "max_continuity_residual": float(cres.max()),
               "max_normalized_residual": float(max((r[3] for r in scalar), default=0.0)),
               "tests": len(scalar), "dropped_tests": bank.dropped,
               "v0_max": float(np.abs(v0).max())}
    (out / "construct.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def write_manifest(out: Path, scen: Scenario, threads: int) -> dict:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "run.log"):
            files[str(p.relative_to(out))] = sha256(p)
    manifest = {
        "eulign": __version__,
        "mode": scen.mode,
        "config_sha256": sha256(out / "config.toml"),
        "threads": threads,
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "numba": numba.__version__},
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run(scen: Scenario, out, threads: int | None = None) -> Path:
    out = Path(out)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    for old in (out / "snapshots").glob("*.eulf"):
        old.unlink()
    (out / "config.toml").write_text(scen.normalized_text())
    handler = _attach_log(out)
    try:
        n = configure_threads(threads)
        log.info("mode %s, config %s", scen.mode, sha256(out / "config.toml"))
        if scen.mode == "particles":
            _particle_loop(scen, out)
        elif scen.mode in ("hydro", "coupled"):
            _fluid_loop(scen, out, coupled=scen.mode == "coupled")
        else:
            _construct(scen, out)
        write_manifest(out, scen, n)
    except Exception as exc:
        log.error("run failed: %s", exc)
        raise
    finally:
        _detach_log(handler)
    return out


# ---------------------------------------------------------------- loading run directories

def load_run(run_dir):
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.toml"
    if not cfg_path.exists():
        raise ArgumentError(f"{run_dir} is not a run directory (config.toml missing)")
    scen = load(cfg_path)
    snaps = []
    for p in sorted((run_dir / "snapshots").glob("snap_*.eulf")):
        snaps.append(read_snapshot(p))
    return scen, snaps


def _states(scen: Scenario, snaps) -> list:
    if not snaps:
        raise ArgumentError("run directory holds no snapshots")
    mask = scen.mask()
    out = []
    for t, h, rho, j in snaps:
        if rho.shape != mask.shape or abs(h - mask.h) > 1e-14 * mask.h:
            raise ArgumentError("snapshot grid does not match the stored configuration")
        out.append(FluidState(t, rho, j, mask))
    return out


def _potential_params(scen: Scenario, run_dir: Path, states):
    """Model parameters per sample; coupled runs rebuild the leader wells from leaders.csv."""
    if scen.mode != "coupled":
        return [scen.params] * len(states)
    _, rows = read_csv(run_dir / "leaders.csv")
    coupling = scen.extras["coupling"]
    by_t = {}
    for r in rows:
        by_t.setdefault(float(r[0]), []).append([float(x) for x in r[2:5]])
    params = []
    for s in states:
        key = min(by_t, key=lambda t: abs(t - s.t))
        pot = LeaderPotential(tuple(map(tuple, by_t[key])), coupling.A, coupling.sigma, scen.params.confinement)
        params.append(replace(scen.params, confinement=pot))
    return params


def verify_energy(run_dir) -> dict:
    run_dir = Path(run_dir)
    scen, snaps = load_run(run_dir)
    states = _states(scen, snaps)
    plist = _potential_params(scen, run_dir, states)
    rep = check_inequality(states, plist, scen["energy.c_tol"])
    write_csv(run_dir / "energy.csv", ENERGY_COLUMNS, rep.rows())
    verdict = {"verdict": rep.verdict, "tol": rep.tol, "min_slack": float(rep.slack.min()),
               "max_abs_slack": float(np.abs(rep.slack).max()), "samples": len(states)}
    (run_dir / "energy_verdict.json").write_text(json.dumps(verdict, indent=2) + "\n")
    return verdict


def verify_weak(run_dir) -> dict:
    run_dir = Path(run_dir)
    scen, snaps = load_run(run_dir)
    states = _states(scen, snaps)
    mask = states[0].mask
    times = np.array([s.t for s in states])
    if len(times) < 3:
        raise ArgumentError("weak residuals need at least three snapshots")
    rho = np.stack([s.rho for s in states])
    j = np.stack([s.j for s in states])
    sources = None
    if scen.mode in ("hydro", "coupled"):
        plist = _potential_params(scen, run_dir, states)
        sources = np.stack([
            hydro.source(s, source_fields(mask, s.rho, s.j, p.kernels, p.confinement), p)
            for s, p in zip(states, plist)])
    bank = make_test_bank(mask, times[0], times[-1])
    rows = weak_residual(mask, times, rho, j, bank, sources)
    if scen.mode == "construct":
        rows = [r for r in rows if r[1] == "scalar"]
    write_csv(run_dir / "weak_residuals.csv", ["test_id", "kind", "absolute", "normalized"], rows)
    worst = max((r[3] for r in rows), default=0.0)
    verdict = {"verdict": "PASS" if worst <= scen["weak.tol"] else "FAIL", "max_normalized": worst,
               "tol": scen["weak.tol"], "tests": len(rows), "dropped_tests": bank.dropped}
    (run_dir / "weak_verdict.json").write_text(json.dumps(verdict, indent=2) + "\n")
    return verdict


def monte_carlo_budget(rho: np.ndarray, mask: GridMask, N: int) -> float:
    """Expected L1 error of an N-sample histogram: sqrt(2/pi) sum_cells sqrt(p (1 - p) / N)."""
    p = np.clip(rho * mask.h**3 * mask.inside, 0.0, 1.0)
    return float(np.sqrt(2.0 / np.pi) * np.sum(np.sqrt(p * (1.0 - p) / N)))


def compare(dir_a, dir_b) -> dict:
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    sa, snaps_a = load_run(dir_a)
    sb, snaps_b = load_run(dir_b)
    if not sa.mask().same_grid(sb.mask()):
        raise ArgumentError("runs use incompatible grids")
    A = _states(sa, snaps_a)
    B = _states(sb, snaps_b)
    pairs = []
    for a in A:
        match = [b for b in B if abs(b.t - a.t) <= 1e-9]
        if match:
            pairs.append((a, match[0]))
    if not pairs:
        raise ArgumentError("runs share no snapshot times")
    mask = A[0].mask
    if sa.mode == "particles" or sb.mode == "particles":
        part, fluid = (sa, sb) if sa.mode == "particles" else (sb, sa)
        N = part["particles.count"]
        rows = []
        for a, b in pairs:
            pa, fb = (a, b) if sa.mode == "particles" else (b, a)
            rows.append([a.t, l1_distance(pa.rho, fb.rho, mask), monte_carlo_budget(fb.rho, mask, N)])
        write_csv(dir_b / "compare.csv", ["t", "l1_density", "mc_budget"], rows)
        return {"kind": "moments", "max_l1": max(r[1] for r in rows), "rows": len(rows)}
    times = np.array([a.t for a, _ in pairs])
    E = np.array([relative_energy(a, b) for a, b in pairs])
    write_csv(dir_b / "relative_energy.csv", ["t", "relative_energy"], zip(times, E))
    res = gronwall_check(times, E, atol=sa["energy.atol"], c_cfg=sa["energy.c_cfg"]) if len(times) >= 5 else None
    out = {"kind": "relative_energy", "max_E": float(E.max()), "E0": float(E[0]),
           "C_fit": None if res is None else res.C_fit,
           "verdict": "PASS" if res is None and E.max() <= sa["energy.atol"] else (res.verdict if res else "FAIL")}
    (dir_b / "gronwall_verdict.json").write_text(json.dumps(out, indent=2) + "\n")
    return out


def steer(scen: Scenario, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(scen.normalized_text())
    leaders = scen.extras.get("leaders")
    coupling = scen.extras.get("coupling")
    if leaders is None:
        raise ArgumentError("steering needs leaders.count >= 1")
    fluid0 = initial_fluid(scen)
    mask = fluid0.mask
    tgt = np.asarray(target_function(scen.config)(mask.center_points()), float).reshape(mask.shape) * mask.inside
    tgt /= tgt[mask.inside].sum() * mask.h**3
    horizon = scen["hydro.t_end"]
    inv = invariance_check(coupling.spec)
    res = steer_to_target(fluid0, leaders, scen.params, coupling, tgt, horizon, scen["hydro.dt"],
                          budget=scen["steer.budget"], pieces=scen["steer.breakpoints"],
                          seed_schedule=leaders.schedule if scen["leaders.controls"] else None,
                          options=solver_options(scen))
    rows = []
    best = LeaderSet(leaders.xi, leaders.ups, res.schedule, leaders.t)
    rows.extend(_leader_rows(best, best.t))

    def record(fl, ld):
        rows.extend(_leader_rows(ld, fl.t))

    simulate(fluid0, best, scen.params, coupling, horizon, scen["hydro.dt"], solver_options(scen), record)
    write_csv(out / "leaders.csv", LEADER_COLUMNS, rows)
    report = {"achieved_l1": res.distance, "seed_l1": res.seed_distance,
              "improvement": 1.0 - res.distance / res.seed_distance if res.seed_distance > 0 else 0.0,
              "evaluations": res.evaluations, "breakpoints": res.schedule.breaks.tolist(),
              "controls": res.schedule.values.tolist(), "invariance": inv.verdict,
              "invariance_margin": inv.margin}
    (out / "steer_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report
