"""Energy balance, relaxed energy inequality and relative-energy diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .hydro import FluidState, state_potentials
from .kernels import PotentialSet
from .model import ModelParams


def _speed2_over_rho(state: FluidState):
    ins = state.mask.inside
    safe = np.where(ins, state.rho, 1.0)
    return np.sum(state.j * state.j, axis=0) / safe * ins


def energy(state: FluidState, pots: PotentialSet) -> dict:
    """Kinetic 1/2 int |j|^2/rho and interaction 1/2 int rho (v_c + v_r), midpoint rule."""
    vol = state.mask.h**3
    ins = state.mask.inside
    kinetic = 0.5 * float(np.sum(_speed2_over_rho(state)) * vol)
    ic = 0.5 * float(np.sum(state.rho * pots.v_c * ins) * vol)
    ir = 0.5 * float(np.sum(state.rho * pots.v_r * ins) * vol)
    return {"kinetic": kinetic, "interaction_c": ic, "interaction_r": ir,
            "interaction": ic + ir, "total": kinetic + ic + ir}


def kinetic_from_velocity(state: FluidState) -> float:
    """1/2 sum rho |u|^2 h^3, the kinetic energy computed through u."""
    u = state.u
    return 0.5 * float(np.sum(state.rho * np.sum(u * u, axis=0) * state.mask.inside) * state.mask.h**3)


def energy_rhs(state: FluidState, pots: PotentialSet, params: ModelParams) -> dict:
    """Right-hand side of the energy balance, term by term.

    alignment   int j.pi_j - |j|^2/rho pi_rho
    confinement -int j.grad U
    propulsion  kappa_p int |j|^2/rho (1 - P(|j|/rho))
    """
    vol = state.mask.h**3
    ins = state.mask.inside
    j = state.j
    e2 = _speed2_over_rho(state)
    align = float(np.sum((np.sum(j * pots.pi_j, axis=0) - e2 * pots.pi_rho) * ins) * vol)
    conf = -float(np.sum(np.sum(j * pots.grad_U, axis=0) * ins) * vol)
    prop = 0.0
    if params.kappa_p:
        safe = np.where(ins, state.rho, 1.0)
        speed = np.sqrt(np.sum(j * j, axis=0)) / safe
        prop = params.kappa_p * float(np.sum(e2 * (1.0 - params.P(speed)) * ins) * vol)
    return {"alignment": align, "confinement": conf, "propulsion": prop, "total": align + conf + prop}


def _trapezoid_cumulative(t, y):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * np.diff(t) * (y[1:] + y[:-1]))
    return out


@dataclass
class EnergyReport:
    times: np.ndarray
    kinetic: np.ndarray
    interaction: np.ndarray
    rhs: dict
    slack: np.ndarray
    tol: float
    verdict: str
    columns: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def rows(self):
        """(t, kinetic, interaction, alignment, confinement, propulsion, rhs, slack) per sample."""
        for m, t in enumerate(self.times):
            yield (float(t), float(self.kinetic[m]), float(self.interaction[m]),
                   float(self.rhs["alignment"][m]), float(self.rhs["confinement"][m]),
                   float(self.rhs["propulsion"][m]), float(self.rhs["total"][m]), float(self.slack[m]))


ENERGY_COLUMNS = ["t", "kinetic", "interaction", "alignment", "confinement", "propulsion", "rhs", "slack"]


def check_inequality(states, params, c_tol: float = 10.0, pots=None) -> EnergyReport:
    """Relaxed energy inequality along a uniformly sampled trajectory.

    ``params`` is one ModelParams or one per sample (time-dependent confinement).

    slack(tau) = int_{t0}^{tau} rhs dt - [E(tau) - E(t0)] (trapezoid rule).
    PASS iff slack >= -tol at every sample, with
    tol = c_tol (h + dt) * (max |E| + int |rhs| dt).
    """
    states = list(states)
    if len(states) < 3:
        raise ArgumentError("energy check needs at least three samples")
    mask = states[0].mask
    if any(not s.mask.same_grid(mask) for s in states):
        raise ArgumentError("trajectory samples live on different grids")
    times = np.array([s.t for s in states])
    if np.any(np.diff(times) <= 0):
        raise ArgumentError("sample times must increase")
    plist = [params] * len(states) if isinstance(params, ModelParams) else list(params)
    if len(plist) != len(states):
        raise ArgumentError("need one parameter set per sample")
    if pots is None:
        pots = [state_potentials(s, p) for s, p in zip(states, plist)]
    comps = [energy(s, p) for s, p in zip(states, pots)]
    rhs_terms = [energy_rhs(s, pt, p) for s, pt, p in zip(states, pots, plist)]
    kin = np.array([c["kinetic"] for c in comps])
    inter = np.array([c["interaction"] for c in comps])
    E = kin + inter
    rhs = {k: np.array([r[k] for r in rhs_terms]) for k in rhs_terms[0]}
    slack = _trapezoid_cumulative(times, rhs["total"]) - (E - E[0])
    dt = float(np.mean(np.diff(times)))
    scale = float(np.max(np.abs(E)) + _trapezoid_cumulative(times, np.abs(rhs["total"]))[-1])
    tol = c_tol * (mask.h + dt) * scale
    verdict = "PASS" if np.all(slack >= -tol) else "FAIL"
    return EnergyReport(times, kin, inter, rhs, slack, tol, verdict, ENERGY_COLUMNS)


def relative_energy(a: FluidState, b: FluidState) -> float:
    """1/2 sum rho_a |u_a - u_b|^2 h^3, with the density taken from ``a``."""
    if not a.mask.same_grid(b.mask):
        raise ArgumentError("relative energy needs states on the same grid")
    du = a.u - b.u
    return 0.5 * float(np.sum(a.rho * np.sum(du * du, axis=0) * a.mask.inside) * a.mask.h**3)


@dataclass
class GronwallResult:
    C_fit: float
    verdict: str
    max_violation: float

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"


def gronwall_check(times, E, atol: float = 1e-14, c_cfg: float = 1.0, slack: float = 0.1) -> GronwallResult:
    """Exponential bound E(t) <= E(t0) exp(C (t - t0)) (1 + slack).

    C is the slope of the least-squares line through (t, log E). When
    E(t0) <= atol the check becomes E(t) <= atol exp(c_cfg (t - t0)).
    ``max_violation`` is max E / bound (PASS iff <= 1).
    """
    t = np.asarray(times, float)
    E = np.asarray(E, float)
    if len(t) < 5 or len(E) != len(t):
        raise ArgumentError("Gronwall check needs at least five samples")
    if np.any(np.diff(t) <= 0):
        raise ArgumentError("time stamps must increase strictly")
    if np.any(E < 0) or not np.all(np.isfinite(E)):
        raise ArgumentError("relative energy must be finite and nonnegative")
    dt = t - t[0]
    if E[0] <= atol:
        bound = atol * np.exp(c_cfg * dt)
        ratio = float(np.max(E / bound))
        return GronwallResult(0.0, "PASS" if ratio <= 1.0 else "FAIL", ratio)
    logE = np.log(np.maximum(E, np.finfo(float).tiny))
    C = float(np.polyfit(dt, logE, 1)[0])
    bound = E[0] * np.exp(C * dt) * (1.0 + slack)
    ratio = float(np.max(E / bound))
    return GronwallResult(C, "PASS" if ratio <= 1.0 else "FAIL", ratio)


def relative_energy_series(run_a, run_b):
    """Pairwise relative energies of two equally sampled trajectories."""
    run_a, run_b = list(run_a), list(run_b)
    if len(run_a) != len(run_b):
        raise ArgumentError("trajectories have different sample counts")
    times = np.array([s.t for s in run_a])
    if not np.allclose(times, [s.t for s in run_b], rtol=0, atol=1e-12):
        raise ArgumentError("trajectories are sampled at different times")
    return times, np.array([relative_energy(a, b) for a, b in zip(run_a, run_b)])
