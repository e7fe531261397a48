"""Scenario files: flat dotted keys in TOML, validated into model objects."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np
import tomli

from .errors import ConfigError, DomainError
from .geometry import DomainSpec, Obstacle, rasterize
from .kernels import BESSEL, YUKAWA, KernelSpec
from .leaders import ControlSchedule, Coupling, LeaderForceSpec, LeaderSet
from .model import PROFILES, HarmonicConfinement, ModelParams, ZeroConfinement

MODES = ("particles", "hydro", "coupled", "construct")

DEFAULTS = {
    "mode": "hydro",
    "seed": 0,
    "t0": 0.0,
    "domain.lo": [0.0, 0.0, 0.0],
    "domain.hi": [1.0, 1.0, 1.0],
    "domain.obstacles": [],
    "domain.smoothing": 0.0,
    "kernels.alignment.family": "yukawa",
    "kernels.alignment.k": 0.0,
    "kernels.alignment.lambda": 1.0,
    "kernels.cohesion.family": "yukawa",
    "kernels.cohesion.k": 0.0,
    "kernels.cohesion.lambda": 1.0,
    "kernels.repulsion.family": "yukawa",
    "kernels.repulsion.k": 0.0,
    "kernels.repulsion.lambda": 1.0,
    "model.kappa_p": 0.0,
    "model.propulsion_profile": "default",
    "model.confinement.kind": "none",
    "model.confinement.omega": 0.0,
    "model.confinement.center": [0.5, 0.5, 0.5],
    "initial.density.kind": "gaussian",
    "initial.density.center": [0.5, 0.5, 0.5],
    "initial.density.width": 0.15,
    "initial.density.background": 0.1,
    "initial.density.normalize": True,
    "initial.velocity.kind": "zero",
    "initial.velocity.amplitude": 0.0,
    "initial.velocity.vector": [0.0, 0.0, 0.0],
    "particles.count": 2000,
    "particles.seed": 0,
    "particles.dt": 1e-3,
    "particles.t_end": 1.0,
    "particles.init.velocity": "monokinetic",
    "particles.init.sigma": 0.0,
    "particles.trajectory_stride": 100,
    "particles.snapshot_stride": 100,
    "hydro.resolution": 32,
    "hydro.cfl": 0.45,
    "hydro.floor": 0.0,
    "hydro.t_end": 1.0,
    "hydro.dt": 0.01,
    "hydro.snapshot_stride": 10,
    "leaders.count": 0,
    "leaders.init": [],
    "leaders.controls": [],
    "leaders.breakpoints": 1,
    "leaders.force.gamma": 4.0,
    "leaders.force.f_max": 0.5,
    "leaders.force.barrier": 15.0,
    "leaders.force.delta": 0.1,
    "leaders.force.feedback": 0.0,
    "leaders.force.region_lo": [0.1, 0.1, 0.1],
    "leaders.force.region_hi": [0.9, 0.9, 0.9],
    "leaders.force.speed": 1.0,
    "leaders.force.brake": 0.5,
    "leaders.wells.A": 0.2,
    "leaders.wells.sigma": 0.2,
    "steer.breakpoints": 4,
    "steer.budget": 40,
    "steer.target.center": [0.7, 0.5, 0.5],
    "steer.target.width": 0.1,
    "construct.samples": 17,
    "construct.t_end": 1.0,
    "construct.epsilon": 0.3,
    "construct.v0.center": [0.5, 0.5, 0.5],
    "construct.v0.radius": 0.3,
    "construct.v0.direction": [0.0, 0.0, 1.0],
    "energy.c_tol": 10.0,
    "energy.atol": 1e-14,
    "energy.c_cfg": 1.0,
    "weak.tol": 0.1,
}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse(text: str) -> dict:
    try:
        return flatten(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc


def dumps(cfg: dict) -> str:
    """Flat dotted-key TOML; values are JSON literals, which TOML accepts for these types."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            lit = "true" if v else "false"
        else:
            lit = json.dumps(v)
        lines.append(f"{_quote_key(key)} = {lit}")
    return "\n".join(lines) + "\n"


def _quote_key(key: str) -> str:
    return ".".join(p if p.replace("_", "").isalnum() else json.dumps(p) for p in key.split("."))


# ---------------------------------------------------------------- validation

@dataclass
class Scenario:
    config: dict
    domain: DomainSpec
    params: ModelParams
    extras: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.config["mode"]

    def __getitem__(self, key):
        return self.config[key]

    def mask(self, n: int | None = None):
        n = n or self.config["hydro.resolution"]
        cache = self.extras.setdefault("masks", {})
        if n not in cache:
            cache[n] = rasterize(self.domain, n)
        return cache[n]

    def normalized_text(self) -> str:
        return dumps(self.config)


def _vec3(errors, cfg, key):
    v = cfg[key]
    try:
        arr = np.asarray(v, float)
    except (TypeError, ValueError):
        arr = None
    if arr is None or arr.shape != (3,) or not np.all(np.isfinite(arr)):
        errors.append(f"{key} must be a list of three numbers")
        return None
    return tuple(float(x) for x in arr)


def _kernel(errors, cfg, role):
    fam = cfg[f"kernels.{role}.family"]
    k = cfg[f"kernels.{role}.k"]
    lam = cfg[f"kernels.{role}.lambda"]
    ok = True
    if fam not in (YUKAWA, BESSEL):
        errors.append(f"kernels.{role}.family must be 'yukawa' or 'bessel'")
        ok = False
    if not isinstance(lam, (int, float)) or lam <= 0:
        errors.append(f"kernels.{role}.lambda must be positive")
        ok = False
    if not isinstance(k, (int, float)):
        errors.append(f"kernels.{role}.k must be a number")
        ok = False
    elif role == "cohesion" and k > 0:
        errors.append(f"kernels.{role}.k must be negative")
        ok = False
    elif role in ("alignment", "repulsion") and k < 0:
        errors.append(f"kernels.{role}.k must be positive")
        ok = False
    if not ok:
        return None
    try:
        return KernelSpec(fam, float(k), float(lam), role)
    except ConfigError as exc:
        errors.append(str(exc))
        return None


def density_function(cfg):
    kind = cfg["initial.density.kind"]
    c = np.asarray(cfg["initial.density.center"], float)
    w = float(cfg["initial.density.width"])
    bg = float(cfg["initial.density.background"])
    if kind == "uniform":
        return lambda p: np.ones(len(p))
    if kind == "gaussian":
        return lambda p: bg + np.exp(-np.sum((p - c) ** 2, axis=1) / (2 * w * w))
    raise ConfigError(f"initial.density.kind: unknown kind {kind!r}")


def velocity_function(cfg, domain: DomainSpec):
    kind = cfg["initial.velocity.kind"]
    a = float(cfg["initial.velocity.amplitude"])
    vec = np.asarray(cfg["initial.velocity.vector"], float)
    lo = np.asarray(domain.lo, float)
    ext = np.asarray(domain.hi, float) - lo
    if kind == "zero":
        return None
    if kind == "uniform":
        return lambda p: np.broadcast_to(vec, p.shape).copy()
    if kind == "swirl":
        # smooth rotation about the box centre, tangential on the box faces
        def u(p):
            q = (p - lo) / ext
            sx, sy, sz = (np.sin(np.pi * q[:, i]) for i in range(3))
            cx, cy = np.cos(np.pi * q[:, 0]), np.cos(np.pi * q[:, 1])
            return a * np.stack([-sx * cy * sz, cx * sy * sz, 0.0 * sz], axis=1)
        return u
    raise ConfigError(f"initial.velocity.kind: unknown kind {kind!r}")


def target_function(cfg):
    c = np.asarray(cfg["steer.target.center"], float)
    w = float(cfg["steer.target.width"])
    bg = float(cfg["initial.density.background"])
    return lambda p: bg + np.exp(-np.sum((p - c) ** 2, axis=1) / (2 * w * w))


def leader_objects(cfg, t_end: float):
    k = int(cfg["leaders.count"])
    spec = LeaderForceSpec(
        gamma=float(cfg["leaders.force.gamma"]), f_max=float(cfg["leaders.force.f_max"]),
        beta=float(cfg["leaders.force.barrier"]), delta=float(cfg["leaders.force.delta"]),
        feedback=float(cfg["leaders.force.feedback"]),
        region=(tuple(cfg["leaders.force.region_lo"]), tuple(cfg["leaders.force.region_hi"])),
        speed=float(cfg["leaders.force.speed"]), brake=float(cfg["leaders.force.brake"]))
    coupling = Coupling(spec, float(cfg["leaders.wells.A"]), float(cfg["leaders.wells.sigma"]))
    init = np.asarray(cfg["leaders.init"], float).reshape(k, 6) if k else np.zeros((0, 6))
    pieces = int(cfg["leaders.breakpoints"])
    t0 = float(cfg["t0"])
    controls = cfg["leaders.controls"]
    values = np.asarray(controls, float).reshape(k, pieces, 3) if controls else np.zeros((k, pieces, 3))
    sched = ControlSchedule(np.linspace(t0, t_end, pieces + 1), values)
    return LeaderSet(init[:, :3], init[:, 3:], sched, t0), coupling


def validate(cfg_in: dict) -> Scenario:
    """Materialize defaults and check every constraint; raises ConfigError listing all violations."""
    errors = []
    unknown = sorted(set(cfg_in) - set(DEFAULTS))
    for key in unknown:
        errors.append(f"{key}: unknown key")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update({k: v for k, v in cfg_in.items() if k in DEFAULTS})
    for key, default in DEFAULTS.items():
        v = cfg[key]
        if isinstance(default, bool):
            if not isinstance(v, bool):
                errors.append(f"{key} must be a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, int):
                errors.append(f"{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                errors.append(f"{key} must be a number")
            else:
                cfg[key] = float(v)
        elif isinstance(default, str) and not isinstance(v, str):
            errors.append(f"{key} must be a string")
    if len(errors) > len(unknown):
        # later checks rely on the types
        raise ConfigError("; ".join(errors))

    if cfg["mode"] not in MODES:
        errors.append(f"mode must be one of {', '.join(MODES)}")
    lo = _vec3(errors, cfg, "domain.lo")
    hi = _vec3(errors, cfg, "domain.hi")
    obstacles = []
    for i, ob in enumerate(cfg["domain.obstacles"]):
        if not (isinstance(ob, list) and len(ob) == 4 and all(isinstance(x, (int, float)) for x in ob)):
            errors.append(f"domain.obstacles[{i}] must be [cx, cy, cz, radius]")
        else:
            obstacles.append(Obstacle(tuple(map(float, ob[:3])), float(ob[3])))
    domain = None
    if lo and hi:
        try:
            domain = DomainSpec(lo, hi, tuple(obstacles), cfg["domain.smoothing"])
        except DomainError as exc:
            errors.append(f"domain: {exc}")
    specs = {role: _kernel(errors, cfg, role) for role in ("alignment", "cohesion", "repulsion")}
    if cfg["model.kappa_p"] < 0:
        errors.append("model.kappa_p must be nonnegative")
    if cfg["model.propulsion_profile"] not in PROFILES:
        errors.append(f"model.propulsion_profile must be one of {', '.join(PROFILES)}")
    kind = cfg["model.confinement.kind"]
    center = _vec3(errors, cfg, "model.confinement.center")
    if kind == "none":
        confinement = ZeroConfinement()
    elif kind == "harmonic":
        confinement = HarmonicConfinement(cfg["model.confinement.omega"], center or (0.5, 0.5, 0.5))
    else:
        errors.append("model.confinement.kind must be 'none' or 'harmonic'")
        confinement = ZeroConfinement()
    for key in ("hydro.resolution",):
        if cfg[key] < 8:
            errors.append(f"{key} must be at least 8")
    if not 0 < cfg["hydro.cfl"] < 1:
        errors.append("hydro.cfl must lie in (0, 1)")
    if cfg["hydro.floor"] < 0:
        errors.append("hydro.floor must be nonnegative (0 selects the default)")
    for key in ("hydro.dt", "particles.dt", "hydro.t_end", "particles.t_end", "construct.t_end",
                "initial.density.width", "steer.target.width", "leaders.wells.sigma"):
        if cfg[key] <= 0:
            errors.append(f"{key} must be positive")
    for key in ("hydro.snapshot_stride", "particles.trajectory_stride", "particles.snapshot_stride",
                "leaders.breakpoints", "steer.breakpoints"):
        if cfg[key] < 1:
            errors.append(f"{key} must be at least 1")
    if cfg["particles.count"] < 1:
        errors.append("particles.count must be at least 1")
    if cfg["steer.budget"] < 1:
        errors.append("steer.budget must be at least 1")
    if cfg["construct.samples"] < 3:
        errors.append("construct.samples must be at least 3")
    if cfg["initial.density.background"] < 0:
        errors.append("initial.density.background must be nonnegative")
    if cfg["particles.init.velocity"] not in ("monokinetic", "gaussian"):
        errors.append("particles.init.velocity must be 'monokinetic' or 'gaussian'")
    if cfg["energy.c_tol"] <= 0:
        errors.append("energy.c_tol must be positive")
    # leaders
    k = cfg["leaders.count"]
    if k < 0:
        errors.append("leaders.count must be nonnegative")
    elif k:
        init = cfg["leaders.init"]
        if np.asarray(init, dtype=object).size != 6 * k:
            errors.append("leaders.init must list [x, y, z, vx, vy, vz] for every leader")
        ctrl = cfg["leaders.controls"]
        if ctrl and np.asarray(ctrl, dtype=object).size != 3 * k * cfg["leaders.breakpoints"]:
            errors.append("leaders.controls: missing control coverage (need leaders x breakpoints x 3 values)")
    if cfg["mode"] == "coupled" and k == 0:
        errors.append("leaders.count must be positive in coupled mode")
    if errors:
        raise ConfigError("; ".join(errors))

    params = ModelParams(specs["alignment"], specs["cohesion"], specs["repulsion"], cfg["model.kappa_p"],
                         cfg["model.propulsion_profile"], confinement, cfg["seed"])
    scen = Scenario(cfg, domain, params)
    try:
        _check_initial_density(scen)
        if k:
            leaders, coupling = leader_objects(cfg, cfg["t0"] + cfg["hydro.t_end"])
            scen.extras["leaders"] = leaders
            scen.extras["coupling"] = coupling
            pts = np.vstack([leaders.xi, coupling.spec.lo, coupling.spec.hi])
            from .geometry import signed_distance

            if np.any(signed_distance(domain, pts) >= 0):
                errors.append("leaders: initial positions and the leader region must lie inside the domain")
    except (ConfigError, ValueError) as exc:
        errors.append(str(exc))
    if errors:
        raise ConfigError("; ".join(errors))
    return scen


def _check_initial_density(scen: Scenario):
    cfg = scen.config
    mask = scen.mask()
    rho_fn = density_function(cfg)
    rho = np.asarray(rho_fn(mask.center_points()), float).reshape(mask.shape)
    bad = np.argwhere(mask.inside & ~(rho > 0))
    if len(bad):
        i, j, k = bad[0]
        raise ConfigError(f"initial.density must be positive: rho0 <= 0 at cell ({i}, {j}, {k})")
    if not cfg["initial.density.normalize"]:
        mass = float(rho[mask.inside].sum() * mask.h**3)
        if abs(mass - 1.0) > 1e-9:
            raise ConfigError(f"initial.density: mass {mass:.12g} differs from 1 (set normalize = true)")
    velocity_function(cfg, scen.domain)


def load(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return validate(parse(fh.read()))


def loads(text: str) -> Scenario:
    return validate(parse(text))
