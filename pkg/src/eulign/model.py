"""Model parameters shared by the particle and fluid tiers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec


def default_profile(s):
    """P(s) = 2 s^2 / (1 + s^2): P(0) = 0, nondecreasing, unit equilibrium speed."""
    s = np.asarray(s, float)
    return 2.0 * s * s / (1.0 + s * s)


def zero_profile(s):
    return np.zeros_like(np.asarray(s, float))


PROFILES = {"default": default_profile, "none": zero_profile}


class ZeroConfinement:
    def value(self, x):
        return np.zeros(np.shape(x)[:-1])

    def grad(self, x):
        return np.zeros(np.shape(x))

    def __eq__(self, other):
        return isinstance(other, ZeroConfinement)

    def __hash__(self):
        return hash(ZeroConfinement)


@dataclass(frozen=True)
class HarmonicConfinement:
    """U(x) = omega^2 |x - center|^2 / 2."""

    omega: float
    center: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def value(self, x):
        d = np.asarray(x, float) - np.asarray(self.center)
        return 0.5 * self.omega**2 * np.sum(d * d, axis=-1)

    def grad(self, x):
        return self.omega**2 * (np.asarray(x, float) - np.asarray(self.center))


@dataclass
class ModelParams:
    alignment: KernelSpec = field(default_factory=lambda: KernelSpec(role="alignment"))
    cohesion: KernelSpec = field(default_factory=lambda: KernelSpec(role="cohesion"))
    repulsion: KernelSpec = field(default_factory=lambda: KernelSpec(role="repulsion"))
    kappa_p: float = 0.0
    profile: str = "default"
    confinement: object = field(default_factory=ZeroConfinement)
    seed: int = 0

    def __post_init__(self):
        if self.kappa_p < 0:
            raise ValueError("kappa_p must be nonnegative")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown propulsion profile {self.profile!r}")

    @property
    def kernels(self) -> tuple[KernelSpec, KernelSpec, KernelSpec]:
        return (self.alignment, self.cohesion, self.repulsion)

    @property
    def P(self):
        return PROFILES[self.profile]


def check_profile(P, s_max: float = 10.0, samples: int = 1000, seed: int = 0) -> dict:
    """Sampled checks of the propulsion assumptions: monotone P, Lipschitz v(1 - P(|v|))."""
    s = np.linspace(0.0, s_max, samples)
    p = P(s)
    monotone = bool(np.all(np.diff(p) >= -1e-14))
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(samples, 3)) * s_max / 3
    b = a + rng.normal(size=(samples, 3)) * 1e-2
    fa = a * (1 - P(np.linalg.norm(a, axis=1)))[:, None]
    fb = b * (1 - P(np.linalg.norm(b, axis=1)))[:, None]
    lip = np.linalg.norm(fa - fb, axis=1) / np.linalg.norm(a - b, axis=1)
    return {"monotone": monotone, "lipschitz_estimate": float(lip.max())}
