import numpy as np
import pytest

from eulign import hydro
from eulign.errors import StepSizeError
from eulign.geometry import DomainSpec, Obstacle, rasterize
from eulign.kernels import YUKAWA, KernelSpec
from eulign.model import HarmonicConfinement, ModelParams
from scenarios import gaussian, smooth_params, smooth_velocity


@pytest.fixture(scope="module")
def mask():
    return rasterize(DomainSpec(), 16)


class TestState:
    def test_initial_normalized(self, mask):
        s = hydro.initial_state(mask, gaussian((0.5, 0.5, 0.5), 0.2, 0.1), smooth_velocity)
        assert s.mass() == pytest.approx(1.0, abs=1e-14)
        assert np.allclose(s.u[:, mask.inside], (smooth_velocity(mask.center_points()).T)[:, mask.inside.ravel()])

    def test_options_validated(self):
        with pytest.raises(ValueError):
            hydro.SolverOptions(cfl=1.5)


class TestBoundaryGhosts:
    def test_mirror_values(self, mask):
        s = hydro.initial_state(mask, gaussian((0.5, 0.5, 0.5), 0.2, 0.1), smooth_velocity)
        rho, j = hydro.apply_bc(s, depth=2)
        assert rho[0, 5, 5] == s.rho[1, 3, 3] and rho[1, 5, 5] == s.rho[0, 3, 3]
        assert j[0, 1, 5, 5] == -s.j[0, 0, 3, 3]
        assert j[1, 1, 5, 5] == s.j[1, 0, 3, 3]

    def test_obstacle_ghosts_filled(self):
        m = rasterize(DomainSpec(obstacles=(Obstacle((0.5, 0.5, 0.5), 0.2),)), 16)
        s = hydro.initial_state(m, lambda p: np.ones(len(p)))
        rho, _ = hydro.apply_bc(s, depth=1)
        core = rho[1:-1, 1:-1, 1:-1]
        ring = ~m.inside & np.any([np.roll(m.inside, k, a) for a in range(3) for k in (1, -1)], axis=0)
        assert np.all(core[ring] > 0)


class TestStep:
    def test_mass_conservation_and_no_flux(self, mask):
        s = hydro.initial_state(mask, gaussian((0.4, 0.5, 0.6), 0.15, 0.2), smooth_velocity)
        p = smooth_params()
        for _ in range(10):
            s = hydro.step(s, p, 0.01)
        assert abs(s.mass() - 1.0) < 1e-13

    def test_rest_state_is_steady(self, mask):
        s = hydro.initial_state(mask, lambda p: np.ones(len(p)))
        p = ModelParams(alignment=KernelSpec(YUKAWA, 1.0, 1.0, "alignment"))
        out = hydro.step(s, p, 0.01)
        assert np.array_equal(out.rho, s.rho) and not out.j.any()

    def test_free_transport_momentum(self, mask):
        # constant velocity, no forces: interior momentum only changes through the walls
        s = hydro.initial_state(mask, gaussian((0.5, 0.5, 0.5), 0.08, 0.0), lambda p: np.tile([0.2, 0, 0], (len(p), 1)))
        out = hydro.step(s, ModelParams(), 0.01)
        assert np.allclose(out.momentum(), s.momentum(), atol=1e-10)

    def test_cfl_violation(self, mask):
        s = hydro.initial_state(mask, lambda p: np.ones(len(p)), lambda p: np.tile([5.0, 0, 0], (len(p), 1)))
        with pytest.raises(StepSizeError):
            hydro.step(s, ModelParams(), 0.1)

    def test_floor_reports_injection(self, mask):
        s = hydro.initial_state(mask, gaussian((0.5, 0.5, 0.5), 0.05, 0.0), lambda p: 0.5 * (p - 0.5))
        opts = hydro.SolverOptions(floor=1e-3)
        out = hydro.step(s, ModelParams(), 0.5 * hydro.stable_dt(s, opts), opts)
        assert out.floor_mass > 0 and out.rho[mask.inside].min() >= 1e-3

    def test_confinement_pulls_mass_inward(self, mask):
        s = hydro.initial_state(mask, lambda p: np.ones(len(p)))
        p = ModelParams(confinement=HarmonicConfinement(2.0))
        for _ in range(5):
            s = hydro.step(s, p, 0.01)
        c = mask.centers()
        # momentum at x > 0.5 points to -x
        assert s.j[0][c[..., 0] > 0.6].mean() < 0
