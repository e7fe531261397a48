import numpy as np
import pytest

from eulign import hydro
from eulign.errors import ConfigError
from eulign.geometry import DomainSpec, rasterize
from eulign.leaders import (ControlSchedule, Coupling, LeaderForceSpec, LeaderPotential, LeaderSet,
                            audit_gradient_bound, coupled_step, in_braking_set, interpolate, invariance_check,
                            l1_distance, leader_step, simulate, steer_to_target)
from eulign.model import HarmonicConfinement, ModelParams
from scenarios import gaussian


class TestSchedule:
    def test_piecewise_lookup(self):
        s = ControlSchedule([0, 1, 2], [[[1, 0, 0], [0, 1, 0]]])
        assert np.array_equal(s.at(0.5)[0], [1, 0, 0])
        assert np.array_equal(s.at(1.0)[0], [0, 1, 0])
        assert np.array_equal(s.at(2.0)[0], [0, 1, 0])

    def test_uncovered_time(self):
        with pytest.raises(ConfigError):
            ControlSchedule.zeros(1, 0, 1).at(1.5)

    def test_bad_breaks(self):
        with pytest.raises(ConfigError):
            ControlSchedule([0, 0], np.zeros((1, 1, 3)))


class TestIntegration:
    def test_damped_closed_form(self):
        spec = LeaderForceSpec(gamma=1.0, beta=0.0, f_max=1.0)
        L = LeaderSet([[0.5, 0.5, 0.5]], [[0, 0, 0]], ControlSchedule.constant(0, 2, [[1, 0, 0]]))
        for _ in range(100):
            L = leader_step(L, None, spec, 0.01)
        assert L.ups[0, 0] == pytest.approx(1 - np.exp(-1), abs=1e-9)
        assert L.xi[0, 0] == pytest.approx(0.5 + 1 - (1 - np.exp(-1)), abs=1e-9)

    def test_breakpoint_split(self):
        spec = LeaderForceSpec(gamma=0.0, beta=0.0, f_max=1.0)
        sched = ControlSchedule([0, 0.05, 1], [[[1, 0, 0], [0, 0, 0]]])
        L = leader_step(LeaderSet([[0.5, 0.5, 0.5]], [[0, 0, 0]], sched), None, spec, 0.1)
        assert L.ups[0, 0] == pytest.approx(0.05, abs=1e-14)

    def test_interpolate_linear_field(self):
        m = rasterize(DomainSpec(), 16)
        c = m.centers()
        s = hydro.FluidState(0.0, 1 + c[..., 0], np.zeros((3,) + m.shape), m)
        assert interpolate(s, np.array([[0.4, 0.5, 0.5]]))[0] == pytest.approx(1.4)


class TestInvariance:
    def test_default_passes(self):
        r = invariance_check(LeaderForceSpec())
        assert r.passed and r.margin < 0

    def test_control_exceeding_damping_fails(self):
        assert not invariance_check(LeaderForceSpec(gamma=0.1, f_max=1.0)).passed

    def test_witness_reported(self):
        r = invariance_check(LeaderForceSpec(gamma=0.0, f_max=0.0, beta=0.0))
        assert not r.passed and r.witness is not None and "kind" in r.witness

    def test_braking_set_membership(self):
        spec = LeaderForceSpec()
        assert in_braking_set(spec, [0.5, 0.5, 0.5], [0.5, 0, 0])
        assert not in_braking_set(spec, [0.88, 0.5, 0.5], [0.9, 0, 0])

    def test_trajectory_stays_in_region(self):
        spec = LeaderForceSpec()
        L = LeaderSet([[0.8, 0.5, 0.5]], [[0.5, 0, 0]], ControlSchedule.constant(0, 5, [[0.5, 0, 0]]))
        for _ in range(500):
            L = leader_step(L, None, spec, 0.01)
            assert np.all(L.xi >= spec.lo) and np.all(L.xi <= spec.hi)


class TestPotential:
    def test_gradient_bound_holds(self):
        pot = LeaderPotential(((0.3, 0.5, 0.5), (0.7, 0.4, 0.5)), 0.5, 0.1, HarmonicConfinement(0.7))
        sampled, bound = audit_gradient_bound(pot, DomainSpec())
        assert sampled <= bound

    def test_gradient_finite_difference(self):
        pot = LeaderPotential(((0.3, 0.5, 0.5),), 0.5, 0.1)
        x = np.array([[0.35, 0.45, 0.52]])
        eps = 1e-6
        fd = [(pot.value(x + eps * e) - pot.value(x - eps * e))[0] / (2 * eps) for e in np.eye(3)]
        assert np.allclose(pot.grad(x)[0], fd, rtol=1e-6)


@pytest.fixture(scope="module")
def setup():
    m = rasterize(DomainSpec(), 12)
    fluid = hydro.initial_state(m, gaussian((0.5, 0.5, 0.5), 0.12, 0.01))
    L = LeaderSet([[0.5, 0.5, 0.5]], [[0, 0, 0]], ControlSchedule.constant(0, 1, [[0.5, 0, 0]]))
    return fluid, L, Coupling(A=0.5, sigma=0.2)


class TestCoupling:
    def test_mass_and_time_sync(self, setup):
        fluid, L, cp = setup
        f1, L1 = coupled_step(fluid, L, ModelParams(), cp, 0.02)
        assert f1.t == pytest.approx(L1.t) and abs(f1.mass() - 1) < 1e-13

    def test_leader_drags_mass(self, setup):
        fluid, L, cp = setup
        f1, L1 = simulate(fluid, L, ModelParams(), cp, 1.0, 0.02)
        xs = fluid.mask.centers()[..., 0]
        assert np.sum(f1.rho * xs) > np.sum(fluid.rho * xs)
        assert L1.t == pytest.approx(1.0)

    def test_steering_never_worse(self, setup):
        fluid, L, cp = setup
        target = hydro.initial_state(fluid.mask, gaussian((0.6, 0.5, 0.5), 0.12, 0.01)).rho
        L0 = LeaderSet(L.xi, L.ups, ControlSchedule.zeros(1, 0, 0.5, 2))
        r = steer_to_target(fluid, L0, ModelParams(), cp, target, 0.5, 0.05, budget=5, pieces=2)
        assert r.distance <= r.seed_distance and r.evaluations <= 5
        assert np.all(np.linalg.norm(r.schedule.values, axis=2) <= cp.spec.f_max + 1e-12)

    def test_l1_distance(self):
        m = rasterize(DomainSpec(), 8)
        a = np.ones(m.shape)
        assert l1_distance(a, 2 * a, m) == pytest.approx(1.0)
