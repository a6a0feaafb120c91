import math

import numpy as np
import pytest

from hysopt.filippov import integrate_pss
from hysopt.timefreeze import (
    VoronoiPartition,
    aux_ode_a,
    aux_ode_b,
    build_time_freezing,
    dae_forming_a,
    dae_forming_b,
    frozen_phases,
    gamma,
    project_physical,
    projection_matrix,
)


class TestGamma:
    def test_zero_at_origin(self):
        assert gamma(0.0, 1.0) == 0.0

    def test_half_a_at_unit_argument(self):
        assert gamma(-1.0, 1.0) == pytest.approx(0.5, abs=1e-15)
        assert gamma(-1.0, 2.0) == pytest.approx(1.0, abs=1e-15)
        assert gamma(1.0, 1.0) == pytest.approx(0.5, abs=1e-15)  # even function

    def test_bounded_by_a(self):
        for p in np.linspace(-50, 50, 201):
            assert 0.0 <= gamma(p, 3.0) < 3.0

    def test_nonpositive_a_rejected(self):
        with pytest.raises(ValueError):
            gamma(1.0, 0.0)
        with pytest.raises(ValueError):
            gamma(1.0, -2.0)


class TestAuxiliaryFields:
    def test_aux_a_at_lower_threshold(self, thermostat):
        # x=18 gives psi=0, so the 1->0 rate is -gamma(-1) = -1/2.
        out = aux_ode_a([18.0, 1.0, 0.0], thermostat, 1.0)
        assert out == pytest.approx([0.0, -0.5, 0.0], abs=1e-15)

    def test_aux_a_vanishes_on_upper_threshold(self, thermostat):
        out = aux_ode_a([20.0, 0.0, 0.0], thermostat, 1.0)
        assert out == pytest.approx([0.0, 0.0, 0.0], abs=1e-15)

    def test_aux_b_at_upper_threshold(self, thermostat):
        out = aux_ode_b([20.0, 0.0, 0.0], thermostat, 1.0)
        assert out == pytest.approx([0.0, 0.5, 0.0], abs=1e-15)

    def test_aux_b_vanishes_at_lower_threshold(self, thermostat):
        out = aux_ode_b([18.0, 1.0, 3.0], thermostat, 1.0)
        assert out == pytest.approx([0.0, 0.0, 0.0], abs=1e-15)

    def test_jump_duration_scaling(self):
        # Constant transport rate a/2 crosses the unit w-gap in 2/a.
        for a in (0.5, 1.0, 2.0):
            assert 1.0 / gamma(-1.0, a) == pytest.approx(2.0 / a, abs=1e-14)


class TestBranchFields:
    def test_mode_a_field_hand_value(self, thermostat):
        # x=15: f_A=2, psi=-1.5, gamma(-2.5) = 6.25/7.25.
        out = dae_forming_a([15.0, 0.0, 0.0], [], thermostat, 1.0)
        assert out == pytest.approx([4.0, 6.25 / 7.25, 2.0], abs=1e-12)
        assert out[1] == pytest.approx(0.862069, abs=1e-6)

    def test_mode_a_field_at_upper_threshold(self, thermostat):
        out = dae_forming_a([20.0, 0.0, 0.0], [], thermostat, 1.0)
        assert out == pytest.approx([2.0 * 1.0, 0.0, 2.0], abs=1e-15)

    def test_mode_b_field_hand_value(self, thermostat):
        # x=19: f_B=-3.8, psi=0.5, gamma(0.5)=0.2.
        out = dae_forming_b([19.0, 1.0, 0.0], [], thermostat, 1.0)
        assert out == pytest.approx([-7.6, -0.2, 2.0], abs=1e-12)

    def test_midpoint_identity_exact(self, thermostat, turbo_car):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.uniform(10.0, 26.0, size=1)
            y = np.concatenate([x, rng.uniform(-0.2, 1.2, 1), rng.uniform(0, 5, 1)])
            fa = np.concatenate([thermostat.f_a.eval(x), [0.0, 1.0]])
            fb = np.concatenate([thermostat.f_b.eval(x), [0.0, 1.0]])
            mid_a = 0.5 * dae_forming_a(y, [], thermostat, 1.3) + 0.5 * aux_ode_a(
                y, thermostat, 1.3
            )
            mid_b = 0.5 * dae_forming_b(y, [], thermostat, 1.3) + 0.5 * aux_ode_b(
                y, thermostat, 1.3
            )
            assert np.max(np.abs(mid_a - fa)) <= 1e-14
            assert np.max(np.abs(mid_b - fb)) <= 1e-14
        for _ in range(50):
            x = rng.uniform(-5.0, 30.0, size=2)
            u = rng.uniform(-5.0, 5.0, size=1)
            y = np.concatenate([x, [0.0, 0.0]])
            fa = np.concatenate([turbo_car.f_a.eval(np.concatenate([x, u])), [0.0, 1.0]])
            mid = 0.5 * dae_forming_a(y, u, turbo_car, 1.0) + 0.5 * aux_ode_a(
                y, turbo_car, 1.0
            )
            assert np.max(np.abs(mid - fa)) <= 1e-14

    def test_branch_sign_conditions(self, thermostat):
        # On the mode-A branch (w=0, psi<1) the relay components push toward
        # the branch from both sides: aux down, branch field up.
        rng = np.random.default_rng(4)
        for x in rng.uniform(10.0, 19.9, size=40):
            y = [x, 0.0, 0.0]
            assert aux_ode_a(y, thermostat, 1.0)[1] < 0
            assert dae_forming_a(y, [], thermostat, 1.0)[1] > 0
        # Mode-B branch (w=1, psi>0): aux up, branch field down.
        for x in rng.uniform(18.1, 30.0, size=40):
            y = [x, 1.0, 0.0]
            assert aux_ode_b(y, thermostat, 1.0)[1] > 0
            assert dae_forming_b(y, [], thermostat, 1.0)[1] < 0


class TestVoronoiPartition:
    def test_default_bisectors(self):
        part = VoronoiPartition()
        for psi in np.linspace(-3, 3, 25):
            d = part.squared_distances(psi, 0.0)
            assert abs(d[0] - d[1]) <= 1e-12  # {w=0} bisects cells 1,2
            d = part.squared_distances(psi, 1.0)
            assert abs(d[2] - d[3]) <= 1e-12  # {w=1} bisects cells 3,4
        for psi in np.linspace(-2, 2, 25):
            d = part.squared_distances(psi, 1.0 - psi)
            assert abs(d[1] - d[2]) <= 1e-12  # diagonal bisects cells 2,3

    def test_region_examples(self):
        part = VoronoiPartition()
        assert part.region_index(-1.5, -1e-9) == 1
        assert part.region_index(-1.5, 1e-9) == 2
        assert part.region_index(0.2, 0.5) == 2
        d = part.squared_distances(0.5, 0.5)
        assert d[1] == pytest.approx(0.125) and d[2] == pytest.approx(0.125)

    def test_corner_three_way_tie(self):
        part = VoronoiPartition()
        assert part.nearest_indices(1.0, 0.0) == [0, 1, 2]
        assert part.squared_distances(1.0, 0.0)[:3] == pytest.approx([0.625] * 3)
        assert part.nearest_indices(0.0, 1.0) == [1, 2, 3]

    def test_degenerate_points_rejected(self):
        pts = np.array([[0.25, -0.25], [0.25, 0.25], [0.25, 0.25], [0.75, 1.25]])
        with pytest.raises(ValueError, match="degenerate"):
            VoronoiPartition(pts)


class TestBuild:
    def test_field_order_and_shapes(self, thermostat):
        pss = build_time_freezing(thermostat, a=1.0)
        assert pss.n_y == 3 and len(pss.fields) == 4
        y = [15.0, 0.0, 0.0]
        np.testing.assert_allclose(
            pss.model.field_value(0, y), dae_forming_a(y, [], thermostat, 1.0)
        )
        np.testing.assert_allclose(
            pss.model.field_value(1, y), aux_ode_a(y, thermostat, 1.0)
        )
        np.testing.assert_allclose(
            pss.model.field_value(2, y), aux_ode_b(y, thermostat, 1.0)
        )
        np.testing.assert_allclose(
            pss.model.field_value(3, y), dae_forming_b(y, [], thermostat, 1.0)
        )

    def test_auxiliary_fields_freeze_state_and_clock(self, thermostat):
        pss = build_time_freezing(thermostat, a=2.0)
        rng = np.random.default_rng(5)
        for _ in range(20):
            y = [rng.uniform(10, 30), rng.uniform(-1, 2), rng.uniform(0, 9)]
            for i in (1, 2):
                f = pss.model.field_value(i, y)
                assert f[0] == 0.0 and f[2] == 0.0

    def test_car_regions_in_original_coordinates(self, turbo_car):
        pss = build_time_freezing(turbo_car, a=1.0)
        part = pss.partition
        # Mode-A branch {w=0, v<=15}; relay must flip by v=15 (psi=1).
        for v in np.linspace(-20, 14.9, 30):
            assert set(part.nearest_indices((v - 10) / 5, 0.0)) == {0, 1}
        for v in np.linspace(15.1, 30, 10):
            assert part.region_index((v - 10) / 5, 0.0) == 3
        # Mode-B branch {w=1, v>=10}.
        for v in np.linspace(10.1, 30, 30):
            assert set(part.nearest_indices((v - 10) / 5, 1.0)) == {2, 3}
        for v in np.linspace(-10, 9.9, 10):
            assert part.region_index((v - 10) / 5, 1.0) == 2

    def test_invalid_relaxation_speed(self, thermostat):
        with pytest.raises(ValueError):
            build_time_freezing(thermostat, a=0.0)


class TestDefinitionOneEndpointLaw:
    @pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
    def test_jump_transport(self, thermostat, a):
        # Start on the lower threshold with the wrong relay value; the
        # auxiliary phase must carry w from 1 to 0 in exactly 2/a with the
        # state and the clock untouched.
        pss = build_time_freezing(thermostat, a=a)
        y0 = pss.augment([18.0], 1.0, 0.0)
        traj = integrate_pss(pss.model, y0, tau_f=2.0 / a + 1.0, tol=1e-9)
        phases = frozen_phases(traj, pss.t_index)
        assert len(phases) == 1
        tau0, tau1, t_val, w0, w1 = phases[0]
        assert tau1 - tau0 == pytest.approx(2.0 / a, abs=1e-8)
        assert w0 == pytest.approx(1.0, abs=1e-9)
        assert w1 == pytest.approx(0.0, abs=1e-9)
        assert t_val == 0.0
        # x and t frozen throughout the phase
        seg = [s for s in traj.segments if s.tau0 == tau0][0]
        assert np.max(np.abs(seg.ys[:, 0] - 18.0)) <= 1e-10
        assert np.max(np.abs(seg.ys[:, 2])) <= 1e-10


class TestProjection:
    def test_projection_matrix(self):
        M = projection_matrix(2)
        assert M.shape == (3, 4)
        y = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(M @ y, [1.0, 2.0, 3.0])

    def test_single_frozen_interval_shortens_duration(self, thermostat):
        # First guard hit at tau = 5 ln 2 ~ 3.466, frozen for 2, and the
        # next jump only starts at tau ~ 5.99; tau_f = 5.8 sees one phase.
        pss = build_time_freezing(thermostat, a=1.0)
        tau_f = 5.8
        traj = integrate_pss(
            pss.model, pss.augment([15.0], 0.0), tau_f=tau_f, tol=1e-9
        )
        phases = frozen_phases(traj, pss.t_index)
        assert len(phases) == 1
        assert phases[0][0] == pytest.approx(5 * math.log(2), abs=1e-7)
        phys = project_physical(traj)
        assert phys.t_end == pytest.approx(tau_f - 2.0, abs=1e-6)

    def test_no_freezing_identity_relabel(self, turbo_car):
        from hysopt.controls import ControlSchedule

        pss = build_time_freezing(turbo_car, a=1.0)
        sched = ControlSchedule.constant([0.0])
        traj = integrate_pss(
            pss.model, pss.augment([0.0, 0.0], 0.0), controls=sched, tau_f=3.0, tol=1e-9
        )
        assert not frozen_phases(traj, pss.t_index)
        phys = project_physical(traj)
        assert phys.t_end == pytest.approx(3.0, abs=1e-9)
        for t in np.linspace(0.1, 2.9, 7):
            x, w = phys.eval(t)
            assert w == 0.0
            y = traj.eval(t)  # t(tau) = tau, so tau == t
            assert np.max(np.abs(y[:2] - x)) <= 1e-9

    def test_square_wave_relay_in_physical_time(self, thermostat):
        pss = build_time_freezing(thermostat, a=1.0)
        traj = pss.integrate([15.0], 0.0, horizon=12.0, tol=1e-8)
        phys = project_physical(traj)
        ts = np.linspace(0.0, 12.0 - 1e-9, 600)
        _, ws = phys.sample(ts)
        assert set(np.unique(ws)) <= {0.0, 1.0}
        flips = np.flatnonzero(np.diff(ws) != 0)
        assert len(flips) == len(phys.events) >= 3

    def test_w_snapping_tolerance(self, thermostat):
        pss = build_time_freezing(thermostat, a=1.0)
        traj = pss.integrate([15.0], 0.0, horizon=5.0, tol=1e-8)
        phys = project_physical(traj, tol_w=1e-6)
        x, w = phys.eval(2.0)
        assert w == 0.0  # exactly snapped
