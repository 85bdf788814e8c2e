import math

import numpy as np
import pytest

from platoon_privacy.dynamics import (
    ControllerGains,
    EquilibriumPoint,
    FvdThresholds,
    NoiseSpec,
    PlatoonState,
    ScenarioParams,
    ThetaParams,
    cav_control,
    desired_velocity,
    distortion,
    fuel_rate,
    fvd_accel,
    platoon_step,
)

THR = FvdThresholds()
EQ = EquilibriumPoint()
TABLE_GAINS = ControllerGains()  # literal published values


def silent_scenario(**kw):
    return ScenarioParams(noise=NoiseSpec.silent(), **kw)


class TestDesiredVelocity:
    def test_stop_branch(self):
        assert desired_velocity(5.0) == 0.0
        assert desired_velocity(0.0) == 0.0

    def test_free_flow_branch(self):
        assert desired_velocity(35.0) == 30.0
        assert desired_velocity(100.0) == 30.0

    def test_midpoint_closed_form(self):
        # 15 * (1 - cos(pi * 15/30)) = 15
        assert desired_velocity(20.0) == pytest.approx(15.0, abs=1e-12)

    def test_continuity_at_thresholds(self):
        for s0 in (THR.s_st, THR.s_go):
            for eps in (1e-6, 1e-9):
                assert abs(desired_velocity(s0 + eps) - desired_velocity(s0)) < 1e-4
                assert abs(desired_velocity(s0 - eps) - desired_velocity(s0)) < 1e-4

    def test_monotone_on_dense_grid(self):
        grid = np.linspace(0.0, 40.0, 4001)
        vals = desired_velocity(grid)
        assert np.all(np.diff(vals) >= -1e-12)


class TestFvdAccel:
    def test_equilibrium_gives_zero(self):
        a = fvd_accel(ThetaParams(0.4, 0.5), 20.0, 15.0, 15.0)
        assert a == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        a = fvd_accel(ThetaParams(1.0, 1.1), 20.0, 14.0, 15.0)
        assert a == pytest.approx(2.1, abs=1e-12)

    def test_standstill(self):
        for theta in [(0.4, 0.5), (1.3, 1.4)]:
            assert fvd_accel(ThetaParams(*theta), 5.0, 0.0, 0.0) == 0.0

    def test_clamped_for_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            theta = ThetaParams(rng.uniform(0.1, 3), rng.uniform(0.1, 3))
            a = fvd_accel(theta, rng.uniform(0, 60), rng.uniform(0, 30), rng.uniform(0, 30))
            assert THR.a_min <= a <= THR.a_max


class TestCavControl:
    def test_all_at_equilibrium(self):
        st = PlatoonState.at_equilibrium(EQ)
        assert cav_control(st, TABLE_GAINS, EQ, st.hdv) == 0.0

    def test_hdv_spacing_term(self):
        st = PlatoonState(s=np.array([20.0, 20.0, 21.0]), v=np.full(3, 15.0))
        assert cav_control(st, TABLE_GAINS, EQ, st.hdv) == pytest.approx(-0.2, abs=1e-12)

    def test_cav_velocity_term(self):
        st = PlatoonState(s=np.full(3, 20.0), v=np.array([15.0, 16.0, 15.0]))
        assert cav_control(st, TABLE_GAINS, EQ, st.hdv) == pytest.approx(0.5, abs=1e-12)

    def test_shared_data_substitutes_vehicle3(self):
        st = PlatoonState.at_equilibrium(EQ)
        u = cav_control(st, TABLE_GAINS, EQ, (15.0, 22.0))
        assert u == pytest.approx(-0.2 * 2.0, abs=1e-12)

    def test_clamped_for_random_inputs(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            st = PlatoonState(s=rng.uniform(0, 100, 3), v=rng.uniform(0, 30, 3))
            u = cav_control(st, TABLE_GAINS, EQ, (rng.uniform(0, 30), rng.uniform(0, 100)))
            assert THR.a_min <= u <= THR.a_max


class TestPlatoonStep:
    def test_equilibrium_fixed_point(self):
        scn = silent_scenario()
        st = PlatoonState.at_equilibrium(EQ)
        rng = np.random.default_rng(0)
        for _ in range(50):
            st, _ = platoon_step(st, ThetaParams(1.0, 1.1), 0.0, scn, rng)
        assert np.all(np.abs(st.s - EQ.s_star) < 1e-12)
        assert np.all(np.abs(st.v - EQ.v_star) < 1e-12)

    def test_hand_euler_step(self):
        scn = silent_scenario()
        st = PlatoonState(s=np.full(3, 20.0), v=np.array([15.0, 15.0, 14.0]))
        nxt, a3 = platoon_step(st, ThetaParams(1.0, 1.1), 0.0, scn, np.random.default_rng(0))
        assert nxt.v[2] == pytest.approx(14.42, abs=1e-12)
        assert nxt.s[2] == pytest.approx(20.2, abs=1e-12)
        assert a3 == pytest.approx(2.1, abs=1e-12)

    def test_zero_dt_is_identity(self):
        scn = silent_scenario(dt=0.0)
        st = PlatoonState(s=np.array([18.0, 21.0, 19.0]), v=np.array([14.0, 15.5, 16.0]))
        nxt, _ = platoon_step(st, ThetaParams(0.7, 0.8), 3.0, scn, np.random.default_rng(0))
        assert np.array_equal(nxt.s, st.s)
        assert np.array_equal(nxt.v, st.v)

    def test_velocity_clamped_with_noise(self):
        scn = ScenarioParams()
        rng = np.random.default_rng(7)
        st = PlatoonState(s=np.array([5.0, 2.0, 1.0]), v=np.array([29.0, 0.5, 29.5]))
        for _ in range(300):
            u = cav_control(st, scn.gains, scn.eq, st.hdv, scn.thr)
            st, _ = platoon_step(st, ThetaParams(1.3, 1.4), u, scn, rng)
            assert np.all(st.v >= 0.0) and np.all(st.v <= scn.thr.v_max)
            assert np.all(st.s >= 0.0)

    def test_lead_stationary_variance_matches_spec(self):
        scn = ScenarioParams()
        rng = np.random.default_rng(3)
        st = PlatoonState.at_equilibrium(EQ)
        vs = []
        for _ in range(20000):
            st, _ = platoon_step(st, ThetaParams(1.0, 1.1), 0.0, scn, rng)
            vs.append(st.v[0])
        var = np.var(np.asarray(vs[200:]) - EQ.v_star)
        assert var == pytest.approx(scn.noise.sigma_lead_sq, rel=0.15)


class TestFuelRate:
    def test_negative_r_branch(self):
        assert fuel_rate(10.0, -2.0) == 0.444

    def test_cruise_value(self):
        assert fuel_rate(15.0, 0.0) == pytest.approx(1.2216, abs=1e-10)

    def test_accelerating_value(self):
        assert fuel_rate(15.0, 1.0) == pytest.approx(3.6516, abs=1e-10)

    def test_floor_and_no_square_term_when_braking(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            v, a = rng.uniform(0, 30), rng.uniform(-5, 5)
            f = fuel_rate(v, a)
            assert f >= 0.444
            if a <= 0:
                r = 0.333 + 0.00108 * v * v + 1.2 * a
                expected = 0.444 if r <= 0 else 0.444 + 0.090 * r * v
                assert f == pytest.approx(expected, abs=1e-12)


class TestDistortion:
    def test_identity(self):
        assert distortion((15.0, 20.0), (15.0, 20.0)) == 0.0

    def test_unit_offset(self):
        assert distortion((15.0, 20.0), (16.0, 20.0)) == 1.0

    def test_three_four_five(self):
        assert distortion((15.0, 20.0), (18.0, 24.0)) == pytest.approx(5.0, abs=1e-12)

    def test_metric_properties(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            a, b, c = (tuple(rng.uniform(0, 30, 2)) for _ in range(3))
            assert distortion(a, b) >= 0
            assert distortion(a, b) == pytest.approx(distortion(b, a), abs=1e-12)
            assert distortion(a, c) <= distortion(a, b) + distortion(b, c) + 1e-12


def test_scenario_rejects_bad_thresholds():
    with pytest.raises(ValueError):
        FvdThresholds(s_st=40.0, s_go=35.0)
    with pytest.raises(ValueError):
        ThetaParams(-1.0, 0.5)
