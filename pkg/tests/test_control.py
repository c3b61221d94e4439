import numpy as np
import pytest
from numpy.testing import assert_allclose

from ballbot_lab.control import (MpcConfig, MpcController, SmoothStepRef,
                                 build_predictor, build_qp, design_lqr,
                                 smooth_step)
from ballbot_lab.errors import StabilizabilityError
from ballbot_lab.numerics import spectral_radius, zoh_discretize
from ballbot_lab.plant import LinearParams, build_linear_ss
from ballbot_lab.qp import solve

from oracles import literal_lift

TS = 0.005
Q_LQR = np.diag([20.0, 100.0, 10.0, 50.0])
R_LQR = [[200.0]]


@pytest.fixture(scope="module")
def dss():
    return zoh_discretize(build_linear_ss(LinearParams.reference()), TS)


@pytest.fixture(scope="module")
def lqr(dss):
    return design_lqr(dss, Q_LQR, R_LQR)


@pytest.fixture(scope="module")
def pred(dss, lqr):
    return build_predictor(dss, lqr.K, m=20)


class TestDesignLqr:
    def test_closed_loop_in_unit_circle(self, dss, lqr):
        assert spectral_radius(dss.A_d - dss.B_d @ lqr.K) < 1.0
        assert max(abs(e) for e in lqr.closed_loop_eigs) < 1.0

    def test_control_weight_insensitivity(self, dss, lqr):
        bigger_r = design_lqr(dss, Q_LQR, [[2000.0]])
        change = np.linalg.norm(bigger_r.K - lqr.K) / np.linalg.norm(lqr.K)
        assert change < 0.5

    def test_tilt_weight_speeds_settling(self, dss):
        times = []
        for q_theta in (100.0, 1000.0, 10000.0):
            d = design_lqr(dss, np.diag([20.0, q_theta, 10.0, 50.0]), R_LQR)
            x = np.array([0.0, 2.0, 0.0, 0.0])
            settle = None
            for k in range(4000):
                x = dss.A_d @ x - dss.B_d[:, 0] * (d.K @ x)[0]
                if settle is None and abs(x[1]) < 0.05:
                    settle = k * TS
            times.append(settle)
        assert times[0] >= times[1] >= times[2]

    def test_unstabilizable_propagates(self):
        from ballbot_lab.numerics import DiscreteSS
        bad = DiscreteSS(np.diag([2.0, 0.5]), np.array([[0.0], [1.0]]), TS)
        with pytest.raises(StabilizabilityError):
            design_lqr(bad, np.eye(2), [[1.0]])


class TestBuildPredictor:
    def test_m_equals_one(self, dss, lqr):
        p = build_predictor(dss, lqr.K, m=1)
        assert_allclose(p.A_bar, dss.A_d - dss.B_d @ lqr.K, atol=1e-14)
        assert_allclose(p.B_bar, dss.B_d, atol=1e-14)

    def test_lift_matches_literal_composition(self, dss, lqr, pred):
        A_cl = dss.A_d - dss.B_d @ lqr.K
        rng = np.random.default_rng(17)
        for _ in range(100):
            x0 = rng.normal(size=4)
            u = rng.normal()
            lifted = pred.A_bar @ x0 + pred.B_bar[:, 0] * u
            literal = literal_lift(A_cl, dss.B_d, x0, u, 20)
            assert np.max(np.abs(lifted - literal)) < 1e-12 * max(
                1.0, np.max(np.abs(literal)))

    def test_spectral_radius_power_rule(self, dss, lqr, pred):
        rho_inner = spectral_radius(dss.A_d - dss.B_d @ lqr.K)
        assert_allclose(spectral_radius(pred.A_bar), rho_inner ** 20, rtol=1e-9)

    def test_unstable_inner_loop_refused(self, dss):
        with pytest.raises(StabilizabilityError):
            build_predictor(dss, np.zeros((1, 4)), m=20)  # open loop unstable

    def test_period(self, pred):
        assert pred.Ts == pytest.approx(0.1)


class TestBuildQp:
    def test_structural_counts(self, pred):
        cfg = MpcConfig(N=7)
        ref = np.zeros((8, 4))
        prob = build_qp(pred, cfg, np.zeros(4), ref)
        n_eq = 4 * 7
        assert prob.n == 4 * 7 + 7
        assert prob.m == n_eq + 3 * 7 + 7
        eq_rows = np.isfinite(prob.l) & (prob.u - prob.l <= 1e-12)
        assert int(eq_rows[:n_eq].sum()) == n_eq
        # position is unconstrained: no inequality row touches a y entry
        y_cols = [4 * k for k in range(7)]
        assert np.all(prob.A[n_eq:, y_cols] == 0.0)

    def test_equilibrium_reference_gives_zero_input(self, pred):
        cfg = MpcConfig(N=10)
        ref = np.zeros((11, 4))
        prob = build_qp(pred, cfg, np.zeros(4), ref)
        sol = solve(prob)
        assert sol.status == "solved"
        u = sol.z[40:]
        assert np.max(np.abs(u)) < 1e-6
        assert abs(sol.objective) < 1e-9

    def test_single_step_matches_hand_kkt(self, pred):
        # unconstrained single-step problem: u* = (B'QB + R)^-1 B'Q (r - A x0)
        cfg = MpcConfig(N=1, theta_max=1e9, ydot_max=1e9,
                        thetadot_max=1e9, u_max=1e9)
        rng = np.random.default_rng(23)
        x0 = rng.normal(size=4) * 0.1
        r = np.array([5.0, 0.0, 0.0, 0.0])
        prob = build_qp(pred, cfg, x0, np.stack([np.zeros(4), r]))
        sol = solve(prob)
        Q = cfg.Q_N
        Bb = pred.B_bar
        Ax = pred.A_bar @ x0
        u_hand = np.linalg.solve(Bb.T @ Q @ Bb + cfg.R,
                                 Bb.T @ Q @ (r - Ax))
        assert_allclose(sol.z[4], u_hand[0], rtol=1e-5)

    def test_reference_shape_checked(self, pred):
        with pytest.raises(ValueError):
            build_qp(pred, MpcConfig(N=3), np.zeros(4), np.zeros((3, 4)))


class TestMpcController:
    def test_zero_reference_zero_output(self, pred):
        ctrl = MpcController(pred, MpcConfig())
        ref = np.zeros((41, 4))
        u, info = ctrl.mpc_step(np.zeros(4), ref)
        assert info["status"] == "solved"
        assert abs(u) <= 1e-3

    def test_deterministic(self, pred):
        ref = np.zeros((41, 4))
        ref[:, 0] = 5.0
        x0 = np.array([0.0, 0.5, 0.0, 0.0])
        u1, _ = MpcController(pred, MpcConfig()).mpc_step(x0, ref)
        u2, _ = MpcController(pred, MpcConfig()).mpc_step(x0, ref)
        assert u1 == u2

    def test_warm_resolve_is_cheap(self, pred):
        # the controller warm-starts from the previous solution shifted one
        # step, so a re-solve is much cheaper than the cold solve but not
        # the single-iteration exit of an identical-point restart (that case
        # is covered at the solver level in test_qp)
        ctrl = MpcController(pred, MpcConfig())
        ref = np.zeros((41, 4))
        ref[:, 0] = np.linspace(0, 10, 41)
        x0 = np.zeros(4)
        _, info1 = ctrl.mpc_step(x0, ref)
        _, info2 = ctrl.mpc_step(x0, ref)
        assert info2["iterations"] < info1["iterations"]
        assert info2["iterations"] <= 100

    def test_step_reference_pushes_toward_target_within_tilt_box(self, pred):
        ctrl = MpcController(pred, MpcConfig())
        ref_spec = SmoothStepRef(t0=0.0, amplitude=20.0, T_rise=2.0)
        ref = np.stack([smooth_step(ref_spec, 0.1 * j) for j in range(41)])
        u, info = ctrl.mpc_step(np.zeros(4), ref)
        assert info["status"] in ("solved", "max-iter")
        states = ctrl.predicted_states()
        assert np.max(np.abs(states[:, 1])) <= 3.0 + 1e-6
        # the plan moves toward the target; the step size is small because
        # the identified model's velocity damping makes the ball crawl
        # (see the README tracking notes)
        assert states[-1, 0] > 0.0
        assert states[-1, 0] > states[0, 0]

    def test_vector_update_path_matches_fresh_assembly(self, pred):
        # after the first solve the controller refreshes only q, l, u; that
        # fast path must reproduce a from-scratch problem assembly exactly
        ctrl = MpcController(pred, MpcConfig())
        ref1 = np.zeros((41, 4))
        ctrl.mpc_step(np.zeros(4), ref1)
        x0 = np.array([0.3, -0.4, 1.2, 0.8])
        ref2 = np.zeros((41, 4))
        ref2[:, 0] = np.linspace(0.0, 7.0, 41)
        ctrl.mpc_step(x0, ref2)
        fresh = build_qp(pred, MpcConfig(), x0, ref2)
        assert_allclose(ctrl._solver.prob.q, fresh.q, atol=0)
        assert_allclose(ctrl._solver.prob.l, fresh.l, atol=0)
        assert_allclose(ctrl._solver.prob.u, fresh.u, atol=0)

    def test_infeasible_event_returns_zero(self, pred):
        # an unreachable first-step state box makes the QP infeasible
        cfg = MpcConfig(theta_max=1e-9, ydot_max=1e-9, thetadot_max=1e-9,
                        u_max=1e-9)
        ctrl = MpcController(pred, cfg)
        ref = np.zeros((41, 4))
        x0 = np.array([0.0, 2.9, 0.0, 0.0])
        u, info = ctrl.mpc_step(x0, ref)
        assert info["infeasible"]
        assert u == 0.0
        assert ctrl.infeasible_events == 1


class TestDualModeEquivalence:
    def test_lifted_prediction_matches_fast_loop(self, dss, lqr, pred):
        # run the real two-rate loop (no filter) with a random slow input
        # sequence; the lifted model must land on the same states at every
        # slow tick
        rng = np.random.default_rng(31)
        u_seq = rng.normal(scale=20.0, size=12)
        x_fast = rng.normal(size=4) * 0.2
        x_slow = x_fast.copy()
        for u_slow in u_seq:
            for _ in range(20):
                u = -(lqr.K @ x_fast)[0] + u_slow
                x_fast = dss.A_d @ x_fast + dss.B_d[:, 0] * u
            x_slow = pred.A_bar @ x_slow + pred.B_bar[:, 0] * u_slow
            assert np.max(np.abs(x_fast - x_slow)) < 1e-9


class TestSmoothStep:
    def test_before_step(self):
        ref = SmoothStepRef(t0=5.0, amplitude=20.0, T_rise=2.0)
        assert_allclose(smooth_step(ref, 4.999), np.zeros(4), atol=0)

    def test_midpoint(self):
        ref = SmoothStepRef(t0=5.0, amplitude=20.0, T_rise=2.0)
        assert_allclose(smooth_step(ref, 6.0)[0], 10.0, rtol=1e-12)

    def test_after_rise(self):
        ref = SmoothStepRef(t0=5.0, amplitude=20.0, T_rise=2.0)
        assert smooth_step(ref, 7.0)[0] == 20.0
        assert smooth_step(ref, 100.0)[0] == 20.0
        assert_allclose(smooth_step(ref, 8.3)[1:], np.zeros(3), atol=0)

    def test_monotone_rise(self):
        ref = SmoothStepRef(t0=1.0, amplitude=20.0, T_rise=2.0)
        ts = np.linspace(0.5, 3.5, 200)
        vals = [smooth_step(ref, t)[0] for t in ts]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
