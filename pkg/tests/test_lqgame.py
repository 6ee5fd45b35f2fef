import numpy as np
import pytest
from numpy.testing import assert_allclose

from dualsmpc.dynamics import Box, DoubleIntegrator, JointDynamics, LinearAgent
from dualsmpc.lqgame import (
    EffortCost, GameSolverError, InvalidQModelError, QModel, QuadraticCost,
    TrackingCost, best_case_q, box_quadratic_extremum, extremal_value, nash_q,
    q_model_from_game, solve_ilq_game, worst_case_q,
)


def lqr_gains(A, B, Q, R, QF, N):
    """Independent textbook discrete-time LQR Riccati recursion.

    Stage cost x'Qx + u'Ru (note: no 1/2), terminal x'QFx.
    """
    P = 2.0 * QF
    Ks = []
    for _ in range(N):
        S = 2.0 * R + B.T @ P @ B
        K = np.linalg.solve(S, B.T @ P @ A)
        P = 2.0 * Q + K.T @ (2.0 * R) @ K + (A - B @ K).T @ P @ (A - B @ K)
        Ks.append(K)
    return Ks[::-1]


def make_linear_joint(A, B, dt=0.1):
    n, m = B.shape
    agent = LinearAgent(A, B, dt=dt, bounds=Box(-10 * np.ones(m), 10 * np.ones(m)))
    return JointDynamics("robot", agent, humans=[])


def tracking(dim_x, W, ref=None, dims=None):
    dims = list(range(dim_x)) if dims is None else dims
    ref = np.zeros(len(dims)) if ref is None else ref
    return TrackingCost(dim_x, dims, W, ref)


class TestLqrReduction:
    def test_single_player_matches_lqr(self):
        rng = np.random.default_rng(7)
        A = np.array([[1.0, 0.1], [0.0, 1.0]])
        B = np.array([[0.005], [0.1]])
        Q = np.diag([2.0, 0.5])
        R = np.array([[0.3]])
        QF = np.diag([5.0, 1.0])
        N = 12
        model = make_linear_joint(A, B)
        cost = QuadraticCost(
            dim_x=2,
            state_terms=[tracking(2, Q)],
            control_terms=[EffortCost(0, R)],
            terminal_terms=[tracking(2, QF)])
        x0 = rng.normal(size=2)
        sol = solve_ilq_game(model, [cost], horizon=N, x0=x0)
        assert sol.converged
        Ks_oracle = lqr_gains(A, B, Q, R, QF, N)
        for k in range(N):
            assert_allclose(sol.strategy.K[0][k], Ks_oracle[k], atol=1e-8)

    def test_decoupled_two_player_equals_two_lqrs(self):
        # Block-diagonal dynamics, per-agent costs: the game must decouple.
        A1 = np.array([[1.0, 0.1], [0.0, 1.0]])
        B1 = np.array([[0.0], [0.1]])
        robot = LinearAgent(A1, B1, dt=0.1, bounds=Box([-10.0], [10.0]))
        human = LinearAgent(A1, B1, dt=0.1, bounds=Box([-10.0], [10.0]))
        model = JointDynamics("robot", robot, humans=[("human", human)])
        Q = np.diag([1.0, 0.2])
        R = np.array([[0.5]])
        QF = np.diag([3.0, 0.4])
        cost_r = QuadraticCost(4, [tracking(4, Q, dims=[0, 1])],
                               [EffortCost(0, R)], [tracking(4, QF, dims=[0, 1])])
        cost_h = QuadraticCost(4, [tracking(4, Q, dims=[2, 3])],
                               [EffortCost(1, R)], [tracking(4, QF, dims=[2, 3])])
        x0 = np.array([1.0, -0.4, -2.0, 0.3])
        sol = solve_ilq_game(model, [cost_r, cost_h], horizon=10, x0=x0)
        assert sol.converged
        Ks_oracle = lqr_gains(A1, B1, Q, R, QF, 10)
        for k in range(10):
            assert_allclose(sol.strategy.K[0][k][:, :2], Ks_oracle[k], atol=1e-8)
            assert_allclose(sol.strategy.K[0][k][:, 2:], 0.0, atol=1e-10)
            assert_allclose(sol.strategy.K[1][k][:, 2:], Ks_oracle[k], atol=1e-8)
            assert_allclose(sol.strategy.K[1][k][:, :2], 0.0, atol=1e-10)

    def test_pursuit_game_converges(self):
        # Scalar double integrators; robot chases human, human flees to a goal.
        robot = DoubleIntegrator(dt=0.2, bounds=Box([-3.0], [3.0]))
        human = DoubleIntegrator(dt=0.2, bounds=Box([-3.0], [3.0]))
        model = JointDynamics("robot", robot, humans=[("human", human)])
        # robot wants p_R ~ p_H: weight on difference via TrackingCost on both dims
        gap = TrackingCost(4, [0, 2], np.array([[1.0, -1.0], [-1.0, 1.0]]),
                           np.zeros(2))
        cost_r = QuadraticCost(4, [gap], [EffortCost(0, np.array([[0.2]]))],
                               [gap])
        cost_h = QuadraticCost(4, [tracking(4, np.diag([1.0, 0.1]), ref=np.array([5.0, 0.0]), dims=[2, 3])],
                               [EffortCost(1, np.array([[0.2]]))],
                               [tracking(4, np.diag([2.0, 0.1]), ref=np.array([5.0, 0.0]), dims=[2, 3])])
        sol = solve_ilq_game(model, [cost_r, cost_h], horizon=15,
                             x0=np.array([0.0, 0.0, 2.0, 0.0]))
        assert sol.converged
        assert sol.trajectory_delta < 1e-6
        assert sol.iterations <= 50

    def test_singular_riccati_raises_with_stage(self):
        # Zero terminal value and zero state cost with zero B makes S singular
        # only if R is singular; EffortCost forbids that, so craft directly.
        A = np.eye(1)
        B = np.zeros((1, 1))
        model = make_linear_joint(A, B)

        class BadEffort(EffortCost):
            def __init__(self):
                self.player = 0
                self.R = np.array([[0.0]])
                self.ref = np.zeros(1)

        cost = QuadraticCost(1, [tracking(1, np.eye(1))], [BadEffort()], [])
        with pytest.raises(GameSolverError, match="stage"):
            solve_ilq_game(model, [cost], horizon=3, x0=np.ones(1))


def pursuit_solution(horizon=12):
    robot = DoubleIntegrator(dt=0.2, bounds=Box([-3.0], [3.0]))
    human = DoubleIntegrator(dt=0.2, bounds=Box([-3.0], [3.0]))
    model = JointDynamics("robot", robot, humans=[("human", human)])
    gap = TrackingCost(4, [0, 2], np.array([[1.0, -1.0], [-1.0, 1.0]]), np.zeros(2))
    cost_r = QuadraticCost(4, [gap], [EffortCost(0, np.array([[0.3]]))], [gap])
    cost_h = QuadraticCost(
        4, [tracking(4, np.diag([0.8, 0.1]), ref=np.array([4.0, 0.0]), dims=[2, 3]), gap],
        [EffortCost(1, np.array([[0.3]]))],
        [tracking(4, np.diag([1.5, 0.1]), ref=np.array([4.0, 0.0]), dims=[2, 3])])
    sol = solve_ilq_game(model, [cost_r, cost_h], horizon=horizon,
                         x0=np.array([0.0, 0.5, 2.0, -0.2]))
    return model, sol


class TestQModel:
    def test_argmax_matches_equilibrium_policy(self):
        model, sol = pursuit_solution()
        for stage in (0, 3, 7):
            q = q_model_from_game(sol, model, player=1, stage=stage)
            rng = np.random.default_rng(stage)
            for _ in range(3):
                x = sol.xs[stage] + 0.1 * rng.normal(size=4)
                uR = sol.strategy.control(0, stage, x)
                expected = sol.strategy.control(1, stage, x)
                assert_allclose(q.argmax_uH(x, uR), expected, atol=1e-8)

    def test_symmetric_problem_zero_action(self):
        # Perfectly at rest at the cost minimum: equilibrium action is zero.
        robot = DoubleIntegrator(dt=0.2, bounds=Box([-3.0], [3.0]))
        human = DoubleIntegrator(dt=0.2, bounds=Box([-3.0], [3.0]))
        model = JointDynamics("robot", robot, humans=[("human", human)])
        cost_r = QuadraticCost(4, [tracking(4, np.diag([1.0, 0.1]), dims=[0, 1])],
                               [EffortCost(0, np.array([[0.5]]))], [])
        cost_h = QuadraticCost(4, [tracking(4, np.diag([1.0, 0.1]), dims=[2, 3])],
                               [EffortCost(1, np.array([[0.5]]))], [])
        sol = solve_ilq_game(model, [cost_r, cost_h], horizon=5, x0=np.zeros(4))
        q = q_model_from_game(sol, model, player=1, stage=0)
        assert_allclose(q.argmax_uH(np.zeros(4), np.zeros(1)), np.zeros(1), atol=1e-10)

    def test_hessian_matches_finite_differences(self):
        model, sol = pursuit_solution()
        q = q_model_from_game(sol, model, player=1, stage=2)

        def value_of_uH(uH):
            return q.value(sol.xs[2] + 0.05, sol.us[0][2] + 0.02, uH)

        h = 1e-4
        u0 = sol.us[1][2]
        fd = (value_of_uH(u0 + h) - 2 * value_of_uH(u0) + value_of_uH(u0 - h)) / h ** 2
        assert_allclose(fd, q.HHH[0, 0], rtol=1e-4, atol=1e-4)

        # cross check the full Q value against an explicit composition
        stage = 2
        c, l, Q, rs, Rs = sol.stage_quads[stage][1]
        Z = sol.Zs[1][stage + 1]
        zeta = sol.zetas[1][stage + 1]
        zc = sol.zconsts[1][stage + 1]
        rng = np.random.default_rng(0)
        dx = 0.1 * rng.normal(size=4)
        duR = 0.1 * rng.normal(size=1)
        duH = 0.1 * rng.normal(size=1)
        A, Bs = sol.As[stage], sol.Bs[stage]
        dxn = A @ dx + Bs[0] @ duR + Bs[1] @ duH
        cost_direct = (c + l @ dx + 0.5 * dx @ Q @ dx + rs[1] @ duH
                       + 0.5 * duH @ Rs[1] @ duH
                       + zc + zeta @ dxn + 0.5 * dxn @ Z @ dxn)
        got = q.value(sol.xs[stage] + dx, sol.us[0][stage] + duR,
                      sol.us[1][stage] + duH)
        assert_allclose(got, -cost_direct, rtol=1e-10, atol=1e-10)

    def test_invalid_u_hessian_rejected(self):
        with pytest.raises(InvalidQModelError):
            QModel(x0=np.zeros(1), uR0=np.zeros(1), uH0=np.zeros(1),
                   const=0.0, gx=np.zeros(1), gR=np.zeros(1), gH=np.zeros(1),
                   Hxx=np.zeros((1, 1)), HxR=np.zeros((1, 1)), HxH=np.zeros((1, 1)),
                   HRR=np.zeros((1, 1)), HRH=np.zeros((1, 1)),
                   HHH=np.array([[1.0]]))


class TestModeVariants:
    def setup_method(self):
        self.model, self.sol = pursuit_solution()
        self.q = q_model_from_game(self.sol, self.model, player=1, stage=1)
        self.box = Box([-2.0], [2.0])

    def test_oblivious_gradient_in_uR_is_zero(self):
        qo = worst_case_q(self.q, self.box)  # any frozen-uR variant ignores uR
        x = self.sol.xs[1] + 0.3
        g = qo.grad_uR(x, np.array([0.7]), np.array([0.1]))
        assert_allclose(g, 0.0, atol=1e-14)

    def test_pointwise_ordering_protected_nash_wishful(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = self.sol.xs[1] + 0.5 * rng.normal(size=4)
            uH = self.sol.us[1][1] + rng.normal(size=1)
            lo = extremal_value(self.q, x, uH, self.box, "min")
            hi = extremal_value(self.q, x, uH, self.box, "max")
            qn = nash_q(self.q, self.sol, stage=1)
            uR_nash = self.sol.strategy.control(0, 1, x)
            mid_free = self.q.value(x, np.clip(uR_nash, -2, 2), uH)
            assert lo <= mid_free + 1e-10
            assert mid_free <= hi + 1e-10
            # the substituted-Nash quadratic agrees with direct evaluation
            assert_allclose(qn.value(x, np.zeros(1), uH),
                            self.q.value(x, uR_nash, uH), atol=1e-9)

    def test_modes_coincide_without_uR_dependence(self):
        q = self.q.substitute_robot_control(np.zeros((1, 4)), np.zeros(1))
        qp = worst_case_q(q, self.box)
        qw = best_case_q(q, self.box)
        x = self.sol.xs[1]
        uH = np.array([0.3])
        assert_allclose(qp.value(x, np.zeros(1), uH), qw.value(x, np.zeros(1), uH),
                        atol=1e-12)


class TestBoxQuadratic:
    def test_interior_minimum(self):
        H = np.diag([2.0, 4.0])
        g = np.array([-2.0, -4.0])
        box = Box([-5.0, -5.0], [5.0, 5.0])
        val, u = box_quadratic_extremum(H, g, 1.0, box, "min")
        assert_allclose(u, [1.0, 1.0], atol=1e-12)
        assert_allclose(val, 1.0 - 1.0 - 2.0, atol=1e-12)

    def test_concave_max_on_face(self):
        H = -np.eye(2)
        g = np.array([10.0, 0.0])
        box = Box([-1.0, -1.0], [1.0, 1.0])
        val, u = box_quadratic_extremum(H, g, 0.0, box, "max")
        assert_allclose(u, [1.0, 0.0], atol=1e-12)

    def test_concave_min_at_vertex(self):
        H = -np.eye(2)
        g = np.zeros(2)
        box = Box([-1.0, -2.0], [1.0, 2.0])
        val, u = box_quadratic_extremum(H, g, 0.0, box, "min")
        assert_allclose(val, -0.5 * (1 + 4), atol=1e-12)
        assert abs(u[0]) == 1.0 and abs(u[1]) == 2.0

    def test_matches_grid_search(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            M = rng.normal(size=(2, 2))
            H = M + M.T
            g = rng.normal(size=2)
            box = Box([-1.0, -1.5], [0.8, 1.2])
            val, _ = box_quadratic_extremum(H, g, 0.0, box, "min")
            gx, gy = np.meshgrid(np.linspace(-1, 0.8, 301), np.linspace(-1.5, 1.2, 301))
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
            vals = 0.5 * np.einsum("ni,ij,nj->n", pts, H, pts) + pts @ g
            assert val <= vals.min() + 1e-9
            assert val >= vals.min() - 0.02  # grid resolution slack
