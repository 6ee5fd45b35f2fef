"""Iterative linear-quadratic game solver and quadratic Q-value models.

The solver alternates (i) linearizing the joint dynamics and quadraticizing
player costs around a nominal trajectory, (ii) solving the coupled Riccati
system for feedback Nash strategies of the local LQ game, and (iii) a
line-searched rollout of the new strategies. Player state-action value
functions are read off the same backward recursion as quadratic models in
(x, u_robot, u_human), which is what the human behavior model and the
SMPC assembly consume.

Sign convention: player costs are minimized; ``QModel`` stores the human's
*utility* (negated cost-to-go composition), so its control Hessian block is
negative definite and the Boltzmann mode is the argmax.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import Box, JointDynamics


class GameSolverError(RuntimeError):
    """Coupled Riccati stage system is singular or the game is ill-posed."""


class InvalidQModelError(ValueError):
    """Q-model violates the negative-definite control-Hessian requirement."""


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# Cost terms


class StateCostTerm:
    """Smooth cost depending on the joint state only."""

    def value(self, k: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def quadraticize(self, k: int, x: np.ndarray):
        """Returns (value, gradient, hessian) at x."""
        raise NotImplementedError


class ControlCostTerm:
    """Cost on one player's control; must have PD Hessian."""

    player: int

    def value(self, k: int, u: np.ndarray) -> float:
        raise NotImplementedError

    def quadraticize(self, k: int, u: np.ndarray):
        raise NotImplementedError


class TrackingCost(StateCostTerm):
    """(x[dims] - ref_k)' W (x[dims] - ref_k), embedded in joint coordinates.

    ``ref`` is either a constant vector or an array indexed by stage.
    """

    def __init__(self, dim_x: int, dims, W, ref):
        self.dim_x = dim_x
        self.dims = np.asarray(dims, dtype=int)
        self.W = np.atleast_2d(np.asarray(W, dtype=float))
        ref = np.asarray(ref, dtype=float)
        self.per_stage = ref.ndim == 2
        self.ref = ref

    def _ref(self, k):
        if self.per_stage:
            return self.ref[min(k, self.ref.shape[0] - 1)]
        return self.ref

    def value(self, k, x):
        e = x[self.dims] - self._ref(k)
        return float(e @ self.W @ e)

    def quadraticize(self, k, x):
        e = x[self.dims] - self._ref(k)
        g = np.zeros(self.dim_x)
        H = np.zeros((self.dim_x, self.dim_x))
        g[self.dims] = 2.0 * self.W @ e
        H[np.ix_(self.dims, self.dims)] = 2.0 * self.W
        return float(e @ self.W @ e), g, H


class EffortCost(ControlCostTerm):
    """(u - ref)' R (u - ref) on one player's own control, R strictly PD."""

    def __init__(self, player: int, R, ref=None):
        self.player = player
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("control weight must be strictly positive definite")
        self.ref = np.zeros(self.R.shape[0]) if ref is None else np.asarray(ref, dtype=float)

    def value(self, k, u):
        e = u - self.ref
        return float(e @ self.R @ e)

    def quadraticize(self, k, u):
        e = u - self.ref
        return float(e @ self.R @ e), 2.0 * self.R @ e, 2.0 * self.R


class ProximityCost(StateCostTerm):
    """Smooth penalty for two agents closing inside an ellipse.

    With q = (dx/a)^2 + (dy/b)^2 and margin m = 1 - q, the penalty is
    weight * softplus(sharpness * m)^2: zero-ish outside the ellipse,
    rapidly growing inside, and infinitely differentiable everywhere.
    """

    def __init__(self, dim_x: int, pos_a, pos_b, semi_axes, weight: float,
                 sharpness: float = 2.0):
        self.dim_x = dim_x
        self.pos_a = tuple(int(i) for i in pos_a)
        self.pos_b = tuple(int(i) for i in pos_b)
        self.a, self.b = float(semi_axes[0]), float(semi_axes[1])
        self.weight = float(weight)
        self.alpha = float(sharpness)

    def _margin(self, x):
        dx = x[self.pos_a[0]] - x[self.pos_b[0]]
        dy = x[self.pos_a[1]] - x[self.pos_b[1]]
        return 1.0 - (dx / self.a) ** 2 - (dy / self.b) ** 2, dx, dy

    def value(self, k, x):
        m, _, _ = self._margin(x)
        return self.weight * _softplus(self.alpha * m) ** 2

    def quadraticize(self, k, x):
        m, dx, dy = self._margin(x)
        idx = [self.pos_a[0], self.pos_a[1], self.pos_b[0], self.pos_b[1]]
        # dm/dx on (ax, ay, bx, by)
        gm = np.array([-2 * dx / self.a ** 2, -2 * dy / self.b ** 2,
                       2 * dx / self.a ** 2, 2 * dy / self.b ** 2])
        Hm = np.zeros((4, 4))
        Hm[0, 0] = Hm[2, 2] = -2 / self.a ** 2
        Hm[1, 1] = Hm[3, 3] = -2 / self.b ** 2
        Hm[0, 2] = Hm[2, 0] = 2 / self.a ** 2
        Hm[1, 3] = Hm[3, 1] = 2 / self.b ** 2
        s = _softplus(self.alpha * m)
        sg = _sigmoid(self.alpha * m)
        val = self.weight * s ** 2
        coeff_g = 2 * self.weight * s * sg * self.alpha
        g_small = coeff_g * gm
        H_small = (2 * self.weight * self.alpha ** 2 * sg * (sg + s * (1 - sg))
                   * np.outer(gm, gm) + coeff_g * Hm)
        g = np.zeros(self.dim_x)
        H = np.zeros((self.dim_x, self.dim_x))
        g[idx] = g_small
        H[np.ix_(idx, idx)] = H_small
        return val, g, H


@dataclass
class QuadraticCost:
    """One player's cost: stage state/control terms plus terminal state terms."""

    dim_x: int
    state_terms: list = field(default_factory=list)
    control_terms: list = field(default_factory=list)
    terminal_terms: list = field(default_factory=list)

    def stage_value(self, k, x, us) -> float:
        v = sum(t.value(k, x) for t in self.state_terms)
        v += sum(t.value(k, us[t.player]) for t in self.control_terms)
        return float(v)

    def terminal_value(self, x) -> float:
        return float(sum(t.value(0, x) for t in self.terminal_terms))

    def quadraticize_stage(self, k, x, us, dims_u):
        c, l, Q = 0.0, np.zeros(self.dim_x), np.zeros((self.dim_x, self.dim_x))
        for t in self.state_terms:
            cv, g, H = t.quadraticize(k, x)
            c += cv
            l += g
            Q += H
        rs = [np.zeros(m) for m in dims_u]
        Rs = [np.zeros((m, m)) for m in dims_u]
        for t in self.control_terms:
            cv, g, H = t.quadraticize(k, us[t.player])
            c += cv
            rs[t.player] = rs[t.player] + g
            Rs[t.player] = Rs[t.player] + H
        return c, l, _psd_clamp(Q), rs, Rs

    def quadraticize_terminal(self, x):
        c, l, Q = 0.0, np.zeros(self.dim_x), np.zeros((self.dim_x, self.dim_x))
        for t in self.terminal_terms:
            cv, g, H = t.quadraticize(0, x)
            c += cv
            l += g
            Q += H
        return c, l, _psd_clamp(Q)

    def trajectory_value(self, xs, us_by_player) -> float:
        N = len(us_by_player[0])
        total = sum(self.stage_value(k, xs[k], [u[k] for u in us_by_player])
                    for k in range(N))
        return total + self.terminal_value(xs[N])


def _psd_clamp(H: np.ndarray) -> np.ndarray:
    """Project a symmetric matrix onto the PSD cone (Riccati health)."""
    H = 0.5 * (H + H.T)
    w = np.linalg.eigvalsh(H)
    if w[0] >= 0:
        return H
    w, V = np.linalg.eigh(H)
    return (V * np.maximum(w, 0.0)) @ V.T


# ---------------------------------------------------------------------------
# Strategies and game solution


@dataclass(frozen=True)
class FeedbackStrategy:
    """Per-stage affine policies around a nominal trajectory.

    Player p at stage k plays u = u_nom[p][k] - K[p][k] (x - x_nom[k]) - k_ff[p][k].
    """

    x_nom: np.ndarray
    u_nom: tuple[np.ndarray, ...]
    K: tuple[np.ndarray, ...]
    k_ff: tuple[np.ndarray, ...]

    @property
    def horizon(self) -> int:
        return self.u_nom[0].shape[0]

    @property
    def num_players(self) -> int:
        return len(self.u_nom)

    def control(self, player: int, stage: int, x: np.ndarray) -> np.ndarray:
        dx = np.asarray(x, dtype=float) - self.x_nom[stage]
        return (self.u_nom[player][stage] - self.K[player][stage] @ dx
                - self.k_ff[player][stage])


@dataclass(frozen=True)
class GameSolution:
    strategy: FeedbackStrategy
    xs: np.ndarray
    us: tuple[np.ndarray, ...]
    converged: bool
    iterations: int
    trajectory_delta: float
    # final-pass LQ data, reused by q_model_from_game
    As: np.ndarray
    Bs: tuple[np.ndarray, ...]
    stage_quads: list          # per stage: (c, l, Q, rs, Rs) per player
    terminal_quads: list       # per player: (c, l, Q)
    Zs: tuple[np.ndarray, ...]      # per player: [N+1, n, n]
    zetas: tuple[np.ndarray, ...]   # per player: [N+1, n]
    zconsts: tuple[np.ndarray, ...]  # per player: [N+1]


def _player_inputs(model: JointDynamics):
    dims = [model.dim_uR] + [m.dim_u for m in model.human_models]
    return dims


def _split_B(model: JointDynamics, BR, BH):
    Bs = [BR] + [BH[:, sl] for sl in model.human_u_slices]
    return Bs


def _solve_stage(Zs_next, zetas_next, A, Bs, rs, Rs, k_idx):
    """Coupled FBNE stage system: stacked gains and feedforwards."""
    P = len(Bs)
    dims = [B.shape[1] for B in Bs]
    rows_K, rows_k, blocks = [], [], []
    for i in range(P):
        BiZ = Bs[i].T @ Zs_next[i]
        row = []
        for j in range(P):
            blk = BiZ @ Bs[j]
            if i == j:
                blk = blk + Rs[i][i]
            row.append(blk)
        blocks.append(row)
        rows_K.append(BiZ @ A)
        rows_k.append(Bs[i].T @ zetas_next[i] + rs[i][i])
    S = np.block(blocks)
    YK = np.concatenate(rows_K, axis=0)
    yk = np.concatenate(rows_k, axis=0)
    try:
        sol_K = np.linalg.solve(S, YK)
        sol_k = np.linalg.solve(S, yk)
    except np.linalg.LinAlgError as exc:
        raise GameSolverError(
            f"singular coupled Riccati system at stage {k_idx}") from exc
    splits = np.cumsum(dims)[:-1]
    return np.split(sol_K, splits, axis=0), np.split(sol_k, splits)


def _backward_pass(model, costs, xs, us, horizon):
    """Linearize, quadraticize, and solve the coupled Riccati recursion."""
    P = len(costs)
    n = model.dim_x
    dims_u = _player_inputs(model)
    As = np.zeros((horizon, n, n))
    Bs_stages = []
    stage_quads = []
    for k in range(horizon):
        uH = np.concatenate([us[p][k] for p in range(1, P)]) if P > 1 else np.zeros(0)
        A, BR, BH = model.linearize(xs[k], us[0][k], uH)
        As[k] = A
        Bs_stages.append(_split_B(model, BR, BH))
        stage_quads.append([costs[p].quadraticize_stage(k, xs[k],
                                                        [us[q][k] for q in range(P)],
                                                        dims_u)
                            for p in range(P)])
    terminal_quads = [costs[p].quadraticize_terminal(xs[horizon]) for p in range(P)]

    Zs = [np.zeros((horizon + 1, n, n)) for _ in range(P)]
    zetas = [np.zeros((horizon + 1, n)) for _ in range(P)]
    zconsts = [np.zeros(horizon + 1) for _ in range(P)]
    for p in range(P):
        cF, lF, QF = terminal_quads[p]
        Zs[p][horizon] = QF
        zetas[p][horizon] = lF
        zconsts[p][horizon] = cF

    Ks = [np.zeros((horizon, m, n)) for m in dims_u]
    ks = [np.zeros((horizon, m)) for m in dims_u]
    for k in range(horizon - 1, -1, -1):
        A = As[k]
        Bsk = Bs_stages[k]
        rs = [[stage_quads[k][p][3][q] for q in range(P)] for p in range(P)]
        Rs = [[stage_quads[k][p][4][q] for q in range(P)] for p in range(P)]
        Zn = [Zs[p][k + 1] for p in range(P)]
        zn = [zetas[p][k + 1] for p in range(P)]
        K_list, k_list = _solve_stage(Zn, zn, A, Bsk, rs, Rs, k)
        F = A - sum(Bsk[p] @ K_list[p] for p in range(P))
        beta = -sum(Bsk[p] @ k_list[p] for p in range(P))
        for p in range(P):
            c, l, Q, rp, Rp = stage_quads[k][p]
            Kp, kp = K_list[p], k_list[p]
            Zs[p][k] = (Q + Kp.T @ Rp[p] @ Kp + F.T @ Zn[p] @ F)
            Zs[p][k] = 0.5 * (Zs[p][k] + Zs[p][k].T)
            zetas[p][k] = (l + Kp.T @ Rp[p] @ kp - Kp.T @ rp[p]
                           + F.T @ (zn[p] + Zn[p] @ beta))
            zconsts[p][k] = (c + zconsts[p][k + 1] + zn[p] @ beta
                             + 0.5 * beta @ Zn[p] @ beta
                             + 0.5 * kp @ Rp[p] @ kp - rp[p] @ kp)
            Ks[p][k] = Kp
            ks[p][k] = kp
    return Ks, ks, As, Bs_stages, stage_quads, terminal_quads, Zs, zetas, zconsts


def _rollout_policy(model, xs_ref, us_ref, Ks, ks, eps, horizon):
    P = len(us_ref)
    n = model.dim_x
    xs = np.zeros((horizon + 1, n))
    xs[0] = xs_ref[0]
    us = [np.zeros_like(u) for u in us_ref]
    for k in range(horizon):
        dx = xs[k] - xs_ref[k]
        for p in range(P):
            us[p][k] = us_ref[p][k] - Ks[p][k] @ dx - eps * ks[p][k]
        uH = np.concatenate([us[p][k] for p in range(1, P)]) if P > 1 else np.zeros(0)
        xs[k + 1] = model.step(xs[k], us[0][k], uH)
    return xs, us


def _model_cost(quads, terminal, xs_ref, us_ref, xs, us, horizon, player):
    """Quadratic-model cost of (xs, us) around the reference trajectory."""
    total = 0.0
    for k in range(horizon):
        c, l, Q, rs, Rs = quads[k][player]
        dx = xs[k] - xs_ref[k]
        total += c + l @ dx + 0.5 * dx @ Q @ dx
        du = us[player][k] - us_ref[player][k]
        total += rs[player] @ du + 0.5 * du @ Rs[player] @ du
    cF, lF, QF = terminal[player]
    dxN = xs[horizon] - xs_ref[horizon]
    return total + cF + lF @ dxN + 0.5 * dxN @ QF @ dxN


def solve_ilq_game(model: JointDynamics, costs: list[QuadraticCost], horizon: int,
                   x0: np.ndarray, init_controls=None, max_iterations: int = 100,
                   tol: float = 1e-6, line_search_tol: float = 1e-6,
                   line_search_factor: float = 0.5,
                   min_step: float = 2.0 ** -14) -> GameSolution:
    """Approximate local feedback Nash equilibrium of the dynamic game.

    Iterates linearize / quadraticize / coupled-Riccati with a backtracking
    line search on the feedforward terms: an accepted step may not increase
    any player's quadratic-model cost by more than ``line_search_tol``
    (relative). Converged means the trajectory max-norm change fell below
    ``tol``. The iteration seeds from a zero-control rollout unless
    ``init_controls`` (one [horizon, m_p] array per player) is given.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    P = len(costs)
    dims_u = _player_inputs(model)
    if P != len(dims_u):
        raise GameSolverError(f"expected {len(dims_u)} player costs, got {P}")
    x0 = np.asarray(x0, dtype=float)
    if init_controls is None:
        us = [np.zeros((horizon, m)) for m in dims_u]
    else:
        us = [np.array(u, dtype=float) for u in init_controls]
    xs = np.zeros((horizon + 1, model.dim_x))
    xs[0] = x0
    for k in range(horizon):
        uH = np.concatenate([us[p][k] for p in range(1, P)]) if P > 1 else np.zeros(0)
        xs[k + 1] = model.step(xs[k], us[0][k], uH)

    converged = False
    delta = np.inf
    iterations = 0
    for iteration in range(max_iterations):
        iterations = iteration + 1
        Ks, ks, _, _, stage_quads, terminal_quads, _, _, _ = _backward_pass(
            model, costs, xs, us, horizon)
        nominal_model = [
            _model_cost(stage_quads, terminal_quads, xs, us, xs, us,
                        horizon, p) for p in range(P)]
        eps = 1.0
        accepted = None
        while eps >= min_step:
            cand_xs, cand_us = _rollout_policy(model, xs, us, Ks, ks, eps, horizon)
            if not np.all(np.isfinite(cand_xs)):
                eps *= line_search_factor
                continue
            ok = True
            for p in range(P):
                cand = _model_cost(stage_quads, terminal_quads, xs, us,
                                   cand_xs, cand_us, horizon, p)
                if cand > nominal_model[p] + line_search_tol * (1 + abs(nominal_model[p])):
                    ok = False
                    break
            if ok:
                accepted = (cand_xs, cand_us)
                break
            eps *= line_search_factor
        if accepted is None:
            # feedforward direction blocked; freeze the trajectory and stop
            break
        delta = float(np.max(np.abs(accepted[0] - xs)))
        xs, us = accepted
        if delta < tol:
            converged = True
            break

    # final backward pass so strategies and value quadratics match xs, us
    Ks, ks, As, Bs_stages, stage_quads, terminal_quads, Zs, zetas, zconsts = \
        _backward_pass(model, costs, xs, us, horizon)
    strategy = FeedbackStrategy(
        x_nom=xs, u_nom=tuple(us), K=tuple(Ks), k_ff=tuple(ks))
    return GameSolution(
        strategy=strategy, xs=xs, us=tuple(us), converged=converged,
        iterations=iterations, trajectory_delta=delta, As=As,
        Bs=tuple(tuple(b) for b in Bs_stages), stage_quads=stage_quads,
        terminal_quads=terminal_quads, Zs=tuple(Zs), zetas=tuple(zetas),
        zconsts=tuple(zconsts))


# ---------------------------------------------------------------------------
# Quadratic state-action value models


@dataclass(frozen=True)
class QModel:
    """Quadratic human utility Q(x, uR, uH) around a validity point.

    Q = const + gx'dx + gR'duR + gH'duH
        + 1/2 (dx'Hxx dx + duR'HRR duR + duH'HHH duH)
        + dx'HxR duR + dx'HxH duH + duR'HRH duH

    with dx = x - x0 etc. ``HHH`` must be negative definite so that the
    Boltzmann mode and the Laplace covariance exist.
    """

    x0: np.ndarray
    uR0: np.ndarray
    uH0: np.ndarray
    const: float
    gx: np.ndarray
    gR: np.ndarray
    gH: np.ndarray
    Hxx: np.ndarray
    HxR: np.ndarray
    HxH: np.ndarray
    HRR: np.ndarray
    HRH: np.ndarray
    HHH: np.ndarray

    def __post_init__(self):
        if self.HHH.size and np.max(np.linalg.eigvalsh(0.5 * (self.HHH + self.HHH.T))) >= -1e-12:
            raise InvalidQModelError(
                "control Hessian of the Q-model must be negative definite")

    @property
    def dim_uH(self) -> int:
        return self.uH0.shape[0]

    @property
    def dim_uR(self) -> int:
        return self.uR0.shape[0]

    def value(self, x, uR, uH) -> float:
        dx = np.asarray(x, dtype=float) - self.x0
        dR = np.asarray(uR, dtype=float) - self.uR0 if self.dim_uR else np.zeros(0)
        dH = np.asarray(uH, dtype=float) - self.uH0
        return float(self.const + self.gx @ dx + self.gR @ dR + self.gH @ dH
                     + 0.5 * dx @ self.Hxx @ dx + 0.5 * dR @ self.HRR @ dR
                     + 0.5 * dH @ self.HHH @ dH + dx @ self.HxR @ dR
                     + dx @ self.HxH @ dH + dR @ self.HRH @ dH)

    def grad_uH(self, x, uR, uH) -> np.ndarray:
        dx = np.asarray(x, dtype=float) - self.x0
        dR = np.asarray(uR, dtype=float) - self.uR0 if self.dim_uR else np.zeros(0)
        dH = np.asarray(uH, dtype=float) - self.uH0
        return self.gH + self.HxH.T @ dx + self.HRH.T @ dR + self.HHH @ dH

    def grad_uR(self, x, uR, uH) -> np.ndarray:
        dx = np.asarray(x, dtype=float) - self.x0
        dR = np.asarray(uR, dtype=float) - self.uR0 if self.dim_uR else np.zeros(0)
        dH = np.asarray(uH, dtype=float) - self.uH0
        return self.gR + self.HxR.T @ dx + self.HRR @ dR + self.HRH @ dH

    def argmax_uH(self, x, uR) -> np.ndarray:
        """Unconstrained maximizer of Q over uH at (x, uR); affine in both."""
        dx = np.asarray(x, dtype=float) - self.x0
        dR = np.asarray(uR, dtype=float) - self.uR0 if self.dim_uR else np.zeros(0)
        rhs = self.gH + self.HxH.T @ dx + self.HRH.T @ dR
        return self.uH0 + np.linalg.solve(-self.HHH, rhs)

    def argmax_coefficients(self):
        """(const, Mx, MR) with argmax_uH(x, uR) = const + Mx dx + MR duR."""
        neg = -self.HHH
        c = self.uH0 + np.linalg.solve(neg, self.gH)
        Mx = np.linalg.solve(neg, self.HxH.T)
        MR = np.linalg.solve(neg, self.HRH.T)
        return c, Mx, MR

    def substitute_robot_control(self, M: np.ndarray, m: np.ndarray) -> "QModel":
        """Fold duR = M dx + m into the quadratic; the result ignores uR."""
        const = self.const + self.gR @ m + 0.5 * m @ self.HRR @ m
        gx = self.gx + M.T @ self.gR + M.T @ self.HRR @ m + self.HxR @ m
        gH = self.gH + self.HRH.T @ m
        Hxx = self.Hxx + M.T @ self.HRR @ M + self.HxR @ M + M.T @ self.HxR.T
        HxH = self.HxH + M.T @ self.HRH
        nR = self.dim_uR
        nx = self.x0.shape[0]
        return replace(self, const=float(const), gx=gx, gH=gH,
                       Hxx=0.5 * (Hxx + Hxx.T), HxH=HxH,
                       gR=np.zeros(nR), HxR=np.zeros((nx, nR)),
                       HRR=np.zeros((nR, nR)), HRH=np.zeros((nR, self.dim_uH)))


def box_quadratic_extremum(H: np.ndarray, g: np.ndarray, c: float, box: Box,
                           kind: str) -> tuple[float, np.ndarray]:
    """Exact min or max of 1/2 u'Hu + g'u + c over a box (small dims).

    Enumerates every face of the box, taking the face-interior stationary
    point when it exists and is feasible, plus all vertices; exact for any
    curvature because a quadratic attains its box extremum on one of these.
    """
    d = g.shape[0]
    if d > 6:
        raise ValueError("face enumeration is only intended for small input dims")
    best_val, best_u = None, None
    better = (lambda a, b: a < b) if kind == "min" else (lambda a, b: a > b)
    for assignment in itertools.product((0, 1, 2), repeat=d):
        u = np.where(np.asarray(assignment) == 0, box.lower, box.upper).astype(float)
        free = [i for i, a in enumerate(assignment) if a == 2]
        if free:
            fixed = [i for i in range(d) if i not in free]
            Hff = H[np.ix_(free, free)]
            rhs = -(g[free] + (H[np.ix_(free, fixed)] @ u[fixed] if fixed else 0.0))
            try:
                uf = np.linalg.solve(Hff, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.any(uf < box.lower[free] - 1e-12) or np.any(uf > box.upper[free] + 1e-12):
                continue
            u[free] = np.clip(uf, box.lower[free], box.upper[free])
        val = float(0.5 * u @ H @ u + g @ u + c)
        if best_val is None or better(val, best_val):
            best_val, best_u = val, u
    return best_val, best_u


def q_model_from_game(solution: GameSolution, model: JointDynamics,
                      player: int, stage: int) -> QModel:
    """Quadratic Q of one human player implied by the game's value recursion.

    Composes the player's quadraticized stage cost with the next-stage value
    function under the linearized dynamics, with every *other* human player
    substituted by their equilibrium feedback policy. The result is a
    quadratic in (x, uR, uH_player) whose uH-argmax reproduces the player's
    equilibrium policy.
    """
    if player == 0:
        raise ValueError("player 0 is the robot; Q-models are for humans")
    P = len(solution.us)
    horizon = solution.strategy.horizon
    if not 0 <= stage < horizon:
        raise ValueError(f"stage {stage} outside horizon {horizon}")
    A = solution.As[stage]
    Bs = solution.Bs[stage]
    c, l, Q, rs, Rs = solution.stage_quads[stage][player]
    Z = solution.Zs[player][stage + 1]
    zeta = solution.zetas[player][stage + 1]
    zc = solution.zconsts[player][stage + 1]

    Abar = A.copy()
    bbar = np.zeros(model.dim_x)
    for q in range(1, P):
        if q == player:
            continue
        Abar = Abar - Bs[q] @ solution.strategy.K[q][stage]
        bbar = bbar - Bs[q] @ solution.strategy.k_ff[q][stage]
    B0 = Bs[0]
    Bh = Bs[player]
    Zb = Z @ bbar

    cost_const = c + zc + zeta @ bbar + 0.5 * bbar @ Zb
    cost_gx = l + Abar.T @ (zeta + Zb)
    cost_gR = B0.T @ (zeta + Zb)
    cost_gH = rs[player] + Bh.T @ (zeta + Zb)
    cost_Hxx = Q + Abar.T @ Z @ Abar
    cost_HxR = Abar.T @ Z @ B0
    cost_HxH = Abar.T @ Z @ Bh
    cost_HRR = B0.T @ Z @ B0
    cost_HRH = B0.T @ Z @ Bh
    cost_HHH = Rs[player] + Bh.T @ Z @ Bh

    return QModel(
        x0=solution.xs[stage].copy(),
        uR0=solution.us[0][stage].copy(),
        uH0=solution.us[player][stage].copy(),
        const=float(-cost_const), gx=-cost_gx, gR=-cost_gR, gH=-cost_gH,
        Hxx=-0.5 * (cost_Hxx + cost_Hxx.T), HxR=-cost_HxR, HxH=-cost_HxH,
        HRR=-0.5 * (cost_HRR + cost_HRR.T), HRH=-cost_HRH,
        HHH=-0.5 * (cost_HHH + cost_HHH.T))


def nash_q(q: QModel, solution: GameSolution, stage: int) -> QModel:
    """Q with the robot pinned to its equilibrium feedback policy."""
    K0 = solution.strategy.K[0][stage]
    k0 = solution.strategy.k_ff[0][stage]
    return q.substitute_robot_control(-K0, -k0)


def worst_case_q(q: QModel, robot_bounds: Box) -> QModel:
    """Q with the robot playing the box-constrained minimizer ("protected").

    The minimizing robot control is found exactly at the model's validity
    point and then frozen, which keeps the returned model quadratic.
    """
    return _extremal_q(q, robot_bounds, "min")


def best_case_q(q: QModel, robot_bounds: Box) -> QModel:
    """Q with the robot playing the box-constrained maximizer ("wishful")."""
    return _extremal_q(q, robot_bounds, "max")


def _extremal_q(q: QModel, robot_bounds: Box, kind: str) -> QModel:
    shifted = Box(robot_bounds.lower - q.uR0, robot_bounds.upper - q.uR0)
    _, dR = box_quadratic_extremum(q.HRR, q.gR, q.const, shifted, kind)
    return q.substitute_robot_control(np.zeros((q.dim_uR, q.x0.shape[0])), dR)


def oblivious_q(q_own: QModel, state_slice: slice, dim_x: int, dim_uR: int,
                x0: np.ndarray, uR0: np.ndarray) -> QModel:
    """Embed a human-alone Q (over the human's own state block) into the
    joint state space; all robot-related blocks are zero ("oblivious")."""
    dim_uH = q_own.dim_uH
    gx = np.zeros(dim_x)
    gx[state_slice] = q_own.gx
    Hxx = np.zeros((dim_x, dim_x))
    Hxx[state_slice, state_slice] = q_own.Hxx
    HxH = np.zeros((dim_x, dim_uH))
    HxH[state_slice, :] = q_own.HxH
    return QModel(
        x0=np.asarray(x0, dtype=float), uR0=np.asarray(uR0, dtype=float),
        uH0=q_own.uH0, const=q_own.const, gx=gx,
        gR=np.zeros(dim_uR), gH=q_own.gH, Hxx=Hxx,
        HxR=np.zeros((dim_x, dim_uR)), HxH=HxH,
        HRR=np.zeros((dim_uR, dim_uR)), HRH=np.zeros((dim_uR, dim_uH)),
        HHH=q_own.HHH)


def extremal_value(q: QModel, x, uH, robot_bounds: Box, kind: str) -> float:
    """Exact pointwise min/max of Q over the robot's control box at (x, uH)."""
    dx = np.asarray(x, dtype=float) - q.x0
    dH = np.asarray(uH, dtype=float) - q.uH0
    g = q.gR + q.HxR.T @ dx + q.HRH @ dH
    c = (q.const + q.gx @ dx + q.gH @ dH + 0.5 * dx @ q.Hxx @ dx
         + 0.5 * dH @ q.HHH @ dH + dx @ q.HxH @ dH)
    shifted = Box(robot_bounds.lower - q.uR0, robot_bounds.upper - q.uR0)
    val, _ = box_quadratic_extremum(q.HRR, g, float(c), shifted, kind)
    return val
