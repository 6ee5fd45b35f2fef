"""Differentiable scenario-tree rollout.

This module turns a built scenario tree into a jax computation graph:
states, human actions, beliefs, and path probabilities at every node are
smooth functions of the stacked decision vector (robot controls per
non-leaf node, human controls and slacks per non-root node). The belief
measurement updates are embedded as explicit recursions, which is what
lets objective gradients flow from future uncertainty back to the root
control (the implicit dual-control mechanism).

Everything static (topology, layout, weights, geometry) is closed over at
build time; per-solve data (initial state/belief, offline samples, basis
coefficient tables, references) arrives in a parameter dict so the jitted
callables are compiled once per tree shape and reused across planning steps.

Mode probabilities are carried in log space end to end; priors are floored
at 1e-300 outside the graph so one-hot beliefs stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax.scipy.special import logsumexp

from ..dynamics import JointDynamics
from ..tree import DUAL, ScenarioTree
from .costs import CostModel, FailureSet, softplus

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class VariableLayout:
    """Offsets of each node's decision slots in the stacked vector.

    Non-leaf nodes carry a robot control; non-root nodes carry the executed
    human control uH (box constrained), the model-consistent human action
    uHt (tied to the sampled basis combination by an equality constraint),
    and one slack per failure constraint.
    """

    n_nodes: int
    dim_uR: int
    dim_uH: int
    n_slack: int
    uR_offset: np.ndarray      # [n_nodes], -1 where absent (leaves)
    uH_offset: np.ndarray      # [n_nodes], -1 at the root
    uHt_offset: np.ndarray     # [n_nodes], -1 at the root
    slack_offset: np.ndarray   # [n_nodes], -1 at the root
    size: int

    @classmethod
    def build(cls, tree: ScenarioTree, dim_uR: int, dim_uH: int, n_slack: int):
        n_nodes = len(tree)
        uR_offset = np.full(n_nodes, -1, dtype=int)
        uH_offset = np.full(n_nodes, -1, dtype=int)
        uHt_offset = np.full(n_nodes, -1, dtype=int)
        slack_offset = np.full(n_nodes, -1, dtype=int)
        pos = 0
        for node in tree.nodes:
            if not node.is_leaf:
                uR_offset[node.id] = pos
                pos += dim_uR
        for node in tree.nodes:
            if not node.is_root:
                uH_offset[node.id] = pos
                pos += dim_uH
        for node in tree.nodes:
            if not node.is_root:
                uHt_offset[node.id] = pos
                pos += dim_uH
        for node in tree.nodes:
            if not node.is_root and n_slack:
                slack_offset[node.id] = pos
                pos += n_slack
        return cls(n_nodes=n_nodes, dim_uR=dim_uR, dim_uH=dim_uH,
                   n_slack=n_slack, uR_offset=uR_offset, uH_offset=uH_offset,
                   uHt_offset=uHt_offset, slack_offset=slack_offset, size=pos)

    def uR(self, z, node_id: int):
        o = self.uR_offset[node_id]
        return z[o:o + self.dim_uR]

    def uH(self, z, node_id: int):
        o = self.uH_offset[node_id]
        return z[o:o + self.dim_uH]

    def uHt(self, z, node_id: int):
        o = self.uHt_offset[node_id]
        return z[o:o + self.dim_uH]

    def slack(self, z, node_id: int):
        o = self.slack_offset[node_id]
        return z[o:o + self.n_slack]


@dataclass(frozen=True)
class GraphSettings:
    """Static knobs of the assembled problem."""

    dual_updates: bool = True          # measurement updates on dual nodes
    ed_weight: float = 0.0             # explicit info-gain weight (ED-SMPC)
    tie_weight: float = 1.0e8          # C for ||uH_tilde - uH||^2
    slack_linear: float = 1.0e3        # w1
    slack_quadratic: float = 1.0e3     # w2
    jitter: float = 1.0e-9             # PD floor inside cholesky/solve calls
    q_theta: float = 0.0               # time-update diffusion
    mode_mix: float = 0.0              # time-update uniform mixing


class TreeGraph:
    """Jitted objective / residual / constraint functions over one tree shape."""

    def __init__(self, tree: ScenarioTree, model: JointDynamics,
                 cost: CostModel, failure: FailureSet,
                 settings: GraphSettings):
        self.tree_config = tree.config
        self.model = model
        self.cost = cost
        self.failure = failure
        self.settings = settings
        self.n_modes = len(tree.config.modes)
        self.n_theta = tree.n_theta
        self.dim_x = model.dim_x
        self.dim_uR = model.dim_uR
        self.dim_uH = model.dim_uH
        self.layout = VariableLayout.build(tree, self.dim_uR, self.dim_uH,
                                           len(failure))
        # static topology
        self.parents = np.array([-1 if n.is_root else n.parent for n in tree.nodes])
        self.times = np.array([n.time for n in tree.nodes])
        self.mode_idx = np.array(
            [0 if n.is_root else tree.config.modes.index(n.mode) for n in tree.nodes])
        self.is_dual = np.array([n.kind == DUAL for n in tree.nodes])
        self.is_leaf = np.array([n.is_leaf for n in tree.nodes])
        self.K = tree.config.branching
        self.node_order = [n.id for n in tree.nodes]  # topological by construction
        self.residual_labels = None   # filled by the assembler
        self.constraint_labels = None
        self.equality_labels = None

        self._obj = jax.jit(self._objective)
        self._grad = jax.jit(jax.grad(self._objective))
        self._res = jax.jit(self._residuals)
        self._res_jac = jax.jit(jax.jacfwd(self._residuals))
        self._eq = jax.jit(self._equalities)
        self._eq_jac = jax.jit(jax.jacfwd(self._equalities))
        if len(failure):
            self._cons = jax.jit(self._constraints)
            self._cons_jac = jax.jit(jax.jacfwd(self._constraints))
        else:
            self._cons = None
            self._cons_jac = None
        self._diag = jax.jit(self._diagnostics)

    # ------------------------------------------------------------------
    # bounds

    def bounds(self):
        lb = np.full(self.layout.size, -np.inf)
        ub = np.full(self.layout.size, np.inf)
        for nid in self.node_order:
            o = self.layout.uR_offset[nid]
            if o >= 0:
                lb[o:o + self.dim_uR] = self.model.robot_bounds.lower
                ub[o:o + self.dim_uR] = self.model.robot_bounds.upper
            o = self.layout.uH_offset[nid]
            if o >= 0:
                hb = self.model.human_bounds
                lb[o:o + self.dim_uH] = hb.lower
                ub[o:o + self.dim_uH] = hb.upper
            o = self.layout.slack_offset[nid]
            if o >= 0:
                lb[o:o + self.layout.n_slack] = 0.0
        return lb, ub

    # ------------------------------------------------------------------
    # core rollout

    def _rollout(self, z, params):
        st = self.settings
        n_nodes = self.layout.n_nodes
        jit_eye_th = st.jitter * jnp.eye(self.n_theta)
        jit_eye_x = st.jitter * jnp.eye(self.dim_x)
        states = [None] * n_nodes
        means = [None] * n_nodes
        covs = [None] * n_nodes
        logps = [None] * n_nodes
        logP = [None] * n_nodes
        uH_tilde = [None] * n_nodes

        states[0] = params["x0"]
        means[0] = params["mu0"]
        covs[0] = params["cov0"]
        logps[0] = params["logp0"]
        logP[0] = jnp.zeros(())

        for nid in self.node_order[1:]:
            q = int(self.parents[nid])
            t = int(self.times[q])
            m = int(self.mode_idx[nid])
            xq = states[q]
            uRq = self.layout.uR(z, q)
            duR = uRq
            # basis-mean columns for every mode: [nM, n_theta, mH]
            cols = (params["C0"][t]
                    + jnp.einsum("mihn,n->mih", params["CX"][t], xq)
                    + jnp.einsum("mihr,r->mih", params["CU"][t], duR))
            U_all = jnp.swapaxes(cols, 1, 2)             # [nM, mH, n_theta]
            BH = self.model.input_matrix_human(xq, xp=jnp)
            base = (self.model.drift(xq, xp=jnp)
                    + self.model.input_matrix_robot(xq, xp=jnp) @ uRq)
            # combined disturbance covariance per mode at the parent
            tb2 = params["theta_bar"][nid] ** 2          # [nM, n_theta]
            lap = jnp.einsum("mi,mihg->mhg", tb2, params["LC"][t])
            Sd_all = params["sigma_d"][None] + jnp.einsum(
                "nh,mhg,kg->mnk", BH, lap, BH)           # [nM, n, n]

            # child sample transforms (parent belief, node's own mode)
            L_theta = jnp.linalg.cholesky(covs[q][m] + jit_eye_th)
            theta = means[q][m] + L_theta @ params["theta_o"][nid]
            L_d = jnp.linalg.cholesky(Sd_all[m] + jit_eye_x)
            d_bar = L_d @ params["d_o"][nid]
            util = U_all[m] @ theta
            uH_tilde[nid] = util
            uH = self.layout.uH(z, nid)
            x_new = base + BH @ uH + d_bar
            states[nid] = x_new

            if st.dual_updates and self.is_dual[nid]:
                # vectorized measurement update over modes
                H = jnp.einsum("nh,mhi->mni", BH, U_all)         # [nM, n, n_theta]
                y = x_new - base
                HC = jnp.einsum("mni,mij->mnj", H, covs[q])      # [nM, n, n_theta]
                S = Sd_all + jnp.einsum("mni,mki->mnk", HC, H) \
                    + jit_eye_x[None]
                G = jnp.swapaxes(jnp.linalg.solve(S, HC), 1, 2)   # [nM, n_theta, n]
                resid = y[None] - jnp.einsum("mni,mi->mn", H, means[q])
                mu_new = means[q] + jnp.einsum("min,mn->mi", G, resid)
                cov_new = covs[q] - jnp.einsum("min,mnj->mij", G, HC)
                cov_new = 0.5 * (cov_new + jnp.swapaxes(cov_new, 1, 2))
                sol = jnp.linalg.solve(S, resid[..., None])[..., 0]
                _, logdetS = jnp.linalg.slogdet(S)
                loglik = -0.5 * (jnp.einsum("mn,mn->m", resid, sol) + logdetS
                                 + self.dim_x * jnp.log(2 * jnp.pi))
                logp_new = logps[q] + loglik
                logp_new = logp_new - logsumexp(logp_new)
            else:
                mu_new = means[q]
                cov_new = covs[q]
                logp_new = logps[q]
            # hidden-state time update
            if st.q_theta:
                cov_new = cov_new + st.q_theta * jnp.eye(self.n_theta)[None]
            if st.mode_mix:
                p = jnp.exp(logp_new)
                p = (1.0 - st.mode_mix) * p + st.mode_mix / self.n_modes
                logp_new = jnp.log(p)
            means[nid] = mu_new
            covs[nid] = cov_new
            logps[nid] = logp_new

            if self.is_dual[nid]:
                logP[nid] = logP[q] + logps[q][m] - jnp.log(self.K)
            else:
                logP[nid] = logP[q]
        return states, means, covs, logps, logP, uH_tilde

    # ------------------------------------------------------------------

    def _objective(self, z, params):
        st = self.settings
        states, means, covs, logps, logP, uH_tilde = self._rollout(z, params)
        Qx = jnp.asarray(self.cost.Qx)
        Ru = jnp.asarray(self.cost.Ru)
        QxF = jnp.asarray(self.cost.QxF)
        total = jnp.zeros(())
        for nid in self.node_order:
            P = jnp.exp(logP[nid])
            x = states[nid]
            coll = jnp.zeros(())
            for pen in self.cost.collision:
                coll = coll + pen.value(x, xp=jnp)
            if not self.is_leaf[nid]:
                uR = self.layout.uR(z, nid)
                ex = x - params["x_ref"]
                eu = uR - params["uR_ref"]
                total = total + P * (ex @ Qx @ ex + eu @ Ru @ eu + coll)
            else:
                ex = x - params["xF_ref"]
                term = ex @ QxF @ ex + coll
                if self.cost.belief_weight:
                    btrace = jnp.sum(jnp.exp(logps[nid])
                                     * jnp.trace(covs[nid], axis1=1, axis2=2))
                    term = term + self.cost.belief_weight * btrace
                total = total + P * term
            if nid != 0:
                diff = self.layout.uHt(z, nid) - self.layout.uH(z, nid)
                total = total + st.tie_weight * (diff @ diff)
                if self.layout.n_slack:
                    s = self.layout.slack(z, nid)
                    total = total + P * (st.slack_linear * jnp.sum(s)
                                         + st.slack_quadratic * (s @ s))
        if st.ed_weight:
            for nid in self.node_order[1:]:
                if not self.is_dual[nid]:
                    continue
                q = int(self.parents[nid])
                h_parent = self._entropy(covs[q], logps[q])
                h_node = self._entropy(covs[nid], logps[nid])
                total = total - st.ed_weight * jnp.exp(logP[nid]) * (h_parent - h_node)
        return total

    def _entropy(self, cov, logp):
        p = jnp.exp(logp)
        cat = -jnp.sum(p * logp)
        _, logdet = jnp.linalg.slogdet(cov + self.settings.jitter * jnp.eye(self.n_theta)[None])
        gauss = 0.5 * (self.n_theta * jnp.log(2 * jnp.pi * jnp.e) + logdet)
        return cat + jnp.sum(p * gauss)

    def _residuals(self, z, params):
        """Least-squares part of the objective (for the Gauss-Newton Hessian)."""
        st = self.settings
        states, means, covs, logps, logP, uH_tilde = self._rollout(z, params)
        parts = []
        for nid in self.node_order:
            sqP = jnp.exp(0.5 * logP[nid])
            x = states[nid]
            if not self.is_leaf[nid]:
                uR = self.layout.uR(z, nid)
                ex = x - params["x_ref"]
                eu = uR - params["uR_ref"]
                parts.append(sqP * (jnp.asarray(self.cost.Qx_sqrt) @ ex))
                parts.append(sqP * (jnp.asarray(self.cost.Ru_sqrt) @ eu))
            else:
                ex = x - params["xF_ref"]
                parts.append(sqP * (jnp.asarray(self.cost.QxF_sqrt) @ ex))
            for pen in self.cost.collision:
                parts.append((sqP * pen.residual(x, xp=jnp))[None])
            if nid != 0:
                diff = self.layout.uHt(z, nid) - self.layout.uH(z, nid)
                parts.append(jnp.sqrt(st.tie_weight) * diff)
                if self.layout.n_slack:
                    s = self.layout.slack(z, nid)
                    parts.append(sqP * jnp.sqrt(st.slack_quadratic) * s)
        return jnp.concatenate(parts)

    def _constraints(self, z, params):
        """h_j(x_n) - s_nj <= 0 stacked over non-root nodes."""
        states, *_ = self._rollout(z, params)
        rows = []
        for nid in self.node_order[1:]:
            h = self.failure.values(states[nid], xp=jnp)
            s = self.layout.slack(z, nid)
            rows.append(h - s)
        return jnp.concatenate(rows)

    def _equalities(self, z, params):
        """uHt_n - U^{M_n}(x_parent, uR_parent) theta_n = 0 per non-root node."""
        *_, uH_model = self._rollout(z, params)
        rows = []
        for nid in self.node_order[1:]:
            rows.append(self.layout.uHt(z, nid) - uH_model[nid])
        return jnp.concatenate(rows)

    def _diagnostics(self, z, params):
        states, means, covs, logps, logP, uH_tilde = self._rollout(z, params)
        pad_tilde = jnp.zeros(self.dim_uH)
        return {
            "states": jnp.stack(states),
            "means": jnp.stack(means),
            "covariances": jnp.stack(covs),
            "log_probs": jnp.stack(logps),
            "log_path": jnp.stack(logP),
            "uH_model": jnp.stack([pad_tilde if u is None else u
                                   for u in uH_tilde]),
        }

    # public jitted entry points -----------------------------------------

    def objective(self, z, params) -> float:
        return float(self._obj(jnp.asarray(z), params))

    def gradient(self, z, params) -> np.ndarray:
        return np.asarray(self._grad(jnp.asarray(z), params))

    def residuals(self, z, params) -> np.ndarray:
        return np.asarray(self._res(jnp.asarray(z), params))

    def residual_jacobian(self, z, params) -> np.ndarray:
        return np.asarray(self._res_jac(jnp.asarray(z), params))

    def equalities(self, z, params) -> np.ndarray:
        return np.asarray(self._eq(jnp.asarray(z), params))

    def equality_jacobian(self, z, params) -> np.ndarray:
        return np.asarray(self._eq_jac(jnp.asarray(z), params))

    def constraints(self, z, params) -> np.ndarray:
        if self._cons is None:
            return np.zeros(0)
        return np.asarray(self._cons(jnp.asarray(z), params))

    def constraint_jacobian(self, z, params) -> np.ndarray:
        if self._cons_jac is None:
            return np.zeros((0, self.layout.size))
        return np.asarray(self._cons_jac(jnp.asarray(z), params))

    def diagnostics(self, z, params) -> dict:
        return {k: np.asarray(v) for k, v in self._diag(jnp.asarray(z), params).items()}


def pack_params(tree: ScenarioTree, x0, belief, coeffs, theta_bar, sigma_d,
                x_ref, uR_ref, xF_ref) -> dict:
    """Assemble the dynamic parameter dict for one solve.

    ``coeffs`` is the (C0, CX, CU, LC) tuple of basis-mean affine tables and
    Laplace covariances indexed [stage, mode, basis, ...]; ``theta_bar`` is
    [n_nodes, n_modes, n_theta].
    """
    C0, CX, CU, LC = coeffs
    theta_o = np.stack([n.theta_o for n in tree.nodes])
    d_o = np.stack([n.d_o for n in tree.nodes])
    logp0 = np.log(np.maximum(belief.probabilities, PROB_FLOOR))
    return {
        "x0": jnp.asarray(np.asarray(x0, dtype=float)),
        "mu0": jnp.asarray(belief.means),
        "cov0": jnp.asarray(belief.covariances),
        "logp0": jnp.asarray(logp0),
        "theta_o": jnp.asarray(theta_o),
        "d_o": jnp.asarray(d_o),
        "theta_bar": jnp.asarray(theta_bar),
        "sigma_d": jnp.asarray(sigma_d),
        "C0": jnp.asarray(C0),
        "CX": jnp.asarray(CX),
        "CU": jnp.asarray(CU),
        "LC": jnp.asarray(LC),
        "x_ref": jnp.asarray(x_ref),
        "uR_ref": jnp.asarray(uR_ref),
        "xF_ref": jnp.asarray(xF_ref),
    }
