"""Assembly of the scenario-tree NLP and the warm-start pipeline.

``assemble`` binds a built tree, the current state/belief, and the human
behavior models (through an observation bundle) into an ``NlpProblem``:
jitted objective/residual/constraint callables over the stacked decision
vector plus the data needed to initialize and diagnose a solve. The basis
policies enter through per-stage affine coefficient tables extracted from
the quadratic Q-models, so the graph stays smooth in states and controls.

The warm-start pipeline solves a non-dual version of the same problem
first, then forward-propagates beliefs through the measurement recursion
along that solution to seed the dual solve and the per-node theta
estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..belief import BeliefState
from ..dynamics import JointDynamics
from ..tree import ScenarioTree
from .costs import CostModel, FailureSet
from .graph import GraphSettings, TreeGraph, pack_params
from .solver import SolverReport, solve_sqp


def basis_coefficient_tables(obs, horizon: int, dim_x: int, dim_uR: int):
    """Affine basis-mean tables and Laplace covariances per (stage, mode, basis).

    Means are stored in absolute form mu(x, uR) = C0 + CX x + CU uR, embedded
    into the stacked human-control space; a provider may expose
    ``state_indices`` to map a sub-state game into joint coordinates.
    """
    modes = obs.modes
    n_modes = len(modes)
    n_theta = obs.n_theta
    dim_uH = obs.joint.dim_uH
    C0 = np.zeros((horizon, n_modes, n_theta, dim_uH))
    CX = np.zeros((horizon, n_modes, n_theta, dim_uH, dim_x))
    CU = np.zeros((horizon, n_modes, n_theta, dim_uH, dim_uR))
    LC = np.zeros((horizon, n_modes, n_theta, dim_uH, dim_uH))
    humans = obs.humans
    theta_slices = obs.theta_slices
    u_slices = obs.joint.human_u_slices
    for m, label in enumerate(modes):
        labels = label if isinstance(label, tuple) else (label,)
        for h, human in enumerate(humans):
            x_idx = getattr(human.provider, "state_indices", None)
            usl = u_slices[h]
            for j in range(human.n_theta):
                i = theta_slices[h].start + j
                for t in range(horizon):
                    q = human.q_model(j, labels[h], stage=t)
                    c, Mx, Mu = q.argmax_coefficients()
                    c_abs = c - Mx @ q.x0 - Mu @ q.uR0
                    C0[t, m, i, usl] = c_abs
                    if x_idx is None:
                        CX[t, m, i, usl, :] = Mx
                    else:
                        rows = np.arange(usl.start, usl.stop)
                        CX[t, m, i][np.ix_(rows, np.asarray(x_idx))] = Mx
                    CU[t, m, i, usl, :] = Mu
                    neg = -0.5 * (q.HHH + q.HHH.T)
                    LC[t, m, i, usl, usl] = np.linalg.inv(neg) / human.beta
    return C0, CX, CU, LC


@dataclass
class NlpProblem:
    """One solvable instance: jitted graph plus bound parameter data."""

    graph: TreeGraph
    params: dict
    tree: ScenarioTree

    def bounds(self):
        return self.graph.bounds()

    @property
    def variable_count(self) -> int:
        return self.graph.layout.size

    def objective(self, z):
        return self.graph.objective(z, self.params)

    def gradient(self, z):
        return self.graph.gradient(z, self.params)

    def residuals(self, z):
        return self.graph.residuals(z, self.params)

    def residual_jacobian(self, z):
        return self.graph.residual_jacobian(z, self.params)

    def equalities(self, z):
        return self.graph.equalities(z, self.params)

    def equality_jacobian(self, z):
        return self.graph.equality_jacobian(z, self.params)

    def constraints(self, z):
        return self.graph.constraints(z, self.params)

    def constraint_jacobian(self, z):
        return self.graph.constraint_jacobian(z, self.params)

    def diagnostics(self, z):
        return self.graph.diagnostics(z, self.params)

    @property
    def residual_labels(self):
        return self.graph.residual_labels

    @property
    def constraint_labels(self):
        return self.graph.constraint_labels

    @property
    def equality_labels(self):
        return self.graph.equality_labels

    def with_params(self, params: dict) -> "NlpProblem":
        return NlpProblem(graph=self.graph, params=params, tree=self.tree)

    def initial_guess(self, uR_plan: np.ndarray | None = None) -> np.ndarray:
        """Feasible starting point.

        Robot controls from ``uR_plan`` (stacked, defaults to references),
        human controls from a short fixed-point of uH <- clip(uH_tilde),
        slacks set to the exact penetration max(h, 0).
        """
        layout = self.graph.layout
        z = np.zeros(layout.size)
        lb, ub = self.bounds()
        n_uR = int(np.sum(layout.uR_offset >= 0)) * layout.dim_uR
        if uR_plan is None:
            uR_plan = np.tile(np.asarray(self.params["uR_ref"]),
                              n_uR // max(layout.dim_uR, 1))
        z[:n_uR] = uR_plan
        z = np.clip(z, lb, ub)
        hb = self.graph.model.human_bounds
        for _ in range(self.tree.config.horizon):
            diag = self.diagnostics(z)
            changed = 0.0
            for nid in range(1, layout.n_nodes):
                model_u = diag["uH_model"][nid]
                ot = layout.uHt_offset[nid]
                z[ot:ot + layout.dim_uH] = model_u
                o = layout.uH_offset[nid]
                target = hb.project(model_u)
                changed = max(changed, np.max(np.abs(z[o:o + layout.dim_uH] - target)))
                z[o:o + layout.dim_uH] = target
            if changed < 1e-12:
                break
        if layout.n_slack:
            c = self.constraints(z)  # h - s with current s = 0
            k = 0
            for nid in range(1, layout.n_nodes):
                o = layout.slack_offset[nid]
                block = c[k:k + layout.n_slack]
                z[o:o + layout.n_slack] = np.maximum(block, 0.0)
                k += layout.n_slack
        return z

    def node_controls(self, z) -> dict:
        """Per-node decision values, keyed by node id."""
        layout = self.graph.layout
        out = {"uR": {}, "uH": {}, "uHt": {}, "slack": {}}
        for nid in range(layout.n_nodes):
            o = layout.uR_offset[nid]
            if o >= 0:
                out["uR"][nid] = z[o:o + layout.dim_uR].copy()
            o = layout.uH_offset[nid]
            if o >= 0:
                out["uH"][nid] = z[o:o + layout.dim_uH].copy()
            o = layout.uHt_offset[nid]
            if o >= 0:
                out["uHt"][nid] = z[o:o + layout.dim_uH].copy()
            o = layout.slack_offset[nid]
            if o >= 0:
                out["slack"][nid] = z[o:o + layout.n_slack].copy()
        return out

    def dump(self, path: str, z: np.ndarray) -> None:
        """Structured text dump of variables and constraint residuals."""
        lines = [f"variables {self.variable_count}"]
        ctrl = self.node_controls(z)
        for nid in sorted(ctrl["uR"]):
            lines.append(f"node {nid} uR {ctrl['uR'][nid].tolist()}")
        for nid in sorted(ctrl["uH"]):
            lines.append(f"node {nid} uH {ctrl['uH'][nid].tolist()}")
        c = self.constraints(z)
        for label, value in zip(self.constraint_labels, np.atleast_1d(c)):
            lines.append(f"constraint {label} residual {value:.6e}")
        lines.append(f"objective {self.objective(z):.12e}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _labels(graph: TreeGraph, cost: CostModel, failure: FailureSet):
    res_labels = []
    for nid in graph.node_order:
        if not graph.is_leaf[nid]:
            res_labels += [f"node{nid}:track{i}" for i in range(graph.dim_x)]
            res_labels += [f"node{nid}:effort{i}" for i in range(graph.dim_uR)]
        else:
            res_labels += [f"node{nid}:terminal{i}" for i in range(graph.dim_x)]
        res_labels += [f"node{nid}:collision{k}" for k in range(len(cost.collision))]
        if nid != 0:
            res_labels += [f"node{nid}:tie{i}" for i in range(graph.dim_uH)]
            if graph.layout.n_slack:
                res_labels += [f"node{nid}:slack:{name}" for name in failure.names]
    cons_labels = []
    eq_labels = []
    for nid in graph.node_order[1:]:
        cons_labels += [f"node{nid}:{name}" for name in failure.names]
        eq_labels += [f"node{nid}:uH_tie{i}" for i in range(graph.dim_uH)]
    return res_labels, cons_labels, eq_labels


def assemble(tree: ScenarioTree, x0, belief: BeliefState, obs,
             cost: CostModel, failure: FailureSet | None = None,
             settings: GraphSettings | None = None,
             theta_bar: np.ndarray | None = None,
             x_ref=None, uR_ref=None, xF_ref=None,
             graph: TreeGraph | None = None) -> NlpProblem:
    """Build the scenario-tree NLP at (x0, belief).

    Pass a previously built ``graph`` (same tree shape/settings) to skip
    recompilation; only the parameters are repacked.
    """
    failure = failure if failure is not None else FailureSet()
    settings = settings if settings is not None else GraphSettings()
    model: JointDynamics = obs.joint
    if tuple(tree.config.modes) != tuple(obs.modes):
        raise ValueError("tree mode set disagrees with the observation model")
    if graph is None:
        graph = TreeGraph(tree, model, cost, failure, settings)
        (graph.residual_labels, graph.constraint_labels,
         graph.equality_labels) = _labels(graph, cost, failure)
    coeffs = basis_coefficient_tables(obs, tree.config.horizon, model.dim_x,
                                      model.dim_uR)
    if theta_bar is None:
        theta_bar = np.tile(belief.means[None], (len(tree), 1, 1))
    params = pack_params(
        tree, x0, belief, coeffs, theta_bar, model.sigma_d,
        x_ref=cost.x_ref if x_ref is None else x_ref,
        uR_ref=cost.uR_ref if uR_ref is None else uR_ref,
        xF_ref=cost.xF_ref if xF_ref is None else xF_ref)
    return NlpProblem(graph=graph, params=params, tree=tree)


def soften(problem: NlpProblem, failure: FailureSet, slack_linear: float,
           slack_quadratic: float) -> NlpProblem:
    """Attach (or reweight) the soft failure-set relaxation.

    Returns a rebuilt problem whose layout carries one slack per non-root
    node and constraint, with objective terms P * (w1 s + w2 s^2).
    """
    graph = problem.graph
    settings = replace(graph.settings, slack_linear=slack_linear,
                       slack_quadratic=slack_quadratic)
    new_graph = TreeGraph(problem.tree, graph.model, graph.cost, failure, settings)
    (new_graph.residual_labels, new_graph.constraint_labels,
     new_graph.equality_labels) = _labels(new_graph, graph.cost, failure)
    return NlpProblem(graph=new_graph, params=problem.params, tree=problem.tree)


@dataclass(frozen=True)
class WarmStart:
    z0: np.ndarray
    theta_bar: np.ndarray
    nd_report: SolverReport | None
    beliefs_means: np.ndarray  # per-node means after step-3 propagation


def warm_start(tree: ScenarioTree, x0, belief: BeliefState, obs,
               cost: CostModel, failure: FailureSet | None = None,
               settings: GraphSettings | None = None,
               nd_graph: TreeGraph | None = None,
               dual_graph: TreeGraph | None = None,
               uR_seed: np.ndarray | None = None,
               solve_kwargs: dict | None = None):
    """Initialization pipeline for the dual problem.

    1. (implicit) start from reference controls or a caller-provided seed,
    2. solve the non-dual problem (time-update beliefs only) on the same tree,
    3. forward-propagate beliefs through the measurement recursion along the
       non-dual solution; their per-node means become the frozen theta
       estimates of the dual problem and the dual initial guess reuses the
       non-dual controls.

    Returns (WarmStart, nd_problem, dual_problem).
    """
    settings = settings if settings is not None else GraphSettings()
    solve_kwargs = dict(solve_kwargs or {})
    nd_settings = replace(settings, dual_updates=False, ed_weight=0.0)
    nd_problem = assemble(tree, x0, belief, obs, cost, failure,
                          settings=nd_settings, graph=nd_graph)
    z_nd = nd_problem.initial_guess(uR_plan=uR_seed)
    nd_report = None
    try:
        z_nd, nd_report = solve_sqp(nd_problem, z_nd, **solve_kwargs)
    except Exception:
        z_nd = nd_problem.initial_guess(uR_plan=uR_seed)  # degrade gracefully
    dual_problem = assemble(tree, x0, belief, obs, cost, failure,
                            settings=settings, graph=dual_graph)
    diag = dual_problem.diagnostics(z_nd)
    means3 = diag["means"]  # step-3 beliefs via the measurement recursion
    parents = dual_problem.graph.parents
    theta_bar = np.stack([
        means3[0] if parents[nid] < 0 else means3[parents[nid]]
        for nid in range(len(tree))])
    dual_problem = dual_problem.with_params(
        {**dual_problem.params, "theta_bar": np.asarray(theta_bar)})
    # refit human controls under the dual belief recursion
    layout = dual_problem.graph.layout
    n_uR = int(np.sum(layout.uR_offset >= 0)) * layout.dim_uR
    z0 = dual_problem.initial_guess(uR_plan=z_nd[:n_uR])
    ws = WarmStart(z0=z0, theta_bar=theta_bar, nd_report=nd_report,
                   beliefs_means=means3)
    return ws, nd_problem, dual_problem


def belief_gradient_check(problem: NlpProblem, direction: np.ndarray | None = None,
                          z: np.ndarray | None = None, step: float = 1e-5):
    """Finite-difference sensitivity of dual-node posterior statistics to the
    root control; the assembled recursion is dual iff these are nonzero."""
    graph = problem.graph
    layout = graph.layout
    if z is None:
        z = problem.initial_guess()
    if direction is None:
        direction = np.zeros(layout.dim_uR)
        direction[0] = 1.0
    direction = np.asarray(direction, dtype=float)
    direction = direction / max(np.linalg.norm(direction), 1e-12)
    dual_ids = [nid for nid in graph.node_order if graph.is_dual[nid]]
    if not dual_ids:
        return {"trace": 0.0, "entropy": 0.0}

    def stats(z_probe):
        d = problem.diagnostics(z_probe)
        traces = [np.trace(d["covariances"][nid].sum(axis=0)) for nid in dual_ids]
        probs = [np.exp(d["log_probs"][nid]) for nid in dual_ids]
        ents = [-np.sum(p * np.log(np.maximum(p, 1e-300))) for p in probs]
        return np.array(traces), np.array(ents)

    o = layout.uR_offset[0]
    zp, zm = z.copy(), z.copy()
    zp[o:o + layout.dim_uR] += step * direction
    zm[o:o + layout.dim_uR] -= step * direction
    tp, ep = stats(zp)
    tm, em = stats(zm)
    dtrace = (tp - tm) / (2 * step)
    dent = (ep - em) / (2 * step)
    return {"trace": float(np.max(np.abs(dtrace))),
            "entropy": float(np.max(np.abs(dent))),
            "trace_per_node": dtrace, "entropy_per_node": dent}
