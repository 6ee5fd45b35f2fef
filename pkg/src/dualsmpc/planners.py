"""Receding-horizon policy wrappers: the dual-control planner and baselines.

All tree-based planners share one code path: build a scenario tree from the
step's offline-sample stream, pack parameters, and run the SQP on a cached
compiled graph. They differ only in the belief recursion embedded in the
graph (measurement updates vs time updates), the objective (explicit
information-gain term for the ED variant), and the tree shape (single-mode
chain for certainty equivalence). The game-alignment baseline bypasses the
tree entirely and plays a feedback Nash strategy under the MAP human model.

Planner instances cache compiled graphs (shape-keyed, results-neutral) and
a previous-solution warm start (cleared by ``reset`` between trials).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .belief import BeliefState
from .dynamics import Box
from .lqgame import solve_ilq_game
from .rng import single_stream
from .smpc.assemble import NlpProblem, assemble, warm_start
from .smpc.costs import CostModel, FailureSet
from .smpc.graph import GraphSettings, TreeGraph
from .smpc.solver import SolverReport, solve_sqp
from .tree import TreeConfig, build_tree

PLANNER_KINDS = ("ID", "ED", "ND", "CE", "ISA")


class PlannerError(ValueError):
    """Bad planner configuration."""


@dataclass
class PlannerConfig:
    kind: str
    obs: object                     # observation bundle (joint + behavior models)
    cost: CostModel
    tree: TreeConfig | None = None
    failure: FailureSet = field(default_factory=FailureSet)
    settings: GraphSettings = field(default_factory=GraphSettings)
    ed_weight: float = 0.0
    solver_options: dict = field(default_factory=dict)
    isa_game_factory: object = None  # callable (mode, theta) -> (model, costs, horizon)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PLANNER_KINDS:
            raise PlannerError(f"unknown planner kind {self.kind!r}")
        if self.kind == "ED" and not self.ed_weight > 0:
            raise PlannerError("ED planner requires a positive info-gain weight")
        if self.kind != "ED" and self.ed_weight:
            raise PlannerError("info-gain weight is only meaningful for ED")
        if self.kind in ("ID", "ED", "ND", "CE") and self.tree is None:
            raise PlannerError(f"{self.kind} planner requires a tree config")
        if self.kind == "ISA" and self.isa_game_factory is None:
            raise PlannerError("ISA planner requires a game factory")


@dataclass(frozen=True)
class PolicyDecision:
    uR: np.ndarray
    report: SolverReport | None
    nd_report: SolverReport | None = None
    z: np.ndarray | None = None
    controls: dict | None = None         # per-node decision values
    predicted_states: np.ndarray | None = None
    predicted_mode_probs: np.ndarray | None = None
    predicted_means: np.ndarray | None = None


class _RestrictedObservation:
    """View of an observation bundle narrowed to a subset of modes."""

    def __init__(self, obs, modes):
        self._obs = obs
        self.modes = tuple(modes)
        self.joint = obs.joint
        self.humans = obs.humans
        self.theta_slices = obs.theta_slices
        self.n_theta = obs.n_theta

    def basis_means(self, mode, x, uR, stage=0):
        return self._obs.basis_means(mode, x, uR, stage=stage)

    def laplace_covs(self, mode, x, uR, stage=0):
        return self._obs.laplace_covs(mode, x, uR, stage=stage)

    def prediction_parts(self, x, uR):
        return self._obs.prediction_parts(x, uR)

    @property
    def sigma_d(self):
        return self._obs.sigma_d


class TreeSmpcPlanner:
    """ID, ED, and ND planning through the scenario-tree NLP."""

    def __init__(self, cfg: PlannerConfig):
        self.cfg = cfg
        self.dual = cfg.kind in ("ID", "ED")
        self.settings = replace(cfg.settings, dual_updates=self.dual,
                                ed_weight=cfg.ed_weight if cfg.kind == "ED" else 0.0)
        self._nd_graph: TreeGraph | None = None
        self._dual_graph: TreeGraph | None = None
        self._prev_uR: np.ndarray | None = None

    def reset(self) -> None:
        self._prev_uR = None

    def _build_tree(self, rng):
        return build_tree(self.cfg.tree, n_theta=self.cfg.obs.n_theta,
                          dim_x=self.cfg.obs.joint.dim_x, rng=rng)

    def decide(self, x, belief: BeliefState, rng=None) -> PolicyDecision:
        cfg = self.cfg
        rng = rng if rng is not None else single_stream(cfg.seed)
        for human in cfg.obs.humans:
            human.refresh(np.asarray(x, dtype=float))
        tree = self._build_tree(rng)
        nd_report = None
        if self.dual:
            ws, nd_problem, dual_problem = warm_start(
                tree, x, belief, cfg.obs, cfg.cost, cfg.failure,
                settings=self.settings, nd_graph=self._nd_graph,
                dual_graph=self._dual_graph, uR_seed=self._prev_uR,
                solve_kwargs=cfg.solver_options)
            self._nd_graph = nd_problem.graph
            self._dual_graph = dual_problem.graph
            z, report = solve_sqp(dual_problem, ws.z0, **cfg.solver_options)
            problem = dual_problem
            nd_report = ws.nd_report
        else:
            problem = assemble(tree, x, belief, cfg.obs, cfg.cost, cfg.failure,
                               settings=self.settings, graph=self._nd_graph)
            self._nd_graph = problem.graph
            z0 = problem.initial_guess(uR_plan=self._prev_uR)
            z, report = solve_sqp(problem, z0, **cfg.solver_options)
        layout = problem.graph.layout
        uR = cfg.obs.joint.robot_bounds.project(z[:layout.dim_uR])
        n_uR = int(np.sum(layout.uR_offset >= 0)) * layout.dim_uR
        self._prev_uR = z[:n_uR].copy()
        diag = problem.diagnostics(z)
        return PolicyDecision(
            uR=uR, report=report, nd_report=nd_report, z=z,
            controls=problem.node_controls(z),
            predicted_states=diag["states"],
            predicted_mode_probs=np.exp(diag["log_probs"]),
            predicted_means=diag["means"])


class CeMpcPlanner:
    """Certainty-equivalent MPC: single-mode chain at the MAP hidden values."""

    def __init__(self, cfg: PlannerConfig):
        self.cfg = cfg
        self._graph: TreeGraph | None = None
        self._prev_uR: np.ndarray | None = None
        self.settings = replace(cfg.settings, dual_updates=False, ed_weight=0.0)

    def reset(self) -> None:
        self._prev_uR = None

    def decide(self, x, belief: BeliefState, rng=None) -> PolicyDecision:
        cfg = self.cfg
        for human in cfg.obs.humans:
            human.refresh(np.asarray(x, dtype=float))
        k_map = belief.map_mode()
        mode = belief.modes[k_map]
        chain_cfg = TreeConfig(
            horizon=cfg.tree.horizon, dual_horizon=1, branching=1,
            modes=(mode,), max_leaves=cfg.tree.max_leaves,
            centered_first_sample=True)
        # zero-sample chain: deterministic regardless of the stream
        tree = build_tree(chain_cfg, n_theta=cfg.obs.n_theta,
                          dim_x=cfg.obs.joint.dim_x, rng=single_stream(0))
        dirac = BeliefState(
            modes=(mode,), means=belief.means[k_map][None],
            covariances=np.zeros((1, belief.n_theta, belief.n_theta)),
            probabilities=np.ones(1))
        obs = _RestrictedObservation(cfg.obs, (mode,))
        problem = assemble(tree, x, dirac, obs, cfg.cost, cfg.failure,
                           settings=self.settings, graph=self._graph)
        self._graph = problem.graph
        z0 = problem.initial_guess(uR_plan=self._prev_uR)
        z, report = solve_sqp(problem, z0, **cfg.solver_options)
        layout = problem.graph.layout
        uR = cfg.obs.joint.robot_bounds.project(z[:layout.dim_uR])
        n_uR = int(np.sum(layout.uR_offset >= 0)) * layout.dim_uR
        self._prev_uR = z[:n_uR].copy()
        diag = problem.diagnostics(z)
        return PolicyDecision(
            uR=uR, report=report, z=z, controls=problem.node_controls(z),
            predicted_states=diag["states"],
            predicted_mode_probs=np.exp(diag["log_probs"]),
            predicted_means=diag["means"])


class IsaIlqPlanner:
    """Inference-based strategy alignment: pick the MAP hidden values, solve
    the game under that human model, play the robot's feedback action."""

    def __init__(self, cfg: PlannerConfig):
        self.cfg = cfg
        self._last_action: np.ndarray | None = None

    def reset(self) -> None:
        self._last_action = None

    def decide(self, x, belief: BeliefState, rng=None) -> PolicyDecision:
        cfg = self.cfg
        x = np.asarray(x, dtype=float)
        k_map = belief.map_mode()
        mode = belief.modes[k_map]
        theta = belief.means[k_map]
        try:
            model, costs, horizon = cfg.isa_game_factory(mode, theta)
            sol = solve_ilq_game(model, costs, horizon=horizon, x0=x)
            uR = sol.strategy.control(0, 0, x)
        except Exception:
            if self._last_action is None:
                raise
            return PolicyDecision(uR=self._last_action.copy(), report=None)
        uR = cfg.obs.joint.robot_bounds.project(uR)
        self._last_action = uR.copy()
        return PolicyDecision(uR=uR, report=None)


def make_planner(cfg: PlannerConfig):
    if cfg.kind in ("ID", "ED", "ND"):
        return TreeSmpcPlanner(cfg)
    if cfg.kind == "CE":
        return CeMpcPlanner(cfg)
    return IsaIlqPlanner(cfg)


def id_smpc(x, belief, cfg: PlannerConfig, rng=None, planner=None) -> PolicyDecision:
    planner = planner if planner is not None else make_planner(replace(cfg, kind="ID"))
    return planner.decide(x, belief, rng)


def ed_smpc(x, belief, cfg: PlannerConfig, rng=None, planner=None) -> PolicyDecision:
    planner = planner if planner is not None else make_planner(cfg)
    return planner.decide(x, belief, rng)


def nd_smpc(x, belief, cfg: PlannerConfig, rng=None, planner=None) -> PolicyDecision:
    planner = planner if planner is not None else make_planner(replace(cfg, kind="ND"))
    return planner.decide(x, belief, rng)


def ce_mpc(x, belief, cfg: PlannerConfig, rng=None, planner=None) -> PolicyDecision:
    planner = planner if planner is not None else make_planner(replace(cfg, kind="CE"))
    return planner.decide(x, belief, rng)


def isa_ilq(x, belief, cfg: PlannerConfig, rng=None, planner=None) -> PolicyDecision:
    planner = planner if planner is not None else make_planner(cfg)
    return planner.decide(x, belief, rng)
