"""Scenario-tree construction with offline sampling.

A tree is grown by branching nodes over (mode, sample) pairs for the dual
control stages and extending single zero-sample children through the
exploitation stages. Offline samples are standard normal; they are
transformed online with the belief mean/covariance factors so nodes move
when predicted states and controls move, while the underlying draws stay
fixed for the lifetime of the tree.

Per-child transition weight: each of the K draws per mode is equally
probable by construction (inverse-transform sampling), so the child weight
is p(mode | parent belief) / K; path probabilities multiply down the tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefState, combined_covariance


class TreeSizeError(ValueError):
    """Configured tree would exceed the leaf cap."""


class TreeStructureError(RuntimeError):
    """Internal consistency violation (bad depths, probabilities, parents)."""


ROOT, DUAL, EXPLOIT = "root", "dual", "exploit"


@dataclass(frozen=True)
class TreeConfig:
    """Shape of the scenario tree.

    ``horizon`` = dual_horizon + exploitation stages; ``branching`` is the
    number of samples per mode at each dual stage. With
    ``centered_first_sample`` the first draw per mode is pinned to zero so
    the nominal scenario is always in the tree.
    """

    horizon: int
    dual_horizon: int
    branching: int
    modes: tuple
    max_leaves: int = 4096
    centered_first_sample: bool = True
    prune_threshold: float | None = None

    def __post_init__(self):
        if not 1 <= self.dual_horizon <= self.horizon:
            raise ValueError("dual horizon must satisfy 1 <= N_d <= N")
        if self.branching < 1:
            raise ValueError("branching count must be at least 1")
        if not self.modes:
            raise ValueError("mode set must be nonempty")

    @property
    def exploitation_horizon(self) -> int:
        return self.horizon - self.dual_horizon

    @property
    def leaf_count(self) -> int:
        return (self.branching * len(self.modes)) ** self.dual_horizon


@dataclass
class Node:
    id: int
    parent: int | None
    time: int
    kind: str
    mode: object            # mode label; None at the root
    theta_o: np.ndarray     # offline standard-normal sample for theta
    d_o: np.ndarray         # offline standard-normal sample for the disturbance
    Pbar: float = 1.0       # one-step transition probability
    P: float = 1.0          # path probability from the root
    children: list = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def is_root(self) -> bool:
        return self.parent is None


class ScenarioTree:
    """Nodes in topological order (parents precede children)."""

    def __init__(self, config: TreeConfig, nodes: list[Node], n_theta: int,
                 dim_x: int):
        self.config = config
        self.nodes = nodes
        self.n_theta = n_theta
        self.dim_x = dim_x
        self.validate()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> Node:
        return self.nodes[0]

    @property
    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.is_leaf]

    @property
    def dual_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == DUAL]

    @property
    def exploitation_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == EXPLOIT]

    def parent_of(self, node: Node) -> Node:
        return self.nodes[node.parent]

    def validate(self) -> None:
        cfg = self.config
        for node in self.nodes:
            if node.is_root:
                if node.time != 0:
                    raise TreeStructureError("root must sit at time 0")
                continue
            parent = self.nodes[node.parent]
            if node.time != parent.time + 1:
                raise TreeStructureError(f"node {node.id}: time skips a step")
        for node in self.nodes:
            if node.is_leaf:
                if node.time != cfg.horizon:
                    raise TreeStructureError(
                        f"leaf {node.id} at depth {node.time} != horizon {cfg.horizon}")
            elif node.time < cfg.dual_horizon:
                expected = cfg.branching * len(cfg.modes)
                if len(node.children) != expected:
                    raise TreeStructureError(
                        f"dual node {node.id} has {len(node.children)} children, "
                        f"expected {expected}")
            else:
                if len(node.children) != 1:
                    raise TreeStructureError(
                        f"exploitation node {node.id} must have exactly 1 child")
        total = sum(n.P for n in self.leaves)
        if abs(total - 1.0) > 1e-12:
            raise TreeStructureError(f"leaf probabilities sum to {total!r}")

    def export_text(self) -> str:
        """Tab-separated node table for debugging and plots."""
        lines = ["id\tparent\ttime\tkind\tmode\tPbar\tP"]
        for n in self.nodes:
            parent = "" if n.parent is None else str(n.parent)
            mode = "" if n.mode is None else str(n.mode)
            lines.append(f"{n.id}\t{parent}\t{n.time}\t{n.kind}\t{mode}"
                         f"\t{n.Pbar:.17g}\t{n.P:.17g}")
        return "\n".join(lines) + "\n"


def branch(node: Node, modes, K: int, rng: np.random.Generator, n_theta: int,
           dim_x: int, next_id: int, centered_first: bool = True) -> list[Node]:
    """K children per mode with fresh offline standard-normal samples."""
    children = []
    for mode in modes:
        theta_samples = rng.standard_normal((K, n_theta))
        d_samples = rng.standard_normal((K, dim_x))
        if centered_first:
            theta_samples[0] = 0.0
            d_samples[0] = 0.0
        for k in range(K):
            child = Node(
                id=next_id + len(children), parent=node.id, time=node.time + 1,
                kind=DUAL, mode=mode, theta_o=theta_samples[k], d_o=d_samples[k],
                Pbar=1.0 / (K * len(modes)))
            children.append(child)
    return children


def extend(node: Node, next_id: int) -> Node:
    """Single zero-sample child inheriting the parent's mode."""
    return Node(
        id=next_id, parent=node.id, time=node.time + 1, kind=EXPLOIT,
        mode=node.mode, theta_o=np.zeros_like(node.theta_o),
        d_o=np.zeros_like(node.d_o), Pbar=1.0)


def build_tree(config: TreeConfig, n_theta: int, dim_x: int,
               rng: np.random.Generator) -> ScenarioTree:
    """Offline construction: branch through the dual stages, then extend.

    Branching happens for parents at times 0 .. N_d - 1 and extension for
    times N_d .. N - 1, so leaves land exactly at depth N after N_d branched
    transitions.
    """
    if config.leaf_count > config.max_leaves:
        raise TreeSizeError(
            f"tree would have {config.leaf_count} leaves "
            f"(cap {config.max_leaves}); reduce K, |modes| or the dual horizon")
    root = Node(id=0, parent=None, time=0, kind=ROOT, mode=None,
                theta_o=np.zeros(n_theta), d_o=np.zeros(dim_x))
    nodes = [root]
    frontier = [root]
    for t in range(config.horizon):
        new_frontier = []
        for node in frontier:
            if t < config.dual_horizon:
                children = branch(node, config.modes, config.branching, rng,
                                  n_theta, dim_x, next_id=len(nodes),
                                  centered_first=config.centered_first_sample)
            else:
                children = [extend(node, next_id=len(nodes))]
            for child in children:
                child.P = child.Pbar * node.P
                node.children.append(child.id)
                nodes.append(child)
            new_frontier.extend(children)
        frontier = new_frontier
    return ScenarioTree(config, nodes, n_theta=n_theta, dim_x=dim_x)


def psd_factor(S: np.ndarray) -> np.ndarray:
    """Lower factor L with L L' = S; Cholesky with an eigh fallback for PSD."""
    S = 0.5 * (S + S.T)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        if w.min() < -1e-9:
            raise TreeStructureError(
                f"sample covariance not PSD (min eigenvalue {w.min():.3e})")
        return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def transform_samples(node: Node, parent_belief: BeliefState, x_parent,
                      uR_parent, obs, theta_bar=None, stage: int = 0):
    """Online transform of the node's offline draws.

    theta = parent posterior mean + chol(parent cov) theta_o for the node's
    mode; the disturbance scales by the combined-covariance factor at the
    parent state and control.
    """
    k = parent_belief.mode_index(node.mode)
    if theta_bar is None:
        theta_bar = parent_belief.means[k]
    mu = parent_belief.means[k]
    L_theta = psd_factor(parent_belief.covariances[k])
    theta = mu + L_theta @ node.theta_o
    cov_d = combined_covariance(obs, x_parent, uR_parent, theta_bar, node.mode,
                                stage=stage)
    d_bar = psd_factor(cov_d) @ node.d_o
    return theta, d_bar


def path_probabilities(tree: ScenarioTree, beliefs: list[BeliefState]):
    """Refresh transition and path probabilities from per-node beliefs.

    ``beliefs[i]`` is the belief held at node i; each child's one-step
    probability uses the parent's posterior mode distribution. Leaf mass is
    renormalized only if it drifted beyond 1e-9 (flagged in the return).
    """
    K = tree.config.branching
    renormalized = False
    for node in tree.nodes:
        if node.is_root:
            node.Pbar, node.P = 1.0, 1.0
            continue
        parent = tree.parent_of(node)
        if node.kind == DUAL:
            p_mode = beliefs[parent.id].probabilities[
                beliefs[parent.id].mode_index(node.mode)]
            node.Pbar = float(p_mode) / K
        else:
            node.Pbar = 1.0
        if node.Pbar < 0:
            raise TreeStructureError(f"negative probability at node {node.id}")
        node.P = node.Pbar * parent.P
    total = sum(n.P for n in tree.leaves)
    if abs(total - 1.0) > 1e-9:
        renormalized = True
        for node in tree.nodes:
            node.P /= total
    return ([n.Pbar for n in tree.nodes], [n.P for n in tree.nodes], renormalized)


def prune_tree(tree: ScenarioTree, threshold: float) -> ScenarioTree:
    """Drop dual branches with path probability below ``threshold``.

    Every dual node keeps at least its most probable child per surviving
    mode; leaf mass is renormalized. Heuristic hook, off by default.
    """
    keep = {0}
    for node in tree.nodes:
        if node.is_root:
            continue
        if tree.parent_of(node).id not in keep:
            continue
        if node.kind == DUAL and node.P < threshold:
            siblings = [tree.nodes[c] for c in tree.parent_of(node).children]
            survivors = [s for s in siblings if s.P >= threshold]
            if survivors and node.id not in [s.id for s in survivors]:
                continue
        keep.add(node.id)
    id_map = {}
    new_nodes = []
    for node in tree.nodes:
        if node.id not in keep:
            continue
        clone = Node(id=len(new_nodes),
                     parent=None if node.parent is None else id_map[node.parent],
                     time=node.time, kind=node.kind, mode=node.mode,
                     theta_o=node.theta_o.copy(), d_o=node.d_o.copy(),
                     Pbar=node.Pbar, P=node.P)
        id_map[node.id] = clone.id
        if clone.parent is not None:
            new_nodes[clone.parent].children.append(clone.id)
        new_nodes.append(clone)
    total = sum(n.P for n in new_nodes if not n.children)
    for n in new_nodes:
        n.P /= total
    pruned = ScenarioTree.__new__(ScenarioTree)
    pruned.config = tree.config
    pruned.nodes = new_nodes
    pruned.n_theta = tree.n_theta
    pruned.dim_x = tree.dim_x
    return pruned
