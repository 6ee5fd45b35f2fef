"""Robot planning cost and the failure set.

The stage cost is quadratic tracking + control effort plus a smooth
collision-avoidance penalty (squared softplus of the ellipse margin, so the
whole cost is nonnegative and twice differentiable). The terminal cost adds
an optional belief-uncertainty term (sum of mode-weighted covariance
traces), zero by default.

The failure set is a list of smooth inequalities h_j(x) <= 0: pairwise
ellipse separations between agents and half-plane bounds (road edges).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softplus(z, xp=np):
    return xp.logaddexp(0.0, z)


def psd_sqrt(W: np.ndarray) -> np.ndarray:
    W = 0.5 * (W + W.T)
    vals, vecs = np.linalg.eigh(W)
    if vals.min() < -1e-10:
        raise ValueError("cost weight matrices must be PSD")
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


@dataclass(frozen=True)
class CollisionPenalty:
    """weight * softplus(sharpness * (1 - q))^2 with q the ellipse form."""

    pos_a: tuple[int, int]
    pos_b: tuple[int, int]
    semi_axes: tuple[float, float]
    weight: float
    sharpness: float = 2.0

    def margin(self, x, xp=np):
        dx = x[self.pos_a[0]] - x[self.pos_b[0]]
        dy = x[self.pos_a[1]] - x[self.pos_b[1]]
        return 1.0 - (dx / self.semi_axes[0]) ** 2 - (dy / self.semi_axes[1]) ** 2

    def residual(self, x, xp=np):
        """Sqrt-weighted residual; the penalty value is residual**2."""
        return np.sqrt(self.weight) * softplus(self.sharpness * self.margin(x, xp), xp)

    def value(self, x, xp=np):
        r = self.residual(x, xp)
        return r * r


@dataclass(frozen=True)
class CostModel:
    """Stage/terminal quadratics with collision penalties.

    Stage: (x - x_ref)' Qx (x - x_ref) + (uR - uR_ref)' Ru (uR - uR_ref)
           + sum of collision penalties.
    Terminal: (x - xF_ref)' QxF (x - xF_ref) + collision penalties
              + belief_weight * sum_M p(M) tr(cov_M).
    """

    Qx: np.ndarray
    x_ref: np.ndarray
    Ru: np.ndarray
    QxF: np.ndarray
    xF_ref: np.ndarray
    uR_ref: np.ndarray | None = None
    collision: tuple = ()
    belief_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "Qx", np.asarray(self.Qx, dtype=float))
        object.__setattr__(self, "Ru", np.asarray(self.Ru, dtype=float))
        object.__setattr__(self, "QxF", np.asarray(self.QxF, dtype=float))
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float))
        object.__setattr__(self, "xF_ref", np.asarray(self.xF_ref, dtype=float))
        uref = self.uR_ref
        if uref is None:
            uref = np.zeros(self.Ru.shape[0])
        object.__setattr__(self, "uR_ref", np.asarray(uref, dtype=float))
        # PSD checks and cached factor for residual form
        object.__setattr__(self, "Qx_sqrt", psd_sqrt(self.Qx))
        object.__setattr__(self, "Ru_sqrt", psd_sqrt(self.Ru))
        object.__setattr__(self, "QxF_sqrt", psd_sqrt(self.QxF))

    Qx_sqrt: np.ndarray = field(init=False, repr=False, default=None)
    Ru_sqrt: np.ndarray = field(init=False, repr=False, default=None)
    QxF_sqrt: np.ndarray = field(init=False, repr=False, default=None)

    def stage(self, x, uR, xp=np):
        ex = x - xp.asarray(self.x_ref)
        eu = uR - xp.asarray(self.uR_ref)
        val = ex @ xp.asarray(self.Qx) @ ex + eu @ xp.asarray(self.Ru) @ eu
        for pen in self.collision:
            val = val + pen.value(x, xp)
        return val

    def terminal(self, x, xp=np, belief_trace=None):
        ex = x - xp.asarray(self.xF_ref)
        val = ex @ xp.asarray(self.QxF) @ ex
        for pen in self.collision:
            val = val + pen.value(x, xp)
        if self.belief_weight and belief_trace is not None:
            val = val + self.belief_weight * belief_trace
        return val


@dataclass(frozen=True)
class EllipseKeepout:
    """Violated (x in failure set) when the two agents' centers fall inside
    the combined ellipse: h = 1 - q > 0."""

    name: str
    pos_a: tuple[int, int]
    pos_b: tuple[int, int]
    semi_axes: tuple[float, float]

    def value(self, x, xp=np):
        dx = x[self.pos_a[0]] - x[self.pos_b[0]]
        dy = x[self.pos_a[1]] - x[self.pos_b[1]]
        return 1.0 - (dx / self.semi_axes[0]) ** 2 - (dy / self.semi_axes[1]) ** 2


@dataclass(frozen=True)
class HalfPlane:
    """h = coeff' x - offset <= 0."""

    name: str
    coeff: np.ndarray
    offset: float

    def value(self, x, xp=np):
        return xp.asarray(self.coeff) @ x - self.offset


@dataclass(frozen=True)
class FailureSet:
    constraints: tuple = ()

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.constraints)

    def __len__(self) -> int:
        return len(self.constraints)

    def values(self, x, xp=np):
        if not self.constraints:
            return xp.zeros(0)
        return xp.stack([c.value(x, xp) for c in self.constraints])

    def violated(self, x, margin: float = 0.0) -> bool:
        """True when the state is strictly inside the failure set."""
        if not self.constraints:
            return False
        return bool(np.max(self.values(np.asarray(x, dtype=float))) > margin)
