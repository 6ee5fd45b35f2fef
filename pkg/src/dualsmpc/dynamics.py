"""Discrete-time input-affine joint human-robot dynamics.

The joint system evolves as

    x' = f(x) + B_R(x) u_R + B_H(x) u_H + d

where f stacks the per-agent drift maps, B_R / B_H embed the per-agent
input matrices into joint coordinates, and d is additive Gaussian noise
with covariance ``sigma_d``. Concrete agent models (kinematic bicycle,
unicycle, double integrator, generic linear) are discretized with a
single explicit Euler step and written directly in input-affine form.

Every map takes an array-namespace argument ``xp`` (numpy by default) so
the same formulas run under ``jax.numpy`` inside the SMPC computation
graph without duplication.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """State or control vector does not match the declared layout."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box of admissible controls (finite bounds)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise DimensionError("box bounds must have equal shapes")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite intervals")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def project(self, u, xp=np):
        return xp.clip(u, self.lower, self.upper)

    def contains(self, u, atol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - atol) and np.all(u <= self.upper + atol))

    def vertices(self) -> np.ndarray:
        """All 2^dim corner points (small dims only)."""
        grids = np.meshgrid(*[(lo, hi) for lo, hi in zip(self.lower, self.upper)],
                            indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)


@dataclass(frozen=True)
class AgentLayout:
    """Maps agent names to slices of the joint state vector."""

    names: tuple[str, ...]
    dims: tuple[int, ...]
    slices: tuple[slice, ...] = field(init=False)

    def __post_init__(self):
        offsets = np.concatenate([[0], np.cumsum(self.dims)])
        object.__setattr__(
            self, "slices",
            tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])))

    @property
    def total_dim(self) -> int:
        return int(sum(self.dims))

    def of(self, name: str) -> slice:
        return self.slices[self.names.index(name)]


class AgentModel:
    """One agent's Euler-discretized input-affine model.

    Subclasses define ``drift`` (the control-free one-step map), the
    state-dependent ``input_matrix``, and the analytic ``jacobian`` of the
    full one-step map x' = drift(x) + input_matrix(x) @ u.
    """

    dim_x: int
    dim_u: int

    def __init__(self, dt: float, bounds: Box):
        if dt <= 0:
            raise ValueError("time step must be positive")
        if bounds.dim != self.dim_u:
            raise DimensionError(
                f"bounds dim {bounds.dim} != control dim {self.dim_u}")
        self.dt = float(dt)
        self.bounds = bounds

    def drift(self, x, xp=np):
        raise NotImplementedError

    def input_matrix(self, x, xp=np):
        raise NotImplementedError

    def jacobian(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(A, B) of the one-step map at (x, u); B = input_matrix(x)."""
        raise NotImplementedError


class KinematicBicycle(AgentModel):
    """Rear-axle kinematic bicycle, state (px, py, psi, v), inputs (accel, steer).

    Steering enters through the small-angle yaw-rate term v * steer / wheelbase,
    which keeps the discrete map exactly affine in the inputs.
    """

    dim_x = 4
    dim_u = 2

    def __init__(self, dt: float, wheelbase: float, bounds: Box):
        super().__init__(dt, bounds)
        if wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        self.wheelbase = float(wheelbase)

    def drift(self, x, xp=np):
        px, py, psi, v = x[0], x[1], x[2], x[3]
        return xp.stack([px + self.dt * v * xp.cos(psi),
                         py + self.dt * v * xp.sin(psi),
                         psi,
                         v])

    def input_matrix(self, x, xp=np):
        v = x[3]
        z = xp.zeros(())
        col_a = xp.stack([z, z, z, z + self.dt])
        col_s = xp.stack([z, z, self.dt * v / self.wheelbase, z])
        return xp.stack([col_a, col_s], axis=1)

    def jacobian(self, x, u):
        _, _, psi, v = x
        steer = u[1]
        dt = self.dt
        A = np.eye(4)
        A[0, 2] = -dt * v * np.sin(psi)
        A[0, 3] = dt * np.cos(psi)
        A[1, 2] = dt * v * np.cos(psi)
        A[1, 3] = dt * np.sin(psi)
        A[2, 3] = dt * steer / self.wheelbase
        return A, self.input_matrix(x)


class Unicycle(AgentModel):
    """Planar unicycle, state (px, py, psi), inputs (speed command, turn rate)."""

    dim_x = 3
    dim_u = 2

    def __init__(self, dt: float, bounds: Box):
        super().__init__(dt, bounds)

    def drift(self, x, xp=np):
        return xp.stack([x[0], x[1], x[2]])

    def input_matrix(self, x, xp=np):
        psi = x[2]
        z = xp.zeros(())
        col_v = xp.stack([self.dt * xp.cos(psi), self.dt * xp.sin(psi), z])
        col_w = xp.stack([z, z, z + self.dt])
        return xp.stack([col_v, col_w], axis=1)

    def jacobian(self, x, u):
        psi = x[2]
        v = u[0]
        A = np.eye(3)
        A[0, 2] = -self.dt * v * np.sin(psi)
        A[1, 2] = self.dt * v * np.cos(psi)
        return A, self.input_matrix(x)


class DoubleIntegrator(AgentModel):
    """Point mass per axis: positions then velocities, acceleration inputs."""

    def __init__(self, dt: float, bounds: Box, axes: int = 1):
        self.dim_x = 2 * axes
        self.dim_u = axes
        super().__init__(dt, bounds)
        self.axes = axes
        A = np.eye(self.dim_x)
        A[:axes, axes:] += dt * np.eye(axes)
        B = np.vstack([np.zeros((axes, axes)), dt * np.eye(axes)])
        self._A = A
        self._B = B

    def drift(self, x, xp=np):
        return xp.asarray(self._A) @ x

    def input_matrix(self, x, xp=np):
        return xp.asarray(self._B)

    def jacobian(self, x, u):
        return self._A.copy(), self._B.copy()


class LinearAgent(AgentModel):
    """Arbitrary constant (A, B) pair; drift is A @ x."""

    def __init__(self, A: np.ndarray, B: np.ndarray, dt: float, bounds: Box):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        self.dim_x = A.shape[0]
        self.dim_u = B.shape[1]
        super().__init__(dt, bounds)
        self._A = A
        self._B = B

    def drift(self, x, xp=np):
        return xp.asarray(self._A) @ x

    def input_matrix(self, x, xp=np):
        return xp.asarray(self._B)

    def jacobian(self, x, u):
        return self._A.copy(), self._B.copy()


def bicycle_model(dt: float, wheelbase: float,
                  accel_bounds=(-4.0, 3.0), steer_bounds=(-0.4, 0.4)) -> KinematicBicycle:
    bounds = Box(np.array([accel_bounds[0], steer_bounds[0]]),
                 np.array([accel_bounds[1], steer_bounds[1]]))
    return KinematicBicycle(dt=dt, wheelbase=wheelbase, bounds=bounds)


def unicycle_model(dt: float, speed_bounds=(0.0, 2.0),
                   turn_bounds=(-1.5, 1.5)) -> Unicycle:
    bounds = Box(np.array([speed_bounds[0], turn_bounds[0]]),
                 np.array([speed_bounds[1], turn_bounds[1]]))
    return Unicycle(dt=dt, bounds=bounds)


class JointDynamics:
    """Robot plus zero or more humans sharing one joint state vector.

    The human input u_H concatenates all human controls in roster order,
    and B_H(x) stacks the corresponding embedded input matrices.
    """

    def __init__(self, robot_name: str, robot: AgentModel,
                 humans: list[tuple[str, AgentModel]],
                 sigma_d: np.ndarray | None = None):
        self.robot_name = robot_name
        self.robot = robot
        self.human_names = tuple(name for name, _ in humans)
        self.human_models = tuple(model for _, model in humans)
        self.layout = AgentLayout(
            names=(robot_name,) + self.human_names,
            dims=(robot.dim_x,) + tuple(m.dim_x for m in self.human_models))
        self.dim_x = self.layout.total_dim
        self.dim_uR = robot.dim_u
        self.dim_uH = int(sum(m.dim_u for m in self.human_models))
        offsets = np.concatenate([[0], np.cumsum([m.dim_u for m in self.human_models])])
        self.human_u_slices = tuple(
            slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))
        dt_all = {robot.dt} | {m.dt for m in self.human_models}
        if len(dt_all) != 1:
            raise ValueError("all agents must share one time step")
        self.dt = robot.dt
        if sigma_d is None:
            sigma_d = np.zeros((self.dim_x, self.dim_x))
        sigma_d = np.asarray(sigma_d, dtype=float)
        if sigma_d.shape != (self.dim_x, self.dim_x):
            raise DimensionError("sigma_d must be n x n for the joint state")
        if not np.allclose(sigma_d, sigma_d.T, atol=1e-12):
            raise ValueError("sigma_d must be symmetric")
        if np.min(np.linalg.eigvalsh(sigma_d)) < -1e-12:
            raise ValueError("sigma_d must be positive semidefinite")
        self.sigma_d = sigma_d

    @property
    def agents(self) -> tuple[AgentModel, ...]:
        return (self.robot,) + self.human_models

    @property
    def robot_bounds(self) -> Box:
        return self.robot.bounds

    @property
    def human_bounds(self) -> Box:
        """Concatenated box over all human controls."""
        lo = np.concatenate([m.bounds.lower for m in self.human_models]) \
            if self.human_models else np.zeros(0)
        hi = np.concatenate([m.bounds.upper for m in self.human_models]) \
            if self.human_models else np.zeros(0)
        return Box(lo, hi)

    def drift(self, x, xp=np):
        parts = [agent.drift(x[sl], xp=xp)
                 for agent, sl in zip(self.agents, self.layout.slices)]
        return xp.concatenate(parts)

    def input_matrix_robot(self, x, xp=np):
        B = self.robot.input_matrix(x[self.layout.slices[0]], xp=xp)
        if not self.human_models:
            return B
        pad = xp.zeros((self.dim_x - self.robot.dim_x, self.dim_uR))
        return xp.concatenate([B, pad], axis=0)

    def input_matrix_human(self, x, xp=np):
        if not self.human_models:
            return xp.zeros((self.dim_x, 0))
        cols = []
        for k, model in enumerate(self.human_models):
            sl = self.layout.slices[k + 1]
            blk = model.input_matrix(x[sl], xp=xp)
            above = xp.zeros((sl.start, model.dim_u))
            below = xp.zeros((self.dim_x - sl.stop, model.dim_u))
            cols.append(xp.concatenate([above, blk, below], axis=0))
        return xp.concatenate(cols, axis=1)

    def step(self, x, uR, uH, d=None, xp=np):
        """One deterministic step x' = f(x) + B_R u_R + B_H u_H + d."""
        x = xp.asarray(x)
        uR = xp.asarray(uR)
        uH = xp.asarray(uH)
        if x.shape != (self.dim_x,):
            raise DimensionError(f"state has shape {x.shape}, expected ({self.dim_x},)")
        if uR.shape != (self.dim_uR,):
            raise DimensionError(f"robot control has shape {uR.shape}, expected ({self.dim_uR},)")
        if uH.shape != (self.dim_uH,):
            raise DimensionError(f"human control has shape {uH.shape}, expected ({self.dim_uH},)")
        out = self.drift(x, xp=xp) + self.input_matrix_robot(x, xp=xp) @ uR
        if self.dim_uH:
            out = out + self.input_matrix_human(x, xp=xp) @ uH
        if d is not None:
            out = out + xp.asarray(d)
        return out

    def linearize(self, x: np.ndarray, uR: np.ndarray,
                  uH: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Jacobians (A, B_R, B_H) of the one-step map at (x, uR, uH)."""
        x = np.asarray(x, dtype=float)
        A = np.zeros((self.dim_x, self.dim_x))
        us = [np.asarray(uR, dtype=float)] + [
            np.asarray(uH, dtype=float)[sl] for sl in self.human_u_slices]
        for agent, sl, u in zip(self.agents, self.layout.slices, us):
            A_blk, _ = agent.jacobian(x[sl], u)
            A[sl, sl] = A_blk
        return A, self.input_matrix_robot(x), self.input_matrix_human(x)
