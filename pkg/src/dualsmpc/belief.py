"""Belief state over hidden human parameters and its recursive updates.

The belief factorizes as a Gaussian over the continuous weights theta per
mode times a categorical over the finite mode set. One observed transition
updates the per-mode Gaussians by a linear-Gaussian measurement update
(information form, implemented in the numerically robust covariance form),
reweights the modes by their marginal state likelihoods, and finally applies
the hidden-state transition map (identity by default, optional diffusion).

The update formulas live in small ``xp``-parameterized kernels so the SMPC
computation graph can run the exact same algebra under ``jax.numpy``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import JointDynamics
from .human import HumanBehaviorModel, basis_matrix, laplace_approx


class BeliefError(ValueError):
    """Malformed belief state or singular observation covariance."""


# ---------------------------------------------------------------------------
# Kernels (numpy / jax.numpy shared)


def combined_cov_kernel(sigma_d, BH, lap_covs, theta_bar, xp=np):
    """Sigma_d + sum_i theta_bar_i^2 * BH Sigma_i BH'.

    ``lap_covs`` stacks the per-basis Laplace covariances [n_theta, mH, mH].
    """
    weighted = xp.einsum("i,ijk->jk", xp.asarray(theta_bar) ** 2, xp.asarray(lap_covs))
    return xp.asarray(sigma_d) + BH @ weighted @ BH.T


def gaussian_logpdf_kernel(resid, cov, xp=np):
    sol = xp.linalg.solve(cov, resid)
    _, logdet = xp.linalg.slogdet(cov)
    n = resid.shape[0]
    return -0.5 * (resid @ sol + logdet + n * math.log(2 * math.pi))


def theta_update_kernel(mu, cov, H, sigma_dbar, innovation, xp=np):
    """Linear-Gaussian measurement update in covariance (Joseph-free) form.

    Algebraically identical to the information-form update
    cov+ = [cov^-1 + H' sigma^-1 H]^-1 but tolerates singular priors
    (Dirac beliefs) because the prior is never inverted.
    """
    S = sigma_dbar + H @ cov @ H.T
    G = xp.linalg.solve(S, H @ cov).T
    mu_plus = mu + G @ (innovation - H @ mu)
    cov_plus = cov - G @ H @ cov
    cov_plus = 0.5 * (cov_plus + cov_plus.T)
    return mu_plus, cov_plus


def mode_loglik_kernel(mu, cov, H, sigma_dbar, innovation, xp=np):
    """Marginal log-likelihood of the innovation under one mode."""
    S = sigma_dbar + H @ cov @ H.T
    return gaussian_logpdf_kernel(innovation - H @ mu, S, xp=xp)


# ---------------------------------------------------------------------------
# Belief state


@dataclass(frozen=True)
class BeliefState:
    """Per-mode Gaussians over theta plus a categorical over modes."""

    modes: tuple
    means: np.ndarray          # [n_modes, n_theta]
    covariances: np.ndarray    # [n_modes, n_theta, n_theta]
    probabilities: np.ndarray  # [n_modes]
    degenerate: bool = False   # set when a mode update underflowed

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covariances, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        probs = np.atleast_1d(np.asarray(self.probabilities, dtype=float))
        nM = len(self.modes)
        if means.shape[0] != nM or covs.shape[0] != nM or probs.shape[0] != nM:
            raise BeliefError("per-mode arrays disagree with the mode count")
        if covs.shape[1:] != (means.shape[1], means.shape[1]):
            raise BeliefError("covariance blocks must be n_theta x n_theta")
        if np.any(probs < -1e-12):
            raise BeliefError("mode probabilities must be nonnegative")
        total = probs.sum()
        if not np.isfinite(total) or total <= 0:
            raise BeliefError("mode probabilities must sum to a positive value")
        if abs(total - 1.0) > 1e-12:
            probs = probs / total
        for k in range(nM):
            if np.max(np.abs(covs[k] - covs[k].T)) > 1e-9:
                raise BeliefError(f"covariance of mode {self.modes[k]!r} not symmetric")
            if np.min(np.linalg.eigvalsh(covs[k])) < -1e-10:
                raise BeliefError(f"covariance of mode {self.modes[k]!r} not PSD")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "probabilities", np.maximum(probs, 0.0))

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def n_theta(self) -> int:
        return self.means.shape[1]

    def mode_index(self, mode) -> int:
        return self.modes.index(mode)

    def map_mode(self) -> int:
        """Index of the most probable mode; ties break at the lowest index."""
        return int(np.argmax(self.probabilities))

    def map_theta(self) -> np.ndarray:
        return self.means[self.map_mode()].copy()


def uniform_belief(modes, mean, cov) -> BeliefState:
    nM = len(modes)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    return BeliefState(
        modes=tuple(modes),
        means=np.tile(mean, (nM, 1)),
        covariances=np.tile(cov, (nM, 1, 1)),
        probabilities=np.full(nM, 1.0 / nM))


# ---------------------------------------------------------------------------
# Observation models


class SingleHumanObservation:
    """Observation model for a roster with exactly one human."""

    def __init__(self, joint: JointDynamics, human: HumanBehaviorModel):
        if len(joint.human_models) != 1:
            raise BeliefError("SingleHumanObservation requires exactly one human")
        self.joint = joint
        self.human = human
        self.humans = [human]
        self.modes = human.modes
        self.n_theta = human.n_theta
        self.theta_slices = [slice(0, human.n_theta)]

    def basis_means(self, mode, x, uR, stage: int = 0) -> np.ndarray:
        return basis_matrix(self.human, mode, x, uR, stage=stage, clip=False)

    def laplace_covs(self, mode, x, uR, stage: int = 0) -> np.ndarray:
        return np.stack([
            laplace_approx(self.human, i, mode, x, uR, stage=stage, clip=False).covariance
            for i in range(self.n_theta)])

    def prediction_parts(self, x, uR):
        """f(x) + BR uR and BH(x), shared across modes."""
        f = self.joint.drift(x)
        base = f + self.joint.input_matrix_robot(x) @ np.asarray(uR, dtype=float)
        return base, self.joint.input_matrix_human(x)

    @property
    def sigma_d(self) -> np.ndarray:
        return self.joint.sigma_d


class CompositeObservation:
    """Product observation model over several humans.

    Composite modes are tuples of per-human mode labels; theta concatenates
    per-human weights; the basis-mean matrix and Laplace covariances embed
    block-wise into the stacked human-control space.
    """

    def __init__(self, joint: JointDynamics, humans: list[HumanBehaviorModel]):
        if len(joint.human_models) != len(humans) or not humans:
            raise BeliefError("one behavior model per human agent is required")
        self.joint = joint
        self.humans = list(humans)
        self.modes = tuple(itertools.product(*[h.modes for h in humans]))
        counts = [h.n_theta for h in humans]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        self.theta_slices = [slice(int(a), int(b))
                             for a, b in zip(offsets[:-1], offsets[1:])]
        self.n_theta = int(offsets[-1])

    def basis_means(self, mode, x, uR, stage: int = 0) -> np.ndarray:
        U = np.zeros((self.joint.dim_uH, self.n_theta))
        for h, (human, label) in enumerate(zip(self.humans, mode)):
            block = basis_matrix(human, label, x, uR, stage=stage, clip=False)
            U[self.joint.human_u_slices[h], self.theta_slices[h]] = block
        return U

    def laplace_covs(self, mode, x, uR, stage: int = 0) -> np.ndarray:
        out = np.zeros((self.n_theta, self.joint.dim_uH, self.joint.dim_uH))
        for h, (human, label) in enumerate(zip(self.humans, mode)):
            sl = self.joint.human_u_slices[h]
            for j in range(human.n_theta):
                pol = laplace_approx(human, j, label, x, uR, stage=stage, clip=False)
                out[self.theta_slices[h].start + j, sl, sl] = pol.covariance
        return out

    def prediction_parts(self, x, uR):
        f = self.joint.drift(x)
        base = f + self.joint.input_matrix_robot(x) @ np.asarray(uR, dtype=float)
        return base, self.joint.input_matrix_human(x)

    @property
    def sigma_d(self) -> np.ndarray:
        return self.joint.sigma_d


# ---------------------------------------------------------------------------
# Updates


def estimate_theta_bar(belief: BeliefState) -> np.ndarray:
    """Per-mode conditional mean of theta (prior mean before any evidence)."""
    return belief.means.copy()


def combined_covariance(obs, x, uR, theta_bar, mode, stage: int = 0) -> np.ndarray:
    """Covariance of the combined disturbance for one mode."""
    _, BH = obs.prediction_parts(x, uR)
    lap = obs.laplace_covs(mode, x, uR, stage=stage)
    return combined_cov_kernel(obs.sigma_d, BH, lap, np.asarray(theta_bar, dtype=float))


def state_likelihood(obs, x_next, x, uR, theta, mode, theta_bar=None,
                     stage: int = 0) -> float:
    """Gaussian density of the observed next state for fixed (theta, mode)."""
    theta = np.asarray(theta, dtype=float)
    if theta_bar is None:
        theta_bar = theta
    base, BH = obs.prediction_parts(x, uR)
    U = obs.basis_means(mode, x, uR, stage=stage)
    cov = combined_cov_kernel(obs.sigma_d, BH, obs.laplace_covs(mode, x, uR, stage=stage),
                              theta_bar)
    if np.min(np.linalg.eigvalsh(cov)) <= 0:
        raise BeliefError("combined disturbance covariance is singular")
    resid = np.asarray(x_next, dtype=float) - base - BH @ U @ theta
    return float(np.exp(gaussian_logpdf_kernel(resid, cov)))


def measurement_update_theta(obs, belief: BeliefState, x_next, x, uR, mode,
                             theta_bar=None, stage: int = 0):
    """Posterior (mean, covariance) of theta for one mode."""
    k = belief.mode_index(mode)
    if theta_bar is None:
        theta_bar = belief.means[k]
    base, BH = obs.prediction_parts(x, uR)
    U = obs.basis_means(mode, x, uR, stage=stage)
    H = BH @ U
    cov_d = combined_cov_kernel(obs.sigma_d, BH,
                                obs.laplace_covs(mode, x, uR, stage=stage), theta_bar)
    if np.min(np.linalg.eigvalsh(cov_d)) <= 0:
        raise BeliefError("combined disturbance covariance is singular")
    innovation = np.asarray(x_next, dtype=float) - base
    return theta_update_kernel(belief.means[k], belief.covariances[k], H, cov_d,
                               innovation)


def measurement_update_mode(obs, belief: BeliefState, x_next, x, uR,
                            theta_bar=None, stage: int = 0):
    """Posterior categorical over modes; log-space with max subtraction.

    Returns (probabilities, degenerate) where degenerate flags a total
    underflow (all marginal likelihoods vanished), in which case the prior
    is returned unchanged.
    """
    base, BH = obs.prediction_parts(x, uR)
    innovation = np.asarray(x_next, dtype=float) - base
    logw = np.full(belief.n_modes, -np.inf)
    for k, mode in enumerate(belief.modes):
        if belief.probabilities[k] <= 0.0:
            continue  # absorbing zero prior
        tb = belief.means[k] if theta_bar is None else np.asarray(theta_bar[k])
        U = obs.basis_means(mode, x, uR, stage=stage)
        H = BH @ U
        cov_d = combined_cov_kernel(
            obs.sigma_d, BH, obs.laplace_covs(mode, x, uR, stage=stage), tb)
        loglik = mode_loglik_kernel(belief.means[k], belief.covariances[k], H,
                                    cov_d, innovation)
        logw[k] = np.log(belief.probabilities[k]) + loglik
    top = np.max(logw)
    if not np.isfinite(top):
        return belief.probabilities.copy(), True
    w = np.exp(logw - top)
    return w / w.sum(), False


def time_update(belief: BeliefState, q_theta=None, mix: float = 0.0) -> BeliefState:
    """Hidden-state transition: identity by default, optional diffusion.

    ``q_theta`` inflates every mode covariance additively; ``mix`` blends the
    categorical with the uniform distribution at rate mix.
    """
    covs = belief.covariances
    if q_theta is not None:
        q = np.asarray(q_theta, dtype=float)
        if q.ndim == 0:
            q = q * np.eye(belief.n_theta)
        covs = covs + q[None]
    probs = belief.probabilities
    if mix:
        probs = (1.0 - mix) * probs + mix / belief.n_modes
    return replace(belief, covariances=covs, probabilities=probs)


def propagate(obs, belief: BeliefState, x_next, x, uR, theta_bar=None,
              q_theta=None, mix: float = 0.0, stage: int = 0) -> BeliefState:
    """Full approximate belief transition: theta and mode measurement updates
    followed by the hidden-state time update."""
    means = belief.means.copy()
    covs = belief.covariances.copy()
    for k, mode in enumerate(belief.modes):
        if belief.probabilities[k] <= 0.0:
            continue
        tb = None if theta_bar is None else theta_bar[k]
        means[k], covs[k] = measurement_update_theta(
            obs, belief, x_next, x, uR, mode, theta_bar=tb, stage=stage)
    probs, degenerate = measurement_update_mode(
        obs, belief, x_next, x, uR, theta_bar=theta_bar, stage=stage)
    updated = BeliefState(modes=belief.modes, means=means, covariances=covs,
                          probabilities=probs, degenerate=degenerate)
    return time_update(updated, q_theta=q_theta, mix=mix)


# ---------------------------------------------------------------------------
# Entropy helpers (explicit-dual cost term, diagnostics)


def categorical_entropy(probs, xp=np):
    p = xp.asarray(probs)
    safe = xp.maximum(p, 1e-300)
    return -xp.sum(p * xp.log(safe))


def gaussian_entropy(cov, xp=np):
    n = cov.shape[-1]
    _, logdet = xp.linalg.slogdet(cov)
    return 0.5 * (n * math.log(2 * math.pi * math.e) + logdet)


def hybrid_entropy(belief: BeliefState) -> float:
    """Categorical entropy plus mode-weighted Gaussian differential entropy."""
    h = categorical_entropy(belief.probabilities)
    for k in range(belief.n_modes):
        if belief.probabilities[k] > 0:
            h += belief.probabilities[k] * gaussian_entropy(belief.covariances[k])
    return float(h)
