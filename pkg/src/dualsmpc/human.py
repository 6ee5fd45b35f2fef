"""Boltzmann basis-policy human model with Laplace Gaussian approximation.

A human picks each basis action with probability proportional to
exp(beta * Q_i^M) and executes the theta-weighted combination of basis
draws. For quadratic Q-models the Laplace approximation is exact: mean at
the argmax, covariance (-d2Q/du2)^{-1} / beta. Basis means assemble into
the matrix that drives both the approximate joint dynamics and the belief
updates.

Basis-mean bounds: following the belief-propagation convention, the basis
matrix uses unclipped stationary points by default (the box constraint on
the executed action is enforced separately by projection); ``laplace_approx``
reports the clipped mean with a flag when the stationary point leaves the
control box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .dynamics import Box
from .lqgame import QModel


class HumanModelError(ValueError):
    """Behavior model misconfiguration (unknown basis/mode, bad beta)."""


@dataclass(frozen=True)
class LaplacePolicy:
    """Gaussian approximation of one basis policy at a given (x, uR)."""

    mean: np.ndarray
    covariance: np.ndarray
    clipped: bool = False


class FixedQProvider:
    """Q-model provider backed by an explicit table, for synthetic setups.

    ``table`` maps (basis_index, mode_label) to a QModel or to a list of
    QModels indexed by stage.
    """

    def __init__(self, table: dict):
        self.table = dict(table)

    def refresh(self, x0: np.ndarray) -> None:
        pass

    def q_model(self, basis: int, mode: str, stage: int = 0):
        entry = self.table[(basis, mode)]
        if isinstance(entry, (list, tuple)):
            return entry[min(stage, len(entry) - 1)]
        return entry


class HumanBehaviorModel:
    """One human's basis-policy set over a finite mode set.

    The provider resolves (basis, mode, stage) to a quadratic Q-model; a
    game-theoretic provider re-solves its games when ``refresh`` is called
    with a new joint state.
    """

    def __init__(self, modes, n_theta: int, provider, beta: float, bounds: Box):
        if beta <= 0:
            raise HumanModelError("rationality coefficient beta must be positive")
        if n_theta < 1:
            raise HumanModelError("at least one basis policy is required")
        self.modes = tuple(modes)
        self.n_theta = int(n_theta)
        self.provider = provider
        self.beta = float(beta)
        self.bounds = bounds

    @property
    def dim_u(self) -> int:
        return self.bounds.dim

    def refresh(self, x0: np.ndarray) -> None:
        self.provider.refresh(np.asarray(x0, dtype=float))

    def q_model(self, basis: int, mode: str, stage: int = 0):
        if mode not in self.modes:
            raise HumanModelError(f"unknown mode {mode!r}")
        if not 0 <= basis < self.n_theta:
            raise HumanModelError(f"basis index {basis} out of range")
        return self.provider.q_model(basis, mode, stage)


def boltzmann_density(model: HumanBehaviorModel, basis: int, mode: str,
                      x, uR, uH, normalized: bool = False, stage: int = 0) -> float:
    """Density of one basis action: exp(beta * Q) up to normalization.

    With ``normalized=True`` the quadratic Q is integrated analytically over
    the whole control space, which makes the density exactly the Gaussian
    centered at the rational action.
    """
    q = model.q_model(basis, mode, stage)
    if not normalized:
        return float(np.exp(model.beta * _q_value(q, x, uR, uH)))
    pol = laplace_approx(model, basis, mode, x, uR, stage=stage, clip=False)
    return float(np.exp(_gaussian_logpdf(np.asarray(uH, dtype=float),
                                         pol.mean, pol.covariance)))


def _q_value(q, x, uR, uH) -> float:
    if isinstance(q, QModel):
        return q.value(x, uR, uH)
    return float(q(x, uR, uH))


def _gaussian_logpdf(y, mean, cov):
    d = y - mean
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("covariance not positive definite")
    sol = np.linalg.solve(cov, d)
    return -0.5 * (d @ sol + logdet + y.shape[0] * np.log(2 * np.pi))


def laplace_approx(model: HumanBehaviorModel, basis: int, mode: str, x, uR,
                   stage: int = 0, clip: bool = True) -> LaplacePolicy:
    """Gaussian fit at the rational action.

    Quadratic Q-models are handled analytically. A non-quadratic Q (any
    callable of (x, uR, uH)) is maximized numerically over the control box
    and the curvature is taken by central finite differences at the
    maximizer.
    """
    q = model.q_model(basis, mode, stage)
    if isinstance(q, QModel):
        mean = q.argmax_uH(x, uR)
        neg_hess = -0.5 * (q.HHH + q.HHH.T)
        cov = np.linalg.inv(neg_hess) / model.beta
    else:
        mean, neg_hess = _numerical_laplace(q, model.bounds, x, uR)
        cov = np.linalg.inv(neg_hess) / model.beta
    cov = 0.5 * (cov + cov.T)
    clipped = not model.bounds.contains(mean)
    if clipped and clip:
        mean = model.bounds.project(mean)
    return LaplacePolicy(mean=np.asarray(mean, dtype=float), covariance=cov,
                         clipped=clipped)


def _numerical_laplace(q, bounds: Box, x, uR, h: float = 1e-5):
    m = bounds.dim
    x0 = 0.5 * (bounds.lower + bounds.upper)
    res = scipy.optimize.minimize(
        lambda u: -float(q(x, uR, u)), x0, method="L-BFGS-B",
        bounds=list(zip(bounds.lower, bounds.upper)),
        options={"ftol": 1e-14, "gtol": 1e-12})
    mean = res.x
    H = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            ei = np.zeros(m)
            ej = np.zeros(m)
            ei[i] = h
            ej[j] = h
            H[i, j] = (q(x, uR, mean + ei + ej) - q(x, uR, mean + ei - ej)
                       - q(x, uR, mean - ei + ej) + q(x, uR, mean - ei - ej)) / (4 * h * h)
    return mean, -0.5 * (H + H.T)


def basis_matrix(model: HumanBehaviorModel, mode: str, x, uR,
                 stage: int = 0, clip: bool = False) -> np.ndarray:
    """Matrix with basis means as columns (dim_u x n_theta)."""
    cols = [laplace_approx(model, i, mode, x, uR, stage=stage, clip=clip).mean
            for i in range(model.n_theta)]
    return np.stack(cols, axis=1)


def mixture_moments(model: HumanBehaviorModel, theta, mode: str, x, uR,
                    stage: int = 0):
    """Mean and covariance of the theta-weighted action combination."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_theta,):
        raise HumanModelError(f"theta must have length {model.n_theta}")
    mean = np.zeros(model.dim_u)
    cov = np.zeros((model.dim_u, model.dim_u))
    for i in range(model.n_theta):
        pol = laplace_approx(model, i, mode, x, uR, stage=stage, clip=False)
        mean += theta[i] * pol.mean
        cov += theta[i] ** 2 * pol.covariance
    return mean, cov


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def sample_human_action(model: HumanBehaviorModel, theta, mode: str, x, uR,
                        rng: np.random.Generator, stage: int = 0,
                        project: bool = True) -> np.ndarray:
    """Draw one action from the theta-mixture and project it onto the box."""
    mean, cov = mixture_moments(model, theta, mode, x, uR, stage=stage)
    u = mean + _psd_sqrt(cov) @ rng.standard_normal(model.dim_u)
    return model.bounds.project(u) if project else u


def simulate_human(model: HumanBehaviorModel, theta_true, mode_true: str,
                   x, uR_observed, rng: np.random.Generator | None = None,
                   noise: bool = True) -> np.ndarray:
    """Ground-truth human action at the current state.

    The caller refreshes the model's game provider at the current state
    beforehand; the executed action is the theta-weighted combination of
    equilibrium basis actions plus Boltzmann noise, projected to the box.
    """
    if noise:
        if rng is None:
            raise HumanModelError("noise sampling requires an rng")
        return sample_human_action(model, theta_true, mode_true, x, uR_observed,
                                   rng, project=True)
    mean, _ = mixture_moments(model, theta_true, mode_true, x, uR_observed)
    return model.bounds.project(mean)
