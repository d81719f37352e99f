"""Classical filtering baselines that know the true dynamics.

Both filters consume a ``TrueModel`` holding the transition and observation
functions with their Jacobians and isotropic noise scales.  The extended
Kalman filter linearizes around the running mean; the particle filter uses
the bootstrap proposal with Gaussian likelihood weights and systematic
resampling once the effective sample size drops below half the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels import NumericalFailure


@dataclass(frozen=True)
class TrueModel:
    """Known state-space model with isotropic Gaussian noises.

    Transition z' = f(z) + N(0, sigma_z^2 I), observation x = h(z) +
    N(0, sigma_x^2 I).  ``f`` and ``h`` must be vectorized over rows of
    states; ``f_jac``/``h_jac`` return the Jacobian at a single state.
    """

    f: Callable[[np.ndarray], np.ndarray]
    f_jac: Callable[[np.ndarray], np.ndarray]
    sigma_z: float
    h: Callable[[np.ndarray], np.ndarray]
    h_jac: Callable[[np.ndarray], np.ndarray]
    sigma_x: float

    def __post_init__(self) -> None:
        if self.sigma_z <= 0 or self.sigma_x <= 0:
            raise ValueError("noise scales must be positive")


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted particle set; weights are normalized."""

    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be nonnegative and sum to one")

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles


def ess(weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w_i^2) of normalized weights."""
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(np.sum(w * w))


def ekf_run(model: TrueModel, observations, init_mean, init_cov):
    """Extended Kalman filter over an observation sequence.

    ``(init_mean, init_cov)`` is the prior for the first observation; each
    later step predicts through the transition before updating.  Returns
    per-step posterior means and covariances; covariances are re-symmetrized
    after every update.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    m = np.asarray(init_mean, dtype=float).copy()
    P = np.asarray(init_cov, dtype=float).copy()
    dim = m.shape[0]
    if P.shape != (dim, dim) or not np.allclose(P, P.T):
        raise ValueError("init_cov must be symmetric with matching dimension")

    Q = model.sigma_z**2 * np.eye(dim)
    n_obs = obs.shape[0]
    means = np.zeros((n_obs, dim))
    covs = np.zeros((n_obs, dim, dim))
    for t in range(n_obs):
        if t > 0:
            F = np.asarray(model.f_jac(m), dtype=float)
            m = model.f(m)
            P = F @ P @ F.T + Q

        H = np.asarray(model.h_jac(m), dtype=float)
        R = model.sigma_x**2 * np.eye(H.shape[0])
        S = H @ P @ H.T + R
        try:
            K = np.linalg.solve(S, H @ P).T
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("singular innovation covariance") from exc
        m = m + K @ (obs[t] - model.h(m))
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        means[t] = m
        covs[t] = P
    return means, covs


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling: one uniform offset, N evenly spaced positions."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(w), positions).clip(max=n - 1)


def pf_run(
    model: TrueModel,
    observations,
    n_particles: int,
    init_sampler: Callable[[np.random.Generator, int], np.ndarray],
    rng: np.random.Generator,
):
    """Bootstrap particle filter over an observation sequence.

    Particles propagate by sampling the transition; weights multiply the
    Gaussian observation likelihood (computed in log space).  Resampling is
    systematic, triggered when ESS < N/2.  Returns per-step posterior means
    and the per-step clouds.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    particles = np.atleast_2d(np.asarray(init_sampler(rng, n_particles), dtype=float))
    log_w = np.full(n_particles, -np.log(n_particles))

    n_obs = obs.shape[0]
    means = np.zeros((n_obs, particles.shape[1]))
    clouds: list[ParticleCloud] = []
    for t in range(n_obs):
        if t > 0:
            particles = np.atleast_2d(model.f(particles))
            if model.sigma_z > 0:
                particles = particles + model.sigma_z * rng.standard_normal(particles.shape)

        pred = np.atleast_2d(model.h(particles))
        resid = obs[t] - pred
        with np.errstate(over="ignore"):  # -inf log weights mean degeneracy, checked below
            log_w = log_w - 0.5 * np.sum(resid * resid, axis=1) / model.sigma_x**2
        shift = np.max(log_w)
        if not np.isfinite(shift):
            raise NumericalFailure("particle degeneracy")
        w = np.exp(log_w - shift)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            raise NumericalFailure("particle degeneracy")
        w = w / total

        means[t] = w @ particles
        clouds.append(ParticleCloud(particles=particles.copy(), weights=w.copy()))
        if ess(w) < n_particles / 2:
            idx = systematic_resample(w, rng)
            particles = particles[idx]
            log_w = np.full(n_particles, -np.log(n_particles))
        else:
            log_w = np.log(w)
    return means, clouds
