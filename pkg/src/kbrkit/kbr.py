"""Posterior mean-embedding updates from a prior embedding and paired samples.

Two weight rules are provided.  The importance-weighted rule solves one
symmetric PSD system,

    w = sqrt(D) (sqrt(D) G_X sqrt(D) + n lam I)^{-1} sqrt(D) g_x,

with D = diag(r_hat) built from nonnegative ratio estimates, so the system
is PSD for every valid input.  The double-regularized rule keeps the signed
solve values gamma and squares the weighted Gram,

    w = L G_X ((L G_X)^2 + ridge I)^{-1} L g_x,   L = diag(gamma),

which is symmetric-indefinite in general and solved by pivoted LU; the
ridge scaling convention is configurable (see ``KbrConfig.ridge_scale``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .density_ratio import kulsif_fit
from .embeddings import MeanEmbedding, SampleSet, embedding_inner_products
from .kernels import KernelSpec, NumericalFailure, gram, median_heuristic, psd_solve

VARIANTS = ("iw", "original", "iw_true_ratio")


@dataclass(frozen=True)
class KbrConfig:
    """Regularization and kernel settings for a posterior update.

    ``beta`` rescales the median-heuristic bandwidths; pinned bandwidths
    take precedence when set.  ``ridge_scale`` sets how the second-stage
    ridge of the double-regularized rule enters: "n2" (default) treats the
    weighted covariances as 1/n-normalized so the ridge becomes n^2 * lam
    in Gram coordinates; "n" uses n * lam; "none" uses lam as is.
    """

    eta: float = 0.2
    lam: float = 0.2
    beta: float = 1.0
    variant: str = "iw"
    bandwidth_x: float | None = None
    bandwidth_z: float | None = None
    ridge_scale: str = "n2"

    def __post_init__(self) -> None:
        if self.eta <= 0 or self.lam <= 0 or self.beta <= 0:
            raise ValueError("eta, lam and beta must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.ridge_scale not in ("n2", "n", "none"):
            raise ValueError("ridge_scale must be 'n2', 'n' or 'none'")


@dataclass(frozen=True)
class PosteriorEmbedding:
    """Posterior mean embedding over the training z-anchors at one conditioning point."""

    embedding: MeanEmbedding
    conditioning_point: np.ndarray


def _effective_ridge(n: int, lam: float, ridge_scale: str) -> float:
    if ridge_scale == "n2":
        return n * n * lam
    if ridge_scale == "n":
        return n * lam
    if ridge_scale == "none":
        return lam
    raise ValueError(f"unknown ridge_scale {ridge_scale!r}")


def iw_kbr_weights(
    G_X: np.ndarray,
    r_hat: np.ndarray,
    g_x: np.ndarray,
    lam: float,
    ridge_scale: str = "n",
) -> np.ndarray:
    """Importance-weighted posterior weights for one or more conditioning points.

    ``g_x`` may be a vector or an (n, m) table of kernel evaluations; the
    result has matching shape.  Negative ratio entries violate the contract
    and raise.
    """
    G_X = np.asarray(G_X, dtype=float)
    r = np.asarray(r_hat, dtype=float).ravel()
    g = np.asarray(g_x, dtype=float)
    n = G_X.shape[0]
    if r.shape[0] != n or g.shape[0] != n:
        raise ValueError("dimensions do not conform")
    if np.any(r < 0):
        raise ValueError("importance weights must be nonnegative")
    if not np.allclose(G_X, G_X.T, rtol=1e-12, atol=1e-12):
        raise ValueError("G_X must be symmetric")

    s = np.sqrt(r)
    M = s[:, None] * G_X * s[None, :]  # symmetric PSD by construction
    rhs = s[:, None] * g if g.ndim == 2 else s * g
    sol = psd_solve(M, _effective_ridge(n, lam, ridge_scale), rhs)
    return s[:, None] * sol if g.ndim == 2 else s * sol


def original_kbr_weights(
    G_X: np.ndarray,
    gamma: np.ndarray,
    g_x: np.ndarray,
    lam: float,
    ridge_scale: str = "n2",
) -> np.ndarray:
    """Double-regularized posterior weights from signed solve values ``gamma``.

    The default "n2" ridge scaling corresponds to applying the squared
    regularization to 1/n-normalized weighted covariances with a plain
    ``lam`` ridge; see ``KbrConfig.ridge_scale`` for the alternatives.
    """
    G_X = np.asarray(G_X, dtype=float)
    gam = np.asarray(gamma, dtype=float).ravel()
    g = np.asarray(g_x, dtype=float)
    n = G_X.shape[0]
    if gam.shape[0] != n or g.shape[0] != n:
        raise ValueError("dimensions do not conform")

    M = gam[:, None] * G_X  # diag(gamma) @ G_X
    A = M @ M + _effective_ridge(n, lam, ridge_scale) * np.eye(n)
    rhs = gam[:, None] * g if g.ndim == 2 else gam * g
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("singular double-regularized system") from exc
    return M @ sol


def resolve_kernels(
    samples: SampleSet, cfg: KbrConfig
) -> tuple[KernelSpec, KernelSpec]:
    """Gaussian kernels with bandwidths pinned by the config or set by the median heuristic."""
    bx = cfg.bandwidth_x
    bz = cfg.bandwidth_z
    if bx is None:
        bx = cfg.beta * median_heuristic(samples.x)
    if bz is None:
        bz = cfg.beta * median_heuristic(samples.z)
    return KernelSpec("gaussian", bx), KernelSpec("gaussian", bz)


def kbr_posterior(
    samples: SampleSet,
    prior: MeanEmbedding,
    x_tilde,
    cfg: KbrConfig,
    true_ratio: Callable[[np.ndarray], np.ndarray] | None = None,
) -> PosteriorEmbedding:
    """Full posterior update at one conditioning point.

    Composes the Gram computations, the prior inner products, the ratio
    solve (estimated, or exact via ``true_ratio`` for the ``iw_true_ratio``
    variant) and the weight solve for the configured variant.

    A conditioning point far from every training x legitimately produces
    near-zero weights (and a near-zero posterior mean under the linear
    readout); that is the ridge prior, not an error.
    """
    kernel_x, kernel_z = resolve_kernels(samples, cfg)
    x_tilde = np.atleast_1d(np.asarray(x_tilde, dtype=float))
    n = len(samples)

    G_X = gram(kernel_x, samples.x)
    G_Z = gram(kernel_z, samples.z)
    g_pi = embedding_inner_products(prior, samples.z, kernel=kernel_z)
    g_x = gram(kernel_x, samples.x, x_tilde.reshape(1, -1))[:, 0]

    if cfg.variant == "iw":
        est = kulsif_fit(samples.z, g_pi, cfg.eta, kernel_z, gram_z=G_Z)
        w = iw_kbr_weights(G_X, est.r_hat, g_x, cfg.lam)
    elif cfg.variant == "iw_true_ratio":
        if true_ratio is None:
            raise ValueError("iw_true_ratio requires a true-ratio callback")
        r0 = np.maximum(0.0, np.asarray(true_ratio(samples.z), dtype=float).ravel())
        if r0.shape[0] != n:
            raise ValueError("true-ratio callback must return one value per sample")
        w = iw_kbr_weights(G_X, r0, g_x, cfg.lam)
    else:  # original
        gamma = n * psd_solve(G_Z, n * cfg.eta, g_pi)
        w = original_kbr_weights(G_X, gamma, g_x, cfg.lam, cfg.ridge_scale)

    emb = MeanEmbedding(anchors=samples.z, weights=w, kernel=kernel_z)
    return PosteriorEmbedding(embedding=emb, conditioning_point=x_tilde)


def posterior_expectation(post: PosteriorEmbedding, feature: str = "linear"):
    """Posterior functional readout.

    ``linear`` returns sum_i w_i z_i, the posterior mean estimate; ``kernel``
    returns the embedding itself.
    """
    if feature == "linear":
        emb = post.embedding
        return emb.weights @ emb.anchors
    if feature == "kernel":
        return post.embedding
    raise ValueError(f"unknown feature {feature!r}")
