"""Ridge-regularized least-squares density-ratio estimation with zero truncation.

Fitting reduces to one regularized Gram solve: the untruncated values at
the training points are gamma = n (G_Z + n eta I)^{-1} g_pi, where g_pi
collects inner products of the prior embedding with the training features.
The usable estimate truncates at zero, r_hat = max(0, gamma).  Off-sample
evaluation interpolates gamma through the training anchors so that the
fitted values are reproduced exactly at the anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .embeddings import embedding_inner_products, empirical_embedding
from .kernels import KernelSpec, as_points, gram, psd_factor, psd_solve

#: default regularization grid for cross-validation, 10^-4 .. 10^0
DEFAULT_ETA_GRID = tuple(np.logspace(-4.0, 0.0, 9))


@dataclass(frozen=True)
class RatioEstimate:
    """Fitted density ratio: raw and truncated values plus an interpolant.

    ``gamma`` are the untruncated solve values at the training points,
    ``r_hat = max(0, gamma)`` elementwise, and ``coefficients`` satisfy
    sum_i c_i k(anchor_i, z_j) = gamma_j so evaluation off the sample is
    consistent with the fit.  The reproduction is exact to solver precision
    on numerically nonsingular Grams and degrades with their conditioning.
    """

    anchors: np.ndarray
    kernel: KernelSpec
    gamma: np.ndarray
    r_hat: np.ndarray
    coefficients: np.ndarray
    eta: float


def kulsif_fit(
    train_z,
    g_pi: np.ndarray,
    eta: float,
    kernel: KernelSpec,
    gram_z: np.ndarray | None = None,
) -> RatioEstimate:
    """Fit the truncated least-squares ratio estimate at the training points.

    Args:
        train_z: training points, the anchors of the estimate.
        g_pi: prior-embedding inner products at the training points.
        eta: ridge parameter, > 0; the solve uses n * eta on the diagonal.
        kernel: kernel on the z-space.
        gram_z: optional precomputed square Gram of ``train_z``.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    pts = as_points(train_z)
    n = pts.shape[0]
    g_pi = np.asarray(g_pi, dtype=float).ravel()
    if g_pi.shape[0] != n:
        raise ValueError("g_pi must have one entry per training point")
    G = gram(kernel, pts) if gram_z is None else np.asarray(gram_z, dtype=float)

    gamma = n * psd_solve(G, n * eta, g_pi)
    r_hat = np.maximum(0.0, gamma)
    # interpolation through the anchors; jitter handles rank-deficient Grams,
    # and one refinement step keeps the anchor values reproduced to ~1e-12
    factor = psd_factor(G, 0.0)
    coefficients = cho_solve(factor, gamma)
    coefficients += cho_solve(factor, gamma - G @ coefficients)
    return RatioEstimate(
        anchors=pts,
        kernel=kernel,
        gamma=gamma,
        r_hat=r_hat,
        coefficients=coefficients,
        eta=eta,
    )


def kulsif_evaluate(est: RatioEstimate, z) -> np.ndarray | float:
    """Truncated ratio value max(0, sum_i c_i k(anchor_i, z)).

    A single point (scalar, or a length-d vector when anchors live in R^d
    with d > 1) returns a float; otherwise rows are treated as a batch and
    an array is returned.
    """
    arr = np.asarray(z, dtype=float)
    d = est.anchors.shape[1]
    if arr.ndim == 0:
        pts, single = arr.reshape(1, 1), True
    elif arr.ndim == 1 and d > 1 and arr.shape[0] == d:
        pts, single = arr.reshape(1, d), True
    else:
        pts, single = as_points(arr), False
    vals = np.maximum(0.0, gram(est.kernel, pts, est.anchors) @ est.coefficients)
    return float(vals[0]) if single else vals


def _holdout_objective(est: RatioEstimate, z_held, prior_held) -> float:
    """Penalty-free fitting objective on held-out data: 0.5 E_p[r^2] - E_pi[r]."""
    r_p = kulsif_evaluate(est, as_points(z_held))
    r_pi = kulsif_evaluate(est, as_points(prior_held))
    return 0.5 * float(np.mean(np.square(r_p))) - float(np.mean(r_pi))


def cv_scores(
    train_z,
    prior_samples,
    grid,
    kernel: KernelSpec,
    folds: int = 5,
) -> np.ndarray:
    """Cross-validated objective for each ridge value in ``grid``.

    Both sample sets are split into the same number of contiguous folds;
    each candidate is fit on the kept portions and scored on the held-out
    portions, and scores are averaged over folds.
    """
    z = as_points(train_z)
    prior = as_points(prior_samples)
    if len(grid) == 0:
        raise ValueError("empty grid")
    folds = min(folds, z.shape[0], prior.shape[0])
    if folds < 2:
        raise ValueError("need at least 2 folds' worth of data")

    z_folds = np.array_split(np.arange(z.shape[0]), folds)
    p_folds = np.array_split(np.arange(prior.shape[0]), folds)
    scores = np.zeros(len(grid))
    for zf, pf in zip(z_folds, p_folds):
        z_keep = np.delete(np.arange(z.shape[0]), zf)
        p_keep = np.delete(np.arange(prior.shape[0]), pf)
        emb = empirical_embedding(prior[p_keep], kernel)
        g_pi = embedding_inner_products(emb, z[z_keep])
        G_keep = gram(kernel, z[z_keep])
        for k, eta in enumerate(grid):
            est = kulsif_fit(z[z_keep], g_pi, float(eta), kernel, gram_z=G_keep)
            scores[k] += _holdout_objective(est, z[zf], prior[pf])
    return scores / folds


def tune_eta(
    train_z,
    prior_samples,
    grid=DEFAULT_ETA_GRID,
    kernel: KernelSpec | None = None,
    folds: int = 5,
) -> float:
    """Pick the ridge value minimizing the cross-validated objective.

    With no kernel given, a gaussian kernel with median-heuristic bandwidth
    on ``train_z`` is used.
    """
    grid = list(grid)
    if len(grid) == 0:
        raise ValueError("empty grid")
    if len(grid) == 1:
        return float(grid[0])
    if kernel is None:
        from .kernels import median_heuristic

        kernel = KernelSpec("gaussian", median_heuristic(train_z))
    scores = cv_scores(train_z, prior_samples, grid, kernel, folds=folds)
    return float(grid[int(np.argmin(scores))])
