"""Mean embeddings and the conditional mean embedding in weight form.

A distribution is represented by anchor points plus a weight vector; the
embedded function is z -> sum_i w_i k(anchor_i, z).  Weights may be signed
(posteriors produce signed weights), so no simplex constraint is imposed.
The conditional mean embedding is kernel ridge regression kept in sample
coordinates: conditioning at x~ yields weights (G_X + n lam I)^{-1} g_x~.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .kernels import KernelSpec, as_points, gram, psd_factor


@dataclass(frozen=True)
class SampleSet:
    """Paired draws {(x_i, z_i)} from the training distribution."""

    x: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", as_points(self.x))
        object.__setattr__(self, "z", as_points(self.z))
        if self.x.shape[0] != self.z.shape[0]:
            raise ValueError("x and z must pair up one-to-one")
        if self.x.shape[0] == 0:
            raise ValueError("empty sample set")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class MeanEmbedding:
    """Weighted anchor representation sum_i w_i phi(anchor_i).

    ``kernel`` may be None, in which case the consumer supplies it at
    evaluation time (useful when the bandwidth is resolved later from
    training data).
    """

    anchors: np.ndarray
    weights: np.ndarray
    kernel: KernelSpec | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "anchors", as_points(self.anchors))
        w = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "weights", w)
        if w.shape[0] != self.anchors.shape[0]:
            raise ValueError("one weight per anchor required")
        if not np.isfinite(w).all():
            raise ValueError("non-finite embedding weights")


def empirical_embedding(samples, kernel: KernelSpec | None = None) -> MeanEmbedding:
    """Uniform embedding of an i.i.d. sample: anchors = samples, weights 1/m."""
    pts = as_points(samples)
    m = pts.shape[0]
    if m == 0:
        raise ValueError("empty sample set")
    return MeanEmbedding(anchors=pts, weights=np.full(m, 1.0 / m), kernel=kernel)


def embedding_inner_products(
    embedding: MeanEmbedding, eval_points, kernel: KernelSpec | None = None
) -> np.ndarray:
    """Inner products of the embedding with features at ``eval_points``.

    Entry i is sum_j w_j k(anchor_j, p_i).  The kernel comes from the
    embedding when it carries one; supplying a conflicting kernel is an
    error.
    """
    if embedding.kernel is not None and kernel is not None and embedding.kernel != kernel:
        raise ValueError("kernel mismatch between embedding and caller")
    spec = embedding.kernel if embedding.kernel is not None else kernel
    if spec is None:
        raise ValueError("no kernel available for evaluation")
    K = gram(spec, as_points(eval_points), embedding.anchors)
    return K @ embedding.weights


@dataclass
class ConditionalOperator:
    """Fitted conditional mean embedding, realized in sample coordinates.

    Holds the Cholesky factor of (G_X + n lam I); conditioning reduces to
    one triangular solve per query point.
    """

    train_x: np.ndarray
    train_z: np.ndarray
    lam: float
    kernel_x: KernelSpec
    kernel_z: KernelSpec
    _factor: tuple = field(repr=False, default=None)

    def weights_at(self, x_new) -> np.ndarray:
        """Posterior-embedding weights for each query row, as an (n, m) table."""
        g = gram(self.kernel_x, self.train_x, as_points(x_new))  # (n, m)
        return cho_solve(self._factor, g)

    def predict_embedding(self, x_new) -> MeanEmbedding:
        w = self.weights_at(as_points(x_new))
        return MeanEmbedding(anchors=self.train_z, weights=w[:, 0], kernel=self.kernel_z)

    def predict_mean(self, x_new) -> np.ndarray:
        """Posterior mean under the linear readout: one row sum_i w_i z_i per query."""
        return self.weights_at(x_new).T @ self.train_z


def fit_cme(
    samples: SampleSet, lam: float, kernel_x: KernelSpec, kernel_z: KernelSpec
) -> ConditionalOperator:
    """Kernel ridge regression from x-features onto z-features.

    The ridge enters as n * lam, matching the weighted estimators elsewhere
    in the package, so the two coincide exactly when all importance weights
    are one.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    n = len(samples)
    G = gram(kernel_x, samples.x)
    factor = psd_factor(G, n * lam)
    return ConditionalOperator(
        train_x=samples.x,
        train_z=samples.z,
        lam=lam,
        kernel_x=kernel_x,
        kernel_z=kernel_z,
        _factor=factor,
    )
