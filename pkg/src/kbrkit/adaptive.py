"""Learned observation features for the weighted posterior update.

A small tanh multilayer perceptron maps observations to d-dimensional
features.  For a fixed feature table Psi (n x d), ratio diagonal D and
ridge lam, the profiled regression objective has the closed form

    loss = tr(G_Z (D - D Psi S Psi^T D)),    S = (Psi^T D Psi + lam I)^{-1},

which is a residual sum of squares and therefore nonnegative.  Its exact
gradient with respect to Psi,

    dloss/dPsi = -2 D (I - Psi S Psi^T D) G_Z D Psi S,

is pushed through the network by explicitly coded backpropagation, so the
module has no autodiff dependency and training is deterministic given the
initialization.  Posterior weights under the learned features,

    w = D Psi S psi(x~),

coincide with the importance-weighted Gram rule under the linear kernel
k(x, x') = psi(x)^T psi(x').
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .embeddings import SampleSet
from .kernels import NumericalFailure, as_points, draw_rff_map, median_heuristic, rff_features


@dataclass
class FeatureNet:
    """Fully connected tanh network; the output layer is linear."""

    weights: list
    biases: list

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator) -> "FeatureNet":
        """Initialize with Uniform(+-1/sqrt(fan_in)) weights and zero biases."""
        sizes = list(layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must be positive")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases)

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x) -> np.ndarray:
        return self._forward_cached(x)[0]

    def _forward_cached(self, x):
        a = as_points(x)
        activations = [a]
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ W + b
            a = h if l == last else np.tanh(h)
            activations.append(a)
        return a, activations

    def backward(self, activations, grad_out):
        """Parameter gradients for an upstream gradient on the output table."""
        grads = []
        delta = np.asarray(grad_out, dtype=float)
        for l in range(len(self.weights) - 1, -1, -1):
            a_in = activations[l]
            grads.append((a_in.T @ delta, delta.sum(axis=0)))
            if l > 0:
                delta = delta @ self.weights[l].T
                delta = delta * (1.0 - activations[l] ** 2)  # tanh'
        grads.reverse()
        return grads

    def apply_update(self, grads, step: float) -> None:
        for (W, b), (dW, db) in zip(zip(self.weights, self.biases), grads):
            W -= step * dW
            b -= step * db


@dataclass(frozen=True)
class AdaptiveLossInputs:
    """Bundle for one loss evaluation: z-feature Gram, ratio diagonal, features, ridge."""

    gram_z: np.ndarray
    ratio: np.ndarray
    features: np.ndarray
    ridge: float

    def __post_init__(self) -> None:
        r = np.asarray(self.ratio, dtype=float).ravel()
        object.__setattr__(self, "ratio", r)
        if np.any(r < 0):
            raise ValueError("ratio diagonal must be nonnegative")
        n = r.shape[0]
        if self.gram_z.shape != (n, n) or self.features.shape[0] != n:
            raise ValueError("dimensions do not conform")
        if self.ridge <= 0:
            raise ValueError("ridge must be positive")


def _solve_small(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(A, lower=True), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("singular feature system") from exc


def adaptive_loss(inputs: AdaptiveLossInputs) -> float:
    """Profiled regression objective for the given feature table."""
    G, r, Psi, lam = inputs.gram_z, inputs.ratio, inputs.features, inputs.ridge
    d = Psi.shape[1]
    B = r[:, None] * Psi  # D Psi
    A = Psi.T @ B + lam * np.eye(d)
    SBt = _solve_small(A, B.T)  # S Psi^T D
    t1 = float(np.sum(np.diag(G) * r))  # tr(G D)
    t2 = float(np.sum((G @ B) * SBt.T))  # tr(G D Psi S Psi^T D)
    return t1 - t2


def _loss_and_feature_grad(gram_z, ratio, Psi, ridge):
    """Loss value and dloss/dPsi for fixed Gram and ratio diagonal."""
    G, r = gram_z, ratio
    d = Psi.shape[1]
    B = r[:, None] * Psi  # D Psi
    A = Psi.T @ B + ridge * np.eye(d)
    BS = _solve_small(A, B.T).T  # D Psi S
    GB = G @ B  # G D Psi
    loss = float(np.sum(np.diag(G) * r)) - float(np.sum(GB * BS))
    if not np.isfinite(loss):
        raise NumericalFailure("non-finite feature training loss")
    Q = _solve_small(A, GB.T).T  # G D Psi S
    grad = -2.0 * r[:, None] * (Q - Psi @ _solve_small(A, B.T @ Q))
    return loss, grad


def adaptive_loss_grad(net: FeatureNet, x, gram_z, ratio, ridge):
    """Loss and exact parameter gradients at the network's current features.

    Returns ``(loss, grads)`` where ``grads`` matches the layout of
    ``net.weights``/``net.biases`` as a list of (dW, db) pairs; validated
    against central finite differences in the test suite.
    """
    ratio = np.asarray(ratio, dtype=float).ravel()
    gram_z = np.asarray(gram_z, dtype=float)
    psi, activations = net._forward_cached(x)
    loss, grad_psi = _loss_and_feature_grad(gram_z, ratio, psi, ridge)
    return loss, net.backward(activations, grad_psi)


def default_z_gram(z, d_rff: int = 256, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random-feature approximation of the gaussian z-Gram (median bandwidth)."""
    pts = as_points(z)
    if rng is None:
        rng = np.random.default_rng(0)
    rmap = draw_rff_map(pts.shape[1], d_rff, median_heuristic(pts), rng)
    F = rff_features(rmap, pts)
    return F @ F.T


def train_features(
    net: FeatureNet,
    samples: SampleSet,
    r_hat: np.ndarray | None,
    ridge: float,
    steps: int,
    step_size: float = 1e-3,
    decay: float = 0.0,
    gram_z: np.ndarray | None = None,
):
    """Plain gradient descent on the profiled objective; mutates ``net``.

    ``r_hat=None`` trains unweighted (all ratios one), the mode used when a
    single feature map is shared across filter timesteps.  Returns the net
    and the loss trace (length steps + 1, initial loss first).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = len(samples)
    r = np.ones(n) if r_hat is None else np.asarray(r_hat, dtype=float).ravel()
    G = default_z_gram(samples.z) if gram_z is None else np.asarray(gram_z, dtype=float)

    trace = np.zeros(steps + 1)
    for k in range(steps):
        loss, grads = adaptive_loss_grad(net, samples.x, G, r, ridge)
        if not np.isfinite(loss):
            raise NumericalFailure(f"non-finite training loss at step {k}")
        trace[k] = loss
        net.apply_update(grads, step_size / (1.0 + decay * k))
    trace[steps] = adaptive_loss(
        AdaptiveLossInputs(gram_z=G, ratio=r, features=net.forward(samples.x), ridge=ridge)
    )
    if not np.isfinite(trace[steps]):
        raise NumericalFailure("non-finite training loss after final step")
    if trace[steps] > trace[0]:
        warnings.warn("feature training did not reduce the loss", stacklevel=2)
    return net, trace


def finite_difference_grads(
    net: FeatureNet, x, gram_z, ratio, ridge: float, step: float = 1e-5
):
    """Central-difference parameter gradients of the profiled objective.

    Brute-force audit path for ``adaptive_loss_grad``; perturbs every weight
    and bias entry in turn, so cost scales with the parameter count.
    """
    ratio = np.asarray(ratio, dtype=float).ravel()
    gram_z = np.asarray(gram_z, dtype=float)

    def loss_now() -> float:
        return adaptive_loss(
            AdaptiveLossInputs(gram_z=gram_z, ratio=ratio, features=net.forward(x), ridge=ridge)
        )

    grads = []
    for W, b in zip(net.weights, net.biases):
        pair = []
        for arr in (W, b):
            d_arr = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                saved = arr[idx]
                arr[idx] = saved + step
                up = loss_now()
                arr[idx] = saved - step
                down = loss_now()
                arr[idx] = saved
                d_arr[idx] = (up - down) / (2.0 * step)
            pair.append(d_arr)
        grads.append(tuple(pair))
    return grads


def adaptive_posterior_weights(
    net: FeatureNet, train_x, ratio, x_tilde, ridge: float
) -> np.ndarray:
    """Posterior weights under the learned features at one conditioning point."""
    r = np.asarray(ratio, dtype=float).ravel()
    if np.any(r < 0):
        raise ValueError("ratio diagonal must be nonnegative")
    Psi = net.forward(train_x)
    if Psi.shape[0] != r.shape[0]:
        raise ValueError("dimensions do not conform")
    psi_x = net.forward(np.atleast_2d(np.asarray(x_tilde, dtype=float)))[0]
    B = r[:, None] * Psi
    A = Psi.T @ B + ridge * np.eye(Psi.shape[1])
    return B @ _solve_small(A, psi_x)
