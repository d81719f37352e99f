"""Nonparametric state-space filtering by alternating embedding updates.

A model is fit once from a training trace {(x_t, z_t)}_{t=1..T}; filtering a
test observation sequence then alternates two weight updates over the fixed
z-anchors:

* correction: a posterior update conditioned on the current observation,
  with the running state as prior embedding (weights may be signed);
* prediction: the transition operator learned from the (z_t, z_{t+1})
  pairs, whose solve output lands on the successor anchors z_2..z_T (the
  first anchor receives weight zero).

Expensive fixed pieces (Gram matrices, the ratio-solve factor, and the
transition factor) are cached at fit time; only the correction's weighted
solve changes per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .embeddings import MeanEmbedding
from .kbr import KbrConfig, iw_kbr_weights, original_kbr_weights
from .kernels import KernelSpec, NumericalFailure, as_points, gram, median_heuristic, psd_factor

#: abort threshold on the l1 norm of filter weights
WEIGHT_DIVERGENCE_LIMIT = 1e3


@dataclass(frozen=True)
class FilterState:
    """Weight vector over the training z-anchors at one timestep."""

    w: np.ndarray
    t: int
    kind: str  # "filtered" | "predicted"

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).ravel())
        if self.kind not in ("filtered", "predicted"):
            raise ValueError(f"unknown state kind {self.kind!r}")


class KbfModel:
    """Fitted filter: training trace, kernels, and cached solve factors."""

    def __init__(
        self,
        train_x,
        train_z,
        cfg: KbrConfig,
        lam_prime: float | None = None,
    ):
        self.train_x = as_points(train_x)
        self.train_z = as_points(train_z)
        T = self.train_x.shape[0]
        if self.train_z.shape[0] != T:
            raise ValueError("x and z traces must have equal length")
        if T < 2:
            raise ValueError("need at least 2 timesteps to learn a transition")
        if cfg.variant not in ("iw", "original"):
            raise ValueError("filter supports variants 'iw' and 'original'")
        self.T = T
        self.cfg = cfg
        self.lam_prime = cfg.eta if lam_prime is None else float(lam_prime)
        if self.lam_prime <= 0:
            raise ValueError("lam_prime must be positive")

        bx = cfg.bandwidth_x
        bz = cfg.bandwidth_z
        if bx is None:
            bx = cfg.beta * median_heuristic(self.train_x)
        if bz is None:
            bz = cfg.beta * median_heuristic(self.train_z)
        self.kernel_x = KernelSpec("gaussian", bx)
        self.kernel_z = KernelSpec("gaussian", bz)

        self.G_X = gram(self.kernel_x, self.train_x)
        self.G_Z = gram(self.kernel_z, self.train_z)
        # transition blocks: rows are predecessors z_1..z_{T-1}
        self.G_prev = self.G_Z[: T - 1, : T - 1]
        self.G_prev_full = self.G_Z[: T - 1, :]

        self._ratio_factor = psd_factor(self.G_Z, T * cfg.eta)
        self._trans_factor = psd_factor(self.G_prev, (T - 1) * self.lam_prime)

    def conditioning_column(self, x_t) -> np.ndarray:
        x_t = np.atleast_1d(np.asarray(x_t, dtype=float)).reshape(1, -1)
        return gram(self.kernel_x, self.train_x, x_t)[:, 0]


def fit_kbf(train_x, train_z, cfg: KbrConfig, lam_prime: float | None = None) -> KbfModel:
    """Fit a filter model from a training trace; ``lam_prime`` defaults to ``cfg.eta``."""
    return KbfModel(train_x, train_z, cfg, lam_prime=lam_prime)


def init_state(model: KbfModel, prior: MeanEmbedding | None = None) -> FilterState:
    """State entering the first correction: uniform weights, or a supplied prior.

    A supplied prior must be anchored on the model's training z-points.
    """
    if prior is None:
        w = np.full(model.T, 1.0 / model.T)
    else:
        if prior.anchors.shape != model.train_z.shape or not np.array_equal(
            prior.anchors, model.train_z
        ):
            raise ValueError("prior anchors must be the training z-points")
        w = prior.weights.copy()
    return FilterState(w=w, t=1, kind="predicted")


def correct_step(model: KbfModel, state: FilterState, x_t) -> FilterState:
    """Condition the predicted state on the observation at its timestep.

    Delegates to the posterior-update rule of the model's variant with the
    state as prior embedding; prior weights may be signed.
    """
    if state.kind != "predicted":
        raise ValueError("correct_step expects a predicted state")
    g_pi = model.G_Z @ state.w
    gamma = model.T * cho_solve(model._ratio_factor, g_pi)
    g_x = model.conditioning_column(x_t)
    if model.cfg.variant == "iw":
        w = iw_kbr_weights(model.G_X, np.maximum(0.0, gamma), g_x, model.cfg.lam)
    else:
        w = original_kbr_weights(
            model.G_X, gamma, g_x, model.cfg.lam, model.cfg.ridge_scale
        )
    return FilterState(w=w, t=state.t, kind="filtered")


def predict_step(model: KbfModel, state: FilterState) -> FilterState:
    """Advance a filtered state one step through the learned transition.

    Entry j of the regularized solve lands on anchor z_{j+1}; the first
    anchor's weight is zero.
    """
    if state.kind != "filtered":
        raise ValueError("predict_step expects a filtered state")
    rhs = model.G_prev_full @ state.w
    shifted = cho_solve(model._trans_factor, rhs)
    w = np.zeros(model.T)
    w[1:] = shifted
    return FilterState(w=w, t=state.t + 1, kind="predicted")


def run_filter(
    model: KbfModel,
    test_x,
    prior: MeanEmbedding | None = None,
    readout: str = "linear",
):
    """Filter a test observation sequence.

    Returns the per-step posterior means (sum_i w_i z_i) and the list of
    filtered states.  Aborts with the step index if weights go non-finite
    or blow past the divergence limit.
    """
    if readout != "linear":
        raise ValueError("only the linear readout is supported")
    obs = as_points(test_x)
    if obs.shape[0] == 0:
        raise ValueError("empty test sequence")

    state = init_state(model, prior)
    means = np.zeros((obs.shape[0], model.train_z.shape[1]))
    filtered: list[FilterState] = []
    for t in range(obs.shape[0]):
        state = correct_step(model, state, obs[t])
        _check_weights(state.w, t + 1)
        means[t] = state.w @ model.train_z
        filtered.append(state)
        if t + 1 < obs.shape[0]:
            state = predict_step(model, state)
            _check_weights(state.w, t + 2)
    return means, filtered


def _check_weights(w: np.ndarray, step: int) -> None:
    if not np.isfinite(w).all():
        raise NumericalFailure(f"non-finite filter weights at step {step}")
    if np.abs(w).sum() > WEIGHT_DIVERGENCE_LIMIT:
        raise NumericalFailure(f"filter weight divergence at step {step}")
