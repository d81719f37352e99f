"""Kernel primitives shared by every estimator in the package.

Conventions fixed here and relied upon everywhere else:

* gaussian kernel   k(x, y) = exp(-||x - y||^2 / (2 sigma^2))
* linear kernel     k(x, y) = <x, y>
* bandwidth sigma is in distance units (typically the median pairwise
  distance of a sample, optionally rescaled)

Points are (n, d) float arrays; 1-D input is treated as n points in R^1.
All functions are pure and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist, squareform


class NumericalFailure(RuntimeError):
    """A numerical routine failed beyond the built-in recovery attempts."""


#: above this sample size the median heuristic uses a random pair subsample
MEDIAN_EXACT_LIMIT = 2000
_MEDIAN_SUBSAMPLE_PAIRS = 2000

_JITTER_BASE = 1e-10
_JITTER_RETRIES = 8


@dataclass(frozen=True)
class KernelSpec:
    """A positive definite kernel; ``gaussian`` carries a bandwidth, ``linear`` none."""

    kind: str
    bandwidth: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "gaussian":
            bw = self.bandwidth
            if bw is None or not np.isfinite(bw) or bw <= 0:
                raise ValueError("gaussian kernel requires a finite bandwidth > 0")
        elif self.kind == "linear":
            if self.bandwidth is not None:
                raise ValueError("linear kernel carries no parameters")
        else:
            raise ValueError(f"unknown kernel kind: {self.kind!r}")


def as_points(points) -> np.ndarray:
    """Coerce input to an (n, d) float array, promoting 1-D input to d=1."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"points must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def median_heuristic(points, rng: np.random.Generator | None = None) -> float:
    """Median of pairwise Euclidean distances over distinct index pairs.

    Exact over all pairs for n <= MEDIAN_EXACT_LIMIT; beyond that a fixed
    number of random pairs is drawn from ``rng`` (deterministic default) so
    results stay reproducible.
    """
    pts = as_points(points)
    n = pts.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least 2 points")
    if n <= MEDIAN_EXACT_LIMIT:
        dists = pdist(pts)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        i = rng.integers(0, n, size=_MEDIAN_SUBSAMPLE_PAIRS)
        j = rng.integers(0, n - 1, size=_MEDIAN_SUBSAMPLE_PAIRS)
        j = np.where(j >= i, j + 1, j)  # distinct index pairs only
        dists = np.linalg.norm(pts[i] - pts[j], axis=1)
    med = float(np.median(dists))
    if med <= 0.0:
        raise ValueError("degenerate sample: zero median distance")
    return med


def gram(spec: KernelSpec, a, b=None) -> np.ndarray:
    """Kernel evaluation table K[i, j] = k(a_i, b_j).

    With ``b`` omitted (or identical to ``a``) the square Gram is returned
    exactly symmetric, and with unit diagonal for the gaussian kernel.
    """
    pa = as_points(a)
    square = b is None or b is a
    pb = pa if square else as_points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    if not (np.isfinite(pa).all() and np.isfinite(pb).all()):
        raise ValueError("non-finite input coordinate")

    if spec.kind == "linear":
        out = pa @ pb.T
        if square:
            out = 0.5 * (out + out.T)
        return out

    denom = 2.0 * spec.bandwidth**2
    if square:
        sq = squareform(pdist(pa, metric="sqeuclidean"))
    else:
        sq = cdist(pa, pb, metric="sqeuclidean")
    return np.exp(-sq / denom)


def psd_factor(G: np.ndarray, ridge: float):
    """Cholesky factor of (G + ridge * I), with escalating diagonal jitter.

    On factorization failure the diagonal is inflated by 1e-10 * tr(G)/n,
    doubled up to 8 times before giving up.  Returns the factor in the form
    accepted by ``scipy.linalg.cho_solve``.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("G must be square")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    n = G.shape[0]

    M = G if ridge == 0 else G + ridge * np.eye(n)
    try:
        return cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        pass

    jitter = _JITTER_BASE * np.trace(G) / n
    for _ in range(_JITTER_RETRIES):
        try:
            return cho_factor(M + jitter * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NumericalFailure("ill-conditioned Gram")


def psd_solve(G: np.ndarray, ridge: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (G + ridge * I) x = rhs by Cholesky with escalating jitter.

    ``G`` must be square and symmetric PSD up to roundoff; ``rhs`` may be a
    vector or a table of right-hand-side columns.
    """
    rhs = np.asarray(rhs, dtype=float)
    G = np.asarray(G, dtype=float)
    if rhs.shape[0] != G.shape[0]:
        raise ValueError("rhs does not conform with G")
    return cho_solve(psd_factor(G, ridge), rhs)


@dataclass(frozen=True)
class RFFMap:
    """Random cosine feature map approximating a gaussian kernel.

    ``frequencies`` has one row per feature, drawn N(0, 1/sigma^2) per
    coordinate; ``phases`` are Uniform[0, 2pi); ``scale`` = sqrt(2/d_rff).
    """

    frequencies: np.ndarray
    phases: np.ndarray
    scale: float


def draw_rff_map(d_in: int, d_rff: int, bandwidth: float, rng: np.random.Generator) -> RFFMap:
    """Sample a random Fourier feature map for the gaussian kernel of the given bandwidth."""
    if d_in < 1 or d_rff < 1:
        raise ValueError("dimensions must be positive")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    freqs = rng.normal(0.0, 1.0 / bandwidth, size=(d_rff, d_in))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=d_rff)
    return RFFMap(frequencies=freqs, phases=phases, scale=np.sqrt(2.0 / d_rff))


def rff_features(rmap: RFFMap, points) -> np.ndarray:
    """Feature table with row i = scale * cos(frequencies @ x_i + phases).

    Inner products of rows approximate the gaussian kernel the map was
    drawn for.
    """
    pts = as_points(points)
    if pts.shape[1] != rmap.frequencies.shape[1]:
        raise ValueError(
            f"dimension mismatch: map expects {rmap.frequencies.shape[1]}, got {pts.shape[1]}"
        )
    return rmap.scale * np.cos(pts @ rmap.frequencies.T + rmap.phases)
