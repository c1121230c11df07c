"""Tensor kernels used throughout: Gaussian smoothing, corner-aligned bilinear
resampling (and its exact adjoint) and Dirichlet sampling.

Images are ``(H, W, C)`` arrays and planar fields are ``(H, W)`` arrays.  The
planar kernels operate on the last two axes so a stack of ``k`` planes with
shape ``(k, H, W)`` can be processed in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "GaussianKernel",
    "gaussian_kernel",
    "gaussian_smooth",
    "interpolation_matrix",
    "upsample_bilinear",
    "upsample_adjoint",
    "sample_dirichlet",
    "sample_beta",
]


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized, symmetric 1-D Gaussian taps; applied separably along both axes."""

    sigma: float
    radius: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size != 2 * self.radius + 1:
            raise InvalidInputError(
                f"kernel of radius {self.radius} needs {2 * self.radius + 1} taps, got {w.size}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError("kernel weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)


def gaussian_kernel(sigma: float, radius: int | None = None) -> GaussianKernel:
    """Build a truncated Gaussian with ``radius = ceil(3 * sigma)`` unless given."""
    if sigma <= 0 and radius != 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = int(math.ceil(3.0 * sigma))
    if radius < 0:
        raise InvalidInputError(f"radius must be nonnegative, got {radius}")
    if radius == 0:
        return GaussianKernel(float(sigma), 0, np.ones(1))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    w /= w.sum()
    # exact mirror symmetry regardless of summation order
    w = 0.5 * (w + w[::-1])
    return GaussianKernel(float(sigma), radius, w)


def _convolve_axis(a: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = (taps.size - 1) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="reflect") if a.shape[axis] > 1 else np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for t, w in enumerate(taps):
        out += w * np.take(padded, np.arange(t, t + n), axis=axis)
    return out


def gaussian_smooth(field: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Separable Gaussian filtering over the last two axes with reflect padding."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim < 2 or f.shape[-1] == 0 or f.shape[-2] == 0:
        raise InvalidInputError(f"cannot smooth a field of shape {f.shape}")
    if kernel.radius == 0:
        return f.copy()
    out = _convolve_axis(f, kernel.weights, axis=f.ndim - 1)
    return _convolve_axis(out, kernel.weights, axis=f.ndim - 2)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    a = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    a[rows, lo] = 1.0 - frac
    a[rows, lo + 1] += frac
    a.setflags(write=False)
    return a


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights of shape ``(n_out, n_in)``.

    Every row sums to one, so interpolating fields that sum pointwise to one
    yields fields that still sum to one.
    """
    if n_in < 1 or n_out < n_in:
        raise InvalidInputError(f"cannot upsample {n_in} cells to {n_out}")
    return _interp_matrix(int(n_in), int(n_out))


def upsample_bilinear(grid: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim < 2:
        raise InvalidInputError(f"expected a 2-D grid, got shape {g.shape}")
    in_h, in_w = g.shape[-2:]
    if out_w < in_w or out_h < in_h:
        raise InvalidInputError(
            f"target {out_w}x{out_h} is smaller than source {in_w}x{in_h}"
        )
    if (in_h, in_w) == (out_h, out_w):
        return g.copy()
    ah = interpolation_matrix(in_h, out_h)
    aw = interpolation_matrix(in_w, out_w)
    return ah @ g @ aw.T


def upsample_adjoint(field: np.ndarray, in_w: int, in_h: int) -> np.ndarray:
    """Transpose of :func:`upsample_bilinear` from ``(in_h, in_w)`` to ``field.shape``."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim < 2:
        raise InvalidInputError(f"expected a 2-D field, got shape {f.shape}")
    out_h, out_w = f.shape[-2:]
    if in_w < 1 or in_h < 1 or out_w < in_w or out_h < in_h:
        raise InvalidInputError(
            f"field of size {out_w}x{out_h} is not an upsampling of {in_w}x{in_h}"
        )
    if (in_h, in_w) == (out_h, out_w):
        return f.copy()
    ah = interpolation_matrix(in_h, out_h)
    aw = interpolation_matrix(in_w, out_w)
    return ah.T @ f @ aw


def sample_dirichlet(alpha: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Dirichlet draw from ``k`` normalized Gamma(alpha, 1) variates.

    For ``alpha < 1`` the Gamma draws are taken in log space via
    ``G(a) = G(a + 1) * U**(1/a)`` so tiny concentrations do not underflow
    to an all-zero vector.
    """
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    if k < 2:
        raise InvalidInputError(f"need at least two components, got k={k}")
    if alpha >= 1.0:
        g = rng.standard_gamma(alpha, size=k)
        return g / g.sum()
    log_g = np.log(rng.standard_gamma(alpha + 1.0, size=k)) + np.log(rng.random(k)) / alpha
    log_g = log_g - log_g.max()
    w = np.exp(log_g)
    return w / w.sum()


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """Symmetric Beta(alpha, alpha), taken as the first Dirichlet component."""
    return float(sample_dirichlet(alpha, 2, rng)[0])
