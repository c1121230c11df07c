"""Mixing objective: teacher divergence, sparsity and TV smoothness penalties,
and the exact gradient of their weighted sum with respect to the raw
low-resolution masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import Classifier, tempered_softmax
from .errors import InvalidInputError
from .mixing import MixInput, mix, normalize_grid, sigmoid
from .numerics import upsample_adjoint, upsample_bilinear

DIRECTIONS = ("target-first", "prediction-first")


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_s: float = 25.0
    lambda_sigma: float = 0.0
    kl_epsilon: float = 1e-12
    divergence_direction: str = "target-first"

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_sigma < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if not 0.0 <= self.kl_epsilon <= 1e-3:
            raise InvalidInputError(f"kl_epsilon must lie in [0, 1e-3], got {self.kl_epsilon}")
        if self.divergence_direction not in DIRECTIONS:
            raise InvalidInputError(f"divergence_direction must be one of {DIRECTIONS}")


@dataclass(frozen=True)
class LossBreakdown:
    kl: float
    sparsity: float
    tv: float
    total: float


def _check_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-4 or np.any(p < 0):
        raise InvalidInputError(f"{name} is not a probability vector (sum {p.sum():.6g})")
    return p


def divergence_and_grad(prediction, target, cfg: ObjectiveConfig = ObjectiveConfig()):
    """KL divergence between ``target`` and ``prediction`` and its gradient
    with respect to the prediction probabilities.

    ``target-first`` is ``sum_j t_j log(t_j / max(p_j, eps))``; terms with
    ``t_j = 0`` vanish.  ``prediction-first`` is ``sum_j p_j log(p_j / max(t_j, eps))``.
    """
    p = _check_distribution(prediction, "prediction")
    t = _check_distribution(target, "target")
    eps = cfg.kl_epsilon
    if cfg.divergence_direction == "target-first":
        q = np.maximum(p, eps) if eps > 0 else p
        live = t > 0
        d = float(np.sum(t[live] * (np.log(t[live]) - np.log(q[live]))))
        g = np.zeros_like(p)
        active = live & (p >= eps)
        g[active] = -t[active] / p[active]
    else:
        tq = np.maximum(t, eps)
        live = p > 0
        d = float(np.sum(p[live] * (np.log(p[live]) - np.log(tq[live]))))
        g = np.zeros_like(p)
        g[live] = np.log(p[live]) - np.log(tq[live]) + 1.0
    return max(d, 0.0), g


def divergence(prediction, target, cfg: ObjectiveConfig = ObjectiveConfig()) -> float:
    return divergence_and_grad(prediction, target, cfg)[0]


def sparsity_loss(masks) -> float:
    """Mean of ``|m (m - 1)|`` over all ``k * H * W`` mask entries."""
    m = np.asarray(masks, dtype=np.float64)
    return float(np.mean(np.abs(m * (m - 1.0))))


def sparsity_grad(masks) -> np.ndarray:
    m = np.asarray(masks, dtype=np.float64)
    return np.sign(m * (m - 1.0)) * (2.0 * m - 1.0) / m.size


def tv_smoothness_loss(masks) -> float:
    """Cubed forward differences along both axes, averaged over ``k * H * W``."""
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    dx = np.diff(m, axis=2)
    dy = np.diff(m, axis=1)
    return float((np.sum(np.abs(dx) ** 3) + np.sum(np.abs(dy) ** 3)) / m.size)


def tv_smoothness_grad(masks) -> np.ndarray:
    m = np.asarray(masks, dtype=np.float64)
    squeeze = m.ndim == 2
    if squeeze:
        m = m[None]
    g = np.zeros_like(m)
    dx = np.diff(m, axis=2)
    dy = np.diff(m, axis=1)
    gx = 3.0 * dx * np.abs(dx)
    gy = 3.0 * dy * np.abs(dy)
    g[:, :, 1:] += gx
    g[:, :, :-1] -= gx
    g[:, 1:, :] += gy
    g[:, :-1, :] -= gy
    g /= m.size
    return g[0] if squeeze else g


def softmax_backward(p: np.ndarray, dL_dp: np.ndarray) -> np.ndarray:
    """Chain ``dL/dp`` through ``p = softmax(z)``."""
    return p * (dL_dp - np.dot(dL_dp, p))


class MaskState:
    """Forward evaluation of one raw-mask iterate: masks, mixed image, teacher output.

    Holding the teacher cache lets the optimizer reuse the stopping-test
    forward pass when it needs the gradient.
    """

    def __init__(self, raw: np.ndarray, inputs: MixInput, teacher: Classifier):
        self.raw = np.asarray(raw, dtype=np.float64)
        if self.raw.ndim != 3 or self.raw.shape[0] != inputs.k:
            raise InvalidInputError(f"raw masks {self.raw.shape} do not match k={inputs.k}")
        self.inputs = inputs
        self.teacher = teacher
        self.grid = normalize_grid(self.raw)
        self.masks = upsample_bilinear(self.grid, inputs.width, inputs.height)
        self.mixed = mix(inputs.images, self.masks)
        logits, self._cache = teacher.forward_with_cache(self.mixed)
        self.logits = logits[0]
        self.probs = tempered_softmax(self.logits)

    def loss_and_grad(self, target, cfg: ObjectiveConfig, with_tv: bool = False):
        """Weighted loss and its gradient with respect to ``self.raw``.

        The TV term is included only when ``with_tv`` is set and its weight
        is positive.
        """
        d, dp = divergence_and_grad(self.probs, target, cfg)
        dz = softmax_backward(self.probs, dp)
        _, dx = self.teacher.backward_from_cache(self._cache, dz[None], need_input=True,
                                                 need_params=False)
        # masks broadcast over channels, so the adjoint sums over them
        g_masks = np.einsum("khwc,hwc->khw", self.inputs.images, dx[0])
        sp = sparsity_loss(self.masks)
        total = d + cfg.lambda_s * sp
        if cfg.lambda_s:
            g_masks = g_masks + cfg.lambda_s * sparsity_grad(self.masks)
        gh, gw = self.raw.shape[1:]
        g_grid = upsample_adjoint(g_masks, gw, gh)
        tv = 0.0
        if with_tv:
            # roughness is measured on the optimized (grid-resolution) masks
            tv = tv_smoothness_loss(self.grid)
            if cfg.lambda_sigma:
                total += cfg.lambda_sigma * tv
                g_grid = g_grid + cfg.lambda_sigma * tv_smoothness_grad(self.grid)
        # d m~_i / d m_j = s'(m_j) / S * (delta_ij - m~_i), and s'(m_j) / S = m~_j (1 - s(m_j))
        one_minus_s = sigmoid(-self.raw)
        g_raw = self.grid * one_minus_s * (g_grid - np.sum(g_grid * self.grid, axis=0))
        return LossBreakdown(d, sp, tv, float(total)), g_raw


def supermix_loss_and_grad(raw, inputs: MixInput, teacher: Classifier, target,
                           cfg: ObjectiveConfig = ObjectiveConfig(), with_tv: bool = False):
    """Loss ``divergence + lambda_s * sparsity`` (``+ lambda_sigma * tv`` when
    ``with_tv``) at ``raw`` and its exact gradient with respect to ``raw``."""
    return MaskState(raw, inputs, teacher).loss_and_grad(target, cfg, with_tv)
