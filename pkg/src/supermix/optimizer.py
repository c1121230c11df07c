"""Mask optimizers (smoothed Newton, plain Newton, SGD) and the top-k loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .classifier import Classifier
from .errors import InvalidInputError
from .mixing import MixInput, target_soft_label
from .numerics import GaussianKernel, gaussian_kernel, gaussian_smooth, sample_dirichlet
from .objective import MaskState, ObjectiveConfig

METHODS = ("newton-sp", "newton", "sgd")


@dataclass(frozen=True)
class SuperMixConfig:
    k: int = 2
    alpha: float = 3.0
    sigma: float = 1.0
    grid_w: int = 8
    grid_h: int = 8
    lambda_s: float = 25.0
    lambda_sigma: float = 250.0
    max_iters: int = 50
    denom_epsilon: float = 1e-12
    method: str = "newton-sp"
    sgd_lr: float = 0.1
    kl_epsilon: float = 1e-12
    divergence_direction: str = "target-first"

    def __post_init__(self):
        if self.k < 2:
            raise InvalidInputError(f"k must be at least 2, got {self.k}")
        if not self.sigma > 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be at least 1")
        if not self.denom_epsilon > 0:
            raise InvalidInputError("denom_epsilon must be positive")
        if self.grid_w < 1 or self.grid_h < 1:
            raise InvalidInputError("mask grid must have at least one cell per axis")
        if self.method not in METHODS:
            raise InvalidInputError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "sgd" and not self.sgd_lr > 0:
            raise InvalidInputError("sgd_lr must be positive")

    @property
    def objective(self) -> ObjectiveConfig:
        # the Newton-SP loop drops the TV term; the baselines keep it
        return ObjectiveConfig(
            lambda_s=self.lambda_s,
            lambda_sigma=0.0 if self.method == "newton-sp" else self.lambda_sigma,
            kl_epsilon=self.kl_epsilon,
            divergence_direction=self.divergence_direction,
        )


@dataclass
class MixResult:
    mixed: np.ndarray
    masks: np.ndarray
    soft_label: np.ndarray
    pseudo_class: int
    iterations: int
    converged: bool
    elapsed: float
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    raw: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)


def newton_step(grad: np.ndarray, loss_value: float, denom_epsilon: float = 1e-12):
    """Minimum-norm step zeroing the linearized loss: ``-|L| / ||g||^2 * g``.

    Returns ``None`` when ``||g||^2`` is below ``denom_epsilon``.
    """
    g = np.asarray(grad, dtype=np.float64)
    denom = float(np.dot(g.ravel(), g.ravel()))
    if denom < denom_epsilon:
        return None
    return (-abs(loss_value) / denom) * g


def smooth_newton_step(grad: np.ndarray, loss_value: float, kernel: GaussianKernel,
                       denom_epsilon: float = 1e-12):
    """Newton step along the Gaussian-smoothed gradient.

    The step is scaled so that ``<grad, step> = -loss``; returns ``None``
    when ``|<smoothed, grad>|`` is below ``denom_epsilon``.
    """
    g = np.asarray(grad, dtype=np.float64)
    sg = gaussian_smooth(g, kernel)
    denom = float(np.dot(sg.ravel(), g.ravel()))
    if abs(denom) < denom_epsilon:
        return None
    return (-loss_value / denom) * sg


def sgd_step(grad: np.ndarray, lr: float = 0.1) -> np.ndarray:
    if not lr > 0:
        raise InvalidInputError(f"learning rate must be positive, got {lr}")
    return -lr * np.asarray(grad, dtype=np.float64)


def topk_satisfied(prediction, classes) -> bool:
    """True when every distinct class in ``classes`` ranks among the top ``|set(classes)|``.

    Ranking is by descending probability with ties going to the lower index.
    """
    wanted = set(int(c) for c in np.atleast_1d(classes))
    if not wanted:
        raise InvalidInputError("class set is empty")
    p = np.asarray(prediction, dtype=np.float64)
    order = np.argsort(-p, kind="stable")
    return wanted == set(int(c) for c in order[:len(wanted)])


def supermix(inputs: MixInput, teacher: Classifier, cfg: SuperMixConfig,
             rng: np.random.Generator, weights=None, record_losses: bool = False) -> MixResult:
    """Optimize mixing masks for ``inputs`` under ``teacher`` supervision.

    ``inputs.classes`` must hold the teacher's predicted class for each image.
    Masks start at zero (the plain average); the stopping test is evaluated
    before every step, so an average that already satisfies it returns after
    zero iterations.  ``elapsed`` covers the mask loop only.
    """
    if inputs.k != cfg.k:
        raise InvalidInputError(f"config expects k={cfg.k}, got {inputs.k} images")
    if inputs.images.shape[1:] != teacher.input_shape:
        raise InvalidInputError(f"teacher expects {teacher.input_shape}, images are {inputs.images.shape[1:]}")
    if weights is None:
        weights = sample_dirichlet(cfg.alpha, cfg.k, rng)
    weights = np.asarray(weights, dtype=np.float64)
    target = target_soft_label(inputs.classes, weights, teacher.n_classes)
    obj = cfg.objective
    with_tv = cfg.method != "newton-sp"
    kernel = gaussian_kernel(cfg.sigma) if cfg.method == "newton-sp" else None
    losses = []

    start = time.perf_counter()
    raw = np.zeros((cfg.k, cfg.grid_h, cfg.grid_w))
    state = MaskState(raw, inputs, teacher)
    it = 0
    converged = topk_satisfied(state.probs, inputs.classes)
    while not converged and it < cfg.max_iters:
        loss, grad = state.loss_and_grad(target, obj, with_tv=with_tv)
        if record_losses:
            losses.append(loss.total)
        if cfg.method == "newton-sp":
            step = smooth_newton_step(grad, loss.total, kernel, cfg.denom_epsilon)
        elif cfg.method == "newton":
            step = newton_step(grad, loss.total, cfg.denom_epsilon)
        else:
            step = sgd_step(grad, cfg.sgd_lr)
        if step is None:
            break
        raw = raw + step
        state = MaskState(raw, inputs, teacher)
        it += 1
        converged = topk_satisfied(state.probs, inputs.classes)
    elapsed = time.perf_counter() - start

    return MixResult(
        mixed=state.mixed,
        masks=state.masks,
        soft_label=target,
        pseudo_class=int(np.argmax(state.logits)),
        iterations=it,
        converged=bool(converged),
        elapsed=elapsed,
        classes=inputs.classes.copy(),
        weights=weights,
        raw=raw,
        losses=losses,
    )
