"""Differentiable reference classifiers with hand-written backpropagation.

Three desk-scale architectures share one interface:

* ``softmax-regression`` -- a single affine map from pixels to logits.
* ``mlp`` -- fully connected hidden layers with ``tanh`` or ``relu``.
* ``tiny-cnn`` -- two 3x3 same-padded convolutions, each followed by the
  activation and 2x2 average pooling, then an affine read-out.

Every model exposes batched ``forward``, gradients with respect to its
parameters (for training) and with respect to its input pixels (for mask
optimization).  All arithmetic is float64.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("softmax-regression", "mlp", "tiny-cnn")


def tempered_softmax(z, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``z / tau`` over the last axis, stabilized by max-subtraction."""
    if not tau > 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _activate_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    return (a > 0).astype(np.float64)


class Classifier:
    """Base class; subclasses implement ``_forward`` and ``_backward``."""

    arch: str = ""

    def __init__(self, input_shape: Sequence[int], n_classes: int):
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) != 3 or min(input_shape) < 1:
            raise InvalidInputError(f"input shape must be (H, W, C), got {input_shape}")
        if n_classes < 2:
            raise InvalidInputError(f"need at least two classes, got {n_classes}")
        self.input_shape = input_shape
        self.n_classes = int(n_classes)
        self.params: dict[str, np.ndarray] = {}

    # -- subclass hooks -------------------------------------------------
    def options(self) -> dict:
        return {}

    def _forward(self, x: np.ndarray):
        raise NotImplementedError

    def _backward(self, cache, dlogits: np.ndarray, need_input: bool, need_params: bool = True):
        raise NotImplementedError

    # -- shared API -----------------------------------------------------
    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.ndim == 4 and x.shape[1:] == self.input_shape:
            return x, False
        raise InvalidInputError(
            f"{self.arch} expects images of shape {self.input_shape}, got {x.shape}"
        )

    def forward(self, x) -> np.ndarray:
        """Logits for one image ``(H, W, C)`` or a batch ``(N, H, W, C)``."""
        xb, single = self._as_batch(x)
        logits, _ = self._forward(xb)
        return logits[0] if single else logits

    def predict_proba(self, x, tau: float = 1.0) -> np.ndarray:
        return tempered_softmax(self.forward(x), tau)

    def predict_class(self, x):
        """Argmax of the logits; ``np.argmax`` resolves ties to the lowest index."""
        z = self.forward(x)
        return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=-1)

    def forward_with_cache(self, x):
        xb, _ = self._as_batch(x)
        return self._forward(xb)

    def backward_to_input(self, x, dL_dlogits) -> np.ndarray:
        """Reverse-mode gradient of ``<dL_dlogits, logits(x)>`` with respect to ``x``."""
        xb, single = self._as_batch(x)
        g = np.asarray(dL_dlogits, dtype=np.float64)
        expected = (self.n_classes,) if single else (xb.shape[0], self.n_classes)
        if g.shape != expected:
            raise InvalidInputError(f"upstream gradient must have shape {expected}, got {g.shape}")
        _, cache = self._forward(xb)
        _, dx = self._backward(cache, g[None] if single else g, need_input=True, need_params=False)
        return dx[0] if single else dx

    def backward_from_cache(self, cache, dlogits, need_input: bool = False, need_params: bool = True):
        return self._backward(cache, np.asarray(dlogits, dtype=np.float64), need_input, need_params)

    def param_grads(self, x, dL_dlogits) -> dict[str, np.ndarray]:
        xb, _ = self._as_batch(x)
        _, cache = self._forward(xb)
        grads, _ = self._backward(cache, np.atleast_2d(dL_dlogits), need_input=False)
        return grads

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __repr__(self):
        return f"{type(self).__name__}(input_shape={self.input_shape}, n_classes={self.n_classes}, {self.options()})"


class SoftmaxRegression(Classifier):
    arch = "softmax-regression"

    def __init__(self, input_shape, n_classes, rng: np.random.Generator | None = None):
        super().__init__(input_shape, n_classes)
        d = int(np.prod(self.input_shape))
        w = np.zeros((d, self.n_classes))
        if rng is not None:
            w = rng.normal(0.0, 0.01, size=(d, self.n_classes))
        self.params = {"W": w, "b": np.zeros(self.n_classes)}

    def _forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["W"] + self.params["b"], flat

    def _backward(self, flat, dlogits, need_input, need_params=True):
        grads = {"W": flat.T @ dlogits, "b": dlogits.sum(axis=0)} if need_params else {}
        dx = None
        if need_input:
            dx = (dlogits @ self.params["W"].T).reshape((-1,) + self.input_shape)
        return grads, dx


class MLP(Classifier):
    arch = "mlp"

    def __init__(self, input_shape, n_classes, hidden: Sequence[int] = (256,),
                 activation: str = "tanh", rng: np.random.Generator | None = None):
        super().__init__(input_shape, n_classes)
        if activation not in ("tanh", "relu"):
            raise InvalidInputError(f"unknown activation {activation!r}")
        self.hidden = tuple(int(h) for h in hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise InvalidInputError(f"hidden sizes must be positive, got {hidden}")
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [int(np.prod(self.input_shape)), *self.hidden, self.n_classes]
        gain = 2.0 if activation == "relu" else 1.0
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, np.sqrt(gain / a), size=(a, b))
            self.params[f"b{i}"] = np.zeros(b)

    def options(self):
        return {"hidden": list(self.hidden), "activation": self.activation}

    def _forward(self, x):
        h = x.reshape(x.shape[0], -1)
        acts = []
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            a = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i == n_layers - 1:
                acts.append((h, a, None))
                return a, acts
            out = _activate(self.activation, a)
            acts.append((h, a, out))
            h = out

    def _backward(self, acts, dlogits, need_input, need_params=True):
        grads = {}
        g = dlogits
        for i in reversed(range(len(acts))):
            h_in, a, out = acts[i]
            if out is not None:
                g = g * _activate_grad(self.activation, a, out)
            if need_params:
                grads[f"W{i}"] = h_in.T @ g
                grads[f"b{i}"] = g.sum(axis=0)
            if i > 0 or need_input:
                g = g @ self.params[f"W{i}"].T
        dx = g.reshape((-1,) + self.input_shape) if need_input else None
        return grads, dx


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (N, h+2, w+2, C) -> (N*h*w, 9*C) ordered (kh, kw, C)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(xp.shape[0] * h * w, -1)


def _col2im(dcol: np.ndarray, n: int, h: int, w: int, c: int) -> np.ndarray:
    d = dcol.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += d[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :]


def _pool(a: np.ndarray) -> np.ndarray:
    n, h, w, c = a.shape
    return a.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _unpool(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25


class TinyCNN(Classifier):
    """conv3x3 -> act -> avgpool2 -> conv3x3 -> act -> avgpool2 -> affine."""

    arch = "tiny-cnn"

    def __init__(self, input_shape, n_classes, filters: Sequence[int] = (8, 16),
                 activation: str = "relu", rng: np.random.Generator | None = None):
        super().__init__(input_shape, n_classes)
        h, w, c = self.input_shape
        if h % 4 or w % 4:
            raise InvalidInputError(f"tiny-cnn needs H and W divisible by 4, got {h}x{w}")
        if activation not in ("tanh", "relu"):
            raise InvalidInputError(f"unknown activation {activation!r}")
        self.filters = tuple(int(f) for f in filters)
        if len(self.filters) != 2 or min(self.filters) < 1:
            raise InvalidInputError(f"tiny-cnn takes two positive filter counts, got {filters}")
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        f1, f2 = self.filters
        gain = 2.0 if activation == "relu" else 1.0
        self.params = {
            "K0": rng.normal(0.0, np.sqrt(gain / (9 * c)), size=(3, 3, c, f1)),
            "c0": np.zeros(f1),
            "K1": rng.normal(0.0, np.sqrt(gain / (9 * f1)), size=(3, 3, f1, f2)),
            "c1": np.zeros(f2),
            "W": rng.normal(0.0, np.sqrt(1.0 / (h * w * f2 / 16)), size=(h * w * f2 // 16, self.n_classes)),
            "b": np.zeros(self.n_classes),
        }

    def options(self):
        return {"filters": list(self.filters), "activation": self.activation}

    def _conv(self, x, kernel, bias):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        col = _im2col(xp, h, w)
        out = col @ kernel.reshape(-1, kernel.shape[-1]) + bias
        return out.reshape(n, h, w, -1), col

    def _forward(self, x):
        a0, col0 = self._conv(x, self.params["K0"], self.params["c0"])
        h0 = _activate(self.activation, a0)
        p0 = _pool(h0)
        a1, col1 = self._conv(p0, self.params["K1"], self.params["c1"])
        h1 = _activate(self.activation, a1)
        p1 = _pool(h1)
        flat = p1.reshape(p1.shape[0], -1)
        logits = flat @ self.params["W"] + self.params["b"]
        return logits, (x.shape, col0, a0, h0, p0.shape, col1, a1, h1, p1.shape, flat)

    def _backward(self, cache, dlogits, need_input, need_params=True):
        xshape, col0, a0, h0, p0shape, col1, a1, h1, p1shape, flat = cache
        p = self.params
        grads = {}
        if need_params:
            grads["W"] = flat.T @ dlogits
            grads["b"] = dlogits.sum(axis=0)
        g = (dlogits @ p["W"].T).reshape(p1shape)
        g = _unpool(g) * _activate_grad(self.activation, a1, h1)
        g2 = g.reshape(-1, g.shape[-1])
        if need_params:
            grads["K1"] = (col1.T @ g2).reshape(p["K1"].shape)
            grads["c1"] = g2.sum(axis=0)
        n, hh, ww, cc = p0shape
        g = _col2im(g2 @ p["K1"].reshape(-1, p["K1"].shape[-1]).T, n, hh, ww, cc)
        g = _unpool(g) * _activate_grad(self.activation, a0, h0)
        g2 = g.reshape(-1, g.shape[-1])
        if need_params:
            grads["K0"] = (col0.T @ g2).reshape(p["K0"].shape)
            grads["c0"] = g2.sum(axis=0)
        dx = None
        if need_input:
            n, hh, ww, cc = xshape
            dx = _col2im(g2 @ p["K0"].reshape(-1, p["K0"].shape[-1]).T, n, hh, ww, cc)
        return grads, dx


def build_classifier(arch: str, input_shape, n_classes: int, rng=None, **options) -> Classifier:
    """Instantiate a reference architecture by its tag."""
    if arch == "softmax-regression":
        return SoftmaxRegression(input_shape, n_classes, rng=rng)
    if arch == "mlp":
        return MLP(input_shape, n_classes, hidden=options.get("hidden", (256,)),
                   activation=options.get("activation", "tanh"), rng=rng)
    if arch == "tiny-cnn":
        return TinyCNN(input_shape, n_classes, filters=options.get("filters", (8, 16)),
                       activation=options.get("activation", "relu"), rng=rng)
    raise InvalidInputError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def predict_class(model: Classifier, x):
    return model.predict_class(x)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    """Mini-batch SGD schedule with step decay at epoch milestones."""

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    milestones: tuple[int, ...] = (20, 25)
    lr_decay: float = 0.1

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)


class MomentumSGD:
    """Heavy-ball SGD with coupled L2 weight decay (``v = mu*v + g + wd*p``)."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            if self.weight_decay:
                v += self.weight_decay * p
            p -= lr * v


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy to hard labels and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


@dataclass
class TrainTrace:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)

    def rows(self):
        for e, (l, a) in enumerate(zip(self.loss, self.train_acc)):
            t = self.test_acc[e] if e < len(self.test_acc) else float("nan")
            yield {"epoch": e + 1, "loss": l, "train_acc": a, "test_acc": t}


def accuracy(model: Classifier, images, labels, batch: int = 500) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InvalidInputError("cannot score an empty set")
    hits = 0
    for s in range(0, labels.size, batch):
        hits += int(np.sum(model.predict_class(images[s:s + batch]) == labels[s:s + batch]))
    return hits / labels.size


def train_classifier(model: Classifier, dataset, schedule: Schedule, rng: np.random.Generator,
                     test=None, on_epoch: Callable[[int, dict], None] | None = None):
    """Train ``model`` in place on ``dataset`` with cross-entropy; return ``(model, trace)``.

    ``dataset`` and ``test`` are any objects carrying ``images`` and ``labels``.
    """
    images, labels = dataset.images, np.asarray(dataset.labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        raise InvalidInputError("training set is empty")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise InvalidInputError(f"labels must lie in [0, {model.n_classes})")
    opt = MomentumSGD(model.params, schedule.momentum, schedule.weight_decay)
    trace = TrainTrace()
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        total, hits = 0.0, 0
        for s in range(0, n, schedule.batch_size):
            idx = order[s:s + schedule.batch_size]
            logits, cache = model.forward_with_cache(images[idx])
            loss, dlogits = cross_entropy_grad(logits, labels[idx])
            grads, _ = model.backward_from_cache(cache, dlogits)
            opt.step(grads, lr)
            total += loss * idx.size
            hits += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
        trace.loss.append(total / n)
        trace.train_acc.append(hits / n)
        if test is not None:
            trace.test_acc.append(accuracy(model, test.images, test.labels))
        if not np.isfinite(trace.loss[-1]):
            raise FloatingPointError(f"training diverged at epoch {epoch + 1}")
        logger.info("epoch %d lr %.4g loss %.4f train %.4f%s", epoch + 1, lr, trace.loss[-1],
                    trace.train_acc[-1],
                    f" test {trace.test_acc[-1]:.4f}" if test is not None else "")
        if on_epoch is not None:
            on_epoch(epoch, dict(list(trace.rows())[-1]))
    return model, trace
