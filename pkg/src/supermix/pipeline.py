"""Mixed-dataset construction, distillation objectives, student training and
evaluation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .classifier import (Classifier, MomentumSGD, Schedule, TrainTrace, accuracy, cross_entropy_grad,
                         tempered_softmax)
from .data import LabeledDataset, MixedDataset
from .errors import InvalidInputError, TeacherNotReadyError
from .mixing import MixInput, cutmix, mixup
from .optimizer import SuperMixConfig, supermix

logger = logging.getLogger(__name__)

MIX_METHODS = ("supermix", "mixup", "cutmix")
OBJECTIVES = ("ce", "kd", "kd+mixed")


# ---------------------------------------------------------------------------
# mixed dataset construction
# ---------------------------------------------------------------------------

@dataclass
class MixRecord:
    """Per-sample provenance of one mixed image."""

    sources: tuple[int, ...]
    classes: tuple[int, ...]
    weights: tuple[float, ...]
    pseudo_class: int
    iterations: int
    converged: bool
    elapsed: float

    def row(self, index: int) -> dict:
        return {
            "index": index,
            "sources": " ".join(map(str, self.sources)),
            "classes": " ".join(map(str, self.classes)),
            "weights": " ".join(f"{w:.6f}" for w in self.weights),
            "pseudo_class": self.pseudo_class,
            "iterations": self.iterations,
            "converged": int(self.converged),
            "elapsed_ms": round(self.elapsed * 1e3, 4),
        }


def _mix_one(seed, images, teacher, method, cfg):
    """Draw one input set and mix it; returns (image float32, probs, masks, record)."""
    rng = np.random.default_rng(seed)
    k = cfg.k if method == "supermix" else 2
    idx = rng.choice(images.shape[0], size=k, replace=False)
    x = images[idx].astype(np.float64)
    classes = np.asarray(teacher.predict_class(x), dtype=np.int64)
    if method == "supermix":
        res = supermix(MixInput(x, classes), teacher, cfg, rng)
        mixed, masks, weights = res.mixed, res.masks, res.weights
        iters, conv, elapsed = res.iterations, res.converged, res.elapsed
    else:
        fn = mixup if method == "mixup" else cutmix
        mixed, _, r = fn(x[0], x[1], cfg.alpha, rng, int(classes[0]), int(classes[1]), teacher.n_classes)
        weights = np.array([r, 1.0 - r])
        masks = None
        iters, conv, elapsed = 0, True, 0.0
    stored = mixed.astype(np.float32)
    # labels come from the image as it is stored, not the float64 iterate
    probs = teacher.predict_proba(stored.astype(np.float64))
    record = MixRecord(tuple(int(i) for i in idx), tuple(int(c) for c in classes),
                       tuple(float(w) for w in weights), int(np.argmax(probs)), int(iters),
                       bool(conv), float(elapsed))
    return stored, probs, masks, record


_WORKER = {}


def _init_worker(images, teacher, method, cfg):
    _WORKER.update(images=images, teacher=teacher, method=method, cfg=cfg)


def _mix_in_worker(seed):
    w = _WORKER
    return _mix_one(seed, w["images"], w["teacher"], w["method"], w["cfg"])


def teacher_accuracy(teacher: Classifier, dataset, limit: int = 1000) -> float:
    n = min(len(dataset), limit)
    return accuracy(teacher, dataset.images[:n], dataset.labels[:n])


def build_mixed_dataset(D: LabeledDataset, teacher: Classifier, method: str, kappa: float,
                        cfg: SuperMixConfig, rng: np.random.Generator, *,
                        accuracy_floor: float = 0.6, drop_unconverged: bool = False,
                        workers: int = 1, keep_masks: bool = False, with_records: bool = False):
    """Generate ``floor(kappa * |D|)`` mixes from uniformly drawn input sets.

    Every mix gets its own child seed, so the result does not depend on
    ``workers``.  Pseudo-labels are the teacher's argmax on the float32 image
    as stored; the teacher's probabilities are stored alongside.

    With ``with_records`` the return value is ``(dataset, records, masks)``,
    where ``masks`` is a list (``None`` entries for blind methods) when
    ``keep_masks`` is set.
    """
    if method not in MIX_METHODS:
        raise InvalidInputError(f"method must be one of {MIX_METHODS}, got {method!r}")
    if not kappa >= 0:
        raise InvalidInputError(f"kappa must be nonnegative, got {kappa}")
    if teacher.n_classes != D.n_classes:
        raise InvalidInputError(f"teacher has {teacher.n_classes} classes, dataset {D.n_classes}")
    if D.image_shape != teacher.input_shape:
        raise InvalidInputError(f"teacher expects {teacher.input_shape}, dataset holds {D.image_shape}")
    k = cfg.k if method == "supermix" else 2
    if len(D) < k:
        raise InvalidInputError(f"need at least {k} images to mix, dataset has {len(D)}")
    if len(D):
        acc = teacher_accuracy(teacher, D)
        if acc < accuracy_floor:
            raise TeacherNotReadyError(
                f"teacher accuracy {acc:.3f} on the source set is below the floor {accuracy_floor:.3f}; "
                "train it first or lower teacher_accuracy_floor")

    n = int(np.floor(kappa * len(D) + 1e-9))
    seeds = np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(n)
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(D.images, teacher, method, cfg)) as pool:
            out = list(pool.map(_mix_in_worker, seeds, chunksize=max(1, n // (4 * workers))))
    else:
        out = [_mix_one(s, D.images, teacher, method, cfg) for s in seeds]

    h, w, c = D.image_shape
    images = np.stack([o[0] for o in out]) if out else np.zeros((0, h, w, c), np.float32)
    probs = np.stack([o[1] for o in out]) if out else np.zeros((0, D.n_classes))
    records = [o[3] for o in out]
    masks = [o[2] for o in out] if keep_masks else None
    keep = np.ones(n, dtype=bool)
    if drop_unconverged:
        keep = np.array([r.converged for r in records], dtype=bool)
    ds = MixedDataset(
        images[keep], np.array([r.pseudo_class for r in records], dtype=np.int64)[keep], D.n_classes,
        method, float(kappa), probs[keep],
        np.array([r.iterations for r in records], dtype=np.int64)[keep],
        np.array([r.converged for r in records], dtype=bool)[keep],
        {"sources": [list(r.sources) for r, kp in zip(records, keep) if kp],
         "weights": [list(r.weights) for r, kp in zip(records, keep) if kp]},
    )
    if n:
        logger.info("%s: %d mixes, mean iterations %.2f, converged %.3f", method, n,
                    np.mean([r.iterations for r in records]), np.mean([r.converged for r in records]))
    if with_records:
        records = [r for r, kp in zip(records, keep) if kp]
        if masks is not None:
            masks = [m for m, kp in zip(masks, keep) if kp]
        return ds, records, masks
    return ds


def spot_check_labels(ds: MixedDataset, teacher: Classifier, rng: np.random.Generator,
                      fraction: float = 0.01) -> int:
    """Re-derive pseudo-labels on a random sample; raise if any disagree.

    Returns the number of images checked.
    """
    if len(ds) == 0:
        return 0
    m = max(1, int(np.ceil(fraction * len(ds))))
    idx = rng.choice(len(ds), size=m, replace=False)
    again = np.atleast_1d(teacher.predict_class(ds.images[idx].astype(np.float64)))
    bad = idx[again != ds.pseudo_classes[idx]]
    if bad.size:
        raise RuntimeError(f"stored pseudo-labels disagree with the teacher at indices {bad.tolist()}")
    return m


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def soft_cross_entropy(p, q_logits, tau: float = 1.0) -> float:
    """Batch mean of ``H(p, softmax(q_logits / tau)) = -sum p log q``."""
    return float(-np.mean(np.sum(np.asarray(p) * _log_softmax(np.asarray(q_logits) / tau), axis=-1)))


def ce_objective(student: Classifier, x, y, x_mix=None, y_mix=None) -> float:
    """Cross-entropy on the original batch plus, with unit weight, on the mixed
    batch with its pseudo-labels.  An empty mixed batch contributes nothing."""
    x = np.asarray(x)
    if len(x) == 0:
        raise InvalidInputError("original batch is empty")
    loss, _ = cross_entropy_grad(np.atleast_2d(student.forward(x)), np.atleast_1d(y))
    if x_mix is not None and len(x_mix):
        extra, _ = cross_entropy_grad(np.atleast_2d(student.forward(x_mix)), np.atleast_1d(y_mix))
        loss += extra
    return loss


def temper_probs(probs, tau: float) -> np.ndarray:
    """``softmax(z / tau)`` recovered from stored probabilities ``softmax(z)``."""
    logp = np.log(np.maximum(np.asarray(probs, dtype=np.float64), 1e-300))
    return tempered_softmax(logp, tau)


def kd_loss_and_grad(student_logits, labels, teacher_soft, tau: float = 4.0, lambda_kd: float = 0.1):
    """Distillation loss for a batch and its gradient w.r.t. the student logits.

    ``teacher_soft`` holds the teacher's tempered probabilities.  The loss is
    ``(1 - lambda) * CE(student, y) + lambda * tau^2 * H(teacher_tau, student_tau)``
    averaged over the batch.
    """
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    if not 0.0 <= lambda_kd <= 1.0:
        raise InvalidInputError(f"lambda_kd must lie in [0, 1], got {lambda_kd}")
    z = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    n = z.shape[0]
    hard, g_hard = cross_entropy_grad(z, np.atleast_1d(labels))
    q_t = np.atleast_2d(teacher_soft)
    soft = soft_cross_entropy(q_t, z, tau)
    q_s = tempered_softmax(z, tau)
    loss = (1.0 - lambda_kd) * hard + lambda_kd * tau * tau * soft
    # d/dz of tau^2 * H(q_t, softmax(z / tau)) is tau * (q_s - q_t)
    grad = (1.0 - lambda_kd) * g_hard + lambda_kd * tau * (q_s - q_t) / n
    return float(loss), grad


def kd_objective(teacher: Classifier, student: Classifier, x, y, tau: float = 4.0,
                 lambda_kd: float = 0.1) -> float:
    soft = tempered_softmax(np.atleast_2d(teacher.forward(x)), tau)
    return kd_loss_and_grad(student.forward(x), y, soft, tau, lambda_kd)[0]


# ---------------------------------------------------------------------------
# training on D and D'
# ---------------------------------------------------------------------------

class _MixedStream:
    """Endless shuffled mini-batches over D'; reshuffles after each pass."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self.order = rng.permutation(n)
        self.pos = 0
        self.passes = 0.0

    def next(self) -> np.ndarray:
        if self.pos >= self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.batch]
        self.pos += idx.size
        self.passes += idx.size / self.n
        return idx


def distill(student: Classifier, teacher: Classifier | None, D: LabeledDataset,
            D_prime: MixedDataset | None, objective: str, schedule: Schedule,
            rng: np.random.Generator, test: LabeledDataset | None = None,
            tau: float = 4.0, lambda_kd: float = 0.1):
    """Train ``student`` in place on D and, when nonempty, D'.

    Each optimizer step draws one D batch and, if D' is active, one D' batch
    of the same size; the two batch losses are summed.  D' therefore sees
    ``|D| / |D'|`` of a pass per D epoch, i.e. its epoch budget is scaled
    by ``1 / kappa``.  Returns ``(student, trace, info)``.

    ``ce`` uses hard labels (pseudo-labels on D'); ``kd`` distills on D only;
    ``kd+mixed`` distills on both, taking the teacher's tempered outputs on
    D' from its stored probabilities.
    """
    if objective not in OBJECTIVES:
        raise InvalidInputError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    counts = {student.n_classes, D.n_classes}
    if teacher is not None:
        counts.add(teacher.n_classes)
    if D_prime is not None:
        counts.add(D_prime.n_classes)
    if len(counts) != 1:
        raise InvalidInputError(f"class counts disagree: {sorted(counts)}")
    if D.image_shape != student.input_shape:
        raise InvalidInputError(f"student expects {student.input_shape}, dataset holds {D.image_shape}")
    kd = objective in ("kd", "kd+mixed")
    if kd and teacher is None:
        raise InvalidInputError(f"objective {objective} needs a teacher")
    use_mixed = D_prime is not None and len(D_prime) > 0 and objective != "kd"
    if use_mixed and D_prime.images.shape[1:] != D.images.shape[1:]:
        raise InvalidInputError("mixed and original images differ in shape")
    if use_mixed and objective == "kd+mixed" and D_prime.soft_labels is None:
        raise InvalidInputError("kd+mixed needs stored teacher probabilities on D'")

    n = len(D)
    if n == 0:
        raise InvalidInputError("training set is empty")
    labels = D.labels
    # a separate child stream keeps the D shuffles identical to plain training
    stream = _MixedStream(len(D_prime), schedule.batch_size, rng.spawn(1)[0]) if use_mixed else None
    opt = MomentumSGD(student.params, schedule.momentum, schedule.weight_decay)
    trace = TrainTrace()

    def step_grads(x, y, soft):
        logits, cache = student.forward_with_cache(x)
        if kd:
            loss, g = kd_loss_and_grad(logits, y, soft, tau, lambda_kd)
        else:
            loss, g = cross_entropy_grad(logits, y)
        grads, _ = student.backward_from_cache(cache, g)
        return loss, grads, logits

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        total, hits = 0.0, 0
        for s in range(0, n, schedule.batch_size):
            idx = order[s:s + schedule.batch_size]
            x = D.images[idx]
            soft = tempered_softmax(teacher.forward(x), tau) if kd else None
            loss, grads, logits = step_grads(x, labels[idx], soft)
            if stream is not None:
                j = stream.next()
                msoft = temper_probs(D_prime.soft_labels[j], tau) if kd else None
                mloss, mgrads, _ = step_grads(D_prime.images[j], D_prime.pseudo_classes[j], msoft)
                for name in grads:
                    grads[name] = grads[name] + mgrads[name]
                loss += mloss
            opt.step(grads, lr)
            total += loss * idx.size
            hits += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
        trace.loss.append(total / n)
        trace.train_acc.append(hits / n)
        if test is not None:
            trace.test_acc.append(accuracy(student, test.images, test.labels))
        if not np.isfinite(trace.loss[-1]):
            raise FloatingPointError(f"training diverged at epoch {epoch + 1}")
        logger.info("epoch %d lr %.4g loss %.4f train %.4f%s", epoch + 1, lr, trace.loss[-1],
                    trace.train_acc[-1], f" test {trace.test_acc[-1]:.4f}" if test is not None else "")
    info = {"mixed_passes": stream.passes if stream is not None else 0.0, "objective": objective}
    return student, trace, info


# ---------------------------------------------------------------------------
# evaluation and analysis
# ---------------------------------------------------------------------------

def _logits(model: Classifier, images, batch: int = 500) -> np.ndarray:
    return np.concatenate([np.atleast_2d(model.forward(images[s:s + batch]))
                           for s in range(0, len(images), batch)])


def evaluate(model: Classifier, testset) -> dict:
    """Top-1 accuracy, plus top-5 when there are at least five classes."""
    labels = np.asarray(testset.labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidInputError("cannot evaluate on an empty set")
    z = _logits(model, testset.images)
    out = {"top1": float(np.mean(np.argmax(z, axis=1) == labels)), "n": int(labels.size)}
    if model.n_classes >= 5:
        top5 = np.argsort(-z, axis=1, kind="stable")[:, :5]
        out["top5"] = float(np.mean(np.any(top5 == labels[:, None], axis=1)))
    return out


def smoothness_profile(model: Classifier, images, top_n: int = 5, tau: float = 1.0) -> np.ndarray:
    """Average over images of the ``top_n`` largest predicted probabilities, sorted."""
    if not 1 <= top_n <= model.n_classes:
        raise InvalidInputError(f"top_n must lie in [1, {model.n_classes}], got {top_n}")
    if len(images) == 0:
        raise InvalidInputError("no images to profile")
    p = tempered_softmax(_logits(model, images), tau)
    return -np.sort(-p, axis=1)[:, :top_n].mean(axis=0)


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
