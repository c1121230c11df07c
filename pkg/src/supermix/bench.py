"""Optimizer benchmark: the same mixing instances solved by each method."""

from __future__ import annotations

import csv
import io
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from .classifier import Classifier
from .data import LabeledDataset
from .errors import InvalidInputError
from .mixing import MixInput
from .optimizer import METHODS, SuperMixConfig, supermix

MIN_INSTANCES = 64


@dataclass(frozen=True)
class BenchInstance:
    sources: tuple[int, ...]
    seed: int


@dataclass
class MethodRow:
    method: str
    mean_iterations: float
    mean_seconds: float
    convergence_rate: float
    iterations: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    seconds: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    converged: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass
class BenchReport:
    rows: list[MethodRow]
    instances: int
    environment: dict

    def row(self, method: str) -> MethodRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def speedup(self, method: str, baseline: str = "sgd") -> float:
        """Wall-clock ratio ``time(baseline) / time(method)``."""
        return self.row(baseline).mean_seconds / self.row(method).mean_seconds

    def iteration_ratio(self, method: str, baseline: str = "sgd") -> float:
        """``iters(method) / iters(baseline)``; nan when the baseline needs none."""
        base = self.row(baseline).mean_iterations
        return self.row(method).mean_iterations / base if base else float("nan")

    def records(self) -> list[dict]:
        has_sgd = any(r.method == "sgd" for r in self.rows)
        out = []
        for r in self.rows:
            out.append({
                "method": r.method,
                "instances": self.instances,
                "mean_iterations": repr(r.mean_iterations),
                "mean_seconds": repr(r.mean_seconds),
                "convergence_rate": repr(r.convergence_rate),
                "speedup_vs_sgd": repr(self.speedup(r.method)) if has_sgd else "nan",
                "iteration_ratio_vs_sgd": repr(self.iteration_ratio(r.method)) if has_sgd else "nan",
            })
        return out

    def to_csv(self, config_json: str | None = None) -> str:
        buf = io.StringIO()
        if config_json is not None:
            buf.write(f"# config: {config_json}\n")
        buf.write("# environment: " + " ".join(f"{k}={v}" for k, v in self.environment.items()) + "\n")
        recs = self.records()
        writer = csv.DictWriter(buf, fieldnames=list(recs[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(recs)
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'method':<10} {'iters':>8} {'ms/image':>10} {'converged':>10} {'speedup':>9}"
        lines = [head, "-" * len(head)]
        has_sgd = any(r.method == "sgd" for r in self.rows)
        for r in self.rows:
            sp = f"{self.speedup(r.method):8.2f}x" if has_sgd else "      n/a"
            lines.append(f"{r.method:<10} {r.mean_iterations:8.2f} {r.mean_seconds * 1e3:10.3f} "
                         f"{r.convergence_rate:10.3f} {sp}")
        lines.append(f"{self.instances} instances; " +
                     ", ".join(f"{k}={v}" for k, v in self.environment.items()))
        return "\n".join(lines)


def environment_note() -> dict:
    threads = next((os.environ[v] for v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
                    if v in os.environ), "default")
    return {"cpus": os.cpu_count(), "blas_threads": threads, "precision": "float64",
            "numpy": np.__version__, "python": platform.python_version(), "workers": 1}


def draw_instances(D: LabeledDataset, teacher: Classifier, n: int, k: int,
                   rng: np.random.Generator, distinct_classes: bool = True) -> list[BenchInstance]:
    """Random ``k``-subsets of ``D``, optionally with pairwise distinct teacher classes.

    Requiring distinct classes leaves out sets whose averaged image trivially
    satisfies the stopping test, so the comparison measures optimization work.
    """
    pred = np.asarray(teacher.predict_class(D.images), dtype=np.int64)
    if distinct_classes and len(np.unique(pred)) < k:
        raise InvalidInputError(f"teacher predicts fewer than {k} distinct classes on the dataset")
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 1000 * n:
            raise InvalidInputError("could not draw enough instances with distinct classes")
        idx = rng.choice(len(D), size=k, replace=False)
        if distinct_classes and len(set(pred[idx].tolist())) < k:
            continue
        out.append(BenchInstance(tuple(int(i) for i in idx), int(rng.integers(2 ** 63))))
    return out


def run_bench(D: LabeledDataset, teacher: Classifier, base: SuperMixConfig, rng: np.random.Generator,
              methods=METHODS, n_instances: int = 256, distinct_classes: bool = True,
              instances: list[BenchInstance] | None = None) -> BenchReport:
    """Solve identical instances with every method, one at a time in this process.

    Each instance carries its own seed, so every method sees the same mixing
    weights.  One untimed call per method precedes the timed runs; the clock
    covers the mask loop only (see ``supermix``).
    """
    methods = list(methods)
    if not methods:
        raise InvalidInputError("method list is empty")
    for m in methods:
        if m not in METHODS:
            raise InvalidInputError(f"unknown method {m!r}; choose from {METHODS}")
    if instances is None:
        if n_instances < MIN_INSTANCES:
            raise InvalidInputError(f"need at least {MIN_INSTANCES} instances, got {n_instances}")
        instances = draw_instances(D, teacher, n_instances, base.k, rng, distinct_classes)
    images = D.images
    inputs = []
    for inst in instances:
        x = images[list(inst.sources)].astype(np.float64)
        inputs.append(MixInput(x, np.asarray(teacher.predict_class(x), dtype=np.int64)))

    rows = []
    for method in methods:
        cfg = SuperMixConfig(**{**base.__dict__, "method": method})
        supermix(inputs[0], teacher, cfg, np.random.default_rng(instances[0].seed))  # warm-up
        res = [supermix(x, teacher, cfg, np.random.default_rng(inst.seed))
               for x, inst in zip(inputs, instances)]
        its = np.array([r.iterations for r in res], dtype=np.int64)
        secs = np.array([r.elapsed for r in res])
        conv = np.array([r.converged for r in res], dtype=bool)
        rows.append(MethodRow(method, float(its.mean()), float(secs.mean()), float(conv.mean()),
                              its, secs, conv))
    return BenchReport(rows, len(instances), environment_note())
