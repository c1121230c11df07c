"""Command-line entry point: ``python -m supermix <command> [--config FILE] [--field value ...]``.

Exit status is 0 on success, 1 for invalid input (bad flags, config, or
files) and 2 for failures at run time.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .bench import run_bench
from .classifier import build_classifier, train_classifier
from .config import RunConfig, load_config
from .data import LabeledDataset, MixedDataset, synth_dataset
from .errors import InvalidInputError
from .pipeline import build_mixed_dataset, distill, evaluate, smoothness_profile, spot_check_labels
from .serialization import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .viz import mix_panel, plot_profiles, save_png

logger = logging.getLogger("supermix")

COMMANDS = ("synth", "train-teacher", "mix", "distill", "bench", "analyze")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def write_csv(path, rows: list[dict], cfg: RunConfig, fieldnames=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config: {cfg.to_json()}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames or (list(rows[0]) if rows else []),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> tuple[dict, list[dict]]:
    """Return the embedded config and the data rows of a report CSV."""
    lines = Path(path).read_text().splitlines()
    cfg = {}
    body = []
    for line in lines:
        if line.startswith("# config: "):
            cfg = json.loads(line[len("# config: "):])
        elif not line.startswith("#"):
            body.append(line)
    return cfg, list(csv.DictReader(body))


def load_train_test(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset | None]:
    if cfg.data:
        train = load_dataset(cfg.data)
        if not isinstance(train, LabeledDataset):
            raise InvalidInputError(f"{cfg.data} holds a mixed dataset, expected a labeled one")
        test = None
        if cfg.test_data:
            test = load_dataset(cfg.test_data)
            if not isinstance(test, LabeledDataset):
                raise InvalidInputError(f"{cfg.test_data} holds a mixed dataset, expected a labeled one")
        return train, test
    return synth_dataset(cfg.synth_spec())


def load_teacher(cfg: RunConfig):
    if not cfg.teacher:
        raise InvalidInputError("no teacher checkpoint given (set teacher = PATH or --teacher)")
    return load_checkpoint(cfg.teacher)


def cmd_synth(cfg: RunConfig) -> dict:
    """Generate the synthetic train and test datasets."""
    train, test = synth_dataset(cfg.synth_spec())
    out = Path(cfg.out)
    meta = cfg.as_dict()
    save_dataset(out / "train.smxd", train, meta)
    save_dataset(out / "test.smxd", test, meta)
    print(f"wrote {len(train)} train and {len(test)} test images to {out}")
    return {"train": str(out / "train.smxd"), "test": str(out / "test.smxd")}


def cmd_train_teacher(cfg: RunConfig) -> dict:
    """Train the teacher classifier and save a checkpoint."""
    train, test = load_train_test(cfg)
    init_rng, train_rng = _streams(cfg.seed, 2)
    model = build_classifier(cfg.teacher_arch, train.image_shape, train.n_classes, rng=init_rng,
                             **cfg.arch_options("teacher"))
    start = time.perf_counter()
    model, trace = train_classifier(model, train, cfg.schedule("teacher"), train_rng, test=test)
    elapsed = time.perf_counter() - start
    out = Path(cfg.out)
    rows = list(trace.rows())
    write_csv(out / "teacher_metrics.csv", rows, cfg)
    metrics = {"train_acc": trace.train_acc[-1] if rows else float("nan")}
    if test is not None:
        metrics["test_acc"] = evaluate(model, test)["top1"]
    save_checkpoint(out / "teacher.ckpt", model, {"config": cfg.as_dict(), "metrics": metrics})
    print(f"teacher {cfg.teacher_arch}: " + " ".join(f"{k} {v:.4f}" for k, v in metrics.items())
          + f" ({elapsed:.1f}s)")
    return metrics


def cmd_mix(cfg: RunConfig) -> dict:
    """Build a mixed dataset with the teacher's pseudo-labels."""
    train, _ = load_train_test(cfg)
    teacher = load_teacher(cfg)
    mix_rng, check_rng = _streams(cfg.seed, 2)
    ds, records, masks = build_mixed_dataset(
        train, teacher, cfg.mix_method, cfg.kappa, cfg.supermix_config(), mix_rng,
        accuracy_floor=cfg.teacher_accuracy_floor, drop_unconverged=cfg.drop_unconverged,
        workers=cfg.workers, keep_masks=cfg.panels > 0, with_records=True)
    checked = spot_check_labels(ds, teacher, check_rng)
    out = Path(cfg.out)
    save_dataset(out / "mixed.smxd", ds, cfg.as_dict())
    rows = [r.row(i) for i, r in enumerate(records)]
    write_csv(out / "mix_stats.csv", rows, cfg,
              fieldnames=["index", "sources", "classes", "weights", "pseudo_class", "iterations",
                          "converged", "elapsed_ms"])
    cj = cfg.to_json()
    for i in range(min(cfg.panels, len(ds))):
        x = train.images[list(records[i].sources)]
        save_png(out / "panels" / f"mix_{i:04d}.png", mix_panel(x, masks[i], ds.images[i]), cj)
    summary = {"samples": len(ds), "spot_checked": checked,
               "mean_iterations": float(ds.iterations.mean()) if len(ds) else 0.0,
               "converged": float(ds.converged.mean()) if len(ds) else 1.0}
    print(f"{cfg.mix_method}: {summary['samples']} samples, mean iterations "
          f"{summary['mean_iterations']:.2f}, converged {summary['converged']:.3f}")
    return summary


def _student_run(cfg: RunConfig, seed: int, train, test, teacher, mixed):
    init_rng, train_rng = _streams(seed, 2)
    student = build_classifier(cfg.student_arch, train.image_shape, train.n_classes, rng=init_rng,
                               **cfg.arch_options("student"))
    return distill(student, teacher, train, mixed, cfg.objective, cfg.schedule("student"), train_rng,
                   test=test, tau=cfg.tau, lambda_kd=cfg.lambda_kd)


def cmd_distill(cfg: RunConfig) -> dict:
    """Train students on the original data plus an optional mixed dataset."""
    train, test = load_train_test(cfg)
    teacher = load_teacher(cfg) if (cfg.teacher or cfg.objective != "ce") else None
    mixed = None
    if cfg.mixed:
        mixed = load_dataset(cfg.mixed)
        if not isinstance(mixed, MixedDataset):
            raise InvalidInputError(f"{cfg.mixed} is not a mixed dataset")
    out = Path(cfg.out)
    finals = []
    for rep in range(cfg.repeats):
        seed = cfg.seed + rep
        student, trace, info = _student_run(cfg, seed, train, test, teacher, mixed)
        suffix = "" if cfg.repeats == 1 else f"_seed{seed}"
        write_csv(out / f"distill_trace{suffix}.csv", list(trace.rows()), cfg)
        final = evaluate(student, test)["top1"] if test is not None else trace.train_acc[-1]
        finals.append(final)
        save_checkpoint(out / f"student{suffix}.ckpt", student,
                        {"config": cfg.as_dict(), "metrics": {"final_acc": final, **info}})
        print(f"seed {seed}: final accuracy {final:.4f}")
    mean, std = float(np.mean(finals)), float(np.std(finals))
    rows = [{"seed": cfg.seed + i, "accuracy": repr(a)} for i, a in enumerate(finals)]
    rows.append({"seed": "mean", "accuracy": repr(mean)})
    rows.append({"seed": "std", "accuracy": repr(std)})
    write_csv(out / "distill_summary.csv", rows, cfg)
    print(f"accuracy over {len(finals)} seed(s): {mean:.4f} +- {std:.4f}")
    return {"accuracies": finals, "mean": mean, "std": std}


def cmd_bench(cfg: RunConfig) -> dict:
    """Compare mask optimizers on identical instances."""
    train, _ = load_train_test(cfg)
    teacher = load_teacher(cfg)
    (rng,) = _streams(cfg.seed, 1)
    report = run_bench(train, teacher, cfg.supermix_config(), rng, methods=cfg.bench_methods,
                       n_instances=cfg.bench_instances, distinct_classes=cfg.bench_distinct_classes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(report.to_csv(cfg.to_json()))
    table = report.table()
    (out / "bench.txt").write_text(table + "\n")
    print(table)
    return {"report": report}


def cmd_analyze(cfg: RunConfig) -> dict:
    """Top-n teacher probability profiles of original and mixed images."""
    train, _ = load_train_test(cfg)
    teacher = load_teacher(cfg)
    n = min(cfg.analyze_samples, len(train))
    if n < 1:
        raise InvalidInputError("analyze_samples must be positive")
    pick_rng, *mix_rngs = _streams(cfg.seed, 4)
    top_n = min(cfg.top_n, train.n_classes)
    original = train.images[np.sort(pick_rng.choice(len(train), size=n, replace=False))]
    profiles = {"original": smoothness_profile(teacher, original, top_n)}
    kappa = n / len(train)
    panels = {}
    for method, rng in zip(("mixup", "cutmix", "supermix"), mix_rngs):
        ds, records, masks = build_mixed_dataset(
            train, teacher, method, kappa, cfg.supermix_config(), rng,
            accuracy_floor=cfg.teacher_accuracy_floor, workers=cfg.workers,
            keep_masks=method == "supermix" and cfg.panels > 0, with_records=True)
        profiles[method] = smoothness_profile(teacher, ds.images, top_n)
        if masks is not None:
            panels = {i: (records[i].sources, masks[i], ds.images[i]) for i in range(min(cfg.panels, len(ds)))}
    out = Path(cfg.out)
    rows = [{"dataset": name, "samples": n, **{f"p{j + 1}": repr(float(v)) for j, v in enumerate(prof)}}
            for name, prof in profiles.items()]
    write_csv(out / "profiles.csv", rows, cfg)
    cj = cfg.to_json()
    plot_profiles(out / "profiles.png", profiles, cj)
    for i, (src, m, img) in panels.items():
        save_png(out / "panels" / f"supermix_{i:04d}.png", mix_panel(train.images[list(src)], m, img), cj)
    for name, prof in profiles.items():
        print(f"{name:<9} " + " ".join(f"{v:.4f}" for v in prof))
    return {"profiles": profiles}


HANDLERS = {
    "synth": cmd_synth,
    "train-teacher": cmd_train_teacher,
    "mix": cmd_mix,
    "distill": cmd_distill,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="supermix", description="Supervised mixing augmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or "").strip() or None)
        p.add_argument("--config", help="flat key = value configuration file")
        for key in config_mod.FIELDS:
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar="VALUE",
                           help=f"override {key} (default {config_mod.format_value(getattr(RunConfig(), key))})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    path = args.pop("config", None)
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(path, args)
        HANDLERS[command](cfg)
    except InvalidInputError as exc:
        print(f"supermix {command}: invalid input: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every other failure
        print(f"supermix {command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
