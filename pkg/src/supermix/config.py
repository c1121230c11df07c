"""Run configuration: one flat record loaded from ``key = value`` text with
command-line overrides."""

from __future__ import annotations

import configparser
import dataclasses
import json
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .classifier import Schedule
from .data import SynthSpec
from .errors import InvalidInputError
from .optimizer import SuperMixConfig


@dataclass
class RunConfig:
    # paths ("" means: not given)
    data: str = ""
    test_data: str = ""
    teacher: str = ""
    mixed: str = ""
    out: str = "out"
    seed: int = 0
    # synthetic dataset, used when no data path is given
    n_classes: int = 4
    height: int = 32
    width: int = 32
    channels: int = 3
    n_train: int = 2000
    n_test: int = 500
    synth_seed: int = 0
    hue_jitter: float = 0.5
    # teacher training
    teacher_arch: str = "tiny-cnn"
    teacher_hidden: tuple[int, ...] = (256,)
    teacher_filters: tuple[int, ...] = (8, 16)
    teacher_activation: str = ""
    teacher_lr: float = 0.02
    teacher_epochs: int = 30
    teacher_milestones: tuple[int, ...] = (20, 25)
    # student training
    student_arch: str = "mlp"
    student_hidden: tuple[int, ...] = (256,)
    student_filters: tuple[int, ...] = (8, 16)
    student_activation: str = ""
    student_lr: float = 0.01
    student_epochs: int = 30
    student_milestones: tuple[int, ...] = (20, 25)
    # shared schedule knobs
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    # mask optimization
    k: int = 2
    alpha: float = 3.0
    sigma: float = 1.0
    grid_w: int = 8
    grid_h: int = 8
    lambda_s: float = 25.0
    lambda_sigma: float = 250.0
    max_iters: int = 50
    denom_epsilon: float = 1e-12
    optimizer: str = "newton-sp"
    sgd_lr: float = 0.1
    kl_epsilon: float = 1e-12
    divergence_direction: str = "target-first"
    # mixed dataset
    mix_method: str = "supermix"
    kappa: float = 5.0
    teacher_accuracy_floor: float = 0.6
    drop_unconverged: bool = False
    workers: int = 1
    panels: int = 0
    # distillation
    objective: str = "ce"
    tau: float = 4.0
    lambda_kd: float = 0.1
    repeats: int = 1
    # bench
    bench_instances: int = 256
    bench_methods: tuple[str, ...] = ("newton-sp", "newton", "sgd")
    bench_distinct_classes: bool = True
    # analyze
    analyze_samples: int = 1000
    top_n: int = 5

    # -- derived views ------------------------------------------------------
    def supermix_config(self, method: str | None = None) -> SuperMixConfig:
        return SuperMixConfig(
            k=self.k, alpha=self.alpha, sigma=self.sigma, grid_w=self.grid_w, grid_h=self.grid_h,
            lambda_s=self.lambda_s, lambda_sigma=self.lambda_sigma, max_iters=self.max_iters,
            denom_epsilon=self.denom_epsilon, method=method or self.optimizer, sgd_lr=self.sgd_lr,
            kl_epsilon=self.kl_epsilon, divergence_direction=self.divergence_direction,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(n_classes=self.n_classes, height=self.height, width=self.width,
                         channels=self.channels, n_train=self.n_train, n_test=self.n_test,
                         seed=self.synth_seed, hue_jitter=self.hue_jitter)

    def schedule(self, role: str) -> Schedule:
        return Schedule(lr=getattr(self, f"{role}_lr"), momentum=self.momentum,
                        weight_decay=self.weight_decay, epochs=getattr(self, f"{role}_epochs"),
                        batch_size=self.batch_size, milestones=getattr(self, f"{role}_milestones"),
                        lr_decay=self.lr_decay)

    def arch_options(self, role: str) -> dict:
        arch = getattr(self, f"{role}_arch")
        opts = {}
        if arch == "mlp":
            opts["hidden"] = getattr(self, f"{role}_hidden")
        elif arch == "tiny-cnn":
            opts["filters"] = getattr(self, f"{role}_filters")
        act = getattr(self, f"{role}_activation")
        if act and arch != "softmax-regression":
            opts["activation"] = act
        return opts

    def as_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.as_dict().items())


_TYPES = typing.get_type_hints(RunConfig)
FIELDS = tuple(f.name for f in fields(RunConfig))


def format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_value(name: str, text: str):
    """Convert ``text`` to the declared type of field ``name``."""
    if name not in _TYPES:
        raise InvalidInputError(f"unknown config key {name!r}")
    tp = _TYPES[name]
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tp in (int, float, str):
            return tp(text)
        item = typing.get_args(tp)[0]
        return tuple(item(p.strip()) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise InvalidInputError(f"config key {name}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a flat ``key = value`` file (``#`` comments) and apply ``overrides``.

    Unknown keys are rejected in both places.
    """
    values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from None
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                           comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text, source=str(path))
        except configparser.Error as exc:
            raise InvalidInputError(f"malformed config {path}: {exc}") from None
        for key, raw in parser["run"].items():
            values[key] = parse_value(key, raw)
    for key, v in (overrides or {}).items():
        if key not in _TYPES:
            raise InvalidInputError(f"unknown config key {key!r}")
        values[key] = parse_value(key, v) if isinstance(v, str) else v
    cfg = RunConfig(**values)
    return validate(cfg)


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.mix_method not in ("supermix", "mixup", "cutmix"):
        raise InvalidInputError(f"mix_method must be supermix, mixup or cutmix, got {cfg.mix_method!r}")
    if cfg.objective not in ("ce", "kd", "kd+mixed"):
        raise InvalidInputError(f"objective must be ce, kd or kd+mixed, got {cfg.objective!r}")
    if cfg.kappa < 0:
        raise InvalidInputError("kappa must be nonnegative")
    if cfg.repeats < 1:
        raise InvalidInputError("repeats must be at least 1")
    if cfg.workers < 1:
        raise InvalidInputError("workers must be at least 1")
    if cfg.batch_size < 1 or cfg.teacher_epochs < 0 or cfg.student_epochs < 0:
        raise InvalidInputError("batch size and epoch counts must be positive")
    cfg.supermix_config()  # raises on bad optimizer settings
    return cfg


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return validate(dataclasses.replace(cfg, **changes))
