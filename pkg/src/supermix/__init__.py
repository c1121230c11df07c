"""Supervised mixing augmentation: teacher-guided mask optimization for
mixing several images into one, plus the surrounding training pipeline."""

from .classifier import Classifier, Schedule, build_classifier, tempered_softmax, train_classifier
from .data import LabeledDataset, MixedDataset, SynthSpec, synth_dataset
from .errors import FormatError, InvalidInputError, TeacherNotReadyError
from .mixing import MixInput, cutmix, mix, mixup, normalize_masks, target_soft_label
from .objective import ObjectiveConfig, supermix_loss_and_grad
from .optimizer import MixResult, SuperMixConfig, newton_step, smooth_newton_step, sgd_step, supermix, topk_satisfied
from .pipeline import build_mixed_dataset, distill, evaluate, smoothness_profile

__version__ = "0.1.0"

__all__ = [
    "Classifier", "Schedule", "build_classifier", "tempered_softmax", "train_classifier",
    "LabeledDataset", "MixedDataset", "SynthSpec", "synth_dataset",
    "FormatError", "InvalidInputError", "TeacherNotReadyError",
    "MixInput", "cutmix", "mix", "mixup", "normalize_masks", "target_soft_label",
    "ObjectiveConfig", "supermix_loss_and_grad",
    "MixResult", "SuperMixConfig", "newton_step", "smooth_newton_step", "sgd_step", "supermix", "topk_satisfied",
    "build_mixed_dataset", "distill", "evaluate", "smoothness_profile",
]
