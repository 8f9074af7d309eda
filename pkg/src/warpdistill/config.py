"""Run configuration: one flat YAML file of key/value pairs.

Defaults fall into two groups, tagged in DEFAULT_DOCS:

* ``method`` -- values fixed by the distillation method itself
  (temperature, banding geometry, projector learning rate, cosine
  schedule).  Change these and you are running a different method.
* ``engineering`` -- desk-scale choices (loss coefficients, model sizes,
  corpus size, smoothing gamma).  Tune freely.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import UsageError
from .softdtw import BandParams


@dataclass
class RunConfig:
    seed: int = 0

    # corpus
    corpus_size: int = 4000
    valid_frac: float = 0.1
    test_frac: float = 0.1
    num_merges: int = 72

    # teacher model / pretraining
    teacher_width: int = 64
    teacher_layers: int = 2
    teacher_heads: int = 4
    teacher_context: int = 48
    teacher_epochs: int = 6
    teacher_lr: float = 3e-3
    teacher_batch_size: int = 16
    teacher_ppl_ratio: float = 0.5

    # student model
    student_width: int = 32
    student_layers: int = 2
    student_heads: int = 2
    student_context: int = 64

    # objective
    temperature: float = 2.0
    gamma: float = 0.1
    lambda_ce: float = 1.0
    lambda_wkd: float = 1.0
    lambda_dtw: float = 0.1
    band_base: float = 5.0
    band_sensitivity: float = 2.0
    band_blend: float = 0.7
    band_penalty: float = 1.0
    force_unit_weights: bool = False

    # distillation loop
    epochs: int = 8
    batch_size: int = 8
    train_limit: int = 256
    lr_model: float = 1e-3
    lr_projector: float = 1e-3
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dump_weights: bool = False

    # evaluation
    eval_seeds: int = 3
    eval_max_new: int = 16
    eval_limit: int = 100
    rouge_beta: float = 1.2

    def band_params(self) -> BandParams:
        return BandParams(
            base=self.band_base,
            sensitivity=self.band_sensitivity,
            blend=self.band_blend,
            penalty=self.band_penalty,
        )

    def to_yaml(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(asdict(self), fh, sort_keys=True)

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)


DEFAULT_DOCS = {
    "seed": ("engineering", "run seed; every random draw derives from it"),
    "corpus_size": ("engineering", "total synthetic task instances"),
    "valid_frac": ("engineering", "validation fraction (floor rule)"),
    "test_frac": ("engineering", "test fraction (floor rule)"),
    "num_merges": ("engineering", "teacher tokenizer merge budget"),
    "teacher_width": ("engineering", "teacher hidden width (must differ from student)"),
    "teacher_layers": ("engineering", "teacher block count"),
    "teacher_heads": ("engineering", "teacher attention heads"),
    "teacher_context": ("engineering", "teacher context length"),
    "teacher_epochs": ("engineering", "teacher pretraining epochs"),
    "teacher_lr": ("engineering", "teacher pretraining peak LR"),
    "teacher_batch_size": ("engineering", "teacher pretraining batch size"),
    "teacher_ppl_ratio": ("engineering", "teacher must reach this fraction of unigram PPL"),
    "student_width": ("engineering", "student hidden width"),
    "student_layers": ("engineering", "student block count"),
    "student_heads": ("engineering", "student attention heads"),
    "student_context": ("engineering", "student context length"),
    "temperature": ("method", "softening temperature for every distillation distribution"),
    "gamma": ("engineering", "soft-DTW smoothing; the method leaves it unspecified"),
    "lambda_ce": ("engineering", "gold cross-entropy coefficient"),
    "lambda_wkd": ("engineering", "weighted dual-space KD coefficient"),
    "lambda_dtw": ("engineering", "sequence-alignment coefficient"),
    "band_base": ("method", "minimum band half-width in tokens"),
    "band_sensitivity": ("method", "band widening per nat of attention entropy"),
    "band_blend": ("method", "soft-center vs diagonal blend"),
    "band_penalty": ("method", "additive cost outside the band"),
    "force_unit_weights": ("engineering", "replace token weights with ones (plain dual-space KD)"),
    "epochs": ("engineering", "distillation epochs"),
    "batch_size": ("method", "sequences per optimizer step"),
    "train_limit": ("engineering", "distillation uses only this many train lines"),
    "lr_model": ("engineering", "student peak LR (cosine schedule)"),
    "lr_projector": ("method", "projector peak LR (cosine schedule)"),
    "weight_decay": ("engineering", "decoupled weight decay"),
    "adam_beta1": ("engineering", "first-moment decay"),
    "adam_beta2": ("engineering", "second-moment decay"),
    "adam_eps": ("engineering", "adaptive-moment epsilon"),
    "dump_weights": ("engineering", "write per-token weight CSVs during distillation"),
    "eval_seeds": ("engineering", "generation seeds per evaluation"),
    "eval_max_new": ("engineering", "max generated tokens per prompt"),
    "eval_limit": ("engineering", "eval on at most this many test lines"),
    "rouge_beta": ("engineering", "overlap F-measure recall weight"),
}
