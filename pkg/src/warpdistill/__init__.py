"""Cross-tokenizer distillation at desk scale.

A numpy library implementing dual-space entropy-weighted knowledge
distillation with banded Soft-DTW sequence alignment, plus the tiny
teacher/student language models (with genuinely different tokenizers)
needed to train, gradient-check and evaluate every term of the
objective against brute-force oracles.
"""

from .config import RunConfig
from .model import LmConfig, TinyLm, load_checkpoint, save_checkpoint
from .numerics import Rng, finite_diff_grad, log_sum_exp, softmax_rows
from .pipeline import EncodedExample, LossBreakdown, LossSettings, distill_losses, encode_example
from .projection import ProjectorSet, build_cma, project_dual, project_teacher_reprs
from .softdtw import BandParams, BandSpec, apply_band, build_band, cosine_cost, dtw_loss, ndtw, soft_dtw
from .tokenizers import CharTokenizer, PairTokenizer, TokenSeq, Vocab, train_merges
from .train import AdamW, MODES, distill, pretrain_teacher, resolve_mode
from .weighting import (
    entropy_rows,
    normalize_weights,
    student_weights,
    teacher_weights,
    weighted_kl,
)
from .evaluate import evaluate_model, rouge_l, structure_distance

__version__ = "0.1.0"
