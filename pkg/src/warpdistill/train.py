"""Distillation and baseline training loops.

Single-threaded, fully seeded: parameter trajectories, loss CSVs and
checkpoints are byte-identical across reruns with the same config and
seed.  The optimizer is adaptive moments with decoupled weight decay
under a cosine learning-rate schedule (no warmup).

Ablation modes map onto objective settings:

=========  ============================================================
sft        gold cross-entropy only; the teacher is never even run
dskd       dual-space KD with unit token weights, no alignment loss
ew-only    entropy/gate token weights, no alignment loss
dtw-only   unit weights plus unbanded sequence alignment
bdtw-only  unit weights plus banded sequence alignment
no-gate    full objective but student weights drop the confidence gate
dwa        the full objective
=========  ============================================================
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .corpus import load_pairs, unigram_perplexity
from .errors import MissingArtifactError, NumericError, UsageError
from .model import LmConfig, TinyLm, load_checkpoint, save_checkpoint, split_checkpoint_tensors
from .numerics import Rng
from .pipeline import EncodedExample, LossBreakdown, LossSettings, distill_losses, encode_example
from .projection import ProjectorSet
from .tokenizers import CharTokenizer, PairTokenizer
from .weighting import ce_from_logits

MODES = ("dwa", "dskd", "sft", "ew-only", "dtw-only", "bdtw-only", "no-gate")


def resolve_mode(mode: str, cfg: RunConfig) -> LossSettings:
    """Translate an ablation mode plus config into objective settings."""
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {MODES}")
    settings = LossSettings(
        lambda_ce=cfg.lambda_ce,
        lambda_wkd=cfg.lambda_wkd,
        lambda_dtw=cfg.lambda_dtw,
        temperature=cfg.temperature,
        gamma=cfg.gamma,
        band=cfg.band_params(),
        unit_weights=cfg.force_unit_weights,
        use_gate=True,
    )
    if mode == "sft":
        settings = replace(settings, lambda_wkd=0.0, lambda_dtw=0.0)
    elif mode == "dskd":
        settings = replace(settings, unit_weights=True, lambda_dtw=0.0)
    elif mode == "ew-only":
        settings = replace(settings, lambda_dtw=0.0)
    elif mode == "dtw-only":
        settings = replace(settings, unit_weights=True,
                           band=replace(settings.band, penalty=0.0))
    elif mode == "bdtw-only":
        settings = replace(settings, unit_weights=True)
    elif mode == "no-gate":
        settings = replace(settings, use_gate=False)
    return settings


class AdamW:
    """Decoupled-weight-decay adaptive moments over a parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.step_count += 1
        t = self.step_count
        lr = self.lr * lr_scale
        b1c = 1.0 - self.beta1**t
        b2c = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def cosine_lr_scale(step: int, total_steps: int) -> float:
    """Cosine decay from 1 to 0 over the run; step counts from 0."""
    if total_steps <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def _fmt(x: float) -> str:
    return repr(float(x))


def pretrain_teacher(
    train_pairs, valid_pairs, tokenizer: PairTokenizer, cfg: RunConfig, out_path
) -> tuple[TinyLm, float, float]:
    """Plain next-token CE training of the teacher until it clearly beats
    a unigram model on held-out data; frozen afterwards.

    Returns (model, held-out perplexity, unigram perplexity).
    """
    model_cfg = LmConfig(
        vocab_size=tokenizer.vocab.size,
        width=cfg.teacher_width,
        layers=cfg.teacher_layers,
        heads=cfg.teacher_heads,
        context=cfg.teacher_context,
        seed=Rng(cfg.seed).child("teacher-init").seed,
    )
    model = TinyLm(model_cfg)
    encoded = [tokenizer.encode(p + r).ids for p, r in train_pairs]
    encoded = [ids for ids in encoded if len(ids) <= cfg.teacher_context + 1]
    opt = AdamW(model.params, cfg.teacher_lr, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps, cfg.weight_decay)
    order_rng = Rng(cfg.seed).child("teacher-order")
    bsz = cfg.teacher_batch_size
    total_steps = cfg.teacher_epochs * max(1, len(encoded) // bsz)
    step = 0
    first_epoch_loss = None
    for epoch in range(cfg.teacher_epochs):
        idx = list(range(len(encoded)))
        order_rng.shuffle(idx)
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(idx) - bsz + 1, bsz):
            batch = [encoded[i] for i in idx[start : start + bsz]]
            grads = model.zero_grads()
            loss = 0.0
            for ids in batch:
                trace = model.forward(ids[:-1])
                targets = np.asarray(ids[1:], dtype=np.intp)
                mask = np.ones(len(targets), dtype=bool)
                l, d_logits = ce_from_logits(trace.logits, targets, mask)
                model.backward(trace, d_logits=d_logits / len(batch), grads=grads)
                loss += l / len(batch)
            opt.step(grads, cosine_lr_scale(step, total_steps))
            step += 1
            epoch_loss += loss
            batches += 1
        epoch_loss /= max(batches, 1)
        if first_epoch_loss is None:
            first_epoch_loss = epoch_loss
        elif epoch_loss > first_epoch_loss:
            raise NumericError(
                f"teacher diverged: epoch {epoch} loss {epoch_loss:.4f} "
                f"> first epoch {first_epoch_loss:.4f}"
            )
    ppl = held_out_perplexity(model, tokenizer, valid_pairs)
    uni = unigram_perplexity(train_pairs, valid_pairs, tokenizer)
    if ppl > cfg.teacher_ppl_ratio * uni:
        raise NumericError(
            f"teacher held-out PPL {ppl:.3f} above threshold "
            f"{cfg.teacher_ppl_ratio} x unigram PPL {uni:.3f}"
        )
    save_checkpoint(out_path, model_cfg, model.params)
    return model, ppl, uni


def held_out_perplexity(model: TinyLm, tokenizer, pairs) -> float:
    """exp(mean next-token NLL) over all target positions of the lines."""
    nll, count = 0.0, 0
    for prompt, response in pairs:
        ids = tokenizer.encode(prompt + response).ids
        if len(ids) > model.cfg.context + 1:
            continue
        trace = model.forward(ids[:-1])
        targets = np.asarray(ids[1:], dtype=np.intp)
        mask = np.ones(len(targets), dtype=bool)
        loss, _ = ce_from_logits(trace.logits, targets, mask, want_grads=False)
        nll += loss * len(targets)
        count += len(targets)
    if count == 0:
        raise UsageError("no sequences fit the context for perplexity")
    return float(np.exp(nll / count))


@dataclass
class DistillArtifacts:
    student: TinyLm
    projectors: ProjectorSet
    breakdown_log: list[LossBreakdown]


def load_teacher(path) -> TinyLm:
    if not os.path.exists(path):
        raise MissingArtifactError(f"teacher checkpoint not found: {path}")
    cfg, tensors = load_checkpoint(path)
    params, _ = split_checkpoint_tensors(tensors)
    return TinyLm(cfg, params)


def distill(
    train_pairs,
    student_tok: CharTokenizer,
    teacher_tok: PairTokenizer,
    teacher: TinyLm | None,
    cfg: RunConfig,
    mode: str,
    run_dir: str | None = None,
    steps_limit: int | None = None,
) -> DistillArtifacts:
    """Train a student under one ablation mode.

    When ``run_dir`` is given, writes losses.csv, per-epoch checkpoints
    and the final student checkpoint (projectors under ``proj/``).
    ``steps_limit`` truncates the run for trajectory-equality tests.
    """
    settings = resolve_mode(mode, cfg)
    uses_teacher = settings.lambda_wkd != 0.0 or settings.lambda_dtw != 0.0
    if uses_teacher and teacher is None:
        raise MissingArtifactError(f"mode {mode!r} needs a pretrained teacher")

    student_cfg = LmConfig(
        vocab_size=student_tok.vocab.size,
        width=cfg.student_width,
        layers=cfg.student_layers,
        heads=cfg.student_heads,
        context=cfg.student_context,
        seed=Rng(cfg.seed).child("student-init").seed,
    )
    student = TinyLm(student_cfg)
    teacher_width = teacher.cfg.width if teacher is not None else cfg.teacher_width
    projectors = ProjectorSet(cfg.student_width, teacher_width,
                              Rng(cfg.seed).child("projector-init").seed)

    pairs = train_pairs[: cfg.train_limit] if cfg.train_limit else list(train_pairs)
    examples = []
    for prompt, response in pairs:
        ex = encode_example(prompt, response, student_tok, teacher_tok)
        if len(ex.student_ids) - 1 <= cfg.student_context and (
            teacher is None or len(ex.teacher_ids) - 1 <= teacher.cfg.context
        ):
            examples.append(ex)
    if not examples:
        raise UsageError("no training example fits both model contexts")

    opt_student = AdamW(student.params, cfg.lr_model, cfg.adam_beta1,
                        cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    opt_proj = AdamW(projectors.params, cfg.lr_projector, cfg.adam_beta1,
                     cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    order_rng = Rng(cfg.seed).child("distill-order")
    bsz = cfg.batch_size
    steps_per_epoch = max(1, len(examples) // bsz)
    total_steps = cfg.epochs * steps_per_epoch
    if steps_limit is not None:
        total_steps = min(total_steps, steps_limit)

    loss_fh = weights_fh = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        loss_fh = open(os.path.join(run_dir, "losses.csv"), "w")
        loss_fh.write("step,lr_scale," + ",".join(LossBreakdown.FIELDS) + "\n")
        if cfg.dump_weights:
            weights_fh = open(os.path.join(run_dir, "weights.csv"), "w")
            weights_fh.write("step,seq,position,entropy,gate,weight,kl\n")

    log: list[LossBreakdown] = []
    step = 0
    done = False
    try:
        for epoch in range(cfg.epochs):
            if done:
                break
            idx = list(range(len(examples)))
            order_rng.shuffle(idx)
            for start in range(0, len(idx) - bsz + 1, bsz):
                if steps_limit is not None and step >= steps_limit:
                    done = True
                    break
                batch = [examples[i] for i in idx[start : start + bsz]]
                student_grads = student.zero_grads()
                proj_grads = projectors.zero_grads()
                agg = LossBreakdown()
                for seq_no, ex in enumerate(batch):
                    breakdown, _, _, diag = distill_losses(
                        student, teacher if uses_teacher else None,
                        projectors if uses_teacher else None,
                        ex, settings,
                        student_grads=student_grads, proj_grads=proj_grads,
                    )
                    for f in LossBreakdown.FIELDS:
                        setattr(agg, f, getattr(agg, f) + getattr(breakdown, f) / len(batch))
                    if weights_fh is not None and diag.weights_student is not None:
                        ent = diag.entropy_student
                        gate = diag.gate
                        for pos in range(len(diag.weights_student)):
                            weights_fh.write(
                                f"{step},{seq_no},{pos},"
                                f"{_fmt(ent[pos]) if ent is not None else ''},"
                                f"{_fmt(gate[pos]) if gate is not None else ''},"
                                f"{_fmt(diag.weights_student[pos])},"
                                f"{_fmt(diag.kl_student_rows[pos])}\n"
                            )
                for g in student_grads.values():
                    g /= len(batch)
                for g in proj_grads.values():
                    g /= len(batch)
                scale = cosine_lr_scale(step, total_steps)
                opt_student.step(student_grads, scale)
                if uses_teacher:
                    opt_proj.step(proj_grads, scale)
                if loss_fh is not None:
                    loss_fh.write(
                        f"{step},{_fmt(scale)},"
                        + ",".join(_fmt(v) for v in agg.as_tuple())
                        + "\n"
                    )
                log.append(agg)
                step += 1
            if run_dir is not None and not done:
                save_checkpoint(
                    os.path.join(run_dir, f"ckpt_epoch{epoch}.bin"),
                    student_cfg, student.params, projectors.to_namespaced(),
                )
    finally:
        if loss_fh is not None:
            loss_fh.close()
        if weights_fh is not None:
            weights_fh.close()

    if run_dir is not None:
        save_checkpoint(
            os.path.join(run_dir, "student.bin"),
            student_cfg, student.params, projectors.to_namespaced(),
        )
    return DistillArtifacts(student=student, projectors=projectors, breakdown_log=log)
