"""Per-example assembly of the full distillation objective.

One call runs both models, builds the cross-model attention, forms the
four distributions, the token weights, the token-level losses and the
sequence-alignment losses, then backpropagates every term into student
and projector gradients with per-term coefficients.  Teacher parameters
never receive gradients.

``term_coeffs`` exists for the gradient oracle: checking one loss term
means setting its coefficient to one and the rest to zero, and freezing
the weights and band at their unperturbed values (both are constants of
the objective, so the finite-difference reference must hold them fixed
too).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, UsageError
from .model import TinyLm
from .numerics import softmax_rows, softmax_rows_backward
from .projection import (
    CmaResult,
    DualProjResult,
    ProjectorSet,
    build_cma,
    cma_backward,
    project_dual,
    project_dual_backward,
    project_teacher_reprs,
    project_teacher_reprs_backward,
)
from .softdtw import BandParams, BandSpec, DtwLossResult, build_band, ndtw
from .tokenizers import BOS, EOS, CharTokenizer, PairTokenizer
from .weighting import (
    ce_from_logits,
    ce_from_probs,
    entropy_rows,
    kl_rows,
    normalize_weights,
    student_weights,
    teacher_weights,
    weighted_kl,
)

TERMS = ("ce", "kd_student", "kd_teacher", "ce_projected", "ndtw_embed", "ndtw_hidden")


@dataclass(frozen=True)
class EncodedExample:
    """One text under both tokenizations, with response masks.

    ``student_ids``/``teacher_ids`` are the full framed sequences
    (bos ... eos); models run on ``ids[:-1]`` and are scored against
    ``ids[1:]``.  A mask flags positions whose target belongs to the
    response (including the closing eos).
    """

    prompt: str
    response: str
    student_ids: tuple[int, ...]
    teacher_ids: tuple[int, ...]
    student_prompt_len: int
    teacher_prompt_len: int

    @property
    def student_inputs(self):
        return self.student_ids[:-1]

    @property
    def student_targets(self):
        return np.asarray(self.student_ids[1:], dtype=np.intp)

    @property
    def student_mask(self):
        return np.arange(len(self.student_ids) - 1) >= self.student_prompt_len

    @property
    def teacher_inputs(self):
        return self.teacher_ids[:-1]

    @property
    def teacher_targets(self):
        return np.asarray(self.teacher_ids[1:], dtype=np.intp)

    @property
    def teacher_mask(self):
        return np.arange(len(self.teacher_ids) - 1) >= self.teacher_prompt_len


def encode_example(
    prompt: str, response: str, student_tok: CharTokenizer, teacher_tok: PairTokenizer
) -> EncodedExample:
    """Encode prompt and response separately so the boundary is token-aligned."""
    if not prompt or not response:
        raise UsageError("prompt and response must both be non-empty")
    sp = student_tok.encode_body(prompt)
    sr = student_tok.encode_body(response)
    tp = teacher_tok.encode_body(prompt)
    tr = teacher_tok.encode_body(response)
    return EncodedExample(
        prompt=prompt,
        response=response,
        student_ids=tuple([BOS] + sp + sr + [EOS]),
        teacher_ids=tuple([BOS] + tp + tr + [EOS]),
        student_prompt_len=len(sp),
        teacher_prompt_len=len(tp),
    )


@dataclass
class LossBreakdown:
    ce: float = 0.0
    kd_student: float = 0.0
    kd_teacher: float = 0.0
    ce_projected: float = 0.0
    ndtw_embed: float = 0.0
    ndtw_hidden: float = 0.0
    total: float = 0.0

    FIELDS = ("ce", "kd_student", "kd_teacher", "ce_projected",
              "ndtw_embed", "ndtw_hidden", "total")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)

    def recombined(self, lambda_ce: float, lambda_wkd: float, lambda_dtw: float) -> float:
        return (
            lambda_ce * self.ce
            + lambda_wkd * (self.kd_student + self.kd_teacher + self.ce_projected)
            + lambda_dtw * (self.ndtw_embed + self.ndtw_hidden)
        )


@dataclass
class LossSettings:
    """Effective per-call objective configuration (mode already resolved)."""

    lambda_ce: float = 1.0
    lambda_wkd: float = 1.0
    lambda_dtw: float = 0.1
    temperature: float = 2.0
    gamma: float = 0.1
    band: BandParams = field(default_factory=BandParams)
    unit_weights: bool = False
    use_gate: bool = True

    def coeffs(self) -> dict[str, float]:
        return {
            "ce": self.lambda_ce,
            "kd_student": self.lambda_wkd,
            "kd_teacher": self.lambda_wkd,
            "ce_projected": self.lambda_wkd,
            "ndtw_embed": self.lambda_dtw,
            "ndtw_hidden": self.lambda_dtw,
        }


@dataclass
class StepDiagnostics:
    """Optional extras for dumps and tests."""

    cma: CmaResult | None = None
    dual: DualProjResult | None = None
    dtw: DtwLossResult | None = None
    weights_student: np.ndarray | None = None
    weights_teacher: np.ndarray | None = None
    entropy_student: np.ndarray | None = None
    gate: np.ndarray | None = None
    kl_student_rows: np.ndarray | None = None


def compute_normalized_weights(
    p_s, p_ts, p_t, s_mask, t_mask, use_gate: bool, diag: StepDiagnostics | None = None
):
    """Raw entropy/gate weights, normalized per space over masked positions."""
    raw_s = student_weights(p_s, p_ts, use_gate=use_gate)
    raw_t = teacher_weights(p_t)
    if diag is not None:
        diag.entropy_student = entropy_rows(p_s) / np.log(p_s.shape[1])
        diag.gate = p_ts.max(axis=1) if use_gate else np.ones(p_ts.shape[0])
    w_s = np.zeros_like(raw_s)
    w_t = np.zeros_like(raw_t)
    w_s[s_mask] = normalize_weights(raw_s[s_mask], float(s_mask.sum()))
    w_t[t_mask] = normalize_weights(raw_t[t_mask], float(t_mask.sum()))
    return w_s, w_t


def _ndtw_pair(embed_s, embed_t, hidden_s, hidden_t, band, gamma) -> DtwLossResult:
    hidden = ndtw(hidden_s, hidden_t, band, gamma)
    embed = ndtw(embed_s, embed_t, band, gamma)
    return DtwLossResult(
        total=hidden.value + embed.value,
        embed_term=embed.value,
        hidden_term=hidden.value,
        d_embed_student=embed.d_x,
        d_embed_teacher=embed.d_y,
        d_hidden_student=hidden.d_x,
        d_hidden_teacher=hidden.d_y,
        band=band,
        embed=embed,
        hidden=hidden,
    )


def distill_losses(
    student: TinyLm,
    teacher: TinyLm | None,
    projectors: ProjectorSet | None,
    example: EncodedExample,
    settings: LossSettings,
    term_coeffs: dict[str, float] | None = None,
    frozen_weights: tuple[np.ndarray, np.ndarray] | None = None,
    frozen_band: BandSpec | None = None,
    want_grads: bool = True,
    student_grads: dict[str, np.ndarray] | None = None,
    proj_grads: dict[str, np.ndarray] | None = None,
) -> tuple[LossBreakdown, dict | None, dict | None, StepDiagnostics]:
    """Forward (and optionally backward) for one example.

    Gradient contributions are scaled by ``term_coeffs`` (default: the
    lambda weights) and accumulated into the supplied dicts.  Loss
    groups whose coefficients are all zero are skipped entirely; in
    particular a pure-CE configuration never touches the teacher.
    """
    coeffs = dict(term_coeffs) if term_coeffs is not None else settings.coeffs()
    unknown = set(coeffs) - set(TERMS)
    if unknown:
        raise UsageError(f"unknown loss terms {sorted(unknown)}")
    c = {t: coeffs.get(t, 0.0) for t in TERMS}
    need_kd = any(c[t] != 0.0 for t in ("kd_student", "kd_teacher", "ce_projected"))
    need_dtw = c["ndtw_embed"] != 0.0 or c["ndtw_hidden"] != 0.0
    need_teacher = need_kd or need_dtw
    if need_teacher and (teacher is None or projectors is None):
        raise UsageError("teacher and projectors are required unless only ce is active")

    breakdown = LossBreakdown()
    diag = StepDiagnostics()
    tau = settings.temperature

    st_trace = student.forward(example.student_inputs)
    s_mask = example.student_mask
    s_targets = example.student_targets

    d_logits_ce = None
    if c["ce"] != 0.0:
        breakdown.ce, d_logits_ce = ce_from_logits(st_trace.logits, s_targets, s_mask, want_grads)

    d_logits_kd = None
    d_p_ts = d_p_st = None
    cma = dual = None
    dtw = None
    te_trace = None

    if need_teacher:
        te_trace = teacher.forward(example.teacher_inputs)

    need_band = need_dtw and frozen_band is None and settings.band.penalty != 0.0
    if need_kd or need_band:
        target_embed_s = student.embed_rows(example.student_targets)
        target_embed_t = teacher.embed_rows(example.teacher_targets)
        cma = build_cma(
            st_trace.embeddings, target_embed_s, te_trace.embeddings, target_embed_t, projectors
        )
        diag.cma = cma

    if need_kd:
        t_mask = example.teacher_mask
        dual = project_dual(
            cma,
            st_trace.hidden,
            target_embed_t,
            te_trace.hidden,
            student.params["w_out"],
            teacher.params["w_out"],
            projectors,
            tau,
        )
        diag.dual = dual
        p_s = softmax_rows(st_trace.logits, tau)
        p_t = softmax_rows(te_trace.logits, tau)
        if frozen_weights is not None:
            w_s, w_t = frozen_weights
        elif settings.unit_weights:
            w_s = np.ones(len(s_mask))
            w_t = np.ones(len(t_mask))
        else:
            w_s, w_t = compute_normalized_weights(
                p_s, dual.p_teacher_to_student, p_t, s_mask, t_mask, settings.use_gate, diag
            )
        diag.weights_student, diag.weights_teacher = w_s, w_t

        breakdown.kd_student, d_ref_s, d_oth_s = weighted_kl(
            dual.p_teacher_to_student, p_s, w_s, s_mask, want_grads
        )
        breakdown.kd_teacher, _, d_oth_t = weighted_kl(
            p_t, dual.p_student_to_teacher, w_t, t_mask, want_grads
        )
        breakdown.ce_projected, d_p_ce = ce_from_probs(
            dual.p_teacher_to_student, s_targets, s_mask, want_grads
        )
        diag.kl_student_rows = kl_rows(dual.p_teacher_to_student, p_s)
        if want_grads:
            d_p_ts = c["kd_student"] * d_ref_s + c["ce_projected"] * d_p_ce
            d_p_st = c["kd_teacher"] * d_oth_t
            d_logits_kd = softmax_rows_backward(p_s, c["kd_student"] * d_oth_s, tau)

    if need_dtw:
        embed_proj, hidden_proj = project_teacher_reprs(
            te_trace.embeddings, te_trace.hidden, projectors
        )
        if frozen_band is not None:
            band = frozen_band
        elif settings.band.penalty != 0.0:
            band = build_band(cma.attention, settings.band)
        else:
            band = None
        dtw = _ndtw_pair(
            st_trace.embeddings, embed_proj, st_trace.hidden, hidden_proj,
            band, settings.gamma,
        )
        breakdown.ndtw_embed = dtw.embed_term
        breakdown.ndtw_hidden = dtw.hidden_term
        diag.dtw = dtw

    breakdown.total = sum(c[t] * getattr(breakdown, t) for t in TERMS)
    if not np.isfinite(breakdown.total):
        offending = [t for t in TERMS if not np.isfinite(getattr(breakdown, t))]
        raise NumericError(f"non-finite loss in terms: {offending or ['total']}")

    if not want_grads:
        return breakdown, None, None, diag

    if student_grads is None:
        student_grads = student.zero_grads()
    if proj_grads is None and projectors is not None:
        proj_grads = projectors.zero_grads()

    d_logits = np.zeros_like(st_trace.logits)
    if d_logits_ce is not None:
        d_logits += c["ce"] * d_logits_ce
    if d_logits_kd is not None:
        d_logits += d_logits_kd

    d_hidden_inject = None
    d_embed_inject = None

    if need_kd:
        d_logits_ts = softmax_rows_backward(dual.p_teacher_to_student, d_p_ts, tau)
        d_logits_st = softmax_rows_backward(dual.p_student_to_teacher, d_p_st, tau)
        d_att, d_rev, d_hidden_dual, d_student_head = project_dual_backward(
            cma, dual, st_trace.hidden, d_logits_ts, d_logits_st,
            student.params["w_out"], teacher.params["w_out"], projectors, proj_grads,
        )
        d_embed_cma, d_target_embed = cma_backward(cma, d_att, d_rev, projectors, proj_grads)
        d_hidden_inject = d_hidden_dual
        d_embed_inject = d_embed_cma
        student.accumulate_embed_grad(example.student_targets, d_target_embed, student_grads)
        student_grads["w_out"] += d_student_head

    if need_dtw:
        project_teacher_reprs_backward(
            te_trace.embeddings, te_trace.hidden,
            c["ndtw_embed"] * dtw.d_embed_teacher,
            c["ndtw_hidden"] * dtw.d_hidden_teacher,
            proj_grads,
        )
        dh = c["ndtw_hidden"] * dtw.d_hidden_student
        de = c["ndtw_embed"] * dtw.d_embed_student
        d_hidden_inject = dh if d_hidden_inject is None else d_hidden_inject + dh
        d_embed_inject = de if d_embed_inject is None else d_embed_inject + de

    student.backward(
        st_trace,
        d_logits=d_logits,
        d_hidden=d_hidden_inject,
        d_embed=d_embed_inject,
        grads=student_grads,
    )
    return breakdown, student_grads, proj_grads, diag
