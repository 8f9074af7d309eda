"""Cross-model attention and the linear projectors bridging the two models.

The student's input and target embeddings, concatenated featurewise,
are projected to queries; the teacher's concatenated embeddings (std-
normalized, unprojected) act as keys; values are a projection of the
teacher's normalized target embeddings plus hidden states.  Row-softmax
of the scaled scores gives the student->teacher alignment (one row per
student position) and its reverse.

Also owns the two width-bridging maps that carry teacher embeddings and
hidden states into the student width for the sequence-alignment loss.

The teacher is frozen everywhere: backward functions return gradients
only for projector parameters and student-side tensors, so there is no
code path that could write a teacher gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .numerics import Rng, softmax_rows, softmax_rows_backward

NORM_EPS = 1e-6


def row_std_normalize(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Divide each row by its standard deviation (population, eps-guarded)."""
    std = x.std(axis=1, keepdims=True)
    return x / (std + eps)


class ProjectorSet:
    """All trainable bridge parameters, keyed for checkpoint namespacing.

    * ``wq``/``bq``: query projector, 2*d_student -> 2*d_teacher
    * ``wv``/``bv``: value projector, d_teacher -> d_student
    * ``wst``/``bst``: student->teacher hidden projector, d_student -> d_teacher
    * ``we``/``wh``: teacher->student maps (d_student x d_teacher) for
      embeddings and hidden states respectively, applied transposed
    """

    def __init__(self, d_student: int, d_teacher: int, seed: int,
                 params: dict[str, np.ndarray] | None = None):
        self.d_student = d_student
        self.d_teacher = d_teacher
        if params is not None:
            self.params = params
            return
        rng = Rng(seed).child("projectors")
        self.params = {
            "wq": rng.normal(2 * d_student, 2 * d_teacher, 1.0 / np.sqrt(2 * d_student)),
            "bq": np.zeros((1, 2 * d_teacher)),
            "wv": rng.normal(d_teacher, d_student, 1.0 / np.sqrt(d_teacher)),
            "bv": np.zeros((1, d_student)),
            "wst": rng.normal(d_student, d_teacher, 1.0 / np.sqrt(d_student)),
            "bst": np.zeros((1, d_teacher)),
            "we": rng.normal(d_student, d_teacher, 1.0 / np.sqrt(d_teacher)),
            "wh": rng.normal(d_student, d_teacher, 1.0 / np.sqrt(d_teacher)),
        }

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def to_namespaced(self) -> dict[str, np.ndarray]:
        return {f"proj/{k}": v for k, v in self.params.items()}

    @classmethod
    def from_namespaced(cls, d_student: int, d_teacher: int,
                        tensors: dict[str, np.ndarray]) -> "ProjectorSet":
        params = {k.removeprefix("proj/"): v for k, v in tensors.items()}
        missing = {"wq", "bq", "wv", "bv", "wst", "bst", "we", "wh"} - set(params)
        if missing:
            raise UsageError(f"checkpoint lacks projector tensors: {sorted(missing)}")
        return cls(d_student, d_teacher, seed=0, params=params)


@dataclass
class CmaResult:
    """Forward cache of the attention build."""

    query: np.ndarray       # (S, 2*d_teacher)
    key: np.ndarray         # (T, 2*d_teacher), normalized teacher concat
    scale: float
    attention: np.ndarray   # (S, T) student->teacher, rows sum to 1
    reverse: np.ndarray     # (T, S)
    student_concat: np.ndarray


def build_cma(
    embed_student: np.ndarray,
    target_embed_student: np.ndarray,
    embed_teacher: np.ndarray,
    target_embed_teacher: np.ndarray,
    proj: ProjectorSet,
) -> CmaResult:
    if embed_student.shape[0] == 0 or embed_teacher.shape[0] == 0:
        raise UsageError("cannot build attention over an empty sequence")
    student_concat = np.concatenate([embed_student, target_embed_student], axis=1)
    query = student_concat @ proj.params["wq"] + proj.params["bq"]
    teacher_concat = np.concatenate([embed_teacher, target_embed_teacher], axis=1)
    key = row_std_normalize(teacher_concat)
    scale = float(np.sqrt(key.shape[1]))
    attention = softmax_rows(query @ key.T / scale)
    reverse = softmax_rows(key @ query.T / scale)
    return CmaResult(
        query=query,
        key=key,
        scale=scale,
        attention=attention,
        reverse=reverse,
        student_concat=student_concat,
    )


def cma_backward(
    res: CmaResult,
    d_attention: np.ndarray,
    d_reverse: np.ndarray,
    proj: ProjectorSet,
    proj_grads: dict[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Chain attention grads into the query projector and student embeddings.

    Returns (d_embed_student, d_target_embed_student); the key side is a
    pure function of frozen teacher tensors and is dropped.
    """
    d_query = np.zeros_like(res.query)
    if d_attention is not None:
        d_scores = softmax_rows_backward(res.attention, d_attention)
        d_query += d_scores @ res.key / res.scale
    if d_reverse is not None:
        d_scores_rev = softmax_rows_backward(res.reverse, d_reverse)
        d_query += d_scores_rev.T @ res.key / res.scale
    proj_grads["wq"] += res.student_concat.T @ d_query
    proj_grads["bq"] += d_query.sum(axis=0, keepdims=True)
    d_concat = d_query @ proj.params["wq"].T
    d_s = res.student_concat.shape[1] // 2
    return d_concat[:, :d_s], d_concat[:, d_s:]


@dataclass
class DualProjResult:
    """Forward cache of both projected distributions."""

    value_input: np.ndarray   # (T, d_teacher) normalized teacher mix
    value: np.ndarray         # (T, d_student)
    aligned_to_student: np.ndarray  # (S, d_student)
    logits_to_student: np.ndarray   # (S, vocab_student)
    p_teacher_to_student: np.ndarray
    projected_student: np.ndarray   # (S, d_teacher)
    aligned_to_teacher: np.ndarray  # (T, d_teacher)
    logits_to_teacher: np.ndarray   # (T, vocab_teacher)
    p_student_to_teacher: np.ndarray
    temperature: float


def project_dual(
    cma: CmaResult,
    hidden_student: np.ndarray,
    target_embed_teacher: np.ndarray,
    hidden_teacher: np.ndarray,
    student_head: np.ndarray,
    teacher_head: np.ndarray,
    proj: ProjectorSet,
    temperature: float,
) -> DualProjResult:
    """Produce both cross-space distributions at the shared temperature.

    Student space: attention-mixed teacher values through the student
    head.  Teacher space: reverse-aligned projected student hiddens
    through the frozen teacher head.
    """
    if student_head.shape[0] != proj.d_student or teacher_head.shape[0] != proj.d_teacher:
        raise UsageError("output head width does not match projector widths")
    value_input = row_std_normalize(target_embed_teacher) + row_std_normalize(hidden_teacher)
    value = value_input @ proj.params["wv"] + proj.params["bv"]
    aligned_to_student = cma.attention @ value
    logits_to_student = aligned_to_student @ student_head
    p_ts = softmax_rows(logits_to_student, temperature)

    projected_student = hidden_student @ proj.params["wst"] + proj.params["bst"]
    aligned_to_teacher = cma.reverse @ projected_student
    logits_to_teacher = aligned_to_teacher @ teacher_head
    p_st = softmax_rows(logits_to_teacher, temperature)
    return DualProjResult(
        value_input=value_input,
        value=value,
        aligned_to_student=aligned_to_student,
        logits_to_student=logits_to_student,
        p_teacher_to_student=p_ts,
        projected_student=projected_student,
        aligned_to_teacher=aligned_to_teacher,
        logits_to_teacher=logits_to_teacher,
        p_student_to_teacher=p_st,
        temperature=temperature,
    )


def project_dual_backward(
    cma: CmaResult,
    dual: DualProjResult,
    hidden_student: np.ndarray,
    d_logits_to_student: np.ndarray,
    d_logits_to_teacher: np.ndarray,
    student_head: np.ndarray,
    teacher_head: np.ndarray,
    proj: ProjectorSet,
    proj_grads: dict[str, np.ndarray],
):
    """Backward for both projected distributions.

    Returns (d_attention, d_reverse, d_hidden_student, d_student_head).
    The teacher head and all raw teacher tensors stay gradient-free.
    """
    d_student_head = dual.aligned_to_student.T @ d_logits_to_student
    d_aligned_ts = d_logits_to_student @ student_head.T
    d_attention = d_aligned_ts @ dual.value.T
    d_value = cma.attention.T @ d_aligned_ts
    proj_grads["wv"] += dual.value_input.T @ d_value
    proj_grads["bv"] += d_value.sum(axis=0, keepdims=True)

    d_aligned_st = d_logits_to_teacher @ teacher_head.T
    d_reverse = d_aligned_st @ dual.projected_student.T
    d_projected = cma.reverse.T @ d_aligned_st
    proj_grads["wst"] += hidden_student.T @ d_projected
    proj_grads["bst"] += d_projected.sum(axis=0, keepdims=True)
    d_hidden_student = d_projected @ proj.params["wst"].T
    return d_attention, d_reverse, d_hidden_student, d_student_head


def project_teacher_reprs(
    embed_teacher: np.ndarray,
    hidden_teacher: np.ndarray,
    proj: ProjectorSet,
) -> tuple[np.ndarray, np.ndarray]:
    """Map teacher embeddings and hidden states into the student width."""
    if embed_teacher.shape[1] != proj.d_teacher:
        raise UsageError(
            f"teacher width {embed_teacher.shape[1]} != projector width {proj.d_teacher}"
        )
    return embed_teacher @ proj.params["we"].T, hidden_teacher @ proj.params["wh"].T


def project_teacher_reprs_backward(
    embed_teacher: np.ndarray,
    hidden_teacher: np.ndarray,
    d_embed_proj: np.ndarray,
    d_hidden_proj: np.ndarray,
    proj_grads: dict[str, np.ndarray],
) -> None:
    """Accumulate gradients for the two width-bridging maps."""
    proj_grads["we"] += d_embed_proj.T @ embed_teacher
    proj_grads["wh"] += d_hidden_proj.T @ hidden_teacher
