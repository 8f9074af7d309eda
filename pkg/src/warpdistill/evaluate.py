"""Generation quality and representation-structure evaluation.

Scoring is longest-common-subsequence overlap over whitespace tokens
with a recall-weighted F-measure.  Generation follows the evaluation
protocol used throughout: ancestral sampling at temperature 1.0 and
top_p 1.0, repeated over several seeds, reporting the per-seed mean.

The structure study compares how far the student's token-to-token
similarity geometry is from the teacher's.  The two models tokenize the
same text differently, so hidden states are mean-pooled per whitespace
word first; both models then yield an n x n similarity matrix over the
same n words and we take the L1 distance between them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .model import TinyLm
from .numerics import Rng
from .tokenizers import BOS

__all__ = [
    "rouge_l",
    "evaluate_model",
    "EvalReport",
    "pool_hidden_by_words",
    "structure_matrices",
    "structure_distance",
    "StructureDistance",
]


def _lcs_len(a: list[str], b: list[str]) -> int:
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                dp[i, j] = dp[i - 1, j - 1] + 1
            else:
                dp[i, j] = max(dp[i - 1, j], dp[i, j - 1])
    return int(dp[len(a), len(b)])


def rouge_l(candidate: str, reference: str, beta: float = 1.2) -> float:
    """LCS F-measure over whitespace tokens, recall-weighted by beta^2.

    F = (1 + beta^2) R P / (R + beta^2 P); empty sides score 0 with a
    warning rather than raising, since sampling can produce empty text.
    """
    cand = candidate.split()
    ref = reference.split()
    if not cand or not ref:
        warnings.warn("rouge_l: empty candidate or reference; scoring 0")
        return 0.0
    lcs = _lcs_len(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    b2 = beta * beta
    return (1.0 + b2) * recall * precision / (recall + b2 * precision)


@dataclass
class EvalReport:
    per_seed: list[float]  # mean score per generation seed, in percent
    mean: float            # mean of per-seed means, in percent


def evaluate_model(
    model: TinyLm,
    tokenizer,
    pairs,
    seeds,
    max_new: int,
    rouge_beta: float = 1.2,
    temperature: float = 1.0,
    top_p: float = 1.0,
) -> EvalReport:
    """Generate a response per prompt per seed; report mean overlap (x100)."""
    prompts = []
    for prompt, response in pairs:
        body = tokenizer.encode_body(prompt)
        prompts.append((prompt, [BOS] + body, response))
    per_seed = []
    for seed in seeds:
        base = Rng(seed).child("generate")
        scores = []
        for prompt_text, prompt_ids, reference in prompts:
            if len(prompt_ids) + 1 > model.cfg.context:
                continue
            # one stream per prompt, so scoring is order-invariant
            rng = base.child(prompt_text)
            out = model.generate(prompt_ids, max_new, rng,
                                 temperature=temperature, top_p=top_p)
            candidate = tokenizer.decode_ids(out[len(prompt_ids):])
            scores.append(rouge_l(candidate, reference, rouge_beta))
        if not scores:
            raise UsageError("no prompt fits the model context")
        per_seed.append(100.0 * float(np.mean(scores)))
    return EvalReport(per_seed=per_seed, mean=float(np.mean(per_seed)))


def pool_hidden_by_words(model: TinyLm, tokenizer, text: str) -> np.ndarray:
    """Run the model on the text and mean-pool hidden states per word.

    Tokens are assigned to whitespace words by walking the decoded
    strings; space tokens separate words and are dropped.  Needs at
    least two words to yield a comparable structure.
    """
    body = tokenizer.encode_body(text)
    trace = model.forward([BOS] + body)
    hidden = trace.hidden[1:]  # rows for the body tokens
    word_idx: list[int] = []
    cursor = 0
    current = 0
    for tid in body:
        tok = tokenizer.vocab.tokens[tid]
        if tok == " ":
            current += 1
            cursor += 1
            word_idx.append(-1)
            continue
        if text[cursor : cursor + len(tok)] != tok:
            raise UsageError(f"token {tok!r} does not match text at offset {cursor}")
        word_idx.append(current)
        cursor += len(tok)
    n_words = current + 1
    if n_words < 2:
        raise UsageError("need at least two words to compare structure")
    pooled = np.zeros((n_words, hidden.shape[1]))
    counts = np.zeros(n_words)
    for row, w in enumerate(word_idx):
        if w >= 0:
            pooled[w] += hidden[row]
            counts[w] += 1
    if (counts == 0).any():
        raise UsageError("a word received no tokens during pooling")
    return pooled / counts[:, None]


def structure_matrices(hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and normalized-inner-product similarity matrices."""
    dots = hidden @ hidden.T
    norms = np.linalg.norm(hidden, axis=1)
    m_cosine = dots / np.maximum(norms[:, None] * norms[None, :], 1e-12)
    row_sums = dots.sum(axis=1, keepdims=True)
    guard = np.where(np.abs(row_sums) < 1e-12, 1e-12, row_sums)
    m_prod = dots / guard
    return m_cosine, m_prod


@dataclass
class StructureDistance:
    d_cosine: float
    d_prod: float


def structure_distance(
    student: TinyLm, student_tok, teacher: TinyLm, teacher_tok, text: str
) -> StructureDistance:
    """L1 distance between teacher and student structure matrices."""
    hs = pool_hidden_by_words(student, student_tok, text)
    ht = pool_hidden_by_words(teacher, teacher_tok, text)
    if hs.shape[0] != ht.shape[0]:
        raise UsageError("word pooling produced different counts")
    cs, ps = structure_matrices(hs)
    ct, pt = structure_matrices(ht)
    return StructureDistance(
        d_cosine=float(np.abs(ct - cs).sum()),
        d_prod=float(np.abs(pt - ps).sum()),
    )
