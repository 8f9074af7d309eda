"""Synthetic instruction corpus: compositional word-list tasks.

Version 1 emits prompts of the form ``"<op> w1 ... wk = "`` with k in
{2, 3} drawn over a fixed 12-word inventory, and the response the op
implies: ``copy`` repeats the list, ``rev`` reverses it, ``first`` and
``last`` select one word.  Small enough for a two-layer teacher to
master, structured enough that overlap metrics against references are
meaningful, and word-based so hidden states can be pooled per word.

All (op, word-tuple) combinations are enumerated, shuffled with the run
seed, deduplicated by construction, and split train/valid/test by the
configured fractions (floor for valid and test, remainder to train).

Lines are stored as TSV: prompt TAB response.
"""

from __future__ import annotations

import itertools

from .errors import UsageError
from .numerics import Rng

CORPUS_VERSION = 1

WORDS = ["ab", "cd", "ef", "gh", "ij", "kl", "mn", "op", "qr", "st", "uv", "wx"]

OPS = {
    "copy": lambda ws: list(ws),
    "rev": lambda ws: list(reversed(ws)),
    "first": lambda ws: [ws[0]],
    "last": lambda ws: [ws[-1]],
}


def make_pair(op: str, words: tuple[str, ...]) -> tuple[str, str]:
    prompt = f"{op} {' '.join(words)} = "
    response = " ".join(OPS[op](words))
    return prompt, response


def generate_corpus(seed: int, size: int) -> list[tuple[str, str]]:
    """Deterministically sample ``size`` distinct task instances."""
    combos = [
        (op, words)
        for op in sorted(OPS)
        for k in (2, 3)
        for words in itertools.product(WORDS, repeat=k)
    ]
    if size > len(combos):
        raise UsageError(f"corpus size {size} exceeds the {len(combos)} distinct instances")
    rng = Rng(seed).child("corpus")
    rng.shuffle(combos)
    return [make_pair(op, words) for op, words in combos[:size]]


def split_corpus(
    pairs: list[tuple[str, str]], valid_frac: float, test_frac: float
) -> tuple[list, list, list]:
    """Floor-sized valid and test splits, remainder to train."""
    n = len(pairs)
    n_valid = int(n * valid_frac)
    n_test = int(n * test_frac)
    n_train = n - n_valid - n_test
    if min(n_train, n_valid, n_test) < 1:
        raise UsageError("split fractions leave an empty split")
    return (
        pairs[:n_train],
        pairs[n_train : n_train + n_valid],
        pairs[n_train + n_valid :],
    )


def save_pairs(path, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w") as fh:
        for prompt, response in pairs:
            fh.write(f"{prompt}\t{response}\n")


def load_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            prompt, response = line.rstrip("\n").split("\t")
            pairs.append((prompt, response))
    return pairs


def unigram_perplexity(train_pairs, heldout_pairs, tokenizer) -> float:
    """Perplexity of a Laplace-smoothed unigram model fit on train targets.

    The target stream of a line is its full encoding minus the leading
    bos, matching what the next-token model is scored on.
    """
    import numpy as np

    counts = np.ones(tokenizer.vocab.size)  # add-one smoothing
    total = float(tokenizer.vocab.size)
    for prompt, response in train_pairs:
        ids = tokenizer.encode(prompt + response).ids[1:]
        for t in ids:
            counts[t] += 1
        total += len(ids)
    logp = np.log(counts / total)
    nll, n = 0.0, 0
    for prompt, response in heldout_pairs:
        ids = tokenizer.encode(prompt + response).ids[1:]
        nll -= sum(logp[t] for t in ids)
        n += len(ids)
    if n == 0:
        raise UsageError("no held-out tokens to score")
    return float(np.exp(nll / n))
