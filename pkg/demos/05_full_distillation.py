"""End-to-end miniature run: corpus, teacher, three students, comparison.

Uses a deliberately small budget so it finishes in about a minute; the
real study (the acceptance suite and the CLI) trains longer.  Shows the
full loss breakdown during distillation and the final generation
quality of supervised-only vs distilled students.
"""

import os
import tempfile
import warnings

import numpy as np

from warpdistill.config import RunConfig
from warpdistill.corpus import generate_corpus, split_corpus
from warpdistill.evaluate import evaluate_model, structure_distance
from warpdistill.tokenizers import CharTokenizer, PairTokenizer
from warpdistill.train import distill, pretrain_teacher

warnings.filterwarnings("ignore")

cfg = RunConfig(corpus_size=1500, teacher_epochs=4, epochs=10,
                train_limit=192, lr_model=2e-3, lambda_dtw=0.02,
                eval_limit=100)

pairs = generate_corpus(cfg.seed, cfg.corpus_size)
train, valid, test = split_corpus(pairs, cfg.valid_frac, cfg.test_frac)
texts = [p + r for p, r in train]
char_tok = CharTokenizer.train(texts)
pair_tok = PairTokenizer.train(texts, cfg.num_merges)
print(f"corpus: {len(train)} train lines; student vocab {char_tok.vocab.size}, "
      f"teacher vocab {pair_tok.vocab.size}")

with tempfile.TemporaryDirectory() as tmp:
    teacher, ppl, uni = pretrain_teacher(train, valid, pair_tok, cfg,
                                         os.path.join(tmp, "teacher.bin"))
print(f"teacher held-out perplexity {ppl:.2f} (unigram baseline {uni:.2f})")
print()

students = {}
for mode in ("sft", "dskd", "dwa"):
    art = distill(train, char_tok, pair_tok, teacher, cfg, mode)
    students[mode] = art.student
    last = art.breakdown_log[-1]
    print(f"{mode}: final losses  ce {last.ce:.3f}  kd_stu {last.kd_student:.3f}  "
          f"kd_tea {last.kd_teacher:.3f}  ce_proj {last.ce_projected:.3f}  "
          f"ndtw {last.ndtw_embed + last.ndtw_hidden:.3f}")
print()

print("generation quality (overlap F x 100, sampled at temperature 1):")
for mode, student in students.items():
    rep = evaluate_model(student, char_tok, test[: cfg.eval_limit],
                         seeds=[1, 2], max_new=cfg.eval_max_new)
    print(f"  {mode:<5} {rep.mean:6.2f}")
print()

print("representation-structure distance to the teacher (lower = closer),")
print("median over 30 held-out sentences:")
for mode, student in students.items():
    dists = [
        structure_distance(student, char_tok, teacher, pair_tok, p + r)
        for p, r in test[:30]
    ]
    print(f"  {mode:<5} cosine {np.median([d.d_cosine for d in dists]):7.2f}   "
          f"inner-product {np.median([d.d_prod for d in dists]):7.2f}")
