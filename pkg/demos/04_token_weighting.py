"""How the dual-space token weights redistribute the learning signal.

Student side: weight = (normalized student entropy) x (peak confidence
of the teacher distribution projected into the student vocabulary) --
large exactly where the student is unsure and the projected teacher is
reliable.  Teacher side: weight = 1 - normalized teacher entropy.
Weights are then rescaled to sum to the number of scored positions.
"""

import numpy as np

from warpdistill.numerics import Rng, softmax_rows
from warpdistill.weighting import normalize_weights, student_weights, teacher_weights

rng = Rng(7)
vocab = 9
positions = 6

# synthetic distributions: three sharp student rows, three flat ones
logits = rng.normal(positions, vocab)
logits[0] *= 6.0
logits[2] *= 6.0
logits[5] *= 6.0
p_student = softmax_rows(logits)

proj_logits = rng.normal(positions, vocab)
proj_logits[1] *= 5.0  # teacher is confident at position 1
proj_logits[3] *= 5.0
p_projected = softmax_rows(proj_logits)

raw = student_weights(p_student, p_projected)
w = normalize_weights(raw, positions)
print("student-side weights (entropy x gate, rescaled to sum to 6):")
print(f"{'pos':>4} {'entropy':>9} {'gate':>7} {'raw':>8} {'weight':>8}")
from warpdistill.weighting import entropy_rows

ent = entropy_rows(p_student) / np.log(vocab)
gate = p_projected.max(axis=1)
for i in range(positions):
    print(f"{i:>4} {ent[i]:>9.3f} {gate[i]:>7.3f} {raw[i]:>8.4f} {w[i]:>8.4f}")
print(f"sum of weights: {w.sum():.6f}")
print()

teacher_logits = rng.normal(4, 13)
teacher_logits[0] *= 8.0  # one confident row
p_teacher = softmax_rows(teacher_logits)
wt = teacher_weights(p_teacher)
print("teacher-side weights (1 - normalized entropy, in [0, 1]):")
for j, v in enumerate(wt):
    print(f"  position {j}: {v:.3f}")
print()
print("a uniform teacher row would get weight 0; if every row were uniform,")
print("normalization falls back to all-ones:", normalize_weights(np.zeros(4), 4))
