"""Two tokenizers, one text: the mismatch everything else has to bridge.

The student reads character by character; the teacher first learns
greedy pair merges on the same corpus and then segments text into far
fewer, larger tokens.  Same string in, different sequence lengths and
different vocabularies out.
"""

from warpdistill.corpus import generate_corpus
from warpdistill.tokenizers import CharTokenizer, PairTokenizer

pairs = generate_corpus(seed=0, size=500)
texts = [p + r for p, r in pairs]

student_tok = CharTokenizer.train(texts)
teacher_tok = PairTokenizer.train(texts, num_merges=72)

print(f"student vocabulary: {student_tok.vocab.size} ids (characters)")
print(f"teacher vocabulary: {teacher_tok.vocab.size} ids "
      f"({len(teacher_tok.merges)} learned merges)")
print()

print("first ten merges, in learned order:")
for a, b in teacher_tok.merges[:10]:
    print(f"  {a!r} + {b!r} -> {a + b!r}")
print()

for text in texts[:3]:
    s = student_tok.encode(text)
    t = teacher_tok.encode(text)
    t_tokens = [teacher_tok.vocab.tokens[i] for i in t.ids[1:-1]]
    print(f"text: {text!r}")
    print(f"  student: {len(s)} tokens (one per char, plus bos/eos)")
    print(f"  teacher: {len(t)} tokens -> {t_tokens}")
    assert student_tok.decode(s) == text
    assert teacher_tok.decode(t) == text
print()

ratios = [len(teacher_tok.encode(x)) / len(student_tok.encode(x)) for x in texts]
print(f"teacher/student length ratio over the corpus: "
      f"mean {sum(ratios) / len(ratios):.2f} (always < 1: merges only shorten)")
