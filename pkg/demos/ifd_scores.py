"""
Scoring instruction difficulty
==============================

A weak n-gram model reads a handful of prompt/answer pairs. We then ask, for
each answer, how much the prompt helps predict it: the conditioned answer
score (CA) against the direct answer score (DA), and their ratio, IFD.
"""

from cherry.dataset import RenderedPair, Sample, get_template, render
from cherry.ifd import filter_misaligned, score_pair
from cherry.scorer import fit_ngram

template = get_template("alpaca")

train = [
    Sample("t1", "Name a planet in our solar system", "Mars is a planet."),
    Sample("t2", "Name a color of the rainbow", "Green is a color of the rainbow."),
    Sample("t3", "Give a word for happy", "Joyful means happy."),
]
model = fit_ngram([render(s, template) for s in train], n=3, k=0.1)
print("model:", model.fingerprint)

# Three kinds of answers: one that echoes the prompt, one that ignores it,
# and one with no prompt at all (CA == DA, so IFD is exactly 1).
probes = [
    Sample("p1", "Name a planet in our solar system", "Mars is a planet."),
    Sample("p2", "Name a planet in our solar system", "Joyful means happy."),
]
records = [score_pair(model, s.id, render(s, template)) for s in probes]
records.append(score_pair(model, "p3", RenderedPair("", "Mars is a planet.")))

for r in records:
    print(f"{r.sample_id}: CA={r.ca:.3f}  DA={r.da:.3f}  IFD={r.ifd:.3f}")

# IFD above 1 means the prompt made the answer *harder* to predict; those
# pairs are dropped before any top-IFD selection.
kept, dropped = filter_misaligned(records)
print("kept:", [r.sample_id for r in kept], "dropped:", [r.sample_id for r in dropped])
