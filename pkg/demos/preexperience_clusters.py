"""
Picking a small, diverse warm-up set
====================================

Instructions are embedded with a hashed bag of tokens, grouped with k-means,
and a few members are drawn from every cluster. This is the "brief experience"
the scorer sees before judging the full dataset.
"""

import numpy as np

from cherry.dataset import get_template, render
from cherry.diversity import EmbeddingSet, kmeans, sample_per_cluster
from cherry.scorer import HashEmbedder
from cherry.synthetic import make_corpus

samples = make_corpus(n=400, seed=3)
template = get_template("alpaca")
embedder = HashEmbedder(dim=256)

x = np.vstack([embedder.embed(render(s, template).question_text) for s in samples])
emb = EmbeddingSet([s.id for s in samples], x)
print("embedding matrix:", emb.matrix.shape)

assignment = kmeans(emb, k=10, seed=0)
print("cluster sizes:", assignment.sizes().tolist())

# inertia never goes up: every assignment and update step can only help
h = assignment.history
print("inertia: %.2f -> %.2f over %d steps" % (h[0], h[-1], len(h)))

picked = sample_per_cluster(assignment, emb.ids, m=5, seed=0)
print(len(picked), "warm-up samples, e.g.")
by_id = {s.id: s for s in samples}
for sid in picked[:5]:
    print("  ", by_id[sid].instruction)
