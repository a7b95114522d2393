"""
End-to-end selection on a toy corpus
====================================

Run the whole pipeline on a generated corpus and compare what different
selection strategies keep.
"""

import json
import tempfile
from pathlib import Path

from cherry.ifd import HighCA, LowIFD, Random, TopIFD, read_scores, select
from cherry.pipeline import PipelineConfig, run_pipeline
from cherry.synthetic import write_corpus

work = Path(tempfile.mkdtemp(prefix="cherry-demo-"))
corpus = write_corpus(work / "corpus.json", n=1000, seed=0)

cfg = PipelineConfig(input_path=str(corpus), output_path=str(work / "cherry.json"),
                     cache_dir=str(work / "cache"), seed=0, fraction=0.05)
manifest = run_pipeline(cfg)
print(json.dumps(manifest.counts, indent=2))
print("time per phase:", {k: round(v, 2) for k, v in manifest.timings.items()})

# the score cache is plain JSON lines, so other strategies are cheap to try
records = read_scores(work / "cache" / "scores.jsonl")
ifd = {r.sample_id: r.ifd for r in records}
for strategy in (TopIFD(), LowIFD(), HighCA(), Random(seed=0)):
    ids = select(records, strategy, 0.05)
    mean = sum(ifd[i] for i in ids) / len(ids)
    print(f"{strategy.name:>8}: {len(ids)} samples, mean IFD {mean:.3f}")

first = json.loads((work / "cherry.json").read_text())[0]
print("first cherry sample:", first["instruction"])
print("outputs in", work)
