"""
Where do high-IFD samples live?
===============================

After a pipeline run, summarize the IFD distribution, count how the top and
bottom 5% spread over the instruction clusters, and project the embeddings
to 2-D for plotting.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from cherry import cli
from cherry.pipeline import PipelineConfig, run_pipeline
from cherry.synthetic import write_corpus

work = Path(tempfile.mkdtemp(prefix="cherry-landscape-"))
corpus = write_corpus(work / "corpus.json", n=600, seed=5)
run_pipeline(PipelineConfig(input_path=str(corpus), output_path=str(work / "cherry.json"),
                            cache_dir=str(work / "cache"), seed=1, clusters_k=20))

# same thing the `cherry analyze` command does
cli.main(["analyze", "--cache-dir", str(work / "cache"), "--q", "0.05"])
report = json.loads((work / "cache" / "analysis" / "report.json").read_text())
print({k: round(v, 3) if isinstance(v, float) else v for k, v in report["stats"].items()})

dens = sorted(report["cluster_density"], key=lambda c: -c["density_top"])
print("clusters richest in top-IFD samples:")
for c in dens[:3]:
    print("   cluster %(cluster)d: size %(size)d, top %(count_top)d, bottom %(count_bottom)d" % c)

xy = np.genfromtxt(work / "cache" / "analysis" / "projection.csv", delimiter=",",
                   names=True, dtype=None, encoding="utf-8")
print("projection rows:", len(xy), " x range: %.2f..%.2f" % (xy["x"].min(), xy["x"].max()))
