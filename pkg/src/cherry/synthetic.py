"""Deterministic toy instruction corpora for tests, demos and smoke runs.

The generator mixes a few recognisable regimes so IFD scores spread out:
answers that echo their instruction's topic (instruction helps, low IFD),
generic answers (instruction helps little), and a slice of deliberately
mismatched pairs whose answer belongs to another topic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import Sample

TOPICS = {
    "astronomy": "star planet orbit galaxy telescope comet nebula gravity moon light",
    "cooking": "flour oven salt butter recipe simmer garlic onion pan bake",
    "finance": "budget interest loan savings market stock inflation credit tax bond",
    "gardening": "soil seed water compost tomato prune sunlight root weed harvest",
    "music": "melody chord rhythm guitar tempo scale piano harmony lyric beat",
    "medicine": "symptom dose fever vaccine doctor patient virus cell blood heart",
    "programming": "function variable loop python compile debug array string class module",
    "history": "empire war treaty king revolution century archive dynasty trade border",
    "sports": "team goal coach match score league player season training referee",
    "travel": "flight hotel passport luggage ticket beach museum tour map visa",
}

TASKS = [
    "Explain {t} to a beginner",
    "Write a short paragraph about {t}",
    "List three facts about {t}",
    "Give advice on {t}",
    "Describe a common problem in {t}",
    "Summarize the basics of {t}",
]
FILLER = "the a of and to is in that it for with as on be this are by".split()


def make_corpus(n: int = 1000, seed: int = 0, misaligned_fraction: float = 0.1) -> list[Sample]:
    rng = np.random.Generator(np.random.PCG64(seed))
    names = list(TOPICS)
    vocab = {t: TOPICS[t].split() for t in names}
    samples = []
    for i in range(n):
        topic = names[int(rng.integers(len(names)))]
        task = TASKS[int(rng.integers(len(TASKS)))]
        focus = list(rng.choice(vocab[topic], size=3, replace=False))
        instruction = task.format(t=topic) + ", focusing on " + " and ".join(focus) + "."
        inp = ""
        if rng.random() < 0.3:
            inp = "Context: " + " ".join(rng.choice(vocab[topic], size=4))
        answer_topic = topic
        if rng.random() < misaligned_fraction:
            answer_topic = names[(names.index(topic) + 1 + int(rng.integers(len(names) - 1))) % len(names)]
        length = int(rng.integers(8, 40))
        echo = rng.random()
        words = []
        for _ in range(length):
            u = rng.random()
            if answer_topic == topic and u < 0.25 * echo:
                words.append(focus[int(rng.integers(3))])
            elif u < 0.6:
                words.append(vocab[answer_topic][int(rng.integers(10))])
            else:
                words.append(FILLER[int(rng.integers(len(FILLER)))])
        output = " ".join(words).capitalize() + "."
        samples.append(Sample(id=str(i).zfill(6), instruction=instruction, input=inp, output=output))
    return samples


def write_corpus(path: str | Path, n: int = 1000, seed: int = 0) -> Path:
    path = Path(path)
    rows = [{"instruction": s.instruction, "input": s.input, "output": s.output}
            for s in make_corpus(n, seed)]
    path.write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    return path
