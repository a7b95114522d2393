import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cherry.dataset import PromptTemplate, RenderedPair, Sample
from cherry.diversity import EmbeddingSet
from cherry.errors import ConfigError, DataError, DomainError, EmptyAnswerError
from cherry.ifd import (DA_FLOOR_FLAG, Diversity, HighCA, LowIFD, Random, ScoreRecord, TopIFD,
                        conditioned_answer_score, direct_answer_score, filter_misaligned, ifd_ratio,
                        parse_strategy, score_dataset, score_pair, select, write_selection,
                        SelectionManifest)
from cherry.scorer import fit_ngram, uniform_model

from oracles import full_sort_select, mean_nll, ngram_logprobs

PLAIN = PromptTemplate("plain", "{instruction}\n{input}", "{instruction}")


def rec(i, ifd, ca=None, da=1.0):
    ca = ifd * da if ca is None else ca
    return ScoreRecord(f"{i:04d}", da, ca, ifd, 3, "fp")


# --- CA / DA --------------------------------------------------------------

def test_uniform_scorer_ca_equals_da_equals_log_v():
    model = uniform_model(["x", "y", "z", "w"])  # V = 6 with reserved tokens
    pair = RenderedPair("some question", "x y q")
    ca, n = conditioned_answer_score(model, pair)
    da, _ = direct_answer_score(model, pair)
    assert n == 3
    assert ca == pytest.approx(math.log(6), abs=1e-12)
    assert da == pytest.approx(math.log(6), abs=1e-12)


def test_hand_computed_bigram_ca_and_da():
    model = fit_ngram([RenderedPair("a b", "c")], n=2, k=0.1)
    pair = RenderedPair("a", "b c")
    ca, _ = conditioned_answer_score(model, pair)
    da, _ = direct_answer_score(model, pair)
    # CA: P(b|a) = P(c|b) = 1.1/1.5.  DA: P(b|<bos>) = 0.1/1.5, P(c|b) = 1.1/1.5.
    assert ca == pytest.approx(-math.log(1.1 / 1.5), abs=1e-15)
    assert da == pytest.approx(-(math.log(0.1 / 1.5) + math.log(1.1 / 1.5)) / 2, abs=1e-15)
    seqs = [["a", "b", "c"]]
    assert ca == pytest.approx(mean_nll(ngram_logprobs(seqs, 2, 0.1, ["a"], ["b", "c"])), abs=1e-12)
    assert da == pytest.approx(mean_nll(ngram_logprobs(seqs, 2, 0.1, [], ["b", "c"])), abs=1e-12)


def test_empty_answer_errors():
    model = fit_ngram([RenderedPair("a", "b")])
    with pytest.raises(EmptyAnswerError):
        conditioned_answer_score(model, RenderedPair("a", "..."))


def test_empty_question_gives_identical_scores():
    model = fit_ngram([RenderedPair("a b c", "d e f"), RenderedPair("d", "a b")], n=3)
    r = score_pair(model, "s", RenderedPair("", "a b d e"))
    assert r.ca == r.da
    assert r.ifd == 1.0


# --- ratio ----------------------------------------------------------------

@pytest.mark.parametrize("ca, da, expected", [
    (0.601, 6.593, 0.0912),
    (0.026, 0.497, 0.0523),
    (0.599, 1.667, 0.3593),
])
def test_ifd_ratio_appendix_values(ca, da, expected):
    ifd, flags = ifd_ratio(ca, da)
    assert ifd == pytest.approx(expected, abs=5e-5)
    assert flags == ()


def test_ifd_ratio_identity():
    assert ifd_ratio(2.5, 2.5) == (1.0, ())


def test_ifd_ratio_floor_is_flagged():
    ifd, flags = ifd_ratio(0.5, 0.0)
    assert ifd == 0.5 / 1e-8
    assert flags == (DA_FLOOR_FLAG,)


def test_ifd_ratio_rejects_negative():
    with pytest.raises(DomainError):
        ifd_ratio(-0.1, 1.0)
    with pytest.raises(DomainError):
        ifd_ratio(0.1, float("nan"))


# --- dataset scoring and cache ------------------------------------------

class CountingScorer:
    def __init__(self, model):
        self.model = model
        self.fingerprint = model.fingerprint
        self.calls = 0

    def score_continuation(self, context, continuation):
        self.calls += 1
        return self.model.score_continuation(context, continuation)


@pytest.fixture
def samples():
    return [Sample(f"{i:06d}", f"instruction {i} about cats", f"answer {i} cats purr loudly")
            for i in range(3)]


@pytest.fixture
def scorer(samples):
    from cherry.dataset import render
    return CountingScorer(fit_ngram([render(s, PLAIN) for s in samples], n=2))


def test_second_run_is_all_cache_hits(tmp_path, samples, scorer):
    cache = tmp_path / "scores.jsonl"
    first = score_dataset(scorer, samples, PLAIN, cache)
    calls = scorer.calls
    second = score_dataset(scorer, samples, PLAIN, cache)
    assert calls == 6
    assert scorer.calls == calls
    assert first == second


def test_partial_cache_scores_only_missing(tmp_path, samples, scorer):
    cache = tmp_path / "scores.jsonl"
    score_dataset(scorer, samples[:1], PLAIN, cache)
    scorer.calls = 0
    records = score_dataset(scorer, samples, PLAIN, cache)
    assert scorer.calls == 4  # two samples x (CA + DA)
    assert [r.sample_id for r in records] == [s.id for s in samples]


def test_corrupt_line_is_skipped_and_rescored(tmp_path, samples, scorer, caplog):
    cache = tmp_path / "scores.jsonl"
    fresh = score_dataset(scorer, samples, PLAIN, cache)
    lines = cache.read_text().splitlines()
    lines[1] = lines[1][:25]  # truncated JSON
    cache.write_text("\n".join(lines) + "\n")
    scorer.calls = 0
    again = score_dataset(scorer, samples, PLAIN, cache)
    assert scorer.calls == 2
    assert again == fresh
    assert "corrupt" in caplog.text


def test_truncated_tail_does_not_swallow_next_append(tmp_path, samples, scorer):
    cache = tmp_path / "scores.jsonl"
    score_dataset(scorer, samples[:2], PLAIN, cache)
    with open(cache, "a") as fh:
        fh.write('{"sample_id": "000002", "da"')
    records = score_dataset(scorer, samples, PLAIN, cache)
    assert len(records) == 3
    assert score_dataset(scorer, samples, PLAIN, cache) == records


def test_mismatched_fingerprint_entries_ignored(tmp_path, samples, scorer, caplog):
    cache = tmp_path / "scores.jsonl"
    score_dataset(scorer, samples, PLAIN, cache)
    other = CountingScorer(fit_ngram([RenderedPair("zz", "yy")], n=2))
    score_dataset(other, samples, PLAIN, cache)
    assert other.calls == 6
    assert "different scorer" in caplog.text


def test_cached_records_are_bit_identical(tmp_path, samples, scorer):
    cache = tmp_path / "scores.jsonl"
    fresh = score_dataset(scorer, samples, PLAIN, None)
    score_dataset(scorer, samples, PLAIN, cache)
    cached = score_dataset(scorer, samples, PLAIN, cache)
    assert cached == fresh
    for line in cache.read_text().splitlines():
        assert set(json.loads(line)) == {"sample_id", "da", "ca", "ifd", "n_answer_tokens",
                                         "scorer_fingerprint", "flags"}


def test_parallel_scoring_matches_serial(tmp_path, samples, scorer):
    many = [Sample(f"{i:06d}", f"ask {i} cats", f"cats answer {i % 5} purr") for i in range(40)]
    serial = score_dataset(scorer, many, PLAIN, None)
    parallel = score_dataset(scorer, many, PLAIN, tmp_path / "p.jsonl", parallelism=4)
    assert parallel == serial


# --- filter ---------------------------------------------------------------

def test_filter_boundary():
    recs = [rec(0, 0.9), rec(1, 1.0), rec(2, 1.1)]
    kept, dropped = filter_misaligned(recs)
    assert [r.ifd for r in kept] == [0.9, 1.0]
    assert [r.ifd for r in dropped] == [1.1]


def test_filter_all_aligned():
    kept, dropped = filter_misaligned([rec(i, 0.1 * i) for i in range(5)])
    assert len(kept) == 5 and dropped == []


@settings(max_examples=100)
@given(st.lists(st.floats(0, 2), max_size=50))
def test_filter_partitions_input(values):
    recs = [rec(i, v) for i, v in enumerate(values)]
    kept, dropped = filter_misaligned(recs)
    assert sorted(r.sample_id for r in kept + dropped) == [r.sample_id for r in recs]
    assert not set(kept) & set(dropped)
    assert [r for r in recs if r in kept] == kept


# --- selection ------------------------------------------------------------

def test_top_two_of_ten():
    recs = [rec(i, 0.1 * i) for i in range(10)]
    assert select(recs, TopIFD(), 0.2) == ["0008", "0009"]


def test_fraction_one_returns_all_aligned():
    recs = [rec(i, v) for i, v in enumerate([0.5, 1.2, 0.7, 1.0])]
    assert select(recs, TopIFD(), 1.0) == ["0000", "0002", "0003"]


def test_low_is_reverse_of_top_without_ties():
    values = [0.31, 0.12, 0.95, 0.44, 0.67, 0.08]
    recs = [rec(i, v) for i, v in enumerate(values)]
    low = select(recs, LowIFD(), 0.5)
    top = select(recs, TopIFD(), 0.5)
    assert set(low) | set(top) == {r.sample_id for r in recs}
    assert not set(low) & set(top)


def test_high_ca_uses_ca():
    recs = [rec(0, 0.5, ca=3.0), rec(1, 0.9, ca=1.0), rec(2, 0.1, ca=2.0)]
    assert select(recs, HighCA(), 0.5) == ["0000", "0002"]


def test_fraction_must_be_in_range():
    with pytest.raises(ConfigError):
        select([rec(0, 0.5)], TopIFD(), 0.0)
    with pytest.raises(ConfigError):
        select([rec(0, 0.5)], TopIFD(), 1.5)


def test_target_uses_original_dataset_size(caplog):
    recs = [rec(i, 0.5 + 0.01 * i) for i in range(10)]
    assert len(select(recs, TopIFD(), 0.5, dataset_size=100)) == 10
    assert "only 10 aligned" in caplog.text


def test_random_strategy_seeded():
    recs = [rec(i, 0.5) for i in range(50)]
    a = select(recs, Random(3), 0.2)
    assert a == select(recs, Random(3), 0.2)
    assert a != select(recs, Random(4), 0.2)
    assert len(a) == 10 and a == sorted(a)


def test_diversity_strategy_round_robin():
    rng = np.random.default_rng(0)
    centers = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    x = np.repeat(centers, 10, axis=0) + rng.normal(scale=0.01, size=(30, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    recs = [rec(i, 0.5) for i in range(30)]
    emb = EmbeddingSet([r.sample_id for r in recs], x)
    picked = select(recs, Diversity(k=3, seed=1), 0.1, embeddings=emb)
    assert len(picked) == 3
    assert sorted(int(p) // 10 for p in picked) == [0, 1, 2]
    with pytest.raises(ConfigError):
        select(recs, Diversity(3, 1), 0.1)


def test_parse_strategy():
    assert parse_strategy("top-ifd") == TopIFD()
    assert parse_strategy("random", seed=5) == Random(5)
    assert parse_strategy("diversity", seed=2, k=7) == Diversity(7, 2)
    with pytest.raises(ConfigError):
        parse_strategy("best")


def random_records(rng, n):
    # coarse grid so duplicates are common
    ifd = [round(rng.uniform(0, 1.3), 1) for _ in range(n)]
    ca = [round(rng.uniform(0, 4), 1) for _ in range(n)]
    return [ScoreRecord(f"{i:05d}", 1.0, c, v, 1, "fp") for i, (v, c) in enumerate(zip(ifd, ca))]


@pytest.mark.parametrize("seed", range(20))
def test_selection_matches_full_sort(seed):
    rng = random.Random(seed)
    recs = random_records(rng, rng.randint(1, 1000))
    frac = rng.choice([0.05, 0.1, 0.33, 1.0])
    for name, strat in (("top_ifd", TopIFD()), ("low_ifd", LowIFD()), ("high_ca", HighCA())):
        want = full_sort_select([r.ifd for r in recs], [r.ca for r in recs], name, frac, len(recs))
        assert select(recs, strat, frac) == [recs[i].sample_id for i in want]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([0.1, 0.5, 0.9, 1.0, 1.1]), min_size=1, max_size=200),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_top_ifd_nesting(values, f1, f2):
    f1, f2 = sorted((f1, f2))
    recs = [rec(i, v) for i, v in enumerate(values)]
    small, large = select(recs, TopIFD(), f1), select(recs, TopIFD(), f2)
    assert set(small) <= set(large)
    assert all(recs[int(i)].ifd <= 1.0 for i in large)


def test_write_selection(tmp_path):
    write_selection(["a", "b"], SelectionManifest("top_ifd", 0.1, None, "fp"), tmp_path / "sel.json")
    assert json.loads((tmp_path / "sel.json").read_text()) == ["a", "b"]
    manifest = json.loads((tmp_path / "sel.manifest.json").read_text())
    assert manifest == {"strategy": "top_ifd", "fraction": 0.1, "seed": None,
                        "source_fingerprint": "fp", "count": 2}


def test_record_json_round_trip_checks_consistency():
    r = rec(1, 0.25, ca=0.5, da=2.0)
    assert ScoreRecord.from_json(r.to_json()) == r
    bad = r.to_json() | {"ifd": 0.3}
    with pytest.raises(DataError):
        ScoreRecord.from_json(bad)
