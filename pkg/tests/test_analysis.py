import csv
import json
import math

import jsonschema
import numpy as np
import pytest

from cherry.analysis import (CSV_COLUMNS, ClusterDensity, cluster_density, compute_stats, emit_report,
                             extreme_sets, pca_fit, pca_project, validate_report)
from cherry.diversity import ClusterAssignment
from cherry.errors import ConfigError, DataError
from cherry.ifd import LowIFD, ScoreRecord, TopIFD, select


def recs(values):
    return [ScoreRecord(f"{i:04d}", 1.0, v, v, 2, "fp") for i, v in enumerate(values)]


def assignment(labels, k=None):
    labels = np.asarray(labels)
    k = k or int(labels.max()) + 1
    return ClusterAssignment(k, np.zeros((k, 1)), labels, 0.0)


def test_constant_scores():
    s = compute_stats(recs([0.5] * 7))
    assert (s.mean, s.stdev) == (0.5, 0.0)
    assert s.p5 == s.p25 == s.p50 == s.p75 == s.p95 == 0.5


def test_linear_interpolated_median():
    values = [round(0.1 * i, 1) for i in range(1, 11)]
    s = compute_stats(recs(values))
    # fractional index 0.5 * 9 = 4.5 sits between 0.5 and 0.6
    assert s.p50 == pytest.approx(0.55, abs=1e-12)
    # p5: index 0.45 -> 0.1 + 0.45 * 0.1
    assert s.p5 == pytest.approx(0.145, abs=1e-12)
    assert s.min <= s.p5 <= s.p25 <= s.p50 <= s.p75 <= s.p95 <= s.max


def test_fraction_above_one():
    assert compute_stats(recs([0.5] * 9 + [1.2])).fraction_above_1 == 0.1


def test_one_cluster_holds_all_top():
    n = 40
    values = [0.01 * i for i in range(n)]  # top 10% are the last 4
    labels = [0] * 30 + [1] * 10
    d = cluster_density(recs(values), assignment(labels), 0.1, [f"{i:04d}" for i in range(n)])
    assert d[1].count_top == 4
    assert d[1].density_top == pytest.approx(0.1 * n / 10)
    assert d[0].count_top == 0
    assert d[0].count_bottom == 4 and d[1].count_bottom == 0


def test_tiny_q_still_takes_ceil():
    values = list(np.linspace(0, 0.9, 30))
    d = cluster_density(recs(values), assignment([0, 1, 2] * 10), 0.01, [f"{i:04d}" for i in range(30)])
    assert sum(c.count_top for c in d) == 1


@pytest.mark.parametrize("seed", range(5))
def test_counting_identity_random(seed):
    rng = np.random.default_rng(seed)
    n, k, q = 500, 7, 0.05
    values = rng.uniform(0, 1, n)
    labels = rng.integers(0, k, n)
    d = cluster_density(recs(values), assignment(labels, k), q, [f"{i:04d}" for i in range(n)])
    assert sum(c.count_top for c in d) == math.ceil(q * n)
    assert sum(c.count_bottom for c in d) == math.ceil(q * n)
    for c in d:
        assert c.count_top + c.count_bottom <= c.size
        assert 0 <= c.density_top <= 1 and 0 <= c.density_bottom <= 1


@pytest.mark.parametrize("seed", range(5))
def test_extreme_sets_match_selection(seed):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0, 1, 300).tolist()  # all aligned, no ties
    r = recs(values)
    top, bottom = extreme_sets(r, 0.05)
    assert top == select(r, TopIFD(), 0.05)
    assert bottom == select(r, LowIFD(), 0.05)


def test_extreme_sets_disjoint_with_ties():
    r = recs([0.5] * 10)
    top, bottom = extreme_sets(r, 0.5)
    assert not set(top) & set(bottom)
    assert len(top) == len(bottom) == 5


def test_q_validation():
    with pytest.raises(ConfigError):
        extreme_sets(recs([0.1, 0.2]), 0.6)
    with pytest.raises(ConfigError):
        extreme_sets(recs([0.1, 0.2, 0.3]), 0.5)


def test_pca_exact_plane():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(10, 2)))[0].T
    coeffs = rng.normal(size=(50, 2)) * [5.0, 1.0]
    x = coeffs @ basis + rng.normal(size=10)
    fit = pca_fit(x)
    recon = fit.inverse_transform(fit.transform(x))
    assert np.max(np.abs(recon - x)) < 1e-9


def test_pca_sign_convention_and_order():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 5)) * [1, 10, 3, 0.1, 0.1]
    fit = pca_fit(x)
    for row in fit.components:
        assert row[np.flatnonzero(np.abs(row) > 1e-12)[0]] > 0
    assert fit.explained_variance[0] >= fit.explained_variance[1]
    assert abs(fit.components[0, 1]) > 0.99


def test_pca_separates_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(scale=0.1, size=(40, 8)) + 3
    b = rng.normal(scale=0.1, size=(40, 8)) - 3
    z = pca_project(np.vstack([a, b]))
    za, zb = z[:40], z[40:]
    inter = min(np.linalg.norm(p - q) for p in za for q in zb)
    intra = max(max(np.linalg.norm(p - q) for p in za for q in za),
                max(np.linalg.norm(p - q) for p in zb for q in zb))
    assert inter > intra


def test_pca_duplicates_and_permutation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 6))
    x[5] = x[9]
    z = pca_project(x)
    np.testing.assert_array_equal(z[5], z[9])
    perm = rng.permutation(30)
    np.testing.assert_allclose(pca_project(x[perm]), z[perm], atol=1e-10)


def test_pca_needs_two_rows():
    with pytest.raises(DataError):
        pca_project(np.ones((1, 3)))


def test_report_and_csv(tmp_path):
    r = recs([0.2, 0.9, 0.4, 0.7])
    stats = compute_stats(r)
    dens = [ClusterDensity(0, 2, 1, 0), ClusterDensity(1, 2, 0, 1)]
    proj = np.arange(8, dtype=float).reshape(4, 2)
    jpath, cpath = emit_report(tmp_path, stats, dens, proj, r, labels=[0, 1, 0, 1],
                               top_ids=["0001"], bottom_ids=["0000"], q=0.25)
    doc = json.loads(jpath.read_text())
    validate_report(doc)
    assert doc["cluster_density"][0]["density_top"] == 0.5
    rows = list(csv.reader(cpath.open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 1 + 4
    assert rows[2] == ["0001", "0.9", "2.0", "3.0", "1", "1", "0"]


def test_report_without_densities_has_note(tmp_path):
    r = recs([0.2, 0.9])
    jpath, cpath = emit_report(tmp_path, compute_stats(r), [], None, r)
    doc = json.loads(jpath.read_text())
    assert "cluster_density" not in doc
    assert any("cluster_density omitted" in n for n in doc["notes"])
    assert len(cpath.read_text().splitlines()) == 3


def test_schema_rejects_bad_report():
    with pytest.raises(jsonschema.ValidationError):
        validate_report({"schema_version": 1, "stats": {"count": 0}, "notes": []})
