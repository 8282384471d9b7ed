"""Metric implementations against brute-force oracles and hand cases."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupaqa import metrics as M


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# brute-force oracles (kept independent of the implementations they check)
# ---------------------------------------------------------------------------

def brute_force_spearman(y, y_hat):
    """Classic d^2 rank formula; valid only for tie-free inputs."""
    y, y_hat = np.asarray(y), np.asarray(y_hat)
    n = len(y)
    ra = np.empty(n)
    rb = np.empty(n)
    for i in range(n):
        ra[i] = 1 + np.sum(y < y[i])
        rb[i] = 1 + np.sum(y_hat < y_hat[i])
    d2 = np.sum((ra - rb) ** 2)
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def dp_levenshtein(a, b):
    """Textbook full-table dynamic program."""
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    table[:, 0] = np.arange(len(a) + 1)
    table[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i, j] = min(table[i - 1, j] + 1,
                              table[i, j - 1] + 1,
                              table[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(table[len(a), len(b)])


# ---------------------------------------------------------------------------
# spearman
# ---------------------------------------------------------------------------

class TestSpearman:
    def test_identical_is_one(self):
        y = [3.0, 1.0, 2.0, 5.0]
        assert M.spearman(y, y) == pytest.approx(1.0)

    def test_reversed_is_minus_one(self):
        y = [1.0, 2.0, 3.0, 4.0]
        assert M.spearman(y, y[::-1]) == pytest.approx(-1.0)

    def test_hand_case(self):
        assert M.spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)

    def test_matches_brute_force_on_tie_free_pairs(self):
        rng = _rng(42)
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            y = rng.permutation(n) + rng.uniform(0, 0.4, size=n)
            y_hat = rng.permutation(n) + rng.uniform(0, 0.4, size=n)
            assert M.spearman(y, y_hat) == pytest.approx(
                brute_force_spearman(y, y_hat), abs=1e-9)

    def test_matches_scipy_with_ties(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = _rng(7)
        for _ in range(200):
            n = int(rng.integers(3, 30))
            y = rng.integers(0, 5, size=n).astype(float)
            y_hat = rng.integers(0, 5, size=n).astype(float)
            try:
                ours = M.spearman(y, y_hat)
            except M.ConstantRanksError:
                continue
            ref = scipy_stats.spearmanr(y, y_hat).statistic
            assert ours == pytest.approx(ref, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = _rng(9)
        y = rng.normal(size=25)
        y_hat = rng.normal(size=25)
        base = M.spearman(y, y_hat)
        assert M.spearman(np.exp(y), y_hat) == pytest.approx(base, abs=1e-12)
        assert M.spearman(y, 3.0 * y_hat + 7.0) == pytest.approx(base, abs=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(M.TooFewSamplesError):
            M.spearman([1.0], [2.0])

    def test_all_tied_is_distinct_error(self):
        with pytest.raises(M.ConstantRanksError):
            M.spearman([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# relative L2
# ---------------------------------------------------------------------------

class TestRelativeL2:
    def test_zero_residual(self):
        y = [10.0, 20.0, 30.0]
        assert M.relative_l2(y, y, 0.0, 100.0) == 0.0

    def test_hand_case(self):
        assert M.relative_l2([0, 100], [50, 100], 0, 100) == pytest.approx(0.125)

    def test_affine_invariance(self):
        rng = _rng(3)
        y = rng.uniform(0, 100, size=20)
        y_hat = rng.uniform(0, 100, size=20)
        base = M.relative_l2(y, y_hat, 0.0, 100.0)
        a, b = 2.5, -40.0
        mapped = M.relative_l2(a * y + b, a * y_hat + b, b, a * 100.0 + b)
        assert mapped == pytest.approx(base, abs=1e-12)

    def test_zero_iff_equal(self):
        y = np.array([1.0, 2.0, 3.0])
        y_hat = y.copy()
        y_hat[1] += 1e-9
        assert M.relative_l2(y, y_hat, 0.0, 10.0) > 0.0

    def test_degenerate_range(self):
        with pytest.raises(M.MetricError):
            M.relative_l2([1.0], [1.0], 5.0, 5.0)


# ---------------------------------------------------------------------------
# frame accuracy / segments / edit score
# ---------------------------------------------------------------------------

class TestFrameAccuracy:
    def test_identical(self):
        assert M.frame_accuracy(["upper"] * 4, ["upper"] * 4) == 100.0

    def test_one_of_four(self):
        gt = ["upper", "upper", "lower", "float"]
        pred = ["upper", "upper", "lower", "none"]
        assert M.frame_accuracy(gt, pred) == 75.0

    def test_disjoint(self):
        assert M.frame_accuracy(["upper"] * 3, ["lower"] * 3) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(M.MetricError):
            M.frame_accuracy(["upper"], ["upper", "lower"])


class TestSegments:
    def test_maximal_runs(self):
        segs = M.segments_of(["upper", "upper", "lower", "upper"])
        assert [(s.label, s.start, s.end) for s in segs] == [
            ("upper", 0, 2), ("lower", 2, 3), ("upper", 3, 4)]

    def test_partition_property(self):
        rng = _rng(5)
        labels = [M.ACTION_LEXICON[i] for i in rng.integers(0, 3, size=50)]
        segs = M.segments_of(labels)
        assert segs[0].start == 0 and segs[-1].end == 50
        for a, b in zip(segs, segs[1:]):
            assert a.end == b.start
            assert a.label != b.label

    def test_lexicon_rejects_unknown(self):
        with pytest.raises(M.MetricError):
            M.validate_labels(["upper", "handstand"])


class TestEditScore:
    def test_identical(self):
        labels = ["upper", "lower", "upper"]
        assert M.segmental_edit_score(labels, labels) == 100.0

    def test_hand_case(self):
        gt = M.segments_of(["upper", "lower"])
        pred = M.segments_of(["upper"])
        assert M.segmental_edit_score(gt, pred) == 50.0

    def test_midpoint_splits_collapse(self):
        gt = ["upper"] * 4 + ["lower"] * 4 + ["float"] * 4
        assert M.segmental_edit_score(gt, list(gt)) == 100.0

    def test_levenshtein_against_dp_oracle(self):
        rng = _rng(11)
        for _ in range(500):
            a = [str(x) for x in rng.integers(0, 4, size=rng.integers(0, 10))]
            b = [str(x) for x in rng.integers(0, 4, size=rng.integers(0, 10))]
            assert M.levenshtein(a, b) == dp_levenshtein(a, b)

    def test_levenshtein_metric_axioms(self):
        rng = _rng(13)
        seqs = [[str(x) for x in rng.integers(0, 3, size=rng.integers(0, 7))]
                for _ in range(30)]
        for a in seqs[:10]:
            assert M.levenshtein(a, a) == 0
        for a, b in zip(seqs, seqs[1:]):
            assert M.levenshtein(a, b) == M.levenshtein(b, a)
            if a != b:
                assert M.levenshtein(a, b) > 0
        for a, b, c in zip(seqs, seqs[1:], seqs[2:]):
            assert M.levenshtein(a, c) <= M.levenshtein(a, b) + M.levenshtein(b, c)


# ---------------------------------------------------------------------------
# F1@k
# ---------------------------------------------------------------------------

def _random_label_sequence(rng, length):
    labels = []
    while len(labels) < length:
        run = int(rng.integers(1, 8))
        labels.extend([M.ACTION_LEXICON[rng.integers(0, 5)]] * run)
    return labels[:length]


class TestF1AtK:
    def test_perfect(self):
        labels = ["upper"] * 5 + ["lower"] * 5
        for k in (0.10, 0.25, 0.50):
            assert M.f1_at_k(labels, labels, k) == 100.0

    def test_half_overlap_boundary(self):
        gt = [M.Segment("upper", 0, 10)]
        pred_half = [M.Segment("upper", 0, 5)]      # IoU 0.5
        assert M.f1_at_k(gt, pred_half, 0.25) == 100.0
        assert M.f1_at_k(gt, pred_half, 0.50) == 100.0  # inclusive boundary
        pred_04 = [M.Segment("upper", 0, 4)]        # IoU 0.4
        assert M.f1_at_k(gt, pred_04, 0.50) == 0.0

    def test_label_must_match(self):
        gt = [M.Segment("upper", 0, 10)]
        pred = [M.Segment("lower", 0, 10)]
        assert M.f1_at_k(gt, pred, 0.10) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        gt = _random_label_sequence(rng, int(rng.integers(5, 60)))
        pred = _random_label_sequence(rng, len(gt))
        f10 = M.f1_at_k(gt, pred, 0.10)
        f25 = M.f1_at_k(gt, pred, 0.25)
        f50 = M.f1_at_k(gt, pred, 0.50)
        assert f10 >= f25 >= f50


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

class TestReport:
    def test_schema(self):
        jsonschema = pytest.importorskip("jsonschema")
        rng = _rng(17)
        y = rng.uniform(60, 100, size=10)
        y_hat = y + rng.normal(scale=2.0, size=10)
        labels = _random_label_sequence(rng, 40)
        report = M.metric_report(y, y_hat, 0.0, 100.0,
                                 label_pairs=[(labels, labels)])
        jsonschema.validate(report, M.REPORT_SCHEMA)
        assert report["acc"] == 100.0
        assert report["f1"]["50"] == 100.0

    def test_score_only_report_has_null_segmentation(self):
        report = M.metric_report([1.0, 2.0, 3.0], [1.1, 2.1, 2.9], 0.0, 10.0)
        assert report["acc"] is None
        assert report["f1"]["10"] is None
        assert report["rho"] == pytest.approx(1.0)

    def test_r_l2_is_scaled_by_100(self):
        report = M.metric_report([0.0, 100.0], [50.0, 100.0], 0.0, 100.0)
        assert report["r_l2_x100"] == pytest.approx(12.5)
