"""Metric oracles, split-plan laws, and export-format tests."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from nxdetect import forge, harness


def _tiny_dataset(per_family=20, families=("benign", "alpha", "beta", "gamma", "delta")):
    rng = np.random.default_rng(0)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    pairs = []
    for family in families:
        for i in range(per_family):
            sld = "".join(rng.choice(letters, size=8)) + str(i)
            pairs.append((f"{sld}.com", family))
    return harness.build_dataset(pairs)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def test_build_dataset_labels():
    pairs = [("aaa.com", "benign"), ("bbb.com", "ramnit"), ("ccc.com", "vidro")]
    ds = harness.build_dataset(pairs)
    assert len(ds) == 3
    assert ds.family_index == {"benign": 0, "ramnit": 1, "vidro": 2}
    assert ds.binary_labels.tolist() == [0, 1, 1]
    assert ds.class_labels.tolist() == [0, 1, 2]
    assert ds.ids.shape == (3, 253)


def test_build_dataset_rejects_duplicates_within_class():
    with pytest.raises(harness.DuplicateDomain):
        harness.build_dataset([("aaa.com", "x"), ("AAA.com", "x")])
    # the same domain under two families is tolerated
    harness.build_dataset([("aaa.com", "x"), ("aaa.com", "y")])
    with pytest.raises(harness.DatasetTooSmall):
        harness.build_dataset([])


# ---------------------------------------------------------------------------
# binary metrics
# ---------------------------------------------------------------------------

def test_binary_metrics_worked_example():
    m = harness.binary_metrics(harness.ConfusionCounts(tp=3, tn=4, fp=1, fn=2))
    assert m.acc == pytest.approx(0.7)
    assert m.tpr == pytest.approx(0.6)
    assert m.tnr == pytest.approx(0.8)
    assert m.fnr == pytest.approx(0.4)
    assert m.fpr == pytest.approx(0.2)


def test_binary_metrics_edge_cases():
    perfect = harness.binary_metrics(harness.ConfusionCounts(tp=5, tn=5, fp=0, fn=0))
    assert (perfect.acc, perfect.tpr, perfect.tnr) == (1.0, 1.0, 1.0)
    assert (perfect.fnr, perfect.fpr) == (0.0, 0.0)

    no_neg = harness.binary_metrics(harness.ConfusionCounts(tp=3, tn=0, fp=0, fn=1))
    assert no_neg.tnr is None and no_neg.fpr is None
    assert no_neg.tpr == pytest.approx(0.75)

    with pytest.raises(harness.DataError):
        harness.ConfusionCounts(tp=-1, tn=0, fp=0, fn=0)


def test_binary_metrics_match_recounts():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(2, 400))
        labels = rng.integers(0, 2, size=n)
        preds = rng.integers(0, 2, size=n)
        counts = harness.count_confusion(preds, labels)
        # brute-force recount, one sample at a time
        tp = sum(1 for p, y in zip(preds, labels) if p and y)
        tn = sum(1 for p, y in zip(preds, labels) if not p and not y)
        fp = sum(1 for p, y in zip(preds, labels) if p and not y)
        fn = sum(1 for p, y in zip(preds, labels) if not p and y)
        assert (counts.tp, counts.tn, counts.fp, counts.fn) == (tp, tn, fp, fn)
        assert counts.total == n
        m = harness.binary_metrics(counts)
        if tp + fn and tn + fp:
            assert m.acc == pytest.approx((tp + tn) / n)
            assert m.tpr == pytest.approx(tp / (tp + fn))
            assert m.tnr == pytest.approx(tn / (tn + fp))


# ---------------------------------------------------------------------------
# multiclass metrics
# ---------------------------------------------------------------------------

def test_multiclass_single_class_f1():
    # P=0.75 and R=0.6 for class 0: tp=3, one column extra, two row extra
    matrix = np.array([[3, 2, 0], [1, 4, 0], [0, 0, 5]])
    m = harness.multiclass_metrics(matrix)
    assert m.precision[0] == pytest.approx(0.75)
    assert m.recall[0] == pytest.approx(0.6)
    assert m.f1[0] == pytest.approx(0.6667, abs=1e-4)


def test_multiclass_metrics_match_exact_fractions():
    matrix = np.array([[5, 2, 0], [1, 6, 1], [0, 3, 4]])
    m = harness.multiclass_metrics(matrix)
    expected_p, expected_r, expected_f = [], [], []
    for c in range(3):
        tp = Fraction(int(matrix[c, c]))
        col = Fraction(int(matrix[:, c].sum()))
        row = Fraction(int(matrix[c, :].sum()))
        p = tp / col if col else Fraction(0)
        r = tp / row if row else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        expected_p.append(p)
        expected_r.append(r)
        expected_f.append(f)
    for c in range(3):
        assert m.precision[c] == pytest.approx(float(expected_p[c]), abs=1e-12)
        assert m.recall[c] == pytest.approx(float(expected_r[c]), abs=1e-12)
        assert m.f1[c] == pytest.approx(float(expected_f[c]), abs=1e-12)
    assert m.macro_f1 == pytest.approx(float(sum(expected_f) / 3), abs=1e-12)


def test_multiclass_identity_and_zero_rows():
    identity = np.eye(4, dtype=int) * 7
    m = harness.multiclass_metrics(identity)
    assert m.macro_precision == m.macro_recall == m.macro_f1 == 1.0

    # an untested class contributes zeros, never a division error
    matrix = np.array([[3, 0], [0, 0]])
    m = harness.multiclass_metrics(matrix)
    assert m.precision[1] == m.recall[1] == m.f1[1] == 0.0


def test_macro_f1_invariant_under_relabeling():
    rng = np.random.default_rng(3)
    for _ in range(30):
        k = int(rng.integers(2, 7))
        labels = rng.integers(0, k, size=300)
        preds = rng.integers(0, k, size=300)
        base = harness.multiclass_metrics(harness.confusion_matrix(preds, labels, k))
        perm = rng.permutation(k)
        relabeled = harness.multiclass_metrics(
            harness.confusion_matrix(perm[preds], perm[labels], k))
        assert relabeled.macro_f1 == pytest.approx(base.macro_f1, abs=1e-12)


def test_confusion_matrix_layout():
    preds = np.array([0, 1, 1, 2, 0])
    labels = np.array([0, 1, 2, 2, 1])
    matrix = harness.confusion_matrix(preds, labels, 3)
    # rows are true classes: true 1 was predicted 1 once and 0 once
    assert matrix.tolist() == [[1, 0, 0], [1, 1, 0], [0, 1, 1]]
    assert matrix.sum(axis=1).tolist() == [1, 2, 2]


# ---------------------------------------------------------------------------
# TPR at fixed FPR
# ---------------------------------------------------------------------------

def _sweep_oracle(scores, labels, target):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    distinct = np.unique(scores)
    candidates = [distinct[0] - 1.0]
    candidates += [(a + b) / 2 for a, b in zip(distinct[:-1], distinct[1:])]
    candidates += [distinct[-1] + 1.0]
    feasible = []
    for t in candidates:
        fpr = np.mean(scores[~labels] >= t)
        if fpr <= target:
            feasible.append((t, np.mean(scores[labels] >= t), fpr))
    return min(feasible, key=lambda item: item[0])


def test_tpr_at_fpr_worked_scores():
    scores = np.array([0.1, 0.2, 0.3, 0.9, 0.4, 0.8, 0.95])
    labels = np.array([0, 0, 0, 0, 1, 1, 1])
    threshold, tpr, fpr = harness.tpr_at_fpr(scores, labels, 0.25)
    assert threshold == pytest.approx(0.35)
    assert fpr == pytest.approx(0.25)
    assert tpr == pytest.approx(1.0)
    assert (threshold, tpr, fpr) == pytest.approx(_sweep_oracle(scores, labels, 0.25))


def test_tpr_at_fpr_extremes():
    scores = np.array([0.2, 0.4, 0.6, 0.8])
    labels = np.array([0, 1, 0, 1])
    _, tpr, _ = harness.tpr_at_fpr(scores, labels, 1.0)
    assert tpr == 1.0
    threshold, tpr, fpr = harness.tpr_at_fpr(scores, labels, 0.0)
    assert fpr == 0.0
    assert threshold > 0.6
    assert tpr == pytest.approx(0.5)

    with pytest.raises(harness.NoPositives):
        harness.tpr_at_fpr(scores, np.zeros(4), 0.5)
    with pytest.raises(harness.NoNegatives):
        harness.tpr_at_fpr(scores, np.ones(4), 0.5)


def test_tpr_at_fpr_matches_sweep_on_random_sets():
    rng = np.random.default_rng(11)
    for _ in range(150):
        n = int(rng.integers(4, 120))
        labels = np.concatenate(([0, 1], rng.integers(0, 2, size=n - 2)))
        scores = np.round(rng.random(n), 3)  # coarse grid forces ties
        target = float(rng.choice([0.0, 0.01, 0.1, 0.25, 0.5, 1.0]))
        got = harness.tpr_at_fpr(scores, labels, target)
        assert got == pytest.approx(_sweep_oracle(scores, labels, target))


# ---------------------------------------------------------------------------
# split plans
# ---------------------------------------------------------------------------

def test_kfold_split_sizes_match_fractions():
    ds = _tiny_dataset(per_family=20)  # 100 samples, 5 classes
    plan = harness.make_kfold(ds, k=5, reps=1, holdout=0.05, seed=4)
    assert plan.small_classes == []
    assert len(plan.folds) == 5
    for split in plan.folds:
        assert split.test.size == 20
        assert split.holdout.size == 4
        assert split.train.size == 76


def test_kfold_folds_partition_the_dataset():
    ds = _tiny_dataset(per_family=17)  # sizes not divisible by k
    plan = harness.make_kfold(ds, k=5, reps=3, holdout=0.05, seed=9)
    n = len(ds)
    for rep in range(3):
        folds = [f for f in plan.folds if f.repetition == rep]
        tests = np.concatenate([f.test for f in folds])
        assert np.array_equal(np.sort(tests), np.arange(n))  # exact partition
        for split in folds:
            combined = np.concatenate([split.train, split.holdout, split.test])
            assert np.array_equal(np.sort(combined), np.arange(n))
            assert not set(split.holdout) & set(split.test)
            assert not set(split.train) & set(split.test)
            # stratification: each family appears in every test fold
            test_families = {ds.families[i] for i in split.test}
            assert test_families == set(ds.family_index)


def test_kfold_is_deterministic_and_flags_small_classes():
    ds = harness.build_dataset(
        [(f"a{i}xxxxx.com", "big") for i in range(40)]
        + [(f"b{i}xxxxx.com", "tiny") for i in range(3)]
    )
    plan = harness.make_kfold(ds, k=5, reps=2, holdout=0.05, seed=1)
    again = harness.make_kfold(ds, k=5, reps=2, holdout=0.05, seed=1)
    assert plan.to_dict() == again.to_dict()
    assert plan.small_classes == ["tiny"]
    tiny_idx = set(np.flatnonzero(np.array(ds.families) == "tiny").tolist())
    for split in plan.folds:
        assert not tiny_idx & set(split.test.tolist())
        assert tiny_idx <= set(split.train.tolist()) | set(split.holdout.tolist())

    with pytest.raises(harness.DatasetTooSmall):
        harness.make_kfold(harness.build_dataset([("a.com", "x"), ("b.com", "x")]), k=5)


def test_logo_excludes_each_family_from_training():
    rng = np.random.default_rng(14)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    pairs = []
    for family, count in (("benign", 40), ("alpha", 12), ("beta", 12), ("gamma", 12)):
        for i in range(count):
            sld = "".join(rng.choice(letters, size=8)) + str(i)
            pairs.append((f"{sld}.com", family))
    ds = harness.build_dataset(pairs)
    splits = harness.make_logo(ds, seed=2)
    families = sorted(set(ds.families) - {"benign"})
    assert [s.family for s in splits] == families
    for split in splits:
        train_families = {ds.families[i] for i in split.train}
        assert split.family not in train_families
        assert {ds.families[i] for i in split.test_positive} == {split.family}
        assert {ds.families[i] for i in split.test_negative} == {"benign"}
        assert split.test_negative.size == split.test_positive.size
        assert not set(split.test_negative) & set(split.train)

    with pytest.raises(harness.SingleGroup):
        harness.make_logo(harness.build_dataset(
            [("a.com", "benign"), ("b.com", "only")]))


# ---------------------------------------------------------------------------
# aggregation and export
# ---------------------------------------------------------------------------

def test_aggregate_stats_uses_sample_sigma():
    stats = harness.aggregate_stats([1.0, 2.0, 3.0, 4.0])
    assert stats["mean"] == pytest.approx(2.5)
    assert stats["std"] == pytest.approx(np.std([1, 2, 3, 4], ddof=1))
    assert stats["min"] == 1.0 and stats["max"] == 4.0
    assert stats["median"] == pytest.approx(2.5)
    assert harness.aggregate_stats([5.0])["std"] == 0.0


def test_export_confusion_pixel_mapping(tmp_path):
    matrix = np.array([[8, 2, 0], [0, 5, 5], [3, 3, 4]])
    base = str(tmp_path / "confusion")
    pgm_path, csv_path = harness.export_confusion(matrix, base, ["x", "y", "z"])

    with open(pgm_path) as fh:
        lines = [line.strip() for line in fh]
    assert lines[0] == "P2"
    assert lines[1] == "3 3"
    assert lines[2] == "255"
    pixels = [int(v) for line in lines[3:] for v in line.split()]
    expected = []
    for row in matrix:
        total = row.sum()
        for value in row:
            expected.append(round((1 - value / total) * 255))
    assert pixels == expected

    with open(csv_path) as fh:
        rows = [line.strip().split(",") for line in fh]
    assert rows[0] == ["true\\predicted", "x", "y", "z"]
    assert rows[1] == ["x", "8", "2", "0"]
    assert rows[3] == ["z", "3", "3", "4"]


def test_export_confusion_identity_and_empty_rows(tmp_path):
    matrix = np.array([[4, 0], [0, 0]])
    pgm_path, _ = harness.export_confusion(matrix, str(tmp_path / "m"))
    with open(pgm_path) as fh:
        lines = [line.strip() for line in fh]
    assert lines[3] == "0 255"    # full diagonal: black then white
    assert lines[4] == "255 255"  # unsupported row renders white


# ---------------------------------------------------------------------------
# experiment runners (small end-to-end)
# ---------------------------------------------------------------------------

def _separable_pairs(n_per_class):
    rng = np.random.default_rng(6)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    digits = list("0123456789")
    pairs = []
    for i in range(n_per_class):
        pairs.append(("".join(rng.choice(letters, size=8)) + str(i) + ".com", "benign"))
        pairs.append(("".join(rng.choice(digits, size=14)) + str(i) + ".net", "dga"))
    return pairs


def test_run_binary_kfold_end_to_end(tmp_path):
    from nxdetect import models

    ds = harness.build_dataset(_separable_pairs(50))
    plan = harness.make_kfold(ds, k=2, reps=1, holdout=0.05, seed=3)
    config = models.TrainConfig(seed=19, max_epochs=1)
    out = str(tmp_path / "exp")
    import os
    os.makedirs(out)
    report = harness.run_binary_kfold(ds, plan, config, out_dir=out)

    assert report["protocol"] == "kfold-binary"
    assert len(report["folds"]) == 2
    assert {f["fold"] for f in report["folds"]} == {0, 1}
    assert 0.0 <= report["aggregate"]["acc"]["mean"] <= 1.0
    for name in ("plan.json", "report.json", "timings.json",
                 "model-r0-f0.json", "model-r0-f1.json"):
        assert (tmp_path / "exp" / name).exists()
    for fold in report["folds"]:
        assert "wall_seconds" not in fold["train"]

    rerun = harness.run_binary_kfold(ds, plan, config)
    rerun_folds = [dict(f) for f in rerun["folds"]]
    base_folds = [dict(f) for f in report["folds"]]
    assert rerun_folds == base_folds  # bitwise-reproducible report
