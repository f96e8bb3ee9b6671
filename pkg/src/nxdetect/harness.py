"""Evaluation protocols and metrics.

Labeled datasets, repeated stratified k-fold plans with a training holdout,
leave-one-group-out plans, binary and macro-averaged multiclass metrics,
TPR at a fixed FPR, confusion-matrix export, and experiment runners that
persist every deterministic artifact of a protocol run.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec, models
from .errors import DataError


class DatasetTooSmall(DataError):
    """Not enough samples to build the requested split plan."""


class SingleGroup(DataError):
    """Leave-one-group-out needs at least two malicious families."""


class NoPositives(DataError):
    """Operating-point selection needs at least one positive score."""


class NoNegatives(DataError):
    """Operating-point selection needs at least one negative score."""


class DuplicateDomain(DataError):
    """The same domain appears twice within one class."""


class IoError(DataError):
    """Report artifact could not be written."""


BENIGN_FAMILY = "benign"


# ---------------------------------------------------------------------------
# labeled datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Encoded domains with family labels and derived binary labels."""

    domains: list[str]
    families: list[str]
    family_index: dict[str, int]
    ids: np.ndarray
    class_labels: np.ndarray
    binary_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.domains)


def build_dataset(pairs: list[tuple[str, str]],
                  benign_family: str = BENIGN_FAMILY) -> LabeledDataset:
    """Assemble a dataset from (domain, family) pairs.

    The binary label is malicious iff family differs from the benign family.
    A domain repeated within one class is a corpus defect and is rejected;
    the same domain under two different families is kept (label noise is the
    caller's concern, not a structural error).
    """
    if not pairs:
        raise DatasetTooSmall("no samples")
    seen: set[tuple[str, str]] = set()
    for domain, family in pairs:
        key = (domain.lower(), family)
        if key in seen:
            raise DuplicateDomain(f"{domain!r} appears twice in class {family!r}")
        seen.add(key)
    domains = [d for d, _ in pairs]
    families = [f for _, f in pairs]
    names = sorted(set(families))
    family_index = {name: i for i, name in enumerate(names)}
    class_labels = np.array([family_index[f] for f in families])
    binary_labels = np.array([int(f != benign_family) for f in families])
    return LabeledDataset(
        domains=domains,
        families=families,
        family_index=family_index,
        ids=codec.encode_batch(domains),
        class_labels=class_labels,
        binary_labels=binary_labels,
    )


# ---------------------------------------------------------------------------
# split plans
# ---------------------------------------------------------------------------

@dataclass
class FoldSplit:
    repetition: int
    fold: int
    train: np.ndarray
    holdout: np.ndarray
    test: np.ndarray


@dataclass
class FoldPlan:
    k: int
    reps: int
    seed: int
    holdout_fraction: float
    small_classes: list[str]
    folds: list[FoldSplit]

    def to_dict(self) -> dict:
        return {
            "k": self.k, "reps": self.reps, "seed": self.seed,
            "holdout_fraction": self.holdout_fraction,
            "small_classes": self.small_classes,
            "folds": [
                {"repetition": f.repetition, "fold": f.fold,
                 "train": f.train.tolist(), "holdout": f.holdout.tolist(),
                 "test": f.test.tolist()}
                for f in self.folds
            ],
        }


def make_kfold(dataset: LabeledDataset, k: int = 5, reps: int = 5,
               holdout: float = 0.05, seed: int = 0) -> FoldPlan:
    """Repeated stratified k-fold with a holdout carved from each train set.

    Stratification is by family.  Classes with fewer than k samples cannot
    be spread over every test fold; they are flagged and kept entirely in
    training (never tested), which is reported in the plan.
    """
    n = len(dataset)
    if k < 2 or n < k:
        raise DatasetTooSmall(f"{n} samples cannot form {k} folds")
    names = sorted(dataset.family_index)
    class_indices = {
        name: np.flatnonzero(dataset.class_labels == dataset.family_index[name])
        for name in names
    }
    small = [name for name in names if len(class_indices[name]) < k]
    if len(small) == len(names):
        raise DatasetTooSmall(f"every class has fewer than {k} samples")

    folds: list[FoldSplit] = []
    for rep in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence((seed, rep)))
        assignment = np.full(n, -1)
        for name in names:
            idx = class_indices[name]
            if name in small:
                continue  # stays at -1: always trained on, never tested
            shuffled = idx[rng.permutation(len(idx))]
            assignment[shuffled] = np.arange(len(idx)) % k
        for fold in range(k):
            test = np.flatnonzero(assignment == fold)
            rest = np.flatnonzero(assignment != fold)
            rest = rest[rng.permutation(len(rest))]
            holdout_n = int(len(rest) * holdout)
            folds.append(FoldSplit(
                repetition=rep, fold=fold,
                train=np.sort(rest[holdout_n:]),
                holdout=np.sort(rest[:holdout_n]),
                test=np.sort(test),
            ))
    return FoldPlan(k=k, reps=reps, seed=seed, holdout_fraction=holdout,
                    small_classes=small, folds=folds)


@dataclass
class LogoSplit:
    family: str
    train: np.ndarray
    test_positive: np.ndarray
    test_negative: np.ndarray


def make_logo(dataset: LabeledDataset, seed: int = 0,
              benign_family: str = BENIGN_FAMILY) -> list[LogoSplit]:
    """One split per malicious family, excluding it from training entirely.

    The split's negative test samples are a benign slice of equal size,
    held out from that split's training benigns.
    """
    names = sorted(dataset.family_index)
    malicious = [m for m in names if m != benign_family]
    if len(malicious) < 2:
        raise SingleGroup(f"need at least 2 malicious families, got {len(malicious)}")
    benign_idx = np.flatnonzero(np.array(dataset.families) == benign_family)

    splits = []
    for g_index, family in enumerate(malicious):
        family_mask = np.array(dataset.families) == family
        positive = np.flatnonzero(family_mask)
        slice_n = min(len(positive), len(benign_idx))
        if len(benign_idx) - slice_n < 1:
            raise DatasetTooSmall(
                f"not enough benign samples to hold out {slice_n} for {family}"
            )
        rng = np.random.default_rng(np.random.SeedSequence((seed, g_index)))
        perm = benign_idx[rng.permutation(len(benign_idx))]
        negative = np.sort(perm[:slice_n])
        excluded = set(positive.tolist()) | set(negative.tolist())
        train = np.array([i for i in range(len(dataset)) if i not in excluded])
        splits.append(LogoSplit(
            family=family, train=train,
            test_positive=positive, test_negative=negative,
        ))
    return splits


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def count_confusion(predictions: np.ndarray, labels: np.ndarray) -> ConfusionCounts:
    predictions = np.asarray(predictions).astype(bool)
    labels = np.asarray(labels).astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(predictions & labels)),
        tn=int(np.sum(~predictions & ~labels)),
        fp=int(np.sum(predictions & ~labels)),
        fn=int(np.sum(~predictions & labels)),
    )


@dataclass
class BinaryMetrics:
    """Rates from a confusion count; a rate with zero denominator is None."""

    acc: float | None
    tpr: float | None
    tnr: float | None
    fnr: float | None
    fpr: float | None


def binary_metrics(counts: ConfusionCounts) -> BinaryMetrics:
    pos = counts.tp + counts.fn
    neg = counts.tn + counts.fp
    tpr = counts.tp / pos if pos else None
    tnr = counts.tn / neg if neg else None
    return BinaryMetrics(
        acc=(counts.tp + counts.tn) / counts.total if counts.total else None,
        tpr=tpr,
        tnr=tnr,
        fnr=None if tpr is None else 1.0 - tpr,
        fpr=None if tnr is None else 1.0 - tnr,
    )


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Counts with rows indexed by true class and columns by prediction."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.shape} predictions vs {labels.shape} labels")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    return matrix


@dataclass
class MulticlassMetrics:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float


def multiclass_metrics(matrix: np.ndarray) -> MulticlassMetrics:
    """Per-class and macro precision/recall/F1; zero denominators score 0."""
    matrix = np.asarray(matrix)
    k = matrix.shape[0]
    if matrix.shape != (k, k) or k < 2:
        raise DataError(f"need a square matrix with K >= 2, got {matrix.shape}")
    precision, recall, f1 = [], [], []
    for c in range(k):
        tp = float(matrix[c, c])
        col = float(matrix[:, c].sum())
        row = float(matrix[c, :].sum())
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return MulticlassMetrics(
        precision=precision, recall=recall, f1=f1,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
    )


def tpr_at_fpr(scores: np.ndarray, labels: np.ndarray,
               target_fpr: float) -> tuple[float, float, float]:
    """Smallest decision threshold whose FPR is within the target.

    A sample is predicted positive when score >= threshold.  Candidates are
    the midpoints between adjacent distinct scores plus sentinels outside the
    score range; since FPR and TPR both fall as the threshold rises, the
    smallest admissible threshold also carries the highest TPR.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0:
        raise NoPositives("no positive samples")
    if neg.size == 0:
        raise NoNegatives("no negative samples")

    distinct = np.unique(scores)
    candidates = np.concatenate((
        [distinct[0] - 1.0],
        (distinct[:-1] + distinct[1:]) / 2.0,
        [distinct[-1] + 1.0],
    ))
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    # count of entries >= t via searchsorted on the sorted arrays
    fpr = 1.0 - np.searchsorted(neg_sorted, candidates, side="left") / neg.size
    admissible = np.flatnonzero(fpr <= target_fpr)
    pick = admissible[0]  # candidates ascend, so this is the smallest threshold
    threshold = float(candidates[pick])
    tpr = 1.0 - float(np.searchsorted(pos_sorted, threshold, side="left")) / pos.size
    return threshold, tpr, float(fpr[pick])


def aggregate_stats(values: list[float]) -> dict[str, float]:
    """Mean, sample standard deviation, min, median, max."""
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "min": float(arr.min()),
        "median": float(np.median(arr)),
        "max": float(arr.max()),
    }


# ---------------------------------------------------------------------------
# confusion-matrix export
# ---------------------------------------------------------------------------

def export_confusion(matrix: np.ndarray, base_path: str,
                     labels: list[str] | None = None) -> tuple[str, str]:
    """Write <base>.pgm (row-normalized graymap) and <base>.csv (raw counts).

    Fraction 1 of a row maps to black (pixel 0) and fraction 0 to white;
    rows with no support render white.
    """
    matrix = np.asarray(matrix)
    k = matrix.shape[0]
    if labels is not None and len(labels) != k:
        raise DataError(f"{len(labels)} labels for a {k}x{k} matrix")
    maxval = 255
    row_sums = matrix.sum(axis=1)
    fractions = np.zeros(matrix.shape, dtype=np.float64)
    nonzero = row_sums > 0
    fractions[nonzero] = matrix[nonzero] / row_sums[nonzero, None]
    pixels = np.round((1.0 - fractions) * maxval).astype(int)

    pgm_path = base_path + ".pgm"
    csv_path = base_path + ".csv"
    try:
        with open(pgm_path, "w") as fh:
            fh.write(f"P2\n{k} {k}\n{maxval}\n")
            for row in pixels:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
        with open(csv_path, "w") as fh:
            names = labels if labels is not None else [str(i) for i in range(k)]
            fh.write("true\\predicted," + ",".join(names) + "\n")
            for name, row in zip(names, matrix):
                fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write confusion export: {exc}") from exc
    return pgm_path, csv_path


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------

def _fold_seed(seed: int, repetition: int, fold: int) -> int:
    return seed * 100003 + repetition * 101 + fold


def run_binary_kfold(
    dataset: LabeledDataset,
    plan: FoldPlan,
    train_config: models.TrainConfig,
    out_dir: str | None = None,
    threshold: float = 0.5,
) -> dict:
    """Train and evaluate one binary model per fold of the plan.

    Returns a report document with per-fold metrics and aggregate statistics
    over accuracy/TPR/TNR; deterministic in (dataset, plan, train_config).
    Wall-clock timings go to a sidecar file, never into the report.
    """
    fold_reports = []
    timings = []
    for split in plan.folds:
        config = _fold_config(train_config, split.repetition, split.fold)
        model, train_report = models.train_binary(
            dataset.ids[split.train], dataset.binary_labels[split.train], config,
            holdout_ids=dataset.ids[split.holdout],
            holdout_labels=dataset.binary_labels[split.holdout],
        )
        scores = model.predict(dataset.ids[split.test])
        counts = count_confusion(scores >= threshold,
                                 dataset.binary_labels[split.test])
        metrics = binary_metrics(counts)
        fold_reports.append({
            "repetition": split.repetition,
            "fold": split.fold,
            "seed": config.seed,
            "counts": asdict(counts),
            "metrics": asdict(metrics),
            "train": _train_report_dict(train_report),
        })
        timings.append(train_report.wall_seconds)
        if out_dir is not None:
            models.save_model(model, os.path.join(
                out_dir, f"model-r{split.repetition}-f{split.fold}.json"))

    report = {
        "protocol": "kfold-binary",
        "k": plan.k, "reps": plan.reps, "plan_seed": plan.seed,
        "folds": fold_reports,
        "aggregate": {
            name: aggregate_stats([f["metrics"][name] for f in fold_reports])
            for name in ("acc", "tpr", "tnr")
        },
    }
    if out_dir is not None:
        _write_json(os.path.join(out_dir, "plan.json"), plan.to_dict())
        _write_json(os.path.join(out_dir, "report.json"), report)
        _write_json(os.path.join(out_dir, "timings.json"),
                    {"fold_train_seconds": timings})
    return report


def run_logo(
    dataset: LabeledDataset,
    splits: list[LogoSplit],
    train_config: models.TrainConfig,
    out_dir: str | None = None,
    threshold: float = 0.5,
) -> dict:
    """Train one binary model per left-out family and score its detection."""
    rows = []
    timings = []
    for index, split in enumerate(splits):
        config = _fold_config(train_config, 0, index)
        model, train_report = models.train_binary(
            dataset.ids[split.train], dataset.binary_labels[split.train], config)
        positive_scores = model.predict(dataset.ids[split.test_positive])
        negative_scores = model.predict(dataset.ids[split.test_negative])
        tpr = float(np.mean(positive_scores >= threshold))
        fpr = float(np.mean(negative_scores >= threshold))
        rows.append({
            "family": split.family,
            "test_positives": int(split.test_positive.size),
            "tpr": tpr, "fpr": fpr,
            "train": _train_report_dict(train_report),
        })
        timings.append(train_report.wall_seconds)
        if out_dir is not None:
            models.save_model(model, os.path.join(out_dir, f"model-{split.family}.json"))

    report = {
        "protocol": "logo-binary",
        "families": rows,
        "aggregate": {"tpr": aggregate_stats([r["tpr"] for r in rows])},
    }
    if out_dir is not None:
        _write_json(os.path.join(out_dir, "report.json"), report)
        _write_json(os.path.join(out_dir, "timings.json"),
                    {"split_train_seconds": timings})
    return report


def run_cross_dataset(
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    train_config: models.TrainConfig,
    out_dir: str | None = None,
    threshold: float = 0.5,
) -> dict:
    """Train a binary model on one corpus and evaluate it on another."""
    model, train_report = models.train_binary(
        train_set.ids, train_set.binary_labels, train_config)
    scores = model.predict(test_set.ids)
    counts = count_confusion(scores >= threshold, test_set.binary_labels)
    report = {
        "protocol": "cross-dataset-binary",
        "counts": asdict(counts),
        "metrics": asdict(binary_metrics(counts)),
        "train": _train_report_dict(train_report),
    }
    if out_dir is not None:
        models.save_model(model, os.path.join(out_dir, "model.json"))
        _write_json(os.path.join(out_dir, "report.json"), report)
        _write_json(os.path.join(out_dir, "timings.json"),
                    {"train_seconds": [train_report.wall_seconds]})
    return report


def _fold_config(base: models.TrainConfig, repetition: int, fold: int):
    values = asdict(base)
    values["seed"] = _fold_seed(base.seed, repetition, fold)
    return models.TrainConfig(**values)


def _train_report_dict(report: models.TrainReport) -> dict:
    # wall_seconds stays out: reports must be bitwise reproducible
    doc = asdict(report)
    doc.pop("wall_seconds")
    return doc


def _write_json(path: str, doc: dict) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
