"""Core label-domain types: binary multi-label matrices with dataset ownership,
class weights, noise profiles and label correlation statistics.

All operations here are pure functions over immutable inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

N_SPATIAL_CLASSES = 9

SPATIAL_CLASS_NAMES = (
    "left_lung",
    "right_lung",
    "lower",
    "lower_middle",
    "middle",
    "upper_middle",
    "upper",
    "diffuse",
    "multiple",
)


def _as_binary_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise DataError(f"{name} entries must all be exactly 0 or 1")
    return arr


@dataclass(frozen=True)
class LabelMatrix:
    """Per-sample, per-class binary labels with dataset ownership tags.

    ``ownership`` maps each dataset tag to the class indices that dataset
    owns; samples only contribute loss/statistics for owned classes.
    """

    labels: np.ndarray
    class_names: tuple[str, ...]
    sample_ids: tuple[str, ...]
    dataset_tags: tuple[str, ...]
    ownership: Mapping[str, tuple[int, ...]]

    def __post_init__(self):
        arr = _as_binary_matrix(self.labels, "labels")
        object.__setattr__(self, "labels", arr)
        f, d = arr.shape
        if f < 1 or d < 1:
            raise DataError("label matrix needs at least one sample and one class")
        if len(self.class_names) != d:
            raise DataError("class_names length does not match label columns")
        if len(self.sample_ids) != f or len(self.dataset_tags) != f:
            raise DataError("sample_ids/dataset_tags length does not match rows")
        if len(set(self.sample_ids)) != f:
            raise DataError("sample_ids must be unique")
        for tag in set(self.dataset_tags):
            owned = self.ownership.get(tag)
            if not owned:
                raise DataError(f"dataset tag {tag!r} owns no classes")
            if any(not 0 <= k < d for k in owned):
                raise DataError(f"dataset tag {tag!r} owns out-of-range class index")

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @classmethod
    def from_array(
        cls,
        labels,
        class_names: Sequence[str] | None = None,
        sample_ids: Sequence[str] | None = None,
        dataset_tags: Sequence[str] | None = None,
        ownership: Mapping[str, Iterable[int]] | None = None,
    ) -> "LabelMatrix":
        """Build a LabelMatrix with sensible defaults (single dataset owning
        every class, generated sample ids)."""
        arr = _as_binary_matrix(labels, "labels")
        f, d = arr.shape
        if class_names is None:
            class_names = [f"class_{j}" for j in range(d)]
        if sample_ids is None:
            sample_ids = [f"s{i:06d}" for i in range(f)]
        if dataset_tags is None:
            dataset_tags = ["all"] * f
        if ownership is None:
            ownership = {tag: range(d) for tag in set(dataset_tags)}
        ownership = {tag: tuple(idx) for tag, idx in ownership.items()}
        return cls(arr, tuple(class_names), tuple(sample_ids), tuple(dataset_tags), ownership)

    def ownership_mask(self) -> np.ndarray:
        """F x D boolean mask: True where the sample's dataset owns the class."""
        mask = np.zeros(self.labels.shape, dtype=bool)
        for i, tag in enumerate(self.dataset_tags):
            mask[i, list(self.ownership[tag])] = True
        return mask

    def select(self, row_indices) -> "LabelMatrix":
        """Row subset preserving ids, tags and ownership."""
        idx = np.asarray(row_indices)
        return LabelMatrix(
            self.labels[idx],
            self.class_names,
            tuple(self.sample_ids[i] for i in idx),
            tuple(self.dataset_tags[i] for i in idx),
            self.ownership,
        )


@dataclass(frozen=True)
class ClassWeights:
    """Per-class positive/negative loss weights with the counts behind them.

    Degenerate classes (no positives or no negatives) get weight 1 and are
    flagged; training skips their loss terms.
    """

    w_pos: np.ndarray
    w_neg: np.ndarray
    pos_count: np.ndarray
    neg_count: np.ndarray
    degenerate: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.w_pos.shape[0]

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        ones = np.ones(n_classes)
        half = np.full(n_classes, 0.5)
        return cls(
            2.0 * ones, 2.0 * ones, half.astype(int) + 1, half.astype(int) + 1,
            np.zeros(n_classes, dtype=bool),
        )


@dataclass(frozen=True)
class NoiseProfile:
    """Per-class label quality and the regularization weights derived from it.

    f_pos = 1 - sensitivity weighs how often a true positive is labeled
    negative; f_neg = 1 - specificity the reverse. Inactive classes
    contribute zero regularization.
    """

    sensitivity: np.ndarray
    specificity: np.ndarray
    f_pos: np.ndarray
    f_neg: np.ndarray
    lambda_noise: float
    active: np.ndarray

    def __post_init__(self):
        for name in ("sensitivity", "specificity", "f_pos", "f_neg"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, v)
            if ((v < 0) | (v > 1)).any():
                raise DataError(f"{name} values must lie in [0, 1]")
        if self.lambda_noise < 0:
            raise DataError("lambda_noise must be >= 0")
        object.__setattr__(self, "active", np.asarray(self.active, dtype=bool))

    @property
    def n_classes(self) -> int:
        return self.sensitivity.shape[0]

    @classmethod
    def from_rates(cls, sensitivity, specificity, lambda_noise: float = 0.1,
                   active=None) -> "NoiseProfile":
        sens = np.asarray(sensitivity, dtype=np.float64)
        spec = np.asarray(specificity, dtype=np.float64)
        if active is None:
            active = np.ones(sens.shape, dtype=bool)
        return cls(sens, spec, 1.0 - sens, 1.0 - spec, lambda_noise, active)


@dataclass(frozen=True)
class CorrelationStats:
    """Pearson and covariance matrices over class label columns.

    Uses the population covariance convention (divide by F); recorded in
    ``convention`` so downstream files are self-describing. Zero-variance
    classes get correlation 0 everywhere and a degeneracy flag instead of NaN.
    """

    pearson: np.ndarray
    covariance: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray
    degenerate: np.ndarray
    convention: str = "population"

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class SpatialLabelMatrix:
    """Coarse location labels plus per-(sample, abnormality) availability flags.

    A row whose ``available`` flags are all False carries no spatial
    supervision and must contribute zero loss.
    """

    labels: np.ndarray
    available: np.ndarray

    def __post_init__(self):
        arr = _as_binary_matrix(self.labels, "spatial labels")
        object.__setattr__(self, "labels", arr)
        if arr.shape[1] != N_SPATIAL_CLASSES:
            raise DataError(f"spatial labels must have {N_SPATIAL_CLASSES} columns")
        avail = np.asarray(self.available, dtype=bool)
        object.__setattr__(self, "available", avail)
        if avail.ndim != 2 or avail.shape[0] != arr.shape[0]:
            raise DataError("available flags must be F x D with matching rows")

    def active_rows(self) -> np.ndarray:
        return self.available.any(axis=1)


# ---------------------------------------------------------------------------
# Operations


def compute_class_weights(labels: LabelMatrix, respect_ownership: bool = False) -> ClassWeights:
    """Derive w_pos = (P+N)/P and w_neg = (P+N)/N per class from label counts.

    With ``respect_ownership`` only samples whose dataset owns a class are
    counted for it, so weights reflect what the masked loss will actually see.
    Classes with P=0 or N=0 get both weights set to 1 and a degenerate flag.
    """
    arr = labels.labels
    if respect_ownership:
        mask = labels.ownership_mask().astype(np.float64)
        pos = (arr * mask).sum(axis=0)
        total = mask.sum(axis=0)
    else:
        pos = arr.sum(axis=0)
        total = np.full(arr.shape[1], float(arr.shape[0]))
    neg = total - pos
    degenerate = (pos == 0) | (neg == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_pos = np.where(degenerate, 1.0, total / np.where(pos == 0, 1.0, pos))
        w_neg = np.where(degenerate, 1.0, total / np.where(neg == 0, 1.0, neg))
    return ClassWeights(w_pos, w_neg, pos.astype(np.int64), neg.astype(np.int64), degenerate)


def compute_correlation(labels: LabelMatrix) -> CorrelationStats:
    """Population Pearson correlation and covariance of label columns.

    Entries touching a zero-variance class are set to 0 and flagged rather
    than NaN. Requires at least two samples.
    """
    arr = labels.labels
    f = arr.shape[0]
    if f < 2:
        raise DataError("correlation needs at least two samples")
    means = arr.mean(axis=0)
    centered = arr - means
    cov = centered.T @ centered / f
    var = np.diag(cov).copy()
    std = np.sqrt(var)
    degenerate = var <= 0.0
    denom = np.outer(std, std)
    safe = np.where(denom == 0.0, 1.0, denom)
    pearson = np.where(np.outer(~degenerate, ~degenerate), cov / safe, 0.0)
    # exact unit diagonal for live classes, immune to rounding in cov/denom
    np.fill_diagonal(pearson, np.where(degenerate, 0.0, 1.0))
    pearson = np.clip(pearson, -1.0, 1.0)
    return CorrelationStats(pearson, cov, means, std, degenerate)


def measure_noise_profile(
    original: LabelMatrix,
    reread: LabelMatrix,
    lambda_noise: float = 0.1,
) -> NoiseProfile:
    """Sensitivity/specificity of ``original`` labels against ``reread`` truth.

    Rows are aligned by sample id (the re-read subset may be sparse), so the
    two matrices only need overlapping ids, not equal shapes. Classes where
    the re-read has no positives or no negatives are marked inactive.
    """
    if original.class_names != reread.class_names:
        raise DataError("original and re-read label matrices disagree on classes")
    pos_of = {sid: i for i, sid in enumerate(original.sample_ids)}
    common = [sid for sid in reread.sample_ids if sid in pos_of]
    if not common:
        raise DataError("no overlapping sample ids between original and re-read sets")
    rr_index = {sid: i for i, sid in enumerate(reread.sample_ids)}
    orig = original.labels[[pos_of[sid] for sid in common]]
    truth = reread.labels[[rr_index[sid] for sid in common]]

    p = truth.sum(axis=0)
    n = (1.0 - truth).sum(axis=0)
    tp = (orig * truth).sum(axis=0)
    tn = ((1.0 - orig) * (1.0 - truth)).sum(axis=0)
    active = (p > 0) & (n > 0)
    sens = np.where(p > 0, tp / np.where(p == 0, 1.0, p), 1.0)
    spec = np.where(n > 0, tn / np.where(n == 0, 1.0, n), 1.0)
    return NoiseProfile.from_rates(sens, spec, lambda_noise, active)


# ---------------------------------------------------------------------------
# Serialization

def save_label_csv(labels: LabelMatrix, path) -> None:
    """CSV round-trip format: sample_id, dataset_tag, then one binary column
    per class named by the class names."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "dataset_tag", *labels.class_names])
        for i in range(labels.n_samples):
            row = [labels.sample_ids[i], labels.dataset_tags[i]]
            row += [str(int(v)) for v in labels.labels[i]]
            writer.writerow(row)


def load_label_csv(path, ownership: Mapping[str, Iterable[int]] | None = None) -> LabelMatrix:
    """Parse the CSV format written by :func:`save_label_csv`.

    Any label cell that is not exactly "0" or "1" is rejected with the
    offending line number. Ownership defaults to every tag owning all classes.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "sample_id" or header[1] != "dataset_tag":
            raise DataError(f"{path}:1: header must be sample_id,dataset_tag,<classes...>")
        class_names = header[2:]
        ids, tags, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            ids.append(row[0])
            tags.append(row[1])
            values = []
            for col, cell in zip(class_names, row[2:]):
                if cell not in ("0", "1"):
                    raise DataError(f"{path}:{lineno}: column {col!r} has non-binary cell {cell!r}")
                values.append(float(cell))
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no label rows")
    if ownership is None:
        ownership = {tag: range(len(class_names)) for tag in set(tags)}
    return LabelMatrix.from_array(
        np.array(rows), class_names, ids, tags, ownership
    )


def _fmt_vector(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def _fmt_matrix_block(name: str, m: np.ndarray) -> list[str]:
    lines = [f"matrix {name} {m.shape[0]} {m.shape[1]}"]
    for row in m:
        lines.append(" ".join(repr(float(x)) for x in row))
    return lines


def save_noise_profile(profile: NoiseProfile, path, class_names: Sequence[str] | None = None) -> None:
    names = class_names or [f"class_{j}" for j in range(profile.n_classes)]
    lines = [
        "kind = noise_profile",
        f"classes = {','.join(names)}",
        f"lambda_noise = {profile.lambda_noise!r}",
        f"sensitivity = {_fmt_vector(profile.sensitivity)}",
        f"specificity = {_fmt_vector(profile.specificity)}",
        f"f_pos = {_fmt_vector(profile.f_pos)}",
        f"f_neg = {_fmt_vector(profile.f_neg)}",
        "active = " + ",".join("1" if a else "0" for a in profile.active),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_keyvalue_file(path) -> tuple[dict, dict]:
    """Shared parser for the key/value + matrix-block text format."""
    keys: dict[str, str] = {}
    matrices: dict[str, np.ndarray] = {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        if line.startswith("matrix "):
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{i}: malformed matrix header {line!r}")
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            block = []
            for r in range(rows):
                if i >= len(lines):
                    raise DataError(f"{path}:{i}: truncated matrix block {name!r}")
                vals = [float(x) for x in lines[i].split()]
                if len(vals) != cols:
                    raise DataError(f"{path}:{i + 1}: matrix row has {len(vals)} values, expected {cols}")
                block.append(vals)
                i += 1
            matrices[name] = np.array(block)
        elif "=" in line:
            key, _, value = line.partition("=")
            keys[key.strip()] = value.strip()
        else:
            raise DataError(f"{path}:{i}: unparseable line {line!r}")
    return keys, matrices


def load_noise_profile(path) -> tuple[NoiseProfile, tuple[str, ...]]:
    keys, _ = _parse_keyvalue_file(path)
    if keys.get("kind") != "noise_profile":
        raise DataError(f"{path}: not a noise profile file")
    names = tuple(keys["classes"].split(","))
    sens = np.array([float(x) for x in keys["sensitivity"].split(",")])
    spec = np.array([float(x) for x in keys["specificity"].split(",")])
    active = np.array([c == "1" for c in keys["active"].split(",")])
    profile = NoiseProfile.from_rates(sens, spec, float(keys["lambda_noise"]), active)
    return profile, names


def save_correlation_stats(stats: CorrelationStats, path,
                           class_names: Sequence[str] | None = None) -> None:
    names = class_names or [f"class_{j}" for j in range(stats.n_classes)]
    lines = [
        "kind = correlation_stats",
        f"classes = {','.join(names)}",
        f"convention = {stats.convention}",
        f"means = {_fmt_vector(stats.means)}",
        f"stddevs = {_fmt_vector(stats.stddevs)}",
        "degenerate = " + ",".join("1" if d else "0" for d in stats.degenerate),
    ]
    lines += _fmt_matrix_block("pearson", stats.pearson)
    lines += _fmt_matrix_block("covariance", stats.covariance)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_correlation_stats(path) -> tuple[CorrelationStats, tuple[str, ...]]:
    keys, matrices = _parse_keyvalue_file(path)
    if keys.get("kind") != "correlation_stats":
        raise DataError(f"{path}: not a correlation stats file")
    names = tuple(keys["classes"].split(","))
    stats = CorrelationStats(
        matrices["pearson"],
        matrices["covariance"],
        np.array([float(x) for x in keys["means"].split(",")]),
        np.array([float(x) for x in keys["stddevs"].split(",")]),
        np.array([c == "1" for c in keys["degenerate"].split(",")]),
        keys.get("convention", "population"),
    )
    return stats, names
