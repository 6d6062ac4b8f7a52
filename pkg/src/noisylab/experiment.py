"""Experiment runner: generate, normalize, train each named configuration,
evaluate with bootstrap CIs and paired DeLong tests, emit a report.

Configuration names compose by flags so the combined runs are guaranteed to
be the union of their parts. All outputs are deterministic given the spec:
reports, logs and checkpoints are byte-identical across repeat runs.
"""

from __future__ import annotations

import dataclasses
import json
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NoResults, NoisyLabError
from .labels import (
    ClassWeights,
    LabelMatrix,
    SpatialLabelMatrix,
    compute_class_weights,
    compute_correlation,
    measure_noise_profile,
)
from .losses import LossConfig
from .metrics import auc, bootstrap_ci, delong_test
from .synth import GeneratorConfig, SyntheticDataset, generate_dataset
from .trainer import (
    TrainConfig,
    TrainingData,
    TrainingDiverged,
    build_features,
    forward,
    save_checkpoint,
    segmentation_targets,
    train,
)

RAW_FEATURE_SCALE = 2048.0  # fixed global divisor for the unnormalized route

PRESET_ORDER = (
    "baseline", "+norm", "+seg", "+loc", "+noise", "+corr",
    "all-noise", "all-corr", "all",
)


def preset_configuration(name: str) -> tuple[bool, LossConfig]:
    """Map a configuration name to (use image normalization, loss config)."""
    table = {
        "baseline": (False, LossConfig()),
        "+norm": (True, LossConfig()),
        "+seg": (False, LossConfig(use_seg=True)),
        "+loc": (False, LossConfig(use_loc=True)),
        "+noise": (False, LossConfig(use_noise=True)),
        "+corr": (False, LossConfig(use_corr=True)),
        "all-noise": (True, LossConfig(use_noise=True, use_seg=True, use_loc=True)),
        "all-corr": (True, LossConfig(use_corr=True, use_seg=True, use_loc=True)),
        "all": (True, LossConfig(use_noise=True, use_corr=True, use_seg=True, use_loc=True)),
    }
    if name not in table:
        raise DataError(f"unknown configuration {name!r}; pick from {PRESET_ORDER}")
    return table[name]


@dataclass(frozen=True)
class ExperimentSpec:
    configurations: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: str = "runs"
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 2000
    calib_size: int = 1000
    generator_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.configurations:
            raise DataError("need at least one configuration")
        if len(set(self.configurations)) != len(self.configurations):
            raise DataError("configuration names must be unique")
        for name in self.configurations:
            preset_configuration(name)
        if not self.seeds:
            raise DataError("need at least one seed")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise DataError("split sizes must be positive")
        if self.calib_size > self.n_train:
            raise DataError("calibration subset cannot exceed the training split")


def load_experiment_spec(path) -> ExperimentSpec:
    """Parse the JSON experiment spec file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"{path}: unknown spec keys {sorted(unknown)}")
    kwargs = dict(raw)
    if "configurations" in kwargs:
        kwargs["configurations"] = tuple(kwargs["configurations"])
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(int(s) for s in kwargs["seeds"])
    try:
        return ExperimentSpec(**kwargs)
    except TypeError as exc:
        raise DataError(f"{path}: {exc}") from None


def generator_for_seed(spec: ExperimentSpec, seed: int) -> GeneratorConfig:
    overrides = dict(spec.generator_overrides)
    for key in ("latent_correlation", "noise_rates", "prevalence", "class_names",
                "spatial_classes", "blob_radius", "blob_contrast",
                "intensity_scale", "intensity_offset"):
        if key in overrides and isinstance(overrides[key], list):
            overrides[key] = tuple(
                tuple(v) if isinstance(v, list) else v for v in overrides[key]
            )
    n_total = spec.n_train + spec.n_val + spec.n_test
    overrides.setdefault("n_samples", n_total)
    if overrides["n_samples"] != n_total:
        raise DataError("generator n_samples must equal n_train + n_val + n_test")
    return GeneratorConfig(seed=seed, **overrides)


def train_config_for(spec: ExperimentSpec, loss: LossConfig, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, loss=loss, **spec.train_overrides)


@dataclass
class PreparedSeed:
    """Per-seed shared state: dataset, splits, calibration, feature cache."""

    dataset: SyntheticDataset
    idx_train: np.ndarray
    idx_val: np.ndarray
    idx_test: np.ndarray
    noise_profile: object
    correlation: object
    features: dict = field(default_factory=dict)

    def features_for(self, use_normalization: bool) -> np.ndarray:
        key = bool(use_normalization)
        if key not in self.features:
            self.features[key] = build_features(
                self.dataset.images, key, raw_scale=RAW_FEATURE_SCALE
            )
        return self.features[key]


def prepare_seed(spec: ExperimentSpec, seed: int,
                 lambda_noise: float = 0.1) -> PreparedSeed:
    """Generate the dataset and calibrate the loss priors for one seed.

    Noise and correlation statistics come from a calibration subset at the
    head of the training split: measured noisy-vs-true rates and the
    covariance of the true labels, mirroring a small re-read calibration set.
    """
    dataset = generate_dataset(generator_for_seed(spec, seed))
    n = dataset.n_samples
    idx = np.arange(n)
    idx_train = idx[: spec.n_train]
    idx_val = idx[spec.n_train : spec.n_train + spec.n_val]
    idx_test = idx[spec.n_train + spec.n_val :]

    calib = idx_train[: spec.calib_size]
    noisy_cal = dataset.noisy_labels.select(calib)
    true_cal = dataset.true_labels.select(calib)
    profile = measure_noise_profile(noisy_cal, true_cal, lambda_noise)
    stats = compute_correlation(true_cal)
    return PreparedSeed(dataset, idx_train, idx_val, idx_test, profile, stats)


def spatial_class_weights(spatial: SpatialLabelMatrix) -> ClassWeights:
    """Presence/absence weights of the spatial classes over supervised rows."""
    active = spatial.active_rows()
    rows = spatial.labels[active]
    if rows.shape[0] == 0:
        return ClassWeights.uniform(spatial.labels.shape[1])
    lm = LabelMatrix.from_array(rows)
    return compute_class_weights(lm)


def training_data_for(prep: PreparedSeed, use_normalization: bool,
                      loss: LossConfig, seg_side: int) -> TrainingData:
    ds = prep.dataset
    x = prep.features_for(use_normalization)
    tr, va = prep.idx_train, prep.idx_val
    spatial_tr = SpatialLabelMatrix(ds.spatial.labels[tr], ds.spatial.available[tr])
    spatial_va = SpatialLabelMatrix(ds.spatial.labels[va], ds.spatial.available[va])
    seg_tr = seg_va = None
    if loss.use_seg:
        seg_all = segmentation_targets(ds.organ_masks, seg_side)
        seg_tr, seg_va = seg_all[tr], seg_all[va]
    return TrainingData(
        x_train=x[tr],
        labels_train=ds.noisy_labels.select(tr),
        x_val=x[va],
        labels_val=ds.noisy_labels.select(va),
        clean_val=ds.true_labels.labels[va],
        noise=prep.noise_profile if loss.use_noise else None,
        correlation=prep.correlation if loss.use_corr else None,
        spatial_train=spatial_tr if loss.use_loc else None,
        spatial_val=spatial_va if loss.use_loc else None,
        spatial_weights=spatial_class_weights(spatial_tr) if loss.use_loc else None,
        seg_train=seg_tr,
        seg_val=seg_va,
    )


@dataclass
class RunResult:
    config_name: str
    seed: int
    failed: bool = False
    error: str = ""
    test_auc: np.ndarray | None = None
    log_path: str = ""
    prediction_path: str = ""


def save_predictions_csv(path, sample_ids, class_names, labels, scores) -> None:
    with open(path, "w") as fh:
        header = ["sample_id"]
        header += [f"label_{n}" for n in class_names]
        header += [f"score_{n}" for n in class_names]
        fh.write(",".join(header) + "\n")
        for i, sid in enumerate(sample_ids):
            cells = [sid]
            cells += [str(int(v)) for v in labels[i]]
            cells += [repr(float(v)) for v in scores[i]]
            fh.write(",".join(cells) + "\n")


def load_predictions_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "sample_id":
            raise DataError(f"{path}:1: not a predictions file")
        label_cols = [h for h in header if h.startswith("label_")]
        score_cols = [h for h in header if h.startswith("score_")]
        names = tuple(h[len("label_"):] for h in label_cols)
        if tuple(h[len("score_"):] for h in score_cols) != names:
            raise DataError(f"{path}:1: label/score columns do not align")
        ids, labels, scores = [], [], []
        for lineno, line in enumerate(fh, start=2):
            cells = line.strip().split(",")
            if len(cells) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells")
            ids.append(cells[0])
            d = len(names)
            labels.append([float(v) for v in cells[1 : 1 + d]])
            scores.append([float(v) for v in cells[1 + d :]])
    return ids, names, np.array(labels), np.array(scores)


def run_single(prep: PreparedSeed, name: str, seed: int,
               spec: ExperimentSpec, outdir: str) -> RunResult:
    """Train one configuration on one prepared seed and persist artifacts."""
    use_norm, loss = preset_configuration(name)
    config = train_config_for(spec, loss, seed)
    result = RunResult(config_name=name, seed=seed)
    tag = f"{name.replace('+', 'plus_')}_seed{seed}"
    log_path = os.path.join(outdir, "logs", f"{tag}.csv")
    pred_path = os.path.join(outdir, "predictions", f"{tag}.csv")
    ckpt_path = os.path.join(outdir, "checkpoints", f"{tag}.bin")
    try:
        data = training_data_for(prep, use_norm, loss, config.seg_side)
        state, log = train(data, config)
        log.write_csv(log_path)
        save_checkpoint(state, ckpt_path)

        x_test = prep.features_for(use_norm)[prep.idx_test]
        pred = forward(state, x_test)
        ds = prep.dataset
        clean_test = ds.true_labels.labels[prep.idx_test]
        test_ids = [ds.true_labels.sample_ids[i] for i in prep.idx_test]
        save_predictions_csv(pred_path, test_ids, ds.true_labels.class_names,
                             clean_test, pred.abnormality)
        aucs = np.array([
            auc(pred.abnormality[:, j], clean_test[:, j]).auc
            for j in range(clean_test.shape[1])
        ])
        result.test_auc = aucs
        result.log_path = log_path
        result.prediction_path = pred_path
    except (TrainingDiverged, NoisyLabError) as exc:
        result.failed = True
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def run_experiment(spec: ExperimentSpec, workdir: str = ".") -> dict:
    """Run every (configuration, seed) pair and build the final report.

    A failed training marks that configuration/seed as failed in the report
    and the run continues.
    """
    outdir = os.path.join(workdir, spec.output_dir)
    for sub in ("logs", "predictions", "checkpoints"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    with open(os.path.join(outdir, "spec_echo.json"), "w") as fh:
        json.dump(dataclasses.asdict(spec), fh, sort_keys=True, indent=2)
        fh.write("\n")

    results: list[RunResult] = []
    for seed in spec.seeds:
        prep = prepare_seed(spec, seed)
        for name in spec.configurations:
            results.append(run_single(prep, name, seed, spec, outdir))

    status_path = os.path.join(outdir, "runs.csv")
    with open(status_path, "w") as fh:
        fh.write("config,seed,status,detail\n")
        for r in results:
            detail = r.error.replace(",", ";") if r.failed else r.log_path
            fh.write(f"{r.config_name},{r.seed},{'failed' if r.failed else 'ok'},{detail}\n")

    report = build_report(outdir, spec.configurations)
    report["runs"] = status_path
    return report


def _stable_seed(*parts) -> int:
    return zlib.crc32(":".join(str(p) for p in parts).encode()) & 0x7FFFFFFF


def build_report(outdir: str, config_order=None) -> dict:
    """Reduce prediction files into report.csv and an aligned report.txt.

    Per configuration and class: mean AUC across seeds, a percentile
    bootstrap CI on the pooled predictions, and a paired DeLong p-value
    against the pooled baseline predictions.
    """
    pred_dir = os.path.join(outdir, "predictions")
    if not os.path.isdir(pred_dir) or not os.listdir(pred_dir):
        raise NoResults(f"no prediction files under {pred_dir}")

    by_config: dict[str, list[str]] = {}
    for fname in sorted(os.listdir(pred_dir)):
        if not fname.endswith(".csv"):
            continue
        config_tag = fname.rsplit("_seed", 1)[0].replace("plus_", "+")
        by_config.setdefault(config_tag, []).append(os.path.join(pred_dir, fname))
    if config_order is None:
        config_order = [c for c in PRESET_ORDER if c in by_config]
        config_order += sorted(set(by_config) - set(config_order))
    else:
        config_order = [c for c in config_order if c in by_config]
    if not config_order:
        raise NoResults(f"no readable prediction files under {pred_dir}")

    pooled: dict[str, tuple] = {}
    per_seed_auc: dict[str, np.ndarray] = {}
    class_names: tuple[str, ...] = ()
    for name in config_order:
        labels_parts, score_parts, seed_aucs = [], [], []
        for path in by_config[name]:
            _, names, labels, scores = load_predictions_csv(path)
            class_names = names
            labels_parts.append(labels)
            score_parts.append(scores)
            seed_aucs.append([
                auc(scores[:, j], labels[:, j]).auc for j in range(len(names))
            ])
        pooled[name] = (np.vstack(labels_parts), np.vstack(score_parts))
        per_seed_auc[name] = np.array(seed_aucs)

    baseline_pool = pooled.get("baseline")
    rows = []
    for name in config_order:
        labels, scores = pooled[name]
        for j, cls in enumerate(class_names):
            mean_auc = float(per_seed_auc[name][:, j].mean())
            pool_auc = auc(scores[:, j], labels[:, j]).auc
            lo, hi = bootstrap_ci(scores[:, j], labels[:, j], n_boot=1000,
                                  seed=_stable_seed("ci", name, cls))
            p_value = ""
            if name != "baseline" and baseline_pool is not None:
                base_labels, base_scores = baseline_pool
                if base_labels.shape == labels.shape and (base_labels == labels).all():
                    cmp = delong_test(scores[:, j], base_scores[:, j], labels[:, j])
                    p_value = repr(cmp.p_value)
            rows.append({
                "config": name, "class": cls,
                "mean_auc": mean_auc, "pooled_auc": pool_auc,
                "ci_low": lo, "ci_high": hi,
                "p_vs_baseline": p_value,
                "n_seeds": per_seed_auc[name].shape[0],
                "sources": ";".join(os.path.relpath(p, outdir) for p in by_config[name]),
            })

    csv_path = os.path.join(outdir, "report.csv")
    with open(csv_path, "w") as fh:
        cols = ["config", "class", "mean_auc", "pooled_auc", "ci_low", "ci_high",
                "p_vs_baseline", "n_seeds", "sources"]
        fh.write(",".join(cols) + "\n")
        for row in rows:
            cells = []
            for c in cols:
                v = row[c]
                cells.append(repr(v) if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")

    txt_path = os.path.join(outdir, "report.txt")
    with open(txt_path, "w") as fh:
        width = max(12, max(len(c) for c in config_order) + 2)
        fh.write("mean test AUC per class (bootstrap 95% CI on pooled predictions)\n\n")
        fh.write("class".ljust(16) + "".join(c.ljust(width) for c in config_order) + "\n")
        for j, cls in enumerate(class_names):
            line = cls.ljust(16)
            for name in config_order:
                line += f"{per_seed_auc[name][:, j].mean():.3f}".ljust(width)
            fh.write(line + "\n")
        fh.write("\npaired DeLong p-value vs baseline (pooled predictions)\n\n")
        fh.write("class".ljust(16) + "".join(c.ljust(width) for c in config_order) + "\n")
        lookup = {(r["config"], r["class"]): r for r in rows}
        for cls in class_names:
            line = cls.ljust(16)
            for name in config_order:
                p = lookup[(name, cls)]["p_vs_baseline"]
                line += (f"{float(p):.4f}" if p else "-").ljust(width)
            fh.write(line + "\n")
        fh.write("\nsources:\n")
        for name in config_order:
            for path in by_config[name]:
                fh.write(f"  {name}: {os.path.relpath(path, outdir)}\n")

    return {"csv": csv_path, "txt": txt_path}
