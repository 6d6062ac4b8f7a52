"""Desk-scale synthetic ground truth: correlated multi-label targets via a
Gaussian copula, class-conditional label noise with prescribed
sensitivity/specificity, and toy chest-like images with organ masks and
coarse location labels.

Everything is deterministic given the config seed; child streams for label
draws, noise injection and rendering are derived from it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import DataError
from .labels import (
    N_SPATIAL_CLASSES,
    SPATIAL_CLASS_NAMES,
    LabelMatrix,
    SpatialLabelMatrix,
    save_label_csv,
    load_label_csv,
)
from .pgm import read_pgm, write_pgm

DEFAULT_CLASS_NAMES = ("effusion", "cardiomegaly", "consolidation", "atelectasis", "mass")

# measured (sensitivity, specificity) of the five modeled abnormality labels
DEFAULT_NOISE_RATES = (
    (0.300, 0.966),
    (0.342, 0.986),
    (0.129, 0.949),
    (0.221, 0.970),
    (0.364, 0.972),
)

DEFAULT_PREVALENCE = (0.25, 0.15, 0.20, 0.25, 0.15)

# comorbidity structure: the fluid/opacity classes travel together, the
# cardiac class mostly alone
DEFAULT_LATENT_CORRELATION = (
    (1.00, 0.15, 0.55, 0.50, 0.25),
    (0.15, 1.00, 0.10, 0.15, 0.05),
    (0.55, 0.10, 1.00, 0.55, 0.30),
    (0.50, 0.15, 0.55, 1.00, 0.25),
    (0.25, 0.05, 0.30, 0.25, 1.00),
)

# per-class blob radius (fraction of image side) and added contrast
DEFAULT_BLOB_RADIUS = (0.11, 0.10, 0.09, 0.075, 0.055)
DEFAULT_BLOB_CONTRAST = (140.0, 160.0, 120.0, 150.0, 200.0)

# characteristic blob location per class: preferred lung side and vertical
# position (0 = top of lung, 1 = bottom); abnormalities cluster in typical
# regions, which keeps them learnable for a trunk without convolutions
DEFAULT_BLOB_SIDE = ("L", "E", "R", "L", "R")
DEFAULT_BLOB_HOME = (0.85, 0.5, 0.7, 0.25, 0.4)
DEFAULT_BLOB_JITTER = 0.12


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int = 1000
    n_classes: int = 5
    prevalence: tuple = DEFAULT_PREVALENCE
    latent_correlation: tuple = DEFAULT_LATENT_CORRELATION
    noise_rates: tuple = DEFAULT_NOISE_RATES
    class_names: tuple = DEFAULT_CLASS_NAMES
    image_size: int = 32
    seed: int = 0
    cardiac_class: int = 1
    spatial_classes: tuple = (0, 2, 3, 4)
    blob_radius: tuple = DEFAULT_BLOB_RADIUS
    blob_contrast: tuple = DEFAULT_BLOB_CONTRAST
    blob_side: tuple = DEFAULT_BLOB_SIDE
    blob_home: tuple = DEFAULT_BLOB_HOME
    blob_jitter: float = DEFAULT_BLOB_JITTER
    pixel_noise: float = 25.0
    intensity_scale: tuple = (1.0, 1.0)
    intensity_offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        d = self.n_classes
        if self.n_samples < 1 or d < 1:
            raise DataError("need at least one sample and one class")
        if len(self.prevalence) != d or len(self.noise_rates) != d:
            raise DataError("prevalence/noise_rates length must equal n_classes")
        if len(self.class_names) != d:
            raise DataError("class_names length must equal n_classes")
        if len(self.blob_radius) != d or len(self.blob_contrast) != d:
            raise DataError("blob_radius/blob_contrast length must equal n_classes")
        if len(self.blob_side) != d or len(self.blob_home) != d:
            raise DataError("blob_side/blob_home length must equal n_classes")
        if any(s not in ("L", "R", "E") for s in self.blob_side):
            raise DataError("blob_side entries must be 'L', 'R' or 'E'")
        if any(not 0.0 < p < 1.0 for p in self.prevalence):
            raise DataError("prevalences must lie strictly inside (0, 1)")
        for sens, spec in self.noise_rates:
            if not (0.0 <= sens <= 1.0 and 0.0 <= spec <= 1.0):
                raise DataError("noise rates must lie in [0, 1]")
        corr = np.asarray(self.latent_correlation, dtype=np.float64)
        if corr.shape != (d, d):
            raise DataError("latent correlation must be D x D")
        _check_correlation_matrix(corr)

    def correlation_matrix(self) -> np.ndarray:
        return np.asarray(self.latent_correlation, dtype=np.float64)


def _check_correlation_matrix(corr: np.ndarray) -> None:
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise DataError("latent correlation must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise DataError("latent correlation must have a unit diagonal")
    eigvals = np.linalg.eigvalsh(corr)
    if eigvals.min() < -1e-10:
        suggestion = _nearest_psd(corr)
        raise DataError(
            "latent correlation is not positive semidefinite "
            f"(min eigenvalue {eigvals.min():.3e}); nearest PSD candidate:\n"
            f"{np.array_str(suggestion, precision=4)}"
        )


def _nearest_psd(corr: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(corr)
    fixed = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    scale = np.sqrt(np.clip(np.diag(fixed), 1e-12, None))
    fixed = fixed / np.outer(scale, scale)
    np.fill_diagonal(fixed, 1.0)
    return fixed


def _correlation_root(corr: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        # PSD but singular: fall back to an eigenvalue square root
        vals, vecs = np.linalg.eigh(corr)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def generate_labels(config: GeneratorConfig, seed: int | None = None):
    """Draw correlated binary labels from a Gaussian copula.

    Latents are multivariate normal with the configured correlation; each
    class thresholds its latent at the quantile matching the target
    prevalence. Returns (labels, latents), both F x D.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    corr = config.correlation_matrix()
    root = _correlation_root(corr)
    z = rng.standard_normal((config.n_samples, config.n_classes)) @ root.T
    thresholds = ndtri(1.0 - np.asarray(config.prevalence))
    labels = (z > thresholds).astype(np.float64)
    return labels, z


def inject_noise(true_labels: np.ndarray, noise_rates, seed: int) -> np.ndarray:
    """Flip labels through a class-conditional channel.

    Each positive survives with probability sensitivity, each negative with
    probability specificity, independently per entry.
    """
    truth = np.asarray(true_labels, dtype=np.float64)
    rates = np.asarray(noise_rates, dtype=np.float64)
    if rates.shape != (truth.shape[1], 2):
        raise DataError("noise_rates must provide (sensitivity, specificity) per class")
    if ((rates < 0) | (rates > 1)).any():
        raise DataError("noise rates must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    keep_prob = truth * rates[:, 0] + (1.0 - truth) * rates[:, 1]
    keep = rng.random(truth.shape) < keep_prob
    return np.where(keep, truth, 1.0 - truth)


@dataclass(frozen=True)
class _Ellipse:
    cx: float
    cy: float
    ax: float
    ay: float

    def mask(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return ((xs - self.cx) / self.ax) ** 2 + ((ys - self.cy) / self.ay) ** 2 <= 1.0


def _vertical_bands(blob_lo: float, blob_hi: float, lung_top: float, lung_bottom: float):
    """Map a blob's vertical extent to the five height classes.

    The lung bounding box splits into equal-height thirds; a blob overlapping
    one third gets that band, straddling two adjacent thirds gets the
    in-between band, and covering all three counts as diffuse.
    """
    height = lung_bottom - lung_top
    edges = (lung_top + height / 3.0, lung_top + 2.0 * height / 3.0)
    thirds = set()
    if blob_lo < edges[0]:
        thirds.add(0)
    if blob_hi > edges[0] and blob_lo < edges[1]:
        thirds.add(1)
    if blob_hi > edges[1]:
        thirds.add(2)
    return thirds


@dataclass
class SyntheticDataset:
    """One generated dataset: labels, images, masks and location labels."""

    config: GeneratorConfig
    true_labels: LabelMatrix
    noisy_labels: LabelMatrix
    latents: np.ndarray | None
    images: np.ndarray
    organ_masks: np.ndarray
    spatial: SpatialLabelMatrix

    @property
    def n_samples(self) -> int:
        return self.images.shape[0]


def render_image(rng: np.random.Generator, true_label_row: np.ndarray,
                 config: GeneratorConfig):
    """Render one sample: organs, per-positive-class blobs, noise, affine shift.

    Returns (image, organ_masks, spatial_labels, available) where organ_masks
    is 2 x N x N (lungs union, heart) and spatial labels follow the
    renderer's own geometry: blob pixels never leave the owning organ.
    """
    n = config.image_size
    if n < 32:
        raise DataError("rendering needs an image size of at least 32")
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)

    jit = rng.uniform(-0.02, 0.02, size=6)
    left = _Ellipse(0.32 + jit[0], 0.52 + jit[1], 0.15, 0.28)
    right = _Ellipse(0.68 + jit[2], 0.52 + jit[3], 0.15, 0.28)
    heart = _Ellipse(0.54 + jit[4], 0.70 + jit[5], 0.16, 0.17)

    lungs_mask = left.mask(xs, ys) | right.mask(xs, ys)
    heart_mask = heart.mask(xs, ys)

    image = np.full((n, n), 550.0)
    image += 100.0 * (ys - 0.5)  # mild exposure gradient
    image[lungs_mask] = 250.0
    image[heart_mask] = 750.0

    spatial = np.zeros(N_SPATIAL_CLASSES)
    available = np.zeros(config.n_classes, dtype=bool)
    lung_top = min(left.cy - left.ay, right.cy - right.ay)
    lung_bottom = max(left.cy + left.ay, right.cy + right.ay)
    n_lung_blobs = 0

    for k in range(config.n_classes):
        if true_label_row[k] != 1.0:
            continue
        radius = config.blob_radius[k]
        contrast = config.blob_contrast[k]
        if k == config.cardiac_class:
            bx = heart.cx + rng.uniform(-0.3, 0.3) * heart.ax
            by = heart.cy + rng.uniform(-0.3, 0.3) * heart.ay
            blob = _Ellipse(bx, by, radius, radius)
            image += contrast * (blob.mask(xs, ys) & heart_mask)
            continue
        n_blobs = 2 if rng.random() < 0.15 else 1
        stretch = 3.0 if rng.random() < 0.10 else 1.0  # occasional diffuse blob
        side = config.blob_side[k]
        if side == "E":
            first_lung = left if rng.random() < 0.5 else right
        else:
            first_lung = left if side == "L" else right
        for b in range(n_blobs):
            # a second blob appears in the opposite lung ("independent parts")
            lung = first_lung if b == 0 else (right if first_lung is left else left)
            jx, jy = rng.uniform(-1.0, 1.0, size=2) * config.blob_jitter
            bx = lung.cx + jx * 2.0 * lung.ax
            by = lung.cy - lung.ay + (config.blob_home[k] + jy) * 2.0 * lung.ay
            blob = _Ellipse(bx, by, radius, radius * stretch)
            image += contrast * (blob.mask(xs, ys) & lungs_mask)
            if k in config.spatial_classes:
                n_lung_blobs += 1
                spatial[0 if lung is left else 1] = 1.0
                thirds = _vertical_bands(by - radius * stretch, by + radius * stretch,
                                         lung_top, lung_bottom)
                if thirds == {0}:
                    spatial[2] = 1.0
                elif thirds == {0, 1}:
                    spatial[3] = 1.0
                elif thirds == {1}:
                    spatial[4] = 1.0
                elif thirds == {1, 2}:
                    spatial[5] = 1.0
                elif thirds == {2}:
                    spatial[6] = 1.0
                else:
                    spatial[7] = 1.0  # spans all thirds: diffuse
        if k in config.spatial_classes:
            available[k] = True
    if n_lung_blobs >= 2:
        spatial[8] = 1.0

    image += config.pixel_noise * rng.standard_normal((n, n))
    scale = rng.uniform(*config.intensity_scale)
    offset = rng.uniform(*config.intensity_offset)
    image = np.maximum(scale * image + offset, 0.0)

    masks = np.stack([lungs_mask, heart_mask]).astype(np.uint8)
    return image, masks, spatial, available


def generate_dataset(config: GeneratorConfig) -> SyntheticDataset:
    """Full pipeline: copula labels, noise channel, rendered images."""
    label_seed, noise_seed, render_seed = (
        s.generate_state(1)[0] for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    truth, latents = generate_labels(config, int(label_seed))
    noisy = inject_noise(truth, config.noise_rates, int(noise_seed))

    rng = np.random.default_rng(int(render_seed))
    n = config.image_size
    images = np.empty((config.n_samples, n, n))
    masks = np.empty((config.n_samples, 2, n, n), dtype=np.uint8)
    spatial = np.zeros((config.n_samples, N_SPATIAL_CLASSES))
    available = np.zeros((config.n_samples, config.n_classes), dtype=bool)
    for i in range(config.n_samples):
        images[i], masks[i], spatial[i], available[i] = render_image(rng, truth[i], config)

    ids = [f"s{i:06d}" for i in range(config.n_samples)]
    true_lm = LabelMatrix.from_array(truth, config.class_names, ids)
    noisy_lm = LabelMatrix.from_array(noisy, config.class_names, ids)
    return SyntheticDataset(
        config, true_lm, noisy_lm, latents, images, masks,
        SpatialLabelMatrix(spatial, available),
    )


def split_ownership(labels: LabelMatrix, tags, ownership) -> LabelMatrix:
    """Re-tag samples with dataset ownership for masked multi-dataset training."""
    return LabelMatrix(
        labels.labels, labels.class_names, labels.sample_ids,
        tuple(tags), {t: tuple(ix) for t, ix in ownership.items()},
    )


# ---------------------------------------------------------------------------
# Dataset directory I/O

MANIFEST_NAME = "manifest"


def _manifest_lines(config: GeneratorConfig) -> list[str]:
    corr = config.correlation_matrix()
    lines = [
        "kind = dataset_manifest",
        f"seed = {config.seed}",
        f"n_samples = {config.n_samples}",
        f"n_classes = {config.n_classes}",
        f"class_names = {','.join(config.class_names)}",
        f"image_size = {config.image_size}",
        f"prevalence = {','.join(repr(float(p)) for p in config.prevalence)}",
        "noise_rates = " + ";".join(f"{s!r},{p!r}" for s, p in config.noise_rates),
        f"cardiac_class = {config.cardiac_class}",
        f"spatial_classes = {','.join(str(k) for k in config.spatial_classes)}",
        f"blob_radius = {','.join(repr(float(r)) for r in config.blob_radius)}",
        f"blob_contrast = {','.join(repr(float(c)) for c in config.blob_contrast)}",
        f"blob_side = {','.join(config.blob_side)}",
        f"blob_home = {','.join(repr(float(h)) for h in config.blob_home)}",
        f"blob_jitter = {config.blob_jitter!r}",
        f"pixel_noise = {config.pixel_noise!r}",
        f"intensity_scale = {config.intensity_scale[0]!r},{config.intensity_scale[1]!r}",
        f"intensity_offset = {config.intensity_offset[0]!r},{config.intensity_offset[1]!r}",
        "vertical_band_rule = equal-height thirds of the lung bounding box",
    ]
    for row in corr:
        lines.append("corr_row = " + ",".join(repr(float(v)) for v in row))
    return lines


def write_dataset(dataset: SyntheticDataset, outdir) -> None:
    """Write labels, spatial labels, images, masks and the config manifest."""
    os.makedirs(outdir, exist_ok=True)
    os.makedirs(os.path.join(outdir, "images"), exist_ok=True)
    os.makedirs(os.path.join(outdir, "masks"), exist_ok=True)
    save_label_csv(dataset.true_labels, os.path.join(outdir, "labels_true.csv"))
    save_label_csv(dataset.noisy_labels, os.path.join(outdir, "labels_noisy.csv"))

    names = dataset.true_labels.class_names
    with open(os.path.join(outdir, "spatial.csv"), "w") as fh:
        header = ["sample_id", *SPATIAL_CLASS_NAMES, *(f"avail_{n}" for n in names)]
        fh.write(",".join(header) + "\n")
        for i, sid in enumerate(dataset.true_labels.sample_ids):
            row = [sid]
            row += [str(int(v)) for v in dataset.spatial.labels[i]]
            row += [str(int(v)) for v in dataset.spatial.available[i]]
            fh.write(",".join(row) + "\n")

    for i, sid in enumerate(dataset.true_labels.sample_ids):
        write_pgm(os.path.join(outdir, "images", f"{sid}.pgm"), dataset.images[i])
        write_pgm(os.path.join(outdir, "masks", f"{sid}_lungs.pgm"),
                  dataset.organ_masks[i, 0] * 255, maxval=255)
        write_pgm(os.path.join(outdir, "masks", f"{sid}_heart.pgm"),
                  dataset.organ_masks[i, 1] * 255, maxval=255)

    with open(os.path.join(outdir, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(_manifest_lines(dataset.config)) + "\n")


def read_manifest(path) -> GeneratorConfig:
    keys: dict[str, str] = {}
    corr_rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "corr_row":
                corr_rows.append(tuple(float(v) for v in value.split(",")))
            else:
                keys[key] = value
    if keys.get("kind") != "dataset_manifest":
        raise DataError(f"{path}: not a dataset manifest")
    noise = tuple(
        tuple(float(v) for v in pair.split(","))
        for pair in keys["noise_rates"].split(";")
    )
    return GeneratorConfig(
        n_samples=int(keys["n_samples"]),
        n_classes=int(keys["n_classes"]),
        prevalence=tuple(float(v) for v in keys["prevalence"].split(",")),
        latent_correlation=tuple(corr_rows),
        noise_rates=noise,
        class_names=tuple(keys["class_names"].split(",")),
        image_size=int(keys["image_size"]),
        seed=int(keys["seed"]),
        cardiac_class=int(keys["cardiac_class"]),
        spatial_classes=tuple(int(v) for v in keys["spatial_classes"].split(",") if v),
        blob_radius=tuple(float(v) for v in keys["blob_radius"].split(",")),
        blob_contrast=tuple(float(v) for v in keys["blob_contrast"].split(",")),
        blob_side=tuple(keys["blob_side"].split(",")),
        blob_home=tuple(float(v) for v in keys["blob_home"].split(",")),
        blob_jitter=float(keys["blob_jitter"]),
        pixel_noise=float(keys["pixel_noise"]),
        intensity_scale=tuple(float(v) for v in keys["intensity_scale"].split(",")),
        intensity_offset=tuple(float(v) for v in keys["intensity_offset"].split(",")),
    )


def read_dataset(outdir) -> SyntheticDataset:
    """Load a dataset directory written by :func:`write_dataset`."""
    config = read_manifest(os.path.join(outdir, MANIFEST_NAME))
    true_lm = load_label_csv(os.path.join(outdir, "labels_true.csv"))
    noisy_lm = load_label_csv(os.path.join(outdir, "labels_noisy.csv"))

    with open(os.path.join(outdir, "spatial.csv")) as fh:
        header = fh.readline().strip().split(",")
        expected = 1 + N_SPATIAL_CLASSES + config.n_classes
        if len(header) != expected:
            raise DataError("spatial.csv has unexpected column count")
        spatial_rows, avail_rows = [], []
        for line in fh:
            cells = line.strip().split(",")
            spatial_rows.append([float(v) for v in cells[1 : 1 + N_SPATIAL_CLASSES]])
            avail_rows.append([v == "1" for v in cells[1 + N_SPATIAL_CLASSES :]])

    n = config.image_size
    images = np.empty((config.n_samples, n, n))
    masks = np.empty((config.n_samples, 2, n, n), dtype=np.uint8)
    for i, sid in enumerate(true_lm.sample_ids):
        images[i] = read_pgm(os.path.join(outdir, "images", f"{sid}.pgm"))
        masks[i, 0] = read_pgm(os.path.join(outdir, "masks", f"{sid}_lungs.pgm")) > 0
        masks[i, 1] = read_pgm(os.path.join(outdir, "masks", f"{sid}_heart.pgm")) > 0

    return SyntheticDataset(
        config, true_lm, noisy_lm, None, images, masks,
        SpatialLabelMatrix(np.array(spatial_rows), np.array(avail_rows)),
    )
