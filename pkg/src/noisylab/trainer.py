"""A small multi-task network trained with reverse-mode gradients and Adam.

Shared trunk of two fully-connected ReLU layers; sigmoid heads for
abnormality and spatial classification plus a linear+sigmoid decoder that
predicts organ masks at reduced resolution. The training loop is
single-threaded and bit-reproducible per seed: initialization, batch order
and every stochastic draw are fixed by the config seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError, UndefinedAuc
from .labels import (
    ClassWeights,
    CorrelationStats,
    LabelMatrix,
    NoiseProfile,
    SpatialLabelMatrix,
    compute_class_weights,
)
from .losses import LossConfig, LossTargets, Predictions, composite_loss
from .metrics import auc
from .normalization import GrayImage, SmoothingConfig, normalize

N_SPATIAL = 9


@dataclass(frozen=True)
class ModelLayout:
    """Shapes of the trunk, heads and decoder; fixes the flat param layout."""

    input_dim: int
    hidden: int
    n_classes: int
    n_spatial: int = N_SPATIAL
    seg_side: int = 16

    @property
    def seg_dim(self) -> int:
        return 2 * self.seg_side * self.seg_side

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        h = self.hidden
        return [
            ("w1", (self.input_dim, h)), ("b1", (h,)),
            ("w2", (h, h)), ("b2", (h,)),
            ("w_abn", (h, self.n_classes)), ("b_abn", (self.n_classes,)),
            ("w_loc", (h, self.n_spatial)), ("b_loc", (self.n_spatial,)),
            ("w_seg", (h, self.seg_dim)), ("b_seg", (self.seg_dim,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out = {}
        offset = 0
        for name, shape in self.shapes():
            size = int(np.prod(shape))
            out[name] = (slice(offset, offset + size), shape)
            offset += size
        return out


@dataclass
class ModelState:
    """Flat parameter vector plus Adam moment buffers and the step counter."""

    layout: ModelLayout
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    def view(self, name: str) -> np.ndarray:
        sl, shape = self.layout.slices()[name]
        return self.params[sl].reshape(shape)

    def copy(self) -> "ModelState":
        return ModelState(self.layout, self.params.copy(), self.adam_m.copy(),
                          self.adam_v.copy(), self.step_count)


def init_model(layout: ModelLayout, seed: int) -> ModelState:
    """Glorot-uniform weights, zero biases, zeroed Adam moments."""
    rng = np.random.default_rng(seed)
    params = np.zeros(layout.n_params)
    for name, (sl, shape) in layout.slices().items():
        if name.startswith("b"):
            continue
        fan_in, fan_out = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[sl] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    zeros = np.zeros_like(params)
    return ModelState(layout, params, zeros.copy(), zeros.copy(), 0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(state: ModelState, x: np.ndarray, with_cache: bool = False):
    """Run the network; returns Predictions (and the cache for backward)."""
    w1, b1 = state.view("w1"), state.view("b1")
    w2, b2 = state.view("w2"), state.view("b2")
    z1 = x @ w1 + b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ w2 + b2
    h2 = np.maximum(z2, 0.0)
    p_abn = _sigmoid(h2 @ state.view("w_abn") + state.view("b_abn"))
    p_loc = _sigmoid(h2 @ state.view("w_loc") + state.view("b_loc"))
    p_seg = _sigmoid(h2 @ state.view("w_seg") + state.view("b_seg"))
    for name, arr in (("abnormality", p_abn), ("spatial", p_loc), ("segmentation", p_seg)):
        if not np.isfinite(arr).all():
            raise NumericalError(
                f"non-finite {name} activations; |params|_max={np.abs(state.params).max():.3e}"
            )
    pred = Predictions(p_abn, p_loc, p_seg)
    if not with_cache:
        return pred
    return pred, (x, z1, h1, z2, h2)


def backward(state: ModelState, x: np.ndarray, targets: LossTargets,
             cfg: LossConfig):
    """Loss and full parameter gradient for one batch.

    Returns (gradient vector, LossResult, Predictions). Gradients are raw
    sums over the batch; the training loop divides by batch size.
    """
    pred, cache = forward(state, x, with_cache=True)
    _, z1, h1, z2, h2 = cache
    loss = composite_loss(pred, targets, cfg)

    dz_abn = loss.grad_abnormality * pred.abnormality * (1.0 - pred.abnormality)
    dh2 = dz_abn @ state.view("w_abn").T
    grads = {
        "w_abn": h2.T @ dz_abn, "b_abn": dz_abn.sum(axis=0),
        "w_loc": np.zeros_like(state.view("w_loc")),
        "b_loc": np.zeros_like(state.view("b_loc")),
        "w_seg": np.zeros_like(state.view("w_seg")),
        "b_seg": np.zeros_like(state.view("b_seg")),
    }
    if loss.grad_spatial is not None:
        dz_loc = loss.grad_spatial * pred.spatial * (1.0 - pred.spatial)
        grads["w_loc"] = h2.T @ dz_loc
        grads["b_loc"] = dz_loc.sum(axis=0)
        dh2 = dh2 + dz_loc @ state.view("w_loc").T
    if loss.grad_segmentation is not None:
        dz_seg = loss.grad_segmentation * pred.segmentation * (1.0 - pred.segmentation)
        grads["w_seg"] = h2.T @ dz_seg
        grads["b_seg"] = dz_seg.sum(axis=0)
        dh2 = dh2 + dz_seg @ state.view("w_seg").T

    dz2 = dh2 * (z2 > 0.0)
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ state.view("w2").T
    dz1 = dh1 * (z1 > 0.0)
    grads["w1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)

    flat = np.zeros_like(state.params)
    for name, (sl, shape) in state.layout.slices().items():
        flat[sl] = grads[name].ravel()
    return flat, loss, pred


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 30
    plateau_factor: float = 10.0
    plateau_patience: int = 3
    early_stop_patience: int = 6
    hidden: int = 64
    seg_side: int = 16
    restore_best: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        positive = (
            self.learning_rate, self.beta1, self.beta2, self.epsilon,
            self.batch_size, self.max_epochs, self.plateau_factor,
            self.plateau_patience, self.early_stop_patience, self.hidden,
            self.seg_side,
        )
        if any(v <= 0 for v in positive):
            raise DataError("all numeric training hyperparameters must be positive")


def adam_step(state: ModelState, grad: np.ndarray, config: TrainConfig,
              learning_rate: float | None = None) -> ModelState:
    """Bias-corrected Adam update; increments the step counter."""
    if grad.shape != state.params.shape:
        raise DataError("gradient shape does not match parameters")
    lr = config.learning_rate if learning_rate is None else learning_rate
    t = state.step_count + 1
    m = config.beta1 * state.adam_m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.adam_v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    params = state.params - update
    if not np.isfinite(params).all():
        raise NumericalError(f"non-finite parameters after Adam step {t}")
    return ModelState(state.layout, params, m, v, t)


@dataclass
class TrainingData:
    """Everything the training loop consumes: features, targets, calibration."""

    x_train: np.ndarray
    labels_train: LabelMatrix
    x_val: np.ndarray
    labels_val: LabelMatrix
    clean_val: np.ndarray | None = None
    noise: NoiseProfile | None = None
    correlation: CorrelationStats | None = None
    spatial_train: SpatialLabelMatrix | None = None
    spatial_weights: ClassWeights | None = None
    seg_train: np.ndarray | None = None
    seg_val: np.ndarray | None = None
    spatial_val: SpatialLabelMatrix | None = None


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    val_loss: float
    val_auc_clean: np.ndarray
    val_auc_noisy: np.ndarray


@dataclass
class TrainingLog:
    class_names: tuple[str, ...]
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = -1
    batch_divisor: float = 1.0  # losses are logged as per-sample means

    def header(self) -> list[str]:
        cols = ["epoch", "lr", "train_loss", "val_loss"]
        cols += [f"val_auc_clean_{n}" for n in self.class_names]
        cols += [f"val_auc_noisy_{n}" for n in self.class_names]
        return cols

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.header()) + "\n")
            for rec in self.epochs:
                cells = [str(rec.epoch), repr(rec.learning_rate),
                         repr(rec.train_loss), repr(rec.val_loss)]
                cells += [repr(float(v)) for v in rec.val_auc_clean]
                cells += [repr(float(v)) for v in rec.val_auc_noisy]
                fh.write(",".join(cells) + "\n")
            fh.write(f"# best_epoch={self.best_epoch} stopped_early={self.stopped_early}"
                     f" batch_divisor={self.batch_divisor!r}\n")


class TrainingDiverged(NumericalError):
    """Raised when validation loss turns non-finite; carries the partial log."""

    def __init__(self, message: str, log: TrainingLog):
        super().__init__(message)
        self.log = log


def _per_class_auc(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = np.full(pred.shape[1], np.nan)
    for j in range(pred.shape[1]):
        try:
            out[j] = auc(pred[:, j], labels[:, j]).auc
        except UndefinedAuc:
            pass
    return out


def train(data: TrainingData, config: TrainConfig):
    """Run the full loop; returns (ModelState, TrainingLog).

    LR drops by plateau_factor when validation loss has not improved for
    plateau_patience epochs; training stops early after early_stop_patience
    epochs without improvement. With restore_best the returned parameters
    are the ones from the best validation epoch.
    """
    f_train = data.x_train.shape[0]
    if config.batch_size > f_train:
        raise DataError("batch_size exceeds training set size")
    layout = ModelLayout(
        input_dim=data.x_train.shape[1],
        hidden=config.hidden,
        n_classes=data.labels_train.n_classes,
        seg_side=config.seg_side,
    )
    if data.seg_train is not None and data.seg_train.shape[1] != layout.seg_dim:
        raise DataError("segmentation targets do not match the decoder resolution")

    seed_seq = np.random.SeedSequence(config.seed)
    init_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in seed_seq.spawn(2))
    state = init_model(layout, init_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)

    weights = compute_class_weights(data.labels_train, respect_ownership=True)
    mask_train = data.labels_train.ownership_mask()
    mask_val = data.labels_val.ownership_mask()

    def targets_for(idx=None):
        if idx is None:
            return LossTargets(
                labels=data.labels_val.labels, weights=weights, mask=mask_val,
                noise=data.noise, correlation=data.correlation,
                spatial=data.spatial_val, spatial_weights=data.spatial_weights,
                segmentation=data.seg_val,
            )
        return LossTargets(
            labels=data.labels_train.labels[idx], weights=weights,
            mask=mask_train[idx], noise=data.noise, correlation=data.correlation,
            spatial=None if data.spatial_train is None else SpatialLabelMatrix(
                data.spatial_train.labels[idx], data.spatial_train.available[idx]),
            spatial_weights=data.spatial_weights,
            segmentation=None if data.seg_train is None else data.seg_train[idx],
        )

    log = TrainingLog(class_names=data.labels_train.class_names,
                      batch_divisor=float(config.batch_size))
    lr = config.learning_rate
    best_val = np.inf
    best_state = state.copy()
    since_improve = 0
    plateau_counter = 0

    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_rng.permutation(f_train)
        epoch_loss = 0.0
        for start in range(0, f_train, config.batch_size):
            idx = perm[start : start + config.batch_size]
            grad, loss, _ = backward(state, data.x_train[idx], targets_for(idx), config.loss)
            state = adam_step(state, grad / len(idx), config, lr)
            epoch_loss += loss.value
        train_loss = epoch_loss / f_train

        val_pred = forward(state, data.x_val)
        val_loss = composite_loss(val_pred, targets_for(), config.loss).value / len(data.x_val)
        if not np.isfinite(val_loss):
            log.stopped_early = True
            raise TrainingDiverged(f"validation loss non-finite at epoch {epoch}", log)
        auc_noisy = _per_class_auc(val_pred.abnormality, data.labels_val.labels)
        if data.clean_val is not None:
            auc_clean = _per_class_auc(val_pred.abnormality, data.clean_val)
        else:
            auc_clean = np.full(layout.n_classes, np.nan)
        log.epochs.append(EpochRecord(epoch, lr, train_loss, val_loss, auc_clean, auc_noisy))

        if val_loss < best_val:
            best_val = val_loss
            best_state = state.copy()
            log.best_epoch = epoch
            since_improve = 0
            plateau_counter = 0
        else:
            since_improve += 1
            plateau_counter += 1
            if plateau_counter >= config.plateau_patience:
                lr /= config.plateau_factor
                plateau_counter = 0
            if since_improve >= config.early_stop_patience:
                log.stopped_early = True
                break

    final = best_state if config.restore_best else state
    return final, log


# ---------------------------------------------------------------------------
# Feature and target preparation

def block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool the last two axes by an integer factor."""
    *lead, h, w = arr.shape
    if h % factor or w % factor:
        raise DataError("image side must be divisible by the pooling factor")
    shaped = arr.reshape(*lead, h // factor, factor, w // factor, factor)
    return shaped.mean(axis=(-3, -1))


def build_features(images: np.ndarray, use_normalization: bool,
                   smoothing: SmoothingConfig = SmoothingConfig(),
                   feature_side: int = 16, raw_scale: float = 65535.0) -> np.ndarray:
    """Flattened, downsampled pixel features.

    With normalization each image is dynamically windowed into [0, 1];
    without it intensities are only divided by a fixed global constant, so
    per-image brightness/contrast variation stays in the features.
    """
    f, n, _ = images.shape
    if n % feature_side:
        raise DataError("feature_side must divide the image side")
    factor = n // feature_side
    out = np.empty((f, feature_side * feature_side))
    for i in range(f):
        if use_normalization:
            pixels = normalize(GrayImage(images[i]), smoothing).pixels
        else:
            pixels = images[i] / raw_scale
        out[i] = block_mean(pixels, factor).ravel()
    return out


def segmentation_targets(organ_masks: np.ndarray, seg_side: int) -> np.ndarray:
    """Downsample binary organ masks to the decoder resolution and flatten."""
    f, c, n, _ = organ_masks.shape
    if n % seg_side:
        raise DataError("seg_side must divide the mask side")
    factor = n // seg_side
    pooled = block_mean(organ_masks.astype(np.float64), factor)
    return (pooled >= 0.5).astype(np.float64).reshape(f, c * seg_side * seg_side)


def upsample_bilinear(maps: np.ndarray, out_side: int) -> np.ndarray:
    """Bilinear upsample of (..., s, s) maps to (..., out_side, out_side)."""
    *lead, s, _ = maps.shape
    pos = (np.arange(out_side) + 0.5) * s / out_side - 0.5
    lo = np.clip(np.floor(pos).astype(int), 0, s - 1)
    hi = np.clip(lo + 1, 0, s - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    rows = maps[..., lo, :] * (1.0 - frac)[:, None] + maps[..., hi, :] * frac[:, None]
    cols = rows[..., :, lo] * (1.0 - frac) + rows[..., :, hi] * frac
    return cols


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"NLCKPT1\n"


def save_checkpoint(state: ModelState, path) -> None:
    """Versioned binary layout: magic, layout metadata, params, moments, step."""
    lay = state.layout
    header = struct.pack(
        "<5IQ", lay.input_dim, lay.hidden, lay.n_classes, lay.n_spatial,
        lay.seg_side, state.step_count,
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header)
        fh.write(state.params.astype("<f8").tobytes())
        fh.write(state.adam_m.astype("<f8").tobytes())
        fh.write(state.adam_v.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise DataError(f"{path}: not a model checkpoint")
    header_size = struct.calcsize("<5IQ")
    fields = struct.unpack_from("<5IQ", blob, len(_MAGIC))
    layout = ModelLayout(*fields[:5])
    step_count = fields[5]
    body = np.frombuffer(blob, dtype="<f8", offset=len(_MAGIC) + header_size)
    n = layout.n_params
    if body.size != 3 * n:
        raise DataError(f"{path}: checkpoint payload does not match layout")
    return ModelState(layout, body[:n].copy(), body[n : 2 * n].copy(),
                      body[2 * n :].copy(), int(step_count))
