"""Training objectives with analytic gradients with respect to model outputs.

Implements the class-weighted BCE, the noise-prior and correlation-prior
regularized variants, segmentation MSE, the dynamically activated spatial
BCE, and the masked multi-task composite. Values are sums over samples
(no batch-size division); the trainer divides by batch size and records
the factor, so oracle comparisons happen on the raw sums.

Sign convention: both regularizers sit inside the outer loss negation, so
each regularization term is a nonnegative penalty (for nonnegative
covariance) pushing predictions away from fully trusting the given label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .labels import ClassWeights, CorrelationStats, NoiseProfile, SpatialLabelMatrix

EPSILON = 1e-7


@dataclass(frozen=True)
class Predictions:
    """Model outputs for one batch: abnormality and spatial probabilities
    plus flattened segmentation maps. Optional heads may be None."""

    abnormality: np.ndarray
    spatial: np.ndarray | None = None
    segmentation: np.ndarray | None = None

    def __post_init__(self):
        for name in ("abnormality", "spatial", "segmentation"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise DataError(f"{name} predictions contain non-finite values")
            object.__setattr__(self, name, arr)


@dataclass
class LossResult:
    """Scalar loss with gradients matching the prediction shapes.

    ``per_class_breakdown`` follows the class axis of the loss that produced
    it: D for abnormality losses, L for the spatial loss, one entry per
    segmentation channel for the MSE.
    """

    value: float
    grad_abnormality: np.ndarray
    grad_spatial: np.ndarray | None = None
    grad_segmentation: np.ndarray | None = None
    per_class_breakdown: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise DataError("loss value is not finite")


def _resolve_mask(mask, shape, degenerate) -> np.ndarray:
    """Float 0/1 mask combining caller masking with degenerate-class skip."""
    if mask is None:
        m = np.ones(shape)
    else:
        m = np.asarray(mask).astype(np.float64)
        if m.shape != shape:
            raise DataError(f"mask shape {m.shape} does not match predictions {shape}")
    if degenerate is not None and degenerate.any():
        m = m * (~degenerate).astype(np.float64)
    return m


def _bce_elements(pred, labels, weights: ClassWeights):
    """Per-entry nonnegative BCE terms and their d/dp, before masking."""
    p = np.clip(pred, EPSILON, 1.0 - EPSILON)
    c = labels
    terms = -(weights.w_pos * c * np.log(p) + weights.w_neg * (1.0 - c) * np.log1p(-p))
    dterms = -weights.w_pos * c / p + weights.w_neg * (1.0 - c) / (1.0 - p)
    return terms, dterms


def weighted_bce(pred: np.ndarray, labels: np.ndarray, weights: ClassWeights,
                 mask: np.ndarray | None = None) -> LossResult:
    """Class-weighted binary cross entropy summed over masked entries.

    ``mask`` marks which (sample, class) pairs contribute; gradients of
    masked-out entries are exactly zero. Classes flagged degenerate in
    ``weights`` are skipped entirely.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if pred.shape != labels.shape:
        raise DataError("prediction and label shapes differ")
    m = _resolve_mask(mask, pred.shape, weights.degenerate)
    terms, dterms = _bce_elements(pred, labels, weights)
    per_class = (m * terms).sum(axis=0)
    return LossResult(
        value=float((m * terms).sum()),
        grad_abnormality=m * dterms,
        per_class_breakdown=per_class,
    )


def _noise_penalty(pred, labels, weights: ClassWeights, profile: NoiseProfile, m):
    """Inverse-BCE regularization term of the noise-prior loss.

    Per masked active entry:
    lambda * [f_pos * w_neg * (1-c) * (-ln p) + f_neg * w_pos * c * (-ln(1-p))].
    """
    p = np.clip(pred, EPSILON, 1.0 - EPSILON)
    c = labels
    gate = m * profile.active.astype(np.float64)
    lam = profile.lambda_noise
    terms = lam * (
        profile.f_pos * weights.w_neg * (1.0 - c) * (-np.log(p))
        + profile.f_neg * weights.w_pos * c * (-np.log1p(-p))
    )
    dterms = lam * (
        -profile.f_pos * weights.w_neg * (1.0 - c) / p
        + profile.f_neg * weights.w_pos * c / (1.0 - p)
    )
    return gate * terms, gate * dterms


def noise_regularized_loss(pred: np.ndarray, labels: np.ndarray, weights: ClassWeights,
                           profile: NoiseProfile,
                           mask: np.ndarray | None = None) -> LossResult:
    """Weighted BCE plus the label-noise penalty scaled by lambda_noise.

    Classes marked inactive in the profile contribute no regularization;
    lambda_noise = 0 reduces to weighted_bce bit for bit.
    """
    base = weighted_bce(pred, labels, weights, mask)
    m = _resolve_mask(mask, np.asarray(pred).shape, weights.degenerate)
    terms, dterms = _noise_penalty(np.asarray(pred, dtype=np.float64),
                                   np.asarray(labels, dtype=np.float64),
                                   weights, profile, m)
    return LossResult(
        value=base.value + float(terms.sum()),
        grad_abnormality=base.grad_abnormality + dterms,
        per_class_breakdown=base.per_class_breakdown + terms.sum(axis=0),
    )


def _corr_penalty(pred, labels, weights: ClassWeights, stats: CorrelationStats, m,
                  use_pearson: bool, scale: float):
    """Cross-class coupling term of the correlation-prior loss.

    Entry (i, n, r != n) contributes cov[n, r] times the weighted BCE term
    of class r, gated on the sample owning both classes. Collapses over n
    to a per-entry coupling weight q[i, r] = sum_{n != r} cov[n, r] * m[i, n].
    """
    matrix = stats.pearson if use_pearson else stats.covariance
    coupling = matrix.copy()
    np.fill_diagonal(coupling, 0.0)
    q = m @ coupling
    terms, dterms = _bce_elements(pred, labels, weights)
    gate = scale * q * m
    return gate * terms, gate * dterms


def correlation_regularized_loss(pred: np.ndarray, labels: np.ndarray,
                                 weights: ClassWeights, stats: CorrelationStats,
                                 mask: np.ndarray | None = None,
                                 use_pearson: bool = False,
                                 scale: float = 1.0) -> LossResult:
    """Weighted BCE plus covariance-coupled cross-class penalties.

    Uses the covariance matrix by default; ``use_pearson`` substitutes the
    Pearson matrix. An all-zero matrix reduces to weighted_bce bit for bit.
    """
    base = weighted_bce(pred, labels, weights, mask)
    m = _resolve_mask(mask, np.asarray(pred).shape, weights.degenerate)
    terms, dterms = _corr_penalty(np.asarray(pred, dtype=np.float64),
                                  np.asarray(labels, dtype=np.float64),
                                  weights, stats, m, use_pearson, scale)
    return LossResult(
        value=base.value + float(terms.sum()),
        grad_abnormality=base.grad_abnormality + dterms,
        per_class_breakdown=base.per_class_breakdown + terms.sum(axis=0),
    )


def segmentation_mse(pred_masks: np.ndarray, true_masks: np.ndarray) -> LossResult:
    """Per-sample mean squared error over flattened segmentation maps.

    value = sum_i (1/t) sum_z (s - p)^2 with t the flattened map length;
    the breakdown reports the two mask channels separately.
    """
    pred = np.asarray(pred_masks, dtype=np.float64)
    truth = np.asarray(true_masks, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise DataError("segmentation prediction and truth must share an F x t shape")
    t = pred.shape[1]
    diff = pred - truth
    value = float((diff * diff).sum() / t)
    grad = (2.0 / t) * diff
    half = t // 2
    breakdown = np.array([
        (diff[:, :half] ** 2).sum() / t,
        (diff[:, half:] ** 2).sum() / t,
    ])
    return LossResult(
        value=value,
        grad_abnormality=np.zeros((pred.shape[0], 0)),
        grad_segmentation=grad,
        per_class_breakdown=breakdown,
    )


def spatial_loss(pred_spatial: np.ndarray, spatial: SpatialLabelMatrix,
                 weights: ClassWeights) -> LossResult:
    """Weighted BCE over the spatial classes, activated per sample.

    Samples without any available spatial supervision contribute exactly
    zero loss and zero gradient.
    """
    pred = np.asarray(pred_spatial, dtype=np.float64)
    if pred.shape != spatial.labels.shape:
        raise DataError("spatial prediction shape does not match spatial labels")
    active = spatial.active_rows()
    row_mask = np.repeat(active[:, None], pred.shape[1], axis=1)
    inner = weighted_bce(pred, spatial.labels, weights, row_mask)
    return LossResult(
        value=inner.value,
        grad_abnormality=np.zeros((pred.shape[0], 0)),
        grad_spatial=inner.grad_abnormality,
        per_class_breakdown=inner.per_class_breakdown,
    )


@dataclass(frozen=True)
class LossConfig:
    """Which composite terms are active and how they are weighted."""

    use_noise: bool = False
    use_corr: bool = False
    use_seg: bool = False
    use_loc: bool = False
    alpha_seg: float = 1.0
    alpha_loc: float = 1.0
    corr_scale: float = 1.0
    corr_use_pearson: bool = False

    def describe(self) -> str:
        parts = []
        if self.use_noise:
            parts.append("noise")
        if self.use_corr:
            parts.append("corr")
        if self.use_seg:
            parts.append(f"seg(a={self.alpha_seg})")
        if self.use_loc:
            parts.append(f"loc(a={self.alpha_loc})")
        return "+".join(parts) if parts else "baseline"


@dataclass
class LossTargets:
    """Everything the composite loss needs besides the predictions."""

    labels: np.ndarray
    weights: ClassWeights
    mask: np.ndarray | None = None
    noise: NoiseProfile | None = None
    correlation: CorrelationStats | None = None
    spatial: SpatialLabelMatrix | None = None
    spatial_weights: ClassWeights | None = None
    segmentation: np.ndarray | None = None


def composite_loss(pred: Predictions, targets: LossTargets, cfg: LossConfig) -> LossResult:
    """Sum of the selected abnormality loss and weighted auxiliary terms.

    Baseline-only configuration equals weighted_bce exactly; noise and
    correlation penalties stack (both may be enabled at once), and zero
    alpha weights eliminate the corresponding auxiliary term.
    """
    result = weighted_bce(pred.abnormality, targets.labels, targets.weights, targets.mask)
    m = _resolve_mask(targets.mask, pred.abnormality.shape, targets.weights.degenerate)
    per_class = result.per_class_breakdown

    if cfg.use_noise:
        if targets.noise is None:
            raise DataError("noise term enabled but no noise profile supplied")
        terms, dterms = _noise_penalty(pred.abnormality, targets.labels,
                                       targets.weights, targets.noise, m)
        result.value += float(terms.sum())
        result.grad_abnormality = result.grad_abnormality + dterms
        per_class = per_class + terms.sum(axis=0)

    if cfg.use_corr:
        if targets.correlation is None:
            raise DataError("correlation term enabled but no statistics supplied")
        terms, dterms = _corr_penalty(pred.abnormality, targets.labels,
                                      targets.weights, targets.correlation, m,
                                      cfg.corr_use_pearson, cfg.corr_scale)
        result.value += float(terms.sum())
        result.grad_abnormality = result.grad_abnormality + dterms
        per_class = per_class + terms.sum(axis=0)

    if cfg.use_seg:
        if targets.segmentation is None or pred.segmentation is None:
            raise DataError("segmentation term enabled but maps are missing")
        seg = segmentation_mse(pred.segmentation, targets.segmentation)
        result.value += cfg.alpha_seg * seg.value
        result.grad_segmentation = cfg.alpha_seg * seg.grad_segmentation

    if cfg.use_loc:
        if targets.spatial is None or targets.spatial_weights is None or pred.spatial is None:
            raise DataError("spatial term enabled but labels/weights/predictions missing")
        loc = spatial_loss(pred.spatial, targets.spatial, targets.spatial_weights)
        result.value += cfg.alpha_loc * loc.value
        result.grad_spatial = cfg.alpha_loc * loc.grad_spatial

    result.per_class_breakdown = per_class
    return result
