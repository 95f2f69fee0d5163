"""Training signals for SDDA: cross-entropy, spatial distillation, MK-MMD and
the entropy-weighted confusion loss, each built from autodiff primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # spatial distillation
    beta: float = 1.0  # marginal alignment (MK-MMD)
    gamma: float = 1.0  # confusion loss
    distill_temperature: float = 2.0
    confusion_temperature: float = 2.0
    confusion_normalization: str = "class"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("distill_temperature", "confusion_temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.confusion_normalization not in CONFUSION_NORMALIZATIONS:
            raise ValueError(f"confusion_normalization must be one of {CONFUSION_NORMALIZATIONS}")


@dataclass(frozen=True)
class KernelSpec:
    """Convex combination of Gaussian kernels.

    With ``bandwidths=None`` the widths are ``multipliers`` times the median
    pairwise distance of the pooled batch (treated as a constant). Passing
    explicit ``bandwidths`` pins them.
    """

    multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    weights: tuple[float, ...] | None = None
    bandwidths: tuple[float, ...] | None = None

    def __post_init__(self):
        m = len(self.bandwidths) if self.bandwidths is not None else len(self.multipliers)
        if m == 0:
            raise ValueError("at least one kernel is required")
        if self.bandwidths is not None and any(not b > 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be positive")
        if any(not b > 0 for b in self.multipliers):
            raise ValueError("bandwidth multipliers must be positive")
        if self.weights is not None:
            if len(self.weights) != m:
                raise ValueError(f"{len(self.weights)} kernel weights for {m} kernels")
            if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
                raise ValueError("kernel weights must be non-negative and sum to 1")

    @property
    def kernel_weights(self) -> np.ndarray:
        m = len(self.bandwidths) if self.bandwidths is not None else len(self.multipliers)
        return np.full(m, 1.0 / m) if self.weights is None else np.asarray(self.weights, dtype=np.float64)

    def resolve(self, pooled: np.ndarray) -> np.ndarray:
        """Kernel widths for a pooled (n, d) feature batch."""
        if self.bandwidths is not None:
            return np.asarray(self.bandwidths, dtype=np.float64)
        return median_distance(pooled) * np.asarray(self.multipliers, dtype=np.float64)

    def pinned(self, pooled: np.ndarray) -> KernelSpec:
        return KernelSpec(self.multipliers, self.weights, tuple(float(b) for b in self.resolve(pooled)))


def median_distance(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    off = d2[~np.eye(len(x), dtype=bool)]
    med = float(np.sqrt(np.median(off))) if off.size else 0.0
    return med if med > 1e-12 else 1.0


def _labels_onehot(labels, n: int, n_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{n} logit rows but {labels.shape[0]} labels")
    if np.any((labels < 0) | (labels >= n_classes)):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise ValueError(f"label {bad} out of range [0, {n_classes})")
    onehot = np.zeros((n, n_classes), dtype=dtype)
    onehot[np.arange(n), labels] = 1
    return onehot


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    n, c = logits.shape
    if n == 0:
        raise ValueError("cross_entropy needs at least one trial")
    onehot = _labels_onehot(labels, n, c, logits.dtype)
    return -(ad.log_softmax(logits, axis=1) * onehot).sum() / n


def tempered_softmax(logits: Tensor, temp: float) -> Tensor:
    if not temp > 0:
        raise ValueError(f"temperature must be > 0, got {temp}")
    return ad.softmax(logits * (1.0 / temp), axis=1)


def sd_loss(student_logits: Tensor, teacher_logits, temp: float) -> Tensor:
    """T^2 * mean_i KL(p_stu || p_tch), both softened at ``temp``.

    The KL direction (student first) is intentional. Teacher logits are
    treated as constants.
    """
    if not temp > 0:
        raise ValueError(f"temperature must be > 0, got {temp}")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise ValueError(f"student logits {student_logits.shape} vs teacher logits {teacher.shape}")
    z = teacher.astype(np.float64) / temp
    p_tch = np.exp(z - z.max(axis=1, keepdims=True))
    p_tch /= p_tch.sum(axis=1, keepdims=True)
    log_tch = np.log(np.maximum(p_tch, PROB_FLOOR)).astype(student_logits.dtype)
    p_stu = tempered_softmax(student_logits, temp)
    log_stu = ad.log(ad.clip_min(p_stu, PROB_FLOOR))
    kl = (p_stu * (log_stu - log_tch)).sum(axis=1)
    return kl.mean() * (temp * temp)


def _pairwise_sq_dists(z: Tensor) -> Tensor:
    sq = (z * z).sum(axis=1)
    n = z.shape[0]
    return sq.reshape(n, 1) + sq.reshape(1, n) - (z @ z.T) * 2.0


def mk_mmd(source: Tensor, target: Tensor, spec: KernelSpec | None = None) -> Tensor:
    """Biased (V-statistic) squared MK-MMD between two feature batches."""
    spec = spec or KernelSpec()
    if source.ndim != 2 or target.ndim != 2:
        raise ValueError("mk_mmd expects (n, d) feature matrices")
    ns, nt = source.shape[0], target.shape[0]
    if ns == 0 or nt == 0:
        raise ValueError("mk_mmd needs non-empty source and target batches")
    if source.shape[1] != target.shape[1]:
        raise ValueError(f"feature dims differ: {source.shape[1]} vs {target.shape[1]}")
    pooled = ad.concat([source, target], axis=0)
    d2 = _pairwise_sq_dists(pooled)
    widths = spec.resolve(pooled.data)
    betas = spec.kernel_weights
    kernel = None
    for beta, sigma in zip(betas, widths):
        if beta == 0:
            continue
        k = ad.exp(d2 * (-1.0 / (2.0 * sigma * sigma))) * float(beta)
        kernel = k if kernel is None else kernel + k
    # +1/ns^2 on the source block, +1/nt^2 on the target block, -1/(ns nt) across
    w = np.empty((ns + nt, ns + nt), dtype=pooled.dtype)
    w[:ns, :ns] = 1.0 / (ns * ns)
    w[ns:, ns:] = 1.0 / (nt * nt)
    w[:ns, ns:] = w[ns:, :ns] = -1.0 / (ns * nt)
    return (kernel * w).sum()


def uncertainty_weights(probs: Tensor) -> Tensor:
    """v_i = 1 + exp(-H(q_i)), in (1, 2]."""
    neg_entropy = (probs * ad.log(ad.clip_min(probs, PROB_FLOOR))).sum(axis=1)
    return ad.exp(neg_entropy) + 1.0


def confusion_matrix(logits: Tensor, temp: float) -> Tensor:
    q = tempered_softmax(logits, temp)
    v = uncertainty_weights(q)
    n = q.shape[0]
    return (q * v.reshape(n, 1)).T @ q


CONFUSION_NORMALIZATIONS = ("none", "batch", "class")


def confusion_loss(logits: Tensor, temp: float, normalization: str = "none") -> Tensor:
    """(sum of all confusion entries - trace) / n_classes.

    ``normalization`` selects how the confusion matrix is scaled first:
    "none" keeps the plain sum over trials, "batch" divides it by the number
    of trials, and "class" divides every row by its total so each class
    contributes a distribution over the classes it is confused with.
    """
    n, c = logits.shape
    if n == 0:
        raise ValueError("confusion_loss needs at least one trial")
    if normalization not in CONFUSION_NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {CONFUSION_NORMALIZATIONS}, got {normalization!r}")
    m = confusion_matrix(logits, temp)
    if normalization == "class":
        row_total = ad.clip_min(m.sum(axis=1, keepdims=True), PROB_FLOOR)
        m = m * ad.exp(-ad.log(row_total))
    off_diagonal = 1.0 - np.eye(c, dtype=m.dtype)
    loss = (m * off_diagonal).sum() / c
    return loss / n if normalization == "batch" else loss


def _weighted(total: Tensor, weight: float, term: Tensor | None) -> Tensor:
    if weight == 0:
        return total
    if term is None:
        raise ValueError("a loss term with non-zero weight is missing")
    return total + term * weight


def student_loss_uda(ce: Tensor, sd: Tensor | None, ma: Tensor | None, cl: Tensor | None, weights: LossWeights) -> Tensor:
    total = _weighted(ce, weights.alpha, sd)
    total = _weighted(total, weights.beta, ma)
    return _weighted(total, weights.gamma, cl)


def student_loss_sda(
    ce_source: Tensor,
    ce_target: Tensor | None,
    sd: Tensor | None,
    ma: Tensor | None,
    cl: Tensor | None,
    weights: LossWeights,
) -> Tensor:
    if ce_target is None:
        raise ValueError("supervised adaptation needs labeled target trials (n_l >= 1)")
    return student_loss_uda(ce_source + ce_target, sd, ma, cl, weights)

