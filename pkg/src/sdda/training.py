"""Joint teacher/student optimization for offline UDA and online SDA."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .alignment import euclidean_align_session, mean_covariance, inv_sqrt_sym, subset_channels
from .data import CyclingSampler, Domain, Session, batch_iterator
from .losses import (
    KernelSpec,
    LossWeights,
    confusion_loss,
    cross_entropy,
    mk_mmd,
    sd_loss,
    student_loss_sda,
    student_loss_uda,
)
from .model import ArchConfig, Network, build_network

log = logging.getLogger(__name__)

SCENARIOS = ("uda", "sda")

# ablation name -> (alpha, beta, gamma) mask
ABLATIONS = {
    "CE": (0, 0, 0),
    "CE+SD": (1, 0, 0),
    "CE+MA": (0, 1, 0),
    "CE+CL": (0, 0, 1),
    "CE+MA+CL": (0, 1, 1),
    "SDDA": (1, 1, 1),
}


@dataclass(frozen=True)
class TrainConfig:
    scenario: str = "uda"
    weights: LossWeights = field(default_factory=LossWeights)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_labeled: int = 32
    seed: int = 0
    teacher_seed: int | None = None  # None: derived from seed
    track_target_accuracy: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.n_labeled < 1:
            raise ValueError("n_labeled must be positive")

    def with_ablation(self, name: str) -> TrainConfig:
        alpha, beta, gamma = ABLATIONS[name]
        return replace(self, weights=replace(self.weights, alpha=alpha, beta=beta, gamma=gamma))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kernel"] = {k: list(v) if v is not None else None for k, v in out["kernel"].items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        raw = dict(raw)
        if "weights" in raw:
            raw["weights"] = _strict(LossWeights, raw["weights"])
        if "kernel" in raw:
            kernel = {k: tuple(v) if v is not None else None for k, v in raw["kernel"].items()}
            raw["kernel"] = _strict(KernelSpec, kernel)
        if "arch" in raw:
            raw["arch"] = ArchConfig.from_dict(raw["arch"])
        return cls(**raw)


def _strict(cls, raw: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**raw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` is advanced in place. A parameter without a gradient entry is
    treated as having a zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        out[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return out


def _apply_adam(net: Network, state: AdamState, config: TrainConfig) -> None:
    params = {k: t.data for k, t in net.params.items()}
    grads = {k: t.grad for k, t in net.params.items() if t.grad is not None}
    new = adam_step(params, grads, state, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    for k, arr in new.items():
        net.params[k].data = arr


# ---------------------------------------------------------------------------
# data preparation (Step 1)


@dataclass
class TargetSplit:
    """Target trials available for training and those held out for testing.

    ``test_references`` holds, per test session, the reference matrix whose
    inverse square root aligns that session at prediction time.
    """

    train: list[Session]
    test: list[Session]
    test_references: list[np.ndarray]


def split_target(target: Domain, scenario: str, n_labeled: int) -> TargetSplit:
    """UDA trains on all (unlabeled) target trials and tests on the same
    trials. SDA takes the first ``n_labeled`` trials of each target session as
    the labeled calibration set; its reference is frozen for the rest."""
    if scenario == "uda":
        refs = [mean_covariance(s) for s in target.sessions]
        train = [replace(s, labels=np.full(s.n_trials, -1)) for s in target.sessions]
        return TargetSplit(train, list(target.sessions), refs)
    train, test, refs = [], [], []
    for s in target.sessions:
        if s.n_trials <= n_labeled:
            raise ValueError(f"target session has {s.n_trials} trials; SDA needs more than n_labeled={n_labeled}")
        calib = s.take(slice(0, n_labeled))
        if not calib.labeled:
            raise ValueError("SDA calibration trials must be labeled")
        if len(np.unique(calib.labels)) < target.n_classes:
            log.warning("calibration set does not cover every class")
        train.append(calib)
        test.append(s.take(slice(n_labeled, None)))
        refs.append(mean_covariance(calib))
    return TargetSplit(train, test, refs)


def _stack(sessions: list[Session]) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate([s.data for s in sessions]), np.concatenate([s.labels for s in sessions])


@dataclass
class PreparedData:
    source_full: np.ndarray  # EA on all source channels
    source_common: np.ndarray  # subset first, then EA
    source_labels: np.ndarray
    target_train: np.ndarray
    target_train_labels: np.ndarray
    common_channels: list[str]


def prepare_data(source: Domain, target: Domain, split: TargetSplit) -> PreparedData:
    common = target.channel_names
    missing = [c for c in common if c not in source.channel_names]
    if missing:
        raise ValueError(f"target channels {missing} are not in the source montage")
    if not source.sessions or not all(s.labeled for s in source.sessions):
        raise ValueError("every source trial must be labeled")
    full = [euclidean_align_session(s) for s in source.sessions]
    com = [euclidean_align_session(subset_channels(s, common)) for s in source.sessions]
    tgt = [euclidean_align_session(s) for s in split.train]
    xs, ys = _stack(full)
    xc, _ = _stack(com)
    xt, yt = _stack(tgt)
    return PreparedData(xs, xc, ys, xt, yt, list(common))


# ---------------------------------------------------------------------------
# Step 2 / 3


@dataclass
class EpochRecord:
    epoch: int
    teacher_ce: float
    ce_source: float
    ce_target: float
    sd: float
    ma: float
    cl: float
    total: float
    target_accuracy: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]


class TrainResult(NamedTuple):
    student: Network
    teacher: Network
    history: TrainHistory


@dataclass
class StepTerms:
    teacher_ce: float
    ce_source: float
    ce_target: float
    sd: float
    ma: float
    cl: float
    total: float


def student_objective(
    student: Network,
    xs_common: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    yt: np.ndarray | None,
    teacher_logits,
    config: TrainConfig,
    seed=None,
    params: dict | None = None,
) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
    """Student loss (UDA or SDA form) on one paired batch.

    Source and target sub-batches go through one train-mode forward pass
    whenever a target term is active. Otherwise (the CE and CE+SD
    ablations) only source trials shape the student, and the target terms
    are measured on a side forward that leaves the batch-norm buffers
    alone. Returns the total and the individual (unweighted) terms.
    """
    ns = xs_common.shape[0]
    w = config.weights
    batch = np.concatenate([xs_common, xt]).astype(student.dtype, copy=False)
    uses_target = config.scenario == "sda" or w.beta > 0 or w.gamma > 0
    if uses_target:
        feats, logits = student.forward(batch, "train", seed, params)
        src_logits = logits[:ns]
    else:
        src_logits = student.forward_logits(batch[:ns], "train", seed, params)
        buffers = student.bn
        student.bn = copy.deepcopy(buffers)
        try:
            feats, logits = student.forward(batch, "train", seed, params)
        finally:
            student.bn = buffers
    terms = {
        "ce_source": cross_entropy(src_logits, ys),
        "sd": sd_loss(src_logits, teacher_logits, w.distill_temperature),
        "ma": mk_mmd(feats[:ns], feats[ns:], config.kernel),
        "cl": confusion_loss(logits[ns:], w.confusion_temperature, w.confusion_normalization),
    }
    if config.scenario == "sda":
        terms["ce_target"] = cross_entropy(logits[ns:], yt)
        total = student_loss_sda(terms["ce_source"], terms["ce_target"], terms["sd"], terms["ma"], terms["cl"], w)
    else:
        total = student_loss_uda(terms["ce_source"], terms["sd"], terms["ma"], terms["cl"], w)
    return total, terms


def _check_finite(value: float, what: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what} at epoch {epoch}, batch {batch}")


def train_sdda(
    config: TrainConfig, source: Domain, target: Domain, split: TargetSplit | None = None
) -> TrainResult:
    """Run the full teacher/student loop and return both networks.

    Step 1 aligns every session (source full montage, source common subset,
    target training trials). Each iteration then updates the teacher on the
    source cross-entropy and, right after, the student on its composite loss
    with the freshly updated teacher's logits as distillation targets.
    """
    split = split or split_target(target, config.scenario, config.n_labeled)
    if config.scenario == "sda":
        n_l = sum(s.n_trials for s in split.train)
        if n_l < target.n_classes:
            raise ValueError(f"SDA needs n_l >= number of classes, got {n_l}")
    data = prepare_data(source, target, split)
    n_classes = source.n_classes
    t_samples = data.source_full.shape[2]
    teacher_seed = config.teacher_seed if config.teacher_seed is not None else config.seed + 7919
    teacher = build_network(data.source_full.shape[1], t_samples, n_classes, config.arch, seed=teacher_seed)
    student = build_network(len(data.common_channels), t_samples, n_classes, config.arch, seed=config.seed)
    teacher_opt, student_opt = AdamState(), AdamState()
    sampler = CyclingSampler(data.target_train.shape[0], config.batch_size, seed=config.seed * 1_000_003 + 1)
    eval_sets = _target_eval_sets(split) if config.track_target_accuracy else None
    history = TrainHistory()

    ns_total = data.source_full.shape[0]
    for epoch in range(config.epochs):
        sums = dict.fromkeys(("teacher_ce", "ce_source", "ce_target", "sd", "ma", "cl", "total"), 0.0)
        batches = batch_iterator(ns_total, config.batch_size, seed=config.seed, epoch=epoch)
        for bi, idx in enumerate(batches):
            rng = np.random.default_rng([config.seed, epoch, bi])
            # teacher: plain source cross-entropy
            teacher.zero_grad()
            _, t_logits = teacher.forward(data.source_full[idx], "train", rng)
            t_loss = cross_entropy(t_logits, data.source_labels[idx])
            _check_finite(t_loss.item(), "teacher loss", epoch, bi)
            t_loss.backward()
            _apply_adam(teacher, teacher_opt, config)
            # student: distills from the updated teacher (eval mode, constant)
            soft_targets = teacher.forward_logits(data.source_full[idx], "eval").data
            tidx = next(sampler)[: len(idx)]
            xs = data.source_common[idx]
            xt = data.target_train[tidx]
            yt = data.target_train_labels[tidx] if config.scenario == "sda" else None
            if len(tidx) < len(idx):
                # fewer target trials than a batch: shrink the source side to pair
                xs, ys_b, soft_targets = xs[: len(tidx)], data.source_labels[idx][: len(tidx)], soft_targets[: len(tidx)]
            else:
                ys_b = data.source_labels[idx]
            student.zero_grad()
            total, terms = student_objective(student, xs, ys_b, xt, yt, soft_targets, config, rng)
            _check_finite(total.item(), "student loss", epoch, bi)
            total.backward()
            _apply_adam(student, student_opt, config)
            sums["teacher_ce"] += t_loss.item()
            sums["total"] += total.item()
            for k, v in terms.items():
                sums[k] += v.item()
        nb = len(batches)
        record = EpochRecord(epoch=epoch, **{k: v / nb for k, v in sums.items()})
        if eval_sets is not None:
            record.target_accuracy = _accuracy_on(student, eval_sets)
        history.records.append(record)
        log.debug("epoch %d: %s", epoch, record)
    return TrainResult(student, teacher, history)


def _target_eval_sets(split: TargetSplit):
    sets = []
    for session, ref in zip(split.test, split.test_references):
        if session.labeled:
            sets.append((session, ref))
    return sets or None


def _accuracy_on(net: Network, sets) -> float:
    correct = total = 0
    for session, ref in sets:
        labels, _ = predict(net, session, ref)
        correct += int(np.sum(labels == session.labels))
        total += session.n_trials
    return 100.0 * correct / total


# ---------------------------------------------------------------------------
# Step 4


def predict(net: Network, session: Session, reference: np.ndarray | None = None, chunk: int = 256):
    """Align ``session`` and classify it with an eval-mode forward pass.

    ``reference`` is the frozen reference matrix (SDA); ``None`` computes it
    from the session itself (UDA). Returns ``(labels, scores)`` where scores
    are softmax probabilities and ties go to the lowest class index.
    """
    if session.n_channels != net.channels:
        raise ValueError(f"network expects {net.channels} channels, session has {session.n_channels}")
    ref = mean_covariance(session) if reference is None else np.asarray(reference)
    whitener = inv_sqrt_sym(ref)
    x = np.einsum("cd,ndt->nct", whitener, session.data.astype(np.float64)).astype(net.dtype)
    logits = np.concatenate(
        [net.forward_logits(x[i : i + chunk], "eval").data for i in range(0, x.shape[0], chunk)]
    ) if x.shape[0] else np.zeros((0, net.classes), dtype=net.dtype)
    z = logits.astype(np.float64)
    scores = np.exp(z - z.max(axis=1, keepdims=True))
    scores /= scores.sum(axis=1, keepdims=True)
    return np.argmax(logits, axis=1), scores
