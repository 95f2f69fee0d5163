"""Finite-difference gradient checks for every primitive and the training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .losses import (
    KernelSpec,
    LossWeights,
    confusion_loss,
    cross_entropy,
    mk_mmd,
    sd_loss,
    uncertainty_weights,
)
from .model import ArchConfig, build_network

TOL = 1e-5


@dataclass
class Case:
    name: str
    build: Callable[..., Tensor]
    sample: Callable[[np.random.Generator], dict[str, np.ndarray]]
    wrt: tuple[str, ...] | None = None


def _projected(fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
    """Reduce a tensor-valued op to a scalar with a fixed random projection."""
    cache: dict[tuple, np.ndarray] = {}

    def build(**leaves):
        out = fn(**leaves)
        shape = out.shape
        if shape not in cache:
            cache[shape] = np.random.default_rng(len(shape) + sum(shape)).standard_normal(shape)
        return (out * cache[shape]).sum()

    return build


def _positive(rng, shape, low=0.2, high=2.0):
    return rng.uniform(low, high, size=shape)


def _away_from(rng, shape, point, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x - point) < gap, x + np.sign(x - point + 1e-12) * gap, x)


def primitive_cases() -> list[Case]:
    def bn_train(x, gamma, beta):
        return ad.batch_norm(x, gamma, beta, ad.BatchNormState.fresh(x.shape[1]), training=True)

    def bn_eval(x, gamma, beta):
        c = x.shape[1]
        state = ad.BatchNormState(np.linspace(-0.3, 0.3, c), np.linspace(0.5, 1.5, c))
        return ad.batch_norm(x, gamma, beta, state, training=False)

    def drop(x):
        return ad.dropout(x, 0.25, np.random.default_rng(7), training=True)

    cases = [
        ("add", lambda a, b: ad.add(a, b), lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((1, 4))}),
        ("sub", lambda a, b: ad.sub(a, b), lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((3, 1))}),
        ("mul", lambda a, b: ad.mul(a, b), lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal(4)}),
        ("scale", lambda a: ad.scale(a, -1.7), lambda r: {"a": r.standard_normal((2, 3))}),
        ("exp", lambda a: ad.exp(a), lambda r: {"a": r.standard_normal((2, 5))}),
        ("log", lambda a: ad.log(a), lambda r: {"a": _positive(r, (2, 5))}),
        ("clip_min", lambda a: ad.clip_min(a, 0.0), lambda r: {"a": _away_from(r, (3, 4), 0.0)}),
        ("elu", lambda a: ad.elu(a), lambda r: {"a": _away_from(r, (3, 4), 0.0)}),
        ("sum", lambda a: ad.sum(a, axis=1, keepdims=True), lambda r: {"a": r.standard_normal((3, 4))}),
        ("mean", lambda a: ad.mean(a, axis=0), lambda r: {"a": r.standard_normal((3, 4))}),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), lambda r: {"a": r.standard_normal((2, 6))}),
        ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), lambda r: {"a": r.standard_normal((2, 3, 4))}),
        ("index", lambda a: ad.index(a, (slice(1, 3), slice(None, None, 2))), lambda r: {"a": r.standard_normal((4, 5))}),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), lambda r: {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 2))}),
        ("matmul", lambda a, b: ad.matmul(a, b), lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((4, 2))}),
        (
            "conv2d_same",
            lambda x, w: ad.conv2d(x, w, padding="same"),
            lambda r: {"x": r.standard_normal((2, 1, 3, 9)), "w": r.standard_normal((2, 1, 1, 4))},
        ),
        (
            "conv2d_valid_spatial",
            lambda x, w: ad.conv2d(x, w, padding="valid", groups=2),
            lambda r: {"x": r.standard_normal((2, 2, 3, 5)), "w": r.standard_normal((4, 1, 3, 1))},
        ),
        (
            "conv2d_pointwise",
            lambda x, w: ad.conv2d(x, w),
            lambda r: {"x": r.standard_normal((2, 3, 1, 4)), "w": r.standard_normal((2, 3, 1, 1))},
        ),
        ("avg_pool2d", lambda x: ad.avg_pool2d(x, (1, 2)), lambda r: {"x": r.standard_normal((2, 2, 1, 6))}),
        (
            "batch_norm_train",
            bn_train,
            lambda r: {"x": r.standard_normal((3, 2, 2, 3)), "gamma": _positive(r, 2), "beta": r.standard_normal(2)},
        ),
        (
            "batch_norm_eval",
            bn_eval,
            lambda r: {"x": r.standard_normal((3, 2, 1, 3)), "gamma": _positive(r, 2), "beta": r.standard_normal(2)},
        ),
        ("dropout", drop, lambda r: {"x": r.standard_normal((4, 6))}),
        ("softmax", lambda a: ad.softmax(a, axis=1), lambda r: {"a": r.standard_normal((3, 4))}),
        ("log_softmax", lambda a: ad.log_softmax(a, axis=1), lambda r: {"a": r.standard_normal((3, 4))}),
    ]
    return [Case(name, _projected(fn), sample) for name, fn, sample in cases]


def loss_cases() -> list[Case]:
    teacher = np.random.default_rng(99).standard_normal((4, 2))
    kernel = KernelSpec(bandwidths=(0.5, 1.0, 2.0, 4.0, 8.0))
    return [
        Case("cross_entropy", lambda z: cross_entropy(z, [0, 1, 1, 0]), lambda r: {"z": r.standard_normal((4, 2))}),
        Case("sd_loss", lambda z: sd_loss(z, teacher, 2.0), lambda r: {"z": r.standard_normal((4, 2))}),
        Case(
            "mk_mmd",
            lambda s, t: mk_mmd(s, t, kernel),
            lambda r: {"s": r.standard_normal((4, 3)), "t": r.standard_normal((3, 3)) + 0.5},
        ),
        Case(
            "uncertainty_weights",
            _projected(lambda q: uncertainty_weights(ad.softmax(q, axis=1))),
            lambda r: {"q": r.standard_normal((4, 3))},
        ),
        Case("confusion_loss", lambda z: confusion_loss(z, 2.0), lambda r: {"z": r.standard_normal((4, 3))}),
        Case(
            "confusion_loss_class",
            lambda z: confusion_loss(z, 2.0, "class"),
            lambda r: {"z": r.standard_normal((4, 3))},
        ),
    ]


def check_cases(cases: list[Case], points: int = 10, tol: float = TOL, seed: int = 0) -> dict[str, list[GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = {}
    for case in cases:
        out[case.name] = [grad_check(case.build, case.sample(rng), tol=tol, wrt=case.wrt) for _ in range(points)]
    return out


# ---------------------------------------------------------------------------
# full objectives on small networks

SMALL_ARCH = ArchConfig(f1=2, depth_multiplier=2, f2=3, temporal_kernel=5, separable_kernel=3, pool1=2, pool2=2)


def _network_bindings(net) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in net.params.items()}


def objective_cases(n_trials: int = 4, samples: int = 16, seed: int = 0) -> list[tuple[str, Callable, dict]]:
    """(name, builder, bindings) for the teacher, UDA student and SDA student losses.

    Everything runs in 64-bit with a small architecture, a fixed dropout
    mask and kernel bandwidths pinned at the starting point, so the loss is
    a smooth function of the parameters.
    """
    from .training import TrainConfig, student_objective

    rng = np.random.default_rng(seed)
    cs, ct, classes = 5, 3, 2
    with ad.precision("float64"):
        teacher = build_network(cs, samples, classes, SMALL_ARCH, seed=seed + 1, precision="float64")
        student = build_network(ct, samples, classes, SMALL_ARCH, seed=seed + 2, precision="float64")
    xs_full = rng.standard_normal((n_trials, cs, samples))
    xs = xs_full[:, :ct]
    xt = rng.standard_normal((n_trials, ct, samples)) * 1.3 + 0.2
    ys = np.arange(n_trials) % classes
    yt = (np.arange(n_trials) + 1) % classes
    soft = rng.standard_normal((n_trials, classes))

    def teacher_loss(**params):
        _, logits = teacher.forward(xs_full, "train", 11, params)
        return cross_entropy(logits, ys)

    with ad.precision("float64"):
        feats, _ = student.forward(np.concatenate([xs, xt]), "train", 13)
    pinned = KernelSpec().pinned(feats.data)
    cases = [("teacher", teacher_loss, _network_bindings(teacher))]
    for scenario in ("uda", "sda"):
        config = TrainConfig(scenario=scenario, kernel=pinned, weights=LossWeights())

        def student_loss(_config=config, **params):
            total, _ = student_objective(student, xs, ys, xt, yt, soft, _config, 13, params)
            return total

        cases.append((f"student_{scenario}", student_loss, _network_bindings(student)))
    return cases


def check_objectives(tol: float = TOL, max_coords: int | None = 12, seed: int = 0) -> dict[str, GradCheckReport]:
    return {
        name: grad_check(build, bindings, tol=tol, max_coords=max_coords, seed=seed)
        for name, build, bindings in objective_cases(seed=seed)
    }


def run_suite(points: int = 10, tol: float = TOL, seed: int = 0) -> tuple[bool, list[str]]:
    """Run every check; returns (all passed, one line per check)."""
    lines = []
    ok = True
    for name, reports in check_cases(primitive_cases() + loss_cases(), points, tol, seed).items():
        worst = max(max(r.errors.values()) for r in reports)
        passed = all(r.passed for r in reports)
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {name:<22} max rel err {worst:.2e} over {points} points")
    for name, report in check_objectives(tol, seed=seed).items():
        ok &= report.passed
        lines.append(f"{'PASS' if report.passed else 'FAIL'} {name:<22} max rel err {max(report.errors.values()):.2e}")
    return ok, lines

