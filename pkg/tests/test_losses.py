import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from sdda import autodiff as ad
from sdda.autodiff import Graph, Tensor, grad_check
from sdda.losses import (
    KernelSpec,
    LossWeights,
    confusion_loss,
    confusion_matrix,
    cross_entropy,
    median_distance,
    mk_mmd,
    sd_loss,
    student_loss_sda,
    student_loss_uda,
    tempered_softmax,
    uncertainty_weights,
)

logit_rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 4)), elements=st.floats(-6, 6))


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# -- config types -------------------------------------------------------------


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(1, 1, 1, 2.0, 2.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
    with pytest.raises(ValueError):
        LossWeights(confusion_temperature=0)


def test_kernel_spec_defaults_and_validation():
    spec = KernelSpec()
    assert spec.multipliers == (0.25, 0.5, 1.0, 2.0, 4.0)
    np.testing.assert_allclose(spec.kernel_weights, 0.2)
    assert abs(spec.kernel_weights.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        KernelSpec(weights=(0.5, 0.6, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        KernelSpec(bandwidths=(1.0, -1.0))
    with pytest.raises(ValueError):
        KernelSpec(weights=(1.0,))


def test_median_heuristic_bandwidths():
    x = np.array([[0.0], [1.0], [3.0]])
    # pairwise distances 1, 3, 2 -> median 2
    np.testing.assert_allclose(KernelSpec().resolve(x), 2.0 * np.array([0.25, 0.5, 1, 2, 4]))
    assert median_distance(x) == 2.0


# -- cross_entropy ------------------------------------------------------------


def test_cross_entropy_examples(f64):
    assert cross_entropy(T([[10, -10]]), [0]).item() < 1e-4
    assert cross_entropy(T([[0, 0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    expected = oracles.cross_entropy([[1, 2], [3, 0]], [1, 0])
    assert cross_entropy(T([[1, 2], [3, 0]]), [1, 0]).item() == pytest.approx(expected, abs=1e-15)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(T([[0.0, 1.0]]), [2])
    with pytest.raises(ValueError):
        cross_entropy(T([[0.0, 1.0]]), [-1])


# -- tempered_softmax -----------------------------------------------------------


def test_tempered_softmax_examples(f64):
    np.testing.assert_allclose(tempered_softmax(T([[4, 4, 4]]), 0.3).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(tempered_softmax(T([[2, 0]]), 2).data, ad.softmax(T([[1, 0]]), axis=1).data)
    np.testing.assert_allclose(tempered_softmax(T([[3, 1, -1]]), 2).data[0], oracles.softmax_row([3, 1, -1], 2), atol=1e-15)
    with pytest.raises(ValueError):
        tempered_softmax(T([[1, 2]]), 0)


@given(logit_rows, st.floats(0.1, 10))
def test_tempered_softmax_rows_sum_to_one_and_are_monotone(z, temp):
    with ad.precision("float64"):
        p = tempered_softmax(T(z), temp).data
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    for row_z, row_p in zip(z, p):
        order = np.argsort(row_z, kind="stable")
        assert np.all(np.diff(row_p[order]) >= -1e-15)


# -- sd_loss ---------------------------------------------------------------------


def test_sd_loss_examples(f64):
    z = np.array([[1.0, -0.5], [0.2, 0.3]])
    assert abs(sd_loss(T(z), z, 2.0).item()) < 1e-10
    expected = oracles.sd_loss([[1, 0]], [[0, 1]], 1.0)
    assert sd_loss(T([[1, 0]]), np.array([[0.0, 1.0]]), 1.0).item() == pytest.approx(expected, abs=1e-12)


def test_sd_temperature_prefactor_is_exact(f64):
    s, t = np.array([[1.0, 0.0, 2.0]]), np.array([[0.0, 1.0, -1.0]])
    p, q = oracles.softmax_row(s[0], 2), oracles.softmax_row(t[0], 2)
    kl2 = sum(a * math.log(a / b) for a, b in zip(p, q))
    assert sd_loss(T(s), t, 2.0).item() == pytest.approx(4 * kl2, abs=1e-14)


def test_sd_loss_does_not_reach_teacher(f64):
    teacher = Tensor(np.array([[0.5, -0.5]]), requires_grad=True)
    student = Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
    sd_loss(student, teacher, 2.0).backward()
    assert teacher.grad is None
    assert student.grad is not None


def test_sd_loss_extreme_teacher_stays_finite(f64):
    out = sd_loss(T([[50.0, -50.0]]), np.array([[-800.0, 800.0]]), 1.0).item()
    assert np.isfinite(out) and out > 0


@given(logit_rows, st.integers(0, 2**31 - 1), st.floats(0.5, 4))
def test_sd_loss_non_negative(z, seed, temp):
    t = np.random.default_rng(seed).standard_normal(z.shape) * 3
    with ad.precision("float64"):
        assert sd_loss(T(z), t, temp).item() >= -1e-12


def test_sd_loss_shape_mismatch():
    with pytest.raises(ValueError):
        sd_loss(T([[1.0, 2.0]]), np.zeros((2, 2)), 2.0)


# -- mk_mmd ---------------------------------------------------------------------


def test_mmd_examples(f64):
    spec = KernelSpec(bandwidths=(1.0,), weights=(1.0,))
    assert mk_mmd(T([[0.0]]), T([[2.0]]), spec).item() == pytest.approx(2 - 2 * math.exp(-2), abs=1e-15)
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert abs(mk_mmd(T(x), T(x)).item()) < 1e-9


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_mmd_symmetric_and_non_negative(ns, nt, d, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((ns, d)), r.standard_normal((nt, d)) + 0.3
    with ad.precision("float64"):
        ab = mk_mmd(T(a), T(b)).item()
        ba = mk_mmd(T(b), T(a)).item()
    assert ab == pytest.approx(ba, abs=1e-12)
    assert ab >= -1e-12


def test_mmd_increases_with_mean_shift(f64):
    spec = KernelSpec(bandwidths=(0.5, 1.0, 2.0, 4.0, 8.0))
    for seed in range(20):
        r = np.random.default_rng(seed)
        a = r.standard_normal((16, 4))
        direction = r.standard_normal(4)
        direction /= np.linalg.norm(direction)
        values = [mk_mmd(T(a), T(a + shift * direction), spec).item() for shift in (0.0, 0.5, 1.0, 2.0)]
        assert all(x < y for x, y in zip(values, values[1:])), (seed, values)


def test_mmd_errors():
    with pytest.raises(ValueError):
        mk_mmd(T(np.zeros((0, 2))), T(np.ones((2, 2))))
    with pytest.raises(ValueError, match="dims"):
        mk_mmd(T(np.zeros((2, 2))), T(np.ones((2, 3))))


def test_mmd_bandwidth_is_treated_as_constant(f64):
    # the gradient with median bandwidths equals the gradient with those widths pinned
    r = np.random.default_rng(4)
    a, b = r.standard_normal((4, 3)), r.standard_normal((4, 3)) + 1
    pinned = KernelSpec().pinned(np.concatenate([a, b]))
    grads = []
    for spec in (KernelSpec(), pinned):
        g = Graph(lambda s, t, _spec=spec: mk_mmd(s, t, _spec), ["s", "t"])
        g.forward({"s": a, "t": b})
        grads.append(g.backward())
    np.testing.assert_allclose(grads[0]["s"], grads[1]["s"], rtol=1e-12, atol=1e-14)


# -- uncertainty weights ----------------------------------------------------------


def test_uncertainty_weight_examples(f64):
    np.testing.assert_allclose(uncertainty_weights(T([[1.0, 0.0]])).data, [2.0])
    np.testing.assert_allclose(uncertainty_weights(T([[0.5, 0.5]])).data, [1.5], atol=1e-15)
    uniform = [uncertainty_weights(T(np.full((1, c), 1 / c))).item() for c in (2, 4, 16, 256)]
    assert all(x > y for x, y in zip(uniform, uniform[1:]))
    assert 1 < uniform[-1] < 1.01


@given(logit_rows)
def test_uncertainty_weight_range_and_monotonicity(z):
    with ad.precision("float64"):
        p = ad.softmax(T(z), axis=1).data
        v = uncertainty_weights(T(p)).data
    assert np.all(v > 1) and np.all(v <= 2)
    h = -np.sum(p * np.log(np.maximum(p, 1e-300)), axis=1)
    order = np.argsort(h)
    assert np.all(np.diff(v[order]) <= 1e-12)


# -- confusion loss ------------------------------------------------------------------


def test_confusion_loss_examples(f64):
    assert confusion_loss(T([[1000.0, -1000.0]]), 2.0).item() == pytest.approx(0.0, abs=1e-12)
    # equal logits -> q = [0.5, 0.5] for any temperature
    assert confusion_loss(T([[0.0, 0.0]]), 2.0).item() == pytest.approx(0.375, abs=1e-15)
    m = confusion_matrix(T([[0.0, 0.0]]), 2.0).data
    np.testing.assert_allclose(m, np.full((2, 2), 0.375), atol=1e-15)


def test_confusion_loss_is_linear_in_identical_rows(f64):
    row = np.array([[0.3, -0.2, 1.0]])
    one = confusion_loss(T(row), 2.0).item()
    for n in (2, 5, 11):
        assert confusion_loss(T(np.repeat(row, n, axis=0)), 2.0).item() == pytest.approx(n * one, rel=1e-12)
        mean = confusion_loss(T(np.repeat(row, n, axis=0)), 2.0, normalization="batch").item()
        assert mean == pytest.approx(one, rel=1e-12)
        per_class = confusion_loss(T(np.repeat(row, n, axis=0)), 2.0, normalization="class").item()
        assert per_class == pytest.approx(confusion_loss(T(row), 2.0, normalization="class").item(), rel=1e-12)


@given(logit_rows, st.floats(0.5, 4))
def test_confusion_loss_positive_for_soft_rows(z, temp):
    with ad.precision("float64"):
        assert confusion_loss(T(z), temp).item() > 0


def test_confusion_loss_rejects_bad_normalization():
    with pytest.raises(ValueError):
        confusion_loss(T([[0.0, 1.0]]), 2.0, normalization="max")
    with pytest.raises(ValueError):
        LossWeights(confusion_normalization="max")


def test_class_normalized_confusion_penalizes_collapse(f64):
    # confident, balanced predictions vs everything pushed towards class 0
    balanced = np.array([[4.0, -4.0]] * 8 + [[-4.0, 4.0]] * 8)
    collapsed = np.array([[4.0, -4.0]] * 15 + [[-4.0, 4.0]])
    raw = [confusion_loss(T(z), 2.0).item() for z in (balanced, collapsed)]
    per_class = [confusion_loss(T(z), 2.0, normalization="class").item() for z in (balanced, collapsed)]
    assert raw[1] == pytest.approx(raw[0], rel=1e-9)
    assert per_class[1] > 2 * per_class[0]


@given(logit_rows, st.floats(0.5, 4))
def test_class_normalized_confusion_bounded(z, temp):
    with ad.precision("float64"):
        value = confusion_loss(T(z), temp, normalization="class").item()
    assert 0 < value <= 1 + 1e-12


# -- oracle agreement on random small instances ---------------------------------------


def test_losses_match_oracles_on_50_instances(f64):
    r = np.random.default_rng(2024)
    for _ in range(50):
        n, c, d = int(r.integers(1, 6)), int(r.integers(2, 5)), int(r.integers(1, 4))
        s, t = r.standard_normal((n, c)) * 2, r.standard_normal((n, c)) * 2
        temp = float(r.uniform(0.5, 3))
        assert sd_loss(T(s), t, temp).item() == pytest.approx(oracles.sd_loss(s, t, temp), abs=1e-9)
        for norm in ("none", "batch", "class"):
            got = confusion_loss(T(s), temp, normalization=norm).item()
            assert got == pytest.approx(oracles.confusion_loss(s, temp, norm), abs=1e-9)
        p = ad.softmax(T(s), axis=1).data
        np.testing.assert_allclose(uncertainty_weights(T(p)).data, oracles.uncertainty_weights(p), atol=1e-9)
        fs, ft = r.standard_normal((n, d)), r.standard_normal((int(r.integers(1, 6)), d)) + 0.5
        sig = tuple(float(x) for x in r.uniform(0.3, 3, size=3))
        beta = tuple(float(x) for x in r.dirichlet(np.ones(3)))
        beta = beta[:2] + (1.0 - beta[0] - beta[1],)
        got = mk_mmd(T(fs), T(ft), KernelSpec(weights=beta, bandwidths=sig)).item()
        assert got == pytest.approx(oracles.mk_mmd(fs, ft, sig, beta), abs=1e-9)


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_losses_are_permutation_invariant(n, seed):
    r = np.random.default_rng(seed)
    z, t = r.standard_normal((n, 3)), r.standard_normal((n, 3))
    f, g = r.standard_normal((n, 4)), r.standard_normal((n + 1, 4))
    perm = r.permutation(n)
    labels = r.integers(0, 3, n)
    with ad.precision("float64"):
        pairs = [
            (cross_entropy(T(z), labels), cross_entropy(T(z[perm]), labels[perm])),
            (sd_loss(T(z), t, 2.0), sd_loss(T(z[perm]), t[perm], 2.0)),
            (confusion_loss(T(z), 2.0), confusion_loss(T(z[perm]), 2.0)),
            (mk_mmd(T(f), T(g)), mk_mmd(T(f[perm]), T(g[::-1]))),
        ]
    for a, b in pairs:
        assert a.item() == pytest.approx(b.item(), rel=1e-12, abs=1e-14)


# -- composites ---------------------------------------------------------------------------


def test_student_loss_uda_weighting(f64):
    ce, sd, ma, cl = T(1.5), T(0.25), T(0.125), T(2.0)
    assert student_loss_uda(ce, sd, ma, cl, LossWeights(0, 0, 0)).item() == 1.5
    assert student_loss_uda(ce, sd, ma, cl, LossWeights()).item() == 1.5 + 0.25 + 0.125 + 2.0
    assert student_loss_uda(ce, None, None, None, LossWeights(0, 0, 0)).item() == 1.5
    with pytest.raises(ValueError, match="missing"):
        student_loss_uda(ce, None, ma, cl, LossWeights())


def test_student_loss_sda(f64):
    ce_s, ce_t, sd, ma, cl = T(1.0), T(0.5), T(0.25), T(0.125), T(2.0)
    w = LossWeights()
    assert student_loss_sda(ce_s, ce_t, sd, ma, cl, w).item() == 1.0 + 0.5 + 0.25 + 0.125 + 2.0
    zero_target = student_loss_sda(ce_s, T(0.0), sd, ma, cl, w).item()
    assert zero_target == student_loss_uda(ce_s, sd, ma, cl, w).item()
    with pytest.raises(ValueError, match="labeled target"):
        student_loss_sda(ce_s, None, sd, ma, cl, w)


def test_weight_linearity_in_gradient(f64):
    labels = [0, 1, 1]
    teacher = np.array([[0.2, -0.1], [1.0, 0.0], [-0.5, 0.5]])
    z = np.random.default_rng(8).standard_normal((3, 2))

    def grad_of(build):
        g = Graph(build, ["z"])
        g.forward({"z": z})
        return g.backward()["z"]

    composite = grad_of(lambda z: cross_entropy(z, labels) + sd_loss(z, teacher, 2.0))
    weighted = grad_of(
        lambda z: student_loss_uda(cross_entropy(z, labels), sd_loss(z, teacher, 2.0), None, None, LossWeights(1, 0, 0))
    )
    np.testing.assert_allclose(weighted, composite, rtol=0, atol=1e-15)


def test_composite_losses_pass_grad_check(f64):
    from sdda.checks import check_objectives

    for name, report in check_objectives(tol=1e-5).items():
        assert report.passed, f"{name}: {report}"


@pytest.mark.parametrize("fn", [cross_entropy, sd_loss, confusion_loss, mk_mmd])
def test_losses_gradients_at_random_points(fn, f64):
    r = np.random.default_rng(7)
    teacher = r.standard_normal((4, 3))
    spec = KernelSpec(bandwidths=(0.5, 2.0), weights=(0.5, 0.5))
    builders = {
        cross_entropy: lambda z: cross_entropy(z, [0, 2, 1, 1]),
        sd_loss: lambda z: sd_loss(z, teacher, 2.0),
        confusion_loss: lambda z: confusion_loss(z, 2.0, normalization="class"),
        mk_mmd: lambda z: mk_mmd(z[:2], z[2:], spec),
    }
    for _ in range(10):
        report = grad_check(builders[fn], {"z": r.standard_normal((4, 3))}, tol=1e-5)
        assert report.passed, str(report)
