"""Losses, reverse-mode gradients against central differences, optimizers."""

import math
import re

import numpy as np
import pytest

from deep_rkhm import algebra, kernels, model, pfnorm, training


def psd_factor(rng, desc, ridge=0.5):
    b = algebra.random_element(desc, rng)
    dense = np.asarray(b.entries)
    m = dense.T @ dense + ridge * np.eye(desc.d)
    return algebra.make_element(desc, algebra.project_onto(desc, m).entries
                                if desc.kind == "circulant" else m)


def sep_kernel(desc, kind="laplacian", c=0.5, rng=None, identity=True):
    if identity:
        a = algebra.identity(desc)
    else:
        a = psd_factor(rng, desc)
    return kernels.MatrixKernel("separable", kernels.ScalarKernel(kind, c), a)


def random_layer(rng, kernel, coeff_desc, n, scale=0.3):
    stack = np.stack([np.asarray(algebra.random_element(coeff_desc, rng).entries)
                      for _ in range(n)]) * scale
    return model.Layer(kernel, coeff_desc, stack)


def random_model(seed, n=3, d=4, product_top=False, kind="laplacian",
                 identity_factor=True):
    rng = np.random.default_rng(seed)
    full = algebra.full(d)
    block = algebra.block_diag([d // 2, d - d // 2])
    k1 = sep_kernel(full, kind=kind, c=0.5, rng=rng, identity=identity_factor)
    if product_top:
        k2 = kernels.MatrixKernel("product_conv",
                                  kernels.ScalarKernel(kind, 0.3),
                                  psd_factor(rng, full))
    else:
        k2 = sep_kernel(full, kind=kind, c=0.3, rng=rng,
                        identity=identity_factor)
    layers = [random_layer(rng, k1, block, n), random_layer(rng, k2, full, n)]
    anchors = rng.normal(0.0, 0.6, size=(n, d, d))
    targets = rng.normal(0.0, 0.5, size=(n, d, d))
    return model.DeepModel(layers, anchors), targets


# --- losses -----------------------------------------------------------------

def test_loss_hand_values_and_trace_bound():
    pred = np.diag([1.0, 2.0])[None]
    tgt = np.zeros((1, 2, 2))
    assert training.loss_opnorm(pred, tgt) == pytest.approx(4.0, abs=1e-14)
    assert training.loss_hs(pred, tgt) == pytest.approx(5.0, abs=1e-14)
    rng = np.random.default_rng(0)
    p = rng.normal(size=(7, 5, 5))
    t = rng.normal(size=(7, 5, 5))
    # the mean residual matrix is PSD, so its top eigenvalue is at most
    # its trace, which is exactly the mean squared HS norm
    assert training.loss_opnorm(p, t) <= training.loss_hs(p, t) + 1e-12
    with pytest.raises(algebra.ShapeMismatch):
        training.loss_opnorm(p, t[:3])
    bad = p.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(training.NonFinite):
        training.loss_hs(bad, t)


def test_cross_entropy():
    z = np.zeros((4, 10))
    labels = np.array([0, 3, 9, 5])
    assert training.loss_cross_entropy(z, labels) == pytest.approx(
        math.log(10.0), abs=1e-13)
    # shift invariance
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    shifted = z + rng.normal(size=(6, 1))
    assert training.loss_cross_entropy(z, labels) == pytest.approx(
        training.loss_cross_entropy(shifted, labels), rel=1e-12)
    # reference via direct stable log-sum-exp
    ref = 0.0
    for i in range(6):
        m = z[i].max()
        ref += m + math.log(np.sum(np.exp(z[i] - m))) - z[i, labels[i]]
    assert training.loss_cross_entropy(z, labels) == pytest.approx(
        ref / 6, rel=1e-13)
    # saturated correct logit
    big = np.zeros((1, 3))
    big[0, 1] = 30.0
    assert training.loss_cross_entropy(big, np.array([1])) <= 1e-12
    with pytest.raises(training.IndexOutOfRange):
        training.loss_cross_entropy(z, np.array([0, 1, 2, 3, 4, 0]))
    with pytest.raises(training.IndexOutOfRange):
        training.loss_cross_entropy(z, np.array([0, -1, 2, 3, 2, 0]))
    with pytest.raises(training.NonFinite):
        training.loss_cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))


def test_config_validation():
    with pytest.raises(ValueError):
        training.LossConfig(kind="huber")
    with pytest.raises(ValueError):
        training.LossConfig(lambda1=-1.0)
    with pytest.raises(ValueError):
        training.LossConfig(lambda2=-0.5)
    with pytest.raises(ValueError):
        training.LossConfig(lambda1=1.0, eta=0.0)
    with pytest.raises(ValueError):
        training.LossConfig(norm_penalty="cubed")
    cfg = training.LossConfig(kind="hs_mean", lambda1=2.0, eta=0.1)
    assert cfg.eta == 0.1


# --- gradients --------------------------------------------------------------

def test_zero_residual_zero_gradient():
    d, n = 3, 4
    desc = algebra.full(d)
    kern = sep_kernel(desc, c=0.7)
    rng = np.random.default_rng(2)
    anchors = rng.normal(size=(n, d, d))
    mdl = model.DeepModel(
        [model.Layer(kern, desc, np.zeros((n, d, d)))], anchors)
    cfg = training.LossConfig(kind="opnorm")
    grads = training.grad_params(mdl, None, np.zeros((n, d, d)), cfg)
    assert np.all(grads.layers[0] == 0.0)
    assert grads.norm() == 0.0


def test_single_anchor_hand_gradient():
    # one 1x1 anchor: pred = a * c0, loss = (a c0 - t)^2, d/dc0 = 2a(a c0 - t)
    desc = algebra.full(1)
    a = algebra.make_element(desc, [[2.0]])
    kern = kernels.MatrixKernel("separable",
                                kernels.ScalarKernel("laplacian", 1.0), a)
    mdl = model.DeepModel(
        [model.Layer(kern, desc, np.ones((1, 1, 1)))],
        np.array([[[0.5]]]))
    cfg = training.LossConfig(kind="hs_mean")
    grads, parts = training.grad_and_value(mdl, None, np.array([[[3.0]]]), cfg)
    assert parts["loss"] == pytest.approx(1.0, abs=1e-15)
    assert grads.layers[0][0, 0, 0] == pytest.approx(-4.0, abs=1e-14)


def test_gradient_pattern_exact():
    d, n = 4, 3
    rng = np.random.default_rng(3)
    circ = algebra.circulant(d)
    block = algebra.block_diag([1, 3])
    k1 = sep_kernel(algebra.full(d), c=0.4)
    k2 = sep_kernel(algebra.full(d), c=0.2)
    layers = [random_layer(rng, k1, circ, n), random_layer(rng, k2, block, n)]
    mdl = model.DeepModel(layers, rng.normal(size=(n, d, d)))
    cfg = training.LossConfig(kind="opnorm", lambda1=0.5, eta=0.1, lambda2=0.2)
    grads = training.grad_params(mdl, None, rng.normal(size=(n, d, d)), cfg)
    g_circ, g_block = grads.layers
    assert np.all(g_block[:, ~block.mask()] == 0.0)
    i = np.arange(d)
    for k in range(d):
        diag = g_circ[:, i, (i + k) % d]
        assert np.all(diag == diag[:, :1])


def test_quadratic_toy_finite_diff():
    # single layer, mean squared HS loss, no regularizers: the objective is
    # exactly quadratic in the coefficients, so central differences agree
    # with the analytic gradient to rounding error
    d, n = 3, 4
    desc = algebra.full(d)
    rng = np.random.default_rng(4)
    kern = sep_kernel(desc, kind="laplacian", c=0.5, rng=rng, identity=False)
    mdl = model.DeepModel([random_layer(rng, kern, desc, n, scale=0.5)],
                          rng.normal(size=(n, d, d)))
    cfg = training.LossConfig(kind="hs_mean")
    report = training.finite_diff_check(
        mdl, (None, rng.normal(size=(n, d, d))), cfg, step=1e-3)
    assert report.skipped == 0
    assert report.checked == n * d * d
    assert report.max_rel_err <= 1e-9


def test_finite_diff_deep_with_regularizers():
    mdl, targets = random_model(seed=5)
    cfg = training.LossConfig(kind="opnorm", lambda1=0.5, eta=0.1, lambda2=0.3)
    report = training.finite_diff_check(mdl, (None, targets), cfg, step=1e-6)
    assert report.max_rel_err <= 1e-4
    assert report.skipped <= max(1, report.total // 20)


def test_finite_diff_product_conv_top():
    mdl, targets = random_model(seed=6, product_top=True)
    cfg = training.LossConfig(kind="opnorm", lambda1=0.4, eta=0.2,
                              lambda2=0.2, norm_penalty="plain")
    report = training.finite_diff_check(mdl, (None, targets), cfg, step=1e-6)
    assert report.max_rel_err <= 1e-4
    assert report.skipped <= max(1, report.total // 20)


def test_finite_diff_batch_path():
    mdl, _ = random_model(seed=7)
    rng = np.random.default_rng(70)
    z = rng.normal(0.0, 0.6, size=(5, 4, 4))
    targets = rng.normal(0.0, 0.5, size=(5, 4, 4))
    cfg = training.LossConfig(kind="hs_mean", lambda1=0.3, eta=0.1,
                              lambda2=0.1)
    report = training.finite_diff_check(mdl, (z, targets), cfg, step=1e-6)
    assert report.max_rel_err <= 1e-4
    assert report.skipped <= max(1, report.total // 20)


class _LinearHead:
    """Minimal classifier head: logits = flat @ w."""

    def __init__(self, rng, inputs, classes):
        self.w = rng.normal(0.0, 0.2, size=(inputs, classes))

    def logits(self, flat):
        return flat @ self.w

    def backward(self, flat, dlogits):
        return dlogits @ self.w.T, [flat.T @ dlogits]


def test_finite_diff_cross_entropy_head():
    mdl, _ = random_model(seed=8, kind="gaussian")
    rng = np.random.default_rng(80)
    head = _LinearHead(rng, 16, 3)
    labels = np.array([0, 2, 1])
    cfg = training.LossConfig(kind="cross_entropy", lambda2=0.05)
    report = training.finite_diff_check(mdl, (None, labels), cfg,
                                        step=1e-6, head=head)
    assert report.skipped == 0
    assert report.max_rel_err <= 1e-4
    grads = training.grad_params(mdl, None, labels, cfg, head=head)
    assert grads.head is not None and grads.head[0].shape == (16, 3)
    assert grads.norm() > 0.0


def test_finite_diff_step_validation():
    mdl, targets = random_model(seed=9)
    cfg = training.LossConfig(kind="hs_mean")
    with pytest.raises(ValueError):
        training.finite_diff_check(mdl, (None, targets), cfg, step=0.0)


def test_reg_value_matches_pf_regularizer():
    for product_top in (False, True):
        mdl, targets = random_model(seed=10 + product_top,
                                    product_top=product_top,
                                    identity_factor=False)
        cfg = training.LossConfig(kind="hs_mean", lambda1=2.5, eta=0.05)
        parts = training.evaluate_objective(mdl, None, targets, cfg)
        images = model.anchor_images(mdl)
        gl = kernels.gram(mdl.layers[-1].kernel, images[-2])
        want = pfnorm.pf_regularizer(gl, eta=0.05, lambda1=2.5)
        assert parts["reg_pf"] == pytest.approx(want, rel=1e-10)


def test_nonfinite_coefficients_raise():
    mdl, targets = random_model(seed=11)
    bad = mdl.layers[0].coeffs.copy()
    bad[0, 0, 0] = np.inf
    model.set_coeffs(mdl, 0, bad)
    cfg = training.LossConfig(kind="hs_mean")
    with np.errstate(invalid="ignore"):
        with pytest.raises(training.NonFinite):
            training.grad_params(mdl, None, targets, cfg)


# --- optimizers -------------------------------------------------------------

def test_sgd_hand_step():
    # ridge objective 0.5 c^2, gradient c: from c0 = 1 with lr 0.1 -> 0.9
    state = training.init_optimizer("sgd", 0.1, [np.array([1.0])])
    (new,) = training.update_arrays(state, [np.array([1.0])],
                                    [np.array([1.0])])
    assert new[0] == pytest.approx(0.9, abs=1e-15)
    assert state.step_count == 1
    with pytest.raises(algebra.ShapeMismatch):
        training.update_arrays(state, [np.array([1.0])], [])
    with pytest.raises(algebra.ShapeMismatch):
        training.update_arrays(state, [np.array([1.0])],
                               [np.array([1.0, 2.0])])
    with pytest.raises(ValueError):
        training.init_optimizer("lbfgs", 0.1, [np.array([1.0])])


def test_adam_first_step_and_zero_grad():
    p = np.array([0.3, -0.7, 2.0])
    g = np.array([5.0, -0.01, 3e4])
    state = training.init_optimizer("adam", 1e-3, [p])
    (new,) = training.update_arrays(state, [p], [g])
    # first Adam step moves every entry by lr regardless of gradient scale
    step = np.abs(new - p)
    assert np.allclose(step, 1e-3, rtol=1e-5)
    assert np.all(np.sign(p - new) == np.sign(g))
    state2 = training.init_optimizer("adam", 1e-3, [p])
    (same,) = training.update_arrays(state2, [p], [np.zeros(3)])
    assert np.array_equal(same, p)
    assert state2.step_count == 1


def test_optimizer_step_model_stays_in_pattern():
    d, n = 4, 3
    rng = np.random.default_rng(12)
    circ = algebra.circulant(d)
    kern = sep_kernel(algebra.full(d), c=0.4)
    mdl = model.DeepModel([random_layer(rng, kern, circ, n)],
                          rng.normal(size=(n, d, d)))
    targets = rng.normal(size=(n, d, d))
    cfg = training.LossConfig(kind="hs_mean", lambda2=0.1)
    grads = training.grad_params(mdl, None, targets, cfg)
    before = mdl.layers[0].coeffs.copy()
    state = training.init_optimizer("sgd", 0.01, mdl)
    training.optimizer_step(state, mdl, grads)
    after = mdl.layers[0].coeffs
    assert not np.array_equal(before, after)
    model.check_stack_pattern(after, circ)
    # matches the plain update up to the circulant rounding guard
    assert np.allclose(after, before - 0.01 * grads.layers[0],
                       rtol=0.0, atol=1e-14)


def test_descent_sanity():
    drops = 0
    for seed in range(20):
        mdl, targets = random_model(seed=100 + seed,
                                    product_top=bool(seed % 2))
        cfg = training.LossConfig(kind="opnorm", lambda1=0.5, eta=0.1,
                                  lambda2=0.2)
        grads, parts = training.grad_and_value(mdl, None, targets, cfg)
        state = training.init_optimizer("sgd", 1e-6, mdl)
        training.optimizer_step(state, mdl, grads)
        after = training.evaluate_objective(mdl, None, targets, cfg)
        assert after["total"] < parts["total"]
        drops += 1
    assert drops == 20


def test_log_line_format():
    parts = {"loss": 1.5, "reg_pf": 0.25, "reg_norm": 1.0 / 3.0,
             "total": 1.5 + 0.25 + 1.0 / 3.0}
    line = training.format_log_line(7, parts, 0.125, 42.0)
    fields = line.split(",")
    assert len(fields) == 7
    assert fields[0] == "7"
    assert float(fields[3]) == 1.0 / 3.0  # 17 significant digits round-trip
    assert training.LOG_HEADER.count(",") == 6
    assert re.fullmatch(r"[0-9.,eE+-]+", line)
