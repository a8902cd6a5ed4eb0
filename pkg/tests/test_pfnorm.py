import numpy as np
import pytest
import scipy.linalg

from deep_rkhm import algebra as alg
from deep_rkhm import kernels as kn
from deep_rkhm import pfnorm as pf


def psd_factor(desc, rng, ridge=0.5):
    b = alg.random_element(desc, rng)
    return alg.add(alg.mul(alg.adjoint(b), b),
                   alg.scale(alg.identity(desc), ridge))


def random_gram_pair(rng, n=4, d=3, force_dense=False):
    X = rng.standard_normal((n, d, d))
    k1 = kn.MatrixKernel("separable", kn.ScalarKernel("laplacian", 0.5),
                         psd_factor(alg.full(d), rng))
    kl = kn.MatrixKernel("separable", kn.ScalarKernel("gaussian", 0.3),
                         psd_factor(alg.block_diag([1] * d), rng))
    Y = X + 0.3 * rng.standard_normal((n, d, d))
    return (kn.gram(k1, X, force_dense=force_dense),
            kn.gram(kl, Y, force_dense=force_dense))


def dense_gram(matrix, n, d):
    return kn.GramMatrix(n=n, d=d, storage="dense", matrix=np.asarray(matrix, float))


def test_exact_matches_scipy_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        g1, gl = random_gram_pair(rng, force_dense=True)
        got = pf.pf_norm_exact(g1, gl)
        sl = scipy.linalg.sqrtm(gl.dense())
        i1 = np.linalg.inv(scipy.linalg.sqrtm(g1.dense()))
        want = np.linalg.norm(np.real(sl @ i1), 2)
        assert got == pytest.approx(want, rel=1e-8)


def test_exact_of_equal_grams_is_one():
    rng = np.random.default_rng(7)
    for force in (False, True):
        g1, _ = random_gram_pair(rng, force_dense=force)
        assert pf.pf_norm_exact(g1, g1) == pytest.approx(1.0, abs=1e-8)


def test_exact_below_bound():
    rng = np.random.default_rng(11)
    for _ in range(25):
        g1, gl = random_gram_pair(rng, n=int(rng.integers(2, 6)),
                                  d=int(rng.integers(2, 5)))
        exact = pf.pf_norm_exact(g1, gl)
        bound = pf.pf_norm_bound(g1, gl)
        assert exact <= bound * (1 + 1e-10)


def test_factored_agrees_with_dense():
    rng = np.random.default_rng(13)
    for _ in range(10):
        g1f, glf = random_gram_pair(rng)
        g1d = dense_gram(g1f.dense(), g1f.n, g1f.d)
        gld = dense_gram(glf.dense(), glf.n, glf.d)
        assert g1f.storage == "separable" and g1d.storage == "dense"
        for fn in (pf.pf_norm_exact, pf.pf_norm_bound):
            a, b = fn(g1f, glf), fn(g1d, gld)
            assert abs(a - b) <= 1e-10 * (1 + abs(b))
        lo_f, hi_f = pf.eigen_extrema(glf)
        lo_d, hi_d = pf.eigen_extrema(gld)
        assert lo_f == pytest.approx(lo_d, rel=1e-9, abs=1e-12)
        assert hi_f == pytest.approx(hi_d, rel=1e-9)


def test_bound_equals_eigen_ratio_on_equal_grams():
    # bound(G, G) = lambda_max / lambda_min, the condition number of G
    g = dense_gram(np.diag([1.0, 4.0]), 1, 2)
    assert pf.pf_norm_bound(g, g) == pytest.approx(4.0, abs=1e-12)
    rng = np.random.default_rng(17)
    g1, _ = random_gram_pair(rng, force_dense=True)
    lo, hi = pf.eigen_extrema(g1)
    assert pf.pf_norm_bound(g1, g1) == pytest.approx(hi / lo, rel=1e-10)


def test_regularizer_hand_value():
    g = dense_gram(np.diag([1.0, 4.0]), 1, 2)
    want = 2.0 * (1.0 / 1.01 + 4.0)
    assert pf.pf_regularizer(g, eta=0.01, lambda1=2.0) == pytest.approx(want, rel=1e-14)
    assert pf.pf_regularizer(g, eta=0.01, lambda1=0.0) == 0.0


def test_singular_gram_raises():
    sing = dense_gram(np.diag([0.0, 1.0]), 1, 2)
    ok = dense_gram(np.eye(2), 1, 2)
    with pytest.raises(pf.SingularGram):
        pf.pf_norm_exact(sing, ok)
    # exact only inverts the first gram
    assert pf.pf_norm_exact(ok, sing) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(pf.SingularGram):
        pf.pf_norm_bound(ok, sing)
    with pytest.raises(pf.SingularGram):
        pf.pf_norm_bound(sing, ok)
    neg = dense_gram(np.diag([-0.02, 1.0]), 1, 2)
    with pytest.raises(pf.SingularGram):
        pf.pf_regularizer(neg, eta=0.01)
    with pytest.raises(alg.ShapeMismatch):
        pf.pf_norm_exact(ok, dense_gram(np.eye(4), 2, 2))


def test_report_roundtrip():
    rng = np.random.default_rng(19)
    g1, gl = random_gram_pair(rng)
    rep = pf.pf_report(g1, gl, eta=0.01, lambda1=3.0)
    assert rep.exact == pytest.approx(pf.pf_norm_exact(g1, gl))
    assert rep.bound == pytest.approx(pf.pf_norm_bound(g1, gl))
    assert rep.regularizer == pytest.approx(pf.pf_regularizer(gl, 0.01, 3.0))
    assert rep.gl_min <= rep.gl_max
    text = alg.dump_json(rep.to_json())
    assert "exact" in text
    skipped = pf.pf_report(g1, gl, with_exact=False)
    assert skipped.exact is None
    alg.dump_json(skipped.to_json())
