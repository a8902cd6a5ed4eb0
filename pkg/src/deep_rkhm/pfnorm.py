"""Transfer norms between the first and last layer Gram matrices.

The composition operator that re-expands a function of the first layer in
terms of the last layer has operator norm || G_L^(1/2) G_1^(-1/2) ||, with an
eigenvalue-only upper bound and a practical regularizer that only needs G_L.
Factored (separable) Grams never get materialized: Kronecker structure turns
both quantities into products of an n x n piece and a d x d piece.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import algebra

RIDGE_DEFAULT = 0.01
SINGULAR_REL = 1e-12


class SingularGram(Exception):
    pass


def _sym(m):
    return (m + m.T) / 2


def eigen_extrema(g):
    """(smallest, largest) eigenvalue of a Gram matrix, factored or dense."""
    if g.storage == "separable":
        ws, _ = algebra.sorted_eigh(_sym(g.scalar_gram))
        wf, _ = algebra.spectral(g.factor)
        combos = np.outer([ws[-1], ws[0]], [wf[-1], wf[0]]).ravel()
        return float(combos.min()), float(combos.max())
    w, _ = algebra.sorted_eigh(_sym(g.dense()))
    return float(w[-1]), float(w[0])


def _check_match(g1, gl):
    if (g1.n, g1.d) != (gl.n, gl.d):
        raise algebra.ShapeMismatch(
            f"gram sizes differ: ({g1.n}, {g1.d}) vs ({gl.n}, {gl.d})")


def _invertible_gate(lo, hi, what):
    if lo <= SINGULAR_REL * max(hi, 0.0):
        raise SingularGram(f"{what} has eigenvalue range [{lo:.3e}, {hi:.3e}]")


def _sqrt_psd(dense):
    w, v = algebra.sorted_eigh(_sym(dense))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _inv_sqrt(dense, what):
    w, v = algebra.sorted_eigh(_sym(dense))
    _invertible_gate(float(w[-1]), float(w[0]), what)
    return (v / np.sqrt(w)) @ v.T


def _op_norm(m):
    return float(np.linalg.svd(m, compute_uv=False)[0])


def pf_norm_exact(g1, gl):
    """|| G_L^(1/2) G_1^(-1/2) || with G_1 required to be invertible.

    When both Grams are factored the norm splits into the product of the
    scalar-gram part and the factor part, avoiding the (n d)^2 matrices.
    """
    _check_match(g1, gl)
    if g1.storage == "separable" and gl.storage == "separable":
        scalar = _split_exact(g1.scalar_gram, gl.scalar_gram, "scalar gram")
        factor = _split_exact(np.asarray(g1.factor.entries),
                              np.asarray(gl.factor.entries), "factor")
        return scalar * factor
    return _op_norm(_sqrt_psd(gl.dense()) @ _inv_sqrt(g1.dense(), "first gram"))


def _split_exact(m1, ml, what):
    return _op_norm(_sqrt_psd(ml) @ _inv_sqrt(m1, what))


def pf_norm_bound(g1, gl):
    """Eigenvalue bound lambda_max(G_L) / sqrt(lambda_min(G_L) lambda_min(G_1)).

    Dominates pf_norm_exact and needs both Grams invertible.
    """
    _check_match(g1, gl)
    lo1, hi1 = eigen_extrema(g1)
    lol, hil = eigen_extrema(gl)
    _invertible_gate(lo1, hi1, "first gram")
    _invertible_gate(lol, hil, "last gram")
    return float(hil / np.sqrt(lol * lo1))


def pf_regularizer(gl, eta=RIDGE_DEFAULT, lambda1=1.0):
    """lambda1 * (||(eta I + G_L)^(-1)|| + ||G_L||), the trainable surrogate."""
    lo, hi = eigen_extrema(gl)
    if eta + lo <= 0.0:
        raise SingularGram(f"eta + lambda_min = {eta + lo:.3e} not positive")
    return float(lambda1 * (1.0 / (eta + lo) + max(hi, 0.0)))


@dataclass
class PfReport:
    """Transfer-norm summary between two layer Grams."""

    exact: float  # None when skipped
    bound: float
    regularizer: float
    gl_min: float
    gl_max: float

    def to_json(self):
        return {"exact": self.exact, "bound": self.bound,
                "regularizer": self.regularizer,
                "gl_eigen_extrema": [self.gl_min, self.gl_max]}


def pf_report(g1, gl, eta=RIDGE_DEFAULT, lambda1=1.0, with_exact=True):
    lo, hi = eigen_extrema(gl)
    exact = pf_norm_exact(g1, gl) if with_exact else None
    return PfReport(exact=exact,
                    bound=pf_norm_bound(g1, gl),
                    regularizer=pf_regularizer(gl, eta, lambda1),
                    gl_min=lo, gl_max=hi)
