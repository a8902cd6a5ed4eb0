"""Closed-form generalization-bound calculators for deep kernel models.

Pure arithmetic on a handful of summary quantities: an input-kernel bound D,
per-layer coefficient norms B_1..B_L, an output bound E, the confidence
level, and the trace of the first-layer Gram.  A convenience estimator reads
plug-in values for these off a trained model; those are empirical surrogates,
not certified suprema.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import model as model_mod
from . import pfnorm, training
from .algebra import dump_json


class InvalidInput(Exception):
    pass


@dataclass(frozen=True)
class BoundInputs:
    """Summary quantities consumed by the bound formulas.

    D bounds the operator norm of the last layer's kernel on its inputs,
    B[j] bounds layer j+1's coefficient norm, E the target norms; trace_sum
    is the summed trace of the first-layer kernel over the sample, and
    empirical the operator-norm training loss.
    """

    D: float
    B: tuple
    E: float
    delta: float
    n: int
    trace_sum: float
    empirical: float

    def __post_init__(self):
        object.__setattr__(self, "B", tuple(float(b) for b in self.B))
        if not self.B:
            raise InvalidInput("need at least one layer norm")
        if self.D <= 0 or any(b <= 0 for b in self.B):
            raise InvalidInput("D and every B entry must be positive")
        if self.E < 0 or self.trace_sum < 0 or self.empirical < 0:
            raise InvalidInput("E, trace_sum, empirical must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise InvalidInput(f"delta must be in (0,1), got {self.delta}")
        if int(self.n) != self.n or self.n < 1:
            raise InvalidInput(f"n must be a positive integer, got {self.n}")

    def to_json(self):
        return {"D": self.D, "B": list(self.B), "E": self.E,
                "delta": self.delta, "n": int(self.n),
                "trace_sum": self.trace_sum, "empirical": self.empirical}


def inputs_from_json(obj):
    keys = ("D", "B", "E", "delta", "n", "trace_sum", "empirical")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise InvalidInput(f"missing fields: {missing}")
    return BoundInputs(**{k: obj[k] for k in keys})


@dataclass(frozen=True)
class BoundReport:
    K_tilde: float
    M_tilde: float
    term_empirical: float
    term_complexity: float
    term_confidence: float
    total: float

    def to_json(self):
        return {"K_tilde": self.K_tilde, "M_tilde": self.M_tilde,
                "term_empirical": self.term_empirical,
                "term_complexity": self.term_complexity,
                "term_confidence": self.term_confidence,
                "total": self.total}

    def dumps(self):
        return dump_json(self.to_json())


def deep_bound(inp):
    """High-probability excess-risk bound for an L-layer model.

    K_tilde = 4*sqrt(2)*(sqrt(D)*B_L + E)*B_1*...*B_L scales the complexity
    term (K_tilde/n)*sqrt(trace_sum); M_tilde = 6*(sqrt(D)*B_L + E)^2 scales
    the confidence term sqrt(log(2/delta)/(2n)).  With one layer this is
    exactly the shallow bound.
    """
    if not isinstance(inp, BoundInputs):
        inp = BoundInputs(**inp) if isinstance(inp, dict) else inp
    base = math.sqrt(inp.D) * inp.B[-1] + inp.E
    k_tilde = 4.0 * math.sqrt(2.0) * base * math.prod(inp.B)
    m_tilde = 6.0 * base * base
    term_complexity = (k_tilde / inp.n) * math.sqrt(inp.trace_sum)
    term_confidence = m_tilde * math.sqrt(
        math.log(2.0 / inp.delta) / (2.0 * inp.n))
    total = inp.empirical + term_complexity + term_confidence
    return BoundReport(K_tilde=k_tilde, M_tilde=m_tilde,
                       term_empirical=inp.empirical,
                       term_complexity=term_complexity,
                       term_confidence=term_confidence,
                       total=total)


def rademacher_deep_bound(pf_norm, fL_norm, trace_sum, n):
    """Expected-complexity estimate (1/n)*pf_norm*fL_norm*sqrt(trace_sum).

    Substituting pf_norm = B_1*...*B_{L-1} and fL_norm = B_L recovers the
    product form used inside deep_bound's complexity term.
    """
    if min(pf_norm, fL_norm, trace_sum) < 0:
        raise InvalidInput("all factors must be nonnegative")
    if int(n) != n or n < 1:
        raise InvalidInput(f"n must be a positive integer, got {n}")
    return (pf_norm * fL_norm * math.sqrt(trace_sum)) / n


def vv_trace_factor(trace_sum, d):
    """Trace penalty after flattening matrices to d^2-vectors: d*trace_sum.

    The matrix-valued setting keeps sqrt(trace_sum); the ratio of the square
    roots is sqrt(d), the dimension advantage reported for matrix outputs.
    """
    if trace_sum < 0:
        raise InvalidInput("trace_sum must be nonnegative")
    if int(d) != d or d < 1:
        raise InvalidInput(f"d must be a positive integer, got {d}")
    return float(d) * float(trace_sum)


def _op_norm(mat):
    return float(np.linalg.norm(mat, 2))


def estimate_bound_inputs(mdl, targets, delta, empirical=None):
    """Plug-in BoundInputs read off a trained model.

    D is the largest operator norm of the last layer's kernel at its own
    inputs, B_L the last layer's module norm, B_j (j < L) the exact
    transfer-operator norm between the Grams of adjacent layers, and E the
    largest target norm.  These are training-sample estimates, not suprema
    over the input domain.
    """
    images = model_mod.anchor_images(mdl)
    last = mdl.layers[-1]
    xL = images[-2]
    D = max(_op_norm(np.asarray(kernels.kernel_eval(last.kernel, x, x).entries))
            for x in xL)
    B = []
    grams = [kernels.gram(layer.kernel, images[j])
             for j, layer in enumerate(mdl.layers)]
    for j in range(len(mdl.layers) - 1):
        B.append(pfnorm.pf_norm_exact(grams[j], grams[j + 1]))
    B.append(model_mod.rkhm_norm(last, xL))
    targets = kernels.as_stack(targets)
    E = max(_op_norm(t) for t in targets)
    if empirical is None:
        empirical = training.loss_opnorm(images[-1], targets)
    return BoundInputs(D=D, B=tuple(B), E=E, delta=float(delta), n=mdl.n,
                       trace_sum=kernels.trace_sum(mdl.layers[0].kernel,
                                                   mdl.anchors),
                       empirical=float(empirical))
