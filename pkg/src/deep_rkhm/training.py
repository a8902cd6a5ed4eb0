"""Losses, reverse-mode gradients, and optimizers for deep kernel models.

The gradient engine differentiates the full objective

    data_loss + lambda1 * (1/(eta + lmin(G_L)) + lmax(G_L)) + lambda2 * penalty

with respect to every layer's coefficient stack, including the flow through
the anchor images consumed by later layers and through the last layer's Gram
matrix.  Operator norms are differentiated through the top eigenvector's
outer product (a deterministic subgradient at ties, fixed by the
eigensolver's sign convention); the Laplacian kernel uses sign(0) = 0 at its
kink.  Gradient accumulation over batch points is sequential and
deterministic, so repeated runs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import algebra, kernels
from . import model as model_mod
from .algebra import ShapeMismatch
from .pfnorm import SingularGram

LOSS_KINDS = ("opnorm", "hs_mean", "cross_entropy")
PENALTY_MODES = ("squared", "plain")
EIGENGAP_TOL = 1e-10


class NonFinite(Exception):
    pass


class IndexOutOfRange(Exception):
    pass


@dataclass
class LossConfig:
    """Objective description: data term plus the two regularizer weights."""

    kind: str = "opnorm"
    lambda1: float = 0.0
    eta: float = 0.01
    lambda2: float = 0.0
    norm_penalty: str = "squared"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.norm_penalty not in PENALTY_MODES:
            raise ValueError(f"unknown norm penalty {self.norm_penalty!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.lambda1 > 0 and not self.eta > 0:
            raise ValueError("eta must be positive when lambda1 > 0")


@dataclass
class GradientSet:
    """Per-layer coefficient gradients, each stack exactly in pattern."""

    layers: list
    head: list = None

    def norm(self):
        total = sum(float(np.sum(g * g)) for g in self.layers)
        if self.head is not None:
            total += sum(float(np.sum(g * g)) for g in self.head)
        return math.sqrt(total)


# --- losses ---------------------------------------------------------------

def _residuals(preds, targets):
    p = kernels.as_stack(preds)
    t = kernels.as_stack(targets)
    if p.shape != t.shape:
        raise ShapeMismatch(f"{p.shape} vs {t.shape}")
    r = p - t
    if not np.all(np.isfinite(r)):
        raise NonFinite("non-finite residuals")
    return r


def loss_opnorm(preds, targets):
    """Operator norm of the mean squared-residual matrix (1/n) sum r^T r."""
    r = _residuals(preds, targets)
    m = np.einsum("bij,bik->jk", r, r) / r.shape[0]
    w, _ = algebra.sorted_eigh((m + m.T) / 2)
    return float(max(w[0], 0.0))


def loss_hs(preds, targets):
    """Mean squared Hilbert-Schmidt norm of the residuals."""
    r = _residuals(preds, targets)
    return float(np.mean(np.sum(r * r, axis=(1, 2))))


def loss_cross_entropy(logits, labels):
    z = np.asarray(logits, dtype=float)
    if z.ndim != 2:
        raise ShapeMismatch(f"logits must be (n, classes), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFinite("non-finite logits")
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ShapeMismatch(f"{labels.shape} labels for {z.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise IndexOutOfRange(
            f"labels outside [0, {z.shape[1]}): {labels.min()}..{labels.max()}")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
    return float(np.mean(lse - z[np.arange(z.shape[0]), labels]))


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _data_loss(cfg, preds, targets, head):
    """Loss value plus its gradient with respect to the predictions.

    For cross_entropy the predictions run through the classifier head;
    the head's parameter gradients are returned as the third item.
    """
    if cfg.kind == "opnorm":
        r = _residuals(preds, targets)
        nb = r.shape[0]
        m = np.einsum("bij,bik->jk", r, r) / nb
        w, v = algebra.sorted_eigh((m + m.T) / 2)
        u = v[:, 0]
        gap = float(w[0] - w[1]) if w.shape[0] > 1 else math.inf
        dpred = (2.0 / nb) * (r @ np.outer(u, u))
        return float(max(w[0], 0.0)), dpred, None, gap
    if cfg.kind == "hs_mean":
        r = _residuals(preds, targets)
        return loss_hs(preds, targets), (2.0 / r.shape[0]) * r, None, math.inf
    if head is None:
        raise ValueError("cross_entropy needs a classifier head")
    flat = preds.reshape(preds.shape[0], -1)
    logits = head.logits(flat)
    value = loss_cross_entropy(logits, targets)
    labels = np.asarray(targets)
    dlogits = _softmax(logits)
    dlogits[np.arange(flat.shape[0]), labels] -= 1.0
    dlogits /= flat.shape[0]
    dflat, head_grads = head.backward(flat, dlogits)
    return value, dflat.reshape(preds.shape), head_grads, math.inf


# --- forward tape ---------------------------------------------------------

def _forward(mdl, batch_inputs):
    """Run anchors (and optionally a batch) through the layers, caching
    the scalar kernel matrices and the product-kernel intermediates."""
    X = [mdl.anchors]
    Z = None if batch_inputs is None else [kernels.as_stack(batch_inputs)]
    caches = []
    for layer in mdl.layers:
        k = layer.kernel
        fac = np.asarray(k.a.entries)
        cache = {"layer": layer, "fac": fac}
        if k.variant == "separable":
            cache["ac"] = fac @ layer.coeffs
            cache["kxx"] = k.scalar.pairwise(X[-1], X[-1])
            x_next = np.einsum("mn,nij->mij", cache["kxx"], cache["ac"])
            if Z is not None:
                cache["kzx"] = k.scalar.pairwise(Z[-1], X[-1])
                Z.append(np.einsum("mn,nij->mij", cache["kzx"], cache["ac"]))
        else:
            px = X[-1] @ fac
            cache["px"] = px
            cache["m"] = np.einsum("nji,njk->nik", X[-1], layer.coeffs)
            cache["kxx"] = k.scalar.pairwise(px, px)
            cache["sx"] = np.einsum("mn,nik->mik", cache["kxx"], cache["m"])
            x_next = X[-1] @ cache["sx"]
            if Z is not None:
                pz = Z[-1] @ fac
                cache["pz"] = pz
                cache["kzx"] = k.scalar.pairwise(pz, px)
                cache["sz"] = np.einsum("mn,nik->mik", cache["kzx"], cache["m"])
                Z.append(Z[-1] @ cache["sz"])
        X.append(x_next)
        caches.append(cache)
    return X, Z, caches


def _pairwise_backward(scalar, X, Y, K, dK):
    """Adjoints (dX, dY) of K = scalar.pairwise(X, Y) given upstream dK.

    Recomputes the difference tensors in chunks instead of caching them;
    sign(0) = 0 at the Laplacian kink.
    """
    dX = np.zeros_like(X)
    dY = np.zeros_like(Y)
    s = dK * K
    n, d2 = Y.shape[0], Y.shape[1] * Y.shape[2]
    chunk = kernels._auto_chunk(n, d2)
    for lo in range(0, X.shape[0], chunk):
        diff = X[lo:lo + chunk, None] - Y[None, :]
        g = np.sign(diff) if scalar.kind == "laplacian" else 2.0 * diff
        w = -scalar.c * s[lo:lo + chunk]
        dX[lo:lo + chunk] += np.einsum("bn,bnij->bij", w, g)
        dY -= np.einsum("bn,bnij->nij", w, g)
    return dX, dY


# --- regularizers at the top layer ----------------------------------------

def _norm_penalty(cache, cfg, seeds, gaps, want_grad):
    """lambda2 penalty on the top layer's module norm (squared by default)."""
    layer = cache["layer"]
    kxx, fac = cache["kxx"], cache["fac"]
    c = layer.coeffs
    if layer.kernel.variant == "separable":
        ac = cache["ac"]
        t = np.einsum("il,lab->iab", kxx, ac)
        q = np.einsum("iab,iac->bc", c, t)
    else:
        m = cache["m"]
        t = np.einsum("il,lab->iab", kxx, m)
        q = np.einsum("iab,iac->bc", m, t)
    w, v = algebra.sorted_eigh((q + q.T) / 2)
    top = float(max(w[0], 0.0))
    if w.shape[0] > 1:
        gaps.append(float(w[0] - w[1]))
    if cfg.norm_penalty == "squared":
        value = cfg.lambda2 * top
        coef = cfg.lambda2
    else:
        value = cfg.lambda2 * math.sqrt(top)
        coef = cfg.lambda2 / (2.0 * math.sqrt(top)) if top > 1e-300 else 0.0
    if not want_grad or coef == 0.0:
        return value
    p = coef * np.outer(v[:, 0], v[:, 0])
    if layer.kernel.variant == "separable":
        ac = cache["ac"]
        seeds["dc"] += np.einsum("ml,lab->mab", kxx, ac) @ p
        seeds["dc"] += fac.T @ (np.einsum("im,iab->mab", kxx, c) @ p)
        seeds["dkxx"] += np.einsum("iab,lac,bc->il", c, ac, p)
    else:
        m = cache["m"]
        seeds["dm"] += np.einsum("ml,lab->mab", kxx, m) @ p
        seeds["dm"] += np.einsum("lm,lab->mab", kxx, m) @ p
        seeds["dkxx"] += np.einsum("iab,lac,bc->il", m, m, p)
    return value


def _combo_extreme(ws, wf, pick):
    """Extreme eigenvalue of a Kronecker product from the factor extremes.

    Returns (value, index into ws, index into wf); pick is min or max.
    Deterministic first-hit tie handling.
    """
    cands = [(-1, -1), (-1, 0), (0, -1), (0, 0)]
    vals = [float(ws[i] * wf[j]) for i, j in cands]
    best = vals.index(pick(vals))
    return vals[best], cands[best][0], cands[best][1]


def _pf_penalty(cache, W, cfg, seeds, gaps, want_grad):
    """lambda1 * (1/(eta + lmin(G_L)) + lmax(G_L)) via the top-layer Gram."""
    layer = cache["layer"]
    kxx = cache["kxx"]
    n = kxx.shape[0]
    if layer.kernel.variant == "separable":
        ws, vs = algebra.sorted_eigh((kxx + kxx.T) / 2)
        wf, _ = algebra.sorted_eigh(
            (np.asarray(layer.kernel.a.entries) +
             np.asarray(layer.kernel.a.entries).T) / 2)
        lo, ilo, jlo = _combo_extreme(ws, wf, min)
        hi, ihi, jhi = _combo_extreme(ws, wf, max)
        if n > 1:
            gaps.append(float(ws[0] - ws[1]))
            gaps.append(float(ws[-2] - ws[-1]))
        if cfg.eta + lo <= 0.0:
            raise SingularGram(f"eta + lambda_min = {cfg.eta + lo:.3e}")
        value = cfg.lambda1 * (1.0 / (cfg.eta + lo) + max(hi, 0.0))
        if want_grad:
            dk = -cfg.lambda1 / (cfg.eta + lo) ** 2 * float(wf[jlo]) * \
                np.outer(vs[:, ilo], vs[:, ilo])
            if hi > 0.0:
                dk = dk + cfg.lambda1 * float(wf[jhi]) * \
                    np.outer(vs[:, ihi], vs[:, ihi])
            seeds["dkxx"] += dk
        return value
    d = W.shape[1]
    blocks = np.einsum("il,iab,lcb->ilac", kxx, W, W)
    g = blocks.transpose(0, 2, 1, 3).reshape(n * d, n * d)
    w, v = algebra.sorted_eigh((g + g.T) / 2)
    lo, hi = float(w[-1]), float(w[0])
    if w.shape[0] > 1:
        gaps.append(float(w[0] - w[1]))
        gaps.append(float(w[-2] - w[-1]))
    if cfg.eta + lo <= 0.0:
        raise SingularGram(f"eta + lambda_min = {cfg.eta + lo:.3e}")
    value = cfg.lambda1 * (1.0 / (cfg.eta + lo) + max(hi, 0.0))
    if want_grad:
        dg = -cfg.lambda1 / (cfg.eta + lo) ** 2 * np.outer(v[:, -1], v[:, -1])
        if hi > 0.0:
            dg = dg + cfg.lambda1 * np.outer(v[:, 0], v[:, 0])
        b = dg.reshape(n, d, n, d).transpose(0, 2, 1, 3)
        seeds["dkxx"] += np.einsum("ilab,ias,lbs->il", b, W, W)
        seeds["dw"] += np.einsum("il,ilab,lbs->ias", kxx, b, W)
        seeds["dw"] += np.einsum("il,ilab,ias->lbs", kxx, b, W)
    return value


# --- the engine -----------------------------------------------------------

def _evaluate(mdl, batch_inputs, batch_targets, cfg, head=None,
              want_grad=True, gaps_out=None):
    layers = mdl.layers
    L = len(layers)
    anchor_mode = batch_inputs is None
    X, Z, caches = _forward(mdl, batch_inputs)
    preds = X[-1] if anchor_mode else Z[-1]
    gaps = [] if gaps_out is None else gaps_out

    value, dpred, head_grads, gap = _data_loss(cfg, preds, batch_targets, head)
    gaps.append(gap)

    # adjoint seeds collected at the top layer by the regularizers
    top = caches[-1]
    n = mdl.n
    seeds = {"dc": np.zeros_like(layers[-1].coeffs),
             "dkxx": np.zeros((n, n)),
             "dw": np.zeros_like(X[L - 1])}
    if top["layer"].kernel.variant == "product_conv":
        seeds["dm"] = np.zeros_like(top["m"])
    reg_pf = _pf_penalty(top, X[L - 1], cfg, seeds, gaps, want_grad) \
        if cfg.lambda1 > 0 else 0.0
    reg_norm = _norm_penalty(top, cfg, seeds, gaps, want_grad) \
        if cfg.lambda2 > 0 else 0.0

    parts = {"loss": value, "reg_pf": reg_pf, "reg_norm": reg_norm,
             "total": value + reg_pf + reg_norm}
    for key, x in parts.items():
        if not math.isfinite(x):
            raise NonFinite(f"{key} is {x}")
    if not want_grad:
        return parts, None

    dX = [np.zeros_like(x) for x in X]
    dZ = None if anchor_mode else [np.zeros_like(z) for z in Z]
    if anchor_mode:
        dX[L] = dX[L] + dpred
    else:
        dZ[L] = dZ[L] + dpred
    dC = [np.zeros_like(layer.coeffs) for layer in layers]

    for j in reversed(range(L)):
        cache = caches[j]
        layer = cache["layer"]
        scalar = layer.kernel.scalar
        fac = cache["fac"]
        separable = layer.kernel.variant == "separable"
        dkxx = np.zeros((n, n))
        dkzx = None if anchor_mode else np.zeros_like(cache.get("kzx"))
        dm = np.zeros_like(cache["m"]) if not separable else None

        if j == L - 1:
            dC[j] += seeds["dc"]
            dkxx += seeds["dkxx"]
            dX[j] = dX[j] + seeds["dw"]
            if not separable:
                dm += seeds["dm"]

        def path(upstream, k, dk, in_stack, d_in, s_cached):
            # one evaluation path (anchor or batch) of this layer
            if separable:
                ac = cache["ac"]
                dac = np.einsum("bl,bij->lij", k, upstream)
                dC[j] += fac.T @ dac
                dk += np.einsum("bij,lij->bl", upstream, ac)
                return d_in
            d_in = d_in + upstream @ np.transpose(s_cached, (0, 2, 1))
            ds = np.einsum("bji,bjk->bik", in_stack, upstream)
            dm[...] += np.einsum("bl,bij->lij", k, ds)
            dk += np.einsum("bij,lij->bl", ds, cache["m"])
            return d_in

        dX[j] = path(dX[j + 1], cache["kxx"], dkxx, X[j], dX[j],
                     cache.get("sx"))
        if not anchor_mode:
            dZ[j] = path(dZ[j + 1], cache["kzx"], dkzx, Z[j], dZ[j],
                         cache.get("sz"))

        if not separable:
            # m_l = w_l^T c_l with w = X[j]
            dC[j] += X[j] @ dm
            dX[j] = dX[j] + layer.coeffs @ np.transpose(dm, (0, 2, 1))

        # kernel-argument adjoints, one sweep per cached pairwise matrix
        if separable:
            da, db = _pairwise_backward(scalar, X[j], X[j], cache["kxx"], dkxx)
            dX[j] = dX[j] + da + db
            if not anchor_mode:
                da, db = _pairwise_backward(scalar, Z[j], X[j],
                                            cache["kzx"], dkzx)
                dZ[j] = dZ[j] + da
                dX[j] = dX[j] + db
        else:
            da, db = _pairwise_backward(scalar, cache["px"], cache["px"],
                                        cache["kxx"], dkxx)
            dX[j] = dX[j] + (da + db) @ fac.T
            if not anchor_mode:
                da, db = _pairwise_backward(scalar, cache["pz"], cache["px"],
                                            cache["kzx"], dkzx)
                dZ[j] = dZ[j] + da @ fac.T
                dX[j] = dX[j] + db @ fac.T

    grads = []
    for j, layer in enumerate(layers):
        g = project_stack(dC[j], layer.coeff_desc)
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"gradient of layer {j} is not finite")
        grads.append(g)
    if head_grads is not None:
        for g in head_grads:
            if not np.all(np.isfinite(g)):
                raise NonFinite("head gradient is not finite")
    return parts, GradientSet(layers=grads, head=head_grads)


def project_stack(stack, desc):
    """Pattern projection of a gradient stack, exact in the pattern."""
    if desc.kind == "full":
        return stack
    if desc.kind == "block_diag":
        return np.where(desc.mask()[None, :, :], stack, 0.0)
    d = desc.d
    i = np.arange(d)
    diags = stack[:, i[:, None], (i[:, None] + i[None, :]) % d]
    rows = np.mean(diags, axis=1)
    return rows[:, (i[None, :] - i[:, None]) % d]


def evaluate_objective(model_obj, batch_inputs, batch_targets, cfg, head=None):
    """Objective parts dict without gradients."""
    parts, _ = _evaluate(model_obj, batch_inputs, batch_targets, cfg,
                         head=head, want_grad=False)
    return parts


def grad_params(model_obj, batch_inputs, batch_targets, cfg, head=None):
    """Reverse-mode gradient of the full objective, pattern-projected.

    batch_inputs None means the batch is the anchor set itself (the
    full-batch setting of all experiments); gradients then include the
    anchor-image propagation without a separate evaluation path.
    """
    _, grads = _evaluate(model_obj, batch_inputs, batch_targets, cfg, head=head)
    return grads


def grad_and_value(model_obj, batch_inputs, batch_targets, cfg, head=None):
    parts, grads = _evaluate(model_obj, batch_inputs, batch_targets, cfg,
                             head=head)
    return grads, parts


# --- finite differences ----------------------------------------------------

def _pattern_basis(desc):
    d = desc.d
    if desc.kind in ("full", "block_diag"):
        mask = desc.mask()
        for p in range(d):
            for q in range(d):
                if mask[p, q]:
                    e = np.zeros((d, d))
                    e[p, q] = 1.0
                    yield e
    else:
        for k in range(d):
            s = np.zeros((d, d))
            for i in range(d):
                s[i, (i + k) % d] = 1.0
            yield s


def _kink_signs(mdl, batch_inputs):
    """Sign patterns of every Laplacian difference tensor in the forward
    pass; a flip between two nearby points means a kink was crossed."""
    X, Z, caches = _forward(mdl, batch_inputs)
    sigs = []
    for j, cache in enumerate(caches):
        if cache["layer"].kernel.scalar.kind != "laplacian":
            continue
        if cache["layer"].kernel.variant == "separable":
            ax, az = X[j], (None if Z is None else Z[j])
        else:
            ax, az = cache["px"], (None if Z is None else cache["pz"])
        sigs.append(np.sign(ax[:, None] - ax[None, :]))
        if az is not None:
            sigs.append(np.sign(az[:, None] - ax[None, :]))
    return sigs


def _clone_model(mdl):
    layers = [model_mod.Layer(l.kernel, l.coeff_desc, l.coeffs.copy())
              for l in mdl.layers]
    return model_mod.DeepModel(layers, mdl.anchors)


@dataclass
class FdReport:
    max_rel_err: float
    checked: int
    skipped: int

    @property
    def total(self):
        return self.checked + self.skipped


def finite_diff_check(model_obj, batch, cfg, step, head=None):
    """Central-difference validation of grad_params.

    batch is (inputs, targets); inputs None evaluates on the anchors.
    Directions within 10*step of a Laplacian kink (detected as a sign flip
    of any difference entry between the two probe points) are skipped, as is
    everything when any eigenvalue gap used by an operator norm is below
    1e-10.  Returns worst relative error over the checked directions.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    batch_inputs, batch_targets = batch
    gaps = []
    parts, grads = _evaluate(model_obj, batch_inputs, batch_targets, cfg,
                             head=head, gaps_out=gaps)
    n_dirs = sum(layer.n * layer.coeff_desc.pattern_dim()
                 for layer in model_obj.layers)
    if gaps and min(gaps) < EIGENGAP_TOL:
        return FdReport(max_rel_err=0.0, checked=0, skipped=n_dirs)

    worst = 0.0
    checked = 0
    skipped = 0
    for j, layer in enumerate(model_obj.layers):
        for l in range(layer.n):
            for basis in _pattern_basis(layer.coeff_desc):
                probe = _clone_model(model_obj)
                base = probe.layers[j].coeffs
                sides = []
                flipped = False
                for sgn in (1.0, -1.0):
                    c = base.copy()
                    c[l] = c[l] + sgn * step * basis
                    model_mod.set_coeffs(probe, j, c)
                    p, _ = _evaluate(probe, batch_inputs, batch_targets, cfg,
                                     head=head, want_grad=False)
                    sides.append(p["total"])
                    sigs = _kink_signs(probe, batch_inputs)
                    if sgn > 0:
                        plus_sigs = sigs
                    else:
                        flipped = any(not np.array_equal(a, b)
                                      for a, b in zip(plus_sigs, sigs))
                if flipped:
                    skipped += 1
                    continue
                fd = (sides[0] - sides[1]) / (2.0 * step)
                an = float(np.sum(grads.layers[j][l] * basis))
                scale = max(abs(fd), abs(an))
                err = abs(fd - an) / scale if scale > 1e-12 else 0.0
                worst = max(worst, err)
                checked += 1
    return FdReport(max_rel_err=worst, checked=checked, skipped=skipped)


# --- optimizers -------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step_count: int = 0
    m: list = None
    v: list = None


def init_optimizer(kind, lr, params):
    """Optimizer over a list of parameter arrays (or a DeepModel)."""
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    if isinstance(params, model_mod.DeepModel):
        params = [layer.coeffs for layer in params.layers]
    state = OptimizerState(kind=kind, lr=float(lr))
    if kind == "adam":
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    return state


def update_arrays(state, params, grads):
    """One optimizer step over plain parameter arrays; returns new arrays."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params, {len(grads)} grads")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeMismatch(f"{np.shape(p)} vs {np.shape(g)}")
    state.step_count += 1
    out = []
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            out.append(p - state.lr * g)
        return out
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


def optimizer_step(state, model_obj, grads):
    """Apply one update to the model coefficients.

    The update of an in-pattern point by an in-pattern gradient stays in
    pattern; the projection applied afterwards is checked to be a no-op
    (exactly for masked patterns, to a rounding ulp for circulant whose
    projection averages d identical floats).
    """
    glist = grads.layers if isinstance(grads, GradientSet) else grads
    new = update_arrays(state, [l.coeffs for l in model_obj.layers], glist)
    for j, (layer, stack) in enumerate(zip(model_obj.layers, new)):
        proj = project_stack(stack, layer.coeff_desc)
        if layer.coeff_desc.kind == "circulant":
            tol = 4 * np.finfo(float).eps * max(1.0, float(np.abs(stack).max()))
            drift = float(np.max(np.abs(proj - stack)))
            if drift > tol:
                raise algebra.PatternViolation(
                    f"projection moved layer {j} update by {drift:.3e}")
        elif not np.array_equal(proj, stack):
            raise algebra.PatternViolation(
                f"projection changed layer {j} update")
        model_mod.set_coeffs(model_obj, j, proj)
    return state


# --- logging ----------------------------------------------------------------

LOG_HEADER = "epoch,loss,reg_pf,reg_norm,total,grad_norm,wall_ms"


def format_log_line(epoch, parts, grad_norm, wall_ms):
    vals = [parts["loss"], parts["reg_pf"], parts["reg_norm"],
            parts["total"], grad_norm, wall_ms]
    return f"{int(epoch)}," + ",".join(format(float(x), ".17g") for x in vals)
