"""Deep models built from kernel layers with structured coefficients.

A layer carries a matrix-valued kernel, n anchor points inherited from the
model, and one coefficient matrix per anchor constrained to a subalgebra
pattern.  Layer j maps x to sum_l k_j(x, w_l) c_l where the w_l are the
images of the model anchors under the previous layers, so updating any
coefficient moves every later layer's anchors too.  The model caches the
anchor image stacks and invalidates them whenever coefficients change.
"""

from __future__ import annotations

import json

import numpy as np

from . import algebra, kernels
from .algebra import DescriptorMismatch, PatternViolation, ShapeMismatch

CHECKPOINT_FORMAT = "rkhm-checkpoint"


class CheckpointError(Exception):
    pass


def check_stack_pattern(stack, desc):
    """Exact pattern check for a stack of coefficient matrices."""
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[1:] != (desc.d, desc.d):
        raise ShapeMismatch(f"expected (n, {desc.d}, {desc.d}), got {stack.shape}")
    if desc.kind == "block_diag":
        if np.any(stack[:, ~desc.mask()] != 0.0):
            raise PatternViolation("nonzero entry outside diagonal blocks")
    elif desc.kind == "circulant":
        idx = np.arange(desc.d)
        rebuilt = stack[:, 0, :][:, (idx[None, :] - idx[:, None]) % desc.d]
        if not np.array_equal(stack, rebuilt):
            raise PatternViolation("wrapped diagonals are not constant")


class Layer:
    """One kernel layer: matrix kernel plus per-anchor coefficients."""

    def __init__(self, kernel, coeff_desc, coeffs):
        if not isinstance(kernel, kernels.MatrixKernel):
            raise TypeError("kernel must be a MatrixKernel")
        if coeff_desc.d != kernel.d:
            raise DescriptorMismatch(
                f"coefficients are {coeff_desc.d} x {coeff_desc.d}, "
                f"kernel wants {kernel.d}")
        coeffs = np.array(coeffs, dtype=float)
        check_stack_pattern(coeffs, coeff_desc)
        self.kernel = kernel
        self.coeff_desc = coeff_desc
        self.coeffs = coeffs

    @property
    def n(self):
        return self.coeffs.shape[0]

    @property
    def d(self):
        return self.kernel.d


def _apply(layer, anchor_stack, x_stack, scalar_gram=None):
    """Evaluate the layer on a stack given the anchor input stack.

    scalar_gram, when given, must be the precomputed scalar kernel matrix
    between x_stack and the (transformed) anchors.
    """
    k = layer.kernel
    if k.variant == "separable":
        if scalar_gram is None:
            scalar_gram = k.scalar.pairwise(x_stack, anchor_stack)
        ac = np.asarray(k.a.entries) @ layer.coeffs
        return np.einsum("mn,nij->mij", scalar_gram, ac)
    fac = np.asarray(k.a.entries)
    if scalar_gram is None:
        scalar_gram = k.scalar.pairwise(x_stack @ fac, anchor_stack @ fac)
    m = np.einsum("nji,njk->nik", anchor_stack, layer.coeffs)  # w_l^T c_l
    s = np.einsum("mn,nik->mik", scalar_gram, m)
    return x_stack @ s


def layer_forward(layer, anchor_inputs, x):
    """Apply one layer to a single matrix or a stack of matrices."""
    anchor_stack = kernels.as_stack(anchor_inputs)
    if anchor_stack.shape[0] != layer.n:
        raise ShapeMismatch(
            f"{anchor_stack.shape[0]} anchor inputs for {layer.n} coefficients")
    single = np.asarray(x).ndim == 2
    out = _apply(layer, anchor_stack, kernels.as_stack(x))
    return out[0] if single else out


class DeepModel:
    """Composition of kernel layers sharing one anchor set."""

    def __init__(self, layers, anchors):
        anchors = kernels.as_stack(anchors)
        if not layers:
            raise ShapeMismatch("need at least one layer")
        n, d = anchors.shape[0], anchors.shape[1]
        for j, layer in enumerate(layers):
            if layer.d != d:
                raise DescriptorMismatch(f"layer {j} is {layer.d} x {layer.d}, "
                                         f"anchors are {d} x {d}")
            if layer.n != n:
                raise ShapeMismatch(f"layer {j} has {layer.n} coefficients "
                                    f"for {n} anchors")
        self.layers = list(layers)
        self.anchors = anchors
        self._version = 0
        self._cached = None  # (version, [X^0 .. X^L])

    @property
    def n(self):
        return self.anchors.shape[0]

    @property
    def d(self):
        return self.anchors.shape[1]

    @property
    def depth(self):
        return len(self.layers)

    def bump(self):
        """Invalidate cached anchor images after a coefficient change."""
        self._version += 1


def set_coeffs(model, j, stack):
    stack = np.array(stack, dtype=float)
    layer = model.layers[j]
    if stack.shape != layer.coeffs.shape:
        raise ShapeMismatch(f"{stack.shape} vs {layer.coeffs.shape}")
    check_stack_pattern(stack, layer.coeff_desc)
    layer.coeffs = stack
    model.bump()


def anchor_images(model):
    """Stacks [X^0, ..., X^L] of anchor images through the layers, cached."""
    if model._cached is not None and model._cached[0] == model._version:
        return model._cached[1]
    images = [model.anchors]
    for layer in model.layers:
        images.append(_apply(layer, images[-1], images[-1]))
    model._cached = (model._version, images)
    return images


def model_forward(model, x):
    """Evaluate the full composition on a matrix or stack."""
    single = np.asarray(x).ndim == 2
    z = kernels.as_stack(x)
    images = anchor_images(model)
    for j, layer in enumerate(model.layers):
        z = _apply(layer, images[j], z)
    return z[0] if single else z


def gram_quadratic(layer, anchor_inputs, coeffs=None):
    """Q = sum_il c_i^T k(w_i, w_l) c_l, the squared-norm matrix of the layer."""
    w = kernels.as_stack(anchor_inputs)
    c = layer.coeffs if coeffs is None else np.asarray(coeffs)
    k = layer.kernel
    if k.variant == "separable":
        ks = k.scalar.pairwise(w, w)
        ac = np.asarray(k.a.entries) @ c
        t = np.einsum("il,lab->iab", ks, ac)
        return np.einsum("iab,iac->bc", c, t)
    fac = np.asarray(k.a.entries)
    ks = k.scalar.pairwise(w @ fac, w @ fac)
    m = np.einsum("nji,njk->nik", w, c)  # w_l^T c_l
    t = np.einsum("il,lab->iab", ks, m)
    return np.einsum("iab,iac->bc", m, t)


def rkhm_norm(layer, anchor_inputs):
    """Norm of the layer in its kernel module: sqrt of op norm of Q."""
    q = gram_quadratic(layer, anchor_inputs)
    w, _ = algebra.sorted_eigh((q + q.T) / 2)
    return float(np.sqrt(max(w[0], 0.0)))


def model_rkhm_norm(model, j):
    return rkhm_norm(model.layers[j], anchor_images(model)[j])


# --- checkpoints ----------------------------------------------------------

def checkpoint_to_json(model):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "anchors": model.anchors.tolist(),
        "layers": [
            {"kernel": kernels.kernel_to_json(layer.kernel),
             "coeff_desc": algebra.desc_to_json(layer.coeff_desc),
             "coeffs": layer.coeffs.tolist()}
            for layer in model.layers
        ],
    }


def save_checkpoint(model, path):
    with open(path, "w") as fh:
        fh.write(algebra.dump_json(checkpoint_to_json(model)))
        fh.write("\n")


def checkpoint_from_json(obj):
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a checkpoint: format={obj.get('format')!r}")
    try:
        layers = [Layer(kernels.kernel_from_json(spec["kernel"]),
                        algebra.desc_from_json(spec["coeff_desc"]),
                        spec["coeffs"])
                  for spec in obj["layers"]]
        anchors = np.asarray(obj["anchors"], dtype=float)
    except KeyError as exc:
        raise CheckpointError(f"missing checkpoint key {exc}") from exc
    return DeepModel(layers, anchors)


def load_checkpoint(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"invalid checkpoint JSON: {exc}") from exc
    return checkpoint_from_json(obj)
