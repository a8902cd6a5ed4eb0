"""Matrix-valued positive definite kernels and their Gram matrices.

A kernel maps a pair of d x d data matrices to an element of a matrix
algebra.  Two constructions are provided: separable kernels k~(x, y) a with
a fixed positive definite factor a, and product kernels k~(x a, y a) x y^T
where the factor reweights the arguments of the scalar kernel and the output
carries the product of the data matrices.

Gram matrices of separable kernels are kept factored (scalar Gram plus the
factor); everything else is stored dense with exactly mirrored blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import algebra
from .algebra import ShapeMismatch

SCALAR_KINDS = ("laplacian", "gaussian")
VARIANTS = ("separable", "product_conv")


class KernelError(Exception):
    pass


def as_stack(points):
    """Coerce a sequence of d x d matrices to an (n, d, d) float array."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise ShapeMismatch(f"expected (n, d, d) points, got {x.shape}")
    return x


@dataclass(frozen=True)
class ScalarKernel:
    """Scalar kernel on matrix arguments.

    laplacian: exp(-c * sum |x_ij - y_ij|)
    gaussian:  exp(-c * sum (x_ij - y_ij)^2)
    """

    kind: str
    c: float

    def __post_init__(self):
        if self.kind not in SCALAR_KINDS:
            raise KernelError(f"unknown scalar kernel {self.kind!r}")
        if not (float(self.c) > 0):
            raise KernelError("bandwidth c must be positive")
        object.__setattr__(self, "c", float(self.c))

    def eval(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape:
            raise ShapeMismatch(f"{x.shape} vs {y.shape}")
        diff = x - y
        if self.kind == "laplacian":
            dist = float(np.abs(diff).sum())
        else:
            dist = float((diff * diff).sum())
        return float(np.exp(-self.c * dist))

    def pairwise(self, X, Y, chunk=None):
        """(m, n) kernel matrix between two stacks, chunked over rows of X.

        Chunking keeps the (chunk, n, d, d) difference tensor bounded; rows
        are independent so results do not depend on the chunk size.
        """
        X = as_stack(X)
        Y = as_stack(Y)
        if X.shape[1:] != Y.shape[1:]:
            raise ShapeMismatch(f"{X.shape} vs {Y.shape}")
        m, n = X.shape[0], Y.shape[0]
        if chunk is None:
            chunk = _auto_chunk(n, X.shape[1] * X.shape[2])
        out = np.empty((m, n))
        for s in range(0, m, chunk):
            diff = X[s:s + chunk, None] - Y[None, :]
            if self.kind == "laplacian":
                dist = np.abs(diff).sum(axis=(2, 3))
            else:
                dist = (diff * diff).sum(axis=(2, 3))
            out[s:s + chunk] = np.exp(-self.c * dist)
        return out


def _auto_chunk(n, d2):
    # aim for ~32 MB difference tensors
    return max(1, int(4_000_000 // max(n * d2, 1)))


class MatrixKernel:
    """Algebra-valued kernel: separable or product_conv.

    separable outputs live in the factor's algebra; product_conv outputs are
    full d x d.  The separable factor must be symmetric positive definite
    (checked at construction, smallest eigenvalue above 1e-12 of the largest).
    """

    def __init__(self, variant, scalar, a):
        if variant not in VARIANTS:
            raise KernelError(f"unknown kernel variant {variant!r}")
        if not isinstance(scalar, ScalarKernel):
            raise KernelError("scalar must be a ScalarKernel")
        if not isinstance(a, algebra.AlgebraElement):
            raise KernelError("factor a must be an AlgebraElement")
        if variant == "separable":
            w, _ = algebra.spectral(a)  # raises NotSymmetric when it is not
            if w[-1] <= 1e-12 * max(float(w[0]), 0.0):
                raise KernelError(
                    f"separable factor not positive definite, spectrum "
                    f"[{w[-1]:.3e}, {w[0]:.3e}]")
        self.variant = variant
        self.scalar = scalar
        self.a = a

    @property
    def d(self):
        return self.a.d

    @property
    def out_desc(self):
        if self.variant == "separable":
            return self.a.desc
        return algebra.full(self.d)

    def __repr__(self):
        return (f"MatrixKernel({self.variant}, {self.scalar.kind}, "
                f"c={self.scalar.c}, d={self.d})")


def kernel_eval(kernel, x, y):
    """Evaluate the kernel at one pair of d x d matrices."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (kernel.d, kernel.d) or y.shape != (kernel.d, kernel.d):
        raise ShapeMismatch(f"expected ({kernel.d}, {kernel.d}) arguments")
    if kernel.variant == "separable":
        return algebra.scale(kernel.a, kernel.scalar.eval(x, y))
    fac = np.asarray(kernel.a.entries)
    kv = kernel.scalar.eval(x @ fac, y @ fac)
    return algebra.make_element(algebra.full(kernel.d), kv * (x @ y.T))


@dataclass
class GramMatrix:
    """Gram matrix of a matrix-valued kernel over n points.

    storage 'separable' keeps (scalar_gram, factor) with the dense matrix
    being their Kronecker product; storage 'dense' keeps the (n d, n d)
    array itself.
    """

    n: int
    d: int
    storage: str
    matrix: np.ndarray = None
    scalar_gram: np.ndarray = None
    factor: algebra.AlgebraElement = None

    def dense(self):
        if self.storage == "dense":
            return self.matrix
        return np.kron(self.scalar_gram, np.asarray(self.factor.entries))

    def block(self, i, l):
        if self.storage == "dense":
            d = self.d
            return self.matrix[i * d:(i + 1) * d, l * d:(l + 1) * d]
        return self.scalar_gram[i, l] * np.asarray(self.factor.entries)


def gram(kernel, points, force_dense=False):
    """Assemble the Gram matrix over a stack of points.

    Separable kernels stay factored unless force_dense is set.  Dense
    assembly computes blocks for i <= l and mirrors the transpose so the
    result is exactly symmetric.
    """
    X = as_stack(points)
    n, d = X.shape[0], X.shape[1]
    if d != kernel.d:
        raise ShapeMismatch(f"points are {d} x {d}, kernel wants {kernel.d}")
    if kernel.variant == "separable":
        ks = kernel.scalar.pairwise(X, X)
        if not force_dense:
            return GramMatrix(n=n, d=d, storage="separable",
                              scalar_gram=ks, factor=kernel.a)
        return GramMatrix(n=n, d=d, storage="dense",
                          matrix=np.kron(ks, np.asarray(kernel.a.entries)))
    fac = np.asarray(kernel.a.entries)
    ks = kernel.scalar.pairwise(X @ fac, X @ fac)
    g = np.zeros((n * d, n * d))
    for i in range(n):
        for l in range(i, n):
            blk = ks[i, l] * (X[i] @ X[l].T)
            g[i * d:(i + 1) * d, l * d:(l + 1) * d] = blk
            if l > i:
                g[l * d:(l + 1) * d, i * d:(i + 1) * d] = blk.T
    return GramMatrix(n=n, d=d, storage="dense", matrix=g)


def trace_sum(kernel, points):
    """sum_i trace k(x_i, x_i), the trace mass of the Gram diagonal."""
    X = as_stack(points)
    if kernel.variant == "separable":
        tr_a = algebra.trace(kernel.a)
        diag = np.array([kernel.scalar.eval(x, x) for x in X])
        return float(np.sum(diag) * tr_a)
    fac = np.asarray(kernel.a.entries)
    P = X @ fac
    diag = np.array([kernel.scalar.eval(p, p) for p in P])
    return float(np.sum(diag * np.einsum("nij,nij->n", X, X)))


# --- serialization --------------------------------------------------------

def scalar_to_json(s):
    return {"kind": s.kind, "c": s.c}


def scalar_from_json(obj):
    return ScalarKernel(obj["kind"], float(obj["c"]))


def kernel_to_json(k):
    return {"variant": k.variant,
            "scalar": scalar_to_json(k.scalar),
            "a": algebra.element_to_json(k.a)}


def kernel_from_json(obj):
    return MatrixKernel(obj["variant"],
                        scalar_from_json(obj["scalar"]),
                        algebra.element_from_json(obj["a"]))


def gram_to_json(g):
    out = {"n": g.n, "d": g.d, "storage": g.storage}
    if g.storage == "dense":
        out["matrix"] = np.asarray(g.matrix).tolist()
    else:
        out["scalar_gram"] = np.asarray(g.scalar_gram).tolist()
        out["factor"] = algebra.element_to_json(g.factor)
    return out


def gram_from_json(obj):
    n, d, storage = int(obj["n"]), int(obj["d"]), obj["storage"]
    if storage == "dense":
        m = np.asarray(obj["matrix"], dtype=float)
        if m.shape != (n * d, n * d):
            raise ShapeMismatch(f"matrix shape {m.shape}, expected {(n*d, n*d)}")
        return GramMatrix(n=n, d=d, storage="dense", matrix=m)
    if storage != "separable":
        raise KernelError(f"unknown gram storage {storage!r}")
    ks = np.asarray(obj["scalar_gram"], dtype=float)
    if ks.shape != (n, n):
        raise ShapeMismatch(f"scalar gram shape {ks.shape}, expected {(n, n)}")
    return GramMatrix(n=n, d=d, storage="separable", scalar_gram=ks,
                      factor=algebra.element_from_json(obj["factor"]))
