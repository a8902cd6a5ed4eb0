"""Structured real matrix *-algebras.

Three families of d x d real matrices are supported: full matrices,
block-diagonal matrices with a fixed block-size signature, and circulant
matrices.  Elements keep a compressed representation (the blocks, or the
first row) so products, adjoints and sums stay exactly inside the pattern
instead of drifting through float noise in off-pattern entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

KINDS = ("full", "block_diag", "circulant")


class AlgebraError(Exception):
    """Base class for algebra failures."""


class ShapeMismatch(AlgebraError):
    pass


class PatternViolation(AlgebraError):
    pass


class DescriptorMismatch(AlgebraError):
    pass


class NotSymmetric(AlgebraError):
    pass


class SingularElement(AlgebraError):
    pass


@dataclass(frozen=True)
class AlgebraDescriptor:
    """Names one subalgebra of the d x d real matrices."""

    kind: str
    d: int
    sizes: tuple = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DescriptorMismatch(f"unknown algebra kind {self.kind!r}")
        if int(self.d) <= 0:
            raise ShapeMismatch("d must be positive")
        object.__setattr__(self, "d", int(self.d))
        if self.kind == "block_diag":
            if not self.sizes:
                raise ShapeMismatch("block_diag needs a block-size signature")
            sizes = tuple(int(s) for s in self.sizes)
            if any(s <= 0 for s in sizes):
                raise ShapeMismatch("block sizes must be positive")
            if sum(sizes) != self.d:
                raise ShapeMismatch(
                    f"block sizes sum to {sum(sizes)}, expected d={self.d}")
            object.__setattr__(self, "sizes", sizes)
        elif self.sizes is not None:
            raise DescriptorMismatch(f"{self.kind} takes no block sizes")

    def block_slices(self):
        out, start = [], 0
        for s in self.sizes:
            out.append(slice(start, start + s))
            start += s
        return out

    def mask(self):
        """Boolean d x d sparsity mask (all True for full and circulant)."""
        if self.kind == "block_diag":
            m = np.zeros((self.d, self.d), dtype=bool)
            for sl in self.block_slices():
                m[sl, sl] = True
            return m
        return np.ones((self.d, self.d), dtype=bool)

    def pattern_dim(self):
        """Real dimension of the subalgebra as a vector space."""
        if self.kind == "full":
            return self.d * self.d
        if self.kind == "block_diag":
            return sum(s * s for s in self.sizes)
        return self.d


def full(d):
    return AlgebraDescriptor("full", d)


def block_diag(sizes):
    return AlgebraDescriptor("block_diag", sum(sizes), tuple(sizes))


def circulant(d):
    return AlgebraDescriptor("circulant", d)


def diagonal(d):
    return block_diag([1] * d)


def _circ_index(d):
    # entry (i, j) of a circulant holds first_row[(j - i) mod d]
    i = np.arange(d)
    return (i[None, :] - i[:, None]) % d


class AlgebraElement:
    """Immutable element of a structured matrix algebra.

    The dense d x d matrix is materialized lazily through ``entries``;
    arithmetic happens on the compressed representation.
    """

    __slots__ = ("desc", "_rep", "_dense")

    def __init__(self, desc, rep):
        self.desc = desc
        self._rep = rep
        self._dense = None

    @property
    def d(self):
        return self.desc.d

    @property
    def entries(self):
        if self._dense is None:
            k = self.desc.kind
            if k == "full":
                dense = self._rep
            elif k == "block_diag":
                dense = np.zeros((self.d, self.d))
                for sl, bl in zip(self.desc.block_slices(), self._rep):
                    dense[sl, sl] = bl
            else:
                dense = self._rep[_circ_index(self.d)]
            dense.flags.writeable = False
            self._dense = dense
        return self._dense

    @property
    def first_row(self):
        if self.desc.kind != "circulant":
            raise DescriptorMismatch("first_row is a circulant accessor")
        return self._rep

    @property
    def blocks(self):
        if self.desc.kind != "block_diag":
            raise DescriptorMismatch("blocks is a block_diag accessor")
        return self._rep

    def __repr__(self):
        return f"AlgebraElement({self.desc.kind}, d={self.d})"


def _same_desc(a, b):
    if a.desc != b.desc:
        raise DescriptorMismatch(f"{a.desc} vs {b.desc}")


def make_element(desc, entries):
    """Build an element from a dense matrix, checking the pattern exactly.

    Off-block entries must be exactly zero and circulant wrapped diagonals
    exactly constant; anything else raises PatternViolation.
    """
    m = np.asarray(entries, dtype=float)
    if m.shape != (desc.d, desc.d):
        raise ShapeMismatch(f"expected ({desc.d}, {desc.d}), got {m.shape}")
    if desc.kind == "full":
        rep = m.copy()
        rep.flags.writeable = False
        return AlgebraElement(desc, rep)
    if desc.kind == "block_diag":
        if np.any(m[~desc.mask()] != 0.0):
            raise PatternViolation("nonzero entry outside diagonal blocks")
        rep = tuple(m[sl, sl].copy() for sl in desc.block_slices())
        for bl in rep:
            bl.flags.writeable = False
        return AlgebraElement(desc, rep)
    row = m[0].copy()
    if not np.array_equal(m, row[_circ_index(desc.d)]):
        raise PatternViolation("wrapped diagonals are not constant")
    row.flags.writeable = False
    return AlgebraElement(desc, row)


def from_first_row(row, desc=None):
    row = np.asarray(row, dtype=float)
    if desc is None:
        desc = circulant(row.shape[0])
    if desc.kind != "circulant" or row.shape != (desc.d,):
        raise ShapeMismatch("first row must have length d of a circulant")
    rep = row.copy()
    rep.flags.writeable = False
    return AlgebraElement(desc, rep)


def from_blocks(blocks):
    blocks = [np.asarray(b, dtype=float) for b in blocks]
    for b in blocks:
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ShapeMismatch("blocks must be square")
    desc = block_diag([b.shape[0] for b in blocks])
    rep = tuple(b.copy() for b in blocks)
    for b in rep:
        b.flags.writeable = False
    return AlgebraElement(desc, rep)


def identity(desc):
    if desc.kind == "full":
        return AlgebraElement(desc, np.eye(desc.d))
    if desc.kind == "block_diag":
        return AlgebraElement(desc, tuple(np.eye(s) for s in desc.sizes))
    row = np.zeros(desc.d)
    row[0] = 1.0
    return AlgebraElement(desc, row)


def mul(a, b):
    """Algebra product; both operands must share a descriptor."""
    _same_desc(a, b)
    k = a.desc.kind
    if k == "full":
        return AlgebraElement(a.desc, a._rep @ b._rep)
    if k == "block_diag":
        return AlgebraElement(a.desc, tuple(x @ y for x, y in zip(a._rep, b._rep)))
    # product of circulants is the circular convolution of first rows
    row = a._rep @ b._rep[_circ_index(a.d)]
    return AlgebraElement(a.desc, row)


def adjoint(a):
    k = a.desc.kind
    if k == "full":
        return AlgebraElement(a.desc, a._rep.T.copy())
    if k == "block_diag":
        return AlgebraElement(a.desc, tuple(bl.T.copy() for bl in a._rep))
    return AlgebraElement(a.desc, np.roll(a._rep[::-1], 1))


def add(a, b):
    _same_desc(a, b)
    if a.desc.kind == "block_diag":
        return AlgebraElement(a.desc, tuple(x + y for x, y in zip(a._rep, b._rep)))
    return AlgebraElement(a.desc, a._rep + b._rep)


def sub(a, b):
    _same_desc(a, b)
    if a.desc.kind == "block_diag":
        return AlgebraElement(a.desc, tuple(x - y for x, y in zip(a._rep, b._rep)))
    return AlgebraElement(a.desc, a._rep - b._rep)


def scale(a, t):
    t = float(t)
    if a.desc.kind == "block_diag":
        return AlgebraElement(a.desc, tuple(t * bl for bl in a._rep))
    return AlgebraElement(a.desc, t * a._rep)


def trace(a):
    k = a.desc.kind
    if k == "full":
        return float(np.trace(a._rep))
    if k == "block_diag":
        return float(sum(np.trace(bl) for bl in a._rep))
    return float(a.d * a._rep[0])


def hs_norm(a):
    k = a.desc.kind
    if k == "full":
        return float(np.linalg.norm(a._rep))
    if k == "block_diag":
        return math.sqrt(sum(float(np.sum(bl * bl)) for bl in a._rep))
    return math.sqrt(a.d * float(np.sum(a._rep * a._rep)))


def _dense_op_norm(m):
    w, _ = jacobi_eigh(m.T @ m)
    return math.sqrt(max(float(w[0]), 0.0))


def op_norm(a):
    """Largest singular value, via the eigenvalues of a* a."""
    if a.desc.kind == "block_diag":
        return max(_dense_op_norm(bl) for bl in a._rep)
    return _dense_op_norm(np.asarray(a.entries))


def _check_symmetric(m, tol=1e-12):
    gap = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    scale_ = 1.0 + (float(np.max(np.abs(m))) if m.size else 0.0)
    if gap > tol * scale_:
        raise NotSymmetric(f"asymmetry {gap:.3e} exceeds tolerance")


def spectral(a):
    """Eigenvalues (descending) and sign-fixed eigenvectors of a symmetric element."""
    m = np.asarray(a.entries)
    _check_symmetric(m)
    return jacobi_eigh((m + m.T) / 2)


def is_psd(a, tol=1e-10):
    m = np.asarray(a.entries)
    _check_symmetric(m)
    w, _ = jacobi_eigh((m + m.T) / 2)
    return bool(w[-1] >= -tol)


def psd_calculus(a, mode):
    """Spectral calculus on an element: 'abs', 'sqrt', 'inv' or 'inv_sqrt'.

    'abs' works on any element through (a* a)^(1/2).  The other modes need a
    symmetric argument; 'inv' and 'inv_sqrt' additionally need the smallest
    eigenvalue to exceed 1e-12 times the largest, else SingularElement.
    """
    if mode == "abs":
        m = np.asarray(a.entries)
        w, v = jacobi_eigh(m.T @ m)
        f = np.sqrt(np.clip(w, 0.0, None))
    else:
        m = np.asarray(a.entries)
        _check_symmetric(m)
        w, v = jacobi_eigh((m + m.T) / 2)
        if mode == "sqrt":
            if w[-1] < -1e-10 * max(1.0, float(w[0])):
                raise SingularElement(f"negative eigenvalue {w[-1]:.3e}")
            f = np.sqrt(np.clip(w, 0.0, None))
        elif mode in ("inv", "inv_sqrt"):
            if w[-1] <= 1e-12 * max(float(w[0]), 0.0):
                raise SingularElement(
                    f"eigenvalue range [{w[-1]:.3e}, {w[0]:.3e}] is singular")
            f = 1.0 / w if mode == "inv" else 1.0 / np.sqrt(w)
        else:
            raise ValueError(f"unknown calculus mode {mode!r}")
    return project_onto((v * f) @ v.T, a.desc)


def project_onto(matrix, desc):
    """Orthogonal (Hilbert-Schmidt) projection of a dense matrix onto the algebra.

    Full is the identity, block_diag zeroes the off-block entries, circulant
    averages each wrapped diagonal.
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape != (desc.d, desc.d):
        raise ShapeMismatch(f"expected ({desc.d}, {desc.d}), got {m.shape}")
    if desc.kind == "full":
        return make_element(desc, m)
    if desc.kind == "block_diag":
        return make_element(desc, np.where(desc.mask(), m, 0.0))
    i = np.arange(desc.d)
    diags = m[i[:, None], (i[:, None] + i[None, :]) % desc.d]
    return from_first_row(np.mean(diags, axis=0), desc)


def random_element(desc, rng, scale=1.0):
    """In-pattern element with independent N(0, scale^2) free entries."""
    if desc.kind == "full":
        return make_element(desc, scale * rng.standard_normal((desc.d, desc.d)))
    if desc.kind == "block_diag":
        return from_blocks([scale * rng.standard_normal((s, s)) for s in desc.sizes])
    return from_first_row(scale * rng.standard_normal(desc.d), desc)


# --- eigensolvers ---------------------------------------------------------

def jacobi_eigh(a, tol=1e-13, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps plane rotations over the upper triangle until the off-diagonal
    Frobenius mass falls below tol relative to the total.  Returns
    (eigenvalues descending, eigenvectors as columns) with each eigenvector
    flipped so its first component above 1e-12 in magnitude is positive.
    """
    a = np.array(a, dtype=float)
    d = a.shape[0]
    if a.shape != (d, d):
        raise ShapeMismatch("jacobi_eigh needs a square matrix")
    v = np.eye(d)
    total = math.sqrt(float(np.sum(a * a)))
    for _ in range(max_sweeps):
        off = a - np.diag(np.diag(a))
        if math.sqrt(float(np.sum(off * off))) <= tol * max(total, 1e-300):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = 0.5 * math.atan2(2.0 * apq, a[q, q] - a[p, p])
                c, s = math.cos(theta), math.sin(theta)
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    _fix_signs(v)
    return w, v


def sorted_eigh(m):
    """LAPACK eigendecomposition wrapped to the jacobi_eigh conventions.

    Same ordering (descending) and eigenvector sign fixing; used where the
    matrix is too large for the element-level Jacobi path.
    """
    w, v = np.linalg.eigh(m)
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    _fix_signs(v)
    return w, v


def _fix_signs(v):
    # flip each column so its first component of magnitude > 1e-12 is positive
    mask = np.abs(v) > 1e-12
    first = np.argmax(mask, axis=0)
    lead = v[first, np.arange(v.shape[1])]
    v *= np.where(lead < 0, -1.0, 1.0)


# --- serialization --------------------------------------------------------

def dump_json(obj):
    """JSON text with every float printed at 17 significant digits.

    17 digits round-trip float64 exactly, so files written here reload
    bit-identically.  Non-finite values are rejected.
    """
    if isinstance(obj, dict):
        body = ", ".join(f"{json.dumps(str(k))}: {dump_json(v)}" for k, v in obj.items())
        return "{" + body + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dump_json(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return dump_json(obj.tolist())
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(bool(obj) if isinstance(obj, np.bool_) else obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("cannot serialize non-finite float")
        return format(x, ".17g")
    raise TypeError(f"cannot serialize {type(obj)!r}")


def desc_to_json(desc):
    return {"kind": desc.kind, "d": desc.d,
            "sizes": list(desc.sizes) if desc.sizes else None}


def desc_from_json(obj):
    sizes = obj.get("sizes")
    return AlgebraDescriptor(obj["kind"], int(obj["d"]),
                             tuple(sizes) if sizes else None)


def element_to_json(a):
    """Dict form: descriptor plus dense entries as row-major nested lists."""
    return {"desc": desc_to_json(a.desc),
            "entries": np.asarray(a.entries).tolist()}


def element_from_json(obj):
    desc = desc_from_json(obj["desc"])
    return make_element(desc, obj["entries"])
