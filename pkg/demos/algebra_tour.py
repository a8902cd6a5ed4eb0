# Tour of the structured matrix algebras: full, block-diagonal, circulant.
# Elements carry a descriptor that pins their sparsity pattern; arithmetic
# stays inside the pattern and the operator norm satisfies the usual
# norm identity ||a* a|| = ||a||^2.

import numpy as np

from deep_rkhm import algebra

rng = np.random.default_rng(0)

print("== three descriptor families ==")
for desc in (algebra.full(4), algebra.block_diag([2, 2]),
             algebra.circulant(4)):
    a = algebra.random_element(desc, rng)
    print(f"{desc.kind:>10}: pattern dim {desc.pattern_dim()}, "
          f"||a|| = {algebra.op_norm(a):.4f}")
    print(np.asarray(a.entries).round(3))

print()
print("== norm identity ==")
a = algebra.random_element(algebra.block_diag([1, 3]), rng)
lhs = algebra.op_norm(algebra.mul(algebra.adjoint(a), a))
rhs = algebra.op_norm(a) ** 2
print(f"||a*a|| = {lhs:.12f}")
print(f"||a||^2 = {rhs:.12f}")

print()
print("== circulant product is circular convolution ==")
row_a = rng.normal(size=5)
row_b = rng.normal(size=5)
prod = algebra.mul(algebra.from_first_row(row_a),
                   algebra.from_first_row(row_b))
conv = np.real(np.fft.ifft(np.fft.fft(row_a) * np.fft.fft(row_b)))
print("first row of the product:", np.asarray(prod.entries)[0].round(6))
print("fft circular convolution:", conv.round(6))

print()
print("== spectral calculus ==")
sym = algebra.make_element(algebra.full(3), np.eye(3) * [4.0, 1.0, 0.25])
root = algebra.psd_calculus(sym, "sqrt")
print("sqrt of diag(4, 1, 1/4):", np.diag(np.asarray(root.entries)))

print()
print("== JSON round-trip ==")
blob = algebra.element_to_json(a)
back = algebra.element_from_json(blob)
print("round-trip exact:",
      np.array_equal(np.asarray(a.entries), np.asarray(back.entries)))
