# Matrix-valued kernels and their Gram matrices.
# Separable kernels (scalar kernel times a fixed algebra element) keep the
# Gram in factored form: an n x n scalar Gram and a d x d factor whose
# Kronecker product is the dense (n d) x (n d) matrix.  The product-
# convolution variant k(x, y) = k~(x a, y a) x y^T is dense-only.

import numpy as np

from deep_rkhm import algebra, kernels

rng = np.random.default_rng(1)
d, n = 4, 6
points = rng.normal(size=(n, d, d))

print("== scalar kernels ==")
# bandwidths scale with the summed entry distances, about 18 for these
# points, so c = 0.05 keeps the values well inside (0, 1)
lap = kernels.ScalarKernel("laplacian", 0.05)
gau = kernels.ScalarKernel("gaussian", 0.05)
x, y = points[0], points[1]
print(f"laplacian(x, y) = {lap.eval(x, y):.6f}")
print(f"gaussian(x, y)  = {gau.eval(x, y):.6f}")

print()
print("== factored vs dense Gram ==")
sep = kernels.MatrixKernel("separable", lap,
                           algebra.identity(algebra.full(d)))
fast = kernels.gram(sep, points)
dense = kernels.gram(sep, points, force_dense=True)
print(f"factored storage: {fast.storage}, scalar gram {fast.scalar_gram.shape}")
print(f"dense storage:    {dense.storage}, matrix {dense.matrix.shape}")
print("max |factored - dense| =",
      float(np.max(np.abs(fast.dense() - dense.dense()))))

print()
print("== positivity ==")
w = np.linalg.eigvalsh(fast.dense())
print(f"Gram spectrum in [{w[0]:.3e}, {w[-1]:.3e}]  (all nonnegative)")

print()
print("== product-convolution kernel ==")
factor = algebra.make_element(algebra.block_diag([2, 2]),
                              algebra.block_diag([2, 2]).mask().astype(float))
conv = kernels.MatrixKernel("product_conv", lap, factor)
g = kernels.gram(conv, points)
print(f"storage {g.storage}; block (0,1) =")
print(g.block(0, 1).round(4))
print("trace mass sum_i tr k(x_i, x_i) =", round(kernels.trace_sum(conv, points), 4))

print()
print("== serialization ==")
blob = kernels.gram_to_json(fast)
back = kernels.gram_from_json(blob)
print("round-trip max diff =",
      float(np.max(np.abs(back.dense() - fast.dense()))))
