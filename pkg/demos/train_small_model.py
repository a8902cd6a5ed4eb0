# Train a small two-layer model end to end: forward on anchors, operator-
# norm loss with both regularizers, SGD steps, gradient validation against
# finite differences, checkpointing, and the plug-in excess-risk bound.

import numpy as np

from deep_rkhm import algebra, bounds, kernels, training
from deep_rkhm import model as model_mod

rng = np.random.default_rng(3)
d, n = 4, 6
anchors = rng.normal(size=(n, d, d))
targets = np.tanh(anchors) * 0.8

descs = [algebra.full(d), algebra.block_diag([2, 2])]
layers = []
for desc, c in zip(descs, (0.6, 0.9)):
    kern = kernels.MatrixKernel(
        "separable", kernels.ScalarKernel("laplacian", c),
        algebra.identity(algebra.full(d)))
    coeffs = training.project_stack(rng.normal(0.0, 0.3, size=(n, d, d)),
                                    desc)
    layers.append(model_mod.Layer(kern, desc, coeffs))
mdl = model_mod.DeepModel(layers, anchors)

loss_cfg = training.LossConfig(kind="opnorm", lambda1=0.1, eta=0.01,
                               lambda2=0.05)

print("== gradient sanity check ==")
report = training.finite_diff_check(mdl, (None, targets), loss_cfg,
                                    step=1e-5)
print(f"worst relative error {report.max_rel_err:.2e} over "
      f"{report.checked} directions ({report.skipped} skipped)")

print()
print("== training loop ==")
print(training.LOG_HEADER)
state = training.init_optimizer("sgd", 0.05, mdl)
for epoch in range(201):
    grads, parts = training.grad_and_value(mdl, None, targets, loss_cfg)
    if epoch % 40 == 0:
        print(training.format_log_line(epoch, parts, grads.norm(), 0.0))
    training.optimizer_step(state, mdl, grads)

print()
print("== checkpoint round-trip ==")
model_mod.save_checkpoint(mdl, "/tmp/small_model.json")
back = model_mod.load_checkpoint("/tmp/small_model.json")
probe = rng.normal(size=(d, d))
same = np.allclose(model_mod.model_forward(mdl, probe),
                   model_mod.model_forward(back, probe), atol=0, rtol=0)
print("restored model reproduces predictions exactly:", same)

print()
print("== plug-in bound from the trained model ==")
inp = bounds.estimate_bound_inputs(mdl, targets, delta=0.05)
print("inputs:", inp.to_json())
print("bound:", bounds.deep_bound(inp).dumps())
