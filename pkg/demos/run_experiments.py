# Desk-scale tour of the three built-in experiments.  Epoch counts are cut
# far below the defaults so the script finishes in about a minute; the
# qualitative effects need the full defaults (see README).
#
# 1. autoencoder: operator-norm loss vs the flattened mean-square loss on
#    the same architecture; the summary records train/test losses and the
#    generalization gap for both arms.
# 2. benign: a near-singular last-layer Gram at the start; the lambda1 term
#    conditions it and the gap between the regularized and unregularized
#    arms shows up in final_gap.
# 3. mnist: two product-convolution kernel layers plus a dense head; with
#    no IDX files configured this falls back to a bundled-digits corpus
#    upscaled to 28 x 28 (summary field data_source says which was used).

import tempfile
from pathlib import Path

from deep_rkhm import harness

out = Path(tempfile.mkdtemp(prefix="rkhm_demo_"))
print(f"metrics files land in {out}\n")

for which, small in (("autoencoder", dict(epochs=2000, eval_every=500)),
                     ("benign", dict(epochs=200, eval_every=50)),
                     ("mnist", dict(epochs=40, eval_every=10))):
    cfg = harness.ExperimentConfig(which=which, seed=0,
                                   output_dir=str(out / which), **small)
    print(f"== {which} (epochs={cfg.epochs}) ==")
    results = harness.run_experiment(cfg)
    for arm, log in results.items():
        keep = ("final_train_loss", "final_test_loss", "final_gap",
                "final_train_accuracy", "final_test_accuracy",
                "epochs_run", "stopped_early", "data_source")
        brief = {k: v for k, v in log.summary.items() if k in keep}
        print(f"  {arm}: {brief}")
    print()

print("full-scale equivalents (same outputs, default epochs):")
print("  rkhm experiment autoencoder --seeds 0,1,2,3,4 --out runs/auto")
print("  rkhm experiment benign --seeds 0,1,2 --out runs/benign")
print("  rkhm experiment mnist --seed 0 --out runs/mnist")
