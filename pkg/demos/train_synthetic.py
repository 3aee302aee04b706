"""
Training on a jittered spike-template task
==========================================

A dense surrogate-gradient run and a LocalZO run share seed, data order
and initial weights.  The LocalZO backward pass only touches the neurons
whose potential fell within the sampled band, so its multiply-accumulate
count is a small fraction of the dense one.
"""

import sys
import tempfile

from localzo import harness

# %%
# Two epochs keep the demo short; pass a number to train longer.
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 2

base = {"dims": [100, 200, 200, 10], "epochs": epochs, "seed": 0}
sur_cfg = harness.ExperimentConfig.from_dict(
    {**base, "mode": {"kind": "surrogate", "surrogate_kind": "expected_normal", "delta": 0.05}})
lzo_cfg = harness.ExperimentConfig.from_dict(
    {**base, "mode": {"kind": "localzo", "distribution": "normal", "delta": 0.05}})

with tempfile.TemporaryDirectory() as tmp:
    print("surrogate")
    sur = harness.run_training(sur_cfg, f"{tmp}/sur", log=print)
    lzo_cfg.baseline = f"{tmp}/sur"
    print("localzo")
    lzo = harness.run_training(lzo_cfg, f"{tmp}/lzo", log=print)

# %%
print(f"test accuracy: surrogate {sur['test_acc']:.3f}, localzo {lzo['test_acc']:.3f}")
print("localzo active % per hidden layer: " + ", ".join(f"{a:.2f}" for a in lzo["mean_active_pct"]))
print(f"backward MAC ratio {lzo['mac_ratio_backward']:.4f}, wall-clock backward speedup {lzo['backward_speedup']:.2f}")
