"""
Fine-tuning across participants
===============================

Train on a weakly separable participant, fine-tune on a strongly separable
one, and the other way round. Then save and reload a model file.
"""

# %%
import tempfile
from pathlib import Path

from ecogscreen.nn import TrainConfig, build_cnn, evaluate, fine_tune, load_model, save_model, train
from ecogscreen.pipeline import dl_condition_split
from ecogscreen.synth import SynthConfig, generate_cohort

(lo_real, lo_imag), (hi_real, hi_imag) = generate_cohort(SynthConfig(deltas=(0.2, 0.9), seed=0))
lo = dl_condition_split(lo_real, lo_imag, seed=0)
hi = dl_condition_split(hi_real, hi_imag, seed=0)
shape = lo.train.data.shape[1:] + (1,)
print("input shape", shape, "| train/test epochs", len(lo.train.labels), len(lo.test.labels))

# %%
base = {}
for name, split in (("low", lo), ("high", hi)):
    base[name] = build_cnn(shape, 2, seed=0)
    train(base[name], split, TrainConfig(seed=0))
    print(f"{name}-separability base: own test accuracy {evaluate(base[name], split.test)[1]:.3f}")

# %%
# Fine-tuning keeps the weights and records where they came from.
up = fine_tune(base["low"], hi, TrainConfig(seed=0))
down = fine_tune(base["high"], lo, TrainConfig(seed=0))
print(f"low -> high: {evaluate(up, hi.test)[1]:.3f}")
print(f"high -> low: {evaluate(down, lo.test)[1]:.3f}")
print("provenance:", up.provenance)

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = save_model(up, Path(tmp) / "low_to_high.ecnn")
    back = load_model(path)
    print(path.name, path.stat().st_size, "bytes; same parameters:", back.param_hash() == up.param_hash())
