"""
UMAP + KNN as a screen for deep-learning readiness
==================================================

Five synthetic participants whose real and imagery bursts differ by a
known amount (delta). A cheap unsupervised score should rank them the
same way a trained CNN does.
"""

# %%
import numpy as np

from ecogscreen.knn import evaluate_variant, screen_verdict, screening_correlation
from ecogscreen.nn import TrainConfig, build_cnn, evaluate, train
from ecogscreen.pipeline import dl_condition_split, participant_splits
from ecogscreen.synth import SynthConfig, generate_cohort

deltas = (0.0, 0.25, 0.5, 0.75, 1.0)
cohort = generate_cohort(SynthConfig(deltas=deltas, seed=0))

# %%
# UMAP is fitted on the training epochs only; test epochs are placed into
# the frozen layout and labelled by their 4 nearest training neighbours.
knn = []
for delta, (real, imag) in zip(deltas, cohort):
    split = participant_splits(real, imag, seed=0, variants=("processed",))["processed"]
    tr, te, _, _ = evaluate_variant(split, seed=0)
    knn.append(te)
    print(f"delta {delta:.2f}: KNN train {tr:.3f} test {te:.3f} -> {screen_verdict(te)}")

# %%
# The expensive side: one CNN per participant on decimated envelopes.
# Around ten seconds each on a single core.
cnn = []
for delta, (real, imag) in zip(deltas, cohort):
    split = dl_condition_split(real, imag, seed=0)
    model = build_cnn(split.train.data.shape[1:] + (1,), 2, seed=0)
    train(model, split, TrainConfig(seed=0))
    cnn.append(evaluate(model, split.test)[1])
    print(f"delta {delta:.2f}: CNN test {cnn[-1]:.3f} after {len(model.history)} epochs")

# %%
report = screening_correlation(knn, cnn, participants=[f"s{i + 1:02d}" for i in range(len(deltas))])
print(f"Spearman rho(KNN, CNN) = {report.rho:.3f}")
print("gap between CNN and KNN:", np.round(np.subtract(cnn, knn), 3))
