"""Random hyperparameter search with a persisted leaderboard."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ModelGraph, TrainConfig, build_model, evaluate, train


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple = (1e-4, 1e-2)               # log-uniform
    filters: tuple = (4, 8, 16)
    kernel: tuple = (3, 5, 7)
    lstm_units: tuple = (16, 32, 64)
    dropout: tuple = (0.0, 0.5)            # uniform
    families: tuple = ("cnn",)
    batchnorm: tuple = (False,)
    n_trials: int = 30

    def __post_init__(self):
        lo, hi = self.lr
        if not 0 < lo <= hi:
            raise ValueError(f"lr range must satisfy 0 < lo <= hi, got {self.lr}")
        lo, hi = self.dropout
        if not 0 <= lo <= hi < 1:
            raise ValueError(f"dropout range must lie in [0, 1), got {self.dropout}")
        for name in ("filters", "kernel", "lstm_units", "families", "batchnorm"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"search range {name!r} is empty")

    def sample(self, rng: np.random.Generator) -> dict:
        # fixed draw order keeps trials stable when unused knobs change
        lr = math.exp(rng.uniform(math.log(self.lr[0]), math.log(self.lr[1])))
        return {
            "lr": float(lr),
            "filters": int(self.filters[rng.integers(len(self.filters))]),
            "kernel": int(self.kernel[rng.integers(len(self.kernel))]),
            "lstm_units": int(self.lstm_units[rng.integers(len(self.lstm_units))]),
            "dropout": float(rng.uniform(*self.dropout)),
            "family": str(self.families[rng.integers(len(self.families))]),
            "batchnorm": bool(self.batchnorm[rng.integers(len(self.batchnorm))]),
        }


@dataclass(frozen=True)
class TaskSpec:
    input_shape: tuple
    n_classes: int


@dataclass
class SearchResult:
    best: dict
    best_model: ModelGraph
    leaderboard: list = field(default_factory=list)

    def to_json(self, path) -> Path:
        path = Path(path)
        doc = {"best": self.best, "leaderboard": self.leaderboard}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def build_from_params(task: TaskSpec, params: dict, seed: int) -> ModelGraph:
    kw = {"filters": params["filters"], "kernel": params["kernel"], "dropout": params["dropout"],
          "batchnorm": params["batchnorm"]}
    if params["family"] == "cnn_lstm":
        kw["lstm_units"] = params["lstm_units"]
    return build_model(params["family"], task.input_shape, task.n_classes, seed=seed, **kw)


def _run_trial(args):
    index, params, task, split, base_cfg, seed = args
    model = build_from_params(task, params, seed)
    cfg = replace(base_cfg, lr=params["lr"], seed=seed)
    train(model, split, cfg)
    test = split.test if hasattr(split, "test") else split[1]
    loss, acc = evaluate(model, test)
    row = {"trial": index, "seed": seed, **params, "test_loss": round(loss, 8), "test_acc": round(acc, 8),
           "epochs_run": len(model.history)}
    return row, model


def hyper_search(space: SearchSpace, task: TaskSpec, split, n_trials: int | None = None, seed: int = 0,
                 base_cfg: TrainConfig = TrainConfig(), jobs: int = 1) -> SearchResult:
    """Sample ``n_trials`` configurations, train each, rank by test accuracy
    (higher first), then test loss, then trial index."""
    n_trials = space.n_trials if n_trials is None else n_trials
    if n_trials < 1:
        raise ValueError("hyper_search needs at least one trial")
    ss = np.random.SeedSequence(int(seed))
    sample_rng = np.random.default_rng(ss.spawn(1)[0])
    trial_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_trials)]
    jobs_args = [(i, space.sample(sample_rng), task, split, base_cfg, trial_seeds[i]) for i in range(n_trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_trial, jobs_args))
    else:
        results = [_run_trial(a) for a in jobs_args]
    order = sorted(range(n_trials), key=lambda i: (-results[i][0]["test_acc"], results[i][0]["test_loss"], i))
    leaderboard = [results[i][0] for i in order]
    return SearchResult(best=leaderboard[0], best_model=results[order[0]][1], leaderboard=leaderboard)
