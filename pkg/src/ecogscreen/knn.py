"""KNN scoring over embeddings, per-participant evaluation tables and the
KNN-vs-deep-learning screening report."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import SplitPair, epoch_features_mean
from .umap import UmapConfig, embed_train_test

TABLE1_COLUMNS = ("Participant", "Preprocessed Train", "Preprocessed Test",
                  "No Preprocessed Train", "No Preprocessed Test")
VARIANTS = ("processed", "unprocessed")


@dataclass(frozen=True)
class KnnModel:
    points: np.ndarray
    labels: np.ndarray
    k: int = 4
    weighting: str = "uniform"


def knn_fit(points, labels, k: int = 4) -> KnnModel:
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if points.shape[0] != labels.shape[0]:
        raise ValueError(f"{points.shape[0]} points but {labels.shape[0]} labels")
    if k >= points.shape[0]:
        raise ValueError(f"k={k} must be smaller than the number of reference points {points.shape[0]}")
    return KnnModel(points, labels, k)


def knn_predict(model: KnnModel, points) -> np.ndarray:
    """Uniform majority vote; ties go to the smallest class index."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != model.points.shape[1]:
        raise ValueError(f"expected {model.points.shape[1]}-d points, got shape {points.shape}")
    diff = points[:, None, :] - model.points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :model.k]
    votes = model.labels[nn]
    n_classes = int(model.labels.max()) + 1
    counts = np.zeros((points.shape[0], n_classes), dtype=np.int64)
    np.add.at(counts, (np.arange(points.shape[0])[:, None], votes), 1)
    return counts.argmax(axis=1)


def knn_score(model: KnnModel, points, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot score an empty set")
    return float((knn_predict(model, points) == labels).mean())


# ---------------------------------------------------------------------------
# per-participant table
# ---------------------------------------------------------------------------

@dataclass
class EvaluationTable:
    """Train/test KNN accuracy per participant for both preprocessing variants."""

    rows: dict = field(default_factory=dict)   # pid -> {"processed": (train, test), ...}
    embedding_mode: str = "transform"

    def averages(self) -> dict:
        out = {}
        for v in VARIANTS:
            vals = [r[v] for r in self.rows.values() if v in r]
            if vals:
                out[v] = (float(np.mean([t[0] for t in vals])), float(np.mean([t[1] for t in vals])))
        return out

    def test_scores(self, variant: str = "processed") -> dict:
        return {pid: r[variant][1] for pid, r in self.rows.items() if variant in r}

    def to_csv(self, path) -> Path:
        path = Path(path)

        def cells(r):
            out = []
            for v in VARIANTS:
                out += [f"{r[v][0]:.4f}", f"{r[v][1]:.4f}"] if v in r else ["", ""]
            return out

        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE1_COLUMNS)
            for pid, r in self.rows.items():
                w.writerow([pid] + cells(r))
            w.writerow(["Avg"] + cells(self.averages()))
        return path


def evaluate_variant(split: SplitPair, umap_config: UmapConfig = UmapConfig(), seed: int = 0,
                     k: int = 4, mode: str = "transform"):
    """UMAP on train features, embed test, KNN train/test accuracy.

    Returns (train_score, test_score, train_embedding, test_embedding).
    """
    f_tr = epoch_features_mean(split.train)
    f_te = epoch_features_mean(split.test)
    e_tr, e_te, _ = embed_train_test(f_tr, f_te, umap_config, seed, mode)
    model = knn_fit(e_tr, split.train.labels, k)
    return (knn_score(model, e_tr, split.train.labels), knn_score(model, e_te, split.test.labels),
            e_tr, e_te)


def evaluate_participants(datasets: Mapping[str, Mapping[str, SplitPair]],
                          umap_config: UmapConfig = UmapConfig(), seed: int = 0, k: int = 4,
                          mode: str = "transform") -> EvaluationTable:
    """``datasets[pid][variant]`` -> SplitPair, variants 'processed' / 'unprocessed'."""
    if not datasets:
        raise ValueError("no participant data")
    table = EvaluationTable(embedding_mode=mode)
    for pid, variants in datasets.items():
        if not variants:
            raise ValueError(f"participant {pid} has no data")
        table.rows[pid] = {}
        for v in VARIANTS:
            if v in variants:
                tr, te, _, _ = evaluate_variant(variants[v], umap_config, seed, k, mode)
                table.rows[pid][v] = (tr, te)
    return table


# ---------------------------------------------------------------------------
# screening
# ---------------------------------------------------------------------------

def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if den == 0:
        return 0.0
    return float(np.clip((rx * ry).sum() / den, -1.0, 1.0))


@dataclass
class ScreeningReport:
    participants: list
    knn_scores: list
    dl_accuracies: list
    rho: float
    threshold: float
    verdicts: list
    architecture: str = "cnn"
    config: dict = field(default_factory=dict)

    def to_json(self, path) -> Path:
        path = Path(path)
        doc = {
            "participants": [
                {"participant": p, "knn_test_score": round(k, 6), "dl_test_accuracy": round(a, 6),
                 "dl_architecture": self.architecture, "verdict": v}
                for p, k, a, v in zip(self.participants, self.knn_scores, self.dl_accuracies, self.verdicts)
            ],
            "spearman_rho": round(self.rho, 6),
            "threshold": self.threshold,
            "config": self.config,
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def screen_verdict(score: float, threshold: float = 0.8) -> str:
    return "screen-in" if score >= threshold else "screen-out"


def screening_correlation(knn_scores: Sequence[float], dl_accuracies: Sequence[float],
                          threshold: float = 0.8, participants: Sequence[str] | None = None,
                          architecture: str = "cnn") -> ScreeningReport:
    knn_scores = [float(v) for v in knn_scores]
    dl_accuracies = [float(v) for v in dl_accuracies]
    if len(knn_scores) != len(dl_accuracies):
        raise ValueError(f"length mismatch: {len(knn_scores)} KNN scores vs {len(dl_accuracies)} DL accuracies")
    if len(knn_scores) < 3:
        raise ValueError(f"n >= 3 required, got {len(knn_scores)}")
    pids = list(participants) if participants is not None else [str(i) for i in range(len(knn_scores))]
    return ScreeningReport(pids, knn_scores, dl_accuracies, spearman(knn_scores, dl_accuracies),
                           threshold, [screen_verdict(s, threshold) for s in knn_scores], architecture)
