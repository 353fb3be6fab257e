"""End-to-end data preparation shared by the CLI, demos and acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import (Condition, EpochSet, Recording, SplitPair, cap_channels, concat_epochs,
                      extract_interval_epochs, extract_stimulus_epochs, normalize_mean, normalize_unit,
                      split_train_test)
from .spectral import power_envelope


@dataclass(frozen=True)
class PrepConfig:
    stim_window: int = 2000
    interval_window: int = 3000
    umap_channel_cap: int = 46
    dl_channel_cap: int = 48
    highpass_hz: float = 50.0
    lowpass_hz: float = 10.0
    order: int = 4
    decimate: int = 20                 # time decimation of envelopes fed to the networks
    ratio: float = 0.75

    def __post_init__(self):
        for name in ("stim_window", "interval_window", "umap_channel_cap", "dl_channel_cap", "order",
                     "decimate"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.lowpass_hz > 0 and self.highpass_hz > 0):
            raise ValueError("filter cutoffs must be positive")
        if not 0 < self.ratio < 1:
            raise ValueError(f"ratio must lie in (0, 1), got {self.ratio}")


def envelope_recording(rec: Recording, cfg: PrepConfig = PrepConfig()) -> Recording:
    env = power_envelope(np.asarray(rec.voltages, dtype=np.float64), fs=rec.srate,
                         highpass_hz=cfg.highpass_hz, lowpass_hz=cfg.lowpass_hz, order=cfg.order)
    return replace(rec, voltages=env.astype(np.float32))


def condition_epochs(real: Recording, imag: Recording, processed: bool = True,
                     cfg: PrepConfig = PrepConfig(), channel_cap: int | None = None) -> EpochSet:
    """Real (0) vs imagery (1) stimulus epochs, min-max normalized jointly.

    ``processed`` runs the power-envelope pipeline first; otherwise raw
    voltages are used. Channels beyond ``channel_cap`` (default: the DL cap)
    are dropped.
    """
    cap = cfg.dl_channel_cap if channel_cap is None else channel_cap
    recs = [real, imag]
    if processed:
        recs = [envelope_recording(r, cfg) for r in recs]
    recs = [cap_channels(r, cap) for r in recs]
    if recs[0].channel_count != recs[1].channel_count:
        n = min(r.channel_count for r in recs)
        recs = [cap_channels(r, n) for r in recs]
    sets = [extract_stimulus_epochs(r, cfg.stim_window) for r in recs]
    return normalize_unit(concat_epochs(sets))


def interval_epochs(rec: Recording, cfg: PrepConfig = PrepConfig()) -> EpochSet:
    """Tongue / hand / rest epochs from the envelope, mean-normalized per channel."""
    env = cap_channels(envelope_recording(rec, cfg), cfg.dl_channel_cap)
    return normalize_mean(extract_interval_epochs(env, cfg.interval_window))


def decimate_epochs(epochs: EpochSet, factor: int) -> EpochSet:
    """Keep every ``factor``-th sample; intended for low-passed envelopes."""
    if factor <= 1:
        return epochs
    return replace(epochs, data=np.ascontiguousarray(epochs.data[:, ::factor]),
                   window=len(range(0, epochs.data.shape[1], factor)))


def decimate_split(split: SplitPair, factor: int) -> SplitPair:
    return replace(split, train=decimate_epochs(split.train, factor), test=decimate_epochs(split.test, factor))


def participant_splits(real: Recording, imag: Recording, seed: int, cfg: PrepConfig = PrepConfig(),
                       variants=("processed", "unprocessed")) -> dict:
    """variant -> SplitPair of real-vs-imagery epochs for UMAP+KNN, one partition for all variants."""
    out = {}
    for v in variants:
        if v not in ("processed", "unprocessed"):
            raise ValueError(f"unknown preprocessing variant {v!r}")
        out[v] = split_train_test(condition_epochs(real, imag, v == "processed", cfg, cfg.umap_channel_cap),
                                  cfg.ratio, seed)
    return out


def recordings_by_condition(recs: dict) -> tuple[Recording, Recording]:
    try:
        return recs[Condition.REAL], recs[Condition.IMAGERY]
    except KeyError as exc:
        raise ValueError(f"participant lacks the {exc.args[0].value} condition") from None


def dl_condition_split(real: Recording, imag: Recording, seed: int, cfg: PrepConfig = PrepConfig()) -> SplitPair:
    """Decimated real-vs-imagery envelope epochs for the networks (DL channel cap)."""
    epochs = condition_epochs(real, imag, True, cfg, cfg.dl_channel_cap)
    return decimate_split(split_train_test(epochs, cfg.ratio, seed), cfg.decimate)


def dl_interval_split(rec: Recording, seed: int, cfg: PrepConfig = PrepConfig()) -> SplitPair:
    """Decimated tongue / hand / rest epochs for the 3-class task."""
    return decimate_split(split_train_test(interval_epochs(rec, cfg), cfg.ratio, seed), cfg.decimate)
