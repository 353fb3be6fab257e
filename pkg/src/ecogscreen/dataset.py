"""Recording / epoch data model, ECOG-BIN container I/O and epoch preparation."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = "ecog-bin-1"
MANIFEST = "manifest.json"
VOLTAGE = "voltage.bin"

TONGUE = 11
HAND = 12
STIM_IDS = (TONGUE, HAND)

# label alphabets
CONDITION_LABELS = {0: "real", 1: "imagery"}
INTERVAL_LABELS = {0: "tongue", 1: "hand", 2: "rest"}
STIM_LABELS = {TONGUE: "tongue", HAND: "hand"}


class DataError(ValueError):
    """Raised for malformed containers and recordings that violate invariants."""


class Condition(str, Enum):
    REAL = "real"
    IMAGERY = "imagery"

    @property
    def label(self) -> int:
        return 0 if self is Condition.REAL else 1


class HarmonizeMode(str, Enum):
    PAD_NULL = "pad"
    TRUNCATE = "truncate"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StimEvent:
    t_on: int
    t_off: int
    stim_id: int

    def __post_init__(self):
        if self.t_off <= self.t_on:
            raise DataError(f"event t_off={self.t_off} must exceed t_on={self.t_on}")


@dataclass(frozen=True)
class Recording:
    """One participant/condition: time x channels voltages plus stimulus events.

    ``padded`` flags channels that were added by :func:`harmonize_channels`
    (all zeros, excluded from normalization statistics).
    """

    participant_id: str
    condition: Condition
    srate: int
    voltages: np.ndarray
    events: tuple[StimEvent, ...]
    padded: tuple[bool, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.voltages)
        if v.ndim != 2:
            raise DataError(f"voltages must be 2-D (time, channels), got shape {v.shape}")
        if self.srate <= 0:
            raise DataError(f"srate must be positive, got {self.srate}")
        if not np.all(np.isfinite(v)):
            raise DataError("voltages contain non-finite samples")
        object.__setattr__(self, "condition", Condition(self.condition))
        object.__setattr__(self, "voltages", _frozen(v))
        object.__setattr__(self, "events", tuple(self.events))
        if not self.padded:
            object.__setattr__(self, "padded", (False,) * v.shape[1])
        if len(self.padded) != v.shape[1]:
            raise DataError("padded mask length does not match channel count")
        n = v.shape[0]
        prev_off = -1
        prev_on = -1
        for ev in self.events:
            if not (0 <= ev.t_on < ev.t_off <= n):
                raise DataError(
                    f"event out of range: ({ev.t_on}, {ev.t_off}) with n_samples={n}")
            if ev.t_on < prev_on:
                raise DataError("events are not sorted by t_on")
            if ev.t_on < prev_off:
                raise DataError(f"overlapping events at t_on={ev.t_on}")
            prev_on, prev_off = ev.t_on, ev.t_off

    @property
    def n_samples(self) -> int:
        return self.voltages.shape[0]

    @property
    def channel_count(self) -> int:
        return self.voltages.shape[1]


@dataclass(frozen=True)
class EpochSet:
    """Labeled fixed-length windows, ``data`` shaped (epochs, time, channels).

    ``starts`` holds the source sample index of every epoch and ``sources``
    the participant/condition it was cut from, so each epoch can be traced
    back to a contiguous slice of its recording.
    """

    data: np.ndarray
    labels: np.ndarray
    label_names: dict
    participant_id: str = ""
    condition: str = ""
    window: int = 0
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sources: tuple[str, ...] = ()
    padded: tuple[bool, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        labels = np.asarray(self.labels, dtype=np.int64)
        if data.ndim != 3:
            raise DataError(f"epoch data must be (epochs, time, channels), got {data.shape}")
        if data.shape[0] != labels.shape[0]:
            raise DataError(f"{data.shape[0]} epochs but {labels.shape[0]} labels")
        bad = set(np.unique(labels).tolist()) - set(self.label_names)
        if bad:
            raise DataError(f"labels {sorted(bad)} not in declared alphabet {sorted(self.label_names)}")
        starts = np.asarray(self.starts, dtype=np.int64)
        if starts.size == 0:
            starts = np.full(data.shape[0], -1, dtype=np.int64)
        sources = tuple(self.sources) or (f"{self.participant_id}/{self.condition}",) * data.shape[0]
        padded = tuple(self.padded) or (False,) * data.shape[2]
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "starts", _frozen(starts))
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "padded", padded)
        object.__setattr__(self, "window", int(self.window or data.shape[1]))

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def subset(self, idx) -> "EpochSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, data=self.data[idx], labels=self.labels[idx],
                       starts=self.starts[idx], sources=tuple(self.sources[i] for i in idx))

    def with_data(self, data: np.ndarray) -> "EpochSet":
        return replace(self, data=data)


@dataclass(frozen=True)
class SplitPair:
    train: EpochSet
    test: EpochSet
    seed: int
    ratio: float
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def save_recording(rec: Recording, path) -> Path:
    """Write ``rec`` as an ECOG-BIN v1 directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "participant_id": rec.participant_id,
        "condition": rec.condition.value,
        "srate": int(rec.srate),
        "n_samples": int(rec.n_samples),
        "n_channels": int(rec.channel_count),
        "dtype": "f32le",
        "events": [{"t_on": e.t_on, "t_off": e.t_off, "stim_id": e.stim_id} for e in rec.events],
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    rec.voltages.astype("<f4").tofile(path / VOLTAGE)
    return path


def load_recording(path) -> Recording:
    """Read an ECOG-BIN v1 directory into a validated :class:`Recording`."""
    path = Path(path)
    mpath, vpath = path / MANIFEST, path / VOLTAGE
    if not mpath.is_file():
        raise DataError(f"missing {mpath}")
    if not vpath.is_file():
        raise DataError(f"missing {vpath}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {mpath}: {exc}") from exc

    required = ("format_version", "participant_id", "condition", "srate",
                "n_samples", "n_channels", "dtype", "events")
    missing = [k for k in required if k not in m]
    if missing:
        raise DataError(f"manifest missing fields: {missing}")
    if m["format_version"] != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {m['format_version']!r}")
    if m["dtype"] != "f32le":
        raise DataError(f"unsupported dtype {m['dtype']!r}")
    try:
        condition = Condition(m["condition"])
    except ValueError as exc:
        raise DataError(f"unknown condition {m['condition']!r}") from exc

    n, c = int(m["n_samples"]), int(m["n_channels"])
    expected = n * c * 4
    actual = vpath.stat().st_size
    if actual != expected:
        raise DataError(
            f"size mismatch: manifest declares {n}x{c} f32 ({expected} bytes), "
            f"{VOLTAGE} has {actual} bytes")
    v = np.fromfile(vpath, dtype="<f4").reshape(n, c)

    events = []
    for e in m["events"]:
        try:
            events.append(StimEvent(int(e["t_on"]), int(e["t_off"]), int(e["stim_id"])))
        except KeyError as exc:
            raise DataError(f"event missing field {exc}") from exc
    return Recording(str(m["participant_id"]), condition, int(m["srate"]), v, tuple(events))



def list_participants(root) -> list[str]:
    """Participant ids under a dataset root laid out as ``root/<pid>/<condition>/``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    pids = sorted(p.name for p in root.iterdir()
                  if p.is_dir() and any((p / c.value / MANIFEST).is_file() for c in Condition))
    if not pids:
        raise DataError(f"no participants found under {root}")
    return pids


def load_participant(root, participant_id: str) -> dict:
    """Condition -> Recording for every condition present for ``participant_id``."""
    base = Path(root) / participant_id
    out = {c: load_recording(base / c.value) for c in Condition if (base / c.value / MANIFEST).is_file()}
    if not out:
        raise DataError(f"no recordings for participant {participant_id} under {root}")
    return out

# ---------------------------------------------------------------------------
# channel harmonization
# ---------------------------------------------------------------------------

def harmonize_channels(recordings: Sequence[Recording], mode="truncate") -> list[Recording]:
    """Give every recording the same channel count.

    ``pad`` zero-fills up to the largest count and flags the new columns;
    ``truncate`` keeps the first ``min`` channels.
    """
    if not recordings:
        raise ValueError("harmonize_channels needs at least one recording")
    mode = HarmonizeMode(mode)
    counts = [r.channel_count for r in recordings]
    out = []
    if mode is HarmonizeMode.TRUNCATE:
        target = min(counts)
        for r in recordings:
            out.append(r if r.channel_count == target else
                       replace(r, voltages=r.voltages[:, :target], padded=r.padded[:target]))
    else:
        target = max(counts)
        for r in recordings:
            extra = target - r.channel_count
            if extra == 0:
                out.append(r)
                continue
            v = np.concatenate([r.voltages, np.zeros((r.n_samples, extra), r.voltages.dtype)], axis=1)
            out.append(replace(r, voltages=v, padded=r.padded + (True,) * extra))
    return out


def cap_channels(x, n: int):
    """Keep the first ``n`` channels of a Recording or EpochSet (no-op if fewer)."""
    if isinstance(x, Recording):
        if x.channel_count <= n:
            return x
        return replace(x, voltages=x.voltages[:, :n], padded=x.padded[:n])
    if x.n_channels <= n:
        return x
    return replace(x, data=x.data[:, :, :n], padded=x.padded[:n])


# ---------------------------------------------------------------------------
# epoching
# ---------------------------------------------------------------------------

def _stack(rec: Recording, starts: list[int], window: int) -> np.ndarray:
    if not starts:
        return np.zeros((0, window, rec.channel_count), dtype=rec.voltages.dtype)
    return np.stack([rec.voltages[s:s + window] for s in starts])


def extract_stimulus_epochs(rec: Recording, window: int = 2000, label_by: str = "condition") -> EpochSet:
    """Cut ``window`` samples starting at every stimulus onset.

    Labels are the condition (real=0, imagery=1) by default, or the raw
    stim_id with ``label_by="stim"``. Events whose window would run past the
    end of the recording are dropped and counted in a warning.
    """
    starts, labels, dropped = [], [], 0
    for ev in rec.events:
        if ev.t_on + window > rec.n_samples:
            dropped += 1
            continue
        starts.append(ev.t_on)
        labels.append(rec.condition.label if label_by == "condition" else ev.stim_id)
    if dropped:
        warnings.warn(f"{rec.participant_id}/{rec.condition.value}: dropped {dropped} "
                      f"event(s) whose {window}-sample window exceeds the recording",
                      RuntimeWarning, stacklevel=2)
    if not starts:
        raise DataError(f"no events retained for window {window}")
    names = CONDITION_LABELS if label_by == "condition" else STIM_LABELS
    return EpochSet(_stack(rec, starts, window), np.array(labels), dict(names),
                    rec.participant_id, rec.condition.value, window,
                    np.array(starts), padded=rec.padded)


def interval_starts(events: Iterable[StimEvent], n_samples: int, window: int) -> list[tuple[int, int]]:
    """(start, label) pairs for activity and rest intervals long enough for ``window``."""
    events = list(events)
    out = []
    code = {TONGUE: 0, HAND: 1}
    for i, ev in enumerate(events):
        if ev.stim_id in code and ev.t_off - ev.t_on >= window and ev.t_on + window <= n_samples:
            out.append((ev.t_on, code[ev.stim_id]))
        if i + 1 < len(events):
            gap_end = events[i + 1].t_on
            if gap_end - ev.t_off >= window:
                out.append((ev.t_off, 2))
    return out


def extract_interval_epochs(rec: Recording, window: int = 3000) -> EpochSet:
    """Tongue (0), hand (1) and rest (2) epochs of exactly ``window`` samples.

    Activity epochs start at t_on, rest epochs at the preceding t_off; rest is
    only the gap between consecutive events. Shorter intervals are dropped.
    """
    pairs = interval_starts(rec.events, rec.n_samples, window)
    if not pairs:
        raise DataError(f"no intervals of at least {window} samples")
    starts = [p[0] for p in pairs]
    return EpochSet(_stack(rec, starts, window), np.array([p[1] for p in pairs]),
                    dict(INTERVAL_LABELS), rec.participant_id, rec.condition.value, window,
                    np.array(starts), padded=rec.padded)


def concat_epochs(sets: Sequence[EpochSet]) -> EpochSet:
    """Stack epoch sets sharing shape; label alphabets are merged."""
    if not sets:
        raise ValueError("nothing to concatenate")
    names: dict = {}
    for s in sets:
        names.update(s.label_names)
    first = sets[0]
    return EpochSet(
        np.concatenate([s.data for s in sets]),
        np.concatenate([s.labels for s in sets]),
        names,
        first.participant_id,
        "+".join(dict.fromkeys(s.condition for s in sets)),
        first.window,
        np.concatenate([s.starts for s in sets]),
        tuple(src for s in sets for src in s.sources),
        first.padded,
    )


# ---------------------------------------------------------------------------
# normalization and features
# ---------------------------------------------------------------------------

def _valid_mask(epochs: EpochSet) -> np.ndarray:
    return ~np.asarray(epochs.padded, dtype=bool)


def normalize_unit(epochs: EpochSet) -> EpochSet:
    """Global min-max scaling to [0, 1] over all epochs jointly.

    Padded channels are excluded from the statistics and stay zero.
    Constant input maps to all zeros with a warning.
    """
    data = np.asarray(epochs.data, dtype=np.float64)
    valid = _valid_mask(epochs)
    out = np.zeros_like(data)
    if not valid.any() or data.shape[0] == 0:
        return epochs.with_data(out.astype(epochs.data.dtype))
    sel = data[:, :, valid]
    lo, hi = sel.min(), sel.max()
    if hi == lo:
        warnings.warn("normalize_unit: constant data, returning zeros", RuntimeWarning, stacklevel=2)
    else:
        out[:, :, valid] = (sel - lo) / (hi - lo)
    return epochs.with_data(out.astype(epochs.data.dtype))


def normalize_mean(epochs: EpochSet) -> EpochSet:
    """Divide each channel by its mean absolute value over the whole set."""
    data = np.asarray(epochs.data, dtype=np.float64)
    scale = np.abs(data).mean(axis=(0, 1))
    valid = _valid_mask(epochs)
    zero = (scale == 0) & valid
    if zero.any():
        warnings.warn(f"normalize_mean: {int(zero.sum())} all-zero channel(s) left unchanged",
                      RuntimeWarning, stacklevel=2)
    scale = np.where((scale == 0) | ~valid, 1.0, scale)
    return epochs.with_data((data / scale).astype(epochs.data.dtype))


def epoch_features_mean(epochs: EpochSet) -> np.ndarray:
    """Time-average every epoch per channel -> (epochs, channels)."""
    return np.asarray(epochs.data, dtype=np.float64).mean(axis=1)


def split_train_test(epochs: EpochSet, ratio: float = 0.75, seed: int = 0) -> SplitPair:
    """Seeded uniform random partition with ``round(ratio * n)`` training epochs."""
    n = len(epochs)
    if n < 4:
        raise DataError(f"need at least 4 epochs to split, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return SplitPair(epochs.subset(tr), epochs.subset(te), seed, ratio, tr, te)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.max() >= n_classes or labels.min() < 0):
        raise ValueError(f"label {labels.max()} out of range for {n_classes} classes")
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def write_epoch_metadata(epochs: EpochSet, path) -> Path:
    """Audit CSV: one row per epoch with its source slice and label."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "source", "start", "stop", "label", "label_name"])
        for i in range(len(epochs)):
            s = int(epochs.starts[i])
            lab = int(epochs.labels[i])
            w.writerow([i, epochs.sources[i], s, s + epochs.window, lab, epochs.label_names.get(lab, "")])
    return path
