"""Synthetic ECoG cohorts with a per-participant separability knob.

Each channel carries 1/f background noise. During every stimulus window a
subset of channels (one subset for tongue, another for hand) gets a
band-limited gamma burst. Burst amplitude is ``(1 + delta) / 2 * gain`` in
the real condition and ``(1 - delta) / 2 * gain`` in imagery, so delta = 0
gives identically distributed conditions and delta = 1 silences imagery.
A lognormal per-trial amplitude jitter keeps intermediate deltas graded.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len

from .dataset import HAND, TONGUE, Condition, Recording, StimEvent, save_recording


@dataclass(frozen=True)
class SynthConfig:
    deltas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    channels: int = 16
    srate: int = 1000
    events_per_condition: int = 40
    window: int = 3000                 # stimulus duration in samples
    min_gap: int = 3000
    max_gap: int = 4000
    noise_exponent: float = 1.0
    gamma_band: tuple = (70.0, 110.0)
    gain: float = 1.0                  # burst std relative to unit-variance background
    jitter: float = 0.35               # lognormal sigma of per-trial burst amplitude
    active_channels: int = 4           # per stimulus type
    seed: int = 0
    prefix: str = "s"

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        if not self.deltas:
            raise ValueError("at least one participant is required")
        if any(not 0.0 <= d <= 1.0 for d in self.deltas):
            raise ValueError(f"every delta must lie in [0, 1], got {self.deltas}")
        if self.channels < 4:
            raise ValueError(f"channels must be >= 4, got {self.channels}")
        if self.events_per_condition < 20:
            raise ValueError(f"events_per_condition must be >= 20, got {self.events_per_condition}")
        if self.min_gap < 3000 or self.max_gap < self.min_gap:
            raise ValueError("gaps must satisfy 3000 <= min_gap <= max_gap")
        lo, hi = self.gamma_band
        if not 0 < lo < hi < self.srate / 2:
            raise ValueError(f"gamma band {self.gamma_band} must lie inside (0, Nyquist)")
        if not 1 <= self.active_channels <= self.channels // 2:
            raise ValueError("active_channels must be in [1, channels // 2]")

    @property
    def n_participants(self) -> int:
        return len(self.deltas)

    def participant_ids(self) -> list[str]:
        return [f"{self.prefix}{i + 1:02d}" for i in range(self.n_participants)]


def colored_noise(rng: np.random.Generator, n: int, channels: int, exponent: float, srate: int = 1000) -> np.ndarray:
    """Gaussian noise of unit expected variance with PSD proportional to 1/f**exponent."""
    m = next_fast_len(n, real=True)      # synthesized at an FFT-friendly length, then cropped
    spec = np.fft.rfft(rng.standard_normal((m, channels)), axis=0)
    f = np.fft.rfftfreq(m, 1.0 / srate)
    shape = np.zeros_like(f)
    shape[1:] = f[1:] ** (-exponent / 2.0)
    # analytic scaling: dividing by the empirical std would tie the
    # high-frequency level of a recording to its random low-frequency content
    shape /= np.sqrt(2.0 * np.sum(shape ** 2) / m)
    return np.fft.irfft(spec * shape[:, None], n=m, axis=0)[:n]


def band_noise(rng: np.random.Generator, n: int, channels: int, band, srate: int = 1000) -> np.ndarray:
    """Unit-variance Gaussian noise confined to ``band`` Hz."""
    spec = np.fft.rfft(rng.standard_normal((n, channels)), axis=0)
    f = np.fft.rfftfreq(n, 1.0 / srate)
    spec[(f < band[0]) | (f > band[1])] = 0
    x = np.fft.irfft(spec, n=n, axis=0)
    return x / x.std(axis=0, keepdims=True)


def layout_events(rng: np.random.Generator, cfg: SynthConfig) -> tuple[list[StimEvent], int]:
    """Alternating tongue/hand events separated by gaps of at least 3000 samples."""
    t = cfg.min_gap
    events = []
    for i in range(cfg.events_per_condition):
        stim = TONGUE if i % 2 == 0 else HAND
        events.append(StimEvent(t, t + cfg.window, stim))
        t += cfg.window + int(rng.integers(cfg.min_gap, cfg.max_gap + 1))
    return events, t


def channel_subsets(cfg: SynthConfig) -> dict:
    k = cfg.active_channels
    return {TONGUE: np.arange(0, k), HAND: np.arange(k, 2 * k)}


def burst_amplitude(delta: float, condition: Condition, gain: float) -> float:
    return gain * ((1.0 + delta) if condition is Condition.REAL else (1.0 - delta)) / 2.0


def generate_recording(cfg: SynthConfig, index: int, condition: Condition) -> Recording:
    pid = cfg.participant_ids()[index]
    ss = np.random.SeedSequence([cfg.seed, index, 0 if condition is Condition.REAL else 1])
    layout_rng, noise_rng, burst_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    events, n = layout_events(layout_rng, cfg)
    x = colored_noise(noise_rng, n, cfg.channels, cfg.noise_exponent, cfg.srate)
    amp = burst_amplitude(cfg.deltas[index], condition, cfg.gain)
    subsets = channel_subsets(cfg)
    for ev in events:
        ch = subsets[ev.stim_id]
        trial_amp = amp * np.exp(cfg.jitter * burst_rng.standard_normal())
        x[ev.t_on:ev.t_off, ch] += trial_amp * band_noise(burst_rng, ev.t_off - ev.t_on, len(ch),
                                                           cfg.gamma_band, cfg.srate)
    return Recording(pid, condition, cfg.srate, x.astype(np.float32), tuple(events))


def generate_cohort(cfg: SynthConfig) -> list[tuple[Recording, Recording]]:
    """(real, imagery) recording pair per participant; a pure function of ``cfg``."""
    return [(generate_recording(cfg, i, Condition.REAL), generate_recording(cfg, i, Condition.IMAGERY))
            for i in range(cfg.n_participants)]


def write_cohort(cfg: SynthConfig, out, cohort=None) -> Path:
    """Write ECOG-BIN directories under ``out/data`` plus ``out/data/cohort.json``.

    Deltas go to ``out/ground_truth.json``, outside the model-visible tree.
    """
    out = Path(out)
    data = out / "data"
    cohort = generate_cohort(cfg) if cohort is None else cohort
    for real, imag in cohort:
        save_recording(real, data / real.participant_id / real.condition.value)
        save_recording(imag, data / imag.participant_id / imag.condition.value)
    pids = cfg.participant_ids()
    manifest = {"participants": pids, "channels": cfg.channels, "srate": cfg.srate,
                "conditions": [c.value for c in Condition]}
    (data / "cohort.json").write_text(json.dumps(manifest, indent=2) + "\n")
    truth = {"config": asdict(cfg), "deltas": dict(zip(pids, cfg.deltas))}
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return data
