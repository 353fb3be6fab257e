"""Filtering, power envelope, Fourier / Welch / coherence estimates and the
bootstrapped coherence statistics table."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .dataset import EpochSet


class SpectralKind(str, Enum):
    PSD = "psd"
    COHERENCE = "coherence"
    AMPLITUDE = "amplitude"


@dataclass(frozen=True)
class SpectralEstimate:
    """Frequency grid plus values along the last axis (leading axes = channels)."""

    freqs_hz: np.ndarray
    values: np.ndarray
    kind: SpectralKind
    nperseg: int = 0
    overlap: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape[-1] != self.freqs_hz.shape[0]:
            raise ValueError("freqs and values lengths differ")

    def to_csv(self, path, header: str = "value") -> Path:
        path = Path(path)
        vals = self.values if self.values.ndim == 1 else self.values.reshape(-1, self.values.shape[-1]).mean(0)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["freq_hz", header])
            for f, v in zip(self.freqs_hz, vals):
                w.writerow([f"{f:.6g}", f"{v:.9g}"])
        return path


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------

def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time radix-2 FFT over the last axis."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    a = x[..., _bitrev(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(*lead, n // size, size)
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(*lead, n)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def fft_length(n: int) -> int:
    """Internal transform length used for an ``n``-point DFT."""
    if _is_pow2(n):
        return n
    return 1 << (2 * n - 2).bit_length()


def fft(x) -> np.ndarray:
    """Exact ``n``-point DFT over the last axis.

    Powers of two go straight through the radix-2 kernel; other lengths use
    Bluestein's chirp-z identity, which zero-pads to ``fft_length(n)``
    internally but still returns the ``n``-point transform.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("fft of empty signal")
    if _is_pow2(n):
        return _fft_pow2(x)
    m = fft_length(n)
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    conv = ifft(_fft_pow2(a) * _fft_pow2(b))
    return conv[..., :n] * chirp


def ifft(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


def rfft(x) -> np.ndarray:
    """One-sided half of :func:`fft` for real input (bins 0..n//2)."""
    x = np.asarray(x, dtype=np.float64)
    return fft(x)[..., : x.shape[-1] // 2 + 1]


def fft_magnitude(x, fs: float) -> SpectralEstimate:
    """One-sided amplitude spectrum on the grid k*fs/N (a unit sinusoid peaks at 1)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("fft_magnitude of empty signal")
    amp = np.abs(rfft(x)) / n
    if n % 2 == 0:
        amp[..., 1:-1] *= 2
    else:
        amp[..., 1:] *= 2
    freqs = np.arange(n // 2 + 1) * fs / n
    return SpectralEstimate(freqs, amp, SpectralKind.AMPLITUDE, meta={
        "n": n, "fft_length": fft_length(n), "zero_padded": fft_length(n) != n})


def dominant_frequencies(est: SpectralEstimate, n_peaks: int = 3, min_hz: float = 1.0) -> np.ndarray:
    """Frequencies of the ``n_peaks`` largest local maxima above ``min_hz``."""
    vals = est.values if est.values.ndim == 1 else est.values.reshape(-1, est.values.shape[-1]).mean(0)
    keep = est.freqs_hz >= min_hz
    f, v = est.freqs_hz[keep], vals[keep]
    peaks, _ = sps.find_peaks(v)
    if peaks.size == 0:
        return f[np.argsort(v)[::-1][:n_peaks]]
    top = peaks[np.argsort(v[peaks], kind="stable")[::-1][:n_peaks]]
    return np.sort(f[top])


# ---------------------------------------------------------------------------
# Welch PSD / coherence
# ---------------------------------------------------------------------------

def _segments(x: np.ndarray, nperseg: int, noverlap: int) -> np.ndarray:
    """Windowed, mean-removed segment spectra -> (..., n_segments, nfreq)."""
    n = x.shape[-1]
    step = nperseg - noverlap
    nseg = (n - noverlap) // step
    idx = np.arange(nseg)[:, None] * step + np.arange(nperseg)[None, :]
    seg = x[..., idx]
    seg = seg - seg.mean(axis=-1, keepdims=True)
    win = sps.get_window("hann", nperseg)
    return rfft(seg * win)


def _density_scale(nperseg: int, fs: float) -> np.ndarray:
    win = sps.get_window("hann", nperseg)
    nf = nperseg // 2 + 1
    scale = np.full(nf, 2.0 / (fs * (win * win).sum()))
    scale[0] /= 2
    if nperseg % 2 == 0:
        scale[-1] /= 2
    return scale


def n_segments(n: int, nperseg: int, overlap_fraction: float = 0.5) -> int:
    noverlap = int(nperseg * overlap_fraction)
    return (n - noverlap) // (nperseg - noverlap)


def psd_welch(x, fs: float, nperseg: int = 256, overlap_fraction: float = 0.5) -> SpectralEstimate:
    """Hann-windowed averaged periodogram, one-sided density (units^2/Hz)."""
    x = np.asarray(x, dtype=np.float64)
    if nperseg > x.shape[-1]:
        raise ValueError(f"nperseg={nperseg} exceeds signal length {x.shape[-1]}")
    noverlap = int(nperseg * overlap_fraction)
    S = _segments(x, nperseg, noverlap)
    pxx = (S.real * S.real + S.imag * S.imag).mean(axis=-2) * _density_scale(nperseg, fs)
    freqs = np.arange(nperseg // 2 + 1) * fs / nperseg
    return SpectralEstimate(freqs, pxx, SpectralKind.PSD, nperseg, overlap_fraction,
                            {"n_segments": S.shape[-2], "window": "hann"})


def _coherence_from_spectra(Sx: np.ndarray, Sy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # real/imag parts spelled out so that x == y reproduces pxx bit for bit
    xr, xi, yr, yi = Sx.real, Sx.imag, Sy.real, Sy.imag
    pxy_re = (xr * yr + xi * yi).mean(axis=-2)
    pxy_im = (xr * yi - xi * yr).mean(axis=-2)
    pxx = (xr * xr + xi * xi).mean(axis=-2)
    pyy = (yr * yr + yi * yi).mean(axis=-2)
    num = pxy_re * pxy_re + pxy_im * pxy_im
    den = pxx * pyy
    defined = den > 0
    coh = np.zeros_like(den)
    np.divide(num, den, out=coh, where=defined)
    return np.clip(coh, 0.0, 1.0), defined


def coherence(x, y, fs: float, nperseg: int = 256, overlap_fraction: float = 0.5,
              min_segments: int = 8) -> SpectralEstimate:
    """Magnitude-squared coherence |Pxy|^2 / (Pxx Pyy), clamped to [0, 1].

    Bins where either auto-spectrum is exactly zero are reported as 0 and
    listed under ``meta["undefined_bins"]``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"signals differ in shape: {x.shape} vs {y.shape}")
    noverlap = int(nperseg * overlap_fraction)
    nseg = n_segments(x.shape[-1], nperseg, overlap_fraction)
    if nseg < min_segments:
        raise ValueError(f"coherence needs >= {min_segments} segments, got {nseg}")
    coh, defined = _coherence_from_spectra(_segments(x, nperseg, noverlap), _segments(y, nperseg, noverlap))
    freqs = np.arange(nperseg // 2 + 1) * fs / nperseg
    return SpectralEstimate(freqs, coh, SpectralKind.COHERENCE, nperseg, overlap_fraction,
                            {"n_segments": nseg, "undefined_bins": int((~defined).sum())})


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

class FilterKind(str, Enum):
    HIGHPASS = "highpass"
    LOWPASS = "lowpass"


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind
    cutoff_hz: float
    order: int = 4
    fs_hz: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if self.order < 1:
            raise ValueError(f"filter order must be >= 1, got {self.order}")
        if not 0 < self.cutoff_hz < self.fs_hz / 2:
            raise ValueError(f"cutoff {self.cutoff_hz} Hz must lie in (0, Nyquist={self.fs_hz / 2})")


def design_filter(spec: FilterSpec) -> np.ndarray:
    """Butterworth design as second-order sections, shape (n_sections, 6)."""
    return sps.butter(spec.order, spec.cutoff_hz, btype=spec.kind.value, fs=spec.fs_hz, output="sos")


def filter_padlen(sos: np.ndarray) -> int:
    # three filter lengths, matching the forward-backward convention
    return 3 * (2 * len(sos) + 1)


def apply_filter(x, sos: np.ndarray, zero_phase: bool = True, axis: int = 0) -> np.ndarray:
    """Causal filtering, or zero-phase forward-backward with mirror (even) reflection padding."""
    x = np.asarray(x, dtype=np.float64)
    if not zero_phase:
        return sps.sosfilt(sos, x, axis=axis)
    padlen = filter_padlen(sos)
    if x.shape[axis] <= padlen:
        raise ValueError(f"signal of length {x.shape[axis]} too short for padding {padlen}")
    fb = sps.sosfiltfilt(sos, x, axis=axis, padtype="even", padlen=padlen)
    # forward-backward and backward-forward differ only in edge transients;
    # their mean commutes exactly with time reversal
    rev = np.flip(sps.sosfiltfilt(sos, np.flip(x, axis=axis), axis=axis, padtype="even", padlen=padlen), axis=axis)
    return 0.5 * (fb + rev)


def power_envelope(x, fs: float = 1000.0, highpass_hz: float = 50.0, lowpass_hz: float = 10.0,
                   order: int = 4, literal_order: bool = False, axis: int = 0) -> np.ndarray:
    """Band power over time: low-pass of the squared high-passed signal.

    ``literal_order=True`` instead runs high-pass, low-pass, then squares;
    the two passbands do not overlap, so that output is close to zero.
    """
    hp = design_filter(FilterSpec(FilterKind.HIGHPASS, highpass_hz, order, fs))
    lp = design_filter(FilterSpec(FilterKind.LOWPASS, lowpass_hz, order, fs))
    y = apply_filter(x, hp, axis=axis)
    if literal_order:
        return np.square(apply_filter(y, lp, axis=axis))
    return apply_filter(np.square(y), lp, axis=axis)


# ---------------------------------------------------------------------------
# bootstrapped coherence statistics
# ---------------------------------------------------------------------------

TABLE2_COLUMNS = ("Participant", "Mean_Real", "Mean_Imag", "Abs_Mean_Diff",
                  "Std_Real", "Std_Imag", "Range_Real", "Range_Imag")


@dataclass(frozen=True)
class CohortStatsRow:
    participant_id: str
    mean_real: float
    mean_imag: float
    abs_mean_diff: float
    std_real: float
    std_imag: float
    range_real: float
    range_imag: float
    freqs_hz: np.ndarray = field(default=None, repr=False, compare=False)
    curve_real: np.ndarray = field(default=None, repr=False, compare=False)
    curve_imag: np.ndarray = field(default=None, repr=False, compare=False)

    def as_row(self) -> list:
        return [self.participant_id] + [f"{v:.4f}" for v in (
            self.mean_real, self.mean_imag, self.abs_mean_diff, self.std_real,
            self.std_imag, self.range_real, self.range_imag)]


def _bootstrap_distribution(data: np.ndarray, n_boot: int, rng: np.random.Generator,
                            nperseg: int, overlap_fraction: float):
    """Per-resample frequency-averaged coherence of resample-mean vs overall mean."""
    n_ep = data.shape[0]
    noverlap = int(nperseg * overlap_fraction)
    # (epochs, channels, segments, freqs); segment spectra are linear in the
    # signal so resampled means are weighted sums of these.
    S = _segments(np.moveaxis(data, 1, 2), nperseg, noverlap)
    full = S.mean(axis=0)
    flat = S.reshape(n_ep, -1)
    stats = np.empty(n_boot)
    curve = np.zeros(S.shape[-1])
    for b in range(n_boot):
        w = np.bincount(rng.integers(0, n_ep, n_ep), minlength=n_ep) / n_ep
        sb = (w @ flat).reshape(full.shape)
        coh, defined = _coherence_from_spectra(sb, full)
        per_freq = np.where(defined, coh, np.nan)
        stats[b] = np.nanmean(per_freq)
        curve += np.nan_to_num(np.nanmean(per_freq, axis=0)) if per_freq.ndim > 1 else np.nan_to_num(per_freq)
    return stats, curve / n_boot


def bootstrap_cohort_stats(real: EpochSet, imag: EpochSet, n_boot: int = 1000, seed: int = 0,
                           fs: float = 1000.0, nperseg: int = 256, overlap_fraction: float = 0.5,
                           participant_id: str | None = None) -> CohortStatsRow:
    """Bootstrap the coherence between resampled and full condition-mean signals.

    For each condition, epochs are resampled with replacement ``n_boot``
    times; each resample's mean signal is compared with the condition's
    overall mean signal via magnitude-squared coherence, averaged over
    channels and frequencies. The row reports mean, std and range of that
    distribution per condition and the absolute difference of the means.
    """
    if len(real) == 0 or len(imag) == 0:
        raise ValueError("both epoch sets must be non-empty")
    if real.n_channels != imag.n_channels:
        raise ValueError(f"channel mismatch: {real.n_channels} vs {imag.n_channels}")
    n = min(real.data.shape[1], imag.data.shape[1])
    if n_segments(n, nperseg, overlap_fraction) < 1:
        raise ValueError(f"epochs of {n} samples too short for nperseg={nperseg}")
    ss = np.random.SeedSequence(seed)
    rng_r, rng_i = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(2))
    dr, cr = _bootstrap_distribution(np.asarray(real.data[:, :n], np.float64), n_boot, rng_r, nperseg, overlap_fraction)
    di, ci = _bootstrap_distribution(np.asarray(imag.data[:, :n], np.float64), n_boot, rng_i, nperseg, overlap_fraction)
    mr, mi = float(dr.mean()), float(di.mean())
    return CohortStatsRow(
        participant_id if participant_id is not None else real.participant_id,
        mr, mi, abs(mr - mi),
        float(dr.std()), float(di.std()),
        float(dr.max() - dr.min()), float(di.max() - di.min()),
        np.arange(nperseg // 2 + 1) * fs / nperseg, cr, ci,
    )


def write_table2(rows: Sequence[CohortStatsRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE2_COLUMNS)
        for r in rows:
            w.writerow(r.as_row())
    return path
