"""
Spectral tour of one synthetic participant
==========================================

Generate a participant, look at its raw spectrum, then follow the
power-envelope preprocessing used by every classifier downstream.
"""

# %%
import numpy as np

from ecogscreen.dataset import extract_stimulus_epochs
from ecogscreen.spectral import (bootstrap_cohort_stats, coherence, dominant_frequencies, fft_magnitude,
                                 power_envelope, psd_welch)
from ecogscreen.synth import SynthConfig, generate_cohort

cfg = SynthConfig(deltas=(0.8,), events_per_condition=20, channels=8, active_channels=2, seed=1)
real, imag = generate_cohort(cfg)[0]
print(real.participant_id, real.voltages.shape, len(real.events), "events")

# %%
# The background is 1/f noise, so the PSD falls roughly a decade per decade.
# Gamma bursts add a bump between 70 and 110 Hz on the active channels.
psd = psd_welch(real.voltages[:, 0].astype(float), real.srate, nperseg=256)
for lo, hi in [(2, 10), (20, 40), (70, 110), (200, 400)]:
    band = (psd.freqs_hz >= lo) & (psd.freqs_hz < hi)
    print(f"{lo:>4}-{hi:<4} Hz  mean density {psd.values[band].mean():.3e}")

# %%
# Below ~50 Hz the 1/f slope wins every peak search, so look above it.
amp = fft_magnitude(real.voltages[:, 0].astype(float), real.srate)
print("dominant peaks (Hz):", dominant_frequencies(amp, 3), "| above 50 Hz:", dominant_frequencies(amp, 3, 50.0))

# %%
# Real and imagery runs share only the generator's statistics, not samples,
# so their coherence is low everywhere.
n = min(real.n_samples, imag.n_samples)
coh = coherence(real.voltages[:n, 0].astype(float), imag.voltages[:n, 0].astype(float), real.srate)
print(f"real/imagery coherence: mean {coh.values.mean():.3f}, max {coh.values.max():.3f}")

# %%
# Envelope = low-pass(square(high-pass(x))). Inside a burst it should jump.
env = power_envelope(real.voltages.astype(float), fs=real.srate)
ev = real.events[0]
inside = env[ev.t_on + 500:ev.t_off - 500, 0].mean()
outside = env[ev.t_on - 2500:ev.t_on - 500, 0].mean()
print(f"channel 0 envelope, burst / rest ratio: {inside / outside:.1f}")

# %%
# Bootstrapped coherence statistic, one row of the cohort table.
row = bootstrap_cohort_stats(extract_stimulus_epochs(real), extract_stimulus_epochs(imag), n_boot=200, seed=0)
print(f"mean real {row.mean_real:.4f}  mean imag {row.mean_imag:.4f}  |diff| {row.abs_mean_diff:.4f}")
