"""Periodogram-based spectral tools: PSD, heart-rate-band masking, HR readout.

The PSD is a plain zero-padded periodogram of the mean-subtracted signal
(no window, no Welch averaging), one-sided with the DC bin dropped, scaled
so that at pad factor 1 the total power equals N times the signal variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Assumed heart-rate band, 40 to 250 beats per minute, in Hz.
BPM_BAND = (40.0 / 60.0, 250.0 / 60.0)

# Zero-padding defaults: finer grid for HR readout, 2x inside loss functions.
HR_PAD_FACTOR = 8
LOSS_PAD_FACTOR = 2


class NoInBandSignal(ValueError):
    """The masked spectrum carries no power inside the heart-rate band."""


@dataclass(frozen=True)
class PpgSignal:
    """A 1-D pulse time series with its sampling rate in Hz."""

    samples: np.ndarray
    fs: float

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size < 2:
            raise ValueError("signal needs at least 2 samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal contains non-finite samples")
        if not self.fs > 0:
            raise ValueError("sampling rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs


@dataclass(frozen=True)
class Psd:
    """One-sided power spectrum on a uniform bin grid with an HR band."""

    power: np.ndarray
    freqs: np.ndarray
    bin_hz: float
    band: tuple[float, float] = BPM_BAND

    def in_band(self) -> np.ndarray:
        lo, hi = self.band
        return (self.freqs >= lo) & (self.freqs <= hi)

    @property
    def total_power(self) -> float:
        return float(self.power.sum())

    @property
    def in_band_power(self) -> float:
        return float(self.power[self.in_band()].sum())


def power_spectrum(x: np.ndarray, fs: float, pad_factor: int):
    """Core periodogram: returns (power, freqs, complex one-sided spectrum).

    The complex spectrum is exposed for loss gradients that need the FFT
    internals; `power[k] = c_k |X_k|^2` with `c_k = 2/m` on interior bins and
    `1/m` on the Nyquist bin, DC dropped.
    """
    if pad_factor < 1:
        raise ValueError("pad_factor must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    m = n * int(pad_factor)
    centered = x - x.mean()
    spec = np.fft.rfft(centered, m)
    power = np.abs(spec) ** 2 * (2.0 / m)
    if m % 2 == 0:
        power[-1] *= 0.5
    freqs = np.arange(1, power.size) * (fs / m)
    return power[1:], freqs, spec


def psd(signal: PpgSignal, pad_factor: int = HR_PAD_FACTOR) -> Psd:
    """Zero-padded periodogram of the mean-subtracted signal.

    A constant signal yields an all-zero spectrum; callers that divide by the
    total power must handle that case.
    """
    power, freqs, _ = power_spectrum(signal.samples, signal.fs, pad_factor)
    return Psd(power=power, freqs=freqs, bin_hz=signal.fs / (pad_factor * len(signal)))


def band_mask(spectrum: Psd) -> Psd:
    """Zero every bin strictly outside the HR band; boundary bins are kept."""
    power = spectrum.power.copy()
    power[~spectrum.in_band()] = 0.0
    return Psd(power=power, freqs=spectrum.freqs, bin_hz=spectrum.bin_hz, band=spectrum.band)


def estimate_hr(signal: PpgSignal, pad_factor: int = HR_PAD_FACTOR) -> float:
    """Heart rate in bpm: 60x the frequency of the strongest in-band bin.

    Ties break toward the lower frequency.  Raises :class:`NoInBandSignal`
    when the masked spectrum is empty (e.g. a constant input).
    """
    masked = band_mask(psd(signal, pad_factor))
    if masked.total_power <= 0.0:
        raise NoInBandSignal("no in-band signal")
    k = int(np.argmax(masked.power))
    return float(60.0 * masked.freqs[k])
