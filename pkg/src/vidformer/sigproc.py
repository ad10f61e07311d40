"""BVP post-processing: filtering, peaks, HR, HRV, RF, SSIM and a green-channel baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage, signal
from scipy.interpolate import CubicSpline

from .config import ConfigError

log = logging.getLogger(__name__)

HR_BAND = (0.7, 3.0)
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.4)
RF_BAND = (0.1, 0.5)
MIN_PEAK_DISTANCE_S = 0.33
IBI_RESAMPLE_HZ = 4.0


class PeakDetectionError(RuntimeError):
    """Fewer than two usable beats in a waveform."""


@dataclass
class BvpWaveform:
    samples: np.ndarray
    rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1 or len(self.samples) < 2:
            raise ValueError("waveform must be 1-D with at least two samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.samples)) / self.rate

    def __len__(self):
        return len(self.samples)


@dataclass
class IbiSeries:
    peak_times: np.ndarray
    intervals: np.ndarray

    @classmethod
    def from_peaks(cls, peak_times) -> "IbiSeries":
        peak_times = np.asarray(peak_times, dtype=float)
        intervals = np.diff(peak_times)
        if np.any(intervals <= 0):
            raise ValueError("peak times must be strictly increasing")
        return cls(peak_times, intervals)

    @property
    def duration(self) -> float:
        return float(self.peak_times[-1] - self.peak_times[0]) if len(self.peak_times) else 0.0


class HrvMetrics(NamedTuple):
    lf_nu: float
    hf_nu: float
    ratio: float


class RfEstimate(NamedTuple):
    hz: float
    confident: bool


def bandpass(x, rate: float, lo: float = HR_BAND[0], hi: float = HR_BAND[1], order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass (second-order sections, forward-backward).

    Even (mirror) edge padding: odd padding plants spurious maxima near the ends.
    """
    if not 0 < lo < hi < rate / 2:
        raise ConfigError(f"invalid band [{lo}, {hi}] Hz at {rate} samples/s")
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=rate, output="sos")
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=float), padtype="even")


def _parabolic_offset(y: np.ndarray, i: int) -> float:
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2 * b + c
    return 0.0 if den == 0 else 0.5 * (a - c) / den


def detect_peaks(x, rate: float) -> IbiSeries:
    """Systolic peaks: band-pass, then local maxima above a 0.75 s rolling mean,
    at least ~0.33 s apart, refined to sub-sample position by a parabola."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2 * rate:
        raise PeakDetectionError(f"need at least 2 s of signal, got {len(x) / rate:.2f} s")
    if not np.all(np.isfinite(x)) or np.ptp(x) == 0:
        raise PeakDetectionError("flat or non-finite signal")
    f = bandpass(x, rate)
    if np.std(f) <= 1e-9 * np.std(x):
        raise PeakDetectionError("no in-band content")
    threshold = ndimage.uniform_filter1d(f, max(1, int(round(0.75 * rate))), mode="nearest")
    distance = max(1, int(round(MIN_PEAK_DISTANCE_S * rate)))
    idx, _ = signal.find_peaks(f, height=threshold, distance=distance)
    if len(idx) < 2:
        raise PeakDetectionError(f"found {len(idx)} peak(s)")
    times = np.array([(i + _parabolic_offset(f, i)) / rate for i in idx])
    return IbiSeries.from_peaks(times)


def mean_ibi(ibi: IbiSeries) -> float:
    """Mean inter-beat interval as the least-squares slope of peak time against beat index.

    Equal to the arithmetic mean for evenly spaced peaks, but less sensitive to
    jitter in the first and last peak positions.
    """
    n = len(ibi.peak_times)
    if n < 3:
        return float(ibi.intervals.mean())
    k = np.arange(n) - (n - 1) / 2
    return float(k @ ibi.peak_times / (k @ k))


def estimate_hr(x, rate: float) -> float:
    """Heart rate in bpm as 60 / mean inter-beat interval."""
    return 60.0 / mean_ibi(detect_peaks(x, rate))


def hr_confidence(x, rate: float) -> tuple[float, bool]:
    """HR plus a flag: confident when the spectrum has a clear in-band peak and IBIs are regular."""
    hr = estimate_hr(x, rate)
    f = bandpass(x, rate)
    freqs, psd = signal.periodogram(f, fs=rate, nfft=max(2048, len(f)))
    band = (freqs >= HR_BAND[0]) & (freqs <= HR_BAND[1])
    peak_fraction = psd[band].max() / max(psd[band].sum(), 1e-300)
    ibi = detect_peaks(x, rate).intervals
    cv = ibi.std() / ibi.mean()
    spectral_hr = 60.0 * freqs[band][np.argmax(psd[band])]
    confident = bool(cv < 0.15 and abs(spectral_hr - hr) < 0.1 * hr and peak_fraction > 0.02)
    return hr, confident


def _ibi_spectrum(ibi: IbiSeries) -> tuple[np.ndarray, np.ndarray]:
    if ibi.duration < 30.0:
        raise ValueError(f"need at least 30 s of inter-beat intervals, got {ibi.duration:.1f} s")
    t = ibi.peak_times[1:]
    grid = np.arange(t[0], t[-1], 1.0 / IBI_RESAMPLE_HZ)
    series = CubicSpline(t, ibi.intervals)(grid)
    series = signal.detrend(series, type="linear")
    freqs, psd = signal.periodogram(series, fs=IBI_RESAMPLE_HZ, window="hann", nfft=max(4096, len(series)))
    return freqs, psd


def _band_power(freqs, psd, band) -> float:
    sel = (freqs >= band[0]) & (freqs < band[1])
    return float(psd[sel].sum() * (freqs[1] - freqs[0]))


def hrv_metrics(ibi: IbiSeries) -> HrvMetrics:
    """Normalised LF/HF powers of the 4 Hz-resampled IBI series, and LF/HF."""
    freqs, psd = _ibi_spectrum(ibi)
    lf = _band_power(freqs, psd, LF_BAND)
    hf = _band_power(freqs, psd, HF_BAND)
    total = lf + hf
    if total <= 0:
        raise ValueError("no LF/HF power in the IBI series")
    lf_nu = lf / total
    return HrvMetrics(lf_nu, 1.0 - lf_nu, lf / hf if hf > 0 else float("inf"))


def estimate_rf(ibi: IbiSeries, prominence: float = 4.0) -> RfEstimate:
    """Frequency of the IBI-spectrum maximum in [0.1, 0.5] Hz.

    Flagged low-confidence when the maximum is under ``prominence`` times the band mean.
    """
    freqs, psd = _ibi_spectrum(ibi)
    sel = (freqs >= RF_BAND[0]) & (freqs <= RF_BAND[1])
    band_f, band_p = freqs[sel], psd[sel]
    i = int(np.argmax(band_p))
    mean = band_p.mean()
    # constant IBIs leave only round-off in the spectrum
    confident = bool(mean > 1e-20 and band_p[i] >= prominence * mean)
    return RfEstimate(float(band_f[i]), confident)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def ssim(a, b, data_range: float = 255.0) -> float:
    """Single-scale SSIM, 11-tap Gaussian window (sigma 1.5), averaged over valid window positions.

    Colour images (H, W, C) are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range) for c in range(a.shape[-1])]))
    w = _gaussian_window()
    pad = len(w) // 2
    if min(a.shape) < len(w):
        raise ValueError("images must be at least 11x11")

    def filt(img):
        out = ndimage.correlate1d(img, w, axis=0, mode="constant")
        out = ndimage.correlate1d(out, w, axis=1, mode="constant")
        return out[pad:-pad, pad:-pad]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def green_baseline(frames, mask, rate: float) -> np.ndarray:
    """Mean green over the mask per frame, minus a 1 s moving average, band-passed.

    ``frames`` is (T, H, W, 3); ``mask`` is (H, W) or per-frame (T, H, W).
    """
    frames = np.asarray(frames, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    green = frames[..., 1]
    if mask.ndim == 2:
        trace = green[:, mask].mean(axis=1)
    else:
        trace = np.array([g[m].mean() for g, m in zip(green, mask)])
    trend = ndimage.uniform_filter1d(trace, max(1, int(round(rate))), mode="nearest")
    return bandpass(trace - trend, rate)


def pearson_r(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def read_waveform_csv(path) -> BvpWaveform:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, v = data[:, 0], data[:, 1]
    if len(t) < 2:
        raise ValueError(f"{path}: need at least two samples")
    rate = 1.0 / np.median(np.diff(t))
    return BvpWaveform(v, float(round(rate, 6)))


def write_waveform_csv(path, samples, rate: float, value_name: str = "value") -> None:
    samples = np.asarray(samples, dtype=float)
    t = np.arange(len(samples)) / rate
    np.savetxt(path, np.column_stack([t, samples]), delimiter=",", header=f"time_s,{value_name}",
               comments="", fmt="%.9g")
