"""Deterministic signal processing: anti-alias filtering, decimation,
spline upsampling, and STFT power spectrograms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import sosfilt


@dataclass(frozen=True)
class Signal:
    """Mono amplitude sequence with a sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"signal must be 1-D, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("signal contains non-finite values")
        if not float(self.sample_rate).is_integer() or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order IIR sections (b0, b1, b2, a1, a2), a0 normalized to 1."""

    sections: tuple[tuple[float, float, float, float, float], ...]

    def __post_init__(self):
        if not self.sections:
            raise ValueError("cascade needs at least one section")
        for i, sec in enumerate(self.sections):
            if len(sec) != 5:
                raise ValueError(f"section {i} must be (b0, b1, b2, a1, a2)")
            b0, b1, b2, a1, a2 = (float(v) for v in sec)
            # stability triangle for z^2 + a1 z + a2
            if not (abs(a2) < 1.0 and abs(a1) < 1.0 + a2):
                raise ValueError(f"section {i} is unstable: a1={a1}, a2={a2}")
        object.__setattr__(
            self, "sections", tuple(tuple(float(v) for v in s) for s in self.sections)
        )

    @property
    def order(self) -> int:
        return 2 * len(self.sections)

    def pole_magnitudes(self) -> np.ndarray:
        """|pole| for every section, flattened."""
        mags = []
        for _, _, _, a1, a2 in self.sections:
            mags.extend(abs(r) for r in np.roots([1.0, a1, a2]))
        return np.asarray(mags)

    def response(self, freq_ratio) -> np.ndarray:
        """Complex frequency response at frequencies given as a ratio of Nyquist."""
        w = np.pi * np.asarray(freq_ratio, dtype=np.float64)
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h

    def as_sos(self) -> np.ndarray:
        """(n, 6) second-order-section matrix [b0, b1, b2, 1, a1, a2]."""
        return np.array([[b0, b1, b2, 1.0, a1, a2] for b0, b1, b2, a1, a2 in self.sections])


def design_butterworth_lowpass(order: int, cutoff_ratio: float) -> BiquadCascade:
    """Even-order Butterworth lowpass as a biquad cascade.

    The analog prototype is mapped by the bilinear transform with the cutoff
    pre-warped, so the half-power point lands exactly at ``cutoff_ratio``
    (expressed as a fraction of Nyquist).
    """
    if order <= 0 or order % 2 != 0:
        raise ValueError(f"order must be a positive even integer, got {order}")
    if not 0.0 < cutoff_ratio < 1.0:
        raise ValueError(f"cutoff_ratio must lie in (0, 1), got {cutoff_ratio}")
    wc = math.tan(math.pi * cutoff_ratio / 2.0)  # pre-warped analog cutoff
    wc2 = wc * wc
    sections = []
    for k in range(order // 2):
        # analog pair: wc^2 / (s^2 + 2 wc sin(psi) s + wc^2)
        psi = math.pi * (2 * k + 1) / (2 * order)
        a = 2.0 * wc * math.sin(psi)
        a0 = 1.0 + a + wc2
        b0 = wc2 / a0
        sections.append((b0, 2.0 * b0, b0, (2.0 * wc2 - 2.0) / a0, (1.0 - a + wc2) / a0))
    return BiquadCascade(tuple(sections))


def apply_filter(cascade: BiquadCascade, s: Signal) -> Signal:
    """Causal single-pass filtering from rest; length and rate are preserved."""
    if len(s) == 0:
        raise ValueError("cannot filter an empty signal")
    y = sosfilt(cascade.as_sos(), s.samples)
    return Signal(y, s.sample_rate)


def downsample(s: Signal, factor: int) -> Signal:
    """Anti-alias with an order-8 Butterworth at the new Nyquist, then decimate.

    Keeps every ``factor``-th sample starting at index 0; output length is
    floor(len/factor).
    """
    if not float(factor).is_integer() or factor < 2:
        raise ValueError(f"downsample factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    if len(s) < factor:
        raise ValueError(f"signal of length {len(s)} too short for factor {factor}")
    if s.sample_rate % factor != 0:
        raise ValueError(
            f"sample rate {s.sample_rate} is not divisible by factor {factor}"
        )
    cascade = design_butterworth_lowpass(8, 1.0 / factor)
    filtered = apply_filter(cascade, s)
    kept = filtered.samples[::factor][: len(s) // factor].copy()
    return Signal(kept, s.sample_rate // factor)


def spline_upsample(s: Signal, factor: int) -> Signal:
    """Natural cubic spline interpolation onto a grid ``factor`` times denser.

    Original samples are preserved exactly on the coarse grid; points past the
    last knot evaluate the final spline segment.
    """
    if not float(factor).is_integer() or factor < 2:
        raise ValueError(f"upsample factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    n = len(s)
    if n < 4:
        raise ValueError(f"spline upsampling needs at least 4 samples, got {n}")
    spline = CubicSpline(np.arange(n), s.samples, bc_type="natural")
    t = np.arange(n * factor, dtype=np.float64) / factor
    out = spline(t)
    out[::factor] = s.samples  # keep on-grid values bit-exact
    return Signal(out, s.sample_rate * factor)


@dataclass(frozen=True)
class SpectrogramParams:
    """STFT configuration used by metrics and the artifact probe."""

    frame_length: int = 2048
    hop: int = 512
    window: str = "hann"
    power_floor: float = 1e-10

    def __post_init__(self):
        if self.frame_length <= 0 or self.frame_length % 2 != 0:
            raise ValueError(f"frame_length must be a positive even int, got {self.frame_length}")
        if not 0 < self.hop <= self.frame_length:
            raise ValueError(f"hop must satisfy 0 < hop <= frame_length, got {self.hop}")
        if self.window not in ("hann", "rectangular"):
            raise ValueError(f"window must be 'hann' or 'rectangular', got {self.window!r}")
        if not self.power_floor > 0:
            raise ValueError(f"power_floor must be > 0, got {self.power_floor}")

    @property
    def n_bins(self) -> int:
        return self.frame_length // 2 + 1

    def window_array(self) -> np.ndarray:
        n = self.frame_length
        if self.window == "hann":
            # periodic Hann, exact mainlobe for bin-centered tones
            return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
        return np.ones(n)


DEFAULT_STFT = SpectrogramParams()


@dataclass(frozen=True)
class PowerSpectrogram:
    """W x K grid of power values, clamped below at the configured floor."""

    grid: np.ndarray
    frame_times: np.ndarray
    bin_freqs: np.ndarray
    params: SpectrogramParams

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2:
            raise ValueError(f"grid must be 2-D (frames x bins), got shape {g.shape}")
        if g.shape != (len(self.frame_times), len(self.bin_freqs)):
            raise ValueError("grid shape does not match its axes")
        object.__setattr__(self, "grid", g)

    @property
    def n_frames(self) -> int:
        return self.grid.shape[0]

    @property
    def n_bins(self) -> int:
        return self.grid.shape[1]


def stft_power(s: Signal, p: SpectrogramParams = DEFAULT_STFT) -> PowerSpectrogram:
    """Windowed real-FFT power per frame; W = 1 + floor((len - frame)/hop)."""
    n = len(s)
    if n < p.frame_length:
        raise ValueError(
            f"signal of length {n} shorter than one frame ({p.frame_length})"
        )
    n_frames = 1 + (n - p.frame_length) // p.hop
    starts = np.arange(n_frames) * p.hop
    idx = starts[:, None] + np.arange(p.frame_length)[None, :]
    segments = s.samples[idx] * p.window_array()
    spectrum = np.fft.rfft(segments, axis=1)
    power = np.maximum(np.abs(spectrum) ** 2, p.power_floor)
    frame_times = (starts + p.frame_length / 2.0) / s.sample_rate
    bin_freqs = np.arange(p.n_bins) * s.sample_rate / p.frame_length
    return PowerSpectrogram(power, frame_times, bin_freqs, p)
