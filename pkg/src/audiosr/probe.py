"""Tonal-artifact analysis: zero-input response of upsampling models, spectral
peak detection, exact-periodicity detection, and spectrogram export."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from . import dsp
from .dsp import DEFAULT_STFT, PowerSpectrogram, Signal, SpectrogramParams


@dataclass
class ArtifactReport:
    """What an all-zero input excites in a model."""

    model_id: str
    probe_length: int
    sample_rate: int
    spectrogram: PowerSpectrogram
    peaks: list[tuple[float, float, float]]  # (freq_hz, mean_power_db, prominence_db)
    periodicity: int | None
    edge_power_db: tuple[float, float]  # mean dB power of first / last frame


def zero_input_probe(
    m,
    length: int = 16384,
    stft: SpectrogramParams = DEFAULT_STFT,
    sample_rate: int = 12000,
    peak_threshold_db: float = 20.0,
    max_period: int = 256,
) -> ArtifactReport:
    """Forward an all-zero signal in eval mode and characterize the output.

    ``length`` is the output length; the input is shortened by the model's
    upsampling ratio. Tonal peaks are bins whose time-mean power sits more than
    ``peak_threshold_db`` above the median bin power.
    """
    ratio = getattr(m, "upsample_ratio", None)
    if ratio is None:
        raise ValueError("zero-input probe needs a model exposing 'upsample_ratio'")
    if length < stft.frame_length:
        raise ValueError(
            f"probe length {length} shorter than one STFT frame ({stft.frame_length})"
        )
    if length % ratio != 0:
        raise ValueError(f"probe length {length} not divisible by upsample ratio {ratio}")
    in_len = length // ratio
    divisor = int(getattr(m, "length_divisor", 1))
    if in_len % divisor != 0:
        raise ValueError(f"probe input length {in_len} not divisible by {divisor}")

    with dg.no_grad():
        out = m.forward(dg.Tensor(np.zeros((1, 1, in_len))), training=False)
    samples = out.data[0, 0].astype(np.float64)
    if samples.shape[0] != length:
        raise ValueError(
            f"model produced {samples.shape[0]} samples for a {length}-sample probe"
        )

    sp = dsp.stft_power(Signal(samples, sample_rate), stft)
    mean_db = 10.0 * np.log10(sp.grid.mean(axis=0))
    median_db = float(np.median(mean_db))
    edge = (
        float(10.0 * np.log10(sp.grid[0].mean())),
        float(10.0 * np.log10(sp.grid[-1].mean())),
    )

    if np.max(np.abs(samples)) == 0.0:
        peaks: list[tuple[float, float, float]] = []
        period = None
    else:
        hot = np.nonzero(mean_db > median_db + peak_threshold_db)[0]
        peaks = [
            (float(sp.bin_freqs[b]), float(mean_db[b]), float(mean_db[b] - median_db))
            for b in hot
        ]
        peaks.sort(key=lambda t: t[2], reverse=True)
        period = _exact_period(samples, max_period)

    n_params = None
    if hasattr(m, "parameters"):
        n_params = sum(p.size for p in m.parameters())
    kind = getattr(m, "kind", type(m).__name__)
    model_id = f"{kind}-{n_params}p" if n_params is not None else str(kind)
    return ArtifactReport(
        model_id=model_id,
        probe_length=length,
        sample_rate=sample_rate,
        spectrogram=sp,
        peaks=peaks,
        periodicity=period,
        edge_power_db=edge,
    )


def _exact_period(x: np.ndarray, max_period: int) -> int | None:
    """Smallest p with x[t + p] == x[t] for all t, bit-exact; None if none."""
    for p in range(1, min(max_period, len(x) - 1) + 1):
        if np.array_equal(x[p:], x[:-p]):
            return p
    return None


def phase_shuffle(x, n: int, rng: np.random.Generator):
    """Shift each batch item's time axis by a uniform draw from [-n, n].

    Vacated samples are filled by reflection. Differentiable (pure gather).
    """
    x = dg.Tensor(x) if not isinstance(x, dg.Tensor) else x
    if x.ndim != 3:
        raise ValueError(f"phase_shuffle expects rank 3, got shape {x.shape}")
    if not isinstance(n, int) or n < 0:
        raise ValueError(f"shift bound must be an integer >= 0, got {n}")
    b, _, length = x.shape
    if n >= length:
        raise ValueError(f"shift bound {n} must be smaller than the time axis ({length})")
    if n == 0:
        return x
    shifts = rng.integers(-n, n + 1, size=b)
    base = np.arange(length)[None, :] - shifts[:, None]
    idx = np.abs(base)  # reflect at the left edge, no duplicated boundary sample
    idx = np.where(idx > length - 1, 2 * (length - 1) - idx, idx)
    return dg.take_time(x, idx)


def export_spectrogram(
    sp: PowerSpectrogram,
    path,
    fmt: str = "csv",
    db_floor: float = -100.0,
    db_ceiling: float = 0.0,
) -> None:
    """Write the spectrogram as dB values: CSV (frames x bins) or 8-bit PGM."""
    db = 10.0 * np.log10(sp.grid)
    if fmt == "csv":
        header = "frame_time_s," + ",".join(f"hz_{f:g}" for f in sp.bin_freqs)
        lines = [header]
        for t, row in zip(sp.frame_times, db):
            lines.append(f"{t:.6f}," + ",".join(f"{v:.4f}" for v in row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    elif fmt == "pgm":
        if not db_floor < db_ceiling:
            raise ValueError(
                f"degenerate dB scaling: floor {db_floor} must be below ceiling {db_ceiling}"
            )
        unit = np.clip((db - db_floor) / (db_ceiling - db_floor), 0.0, 1.0)
        gray = np.round(unit * 255.0).astype(np.uint8)
        image = gray.T[::-1]  # rows = bins (low freq at the bottom), cols = frames
        height, width = image.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            fh.write(image.tobytes())
    else:
        raise ValueError(f"format must be 'csv' or 'pgm', got {fmt!r}")


def write_report(report: ArtifactReport, path) -> None:
    """Human-readable probe summary: key/value lines plus a peak table."""
    p = report.spectrogram.params
    lines = [
        f"model: {report.model_id}",
        f"probe_length: {report.probe_length}",
        f"sample_rate: {report.sample_rate}",
        f"periodicity_samples: {report.periodicity if report.periodicity is not None else 'none'}",
        f"edge_frame_power_db: first={report.edge_power_db[0]:.2f} last={report.edge_power_db[1]:.2f}",
        f"stft: frame={p.frame_length} hop={p.hop} window={p.window} floor={p.power_floor!r}",
        f"peaks: {len(report.peaks)}",
        "freq_hz\tpower_db\tprominence_db",
    ]
    for freq, power, prom in report.peaks:
        lines.append(f"{freq:.2f}\t{power:.2f}\t{prom:.2f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
