"""Fixed-rate waveforms, energy/SNR arithmetic, SI-SDR, and mixture projection.

Everything downstream (room rendering, mixture sampling, separation models,
evaluation) moves audio around as :class:`Waveform` objects. All functions
here are pure: they never mutate their inputs and hold no state, so they are
safe to call from any number of concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 8000
DEFAULT_CLIP_SECONDS = 4.0
DEFAULT_CLIP_SAMPLES = int(DEFAULT_CLIP_SECONDS * DEFAULT_SAMPLE_RATE)


class ZeroEnergyError(ValueError):
    """A silent clip was used where signal energy is required."""


@dataclass(frozen=True, eq=False)
class Waveform:
    """Single-channel time-domain signal at a fixed sample rate.

    Samples are stored as float64. All samples must be finite; mixtures
    require their constituents to share both length and rate.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def scaled(self, gain: float) -> "Waveform":
        return Waveform(self.samples * gain, self.sample_rate)


def _check_compatible(*waves: Waveform) -> None:
    first = waves[0]
    for w in waves[1:]:
        if len(w) != len(first) or w.sample_rate != first.sample_rate:
            raise ValueError(
                "waveforms must share length and sample rate: "
                f"({len(first)}, {first.sample_rate}) vs ({len(w)}, {w.sample_rate})"
            )


def energy(w: Waveform) -> float:
    """Total energy: sum of squared samples."""
    return float(np.dot(w.samples, w.samples))


def rescale_to_snr(reference: Waveform, other: Waveform, snr_db: float) -> Waveform:
    """Scale ``other`` so the reference-to-other energy ratio is ``snr_db``.

    Returns g * other with 10*log10(energy(reference) / energy(g*other))
    equal to ``snr_db``.
    """
    e_ref = energy(reference)
    e_other = energy(other)
    if e_ref <= 0.0:
        raise ZeroEnergyError("reference clip has zero energy")
    if e_other <= 0.0:
        raise ZeroEnergyError("clip to rescale has zero energy")
    gain = math.sqrt(e_ref / (e_other * 10.0 ** (snr_db / 10.0)))
    return other.scaled(gain)


def measure_snr(reference: Waveform, other: Waveform) -> float:
    """Energy ratio in dB between two already-scaled clips."""
    e_ref = energy(reference)
    e_other = energy(other)
    if e_ref <= 0.0 or e_other <= 0.0:
        raise ZeroEnergyError("cannot measure SNR against a silent clip")
    return 10.0 * math.log10(e_ref / e_other)


def si_sdr(estimate: Waveform, reference: Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The reference is rescaled by the optimal gain alpha = <est, ref>/||ref||^2
    before computing the log power ratio, making the metric invariant to any
    nonzero scaling of the estimate. A zero residual returns +inf; an estimate
    orthogonal to the reference returns -inf.
    """
    _check_compatible(estimate, reference)
    ref = reference.samples
    est = estimate.samples
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0.0:
        raise ZeroEnergyError(
            "SI-SDR is undefined for a zero reference; score zero-target "
            "mixtures through the non-target slot instead"
        )
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = target - est
    target_power = float(np.dot(target, target))
    residual_power = float(np.dot(residual, residual))
    if residual_power == 0.0:
        return math.inf
    if target_power == 0.0:
        return -math.inf
    return 10.0 * math.log10(target_power / residual_power)


def mixture_consistency_project(
    est_target: Waveform, est_other: Waveform, mixture: Waveform
) -> tuple[Waveform, Waveform]:
    """Split the reconstruction residual equally so the pair sums to the mixture."""
    _check_compatible(est_target, est_other, mixture)
    residual = mixture.samples - (est_target.samples + est_other.samples)
    half = 0.5 * residual
    return (
        Waveform(est_target.samples + half, mixture.sample_rate),
        Waveform(est_other.samples + half, mixture.sample_rate),
    )


def read_wav(path: str | Path) -> Waveform:
    """Read a single-channel WAV file (16-bit int or 32-bit float).

    Integer samples are normalized to [-1, 1) by dividing by 32768.
    """
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected single-channel audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(
            f"{path}: unsupported WAV sample format {data.dtype}; "
            "use 16-bit integer or 32-bit float"
        )
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, w: Waveform, dtype: str = "float32") -> None:
    """Write a waveform as a single-channel WAV file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if dtype == "float32":
        wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))
    elif dtype == "int16":
        clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(str(path), w.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ValueError(f"unsupported WAV dtype {dtype!r}; use 'float32' or 'int16'")
