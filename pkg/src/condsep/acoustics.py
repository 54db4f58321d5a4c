"""Shoebox-room reverberation via the image source method.

A room is described by its dimensions and a target RT60; the RT60 is turned
into a uniform wall absorption with Sabine's formula, and the impulse
response from a source to the (centered) microphone is built from mirrored
image sources. Rendering a source is then a plain convolution truncated to
the clip length.

All operations are pure given an explicit rng, so RIR synthesis parallelizes
across mixtures with no coordination.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .signals import Waveform

SPEED_OF_SOUND = 343.0  # m/s
MIC_HEIGHT = 1.5  # m, fixed; the floor-plan position is the room center
DEFAULT_MAX_ORDER = 17
FRAC_DELAY_HALF_WIDTH = 40  # taps on each side of the windowed-sinc kernel
SABINE_COEFF = 0.161
ABSORPTION_CLAMP = 0.99


class PlacementError(RuntimeError):
    """Source placement ranges are inconsistent with the room geometry."""


@dataclass(frozen=True)
class RoomSpec:
    """Rectangular room with a centered single microphone."""

    length: float
    width: float
    height: float
    rt60: float
    mic_position: tuple[float, float, float]

    def __post_init__(self) -> None:
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("room dimensions must be positive")
        if self.rt60 <= 0:
            raise ValueError("rt60 must be positive")
        if not self.contains(self.mic_position):
            raise ValueError("microphone must be inside the room")

    @classmethod
    def with_centered_mic(
        cls, length: float, width: float, height: float, rt60: float
    ) -> "RoomSpec":
        return cls(length, width, height, rt60, (length / 2.0, width / 2.0, MIC_HEIGHT))

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface_area(self) -> float:
        return 2.0 * (
            self.length * self.width
            + self.length * self.height
            + self.width * self.height
        )

    def contains(self, point: tuple[float, float, float], margin: float = 0.0) -> bool:
        x, y, z = point
        return (
            margin < x < self.length - margin
            and margin < y < self.width - margin
            and margin < z < self.height - margin
        )


@dataclass(frozen=True)
class SourcePlacement:
    """A source position expressed relative to the microphone."""

    field_class: str  # "near" or "far"
    distance: float  # horizontal mic-to-source distance, meters
    azimuth: float  # radians
    source_height: float  # meters
    position: tuple[float, float, float]

    def __post_init__(self) -> None:
        if self.field_class not in ("near", "far"):
            raise ValueError(f"field_class must be 'near' or 'far', got {self.field_class!r}")
        if self.distance <= 0:
            raise ValueError("distance must be positive")


@dataclass(frozen=True)
class RIR:
    """Finite impulse response from one source position to the microphone."""

    taps: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        taps = np.asarray(self.taps, dtype=np.float64)
        if not np.all(np.isfinite(taps)):
            raise ValueError("RIR taps must be finite")
        object.__setattr__(self, "taps", taps)


def sabine_absorption(room: RoomSpec) -> float:
    """Uniform wall absorption matching the requested RT60.

    Clamped just below 1 when the room is too small for the requested decay;
    a warning records the clamp.
    """
    alpha = SABINE_COEFF * room.volume / (room.surface_area * room.rt60)
    if alpha >= 1.0:
        warnings.warn(
            f"rt60={room.rt60:.3f}s is unattainably short for this room; "
            f"clamping absorption from {alpha:.3f} to {ABSORPTION_CLAMP}",
            stacklevel=2,
        )
        return ABSORPTION_CLAMP
    return alpha


def _image_coords_1d(source: float, dim: float, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """1-D image coordinates and their wall-hit counts up to max_order."""
    coords = [source]
    hits = [0]
    for k in range(1, max_order + 1):
        if k % 2 == 0:
            n = k // 2
            coords.extend([2 * n * dim + source, -2 * n * dim + source])
        else:
            n_pos = (k + 1) // 2
            n_neg = (1 - k) // 2
            coords.extend([2 * n_pos * dim - source, 2 * n_neg * dim - source])
        hits.extend([k, k])
    return np.asarray(coords), np.asarray(hits)


def image_source_rir(
    room: RoomSpec,
    src: SourcePlacement,
    max_order: int = DEFAULT_MAX_ORDER,
    fs: int = 8000,
    highpass_hz: float = 20.0,
) -> RIR:
    """Impulse response built from image sources up to ``max_order`` reflections.

    Each image at distance d with k wall hits contributes an impulse of
    amplitude (1 - absorption)^(k/2) / (4*pi*d) at delay d / 343 s, placed
    with a Hann-windowed-sinc fractional-delay kernel.
    """
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    if not room.contains(src.position):
        raise ValueError("source must be inside the room")
    alpha = sabine_absorption(room)
    reflect = math.sqrt(1.0 - alpha)

    mic = np.asarray(room.mic_position)
    sx, hx = _image_coords_1d(src.position[0], room.length, max_order)
    sy, hy = _image_coords_1d(src.position[1], room.width, max_order)
    sz, hz = _image_coords_1d(src.position[2], room.height, max_order)

    # all (x, y, z) image combinations with total hit count <= max_order
    gx, gy, gz = np.meshgrid(np.arange(sx.size), np.arange(sy.size), np.arange(sz.size), indexing="ij")
    total_hits = hx[gx] + hy[gy] + hz[gz]
    keep = total_hits <= max_order
    px = sx[gx[keep]] - mic[0]
    py = sy[gy[keep]] - mic[1]
    pz = sz[gz[keep]] - mic[2]
    hits = total_hits[keep]

    dist = np.sqrt(px * px + py * py + pz * pz)
    dist = np.maximum(dist, 1e-6)
    amps = reflect**hits / (4.0 * math.pi * dist)
    delays = dist / SPEED_OF_SOUND * fs

    half = FRAC_DELAY_HALF_WIDTH
    n_taps = int(np.ceil(delays.max())) + half + 2
    taps = np.zeros(n_taps, dtype=np.float64)
    # windowed-sinc kernels, vectorized over images
    centers = np.round(delays).astype(np.int64)
    offsets = np.arange(-half, half + 1)
    positions = centers[:, None] + offsets[None, :]
    t = positions - delays[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * t / (half + 1)))
    window[np.abs(t) > half + 1] = 0.0
    kernels = amps[:, None] * np.sinc(t) * window
    valid = positions >= 0
    np.add.at(taps, positions[valid], kernels[valid])

    if highpass_hz > 0:
        sos = butter(2, highpass_hz / (fs / 2.0), btype="highpass", output="sos")
        taps = sosfilt(sos, taps)
    return RIR(taps, fs)


def place_source(
    room: RoomSpec,
    field_class: str,
    distance_range: tuple[float, float],
    height_range: tuple[float, float],
    rng: np.random.Generator,
    max_rejections: int = 100,
) -> SourcePlacement:
    """Draw a source position uniformly in distance, azimuth, and height.

    Out-of-room draws are rejected and resampled; persistent rejection means
    the configured ranges do not fit the room.
    """
    mic = room.mic_position
    for _ in range(max_rejections + 1):
        distance = float(rng.uniform(*distance_range))
        azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
        height = float(rng.uniform(*height_range))
        position = (
            mic[0] + distance * math.cos(azimuth),
            mic[1] + distance * math.sin(azimuth),
            height,
        )
        if room.contains(position, margin=1e-3):
            return SourcePlacement(field_class, distance, azimuth, height, position)
    raise PlacementError(
        f"could not place a {field_class}-field source inside the room after "
        f"{max_rejections} attempts; check distance/height ranges against room size"
    )


def spatialize(w: Waveform, rir: RIR) -> Waveform:
    """Render a source through an RIR; output keeps the input length."""
    if rir.sample_rate != w.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: waveform {w.sample_rate} Hz vs RIR {rir.sample_rate} Hz"
        )
    wet = fftconvolve(w.samples, rir.taps)[: len(w)]
    return Waveform(wet, w.sample_rate)


def schroeder_t60(
    rir: RIR,
    fit_db: tuple[float, float] = (0.0, -10.0),
    exclude_direct: bool = True,
) -> float:
    """Estimate T60 by backward integration of the squared impulse response.

    The direct arrival is excluded by default so the estimate describes the
    reverberant-field decay: everything through the strongest tap plus 2.5 ms
    is dropped before integrating. A line is fit to the decay curve between
    ``fit_db`` levels and extrapolated to -60 dB (the default window is the
    early-decay slope, which tracks the Sabine target best in flat rooms
    whose late tail is dominated by in-plane reflections).
    """
    taps = rir.taps
    if exclude_direct:
        cut = int(np.argmax(np.abs(taps))) + int(0.0025 * rir.sample_rate)
        taps = taps[cut:]
    h2 = taps**2
    edc = np.cumsum(h2[::-1])[::-1]
    if edc[0] <= 0:
        raise ValueError("RIR has no reverberant energy")
    edc = edc / edc[0]
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(np.maximum(edc, 1e-30))
    hi, lo = fit_db
    idx = np.flatnonzero((edc_db <= hi) & (edc_db >= lo))
    if idx.size < 2:
        raise ValueError("decay range too short to fit; increase max_order")
    t = idx / rir.sample_rate
    slope, _ = np.polyfit(t, edc_db[idx], 1)
    if slope >= 0:
        raise ValueError("non-decaying energy curve")
    return -60.0 / slope


class RirCache:
    """Directory of raw float32 tap files keyed by the RIR's parameters."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(room: RoomSpec, src: SourcePlacement, max_order: int, fs: int) -> str:
        payload = "|".join(
            [
                f"{room.length!r},{room.width!r},{room.height!r},{room.rt60!r}",
                ",".join(repr(v) for v in room.mic_position),
                src.field_class,
                f"{src.distance!r},{src.azimuth!r},{src.source_height!r}",
                ",".join(repr(v) for v in src.position),
                str(max_order),
                str(fs),
            ]
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.f32"

    def get(self, room: RoomSpec, src: SourcePlacement, max_order: int, fs: int) -> RIR | None:
        path = self._path(self.key(room, src, max_order, fs))
        if not path.exists():
            return None
        taps = np.fromfile(path, dtype=np.float32).astype(np.float64)
        return RIR(taps, fs)

    def put(self, room: RoomSpec, src: SourcePlacement, max_order: int, fs: int, rir: RIR) -> Path:
        path = self._path(self.key(room, src, max_order, fs))
        rir.taps.astype(np.float32).tofile(path)
        return path

    def get_or_render(
        self, room: RoomSpec, src: SourcePlacement, max_order: int, fs: int
    ) -> RIR:
        hit = self.get(room, src, max_order, fs)
        if hit is not None:
            return hit
        rir = image_source_rir(room, src, max_order, fs)
        self.put(room, src, max_order, fs, rir)
        # return the float32 round-trip so cache hits and misses are bit-identical
        return RIR(rir.taps.astype(np.float32).astype(np.float64), fs)
