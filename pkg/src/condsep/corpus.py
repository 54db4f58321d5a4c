"""Corpus manifests and a self-contained synthetic toy corpus.

Real collections (WSJ-, SLIB-, SVOX-style) are referenced only through
JSON-lines manifests prepared outside this package; no corpus audio is ever
redistributed. The toy corpus synthesizes pseudo-speech deterministically
from seeds, so the full pipeline runs with zero external data: every clip is
a harmonic-plus-noise signal whose gender (fundamental frequency band) and
language (spectral envelope template) are ground truth by construction.
"""

from __future__ import annotations

import functools
import json
import math
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .conditions import Condition
from .signals import DEFAULT_SAMPLE_RATE, Waveform, read_wav, write_wav

MANIFEST_SCHEMA_VERSION = 1
MIN_CLIP_SECONDS = 4.0

GENDERS = ("female", "male")
LANGUAGES = ("en", "fr", "de", "es")
F0_RANGES = {"female": (165.0, 255.0), "male": (85.0, 155.0)}
SYLLABIC_RATE_RANGE = (2.0, 8.0)
# one fixed spectral-envelope template per language: gaussian bump center/width in Hz
LANGUAGE_ENVELOPES = {
    "en": (500.0, 260.0),
    "fr": (1300.0, 280.0),
    "de": (2100.0, 300.0),
    "es": (2900.0, 320.0),
}
SVOX_LANGUAGE_MIX = {"en": 0.53, "fr": 0.15, "de": 0.16, "es": 0.16}


class ManifestError(ValueError):
    """A manifest file or record violates the corpus schema."""


@dataclass(frozen=True)
class SourceRecord:
    """One clean single-speaker clip plus the metadata needed to condition on it."""

    record_id: str
    audio_ref: str
    speaker_id: str
    gender: str | None
    language: str | None
    duration: float

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "audio_ref": self.audio_ref,
            "speaker_id": self.speaker_id,
            "gender": self.gender,
            "language": self.language,
            "duration": self.duration,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SourceRecord":
        try:
            return cls(
                record_id=str(obj["record_id"]),
                audio_ref=str(obj["audio_ref"]),
                speaker_id=str(obj["speaker_id"]),
                gender=obj.get("gender"),
                language=obj.get("language"),
                duration=float(obj["duration"]),
            )
        except KeyError as exc:
            raise ManifestError(f"record missing required key {exc}") from exc


@dataclass(frozen=True)
class RoomRanges:
    """Uniform sampling ranges for shoebox rooms and source placement."""

    length: tuple[float, float]
    width: tuple[float, float]
    height: tuple[float, float]
    rt60: tuple[float, float]
    source_height: tuple[float, float]
    near_distance: tuple[float, float]
    far_distance: tuple[float, float]


@dataclass(frozen=True)
class DomainSpec:
    """One data collection: which conditions it supports and how it is rendered."""

    name: str
    conditions: frozenset[Condition]
    reverberant: bool = False
    room: RoomRanges | None = None
    language_mix: dict[str, float] | None = None

    def __post_init__(self) -> None:
        if self.reverberant and self.room is None:
            raise ValueError(f"reverberant domain {self.name} needs room ranges")
        if Condition.SPATIAL in self.conditions and not self.reverberant:
            raise ValueError(f"domain {self.name}: spatial conditioning needs reverberation")

    def required_record_fields(self) -> tuple[str, ...]:
        fields = []
        if Condition.GENDER in self.conditions:
            fields.append("gender")
        if Condition.LANGUAGE in self.conditions:
            fields.append("language")
        return tuple(fields)


_SLIB_ROOMS = RoomRanges(
    length=(9.0, 11.0),
    width=(9.0, 11.0),
    height=(2.6, 3.5),
    rt60=(0.3, 0.6),
    source_height=(1.5, 2.0),
    near_distance=(0.2, 0.6),
    far_distance=(1.7, 3.0),
)
_SVOX_ROOMS = RoomRanges(
    length=(8.0, 10.0),
    width=(8.0, 10.0),
    height=(2.75, 3.25),
    rt60=(0.4, 0.6),
    source_height=(1.6, 1.9),
    near_distance=(0.3, 0.5),
    far_distance=(1.5, 2.5),
)


def wsj_domain() -> DomainSpec:
    return DomainSpec(
        name="WSJ",
        conditions=frozenset({Condition.ENERGY, Condition.GENDER}),
    )


def slib_domain() -> DomainSpec:
    return DomainSpec(
        name="SLIB",
        conditions=frozenset({Condition.ENERGY, Condition.GENDER, Condition.SPATIAL}),
        reverberant=True,
        room=_SLIB_ROOMS,
    )


def svox_domain() -> DomainSpec:
    return DomainSpec(
        name="SVOX",
        conditions=frozenset({Condition.ENERGY, Condition.LANGUAGE, Condition.SPATIAL}),
        reverberant=True,
        room=_SVOX_ROOMS,
        language_mix=dict(SVOX_LANGUAGE_MIX),
    )


def toy_domain(reverberant: bool = False, spatial: bool | None = None) -> DomainSpec:
    """Synthetic domain carrying every condition its rendering supports."""
    spatial = reverberant if spatial is None else spatial
    conditions = {Condition.ENERGY, Condition.GENDER, Condition.LANGUAGE}
    if spatial:
        conditions.add(Condition.SPATIAL)
    return DomainSpec(
        name="TOY",
        conditions=frozenset(conditions),
        reverberant=reverberant,
        room=_SLIB_ROOMS if reverberant else None,
        language_mix=dict(SVOX_LANGUAGE_MIX),
    )


BUILTIN_DOMAINS = {
    "WSJ": wsj_domain,
    "SLIB": slib_domain,
    "SVOX": svox_domain,
    "TOY": toy_domain,
}

# Published per-partition (recordings, speakers) counts for the real
# collections; checked only when such a manifest is actually supplied.
EXPECTED_COUNTS = {
    ("WSJ", "train"): (8769, 101),
    ("WSJ", "val"): (3557, 101),
    ("WSJ", "test"): (1770, 18),
    ("SLIB", "train"): (132553, 1172),
    ("SLIB", "val"): (2703, 40),
    ("SLIB", "test"): (2620, 40),
    ("SVOX", "train"): (124937, 2347),
    ("SVOX", "val"): (10244, 279),
    ("SVOX", "test"): (11083, 294),
}


@dataclass
class Manifest:
    domain: DomainSpec
    partition: str
    records: list[SourceRecord]

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        required = self.domain.required_record_fields()
        for rec in self.records:
            if rec.record_id in seen:
                raise ManifestError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)
            for name in required:
                if getattr(rec, name) is None:
                    raise ManifestError(
                        f"record {rec.record_id!r}: missing {name!r}, required by "
                        f"domain {self.domain.name}"
                    )
            if rec.gender is not None and rec.gender not in GENDERS:
                raise ManifestError(f"record {rec.record_id!r}: unknown gender {rec.gender!r}")
            if rec.language is not None and rec.language not in LANGUAGES:
                raise ManifestError(
                    f"record {rec.record_id!r}: unknown language {rec.language!r}"
                )
            if rec.duration < MIN_CLIP_SECONDS:
                raise ManifestError(
                    f"record {rec.record_id!r}: duration {rec.duration}s is below the "
                    f"{MIN_CLIP_SECONDS}s minimum"
                )

    @property
    def speakers(self) -> set[str]:
        return {r.speaker_id for r in self.records}


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "domain": manifest.domain.name,
            "partition": manifest.partition,
        }
        fh.write(json.dumps(header) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def load_manifest(path: str | Path, domain: DomainSpec | None = None) -> Manifest:
    """Load and validate a JSON-lines manifest.

    The header names the domain; built-in domains are reconstructed by name,
    anything else needs an explicit ``domain``.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with path.open() as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid header line: {exc}") from exc
    if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: unsupported manifest schema {header.get('schema_version')!r}"
        )
    name = header.get("domain")
    if domain is None:
        if name not in BUILTIN_DOMAINS:
            raise ManifestError(f"{path}: unknown domain {name!r}; pass a DomainSpec")
        domain = BUILTIN_DOMAINS[name]()
    records = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            records.append(SourceRecord.from_json(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{i}: invalid record JSON: {exc}") from exc
    return Manifest(domain, str(header.get("partition", "train")), records)


def verify_speaker_disjoint(manifests: list[Manifest]) -> None:
    """Partitions of one collection must not share speakers."""
    for i, a in enumerate(manifests):
        for b in manifests[i + 1 :]:
            overlap = a.speakers & b.speakers
            if overlap:
                raise ManifestError(
                    f"speaker overlap between {a.partition} and {b.partition}: "
                    f"{sorted(overlap)[:5]}"
                )


def check_table_counts(manifest: Manifest) -> list[str]:
    """Compare a real-collection manifest against its published sizes."""
    expected = EXPECTED_COUNTS.get((manifest.domain.name, manifest.partition))
    if expected is None:
        return []
    notes = []
    n_rec, n_spk = len(manifest.records), len(manifest.speakers)
    if n_rec != expected[0]:
        notes.append(
            f"{manifest.domain.name}/{manifest.partition}: {n_rec} recordings, "
            f"expected {expected[0]}"
        )
    if n_spk != expected[1]:
        notes.append(
            f"{manifest.domain.name}/{manifest.partition}: {n_spk} speakers, "
            f"expected {expected[1]}"
        )
    return notes


def split_speakers(
    records: list[SourceRecord],
    domain: DomainSpec,
    ratios: tuple[int, int, int] = (8, 1, 1),
    seed: int = 0,
) -> tuple[Manifest, Manifest, Manifest]:
    """Speaker-disjoint train/val/test split at the given ratios.

    Speaker counts are rounded to nearest while keeping every partition
    non-empty; the assignment is deterministic in the seed.
    """
    speakers = sorted({r.speaker_id for r in records})
    if len(speakers) < 3:
        raise ManifestError(f"need at least 3 distinct speakers, got {len(speakers)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D11]))
    order = [speakers[i] for i in rng.permutation(len(speakers))]

    total = sum(ratios)
    exact = [len(speakers) * r / total for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for _ in range(len(speakers) - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    while min(counts) == 0:
        counts[int(np.argmax(counts))] -= 1
        counts[counts.index(0)] += 1

    partitions = {}
    start = 0
    for part, count in zip(("train", "val", "test"), counts):
        partitions[part] = set(order[start : start + count])
        start += count
    by_part = {
        part: [r for r in records if r.speaker_id in spk]
        for part, spk in partitions.items()
    }
    manifests = tuple(Manifest(domain, part, by_part[part]) for part in ("train", "val", "test"))
    verify_speaker_disjoint(list(manifests))
    return manifests


# --- toy corpus synthesis ---------------------------------------------------


def _toy_ref(seed: int, speaker_idx: int, record_idx: int, f0: float, language: str, duration: float) -> str:
    query = urllib.parse.urlencode(
        {
            "seed": seed,
            "spk": speaker_idx,
            "rec": record_idx,
            "f0": f"{f0:.4f}",
            "lang": language,
            "dur": f"{duration:.4f}",
        }
    )
    return f"toy://v1?{query}"


def _parse_toy_ref(ref: str) -> dict:
    parsed = urllib.parse.urlparse(ref)
    if parsed.scheme != "toy" or parsed.netloc != "v1":
        raise ValueError(f"not a toy audio reference: {ref!r}")
    q = urllib.parse.parse_qs(parsed.query)
    return {
        "seed": int(q["seed"][0]),
        "spk": int(q["spk"][0]),
        "rec": int(q["rec"][0]),
        "f0": float(q["f0"][0]),
        "lang": q["lang"][0],
        "dur": float(q["dur"][0]),
    }


def synth_toy_clip(
    f0: float,
    language: str,
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Deterministic pseudo-speech: pitched harmonics under a language-specific
    spectral envelope, amplitude-modulated at a syllabic rate, plus weak noise."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    center, width = LANGUAGE_ENVELOPES[language]

    # slight vibrato keeps the pitch natural without blurring the gender band
    vibrato_rate = rng.uniform(4.0, 6.5)
    vibrato_phase = rng.uniform(0.0, 2.0 * math.pi)
    inst_f0 = f0 * (1.0 + 0.005 * np.sin(2.0 * math.pi * vibrato_rate * t + vibrato_phase))
    phase = 2.0 * math.pi * np.cumsum(inst_f0) / sample_rate

    max_harmonic = int((0.95 * sample_rate / 2.0) // f0)
    out = np.zeros(n)
    for k in range(1, max_harmonic + 1):
        f_k = k * f0
        # language bump plus a shared low-frequency source bump that keeps the
        # fundamental strong enough for pitch (hence gender) to stay recoverable
        amp = (
            math.exp(-((f_k - center) ** 2) / (2.0 * width**2))
            + 0.6 * math.exp(-((f_k - 230.0) ** 2) / (2.0 * 200.0**2))
            + 0.02
        )
        out += amp * np.sin(k * phase + rng.uniform(0.0, 2.0 * math.pi))

    syllabic_rate = rng.uniform(*SYLLABIC_RATE_RANGE)
    am_phase = rng.uniform(0.0, 2.0 * math.pi)
    am = 0.15 + 0.85 * 0.5 * (1.0 - np.cos(2.0 * math.pi * syllabic_rate * t + am_phase))
    out *= am
    out += 0.01 * rng.standard_normal(n) * am

    peak = np.max(np.abs(out))
    return Waveform(0.5 * out / peak, sample_rate)


@functools.lru_cache(maxsize=4096)
def _synth_from_ref(ref: str, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Synthesize the full clip behind a toy:// ref.

    Pure function of its arguments, so caching cannot affect determinism; it
    turns repeated draws from the same record into a crop instead of a
    resynthesis, which is what makes on-the-fly epochs cheap.
    """
    info = _parse_toy_ref(ref)
    rng = np.random.default_rng(
        np.random.SeedSequence([info["seed"], info["spk"], info["rec"], 0x70F])
    )
    return synth_toy_clip(info["f0"], info["lang"], info["dur"], rng, sample_rate)


def synth_toy_corpus(
    n_speakers: int,
    n_records_per_speaker: int = 4,
    language_mix: dict[str, float] | None = None,
    seed: int = 0,
    female_ratio: float = 0.5,
    domain: DomainSpec | None = None,
    audio_dir: str | Path | None = None,
) -> Manifest:
    """Build a deterministic toy manifest, optionally materializing WAV files.

    Without ``audio_dir`` the records carry self-describing ``toy://`` refs
    and clips are synthesized on demand; with it, 32-bit float WAVs are
    written and referenced by path.
    """
    if n_speakers < 2:
        raise ValueError("toy corpus needs at least 2 speakers")
    if language_mix is None:
        language_mix = dict(SVOX_LANGUAGE_MIX)
    total = sum(language_mix.values())
    langs = sorted(language_mix)
    probs = np.array([language_mix[l] / total for l in langs])
    domain = domain or toy_domain()

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    # exact-proportion attribute assignment keeps tiny corpora usable: every
    # split retains both genders and all configured languages when possible
    n_female = int(round(n_speakers * female_ratio))
    genders = ["female"] * n_female + ["male"] * (n_speakers - n_female)
    lang_counts = [int(math.floor(n_speakers * p)) for p in probs]
    remainders = [n_speakers * p - c for p, c in zip(probs, lang_counts)]
    for _ in range(n_speakers - sum(lang_counts)):
        i = int(np.argmax(remainders))
        lang_counts[i] += 1
        remainders[i] = -1.0
    languages = [l for l, c in zip(langs, lang_counts) for _ in range(c)]
    gender_order = rng.permutation(n_speakers)
    language_order = rng.permutation(n_speakers)

    records = []
    for spk in range(n_speakers):
        gender = genders[int(gender_order[spk])]
        f0 = float(rng.uniform(*F0_RANGES[gender]))
        language = languages[int(language_order[spk])]
        speaker_id = f"toyspk{spk:04d}"
        for rec in range(n_records_per_speaker):
            duration = float(rng.uniform(4.5, 6.0))
            ref = _toy_ref(seed, spk, rec, f0, language, duration)
            records.append(
                SourceRecord(
                    record_id=f"{speaker_id}_r{rec:03d}",
                    audio_ref=ref,
                    speaker_id=speaker_id,
                    gender=gender,
                    language=language,
                    duration=duration,
                )
            )

    if audio_dir is not None:
        audio_dir = Path(audio_dir)
        materialized = []
        for rec in records:
            wav_path = audio_dir / f"{rec.record_id}.wav"
            write_wav(wav_path, _synth_from_ref(rec.audio_ref))
            materialized.append(
                SourceRecord(
                    record_id=rec.record_id,
                    audio_ref=str(wav_path),
                    speaker_id=rec.speaker_id,
                    gender=rec.gender,
                    language=rec.language,
                    duration=rec.duration,
                )
            )
        records = materialized

    return Manifest(domain, "all", records)


def get_clip(
    record: SourceRecord,
    rng: np.random.Generator,
    target_duration: float = MIN_CLIP_SECONDS,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Fetch a clip cropped to the target duration at a random start offset."""
    if record.audio_ref.startswith("toy://"):
        full = _synth_from_ref(record.audio_ref, sample_rate)
    else:
        full = read_wav(record.audio_ref)
        if full.sample_rate != sample_rate:
            gcd = math.gcd(full.sample_rate, sample_rate)
            resampled = resample_poly(full.samples, sample_rate // gcd, full.sample_rate // gcd)
            full = Waveform(resampled, sample_rate)
    target_len = int(round(target_duration * sample_rate))
    if len(full) < target_len:
        raise ValueError(
            f"record {record.record_id!r}: clip is {len(full)} samples, "
            f"shorter than the {target_len}-sample target"
        )
    if len(full) == target_len:
        return Waveform(full.samples.copy(), sample_rate)
    start = int(rng.integers(0, len(full) - target_len + 1))
    return Waveform(full.samples[start : start + target_len].copy(), sample_rate)
