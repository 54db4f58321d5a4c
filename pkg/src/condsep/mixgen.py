"""On-the-fly conditional mixture sampling.

Every sample is a pure function of (config, base_seed, split, index): any
worker may produce any index with no shared state, and regenerating a sample
is bit-exact. A sample bundles the mixture, the concept-selected target and
other submixes, the one-hot condition vector, and full generation metadata.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .acoustics import DEFAULT_MAX_ORDER, RIR, RoomSpec, SourcePlacement, image_source_rir, place_source, spatialize
from .conditions import (
    Condition,
    ConceptValue,
    Degeneracy,
    SourceConceptProfile,
    assign_energy_concepts,
    condition_of,
    encode_concept,
    GENDER_TO_CONCEPT,
    LANGUAGE_TO_CONCEPT,
    target_submix,
    values_of,
)
from .corpus import DomainSpec, Manifest, SourceRecord, get_clip, load_manifest, split_speakers, synth_toy_corpus, verify_speaker_disjoint
from .signals import Waveform, ZeroEnergyError, rescale_to_snr, write_wav

SPATIAL_POLICIES = ("always_near_far", "uniform_over_pairs")
PARTITIONS = ("train", "val", "test")


class GenerationError(RuntimeError):
    """A mixture could not be generated under the configured constraints."""


class ToyCorpusSource:
    """Deterministic in-memory corpus: synthesized speakers split 8:1:1."""

    def __init__(
        self,
        n_speakers: int = 24,
        n_records_per_speaker: int = 4,
        language_mix: dict[str, float] | None = None,
        seed: int = 0,
        female_ratio: float = 0.5,
    ):
        self.n_speakers = n_speakers
        self.n_records_per_speaker = n_records_per_speaker
        self.language_mix = language_mix
        self.seed = seed
        self.female_ratio = female_ratio
        self._splits: dict[str, Manifest] | None = None

    def _build(self, domain: DomainSpec) -> dict[str, Manifest]:
        if self._splits is None:
            full = synth_toy_corpus(
                self.n_speakers,
                self.n_records_per_speaker,
                language_mix=self.language_mix,
                seed=self.seed,
                female_ratio=self.female_ratio,
                domain=domain,
            )
            train, val, test = split_speakers(full.records, domain, seed=self.seed)
            self._splits = {"train": train, "val": val, "test": test}
        return self._splits

    def manifest_for(self, split: str, domain: DomainSpec) -> Manifest:
        if split not in PARTITIONS:
            raise GenerationError(f"unknown split {split!r}; expected one of {PARTITIONS}")
        return self._build(domain)[split]

    def to_json(self) -> dict:
        return {
            "kind": "toy",
            "n_speakers": self.n_speakers,
            "n_records_per_speaker": self.n_records_per_speaker,
            "language_mix": self.language_mix,
            "seed": self.seed,
            "female_ratio": self.female_ratio,
        }


class ManifestCorpusSource:
    """Corpus backed by prepared JSON-lines manifests, one per partition."""

    def __init__(self, paths: dict[str, str | Path]):
        self.paths = {k: Path(v) for k, v in paths.items()}
        self._cache: dict[str, Manifest] = {}
        self._checked = False

    def manifest_for(self, split: str, domain: DomainSpec) -> Manifest:
        if split not in self.paths:
            raise GenerationError(f"no manifest configured for split {split!r}")
        if split not in self._cache:
            self._cache[split] = load_manifest(self.paths[split], domain)
        if not self._checked and len(self._cache) == len(self.paths):
            verify_speaker_disjoint(list(self._cache.values()))
            self._checked = True
        return self._cache[split]

    def to_json(self) -> dict:
        return {"kind": "manifest", "paths": {k: str(v) for k, v in self.paths.items()}}


@dataclass(frozen=True)
class DomainEntry:
    """One training domain: its spec, sampling prior, corpus, and SNR range."""

    spec: DomainSpec
    prior: float
    source: ToyCorpusSource | ManifestCorpusSource
    snr_range: tuple[float, float] = (0.0, 5.0)


def uniform_condition_priors(
    domain: DomainSpec, condition_weights: dict[Condition, float] | None = None
) -> dict[ConceptValue, float]:
    """Concept priors from per-condition weights (equal by default).

    A condition's weight is split across its concepts: uniformly, except
    language concepts follow the domain's language mix when one is set.
    """
    conditions = sorted(domain.conditions, key=lambda c: c.value)
    if condition_weights is None:
        condition_weights = {c: 1.0 for c in conditions}
    total = sum(condition_weights.get(c, 0.0) for c in conditions)
    if total <= 0:
        raise GenerationError(f"no positive condition weight for domain {domain.name}")
    priors: dict[ConceptValue, float] = {}
    for cond in conditions:
        weight = condition_weights.get(cond, 0.0) / total
        if weight == 0.0:
            continue
        concepts = values_of(cond)
        if cond is Condition.LANGUAGE and domain.language_mix:
            mix_total = sum(domain.language_mix.values())
            for lang, share in sorted(domain.language_mix.items()):
                priors[LANGUAGE_TO_CONCEPT[lang]] = weight * share / mix_total
        else:
            for v in concepts:
                priors[v] = weight / len(concepts)
    return priors


@dataclass
class GenerationConfig:
    """Independent variables of the mixture-generation experiment."""

    domains: tuple[DomainEntry, ...]
    condition_priors: dict[str, dict[ConceptValue, float]]
    degenerate_ratio: dict[Condition, float] = field(default_factory=dict)
    degenerate_all_match_prob: float = 0.5
    snr_range_energy_conditioned: tuple[float, float] = (1.0, 5.0)
    exclude_ambiguous_energy: bool = True
    energy_ambiguity_db: float = 1.0
    overlap_range: tuple[float, float] = (0.75, 1.0)
    spatial_pairing: str = "always_near_far"
    clip_seconds: float = 4.0
    sample_rate: int = 8000
    rir_max_order: int = DEFAULT_MAX_ORDER
    max_retries: int = 1000

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.domains:
            raise GenerationError("at least one domain is required")
        total = sum(d.prior for d in self.domains)
        if abs(total - 1.0) > 1e-9:
            raise GenerationError(f"domain priors must sum to 1, got {total}")
        if self.spatial_pairing not in SPATIAL_POLICIES:
            raise GenerationError(
                f"spatial_pairing must be one of {SPATIAL_POLICIES}, got {self.spatial_pairing!r}"
            )
        names = [d.spec.name for d in self.domains]
        if len(set(names)) != len(names):
            raise GenerationError("domain names must be unique within a config")
        for entry in self.domains:
            priors = self.condition_priors.get(entry.spec.name)
            if not priors:
                raise GenerationError(f"no condition priors for domain {entry.spec.name}")
            psum = sum(priors.values())
            if abs(psum - 1.0) > 1e-9:
                raise GenerationError(
                    f"condition priors for {entry.spec.name} must sum to 1, got {psum}"
                )
            for v, p in priors.items():
                if p < 0:
                    raise GenerationError(f"negative prior for {v.name}")
                if p > 0 and condition_of(v) not in entry.spec.conditions:
                    raise GenerationError(
                        f"concept {v.name} is not valid for domain {entry.spec.name} "
                        f"(conditions: {sorted(c.value for c in entry.spec.conditions)})"
                    )
        for cond, rho in self.degenerate_ratio.items():
            if not 0.0 <= rho <= 1.0:
                raise GenerationError(f"degenerate ratio for {cond.value} must be in [0,1]")

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def domain_entry(self, name: str) -> DomainEntry:
        for entry in self.domains:
            if entry.spec.name == name:
                return entry
        raise GenerationError(f"unknown domain {name!r}")


@dataclass(frozen=True)
class SourceInfo:
    """Provenance of one source inside a mixture."""

    record_id: str
    speaker_id: str
    profile: SourceConceptProfile
    is_target: bool
    onset_delay: int
    placement: SourcePlacement | None = None

    def to_metadata(self) -> dict:
        meta = {
            "record_id": self.record_id,
            "speaker_id": self.speaker_id,
            "profile": self.profile.as_names(),
            "is_target": self.is_target,
            "onset_delay": self.onset_delay,
        }
        if self.placement is not None:
            meta["placement"] = {
                "field_class": self.placement.field_class,
                "distance": self.placement.distance,
                "azimuth": self.placement.azimuth,
                "source_height": self.placement.source_height,
            }
        return meta


@dataclass(frozen=True)
class MixtureSample:
    """One conditional mixture with its ground-truth split and provenance."""

    mixture: Waveform
    target: Waveform
    other: Waveform
    concept: ConceptValue
    condition_vector: np.ndarray
    degeneracy: Degeneracy
    domain: str
    sources: tuple[SourceInfo, ...]
    room: RoomSpec | None
    snr_db: float
    overlap_fraction: float
    seed_tuple: tuple[int, str, int]

    def to_metadata(self) -> dict:
        meta = {
            "seed_tuple": list(self.seed_tuple),
            "domain": self.domain,
            "concept": self.concept.name,
            "degeneracy": self.degeneracy.value,
            "snr_db": self.snr_db,
            "overlap_fraction": self.overlap_fraction,
            "sources": [s.to_metadata() for s in self.sources],
        }
        if self.room is not None:
            meta["room"] = {
                "length": self.room.length,
                "width": self.room.width,
                "height": self.room.height,
                "rt60": self.room.rt60,
            }
        return meta

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.mixture.samples.tobytes())
        h.update(self.target.samples.tobytes())
        h.update(self.other.samples.tobytes())
        h.update(json.dumps(self.to_metadata(), sort_keys=True).encode())
        return h.hexdigest()


def _rng_for(base_seed: int, split: str, index: int, concept: ConceptValue | None) -> np.random.Generator:
    tag = zlib.crc32(split.encode())
    concept_tag = zlib.crc32(concept.name.encode()) if concept is not None else 0
    return np.random.default_rng(
        np.random.SeedSequence([abs(int(base_seed)), tag, concept_tag, int(index)])
    )


def _choice(rng: np.random.Generator, items: list, probs: list[float]):
    u = rng.random()
    acc = 0.0
    for item, p in zip(items, probs):
        acc += p
        if u < acc:
            return item
    return items[-1]


def _pick_record(
    records: list[SourceRecord],
    rng: np.random.Generator,
    why: str,
    exclude_speaker: str | None = None,
    gender: str | None = None,
    language: str | None = None,
    not_language: str | None = None,
) -> SourceRecord:
    pool = [
        r
        for r in records
        if (exclude_speaker is None or r.speaker_id != exclude_speaker)
        and (gender is None or r.gender == gender)
        and (language is None or r.language == language)
        and (not_language is None or r.language != not_language)
    ]
    if not pool:
        raise GenerationError(f"no record satisfies constraint: {why}")
    return pool[int(rng.integers(len(pool)))]


_CONCEPT_TO_GENDER = {v: k for k, v in GENDER_TO_CONCEPT.items()}
_CONCEPT_TO_LANGUAGE = {v: k for k, v in LANGUAGE_TO_CONCEPT.items()}


def _draw_records(
    manifest: Manifest,
    concept: ConceptValue,
    degenerate: bool,
    all_match: bool,
    rng: np.random.Generator,
) -> tuple[SourceRecord, SourceRecord]:
    """Pick two distinct-speaker records compatible with the sampled concept."""
    records = manifest.records
    cond = condition_of(concept)
    if len(manifest.speakers) < 2:
        raise GenerationError(f"domain {manifest.domain.name} split has fewer than 2 speakers")

    if cond is Condition.GENDER:
        want = _CONCEPT_TO_GENDER[concept]
        other = "male" if want == "female" else "female"
        if not degenerate:
            first = _pick_record(records, rng, f"gender={want}", gender=want)
            second = _pick_record(
                records, rng, f"gender={other}", exclude_speaker=first.speaker_id, gender=other
            )
        else:
            shared = want if all_match else other
            first = _pick_record(records, rng, f"gender={shared}", gender=shared)
            second = _pick_record(
                records, rng, f"second gender={shared}", exclude_speaker=first.speaker_id, gender=shared
            )
    elif cond is Condition.LANGUAGE:
        want = _CONCEPT_TO_LANGUAGE[concept]
        if not degenerate:
            first = _pick_record(records, rng, f"language={want}", language=want)
            second = _pick_record(
                records, rng, f"language!={want}", exclude_speaker=first.speaker_id, not_language=want
            )
        elif all_match:
            first = _pick_record(records, rng, f"language={want}", language=want)
            second = _pick_record(
                records, rng, f"second language={want}", exclude_speaker=first.speaker_id, language=want
            )
        else:
            first = _pick_record(records, rng, f"language!={want}", not_language=want)
            second = _pick_record(
                records,
                rng,
                f"shared language={first.language}!={want}",
                exclude_speaker=first.speaker_id,
                language=first.language,
            )
    else:
        # energy and spatial separability are created downstream (by SNR
        # scaling and placement), not by record metadata
        first = _pick_record(records, rng, "any record")
        second = _pick_record(records, rng, "distinct speaker", exclude_speaker=first.speaker_id)

    pair = [first, second]
    if rng.random() < 0.5:
        pair.reverse()
    return pair[0], pair[1]


def _spatial_classes(
    concept: ConceptValue,
    degenerate: bool,
    all_match: bool,
    policy: str,
    rng: np.random.Generator,
) -> tuple[str, str]:
    if condition_of(concept) is Condition.SPATIAL:
        want = "near" if concept is ConceptValue.S_NEAR else "far"
        other = "far" if want == "near" else "near"
        if degenerate:
            shared = want if all_match else other
            return (shared, shared)
        classes = [want, other]
        if rng.random() < 0.5:
            classes.reverse()
        return (classes[0], classes[1])
    if policy == "always_near_far":
        classes = ["near", "far"]
        if rng.random() < 0.5:
            classes.reverse()
        return (classes[0], classes[1])
    combo = _choice(rng, [("near", "near"), ("far", "far"), ("near", "far")], [1 / 3] * 3)
    classes = list(combo)
    if classes[0] != classes[1] and rng.random() < 0.5:
        classes.reverse()
    return (classes[0], classes[1])


def _sample_room(domain: DomainSpec, rng: np.random.Generator) -> RoomSpec:
    ranges = domain.room
    assert ranges is not None
    return RoomSpec.with_centered_mic(
        length=float(rng.uniform(*ranges.length)),
        width=float(rng.uniform(*ranges.width)),
        height=float(rng.uniform(*ranges.height)),
        rt60=float(rng.uniform(*ranges.rt60)),
    )


def sample_mixture(
    config: GenerationConfig,
    split: str,
    index: int,
    base_seed: int,
    concept: ConceptValue | None = None,
    force_degenerate: bool | None = None,
) -> MixtureSample:
    """Generate the mixture at (base_seed, split, index), optionally pinning
    the conditioning concept (for fixed eval sets) and the degenerate flag."""
    rng = _rng_for(base_seed, split, index, concept)
    forced_concept = concept

    # domain, concept, degeneracy
    entries = list(config.domains)
    if forced_concept is not None:
        entries = [e for e in entries if condition_of(forced_concept) in e.spec.conditions]
        if not entries:
            raise GenerationError(
                f"concept {forced_concept.name} is not valid for any configured domain"
            )
    total_prior = sum(e.prior for e in entries)
    if total_prior <= 0:
        # all-forced-out priors: fall back to uniform over eligible domains
        probs = [1.0 / len(entries)] * len(entries)
    else:
        probs = [e.prior / total_prior for e in entries]
    entry = _choice(rng, entries, probs)
    domain = entry.spec
    manifest = entry.source.manifest_for(split, domain)

    if forced_concept is None:
        priors = config.condition_priors[domain.name]
        items = sorted(priors.items(), key=lambda kv: int(kv[0]))
        v = _choice(rng, [k for k, _ in items], [p for _, p in items])
    else:
        v = forced_concept
    cond = condition_of(v)

    rho = config.degenerate_ratio.get(cond, 0.0)
    degenerate = force_degenerate if force_degenerate is not None else bool(rng.random() < rho)
    all_match = bool(rng.random() < config.degenerate_all_match_prob)

    last_error: Exception | None = None
    for _attempt in range(config.max_retries):
        try:
            return _render_sample(
                config, entry, manifest, split, index, base_seed, v, degenerate, all_match, rng
            )
        except ZeroEnergyError as exc:
            last_error = exc
            continue
    raise GenerationError(
        f"failed to generate mixture (domain={domain.name}, concept={v.name}) after "
        f"{config.max_retries} attempts: {last_error}"
    )


def _render_sample(
    config: GenerationConfig,
    entry: DomainEntry,
    manifest: Manifest,
    split: str,
    index: int,
    base_seed: int,
    v: ConceptValue,
    degenerate: bool,
    all_match: bool,
    rng: np.random.Generator,
) -> MixtureSample:
    domain = entry.spec
    cond = condition_of(v)
    if cond not in domain.conditions:
        raise GenerationError(f"concept {v.name} undefined for domain {domain.name}")
    rec_a, rec_b = _draw_records(manifest, v, degenerate, all_match, rng)

    clips = [
        get_clip(rec_a, rng, config.clip_seconds, config.sample_rate),
        get_clip(rec_b, rng, config.clip_seconds, config.sample_rate),
    ]

    room = None
    placements: list[SourcePlacement | None] = [None, None]
    if domain.reverberant:
        room = _sample_room(domain, rng)
        classes = _spatial_classes(v, degenerate, all_match, config.spatial_pairing, rng)
        ranges = domain.room
        assert ranges is not None
        rendered = []
        for i, (clip, cls) in enumerate(zip(clips, classes)):
            dist_range = ranges.near_distance if cls == "near" else ranges.far_distance
            placement = place_source(room, cls, dist_range, ranges.source_height, rng)
            placements[i] = placement
            rir = image_source_rir(room, placement, config.rir_max_order, config.sample_rate)
            rendered.append(spatialize(clip, rir))
        clips = rendered

    # overlap: delay the second source's onset inside the fixed frame
    overlap = float(rng.uniform(*config.overlap_range))
    delay = int(round((1.0 - overlap) * config.clip_samples))
    if delay > 0:
        shifted = np.zeros(config.clip_samples, dtype=np.float64)
        shifted[delay:] = clips[1].samples[: config.clip_samples - delay]
        clips[1] = Waveform(shifted, config.sample_rate)

    # SNR: scale the delayed source against the first
    energy_conditioned = cond is Condition.ENERGY
    epsilon = config.energy_ambiguity_db
    label_epsilon = epsilon if config.exclude_ambiguous_energy else 0.0
    for _snr_attempt in range(config.max_retries):
        if energy_conditioned and degenerate:
            snr_db = float(rng.uniform(0.0, epsilon))
        elif energy_conditioned and config.exclude_ambiguous_energy:
            snr_db = float(rng.uniform(*config.snr_range_energy_conditioned))
        else:
            snr_db = float(rng.uniform(*entry.snr_range))
        scaled = [clips[0], rescale_to_snr(clips[0], clips[1], snr_db)]
        energy_labels = assign_energy_concepts(
            scaled, epsilon if (energy_conditioned and degenerate) else label_epsilon
        )
        if energy_conditioned and degenerate and any(l is not None for l in energy_labels):
            continue  # not ambiguous enough; resample SNR
        if energy_conditioned and not degenerate and any(l is None for l in energy_labels):
            continue  # ambiguity conflict; resample SNR
        break
    else:
        raise GenerationError("could not satisfy the energy-separability constraint")

    profiles = []
    for i, rec in enumerate((rec_a, rec_b)):
        values: dict[Condition, ConceptValue | None] = {Condition.ENERGY: energy_labels[i]}
        if Condition.GENDER in domain.conditions:
            values[Condition.GENDER] = GENDER_TO_CONCEPT[rec.gender] if rec.gender else None
        if Condition.LANGUAGE in domain.conditions:
            values[Condition.LANGUAGE] = (
                LANGUAGE_TO_CONCEPT[rec.language] if rec.language else None
            )
        if Condition.SPATIAL in domain.conditions:
            pl = placements[i]
            values[Condition.SPATIAL] = (
                ConceptValue.S_NEAR if pl.field_class == "near" else ConceptValue.S_FAR
            ) if pl is not None else None
        profiles.append(SourceConceptProfile(values))

    s_target, s_other, flag = target_submix(scaled, profiles, v)
    if not degenerate and flag is not Degeneracy.NONE:
        raise GenerationError(
            f"constraint violation: sampled pair is not separable by {v.name} "
            f"(records {rec_a.record_id}, {rec_b.record_id})"
        )
    if degenerate and flag is Degeneracy.NONE:
        raise GenerationError(
            f"constraint violation: degenerate draw produced a separable pair under {v.name}"
        )
    mixture = Waveform(s_target.samples + s_other.samples, config.sample_rate)

    matches = [p.matches(v) for p in profiles]
    infos = tuple(
        SourceInfo(
            record_id=rec.record_id,
            speaker_id=rec.speaker_id,
            profile=profile,
            is_target=match,
            onset_delay=0 if i == 0 else delay,
            placement=placements[i],
        )
        for i, (rec, profile, match) in enumerate(zip((rec_a, rec_b), profiles, matches))
    )
    return MixtureSample(
        mixture=mixture,
        target=s_target,
        other=s_other,
        concept=v,
        condition_vector=encode_concept(v),
        degeneracy=flag,
        domain=domain.name,
        sources=infos,
        room=room,
        snr_db=snr_db,
        overlap_fraction=overlap,
        seed_tuple=(base_seed, split, index),
    )


def make_epoch(
    config: GenerationConfig,
    n: int = 20000,
    base_seed: int = 0,
    epoch_index: int = 0,
    split: str = "train",
) -> Iterator[MixtureSample]:
    """Lazy stream of fresh mixtures with indices epoch_index*n .. +n-1."""
    start = epoch_index * n
    for index in range(start, start + n):
        yield sample_mixture(config, split, index, base_seed)


def make_eval_set(
    config: GenerationConfig,
    concept: ConceptValue,
    n: int = 3000,
    seed: int = 0,
    split: str = "test",
    degenerate: bool | None = None,
) -> list[MixtureSample]:
    """Fixed-seed evaluation mixtures, all conditioned on one concept.

    ``degenerate`` pins the degeneracy flag: None (default) samples it from
    the configured ratio, False builds a purely discriminative pool, True a
    purely degenerate one.
    """
    return [
        sample_mixture(config, split, i, seed, concept=concept, force_degenerate=degenerate)
        for i in range(n)
    ]


def write_eval_set(samples: list[MixtureSample], directory: str | Path) -> Path:
    """Materialize an eval set: WAV triplets plus a JSON-lines metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta_path = directory / "metadata.jsonl"
    with meta_path.open("w") as fh:
        for i, sample in enumerate(samples):
            stem = f"{i:05d}"
            write_wav(directory / f"{stem}_mix.wav", sample.mixture)
            write_wav(directory / f"{stem}_target.wav", sample.target)
            write_wav(directory / f"{stem}_other.wav", sample.other)
            record = {"index": i, "stem": stem, **sample.to_metadata()}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return meta_path
