"""Concept vocabulary, one-hot condition encoding, and target submix assembly.

A mixture can be split along four signal characteristics: relative energy,
speaker gender, spatial field (near/far), and spoken language. Each
characteristic takes one of a small set of concept values; the ten values
together form the conditioning vocabulary. A query names one concept value,
and the target submix is the sum of sources whose characteristic matches it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .signals import Waveform, energy


class Condition(enum.Enum):
    """A signal characteristic family along which sources can be told apart."""

    ENERGY = "ENERGY"
    GENDER = "GENDER"
    SPATIAL = "SPATIAL"
    LANGUAGE = "LANGUAGE"


class ConceptValue(enum.IntEnum):
    """One concept value; the integer is its canonical one-hot index.

    The ordering below is frozen: checkpoints store it and refuse to load
    under any other ordering.
    """

    E_HIGH = 0
    E_LOW = 1
    G_FEMALE = 2
    G_MALE = 3
    S_NEAR = 4
    S_FAR = 5
    L_EN = 6
    L_FR = 7
    L_DE = 8
    L_ES = 9


VOCABULARY: tuple[ConceptValue, ...] = tuple(ConceptValue)
VOCABULARY_NAMES: tuple[str, ...] = tuple(v.name for v in VOCABULARY)
VOCAB_SIZE = len(VOCABULARY)

_CONDITION_OF = {
    ConceptValue.E_HIGH: Condition.ENERGY,
    ConceptValue.E_LOW: Condition.ENERGY,
    ConceptValue.G_FEMALE: Condition.GENDER,
    ConceptValue.G_MALE: Condition.GENDER,
    ConceptValue.S_NEAR: Condition.SPATIAL,
    ConceptValue.S_FAR: Condition.SPATIAL,
    ConceptValue.L_EN: Condition.LANGUAGE,
    ConceptValue.L_FR: Condition.LANGUAGE,
    ConceptValue.L_DE: Condition.LANGUAGE,
    ConceptValue.L_ES: Condition.LANGUAGE,
}

GENDER_TO_CONCEPT = {"female": ConceptValue.G_FEMALE, "male": ConceptValue.G_MALE}
LANGUAGE_TO_CONCEPT = {
    "en": ConceptValue.L_EN,
    "fr": ConceptValue.L_FR,
    "de": ConceptValue.L_DE,
    "es": ConceptValue.L_ES,
}


def condition_of(value: ConceptValue) -> Condition:
    return _CONDITION_OF[value]


def values_of(condition: Condition) -> tuple[ConceptValue, ...]:
    return tuple(v for v in VOCABULARY if _CONDITION_OF[v] is condition)


def encode_concept(value: ConceptValue) -> np.ndarray:
    """One-hot vector over the canonical vocabulary ordering."""
    bits = np.zeros(VOCAB_SIZE, dtype=np.float64)
    bits[int(value)] = 1.0
    return bits


def decode_concept(bits: np.ndarray) -> ConceptValue:
    bits = np.asarray(bits)
    if bits.shape != (VOCAB_SIZE,):
        raise ValueError(f"condition vector must have shape ({VOCAB_SIZE},), got {bits.shape}")
    hot = np.flatnonzero(bits == 1.0)
    if hot.size != 1 or not np.all((bits == 0.0) | (bits == 1.0)):
        raise ValueError("condition vector must be one-hot")
    return ConceptValue(int(hot[0]))


class UndefinedConditionError(ValueError):
    """The queried characteristic is not defined for these sources' domain."""


class Degeneracy(enum.Enum):
    """Whether the query splits the mixture, absorbs it, or misses it."""

    NONE = "none"
    ALL_MATCH = "all_match"  # target equals the mixture
    NONE_MATCH = "none_match"  # target is the zero waveform


@dataclass(frozen=True)
class SourceConceptProfile:
    """Per-source concept values for every condition its domain defines.

    A condition absent from the mapping is undefined for the domain (querying
    it is an error). A condition present with value ``None`` is defined but
    ambiguous for this source (currently only energy, when the mixture has no
    clearly louder speaker); an ambiguous source matches no concept of that
    condition.
    """

    values: dict[Condition, ConceptValue | None]

    def value_for(self, condition: Condition) -> ConceptValue | None:
        if condition not in self.values:
            raise UndefinedConditionError(
                f"condition {condition.value} is not defined for this source's domain"
            )
        return self.values[condition]

    def matches(self, concept: ConceptValue) -> bool:
        return self.value_for(condition_of(concept)) is concept

    def as_names(self) -> dict[str, str | None]:
        return {
            cond.value: (val.name if val is not None else None)
            for cond, val in self.values.items()
        }


def assign_energy_concepts(
    scaled_sources: list[Waveform], epsilon_db: float = 1.0
) -> list[ConceptValue | None]:
    """Label post-scaling sources as loud/quiet relative to the mixture.

    The strictly loudest source gets E_HIGH and every other source E_LOW.
    If the gap between the top two energies is not strictly above
    ``epsilon_db``, no speaker is clearly louder and every source is marked
    ambiguous (``None``).
    """
    if len(scaled_sources) < 2:
        raise ValueError("energy concepts need at least two sources")
    energies = np.array([energy(w) for w in scaled_sources])
    order = np.argsort(energies)[::-1]
    top, second = energies[order[0]], energies[order[1]]
    if second <= 0.0:
        gap_db = np.inf
    else:
        gap_db = 10.0 * np.log10(top / second)
    if gap_db <= epsilon_db:
        return [None] * len(scaled_sources)
    labels: list[ConceptValue | None] = [ConceptValue.E_LOW] * len(scaled_sources)
    labels[order[0]] = ConceptValue.E_HIGH
    return labels


def target_submix(
    sources: list[Waveform],
    profiles: list[SourceConceptProfile],
    concept: ConceptValue,
) -> tuple[Waveform, Waveform, Degeneracy]:
    """Split sources into the matching submix and everything else.

    Returns (target, other, degeneracy). The two submixes always sum to the
    full mixture exactly.
    """
    if len(sources) != len(profiles):
        raise ValueError("sources and profiles must align")
    if not sources:
        raise ValueError("need at least one source")
    rate = sources[0].sample_rate
    length = len(sources[0])
    matches = [p.matches(concept) for p in profiles]
    target = np.zeros(length, dtype=np.float64)
    other = np.zeros(length, dtype=np.float64)
    for w, hit in zip(sources, matches):
        if len(w) != length or w.sample_rate != rate:
            raise ValueError("all sources must share length and sample rate")
        if hit:
            target += w.samples
        else:
            other += w.samples
    if all(matches):
        flag = Degeneracy.ALL_MATCH
    elif not any(matches):
        flag = Degeneracy.NONE_MATCH
    else:
        flag = Degeneracy.NONE
    return Waveform(target, rate), Waveform(other, rate), flag
