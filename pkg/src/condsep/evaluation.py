"""Median SI-SDR evaluation and per-concept report assembly.

Conditional models are scored on the target estimate; zero-target mixtures
are scored through the non-target slot (reconstruction of the mixture there
is the meaningful number once outputs are mixture-consistent), and
target-is-mixture cases through the target slot. Degenerate pools are never
merged into the discriminative pool. PIT models are scored with the oracle
assignment; degenerate samples are excluded there with a count note, since an
unconditional two-slot model has no defined zero-target slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditions import ConceptValue, Degeneracy
from .mixgen import MixtureSample
from .model import SeparationModel
from .signals import Waveform, si_sdr
from .training import collate

POOL_DISCRIMINATIVE = "discriminative"
POOL_TARGET_MIXTURE = "degenerate_target_is_mixture"
POOL_TARGET_ZERO = "degenerate_target_is_zero"


def aggregate_median(scores: list[float]) -> float:
    """Median that tolerates infinities.

    The midpoint of a finite score and +inf is +inf by convention (documented;
    it keeps reports total). A midpoint of opposite infinities is undefined
    and raises.
    """
    if not scores:
        raise ValueError("cannot take the median of an empty score list")
    arr = np.asarray(scores, dtype=np.float64)
    if np.any(np.isnan(arr)):
        raise ValueError("scores contain NaN")
    with np.errstate(invalid="ignore"):  # -inf + inf midpoints surface as NaN
        med = float(np.median(arr))
    if math.isnan(med):
        raise ValueError("median is undefined: midpoint of opposite infinities")
    return med


@dataclass(frozen=True)
class PoolStats:
    count: int
    median: float
    mean: float  # debug only; the headline number is the median
    infinite_count: int

    @classmethod
    def from_scores(cls, scores: list[float]) -> "PoolStats":
        return cls(
            count=len(scores),
            median=aggregate_median(scores),
            mean=float(np.mean(scores)),
            infinite_count=int(np.sum(np.isinf(scores))),
        )

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "median": self.median,
            "mean": self.mean,
            "infinite_count": self.infinite_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PoolStats":
        return cls(obj["count"], obj["median"], obj["mean"], obj["infinite_count"])


@dataclass
class EvalReport:
    """Per-concept, per-pool medians plus provenance."""

    concepts: dict[str, dict[str, PoolStats]]
    provenance: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def median(self, concept: ConceptValue | str, pool: str = POOL_DISCRIMINATIVE) -> float:
        name = concept.name if isinstance(concept, ConceptValue) else concept
        return self.concepts[name][pool].median

    def to_json(self) -> dict:
        return {
            "concepts": {
                concept: {pool: stats.to_json() for pool, stats in pools.items()}
                for concept, pools in self.concepts.items()
            },
            "provenance": self.provenance,
            "notes": self.notes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            concepts={
                concept: {pool: PoolStats.from_json(s) for pool, s in pools.items()}
                for concept, pools in obj["concepts"].items()
            },
            provenance=obj.get("provenance", {}),
            notes=obj.get("notes", []),
        )

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def _fmt_db(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.1f}"


def format_comparison_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Aligned text table: one row per report, one column per concept/pool."""
    columns: list[tuple[str, str]] = []
    for _, report in rows:
        for concept, pools in report.concepts.items():
            for pool in pools:
                if (concept, pool) not in columns:
                    columns.append((concept, pool))
    headers = ["model"] + [
        concept if pool == POOL_DISCRIMINATIVE else f"{concept}:{pool.removeprefix('degenerate_')}"
        for concept, pool in columns
    ]
    body = []
    for label, report in rows:
        cells = [label]
        for concept, pool in columns:
            stats = report.concepts.get(concept, {}).get(pool)
            cells.append(_fmt_db(stats.median) if stats else "-")
        body.append(cells)
    widths = [max(len(row[i]) for row in [headers] + body) for i in range(len(headers))]
    lines = [
        "  ".join(h.rjust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for cells in body:
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def format_report_table(report: EvalReport, label: str = "model") -> str:
    return format_comparison_table([(label, report)])


def _forward_in_batches(
    model: SeparationModel,
    samples: list[MixtureSample],
    batch_size: int,
    conditioned: bool,
) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x, _refs, c = collate(chunk)
            outs.append(model(x, c if conditioned else None))
    return torch.cat(outs, dim=0)


def _group_by_concept(samples: list[MixtureSample]) -> dict[str, list[MixtureSample]]:
    groups: dict[str, list[MixtureSample]] = {}
    for s in samples:
        groups.setdefault(s.concept.name, []).append(s)
    return groups


def evaluate_conditional(
    model: SeparationModel,
    samples: list[MixtureSample],
    batch_size: int = 8,
    provenance: dict | None = None,
) -> EvalReport:
    """Score a conditioned model on a (possibly multi-concept) eval set."""
    if not model.config.conditioned:
        raise ValueError("evaluate_conditional needs a conditioned model")
    model.eval()
    concepts: dict[str, dict[str, PoolStats]] = {}
    for concept_name, group in _group_by_concept(samples).items():
        est = _forward_in_batches(model, group, batch_size, conditioned=True)
        pools: dict[str, list[float]] = {}
        for i, sample in enumerate(group):
            rate = sample.mixture.sample_rate
            est_t = Waveform(est[i, 0].numpy().astype(np.float64), rate)
            est_o = Waveform(est[i, 1].numpy().astype(np.float64), rate)
            if sample.degeneracy is Degeneracy.NONE:
                pools.setdefault(POOL_DISCRIMINATIVE, []).append(si_sdr(est_t, sample.target))
            elif sample.degeneracy is Degeneracy.ALL_MATCH:
                pools.setdefault(POOL_TARGET_MIXTURE, []).append(si_sdr(est_t, sample.mixture))
            else:
                pools.setdefault(POOL_TARGET_ZERO, []).append(si_sdr(est_o, sample.mixture))
        concepts[concept_name] = {
            pool: PoolStats.from_scores(scores) for pool, scores in pools.items()
        }
    return EvalReport(concepts=concepts, provenance=provenance or {})


def evaluate_pit_oracle(
    model: SeparationModel,
    samples: list[MixtureSample],
    batch_size: int = 8,
    provenance: dict | None = None,
) -> EvalReport:
    """Score an unconditional model with the best slot assignment per sample."""
    if model.config.conditioned:
        raise ValueError("evaluate_pit_oracle needs an unconditional model")
    model.eval()
    concepts: dict[str, dict[str, PoolStats]] = {}
    notes: list[str] = []
    for concept_name, group in _group_by_concept(samples).items():
        usable = [s for s in group if s.degeneracy is Degeneracy.NONE]
        excluded = len(group) - len(usable)
        if excluded:
            notes.append(
                f"{concept_name}: excluded {excluded} degenerate samples "
                "(no defined zero-target slot for an unconditional model)"
            )
        if not usable:
            continue
        est = _forward_in_batches(model, usable, batch_size, conditioned=False)
        scores = []
        for i, sample in enumerate(usable):
            rate = sample.mixture.sample_rate
            per_slot = [
                si_sdr(
                    Waveform(est[i, slot].numpy().astype(np.float64), rate), sample.target
                )
                for slot in range(est.shape[1])
            ]
            scores.append(max(per_slot))
        concepts[concept_name] = {POOL_DISCRIMINATIVE: PoolStats.from_scores(scores)}
    return EvalReport(concepts=concepts, provenance=provenance or {}, notes=notes)
