"""Config-file-driven experiments: train + eval recipes and parameter sweeps.

An experiment config is a versioned JSON document describing the model, the
training run (including mixture generation), and the evaluation sets. Sweeps
mutate a single dotted parameter path across a value grid and train one model
per grid point with otherwise shared seeds, so every emitted artifact is
regenerable bit-exactly from config plus seeds.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .conditions import Condition, ConceptValue
from .corpus import BUILTIN_DOMAINS, DomainSpec, RoomRanges
from .evaluation import (
    EvalReport,
    evaluate_conditional,
    evaluate_pit_oracle,
    format_comparison_table,
    format_report_table,
)
from .mixgen import (
    DomainEntry,
    GenerationConfig,
    ManifestCorpusSource,
    ToyCorpusSource,
    make_eval_set,
    write_eval_set,
)
from .model import ModelConfig, SeparationModel, model_from_checkpoint
from .training import TrainConfig, TrainResult, train, _active_concepts

CONFIG_SCHEMA_VERSION = 1


class ExperimentConfigError(ValueError):
    """An experiment config file is malformed or inconsistent."""


# --- JSON (de)serialization ---------------------------------------------------


def domain_spec_to_json(spec: DomainSpec) -> dict:
    return {
        "name": spec.name,
        "conditions": sorted(c.value for c in spec.conditions),
        "reverberant": spec.reverberant,
        "room": asdict(spec.room) if spec.room else None,
        "language_mix": spec.language_mix,
    }


def domain_spec_from_json(obj: str | dict) -> DomainSpec:
    if isinstance(obj, str):
        if obj not in BUILTIN_DOMAINS:
            raise ExperimentConfigError(f"unknown built-in domain {obj!r}")
        return BUILTIN_DOMAINS[obj]()
    try:
        room = obj.get("room")
        return DomainSpec(
            name=obj["name"],
            conditions=frozenset(Condition(c) for c in obj["conditions"]),
            reverberant=bool(obj.get("reverberant", False)),
            room=RoomRanges(**{k: tuple(v) for k, v in room.items()}) if room else None,
            language_mix=obj.get("language_mix"),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ExperimentConfigError(f"invalid domain spec: {exc}") from exc


def _source_from_json(obj: dict):
    kind = obj.get("kind")
    if kind == "toy":
        return ToyCorpusSource(
            n_speakers=obj.get("n_speakers", 24),
            n_records_per_speaker=obj.get("n_records_per_speaker", 4),
            language_mix=obj.get("language_mix"),
            seed=obj.get("seed", 0),
            female_ratio=obj.get("female_ratio", 0.5),
        )
    if kind == "manifest":
        return ManifestCorpusSource(obj["paths"])
    raise ExperimentConfigError(f"unknown corpus source kind {kind!r}")


def generation_config_to_json(config: GenerationConfig) -> dict:
    return {
        "domains": [
            {
                "domain": domain_spec_to_json(e.spec),
                "prior": e.prior,
                "snr_range": list(e.snr_range),
                "source": e.source.to_json(),
            }
            for e in config.domains
        ],
        "condition_priors": {
            name: {v.name: p for v, p in priors.items()}
            for name, priors in config.condition_priors.items()
        },
        "degenerate_ratio": {c.value: r for c, r in config.degenerate_ratio.items()},
        "degenerate_all_match_prob": config.degenerate_all_match_prob,
        "snr_range_energy_conditioned": list(config.snr_range_energy_conditioned),
        "exclude_ambiguous_energy": config.exclude_ambiguous_energy,
        "energy_ambiguity_db": config.energy_ambiguity_db,
        "overlap_range": list(config.overlap_range),
        "spatial_pairing": config.spatial_pairing,
        "clip_seconds": config.clip_seconds,
        "sample_rate": config.sample_rate,
        "rir_max_order": config.rir_max_order,
        "max_retries": config.max_retries,
    }


def generation_config_from_json(obj: dict) -> GenerationConfig:
    try:
        domains = tuple(
            DomainEntry(
                spec=domain_spec_from_json(d["domain"]),
                prior=float(d["prior"]),
                source=_source_from_json(d["source"]),
                snr_range=tuple(d.get("snr_range", (0.0, 5.0))),
            )
            for d in obj["domains"]
        )
        condition_priors = {
            name: {ConceptValue[v]: float(p) for v, p in priors.items()}
            for name, priors in obj["condition_priors"].items()
        }
        return GenerationConfig(
            domains=domains,
            condition_priors=condition_priors,
            degenerate_ratio={
                Condition(c): float(r) for c, r in obj.get("degenerate_ratio", {}).items()
            },
            degenerate_all_match_prob=obj.get("degenerate_all_match_prob", 0.5),
            snr_range_energy_conditioned=tuple(obj.get("snr_range_energy_conditioned", (1.0, 5.0))),
            exclude_ambiguous_energy=obj.get("exclude_ambiguous_energy", True),
            energy_ambiguity_db=obj.get("energy_ambiguity_db", 1.0),
            overlap_range=tuple(obj.get("overlap_range", (0.75, 1.0))),
            spatial_pairing=obj.get("spatial_pairing", "always_near_far"),
            clip_seconds=obj.get("clip_seconds", 4.0),
            sample_rate=obj.get("sample_rate", 8000),
            rir_max_order=obj.get("rir_max_order", 17),
            max_retries=obj.get("max_retries", 1000),
        )
    except KeyError as exc:
        raise ExperimentConfigError(f"generation config missing key {exc}") from exc


def train_config_to_json(config: TrainConfig) -> dict:
    return {
        "objective": config.objective,
        "batch_size": config.batch_size,
        "initial_lr": config.initial_lr,
        "lr_halving_period": config.lr_halving_period,
        "epochs": config.epochs,
        "epoch_size": config.epoch_size,
        "seed": config.seed,
        "grad_clip": config.grad_clip,
        "val_size": config.val_size,
        "val_concepts": [v.name for v in config.val_concepts] if config.val_concepts else None,
        "max_steps": config.max_steps,
        "reuse_first_epoch": config.reuse_first_epoch,
        "log_every": config.log_every,
        "torch_threads": config.torch_threads,
        "generation": generation_config_to_json(config.generation),
    }


def train_config_from_json(obj: dict) -> TrainConfig:
    try:
        val_concepts = obj.get("val_concepts")
        return TrainConfig(
            generation=generation_config_from_json(obj["generation"]),
            objective=obj.get("objective", "conditional"),
            batch_size=obj.get("batch_size", 6),
            initial_lr=obj.get("initial_lr", 1e-3),
            lr_halving_period=obj.get("lr_halving_period", 20),
            epochs=obj.get("epochs", 120),
            epoch_size=obj.get("epoch_size", 20000),
            seed=obj.get("seed", 0),
            grad_clip=obj.get("grad_clip", 5.0),
            val_size=obj.get("val_size", 100),
            val_concepts=tuple(ConceptValue[v] for v in val_concepts) if val_concepts else None,
            max_steps=obj.get("max_steps"),
            reuse_first_epoch=obj.get("reuse_first_epoch", False),
            log_every=obj.get("log_every", 50),
            torch_threads=obj.get("torch_threads", 1),
        )
    except KeyError as exc:
        raise ExperimentConfigError(f"train config missing key {exc}") from exc


@dataclass
class EvalSpec:
    concepts: tuple[ConceptValue, ...] | None = None
    size: int = 100
    seed: int = 777
    split: str = "test"
    degenerate_pools: bool = False
    materialize: bool = False


@dataclass
class SweepSpec:
    parameter: str
    grid: list

    def __post_init__(self) -> None:
        if not self.grid:
            raise ExperimentConfigError("sweep grid must be non-empty")


@dataclass
class ExperimentConfig:
    name: str
    model: ModelConfig
    train: TrainConfig
    evaluation: EvalSpec
    sweep: SweepSpec | None = None

    def to_json(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "name": self.name,
            "model": asdict(self.model),
            "train": train_config_to_json(self.train),
            "evaluation": {
                "concepts": [v.name for v in self.evaluation.concepts]
                if self.evaluation.concepts
                else None,
                "size": self.evaluation.size,
                "seed": self.evaluation.seed,
                "split": self.evaluation.split,
                "degenerate_pools": self.evaluation.degenerate_pools,
                "materialize": self.evaluation.materialize,
            },
            "sweep": {"parameter": self.sweep.parameter, "grid": self.sweep.grid}
            if self.sweep
            else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        if obj.get("schema_version") != CONFIG_SCHEMA_VERSION:
            raise ExperimentConfigError(
                f"unsupported config schema {obj.get('schema_version')!r}"
            )
        try:
            model = ModelConfig(**obj.get("model", {}))
        except (TypeError, ValueError) as exc:
            raise ExperimentConfigError(f"invalid model config: {exc}") from exc
        ev = obj.get("evaluation", {})
        concepts = ev.get("concepts")
        sweep = obj.get("sweep")
        return cls(
            name=obj.get("name", "experiment"),
            model=model,
            train=train_config_from_json(obj["train"]),
            evaluation=EvalSpec(
                concepts=tuple(ConceptValue[v] for v in concepts) if concepts else None,
                size=ev.get("size", 100),
                seed=ev.get("seed", 777),
                split=ev.get("split", "test"),
                degenerate_pools=ev.get("degenerate_pools", False),
                materialize=ev.get("materialize", False),
            ),
            sweep=SweepSpec(sweep["parameter"], sweep["grid"]) if sweep else None,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ExperimentConfigError(f"config file not found: {path}")
        try:
            return cls.from_json(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ExperimentConfigError(f"{path}: invalid JSON: {exc}") from exc


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_json(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def apply_override(config_dict: dict, parameter: str, value) -> dict:
    """Set a dotted-path leaf in a config dict, returning a new dict."""
    result = copy.deepcopy(config_dict)
    node = result
    keys = parameter.split(".")
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ExperimentConfigError(f"sweep parameter path {parameter!r} not found at {key!r}")
        node = node[key]
    if not isinstance(node, dict):
        raise ExperimentConfigError(f"sweep parameter path {parameter!r} does not end in a mapping")
    node[keys[-1]] = value
    return result


# --- presets ------------------------------------------------------------------


def get_preset(name: str) -> ExperimentConfig:
    """Shipped experiment presets.

    ``tiny`` runs end to end on the synthetic corpus in a couple of minutes on
    a desktop CPU. The ``paper-*`` presets carry full-scale settings and
    require user-prepared manifests; they are not CI material.
    """
    if name == "tiny":
        gen = {
            "domains": [
                {
                    "domain": "TOY",
                    "prior": 1.0,
                    "snr_range": [0.0, 5.0],
                    "source": {
                        "kind": "toy",
                        "n_speakers": 48,
                        "n_records_per_speaker": 3,
                        "seed": 3,
                        "female_ratio": 0.5,
                    },
                }
            ],
            "condition_priors": {
                "TOY": {"E_HIGH": 0.25, "E_LOW": 0.25, "G_FEMALE": 0.25, "G_MALE": 0.25}
            },
        }
        return ExperimentConfig.from_json(
            {
                "schema_version": 1,
                "name": "tiny",
                "model": {
                    "num_blocks": 2,
                    "channels": 16,
                    "encoder_bases": 64,
                    "expansion": 16,
                    "block_depth": 2,
                },
                "train": {
                    "objective": "conditional",
                    "epochs": 2,
                    "epoch_size": 48,
                    "batch_size": 6,
                    "val_size": 6,
                    "log_every": 4,
                    "generation": gen,
                },
                "evaluation": {"size": 12, "seed": 777},
            }
        )
    if name == "paper-wsj":
        return ExperimentConfig.from_json(
            {
                "schema_version": 1,
                "name": "paper-wsj",
                "model": {},
                "train": {
                    "objective": "conditional",
                    "torch_threads": None,
                    "generation": {
                        "domains": [
                            {
                                "domain": "WSJ",
                                "prior": 1.0,
                                "snr_range": [0.0, 5.0],
                                "source": {
                                    "kind": "manifest",
                                    "paths": {
                                        "train": "manifests/wsj/train.jsonl",
                                        "val": "manifests/wsj/val.jsonl",
                                        "test": "manifests/wsj/test.jsonl",
                                    },
                                },
                            }
                        ],
                        "condition_priors": {
                            "WSJ": {"E_HIGH": 0.25, "E_LOW": 0.25, "G_FEMALE": 0.25, "G_MALE": 0.25}
                        },
                    },
                },
                "evaluation": {"size": 3000, "seed": 20210101},
            }
        )
    if name == "paper-slib-svox":
        return ExperimentConfig.from_json(
            {
                "schema_version": 1,
                "name": "paper-slib-svox",
                "model": {},
                "train": {
                    "objective": "conditional",
                    "torch_threads": None,
                    "generation": {
                        "domains": [
                            {
                                "domain": "SLIB",
                                "prior": 0.5,
                                "snr_range": [0.0, 2.5],
                                "source": {
                                    "kind": "manifest",
                                    "paths": {
                                        "train": "manifests/slib/train.jsonl",
                                        "val": "manifests/slib/val.jsonl",
                                        "test": "manifests/slib/test.jsonl",
                                    },
                                },
                            },
                            {
                                "domain": "SVOX",
                                "prior": 0.5,
                                "snr_range": [0.0, 2.5],
                                "source": {
                                    "kind": "manifest",
                                    "paths": {
                                        "train": "manifests/svox/train.jsonl",
                                        "val": "manifests/svox/val.jsonl",
                                        "test": "manifests/svox/test.jsonl",
                                    },
                                },
                            },
                        ],
                        "condition_priors": {
                            "SLIB": {"G_FEMALE": 0.25, "G_MALE": 0.25, "S_NEAR": 0.25, "S_FAR": 0.25},
                            "SVOX": {
                                "L_EN": 0.265,
                                "L_FR": 0.075,
                                "L_DE": 0.08,
                                "L_ES": 0.08,
                                "S_NEAR": 0.25,
                                "S_FAR": 0.25,
                            },
                        },
                        "spatial_pairing": "uniform_over_pairs",
                    },
                },
                "evaluation": {"size": 3000, "seed": 20210101},
            }
        )
    raise ExperimentConfigError(
        f"unknown preset {name!r}; available: tiny, paper-wsj, paper-slib-svox"
    )


def resolve_config(spec: str | Path) -> ExperimentConfig:
    """Load a config file, or a preset via the ``preset:<name>`` form."""
    text = str(spec)
    if text.startswith("preset:"):
        return get_preset(text.removeprefix("preset:"))
    return ExperimentConfig.load(spec)


# --- runners ------------------------------------------------------------------


def build_eval_samples(config: ExperimentConfig):
    """Fixed eval sets per concept; degenerate pools included when configured."""
    concepts = config.evaluation.concepts or _active_concepts(config.train)
    if not concepts:
        raise ExperimentConfigError("no eval concepts configured or derivable from priors")
    samples = []
    for concept in concepts:
        samples.extend(
            make_eval_set(
                config.train.generation,
                concept,
                n=config.evaluation.size,
                seed=config.evaluation.seed,
                split=config.evaluation.split,
                degenerate=False,
            )
        )
        if config.evaluation.degenerate_pools:
            samples.extend(
                make_eval_set(
                    config.train.generation,
                    concept,
                    n=config.evaluation.size,
                    seed=config.evaluation.seed,
                    split=config.evaluation.split,
                    degenerate=True,
                )
            )
    return samples


def evaluate_checkpoint(
    checkpoint: str | Path,
    config: ExperimentConfig,
    out_dir: str | Path,
    label: str | None = None,
) -> EvalReport:
    """Evaluate a stored model on the config's eval sets; write JSON + table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, payload = model_from_checkpoint(checkpoint)
    samples = build_eval_samples(config)
    provenance = {
        "checkpoint": Path(checkpoint).name,
        "checkpoint_step": payload.get("step"),
        "config_hash": config_hash(config),
        "eval_seed": config.evaluation.seed,
        "eval_split": config.evaluation.split,
        "eval_size": config.evaluation.size,
    }
    if model.config.conditioned:
        report = evaluate_conditional(model, samples, provenance=provenance)
    else:
        report = evaluate_pit_oracle(model, samples, provenance=provenance)
    report.save(out_dir / "report.json")
    (out_dir / "report.txt").write_text(
        format_report_table(report, label or config.name)
    )
    if config.evaluation.materialize:
        write_eval_set(samples, out_dir / "eval_set")
    return report


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> tuple[TrainResult, EvalReport]:
    """Train per config, then evaluate the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = config.to_json()
    resolved["config_hash"] = config_hash(config)
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    torch.manual_seed(config.train.seed)
    model = SeparationModel(config.model)
    result = train(model, config.train, out_dir / "checkpoints")
    report = evaluate_checkpoint(result.checkpoint_path, config, out_dir)
    return result, report


def run_sweep(config: ExperimentConfig, out_dir: str | Path) -> Path:
    """Train/evaluate one model per grid point; emit summary CSV and figures.

    Per-point failures are recorded in the summary and the sweep continues.
    """
    if config.sweep is None:
        raise ExperimentConfigError("config has no sweep section")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = config.to_json()
    parameter = config.sweep.parameter
    rows: list[dict] = []
    failures: list[dict] = []
    reports: list[tuple[str, EvalReport]] = []
    for i, value in enumerate(config.sweep.grid):
        label = f"point_{i:02d}"
        point_dict = apply_override(base, parameter, value)
        point_dict["sweep"] = None
        point_dict["name"] = f"{config.name}-{label}"
        try:
            point_config = ExperimentConfig.from_json(point_dict)
            _, report = run_experiment(point_config, out_dir / label)
        except Exception as exc:  # per-point failures must not kill the sweep
            failures.append({"grid_index": i, "grid_value": value, "error": str(exc)})
            continue
        reports.append((f"{parameter}={value}", report))
        for concept, pools in report.concepts.items():
            for pool, stats in pools.items():
                rows.append(
                    {
                        "grid_index": i,
                        "grid_value": json.dumps(value),
                        "concept": concept,
                        "pool": pool,
                        "median_si_sdr": stats.median,
                        "count": stats.count,
                    }
                )

    summary_csv = out_dir / "summary.csv"
    with summary_csv.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["grid_index", "grid_value", "concept", "pool", "median_si_sdr", "count"]
        )
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / "summary.json").write_text(
        json.dumps(
            {
                "parameter": parameter,
                "grid": config.sweep.grid,
                "config_hash": config_hash(config),
                "failures": failures,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    if reports:
        (out_dir / "summary.txt").write_text(format_comparison_table(reports))

    from .plotting import render_sweep_figures  # deferred: pulls in matplotlib

    render_sweep_figures(rows, out_dir, x_label=parameter)
    return summary_csv
