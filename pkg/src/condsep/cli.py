"""Command-line surface: corpus prep, training, evaluation, sweeps, plots.

Everything beyond file locations lives in JSON experiment configs; the only
environment knob is CONDSEP_OUTPUT_ROOT, against which relative output
directories are resolved. Commands exit 0 on success and nonzero with a
one-line machine-parsable ``error: <category>: <message>`` otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    BUILTIN_DOMAINS,
    LANGUAGES,
    Manifest,
    ManifestError,
    SourceRecord,
    check_table_counts,
    save_manifest,
    split_speakers,
    synth_toy_corpus,
    toy_domain,
)
from .experiments import (
    ExperimentConfig,
    ExperimentConfigError,
    evaluate_checkpoint,
    resolve_config,
    run_sweep,
)
from .mixgen import GenerationError
from .model import CheckpointError
from .signals import ZeroEnergyError

ERROR_CATEGORIES = {
    ExperimentConfigError: "config-invalid",
    ManifestError: "manifest-invalid",
    GenerationError: "generation-failed",
    CheckpointError: "checkpoint-invalid",
    ZeroEnergyError: "audio-unusable",
    FileNotFoundError: "file-missing",
    ValueError: "config-invalid",
}


def _out_dir(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get("CONDSEP_OUTPUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _parse_language_mix(raw: str | None) -> dict[str, float] | None:
    if raw is None:
        return None
    parts = [float(p) for p in raw.split(",")]
    if len(parts) != len(LANGUAGES):
        raise ExperimentConfigError(
            f"--language-mix needs {len(LANGUAGES)} comma-separated shares ({','.join(LANGUAGES)})"
        )
    total = sum(parts)
    if total <= 0:
        raise ExperimentConfigError("--language-mix shares must sum to a positive value")
    return {lang: share / total for lang, share in zip(LANGUAGES, parts)}


def cmd_synth_corpus(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domain = toy_domain()
    manifest = synth_toy_corpus(
        n_speakers=args.n_speakers,
        n_records_per_speaker=args.records_per_speaker,
        language_mix=_parse_language_mix(args.language_mix),
        seed=args.seed,
        female_ratio=args.female_ratio,
        domain=domain,
        audio_dir=out / "audio" if args.materialize else None,
    )
    train, val, test = split_speakers(manifest.records, domain, seed=args.seed)
    for part in (train, val, test):
        save_manifest(part, out / f"{part.partition}.jsonl")
    print(
        f"wrote {len(manifest.records)} records "
        f"({len(train.records)}/{len(val.records)}/{len(test.records)} train/val/test) to {out}"
    )
    return 0


def cmd_prepare_manifest(args: argparse.Namespace) -> int:
    if args.domain not in BUILTIN_DOMAINS:
        raise ExperimentConfigError(
            f"unknown domain {args.domain!r}; expected one of {sorted(BUILTIN_DOMAINS)}"
        )
    domain = BUILTIN_DOMAINS[args.domain]()
    records = []
    csv_path = Path(args.records)
    if not csv_path.exists():
        raise ManifestError(f"records file not found: {csv_path}")
    with csv_path.open(newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                records.append(
                    SourceRecord(
                        record_id=row["record_id"],
                        audio_ref=row["audio_ref"],
                        speaker_id=row["speaker_id"],
                        gender=row.get("gender") or None,
                        language=row.get("language") or None,
                        duration=float(row["duration"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ManifestError(f"{csv_path}:{i}: bad record row: {exc}") from exc
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split:
        ratios = tuple(int(p) for p in args.split.split(","))
        if len(ratios) != 3:
            raise ExperimentConfigError("--split needs three comma-separated integers")
        manifests = split_speakers(records, domain, ratios=ratios, seed=args.seed)
    else:
        manifests = (Manifest(domain, args.partition, records),)
    for manifest in manifests:
        path = out / f"{manifest.partition}.jsonl"
        save_manifest(manifest, path)
        for note in check_table_counts(manifest):
            print(f"warning: {note}", file=sys.stderr)
        print(f"wrote {len(manifest.records)} records to {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    import torch

    from .model import SeparationModel
    from .training import train

    config = resolve_config(args.config)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .experiments import config_hash

    resolved = config.to_json()
    resolved["config_hash"] = config_hash(config)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    torch.manual_seed(config.train.seed)
    model = SeparationModel(config.model)
    result = train(model, config.train, out / "checkpoints", resume_from=args.resume)
    print(
        f"trained {result.global_step} steps over {result.final_epoch + 1} epochs; "
        f"final checkpoint {result.checkpoint_path}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .conditions import ConceptValue

    config = resolve_config(args.config)
    if args.concepts:
        try:
            config.evaluation.concepts = tuple(
                ConceptValue[name.strip()] for name in args.concepts.split(",")
            )
        except KeyError as exc:
            raise ExperimentConfigError(f"unknown concept {exc}") from exc
    if args.degenerate_pools:
        config.evaluation.degenerate_pools = True
    if args.materialize:
        config.evaluation.materialize = True
    out = _out_dir(args.out)
    report = evaluate_checkpoint(args.checkpoint, config, out)
    print((out / "report.txt").read_text(), end="")
    print(f"report written to {out / 'report.json'}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = resolve_config(args.config)
    out = _out_dir(args.out)
    summary = run_sweep(config, out)
    print(f"sweep summary written to {summary}")
    return 0


def cmd_render_plots(args: argparse.Namespace) -> int:
    from .plotting import render_sweep_figures

    summary = Path(args.summary)
    if not summary.exists():
        raise FileNotFoundError(f"summary CSV not found: {summary}")
    rows = []
    with summary.open(newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "grid_index": int(row["grid_index"]),
                    "grid_value": row["grid_value"],
                    "concept": row["concept"],
                    "pool": row["pool"],
                    "median_si_sdr": float(row["median_si_sdr"]),
                    "count": int(row["count"]),
                }
            )
    out = _out_dir(args.out)
    written = render_sweep_figures(rows, out, x_label=args.x_label)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condsep",
        description="conditional target speech separation laboratory",
    )
    parser.add_argument("--version", action="version", version=f"condsep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="synthesize the deterministic toy corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-speakers", type=int, default=48)
    p.add_argument("--records-per-speaker", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--female-ratio", type=float, default=0.5)
    p.add_argument("--language-mix", help="comma shares for en,fr,de,es (default 53,15,16,16)")
    p.add_argument(
        "--materialize",
        action="store_true",
        help="write WAV files instead of self-describing toy:// references",
    )
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("prepare-manifest", help="build manifests from a records CSV")
    p.add_argument("--records", required=True, help="CSV with record_id,audio_ref,speaker_id,gender,language,duration")
    p.add_argument("--domain", required=True, help="WSJ, SLIB, SVOX, or TOY")
    p.add_argument("--out", required=True)
    p.add_argument("--partition", default="train", help="partition name when not splitting")
    p.add_argument("--split", help="speaker-disjoint split ratios, e.g. 8,1,1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_manifest)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True, help="config JSON path or preset:<name>")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fixed eval sets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help="config JSON path or preset:<name>")
    p.add_argument("--out", required=True)
    p.add_argument("--concepts", help="comma-separated concept subset, e.g. G_FEMALE,G_MALE")
    p.add_argument("--degenerate-pools", action="store_true")
    p.add_argument(
        "--materialize", action="store_true", help="also write the eval set WAVs and metadata"
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate across a parameter grid")
    p.add_argument("--config", required=True, help="config JSON path or preset:<name>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render-plots", help="re-render sweep figures from a summary CSV")
    p.add_argument("--summary", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x-label", default="grid value")
    p.set_defaults(func=cmd_render_plots)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single choke point for the error contract
        for exc_type, category in ERROR_CATEGORIES.items():
            if isinstance(exc, exc_type):
                print(f"error: {category}: {exc}", file=sys.stderr)
                return 2
        print(f"error: internal: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
