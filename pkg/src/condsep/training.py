"""Training loops: conditional l1 objective and the PIT baseline.

Batches are drawn from the index-keyed mixture generator, so the exact batch
sequence is a pure function of (config, seed, epoch) and a run can be resumed
from any epoch checkpoint bit-for-bit. Metrics stream to an append-only
JSON-lines log.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditions import ConceptValue, Degeneracy
from .mixgen import GenerationConfig, MixtureSample, make_epoch, make_eval_set
from .model import SeparationModel, load_checkpoint, save_checkpoint
from .signals import Waveform, si_sdr

OBJECTIVES = ("conditional", "pit")


@dataclass
class TrainConfig:
    generation: GenerationConfig
    objective: str = "conditional"
    batch_size: int = 6
    initial_lr: float = 1e-3
    lr_halving_period: int = 20
    epochs: int = 120
    epoch_size: int = 20000
    seed: int = 0
    grad_clip: float = 5.0
    val_size: int = 100
    val_concepts: tuple[ConceptValue, ...] | None = None
    # desk-scale helpers: cap total optimizer steps, or train repeatedly on the
    # first epoch's fixed mixtures instead of streaming fresh ones
    max_steps: int | None = None
    reuse_first_epoch: bool = False
    log_every: int = 50
    torch_threads: int | None = 1

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if min(self.batch_size, self.epochs, self.epoch_size) < 1 or self.initial_lr <= 0:
            raise ValueError("batch size, epochs, epoch size, and lr must be positive")
        if self.lr_halving_period < 1:
            raise ValueError("lr halving period must be positive")
        if self.objective == "pit" and any(
            rho > 0 for rho in self.generation.degenerate_ratio.values()
        ):
            raise ValueError(
                "PIT training needs two genuine sources per mixture; "
                "set all degenerate ratios to zero"
            )


def conditional_loss(estimates: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
    """l1 between slot-ordered estimates and references.

    Mean over time, summed over the two slots, averaged over the batch. Slot
    order matters: swapped estimates are penalized, which is what makes the
    conditioning informative.
    """
    if estimates.shape != references.shape:
        raise ValueError("estimates and references must share shape")
    err = (estimates - references).abs().mean(dim=-1)  # (batch, slots)
    return err.sum(dim=-1).mean()


def pit_loss(estimates: torch.Tensor, references: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Permutation-invariant l1 over the two slots.

    Returns (loss, assignment) where assignment[b] gives, per batch item, the
    reference index matched to each estimate slot. Ties resolve to the
    identity permutation.
    """
    if estimates.shape != references.shape:
        raise ValueError("estimates and references must share shape")
    if estimates.dim() == 2:
        estimates = estimates.unsqueeze(0)
        references = references.unsqueeze(0)
    direct = (estimates - references).abs().mean(dim=-1).sum(dim=-1)
    swapped = (estimates - references.flip(1)).abs().mean(dim=-1).sum(dim=-1)
    use_swap = swapped < direct
    loss = torch.where(use_swap, swapped, direct).mean()
    identity = torch.tensor([0, 1], device=estimates.device)
    swap = torch.tensor([1, 0], device=estimates.device)
    assignment = torch.where(use_swap.unsqueeze(-1), swap, identity)
    return loss, assignment


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate under the halving schedule."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.initial_lr * 0.5 ** (epoch // config.lr_halving_period)


def collate(samples: list[MixtureSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into (mixtures, references, condition vectors) tensors."""
    x = torch.from_numpy(np.stack([s.mixture.samples for s in samples])).float()
    refs = torch.from_numpy(
        np.stack([np.stack([s.target.samples, s.other.samples]) for s in samples])
    ).float()
    c = torch.from_numpy(np.stack([s.condition_vector for s in samples])).float()
    return x, refs, c


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, step: int, seed_tuples: list[tuple[int, str, int]]):
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step}; offending batch "
            f"seed tuples: {seed_tuples}"
        )
        self.seed_tuples = seed_tuples


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_epoch: int
    global_step: int
    history: list[dict] = field(default_factory=list)


def _active_concepts(config: TrainConfig) -> tuple[ConceptValue, ...]:
    if config.val_concepts is not None:
        return tuple(config.val_concepts)
    concepts: list[ConceptValue] = []
    for priors in config.generation.condition_priors.values():
        for v, p in priors.items():
            if p > 0 and v not in concepts:
                concepts.append(v)
    return tuple(sorted(concepts, key=int))


def _validation_medians(
    model: SeparationModel, config: TrainConfig, concepts: tuple[ConceptValue, ...]
) -> dict[str, float]:
    """Median SI-SDR of the target estimate on fixed per-concept val sets."""
    medians = {}
    model.eval()
    with torch.no_grad():
        for concept in concepts:
            samples = make_eval_set(
                config.generation,
                concept,
                n=config.val_size,
                seed=config.seed + 0xE7A1,
                split="val",
                degenerate=False,
            )
            scores = []
            for chunk_start in range(0, len(samples), config.batch_size):
                chunk = samples[chunk_start : chunk_start + config.batch_size]
                x, refs, c = collate(chunk)
                est = model(x, c if model.config.conditioned else None)
                for i, sample in enumerate(chunk):
                    rate = sample.mixture.sample_rate
                    per_slot = [
                        si_sdr(Waveform(est[i, s].numpy().astype(np.float64), rate), sample.target)
                        for s in range(est.shape[1])
                    ]
                    # conditioned models are scored on the target slot; the
                    # unconditional baseline gets the oracle assignment
                    scores.append(per_slot[0] if model.config.conditioned else max(per_slot))
            medians[concept.name] = float(np.median(scores))
    model.train()
    return medians


def train(
    model: SeparationModel,
    config: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the epoch loop, checkpointing every epoch and logging metrics.

    Training is resumable: pass an epoch checkpoint and the run continues
    with the exact batch sequence an uninterrupted run would have seen.
    """
    if config.objective == "conditional" and not model.config.conditioned:
        raise ValueError("conditional objective needs a conditioned model")
    if config.objective == "pit" and model.config.conditioned:
        raise ValueError("PIT objective needs an unconditional model")
    if config.torch_threads is not None:
        torch.set_num_threads(config.torch_threads)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model_state"])
        if payload.get("optimizer_state"):
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"] + 1
        global_step = payload["step"]

    concepts = _active_concepts(config)
    steps_per_epoch = config.epoch_size // config.batch_size
    fixed_samples: list[MixtureSample] | None = None
    history: list[dict] = []
    log_mode = "a" if resume_from is not None else "w"
    epoch = start_epoch - 1  # stays put when resuming an already-finished run
    checkpoint_path = out_dir / f"epoch_{epoch:04d}.pt"

    with metrics_path.open(log_mode) as log:

        def emit(record: dict) -> None:
            history.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()

        stop = False
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            if config.reuse_first_epoch:
                if fixed_samples is None:
                    fixed_samples = list(
                        make_epoch(config.generation, config.epoch_size, config.seed, 0)
                    )
                order = np.random.default_rng(
                    np.random.SeedSequence([config.seed, 0x5E9, epoch])
                ).permutation(len(fixed_samples))
                stream = [fixed_samples[i] for i in order]
            else:
                stream = make_epoch(config.generation, config.epoch_size, config.seed, epoch)

            batch: list[MixtureSample] = []
            epoch_losses = []
            steps_done = 0
            for sample in stream:
                batch.append(sample)
                if len(batch) < config.batch_size:
                    continue
                x, refs, c = collate(batch)
                optimizer.zero_grad()
                est = model(x, c if model.config.conditioned else None)
                if config.objective == "conditional":
                    loss = conditional_loss(est, refs)
                else:
                    loss, _ = pit_loss(est, refs)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(epoch, global_step, [s.seed_tuple for s in batch])
                loss.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                global_step += 1
                steps_done += 1
                loss_value = float(loss.detach())
                epoch_losses.append(loss_value)
                if global_step % config.log_every == 0:
                    emit(
                        {
                            "kind": "step",
                            "epoch": epoch,
                            "step": global_step,
                            "loss": loss_value,
                            "lr": lr,
                        }
                    )
                batch = []
                if config.max_steps is not None and global_step >= config.max_steps:
                    stop = True
                    break
                if steps_done >= steps_per_epoch:
                    break

            record = {
                "kind": "epoch",
                "epoch": epoch,
                "step": global_step,
                "lr": lr,
                "loss_mean": float(np.mean(epoch_losses)) if epoch_losses else None,
            }
            if config.val_size > 0 and concepts:
                record["val_median_si_sdr"] = _validation_medians(model, config, concepts)
            emit(record)
            checkpoint_path = save_checkpoint(
                out_dir / f"epoch_{epoch:04d}.pt",
                model,
                step=global_step,
                epoch=epoch,
                optimizer=optimizer,
            )
            if stop:
                break

    return TrainResult(
        checkpoint_path=Path(checkpoint_path),
        metrics_path=metrics_path,
        final_epoch=epoch,
        global_step=global_step,
        history=history,
    )
