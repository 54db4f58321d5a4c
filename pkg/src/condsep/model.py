"""Conditional separation network: learned filterbank codec around a stack of
FiLM-modulated U-shaped convolution blocks.

The network maps a mixture (and, when conditioned, a one-hot concept vector)
to a target/other waveform pair. A mixture-consistency projection at the
output guarantees the pair sums to the input exactly. The unconditional twin
is the same network with the FiLM tables disabled; at FiLM's identity
initialization the two are numerically indistinguishable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditions import VOCABULARY_NAMES

CHECKPOINT_SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint could not be loaded against this build."""


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 16
    channels: int = 512
    encoder_bases: int = 512
    kernel_taps: int = 41
    hop: int = 20
    vocab_size: int = 10
    out_slots: int = 2
    conditioned: bool = True
    block_depth: int = 4
    expansion: int = 512

    def __post_init__(self) -> None:
        if self.hop > self.kernel_taps:
            raise ValueError("hop must not exceed kernel_taps")
        if min(self.num_blocks, self.channels, self.encoder_bases, self.vocab_size) < 1:
            raise ValueError("model dimensions must be positive")
        if self.out_slots != 2:
            raise ValueError("exactly two output slots are supported")


class FiLM(nn.Module):
    """Per-channel affine modulation selected by a one-hot concept vector.

    Holds one (vocab, channels) table each for scale and bias. Initialized to
    the identity (scale 1, bias 0) so conditioning is learned rather than
    injected as noise at step 0.
    """

    def __init__(self, vocab_size: int, channels: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(vocab_size, channels))
        self.bias = nn.Parameter(torch.zeros(vocab_size, channels))

    def forward(self, y: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        gamma = c @ self.scale  # (batch, channels)
        beta = c @ self.bias
        return gamma.unsqueeze(-1) * y + beta.unsqueeze(-1)


class UConvBlock(nn.Module):
    """Residual block with a U-shaped depthwise path.

    Pointwise expansion, ``depth`` depthwise convolutions each halving the
    frame count, a mirrored upsample-and-add path, and a pointwise projection
    back onto the residual stream. Output shape always equals input shape.
    """

    def __init__(self, channels: int, expansion: int, depth: int):
        super().__init__()
        self.depth = depth
        self.expand = nn.Conv1d(channels, expansion, 1)
        self.expand_norm = nn.GroupNorm(1, expansion)
        self.expand_act = nn.PReLU()
        self.down = nn.ModuleList()
        self.down_norms = nn.ModuleList()
        self.down_acts = nn.ModuleList()
        for _ in range(depth):
            self.down.append(nn.Conv1d(expansion, expansion, 5, stride=2, padding=2, groups=expansion))
            self.down_norms.append(nn.GroupNorm(1, expansion))
            self.down_acts.append(nn.PReLU())
        self.project = nn.Conv1d(expansion, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.expand_act(self.expand_norm(self.expand(x)))
        skips = []
        for conv, norm, act in zip(self.down, self.down_norms, self.down_acts):
            skips.append(h)
            h = act(norm(conv(h)))
        for skip in reversed(skips):
            h = F.interpolate(h, size=skip.shape[-1], mode="nearest") + skip
        return x + self.project(h)


class SeparationModel(nn.Module):
    """f(x, c) -> (target estimate, other estimate), mixture-consistent."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.encoder = nn.Conv1d(1, cfg.encoder_bases, cfg.kernel_taps, stride=cfg.hop, bias=False)
        self.input_norm = nn.GroupNorm(1, cfg.encoder_bases)
        self.input_proj = nn.Conv1d(cfg.encoder_bases, cfg.channels, 1)
        self.blocks = nn.ModuleList(
            UConvBlock(cfg.channels, cfg.expansion, cfg.block_depth) for _ in range(cfg.num_blocks)
        )
        if cfg.conditioned:
            self.films = nn.ModuleList(
                FiLM(cfg.vocab_size, cfg.channels) for _ in range(cfg.num_blocks)
            )
        else:
            self.films = None
        self.mask_act = nn.PReLU()
        self.mask_conv = nn.Conv1d(cfg.channels, cfg.out_slots * cfg.encoder_bases, 1)
        self.decoder = nn.ConvTranspose1d(cfg.encoder_bases, 1, cfg.kernel_taps, stride=cfg.hop, bias=False)

    def frame_count(self, n_samples: int) -> int:
        cfg = self.config
        if n_samples < cfg.kernel_taps:
            raise ValueError(
                f"input length {n_samples} is shorter than the {cfg.kernel_taps}-tap codec"
            )
        return math.ceil((n_samples - cfg.kernel_taps) / cfg.hop) + 1

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Rectified learned-filterbank latent, (batch, bases, frames)."""
        cfg = self.config
        frames = self.frame_count(x.shape[-1])
        padded_len = (frames - 1) * cfg.hop + cfg.kernel_taps
        x = F.pad(x, (0, padded_len - x.shape[-1]))
        return torch.relu(self.encoder(x.unsqueeze(1)))

    def _check_condition(self, c: torch.Tensor | None, batch: int) -> torch.Tensor:
        cfg = self.config
        if not cfg.conditioned:
            if c is not None:
                raise ValueError("unconditional model takes no condition vector")
            return None  # type: ignore[return-value]
        if c is None:
            raise ValueError("conditioned model requires a condition vector")
        if c.shape != (batch, cfg.vocab_size):
            raise ValueError(f"condition vector must have shape ({batch}, {cfg.vocab_size})")
        one = c.sum(dim=-1)
        if not torch.all((c == 0.0) | (c == 1.0)) or not torch.all(one == 1.0):
            raise ValueError("condition vectors must be one-hot")
        return c

    def forward(self, x: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        """Separate a batch of mixtures.

        x: (batch, samples); c: (batch, vocab) one-hot, or None for the
        unconditional model. Returns (batch, 2, samples) whose slots sum to x.
        """
        if x.dim() != 2:
            raise ValueError(f"expected (batch, samples) input, got shape {tuple(x.shape)}")
        if x.shape[-1] == 0:
            raise ValueError("cannot separate a length-zero input")
        batch, n_samples = x.shape
        c = self._check_condition(c, batch)

        latent = self.encode(x)
        h = self.input_proj(self.input_norm(latent))
        for b, block in enumerate(self.blocks):
            if self.films is not None:
                h = self.films[b](h, c)
            h = block(h)
        cfg = self.config
        masks = self.mask_conv(self.mask_act(h))
        masks = masks.view(batch, cfg.out_slots, cfg.encoder_bases, -1).softmax(dim=1)
        masked = masks * latent.unsqueeze(1)
        stacked = masked.reshape(batch * cfg.out_slots, cfg.encoder_bases, -1)
        decoded = self.decoder(stacked).squeeze(1)
        est = decoded.view(batch, cfg.out_slots, -1)[..., :n_samples]
        # mixture consistency: split the residual equally across slots
        residual = x.unsqueeze(1) - est.sum(dim=1, keepdim=True)
        return est + residual / cfg.out_slots


def count_parameters(config: ModelConfig) -> int:
    """Exact trainable-parameter count for a model built from this config."""
    model = SeparationModel(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def film_parameter_delta(config: ModelConfig) -> int:
    """Parameters the FiLM tables add over the unconditional twin."""
    return 2 * config.num_blocks * config.vocab_size * config.channels


def save_checkpoint(
    path: str | Path,
    model: SeparationModel,
    step: int = 0,
    epoch: int = -1,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a self-describing checkpoint archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": asdict(model.config),
        "vocabulary": list(VOCABULARY_NAMES),
        "step": int(step),
        "epoch": int(epoch),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint, refusing vocabulary or schema mismatches."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint schema {payload.get('schema_version')!r}"
        )
    vocab = payload.get("vocabulary")
    if tuple(vocab or ()) != VOCABULARY_NAMES:
        raise CheckpointError(
            f"{path}: vocabulary ordering mismatch; checkpoint has {vocab!r}, "
            f"this build uses {list(VOCABULARY_NAMES)!r}"
        )
    return payload


def model_from_checkpoint(path: str | Path) -> tuple[SeparationModel, dict]:
    payload = load_checkpoint(path)
    config = ModelConfig(**payload["config"])
    model = SeparationModel(config)
    model.load_state_dict(payload["model_state"])
    return model, payload
