"""Audio encoder: frame backbone -> temporal average pooling -> linear projection.

The backbone is an adapter exposing ``frame_rate``, ``frame_dim`` and a
``forward`` over a 1-D waveform tensor. The default toy backbone slices the
waveform into 20 ms hops and applies a single linear layer, which keeps the
whole encoder cheap enough to train on a CPU.
"""

from __future__ import annotations

import logging
import wave as wavelib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
POOLING_MODES = ("uniform", "ctc_aligned")


class AudioInputError(ValueError):
    """Raised for waveforms that violate the 16 kHz mono contract."""


@dataclass(frozen=True)
class WaveformInput:
    samples: torch.Tensor
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = self.samples
        if not isinstance(samples, torch.Tensor):
            samples = torch.as_tensor(np.asarray(samples))
            object.__setattr__(self, "samples", samples)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioInputError(
                f"unsupported sample rate {self.sample_rate} Hz; audio must be {SAMPLE_RATE} Hz mono"
            )
        if samples.dim() != 1:
            raise AudioInputError(f"expected mono audio (1-D samples), got shape {tuple(samples.shape)}")
        if samples.numel() == 0:
            raise AudioInputError("empty audio")
        if not torch.isfinite(samples).all():
            raise AudioInputError("audio contains non-finite samples")
        if samples.abs().max() > 1.0:
            raise AudioInputError("audio samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.numel() / self.sample_rate


@dataclass
class FrameSequence:
    frames: torch.Tensor  # (N, D_f)
    frame_rate: float

    def __post_init__(self):
        if self.frames.dim() != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty (N, D) matrix, got {tuple(self.frames.shape)}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class AudioTokenSequence:
    tokens: torch.Tensor  # (N, D_m)
    token_rate: float

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class EncoderConfig:
    pool_kernel: int = 8
    pool_stride: int = 4
    pooling_mode: str = "uniform"
    frame_dim: int = 1024
    model_dim: int = 3072
    backbone_id: str = "toy-linear"
    projection_bias: bool = True

    def __post_init__(self):
        if not (self.pool_kernel >= self.pool_stride >= 1):
            raise ValueError(
                f"need pool_kernel >= pool_stride >= 1, got kernel={self.pool_kernel} stride={self.pool_stride}"
            )
        if self.frame_dim < 1 or self.model_dim < 1:
            raise ValueError("frame_dim and model_dim must be positive")
        if self.pooling_mode not in POOLING_MODES:
            raise ValueError(f"pooling_mode must be one of {POOLING_MODES}, got {self.pooling_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Backbones


class ToyLinearBackbone(nn.Module):
    """Non-overlapping 20 ms hops mapped to ``frame_dim`` by one linear layer."""

    frame_rate = 50.0

    def __init__(self, frame_dim: int, hop: int = SAMPLE_RATE // 50, bias: bool = True):
        super().__init__()
        self.hop = hop
        self.frame_dim = frame_dim
        self.frame_rate = SAMPLE_RATE / hop
        self.linear = nn.Linear(hop, frame_dim, bias=bias)

    def forward(self, samples: torch.Tensor) -> torch.Tensor:
        n = samples.numel() // self.hop
        if n < 1:
            raise AudioInputError(f"audio shorter than one {1000 * self.hop / SAMPLE_RATE:.0f} ms frame")
        hops = samples[: n * self.hop].reshape(n, self.hop).to(self.linear.weight.dtype)
        return self.linear(hops)


class HubertBackbone(nn.Module):
    """Wraps a ``transformers`` HuBERT model (50 Hz, 1024-dim for HuBERT-Large).

    Pass either a model name/path for ``from_pretrained`` or a ready
    ``HubertConfig`` (random init, used in tests).
    """

    frame_rate = 50.0

    def __init__(self, name_or_config):
        super().__init__()
        from transformers import HubertConfig, HubertModel

        if isinstance(name_or_config, HubertConfig):
            self.model = HubertModel(name_or_config)
        else:
            self.model = HubertModel.from_pretrained(name_or_config)
        self.frame_dim = self.model.config.hidden_size

    def forward(self, samples: torch.Tensor) -> torch.Tensor:
        x = samples.to(next(self.model.parameters()).dtype).unsqueeze(0)
        return self.model(input_values=x).last_hidden_state[0]


BACKBONES: dict[str, Callable[..., nn.Module]] = {
    "toy-linear": lambda cfg, **kw: ToyLinearBackbone(cfg.frame_dim, **kw),
    "hubert": lambda cfg, name="facebook/hubert-large-ls960-ft", **kw: HubertBackbone(name),
}


def build_backbone(cfg: EncoderConfig, **kwargs) -> nn.Module:
    try:
        factory = BACKBONES[cfg.backbone_id]
    except KeyError:
        raise ValueError(f"unknown backbone {cfg.backbone_id!r}; available: {sorted(BACKBONES)}") from None
    return factory(cfg, **kwargs)


# ---------------------------------------------------------------------------
# Operations


def extract_frames(wave: WaveformInput, backbone: nn.Module) -> FrameSequence:
    frames = backbone(wave.samples)
    return FrameSequence(frames, float(backbone.frame_rate))


def pool_uniform(frames: FrameSequence, kernel: int, stride: int) -> FrameSequence:
    """Average-pool windows ``[i*stride, i*stride + kernel)``; trailing partial windows are dropped.

    A sequence shorter than ``kernel`` pools to a single mean vector.
    """
    x = frames.frames
    if len(frames) < kernel:
        pooled = x.mean(dim=0, keepdim=True)
    else:
        # unfold -> (n_windows, D, kernel)
        pooled = x.unfold(0, kernel, stride).mean(dim=-1)
    return FrameSequence(pooled, frames.frame_rate / stride)


def pooled_length(n_frames: int, kernel: int, stride: int) -> int:
    if n_frames < kernel:
        return 1
    return (n_frames - kernel) // stride + 1


def project(pooled: FrameSequence, weights: torch.Tensor, bias: Optional[torch.Tensor] = None) -> AudioTokenSequence:
    """``token_i = pooled_i @ weights + bias`` with ``weights`` shaped (D_f, D_m)."""
    if pooled.dim != weights.shape[0]:
        raise ValueError(
            f"dimension mismatch: pooled frames are {pooled.dim}-dim but projection expects {weights.shape[0]}-dim input"
        )
    tokens = pooled.frames @ weights
    if bias is not None:
        tokens = tokens + bias
    return AudioTokenSequence(tokens, pooled.frame_rate)


BoundaryProvider = Callable[[WaveformInput, int], Sequence[int]]


class AudioEncoder(nn.Module):
    """Trainable speech-to-prompt-embedding encoder.

    ``boundary_provider(wave, n_frames)`` must return word start frame
    indices; it is required only for ``pooling_mode == "ctc_aligned"``.
    """

    def __init__(
        self,
        cfg: EncoderConfig,
        backbone: Optional[nn.Module] = None,
        boundary_provider: Optional[BoundaryProvider] = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone if backbone is not None else build_backbone(cfg)
        if getattr(self.backbone, "frame_dim", cfg.frame_dim) != cfg.frame_dim:
            raise ValueError(
                f"backbone produces {self.backbone.frame_dim}-dim frames but config says frame_dim={cfg.frame_dim}"
            )
        self.projection = nn.Linear(cfg.frame_dim, cfg.model_dim, bias=cfg.projection_bias)
        self.boundary_provider = boundary_provider

    def pool(self, frames: FrameSequence, wave: Optional[WaveformInput] = None) -> FrameSequence:
        cfg = self.cfg
        if cfg.pooling_mode == "uniform":
            return pool_uniform(frames, cfg.pool_kernel, cfg.pool_stride)
        from .ctc import pool_ctc_aligned

        if self.boundary_provider is None:
            raise RuntimeError("ctc_aligned pooling requires a word-boundary provider")
        boundaries = self.boundary_provider(wave, len(frames))
        return pool_ctc_aligned(frames, boundaries, cfg.pool_kernel, cfg.pool_stride)

    def forward(self, wave: WaveformInput) -> AudioTokenSequence:
        frames = extract_frames(wave, self.backbone)
        pooled = self.pool(frames, wave)
        bias = self.projection.bias
        return project(pooled, self.projection.weight.T, bias)


def encode(wave: WaveformInput, encoder: AudioEncoder) -> AudioTokenSequence:
    return encoder(wave)


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM, mono)


def read_wav(path: Union[str, Path]) -> WaveformInput:
    path = Path(path)
    try:
        with wavelib.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wavelib.Error, EOFError) as exc:
        raise AudioInputError(f"{path}: cannot decode WAV ({exc})") from exc
    if n_channels != 1:
        raise AudioInputError(f"{path}: expected mono audio, got {n_channels} channels")
    if width != 2:
        raise AudioInputError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return WaveformInput(torch.from_numpy(samples), rate)


def write_wav(path: Union[str, Path], samples, sample_rate: int = SAMPLE_RATE) -> None:
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    with wavelib.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
