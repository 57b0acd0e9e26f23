"""Modality-alignment training loop.

Each micro-step runs the frozen LM twice over the same response: once on the
text prompt (teacher, cached since the LM never changes) and once on the
audio prompt (student). Only encoder parameters receive gradients; updates
are applied every ``accumulation`` micro-steps with a linearly decaying LR.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import torch

from .data import CollatedPair, Manifest, ManifestError, PairedSample, collate, response_ids_for
from .encoder import AudioEncoder, EncoderConfig, WaveformInput
from .lm import (
    FrozenLM,
    LMForwardOutput,
    check_layers,
    forward_teacher_forced,
    module_checksum,
    scale_connector_layers,
)
from .objectives import PRESET_WEIGHTS, LossBundle, LossWeights, loss_bundle, ntp_loss

logger = logging.getLogger(__name__)


class MissingResponsesError(ManifestError):
    pass


class FrozenLMViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_steps: int = 2_400_000  # micro-steps
    accumulation: int = 16
    lr_initial: float = 5e-5
    lr_final: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    connector_layers: Optional[list[int]] = None  # None: rescale the 24-layer defaults to the LM depth
    pooling_mode: str = "uniform"
    seed: int = 0
    eval_every: Optional[int] = None  # in updates; None: 1/50 of the planned updates
    append_eos: bool = True
    audio_markers: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not self.lr_initial >= self.lr_final > 0:
            raise ValueError(f"need lr_initial >= lr_final > 0, got {self.lr_initial}, {self.lr_final}")
        if self.accumulation < 1:
            raise ValueError("accumulation must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    @property
    def planned_updates(self) -> int:
        return self.max_steps // self.accumulation

    def eval_interval(self) -> int:
        if self.eval_every:
            return self.eval_every
        return max(1, self.planned_updates // 50)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS: dict[str, dict] = {
    "full": {"weights": PRESET_WEIGHTS["full"]},
    "ntp_only": {"weights": PRESET_WEIGHTS["ntp_only"]},
    "ntp_ld": {"weights": PRESET_WEIGHTS["ntp_ld"]},
    "ntp_fd": {"weights": PRESET_WEIGHTS["ntp_fd"]},
    "ctc_pooling": {"weights": PRESET_WEIGHTS["full"], "pooling_mode": "ctc_aligned"},
    # desk-scale optimisation: same accumulation and 10:1 LR decay ratio, larger LR, short run
    "toy": {"lr_initial": 1e-2, "lr_final": 1e-3, "max_steps": 16 * 200},
}


def apply_presets(cfg: TrainConfig, names: Union[str, Sequence[str]]) -> TrainConfig:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    for name in names:
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        cfg = replace(cfg, **PRESETS[name])
    return cfg


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.max_steps:
        raise ValueError(f"step {step} outside [0, {cfg.max_steps}]")
    if cfg.max_steps == 0:
        return cfg.lr_initial
    return cfg.lr_initial + (cfg.lr_final - cfg.lr_initial) * step / cfg.max_steps


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    encoder_state: dict
    optimizer_state: Optional[dict]
    step: int
    updates: int
    val_ntp: float
    config: dict
    lm_checksum: str
    encoder_checksum: str = ""

    def save(self, path: Union[str, Path]) -> None:
        torch.save({"kind": "speechsum-encoder-checkpoint", **asdict(self)}, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.pop("kind", None) != "speechsum-encoder-checkpoint":
            raise ValueError(f"{path} is not an encoder checkpoint")
        return cls(**blob)

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.config["encoder"])


# ---------------------------------------------------------------------------


@dataclass
class PreparedSample:
    record: PairedSample
    wave: WaveformInput
    response_ids: list[int]
    teacher: LMForwardOutput


def connector_layers(cfg: TrainConfig, lm: FrozenLM) -> list[int]:
    layers = cfg.connector_layers if cfg.connector_layers else scale_connector_layers(lm.depth)
    check_layers(layers, lm.depth)
    return sorted(layers)


@torch.no_grad()
def teacher_forward(pair: CollatedPair, layers, lm: FrozenLM) -> LMForwardOutput:
    out = forward_teacher_forced(pair.teacher_prompt, pair.teacher_t, pair.response_ids, layers, lm)
    return LMForwardOutput(out.response_logits.clone(), {k: v.clone() for k, v in out.hidden_states.items()})


def prepare(records, manifest: Manifest, encoder, lm, tokenizer, template, cfg: TrainConfig) -> list[PreparedSample]:
    layers = connector_layers(cfg, lm)
    out = []
    for rec in records:
        try:
            wave = manifest.load_audio(rec)
            response_ids_for(rec, tokenizer, template, cfg.append_eos)
        except (OSError, ValueError) as exc:
            logger.warning("record %s excluded from training: %s", rec.id, exc)
            continue
        with torch.no_grad():
            pair = collate(rec, wave, encoder, lm, tokenizer, template, cfg.append_eos, cfg.audio_markers)
        out.append(PreparedSample(rec, wave, pair.response_ids, teacher_forward(pair, layers, lm)))
    return out


def student_forward(sample: PreparedSample, encoder: AudioEncoder, lm: FrozenLM, template, layers, cfg) -> LMForwardOutput:
    from .data import student_prompt

    prompt, t = student_prompt(sample.wave, encoder, lm, template, cfg.audio_markers)
    return forward_teacher_forced(prompt, t, sample.response_ids, layers, lm)


class NonFiniteLoss(FloatingPointError):
    pass


def train_step(sample: PreparedSample, encoder, lm, template, cfg: TrainConfig, scale: float = 1.0) -> LossBundle:
    """Forward both paths, compute the loss bundle and accumulate encoder gradients.

    Raises :class:`NonFiniteLoss` (without touching gradients) if any component is not finite.
    """
    layers = connector_layers(cfg, lm)
    student = student_forward(sample, encoder, lm, template, layers, cfg)
    bundle = loss_bundle(student, sample.teacher, sample.response_ids, cfg.weights)
    values = bundle.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLoss(f"sample {sample.record.id}: non-finite loss {values}")
    (bundle.total * scale).backward()
    return bundle


@torch.no_grad()
def validation_ntp(samples: Sequence[PreparedSample], encoder, lm, template, cfg) -> float:
    """Mean per-token NTP loss of the audio path over ``samples``."""
    total, n = 0.0, 0
    for s in samples:
        out = student_forward(s, encoder, lm, template, [], cfg)
        total += float(ntp_loss(out.response_logits, s.response_ids))
        n += len(s.response_ids)
    return total / max(n, 1)


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[dict]
    updates: int
    micro_steps: int
    aborted_steps: int = 0
    stopped_early: bool = False


def train(
    manifest: Manifest,
    encoder: AudioEncoder,
    lm: FrozenLM,
    tokenizer,
    template,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    callback: Optional[Callable[[int, AudioEncoder], bool]] = None,
    valid_split: str = "valid",
) -> TrainResult:
    """Train ``encoder`` in place and return the best-validation checkpoint.

    ``callback(updates, encoder)`` runs after every validation; returning True
    stops training. When the manifest has no validation records the training
    records are used for validation.
    """
    if not manifest.has_responses:
        raise MissingResponsesError("manifest has no teacher responses; run build-responses first")
    if cfg.pooling_mode != encoder.cfg.pooling_mode:
        raise ValueError(f"train config pooling_mode={cfg.pooling_mode} but encoder uses {encoder.cfg.pooling_mode}")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    lm_checksum = lm.checksum()
    layers = connector_layers(cfg, lm)

    train_set = prepare(manifest.split("train"), manifest, encoder, lm, tokenizer, template, cfg)
    if not train_set:
        raise ManifestError("no usable training records")
    valid_set = prepare(manifest.split(valid_split), manifest, encoder, lm, tokenizer, template, cfg)
    if not valid_set:
        logger.warning("no %s records; validating on the training records", valid_split)
        valid_set = train_set

    optimizer = torch.optim.AdamW(
        [p for p in encoder.parameters() if p.requires_grad],
        lr=lr_at_step(0, cfg), betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
    )
    snapshot = {"encoder": encoder.cfg.to_dict(), "train": cfg.to_dict(), "lm_id": lm.lm_id}
    out_dir = Path(out_dir) if out_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    def checkpoint(step, updates, val):
        return Checkpoint(copy.deepcopy(encoder.state_dict()), copy.deepcopy(optimizer.state_dict()),
                          step, updates, val, snapshot, lm_checksum, module_checksum(encoder))

    encoder.train()
    val = validation_ntp(valid_set, encoder, lm, template, cfg)
    best = checkpoint(0, 0, val)
    history = [{"event": "valid", "step": 0, "update": 0, "val_ntp": val}]
    interval = cfg.eval_interval()
    updates = micro = aborted = 0
    pending: list[dict] = []
    order: list[int] = []
    stopped = False

    try:
        while micro < cfg.max_steps and not stopped:
            if not order:
                order = list(range(len(train_set)))
                rng.shuffle(order)
            sample = train_set[order.pop(0)]
            micro += 1
            try:
                bundle = train_step(sample, encoder, lm, template, cfg, scale=1.0 / cfg.accumulation)
                pending.append(bundle.as_floats())
            except NonFiniteLoss as exc:
                logger.error("micro-step %d aborted: %s", micro, exc)
                aborted += 1
            if micro % cfg.accumulation:
                continue
            lr = lr_at_step(micro, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
            updates += 1
            record = {"event": "update", "step": micro, "update": updates, "lr": lr}
            if pending:
                record.update({k: sum(p[k] for p in pending) / len(pending) for k in pending[0]})
            pending = []
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if updates % interval == 0 or micro + cfg.accumulation > cfg.max_steps:
                val = validation_ntp(valid_set, encoder, lm, template, cfg)
                history.append({"event": "valid", "step": micro, "update": updates, "val_ntp": val})
                if log_fh:
                    log_fh.write(json.dumps(history[-1], sort_keys=True) + "\n")
                if val < best.val_ntp:
                    best = checkpoint(micro, updates, val)
                if callback is not None and callback(updates, encoder):
                    stopped = True
        # leftover micro-steps that never reached an update are discarded
        optimizer.zero_grad(set_to_none=True)
    finally:
        if log_fh:
            log_fh.close()
        encoder.eval()

    if lm.checksum() != lm_checksum:
        raise FrozenLMViolation("LM parameters changed during training")
    if out_dir:
        best.save(out_dir / "best.pt")
        checkpoint(micro, updates, history[-1].get("val_ntp", float("nan"))).save(out_dir / "last.pt")
    return TrainResult(best, history, updates, micro, aborted, stopped)


def load_encoder(ckpt: Checkpoint, backbone=None, boundary_provider=None) -> AudioEncoder:
    encoder = AudioEncoder(ckpt.encoder_config, backbone=backbone, boundary_provider=boundary_provider)
    encoder.load_state_dict(ckpt.encoder_state)
    if ckpt.encoder_checksum and module_checksum(encoder) != ckpt.encoder_checksum:
        raise ValueError("encoder parameters do not match the checkpoint checksum")
    encoder.eval()
    return encoder


def build_encoder(cfg: EncoderConfig, seed: int = 0, backbone=None, boundary_provider=None) -> AudioEncoder:
    torch.manual_seed(seed)
    return AudioEncoder(cfg, backbone=backbone, boundary_provider=boundary_provider)
