"""Frozen decoder-only LM bridge: tokenizers, chat templates, prompt assembly,
teacher-forced forwards with hidden-state taps, and greedy generation."""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import AudioTokenSequence

DEFAULT_CONNECTOR_LAYERS = (1, 6, 12, 18, 24)
REFERENCE_LM_DEPTH = 24


class TokenizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tokenizers


class WordTokenizer:
    """Lowercasing whitespace word-level tokenizer over a closed vocabulary.

    Special tokens keep their case. Unknown words raise :class:`TokenizationError`; the toy corpus is closed
    so an OOV word always indicates a data bug.
    """

    SPECIALS = ("<unk>", "<s>", "</s>", "<|system|>", "<|user|>", "<|assistant|>", "<|audio|>", "<|/audio|>")

    def __init__(self, words: Sequence[str]):
        vocab = list(self.SPECIALS) + [w for w in words if w not in self.SPECIALS]
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate words in vocabulary")
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.eos_id = self.index["</s>"]

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.index:
                word = word.lower()
            try:
                ids.append(self.index[word])
            except KeyError:
                raise TokenizationError(f"cannot tokenize {text!r}: unknown word {word!r}") from None
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)


class HFTokenizer:
    def __init__(self, name_or_tokenizer):
        if isinstance(name_or_tokenizer, str):
            from transformers import AutoTokenizer

            name_or_tokenizer = AutoTokenizer.from_pretrained(name_or_tokenizer)
        self.tok = name_or_tokenizer
        self.eos_id = self.tok.eos_token_id

    def __len__(self):
        return len(self.tok)

    def encode(self, text: str) -> list[int]:
        ids = self.tok.encode(text, add_special_tokens=False)
        if text.strip() and not ids:
            raise TokenizationError(f"cannot tokenize {text!r}")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return self.tok.decode(list(ids), skip_special_tokens=True)


# ---------------------------------------------------------------------------
# Chat template and prompt assembly


@dataclass
class ChatTemplate:
    system_prefix: list[int]
    user_prefix: list[int]
    assistant_prefix: list[int]
    eos_id: int
    audio_begin: list[int] = field(default_factory=list)
    audio_end: list[int] = field(default_factory=list)

    def validate(self, vocab_size: int) -> None:
        for name in ("system_prefix", "user_prefix", "assistant_prefix", "audio_begin", "audio_end"):
            bad = [i for i in getattr(self, name) if not 0 <= i < vocab_size]
            if bad:
                raise ValueError(f"template field {name} has ids outside the vocabulary: {bad}")
        if not 0 <= self.eos_id < vocab_size:
            raise ValueError(f"eos id {self.eos_id} outside the vocabulary")

    @property
    def prefix_ids(self) -> list[int]:
        return self.system_prefix + self.user_prefix


TEMPLATE_FIELDS = ("system_prefix", "user_prefix", "assistant_prefix", "eos", "audio_begin", "audio_end")


def load_chat_template(path: Union[str, Path], tokenizer) -> ChatTemplate:
    """Read an INI file with a ``[template]`` section of text-valued fields.

    Example::

        [template]
        system_prefix = <s> <|system|>
        user_prefix = <|user|>
        assistant_prefix = <|assistant|>
        eos = </s>
    """
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path):
        raise FileNotFoundError(f"chat template not found: {path}")
    if "template" not in parser:
        raise ValueError(f"{path}: missing [template] section")
    section = parser["template"]
    unknown = set(section) - set(TEMPLATE_FIELDS)
    if unknown:
        raise ValueError(f"{path}: unknown template fields {sorted(unknown)}")
    eos_ids = tokenizer.encode(section.get("eos", ""))
    if len(eos_ids) != 1:
        raise ValueError(f"{path}: eos must be exactly one token, got {eos_ids}")
    return ChatTemplate(
        system_prefix=tokenizer.encode(section.get("system_prefix", "")),
        user_prefix=tokenizer.encode(section.get("user_prefix", "")),
        assistant_prefix=tokenizer.encode(section.get("assistant_prefix", "")),
        eos_id=eos_ids[0],
        audio_begin=tokenizer.encode(section.get("audio_begin", "")),
        audio_end=tokenizer.encode(section.get("audio_end", "")),
    )


@dataclass
class PromptSegment:
    kind: str
    ids: Optional[list[int]] = None
    audio: Optional[AudioTokenSequence] = None

    def __post_init__(self):
        if self.kind == "text":
            ok = self.ids is not None and self.audio is None
        elif self.kind == "audio":
            ok = self.audio is not None and self.ids is None
        else:
            raise ValueError(f"segment kind must be 'text' or 'audio', got {self.kind!r}")
        if not ok:
            raise ValueError(f"{self.kind} segment must carry exactly the {self.kind} payload")

    @classmethod
    def text(cls, ids: Sequence[int]) -> "PromptSegment":
        return cls("text", ids=list(ids))

    @classmethod
    def from_audio(cls, tokens: AudioTokenSequence) -> "PromptSegment":
        return cls("audio", audio=tokens)


def assemble_prompt(
    segments: Sequence[PromptSegment],
    template: ChatTemplate,
    embedder,
    audio_markers: bool = False,
) -> tuple[torch.Tensor, int]:
    """Embed ``system + user + segments + assistant`` into one (t+1, D_m) matrix.

    Returns the embeddings and ``boundary_t``, the index of the last prompt row.
    """
    if not segments:
        raise ValueError("prompt needs at least one segment")
    weight = embedder.weight
    dim = weight.shape[1]

    def embed(ids):
        return embedder(torch.tensor(ids, dtype=torch.long, device=weight.device))

    rows = [embed(template.prefix_ids)]
    for seg in segments:
        if seg.kind == "text":
            rows.append(embed(seg.ids))
            continue
        if seg.audio.dim != dim:
            raise ValueError(f"audio tokens are {seg.audio.dim}-dim but the LM embedding is {dim}-dim")
        if audio_markers:
            rows.append(embed(template.audio_begin))
        rows.append(seg.audio.tokens.to(weight.dtype))
        if audio_markers:
            rows.append(embed(template.audio_end))
    rows.append(embed(template.assistant_prefix))
    prompt = torch.cat(rows, dim=0)
    return prompt, prompt.shape[0] - 1


# ---------------------------------------------------------------------------
# LM adapters


@dataclass
class ToyLMConfig:
    vocab_size: int
    dim: int = 64
    depth: int = 2
    heads: int = 4
    max_len: int = 256
    mlp_ratio: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


def _rope(x: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotary position embedding over the last dim of (B, H, S, Dh)."""
    s, dh = x.shape[-2], x.shape[-1]
    inv = base ** (-torch.arange(0, dh, 2, dtype=x.dtype, device=x.device) / dh)
    ang = torch.arange(s, dtype=x.dtype, device=x.device)[:, None] * inv[None, :]
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        b, s, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(b, s, self.heads, d // self.heads).transpose(1, 2) for t in (q, k, v))
        att = F.scaled_dot_product_attention(_rope(q), _rope(k), v, is_causal=True)
        x = x + self.out(att.transpose(1, 2).reshape(b, s, d))
        return x + self.mlp(self.ln2(x))


class ToyDecoderLM(nn.Module):
    """Small pre-LN decoder with rotary attention, driven by input embeddings."""

    def __init__(self, cfg: ToyLMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.blocks = nn.ModuleList(_Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)

    def forward(self, embeds: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """``embeds`` (B, S, D) -> logits (B, S, V) and per-block outputs."""
        if embeds.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence of {embeds.shape[1]} positions exceeds max_len={self.cfg.max_len}")
        x = embeds
        hiddens = []
        for block in self.blocks:
            x = block(x)
            hiddens.append(x)
        return self.head(self.ln_f(x)), hiddens


class FrozenLM:
    """Adapter contract over a decoder-only LM whose weights never change.

    Subclasses provide ``_run(embeds) -> (logits (S, V), [hidden_1..hidden_depth])``.
    """

    vocab_size: int
    dim: int
    depth: int
    embedder: nn.Embedding
    lm_id: str = "lm"

    def _freeze(self, module: nn.Module) -> None:
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.module = module

    def embed(self, ids: Sequence[int]) -> torch.Tensor:
        w = self.embedder.weight
        return self.embedder(torch.tensor(list(ids), dtype=torch.long, device=w.device))

    def forward(self, embeds: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return self._run(embeds)

    def checksum(self) -> str:
        return module_checksum(self.module)

    @property
    def dtype(self) -> torch.dtype:
        return self.embedder.weight.dtype


class ToyLM(FrozenLM):
    def __init__(self, model: ToyDecoderLM, tokenizer: Optional[WordTokenizer] = None, lm_id: str = "toy"):
        self._freeze(model)
        self.model = model
        self.tokenizer = tokenizer
        self.lm_id = lm_id
        self.vocab_size = model.cfg.vocab_size
        self.dim = model.cfg.dim
        self.depth = model.cfg.depth
        self.embedder = model.tok_emb

    def _run(self, embeds):
        logits, hiddens = self.model(embeds.unsqueeze(0))
        return logits[0], [h[0] for h in hiddens]

    def save(self, path: Union[str, Path]) -> None:
        torch.save(
            {
                "kind": "toy-lm",
                "config": self.model.cfg.to_dict(),
                "state_dict": self.model.state_dict(),
                "vocab": self.tokenizer.vocab if self.tokenizer else None,
                "lm_id": self.lm_id,
            },
            path,
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ToyLM":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("kind") != "toy-lm":
            raise ValueError(f"{path} is not a toy LM file")
        model = ToyDecoderLM(ToyLMConfig(**blob["config"]))
        model.load_state_dict(blob["state_dict"])
        vocab = blob.get("vocab")
        tokenizer = WordTokenizer(vocab[len(WordTokenizer.SPECIALS):]) if vocab else None
        return cls(model, tokenizer, lm_id=blob.get("lm_id", "toy"))


class HFCausalLM(FrozenLM):
    """Any ``transformers`` causal LM that accepts ``inputs_embeds``.

    Hidden state ``l`` is ``hidden_states[l]`` from the model output (index 0
    is the embedding output and is never tapped).
    """

    def __init__(self, model_or_name, tokenizer=None):
        if isinstance(model_or_name, str):
            from transformers import AutoModelForCausalLM

            lm_id = model_or_name
            model_or_name = AutoModelForCausalLM.from_pretrained(model_or_name)
            tokenizer = tokenizer or HFTokenizer(lm_id)
        else:
            lm_id = getattr(model_or_name.config, "_name_or_path", "") or model_or_name.config.model_type
        self._freeze(model_or_name)
        self.model = model_or_name
        self.tokenizer = tokenizer
        self.lm_id = lm_id
        cfg = model_or_name.config
        self.vocab_size = cfg.vocab_size
        self.dim = cfg.hidden_size
        self.depth = cfg.num_hidden_layers
        self.embedder = model_or_name.get_input_embeddings()

    def _run(self, embeds):
        out = self.model(inputs_embeds=embeds.unsqueeze(0), output_hidden_states=True, use_cache=False)
        return out.logits[0], [h[0] for h in out.hidden_states[1:]]


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Forward passes


def scale_connector_layers(
    depth: int, layers: Sequence[int] = DEFAULT_CONNECTOR_LAYERS, reference_depth: int = REFERENCE_LM_DEPTH
) -> list[int]:
    """Rescale 1-based connector indices to a ``depth``-block model.

    ``round(l * depth / reference_depth)`` rounded half up, clamped to
    ``[1, depth]`` and deduplicated.
    """
    scaled = {min(depth, max(1, math.floor(l * depth / reference_depth + 0.5))) for l in layers}
    return sorted(scaled)


def check_layers(layers: Sequence[int], depth: int) -> None:
    bad = [l for l in layers if not 1 <= l <= depth]
    if bad:
        raise ValueError(f"connector layers {bad} out of range; valid indices are 1..{depth}")


@dataclass
class LMForwardOutput:
    response_logits: torch.Tensor  # (R, V)
    hidden_states: dict[int, torch.Tensor]  # l -> (R, D)


def forward_teacher_forced(
    prompt: torch.Tensor,
    boundary_t: int,
    response_ids: Sequence[int],
    layers: Sequence[int],
    lm: FrozenLM,
) -> LMForwardOutput:
    """Run prompt + ground-truth response through the LM.

    Row ``i`` of ``response_logits`` is the distribution for response token
    ``i`` given every earlier position. Hidden states are the block outputs at
    the response token positions ``t+1..T``.
    """
    if len(response_ids) == 0:
        raise ValueError("response must contain at least one token")
    if prompt.shape[0] != boundary_t + 1:
        raise ValueError(f"prompt has {prompt.shape[0]} rows but boundary_t={boundary_t}")
    check_layers(layers, lm.depth)
    r = len(response_ids)
    embeds = torch.cat([prompt, lm.embed(response_ids)], dim=0)
    logits, hiddens = lm.forward(embeds)
    t = boundary_t
    return LMForwardOutput(
        response_logits=logits[t : t + r],
        hidden_states={l: hiddens[l - 1][t + 1 : t + 1 + r] for l in layers},
    )


def argmax_lowest(row: torch.Tensor) -> int:
    """Argmax with ties broken toward the lowest token id."""
    best = row.max()
    return int(torch.nonzero(row == best)[0, 0])


@torch.no_grad()
def generate_greedy(prompt: torch.Tensor, lm: FrozenLM, max_new_tokens: int, eos_id: int) -> list[int]:
    """Greedy decoding; stops at ``eos_id`` (not emitted) or after ``max_new_tokens``."""
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    seq = prompt.detach()
    out: list[int] = []
    for _ in range(max_new_tokens):
        logits, _ = lm.forward(seq)
        tok = argmax_lowest(logits[-1])
        if tok == eos_id:
            break
        out.append(tok)
        seq = torch.cat([seq, lm.embed([tok])], dim=0)
    return out
