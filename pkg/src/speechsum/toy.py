"""Desk-scale stand-ins: synthetic spoken words, a template-matching CTC ASR,
and a small decoder LM pretrained on a copy task.

Every word is rendered as a sum of sinusoids at harmonics of the 50 Hz frame
rate, starting on a frame boundary, so each 20 ms hop of a word carries the
same waveform (up to additive noise). A linear frame backbone therefore sees
one fixed vector per word, which keeps the encoder trainable in seconds.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ctc import CtcLabelPath, ctc_greedy_collapse, word_start_indices
from .encoder import SAMPLE_RATE, WaveformInput
from .lm import ChatTemplate, ToyDecoderLM, ToyLM, ToyLMConfig, WordTokenizer

HOP = SAMPLE_RATE // 50

CONTENT_WORDS = (
    "juventus lazio roma tevez goal match season title league team coach player "
    "city river bridge train station market garden house window morning evening "
    "rain snow storm wind winter summer letter book story king queen castle ship "
    "captain island forest mountain village doctor"
).split()

INSTRUCTION_WORDS = (
    "summarize the following article in 3 sentences or less without mentioning any names focusing on"
).split()

BASE_INSTRUCTION = "summarize the following article in 3 sentences or less"

TEMPLATE_INI = """[template]
system_prefix = <s>
user_prefix = <|user|>
assistant_prefix = <|assistant|>
eos = </s>
audio_begin = <|audio|>
audio_end = <|/audio|>
"""


def toy_tokenizer() -> WordTokenizer:
    return WordTokenizer(list(CONTENT_WORDS) + [w for w in INSTRUCTION_WORDS if w not in CONTENT_WORDS])


def toy_template(tok: WordTokenizer) -> ChatTemplate:
    return ChatTemplate(
        system_prefix=tok.encode("<s>"),
        user_prefix=tok.encode("<|user|>"),
        assistant_prefix=tok.encode("<|assistant|>"),
        eos_id=tok.eos_id,
        audio_begin=tok.encode("<|audio|>"),
        audio_end=tok.encode("<|/audio|>"),
    )


# ---------------------------------------------------------------------------
# Speech synthesis


@dataclass
class Lexicon:
    """Per-word one-hop waveforms and durations (in frames)."""

    words: list[str]
    hops: np.ndarray  # (n_words, HOP)
    durations: dict[str, int]

    @classmethod
    def build(cls, words: Sequence[str], seed: int = 1234, n_partials: int = 4) -> "Lexicon":
        rng = np.random.default_rng(seed)
        t = np.arange(HOP) / SAMPLE_RATE
        hops = []
        for _ in words:
            harmonics = rng.choice(np.arange(2, 80), size=n_partials, replace=False)
            amps = rng.uniform(0.3, 1.0, size=n_partials)
            phases = rng.uniform(0, 2 * np.pi, size=n_partials)
            x = sum(a * np.sin(2 * np.pi * 50.0 * k * t + p) for k, a, p in zip(harmonics, amps, phases))
            hops.append(0.5 * x / np.abs(x).max())
        durations = {w: int(rng.integers(8, 15)) for w in words}
        return cls(list(words), np.stack(hops), durations)

    def index(self, word: str) -> int:
        return self.words.index(word)

    def synthesize(self, words: Sequence[str], noise: float = 0.0, seed: int = 0, gap: int = 3, edge: int = 4):
        """Render ``words`` with ``gap`` silent frames between words and ``edge`` at both ends.

        Returns (samples, word_start_frames).
        """
        rng = np.random.default_rng(seed)
        pieces = [np.zeros(edge * HOP)]
        starts = []
        frame = edge
        for i, w in enumerate(words):
            if i:
                pieces.append(np.zeros(gap * HOP))
                frame += gap
            n = self.durations[w]
            starts.append(frame)
            pieces.append(np.tile(self.hops[self.index(w)], n))
            frame += n
        pieces.append(np.zeros(edge * HOP))
        x = np.concatenate(pieces)
        if noise:
            x = x + rng.normal(0.0, noise, size=x.shape)
        return np.clip(x, -1.0, 1.0), starts


class SignatureASR:
    """Frame-level nearest-signature classifier emitting a CTC label path.

    Label 0 is blank (low-energy frame); word ``k`` of the lexicon is label ``k + 1``.
    """

    blank = 0

    def __init__(self, lexicon: Lexicon, energy_threshold: float = 0.05):
        self.lexicon = lexicon
        self.energy_threshold = energy_threshold
        h = lexicon.hops
        self._unit = h / np.linalg.norm(h, axis=1, keepdims=True)

    def label_path(self, wave: WaveformInput) -> CtcLabelPath:
        x = wave.samples.detach().double().numpy()
        n = len(x) // HOP
        frames = x[: n * HOP].reshape(n, HOP)
        rms = np.sqrt((frames**2).mean(axis=1))
        scores = frames @ self._unit.T
        labels = np.where(rms < self.energy_threshold, 0, scores.argmax(axis=1) + 1)
        return CtcLabelPath(labels.tolist(), blank=self.blank, frame_rate=50.0)

    def transcribe(self, wave: WaveformInput) -> str:
        labels = ctc_greedy_collapse(self.label_path(wave))
        return " ".join(self.lexicon.words[k - 1] for k in labels)

    def word_starts(self, wave: WaveformInput, n_frames: Optional[int] = None) -> list[int]:
        starts = word_start_indices(self.label_path(wave))
        if n_frames is not None:
            starts = [s for s in starts if s < n_frames]
        return starts


class OracleASR:
    """Returns a fixed transcript per waveform (keyed by object identity or lookup)."""

    def __init__(self, lookup):
        self.lookup = lookup

    def transcribe(self, wave: WaveformInput) -> str:
        return self.lookup(wave)


class DroppingASR:
    """Wraps an ASR and deletes every other word of its transcript."""

    def __init__(self, inner):
        self.inner = inner

    def transcribe(self, wave: WaveformInput) -> str:
        return " ".join(self.inner.transcribe(wave).split()[::2])


# ---------------------------------------------------------------------------
# Toy LM


def pretrain_toy_lm(
    tok: WordTokenizer,
    template: ChatTemplate,
    steps: int = 800,
    dim: int = 64,
    depth: int = 2,
    heads: int = 4,
    max_user_tokens: int = 24,
    batch_size: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
) -> ToyLM:
    """Train a small decoder to answer a user turn by repeating it, then freeze it.

    The copy behaviour makes responses depend on every prompt token, which is
    what the modality-alignment objectives need to be meaningful at toy scale.
    """
    gen = torch.Generator().manual_seed(seed)
    rng = random.Random(seed)
    torch.manual_seed(seed)
    vocab = len(tok)
    first_word = len(WordTokenizer.SPECIALS)
    prefix = template.prefix_ids
    suffix = template.assistant_prefix
    max_len = len(prefix) + len(suffix) + 2 * max_user_tokens + 1
    cfg = ToyLMConfig(vocab_size=vocab, dim=dim, depth=depth, heads=heads, max_len=256)
    model = ToyDecoderLM(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    for _ in range(steps):
        seqs, masks = [], []
        for _ in range(batch_size):
            n = rng.randint(1, max_user_tokens)
            words = torch.randint(first_word, vocab, (n,), generator=gen).tolist()
            seq = prefix + words + suffix + words + [template.eos_id]
            mask = [0] * (len(seq) - n - 1) + [1] * (n + 1)
            pad = max_len - len(seq)
            seqs.append(seq + [0] * pad)
            masks.append(mask + [0] * pad)
        x = torch.tensor(seqs)
        m = torch.tensor(masks, dtype=torch.float32)[:, 1:]
        logits, _ = model(model.tok_emb(x[:, :-1]))
        nll = F.cross_entropy(logits.reshape(-1, vocab), x[:, 1:].reshape(-1), reduction="none")
        loss = (nll * m.reshape(-1)).sum() / m.sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return ToyLM(model, tok, lm_id=f"toy-copy-d{dim}x{depth}-s{seed}")


# ---------------------------------------------------------------------------
# Bundled fixture


def _record(i, words, split, audio_dir, lexicon, noise, **extra):
    from .encoder import write_wav

    name = f"utt{i:03d}"
    x, _ = lexicon.synthesize(words, noise=noise, seed=i)
    write_wav(audio_dir / f"{name}.wav", x)
    return {"id": name, "audio_path": f"audio/{name}.wav", "transcript": " ".join(words), "split": split, **extra}


def _write_jsonl(path, header, rows):
    import json

    lines = [json.dumps({"type": "header", **header}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def make_fixture(out_dir, seed: int = 0, lm_steps: int = 800, lexicon_seed: int = 1234,
                 lm: Optional[ToyLM] = None) -> dict:
    """Write the 10-sample toy corpus, evaluation sets, toy LM, template and run config.

    ``lm`` reuses an already pretrained copy LM instead of training one.
    Returns the paths written, keyed by role.
    """
    from pathlib import Path

    import yaml

    out = Path(out_dir)
    audio = out / "audio"
    audio.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    lexicon = Lexicon.build(CONTENT_WORDS, seed=lexicon_seed)
    tok = toy_tokenizer()
    template = toy_template(tok)
    (out / "template.ini").write_text(TEMPLATE_INI)
    if lm is None:
        lm = pretrain_toy_lm(tok, template, steps=lm_steps, seed=seed)
    lm.save(out / "toy_lm.pt")

    def words(lo, hi):
        return [rng.choice(CONTENT_WORDS) for _ in range(rng.randint(lo, hi))]

    splits = ["train"] * 7 + ["valid"] * 2 + ["test"]
    rows = [_record(i, words(3, 7), s, audio, lexicon, 0.005) for i, s in enumerate(splits)]
    _write_jsonl(out / "manifest.jsonl", {"corpus": "toy-paired"}, rows)

    summ = []
    for i in range(100, 103):
        w = words(8, 12)
        # two reference styles: a terse extract and a reworded one
        summ.append(_record(i, w, "test", audio, lexicon, 0.005,
                            reference_summary=" ".join(w[: len(w) // 2]),
                            lm_reference_summary=" ".join(x for j, x in enumerate(w) if j % 3 != 2)))
    _write_jsonl(out / "summarization.jsonl", {"corpus": "toy-articles"}, summ)

    clean = [_record(i, words(3, 7), "test", audio, lexicon, 0.005) for i in range(200, 203)]
    other = [_record(i, words(3, 7), "test", audio, lexicon, 0.02) for i in range(300, 303)]
    _write_jsonl(out / "perplexity_clean.jsonl", {"corpus": "toy-clean"}, clean)
    _write_jsonl(out / "perplexity_other.jsonl", {"corpus": "toy-other"}, other)

    config = {
        "lm": {"adapter": "toy", "path": "toy_lm.pt"},
        "template": "template.ini",
        "asr": {"adapter": "toy-signature", "lexicon_seed": lexicon_seed},
        "encoder": {"frame_dim": 64, "model_dim": 64, "pool_kernel": 8, "pool_stride": 4,
                    "pooling_mode": "uniform", "backbone_id": "toy-linear", "projection_bias": True},
        "train": {"max_steps": 16 * 200, "accumulation": 16, "lr_initial": 1e-2, "lr_final": 1e-3},
        "preset": "full",
        "manifests": {
            "input": "manifest.jsonl",
            "responses": "responses.jsonl",
            "summarization": "summarization.jsonl",
            "perplexity": {"clean": "perplexity_clean.jsonl", "other": "perplexity_other.jsonl"},
        },
        "metrics": ["rouge1", "rouge2", "rougeL"],
        "systems": ["text-reference", "cascade", "e2e"],
        "style_suffixes": ["", "without mentioning any names", "focusing on Lazio"],
        "summary_max_tokens": 32,
        "output_dir": "runs",
        "seed": seed,
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    return {"config": out / "config.yaml", "lm": out / "toy_lm.pt", "manifest": out / "manifest.jsonl"}
