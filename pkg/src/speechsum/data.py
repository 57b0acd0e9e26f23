"""Paired speech/text manifests, teacher-response building, and collation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch

from .encoder import AudioEncoder, AudioInputError, WaveformInput, read_wav
from .lm import ChatTemplate, FrozenLM, PromptSegment, assemble_prompt, generate_greedy

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
RECORD_FIELDS = ("id", "audio_path", "transcript", "response", "response_stopped", "split",
                 "reference_summary", "lm_reference_summary")


class ManifestError(ValueError):
    pass


@dataclass
class PairedSample:
    id: str
    audio_path: str
    transcript: str
    split: str = "train"
    response: Optional[str] = None
    # False when greedy decoding hit the length cap instead of emitting EOS
    response_stopped: bool = True
    reference_summary: Optional[str] = None
    lm_reference_summary: Optional[str] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id}: split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> dict:
        d = {"id": self.id, "audio_path": self.audio_path, "transcript": self.transcript, "split": self.split}
        if self.response is not None:
            d["response"] = self.response
            d["response_stopped"] = self.response_stopped
        for key in ("reference_summary", "lm_reference_summary"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d


@dataclass
class Manifest:
    records: list[PairedSample]
    metadata: dict = field(default_factory=dict)
    # directory that relative audio paths are resolved against
    base_dir: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for r in self.records:
            key = (r.audio_path, r.split)
            if key in seen:
                raise ManifestError(f"duplicate record for {r.audio_path!r} in split {r.split!r}")
            seen.add(key)

    def split(self, name: str) -> list[PairedSample]:
        return [r for r in self.records if r.split == name]

    def audio_file(self, record: PairedSample) -> Path:
        p = Path(record.audio_path)
        return p if p.is_absolute() else self.base_dir / p

    def load_audio(self, record: PairedSample) -> WaveformInput:
        return read_wav(self.audio_file(record))

    @property
    def has_responses(self) -> bool:
        return bool(self.records) and all(r.response is not None for r in self.records)

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS if self.split(s)}


def read_manifest(path: Union[str, Path]) -> Manifest:
    """Read a JSONL manifest: a header record, then one sample per line."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise ManifestError(f"{path}: first line must be a header record")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        d = json.loads(line)
        unknown = set(d) - set(RECORD_FIELDS)
        if unknown:
            raise ManifestError(f"{path}:{n}: unknown fields {sorted(unknown)}")
        d.setdefault("id", Path(d["audio_path"]).stem)
        records.append(PairedSample(**d))
    metadata = {k: v for k, v in header.items() if k != "type"}
    if any(r.response is not None for r in records) and "provenance" not in metadata:
        raise ManifestError(f"{path}: responses present but provenance missing")
    return Manifest(records, metadata, base_dir=path.parent)


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> None:
    meta = dict(manifest.metadata)
    meta["split_sizes"] = manifest.split_sizes()
    lines = [json.dumps({"type": "header", **meta}, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------


@dataclass
class BuildReport:
    manifest: Manifest
    skipped: list[str] = field(default_factory=list)
    rejected: list[str] = field(default_factory=list)


def response_cap(n_transcript_tokens: int) -> int:
    """Greedy decoding budget: twice the transcript length in tokens."""
    return 2 * n_transcript_tokens


def build_response_dataset(
    manifest: Manifest, lm: FrozenLM, tokenizer, template: ChatTemplate, corpus: str = "corpus"
) -> BuildReport:
    """Fill ``response`` for every record by greedy-decoding the frozen LM on its transcript.

    Records whose audio is missing or undecodable are skipped; records with an
    empty transcript are rejected. No other filtering is applied.
    """
    out, skipped, rejected = [], [], []
    for rec in manifest.records:
        if not rec.transcript.strip():
            logger.warning("record %s rejected: empty transcript", rec.id)
            rejected.append(rec.id)
            continue
        try:
            manifest.load_audio(rec)
        except (FileNotFoundError, AudioInputError) as exc:
            logger.warning("record %s skipped: %s", rec.id, exc)
            skipped.append(rec.id)
            continue
        ids = tokenizer.encode(rec.transcript)
        prompt, _ = assemble_prompt([PromptSegment.text(ids)], template, lm.embedder)
        cap = response_cap(len(ids))
        gen = generate_greedy(prompt, lm, cap, template.eos_id)
        filled = PairedSample(**{**rec.to_json(), "response": tokenizer.decode(gen),
                                 "response_stopped": len(gen) < cap})
        out.append(filled)
    metadata = {
        **{k: v for k, v in manifest.metadata.items() if k not in ("provenance", "split_sizes")},
        "corpus": manifest.metadata.get("corpus", corpus),
        "provenance": {
            "lm_id": lm.lm_id,
            "lm_checksum": lm.checksum(),
            "decoding": "greedy",
            "tie_break": "lowest_token_id",
            "max_new_tokens": "2 x transcript tokens",
        },
    }
    return BuildReport(Manifest(out, metadata, base_dir=manifest.base_dir), skipped, rejected)


# ---------------------------------------------------------------------------


@dataclass
class CollatedPair:
    """Student (audio) and teacher (text) prompts sharing one response."""

    sample_id: str
    student_prompt: torch.Tensor
    student_t: int
    teacher_prompt: torch.Tensor
    teacher_t: int
    response_ids: list[int]


def response_ids_for(sample: PairedSample, tokenizer, template: ChatTemplate, append_eos: bool = True) -> list[int]:
    if not sample.response or not sample.response.strip():
        raise ManifestError(f"record {sample.id}: empty teacher response; run build-responses first")
    ids = tokenizer.encode(sample.response)
    if append_eos and sample.response_stopped:
        ids = ids + [template.eos_id]
    return ids


def teacher_prompt(sample: PairedSample, lm: FrozenLM, tokenizer, template: ChatTemplate):
    ids = tokenizer.encode(sample.transcript)
    return assemble_prompt([PromptSegment.text(ids)], template, lm.embedder)


def student_prompt(wave: WaveformInput, encoder: AudioEncoder, lm: FrozenLM, template: ChatTemplate,
                   audio_markers=False):
    tokens = encoder(wave)
    return assemble_prompt([PromptSegment.from_audio(tokens)], template, lm.embedder, audio_markers)


def collate(
    sample: PairedSample,
    wave: WaveformInput,
    encoder: AudioEncoder,
    lm: FrozenLM,
    tokenizer,
    template: ChatTemplate,
    append_eos: bool = True,
    audio_markers: bool = False,
) -> CollatedPair:
    response = response_ids_for(sample, tokenizer, template, append_eos)
    s_prompt, s_t = student_prompt(wave, encoder, lm, template, audio_markers)
    t_prompt, t_t = teacher_prompt(sample, lm, tokenizer, template)
    return CollatedPair(sample.id, s_prompt, s_t, t_prompt, t_t, response)
