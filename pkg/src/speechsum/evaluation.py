"""Response perplexity, ROUGE, the ASR->LM cascade, and summarization reports."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import torch

from .encoder import AudioEncoder, WaveformInput
from .lm import ChatTemplate, FrozenLM, PromptSegment, assemble_prompt, forward_teacher_forced, generate_greedy
from .objectives import ntp_loss

logger = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = "Summarize the following article in 3 sentences or less"
SYSTEM_TAGS = ("text-reference", "cascade", "e2e")


# ---------------------------------------------------------------------------
# Perplexity


@torch.no_grad()
def response_nll(lm: FrozenLM, segments: Sequence[PromptSegment], response_ids: Sequence[int],
                 template: ChatTemplate) -> tuple[float, int]:
    """Summed negative log-likelihood of ``response_ids`` and its token count."""
    if len(response_ids) == 0:
        raise ValueError("response must contain at least one token")
    prompt, t = assemble_prompt(segments, template, lm.embedder)
    out = forward_teacher_forced(prompt, t, response_ids, [], lm)
    return float(ntp_loss(out.response_logits.double(), response_ids)), len(response_ids)


def perplexity_under_response(lm: FrozenLM, segments: Sequence[PromptSegment], response_ids: Sequence[int],
                              template: ChatTemplate) -> float:
    nll, n = response_nll(lm, segments, response_ids, template)
    return math.exp(nll / n)


# ---------------------------------------------------------------------------
# ROUGE


def rouge_tokens(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumerics."""
    return re.findall(r"[a-z0-9]+", (text or "").lower())


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap, n_cand, n_ref):
    # 2PR/(P+R) with P = o/c and R = o/r simplifies to 2o/(c+r): one rounding step
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    return 200.0 * overlap / (n_cand + n_ref)


def rouge_n_f1(candidate: str, reference: str, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    ref = _ngrams(rouge_tokens(reference), n)
    if not ref:
        logger.warning("empty reference for ROUGE-%d; scoring 0", n)
        return 0.0
    cand = _ngrams(rouge_tokens(candidate), n)
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    return _f1(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: str, reference: str) -> float:
    ref = rouge_tokens(reference)
    if not ref:
        logger.warning("empty reference for ROUGE-L; scoring 0")
        return 0.0
    cand = rouge_tokens(candidate)
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


@dataclass
class MetricAdapter:
    name: str
    score: Callable[[str, str], float]
    builtin: bool = True


BUILTIN_METRICS = {
    "rouge1": MetricAdapter("rouge1", lambda c, r: rouge_n_f1(c, r, 1)),
    "rouge2": MetricAdapter("rouge2", lambda c, r: rouge_n_f1(c, r, 2)),
    "rougeL": MetricAdapter("rougeL", rouge_l_f1),
}


def _meteor() -> MetricAdapter:
    from nltk.translate.meteor_score import meteor_score  # needs nltk + wordnet data

    return MetricAdapter("meteor", lambda c, r: 100.0 * meteor_score([r.split()], c.split()), builtin=False)


def _bertscore() -> MetricAdapter:
    from bert_score import score  # downloads a scoring model on first use

    def f(c, r):
        _, _, f1 = score([c], [r], lang="en", verbose=False)
        return 100.0 * float(f1[0])

    return MetricAdapter("bertscore", f, builtin=False)


EXTERNAL_METRICS = {"meteor": _meteor, "bertscore": _bertscore}


def get_metric(name: str) -> MetricAdapter:
    if name in BUILTIN_METRICS:
        return BUILTIN_METRICS[name]
    if name in EXTERNAL_METRICS:
        try:
            return EXTERNAL_METRICS[name]()
        except ImportError as exc:
            raise RuntimeError(f"metric {name!r} needs an optional dependency: {exc}") from exc
    raise ValueError(f"unknown metric {name!r}; builtin: {sorted(BUILTIN_METRICS)}, external: {sorted(EXTERNAL_METRICS)}")


# ---------------------------------------------------------------------------
# Summarization systems


def compose_instruction(base: str = DEFAULT_INSTRUCTION, suffix: str = "") -> str:
    return f"{base} {suffix}".strip() if suffix else base


def summarize_segments(segments, lm: FrozenLM, tokenizer, template: ChatTemplate, max_new_tokens: int) -> str:
    prompt, _ = assemble_prompt(segments, template, lm.embedder)
    return tokenizer.decode(generate_greedy(prompt, lm, max_new_tokens, template.eos_id))


def text_summarize(transcript: str, lm, tokenizer, template, instruction=DEFAULT_INSTRUCTION, max_new_tokens=64) -> str:
    if not transcript.strip():
        raise ValueError("empty transcript: nothing to summarize")
    segs = [PromptSegment.text(tokenizer.encode(instruction)), PromptSegment.text(tokenizer.encode(transcript))]
    return summarize_segments(segs, lm, tokenizer, template, max_new_tokens)


def cascade_summarize(wave: WaveformInput, asr, lm, tokenizer, template, instruction=DEFAULT_INSTRUCTION,
                      max_new_tokens=64) -> str:
    """ASR transcript, then the same text prompt the topline system uses."""
    transcript = asr.transcribe(wave)
    if not transcript.strip():
        raise ValueError("ASR produced an empty transcript")
    return text_summarize(transcript, lm, tokenizer, template, instruction, max_new_tokens)


@torch.no_grad()
def e2e_summarize(wave: WaveformInput, encoder: AudioEncoder, lm, tokenizer, template,
                  instruction=DEFAULT_INSTRUCTION, max_new_tokens=64) -> str:
    """Instruction text followed by the audio tokens of the article."""
    segs = [PromptSegment.text(tokenizer.encode(instruction)), PromptSegment.from_audio(encoder(wave))]
    return summarize_segments(segs, lm, tokenizer, template, max_new_tokens)


# A system maps (record, waveform, instruction) to a summary string.
System = Callable[[object, WaveformInput, str], str]


@dataclass
class EvalRecord:
    sample_id: str
    prompt_style: str
    system: str
    summary: str
    scores: dict = field(default_factory=dict)  # reference set -> metric -> value


def evaluate_summarization(
    records: Sequence,
    load_audio: Callable[[object], WaveformInput],
    systems: Mapping[str, System],
    metrics: Sequence[MetricAdapter],
    reference_sets: Sequence[str] = ("reference_summary", "lm_reference_summary"),
    instruction: str = DEFAULT_INSTRUCTION,
    prompt_style: str = "base",
) -> dict:
    """Corpus-mean scores per system, reference set and metric.

    Samples missing any configured reference are excluded and counted.
    """
    kept, excluded = [], []
    for rec in sorted(records, key=lambda r: r.id):
        if all(getattr(rec, ref, None) for ref in reference_sets):
            kept.append(rec)
        else:
            excluded.append(rec.id)
    per_sample: list[EvalRecord] = []
    for rec in kept:
        wave = load_audio(rec)
        for name, system in systems.items():
            summary = system(rec, wave, instruction)
            scores = {ref: {m.name: m.score(summary, getattr(rec, ref)) for m in metrics} for ref in reference_sets}
            per_sample.append(EvalRecord(rec.id, prompt_style, name, summary, scores))
    table = {}
    for name in systems:
        rows = [r for r in per_sample if r.system == name]
        table[name] = {
            ref: {m.name: (sum(r.scores[ref][m.name] for r in rows) / len(rows) if rows else float("nan"))
                  for m in metrics}
            for ref in reference_sets
        }
    return {
        "scores": table,
        "n_samples": len(kept),
        "excluded": excluded,
        "records": [asdict(r) for r in per_sample],
    }


def style_variation_run(records: Sequence, load_audio, summarize: System, suffixes: Sequence[str],
                        base_instruction: str = DEFAULT_INSTRUCTION) -> list[dict]:
    if not suffixes:
        raise ValueError("need at least one prompt suffix ('' is the base prompt)")
    out = []
    for rec in sorted(records, key=lambda r: r.id):
        wave = load_audio(rec)
        for i, suffix in enumerate(suffixes):
            prompt = compose_instruction(base_instruction, suffix)
            out.append({"sample_id": rec.id, "prompt_id": f"p{i}", "suffix": suffix, "prompt": prompt,
                        "summary": summarize(rec, wave, prompt)})
    return out


def corpus_perplexity(records: Sequence, prompt_for: Callable[[object], Sequence[PromptSegment]], lm, tokenizer,
                      template: ChatTemplate, append_eos: bool = True) -> float:
    """Token-weighted perplexity: exp(total NLL / total response tokens)."""
    from .data import response_ids_for

    total, n = 0.0, 0
    for rec in records:
        ids = response_ids_for(rec, tokenizer, template, append_eos)
        nll, k = response_nll(lm, prompt_for(rec), ids, template)
        total += nll
        n += k
    if n == 0:
        raise ValueError("no response tokens to score")
    return math.exp(total / n)


# ---------------------------------------------------------------------------
# Report formatting


def format_summarization_table(report: dict) -> str:
    scores = report["scores"]
    systems = list(scores)
    refsets = list(next(iter(scores.values())))
    metrics = list(next(iter(next(iter(scores.values())).values())))
    header = ["system"] + [f"{ref}:{m}" for ref in refsets for m in metrics]
    lines = ["\t".join(header)]
    for s in systems:
        cells = [f"{scores[s][ref][m]:.2f}" for ref in refsets for m in metrics]
        lines.append("\t".join([s] + cells))
    return "\n".join(lines) + "\n"


def format_perplexity_table(table: Mapping[str, Mapping[str, float]]) -> str:
    splits = list(table)
    systems = list(next(iter(table.values())))
    lines = ["\t".join(["split"] + systems)]
    for split in splits:
        lines.append("\t".join([split] + [f"{table[split][s]:.4f}" for s in systems]))
    return "\n".join(lines) + "\n"


def write_records(path: Union[str, Path], rows: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
