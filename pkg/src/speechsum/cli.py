"""``speechsum`` command line: build-responses, train, summarize, evaluate, make-fixture."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config
from .data import ManifestError, build_response_dataset, read_manifest, write_manifest
from .encoder import AudioInputError, read_wav
from .evaluation import (
    DEFAULT_INSTRUCTION,
    cascade_summarize,
    compose_instruction,
    corpus_perplexity,
    e2e_summarize,
    evaluate_summarization,
    format_perplexity_table,
    format_summarization_table,
    get_metric,
    style_variation_run,
    text_summarize,
    write_records,
)
from .lm import HFCausalLM, PromptSegment, ToyLM, load_chat_template
from .training import Checkpoint, MissingResponsesError, build_encoder, load_encoder, train

logger = logging.getLogger("speechsum")


class UsageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Component factories


def load_lm(cfg: RunConfig):
    adapter = cfg.lm.get("adapter", "toy")
    if adapter == "toy":
        return ToyLM.load(cfg.path(cfg.lm["path"]))
    if adapter == "hf":
        return HFCausalLM(cfg.lm["name"])
    raise ConfigError(f"unknown LM adapter {adapter!r} (expected 'toy' or 'hf')")


def load_asr(cfg: RunConfig):
    asr_cfg = cfg.asr or {}
    adapter = asr_cfg.get("adapter")
    if adapter is None:
        return None
    if adapter == "toy-signature":
        from .toy import CONTENT_WORDS, Lexicon, SignatureASR

        return SignatureASR(Lexicon.build(CONTENT_WORDS, seed=asr_cfg.get("lexicon_seed", 1234)))
    raise ConfigError(f"unknown ASR adapter {adapter!r}")


class Components:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.lm = load_lm(cfg)
        self.tokenizer = self.lm.tokenizer
        if self.tokenizer is None:
            raise ConfigError("LM adapter provides no tokenizer")
        self.template = load_chat_template(cfg.path(cfg.template), self.tokenizer)
        self.template.validate(self.lm.vocab_size)
        self.asr = load_asr(cfg)

    def boundary_provider(self, pooling_mode: str):
        if pooling_mode != "ctc_aligned":
            return None
        if self.asr is None or not hasattr(self.asr, "word_starts"):
            raise ConfigError("ctc_aligned pooling needs an ASR adapter that reports word starts")
        return self.asr.word_starts

    def encoder_from_checkpoint(self, path) -> "object":
        ckpt = Checkpoint.load(path)
        if ckpt.lm_checksum != self.lm.checksum():
            logger.warning("checkpoint was trained against a different LM (checksum mismatch)")
        return load_encoder(ckpt, boundary_provider=self.boundary_provider(ckpt.encoder_config.pooling_mode))


def _out_dir(cfg: RunConfig, args, sub: str) -> Path:
    base = Path(args.out_dir) if getattr(args, "out_dir", None) else cfg.path(cfg.output_dir)
    out = base / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    overrides = {}
    if getattr(args, "preset", None):
        overrides["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "systems", None):
        overrides["systems"] = args.systems.split(",")
    if getattr(args, "metrics", None):
        overrides["metrics"] = args.metrics.split(",")
    return load_config(args.config, overrides)


# ---------------------------------------------------------------------------
# Commands


def cmd_build_responses(args) -> int:
    cfg = _load(args)
    comp = Components(cfg)
    src = cfg.manifest_path("input")
    dst = cfg.manifest_path("responses")
    report = build_response_dataset(read_manifest(src), comp.lm, comp.tokenizer, comp.template)
    write_manifest(report.manifest, dst)
    print(f"records: {len(report.manifest.records)} skipped: {len(report.skipped)} rejected: {len(report.rejected)}")
    print(f"wrote {dst}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    comp = Components(cfg)
    tcfg = cfg.train_config()
    path = cfg.manifest_path("responses")
    if not path.exists():
        raise MissingResponsesError(f"{path} not found; run build-responses first")
    manifest = read_manifest(path)
    enc_cfg = replace(cfg.encoder, pooling_mode=tcfg.pooling_mode)
    encoder = build_encoder(enc_cfg, seed=tcfg.seed, boundary_provider=comp.boundary_provider(tcfg.pooling_mode))
    out = _out_dir(cfg, args, "train")
    result = train(manifest, encoder, comp.lm, comp.tokenizer, comp.template, tcfg, out_dir=out)
    print(f"updates: {result.updates} micro-steps: {result.micro_steps} aborted: {result.aborted_steps}")
    print(f"best checkpoint: {out / 'best.pt'} val_ntp={result.best.val_ntp:.6f} (update {result.best.updates})")
    return 0


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return _out_dir(cfg, args, "train") / "best.pt"


def cmd_summarize(args) -> int:
    cfg = _load(args)
    comp = Components(cfg)
    encoder = comp.encoder_from_checkpoint(_checkpoint_path(cfg, args))
    wave = read_wav(args.audio)
    instruction = compose_instruction(args.prompt or DEFAULT_INSTRUCTION, args.style_suffix or "")
    n = cfg.summary_max_tokens
    print(e2e_summarize(wave, encoder, comp.lm, comp.tokenizer, comp.template, instruction, n))
    if args.cascade:
        if comp.asr is None:
            raise ConfigError("--cascade needs an ASR adapter in the config")
        print("cascade: " + cascade_summarize(wave, comp.asr, comp.lm, comp.tokenizer, comp.template, instruction, n))
    return 0


def _systems(comp: Components, encoder, names, max_tokens):
    lm, tok, tpl = comp.lm, comp.tokenizer, comp.template
    table = {
        "text-reference": lambda rec, wave, ins: text_summarize(rec.transcript, lm, tok, tpl, ins, max_tokens),
        "e2e": lambda rec, wave, ins: e2e_summarize(wave, encoder, lm, tok, tpl, ins, max_tokens),
    }
    if comp.asr is not None:
        table["cascade"] = lambda rec, wave, ins: cascade_summarize(wave, comp.asr, lm, tok, tpl, ins, max_tokens)
    missing = [n for n in names if n not in table]
    if missing:
        raise ConfigError(f"systems {missing} unavailable (cascade needs an ASR adapter)")
    return {n: table[n] for n in names}


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    comp = Components(cfg)
    encoder = comp.encoder_from_checkpoint(_checkpoint_path(cfg, args))
    out = _out_dir(cfg, args, "eval")
    lm, tok, tpl = comp.lm, comp.tokenizer, comp.template

    if args.mode == "perplexity":
        splits = cfg.manifests.get("perplexity") or {}
        if not splits:
            raise ConfigError("manifests.perplexity must name at least one split")
        table = {}
        for name, rel in splits.items():
            manifest = read_manifest(cfg.path(rel))
            if not manifest.has_responses:
                manifest = build_response_dataset(manifest, lm, tok, tpl).manifest
            prompts = {
                "text-reference": lambda r: [PromptSegment.text(tok.encode(r.transcript))],
                "cascade": lambda r: [PromptSegment.text(tok.encode(comp.asr.transcribe(manifest.load_audio(r))))],
                "e2e": lambda r: [PromptSegment.from_audio(encoder(manifest.load_audio(r)))],
            }
            table[name] = {s: corpus_perplexity(manifest.records, prompts[s], lm, tok, tpl) for s in cfg.systems}
        text = format_perplexity_table(table)
        (out / "perplexity.tsv").write_text(text)
        (out / "perplexity.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        print(text, end="")
        return 0

    manifest = read_manifest(cfg.manifest_path("summarization"))
    systems = _systems(comp, encoder, cfg.systems, cfg.summary_max_tokens)
    if args.mode == "summarization":
        metrics = [get_metric(m) for m in cfg.metrics]
        report = evaluate_summarization(manifest.records, manifest.load_audio, systems, metrics, cfg.reference_sets)
        text = format_summarization_table(report)
        (out / "summarization.tsv").write_text(text)
        summary = {k: v for k, v in report.items() if k != "records"}
        (out / "summarization.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_records(out / "summarization_records.jsonl", report["records"])
        print(text, end="")
        if report["excluded"]:
            print(f"excluded samples (missing references): {len(report['excluded'])}")
        return 0

    rows = style_variation_run(manifest.records, manifest.load_audio, systems.get("e2e") or next(iter(systems.values())),
                               cfg.style_suffixes)
    write_records(out / "style.jsonl", rows)
    for r in rows:
        print(f"{r['sample_id']}\t{r['prompt_id']}\t{r['summary']}")
    return 0


def cmd_make_fixture(args) -> int:
    from .toy import make_fixture

    paths = make_fixture(args.out_dir, seed=args.seed or 0, lm_steps=args.lm_steps)
    print(f"wrote fixture config {paths['config']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechsum", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", help="overrides output_dir from the config")
        p.add_argument("--seed", type=int)
        if checkpoint:
            p.add_argument("--checkpoint", help="defaults to <out-dir>/train/best.pt")

    p = sub.add_parser("build-responses", help="fill teacher responses by greedy-decoding the LM")
    common(p)
    p.set_defaults(func=cmd_build_responses)

    p = sub.add_parser("train", help="train the audio encoder against the frozen LM")
    common(p)
    p.add_argument("--preset", help="comma-separated: full, ntp_only, ntp_ld, ntp_fd, ctc_pooling, toy")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("summarize", help="summarize one audio file")
    common(p, checkpoint=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--prompt", help=f"base instruction (default: {DEFAULT_INSTRUCTION!r})")
    p.add_argument("--style-suffix", help="appended to the base instruction")
    p.add_argument("--cascade", action="store_true", help="also print the ASR->LM cascade summary")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("evaluate", help="perplexity / summarization / style reports")
    common(p, checkpoint=True)
    p.add_argument("--mode", choices=("perplexity", "summarization", "style"), required=True)
    p.add_argument("--systems", help="comma-separated subset of text-reference,cascade,e2e")
    p.add_argument("--metrics", help="comma-separated metric names")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-fixture", help="write the bundled toy corpus, LM and config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lm-steps", type=int, default=800)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, AudioInputError, FileNotFoundError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
