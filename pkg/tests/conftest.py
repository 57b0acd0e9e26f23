import random

import pytest
import torch

from speechsum.data import Manifest, PairedSample, build_response_dataset
from speechsum.encoder import write_wav
from speechsum.toy import CONTENT_WORDS, Lexicon, make_fixture, pretrain_toy_lm, toy_template, toy_tokenizer


@pytest.fixture(scope="session")
def toy_tok():
    return toy_tokenizer()


@pytest.fixture(scope="session")
def toy_tpl(toy_tok):
    return toy_template(toy_tok)


@pytest.fixture(scope="session")
def toy_lm(toy_tok, toy_tpl):
    """Copy-task decoder pretrained once per session (about 30 s on CPU)."""
    return pretrain_toy_lm(toy_tok, toy_tpl, steps=800, seed=0)


@pytest.fixture(scope="session")
def lexicon():
    return Lexicon.build(CONTENT_WORDS, seed=1234)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory, toy_lm):
    out = tmp_path_factory.mktemp("fixture")
    make_fixture(out, seed=0, lm=toy_lm)
    return out


def synth_manifest(root, lexicon, n, seed=0, lo=3, hi=8, noise=0.005, split="train"):
    """``n`` random word sequences rendered to WAV files under ``root``."""
    rng = random.Random(seed)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        words = [rng.choice(CONTENT_WORDS) for _ in range(rng.randint(lo, hi))]
        x, _ = lexicon.synthesize(words, noise=noise, seed=seed * 1000 + i)
        write_wav(root / "audio" / f"s{i:03d}.wav", x)
        records.append(PairedSample(f"s{i:03d}", f"audio/s{i:03d}.wav", " ".join(words), split))
    return Manifest(records, {"corpus": "synthetic"}, base_dir=root)


@pytest.fixture(scope="session")
def paired32(tmp_path_factory, lexicon, toy_lm, toy_tok, toy_tpl):
    """32 training samples with teacher responses from the copy LM."""
    root = tmp_path_factory.mktemp("paired32")
    report = build_response_dataset(synth_manifest(root, lexicon, 32), toy_lm, toy_tok, toy_tpl)
    assert not report.skipped and not report.rejected
    return report.manifest


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
