import json
import shutil

import pytest
import yaml

from speechsum.cli import main
from speechsum.config import ConfigError, env_overrides, load_config
from speechsum.objectives import LossWeights


@pytest.fixture
def fx(tmp_path, fixture_dir):
    out = tmp_path / "fx"
    shutil.copytree(fixture_dir, out)
    return out


def edit_config(path, **changes):
    cfg = yaml.safe_load(path.read_text())
    cfg.update(changes)
    path.write_text(yaml.safe_dump(cfg))


# -- config


def test_env_override_parsing():
    env = {"SPEECHSUM_TRAIN__MAX_STEPS": "64", "SPEECHSUM_PRESET": "ntp_only", "HOME": "/root"}
    assert env_overrides(env) == {"train": {"max_steps": 64}, "preset": "ntp_only"}


def test_precedence_file_env_flags(fx):
    cfg = load_config(fx / "config.yaml", environ={"SPEECHSUM_TRAIN__MAX_STEPS": "64"})
    assert cfg.train_config().max_steps == 64
    cfg = load_config(fx / "config.yaml", {"train": {"max_steps": 32}}, environ={"SPEECHSUM_TRAIN__MAX_STEPS": "64"})
    assert cfg.train_config().max_steps == 32


def test_preset_selects_weights(fx):
    cfg = load_config(fx / "config.yaml", {"preset": "ntp_only"}, environ={})
    assert cfg.train_config().weights == LossWeights(0.5, 0, 0)
    assert load_config(fx / "config.yaml", {"preset": "ctc_pooling"}, environ={}).train_config().pooling_mode == \
        "ctc_aligned"


def test_unknown_keys_rejected(fx):
    edit_config(fx / "config.yaml", learning_rate=1)
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(fx / "config.yaml", environ={})


def test_missing_referenced_file(fx):
    (fx / "template.ini").unlink()
    with pytest.raises(ConfigError, match="template.ini"):
        load_config(fx / "config.yaml", environ={})


# -- cli


def test_missing_config_exits_nonzero(tmp_path, capsys):
    assert main(["build-responses", "--config", str(tmp_path / "nope.yaml")]) != 0
    assert "not found" in capsys.readouterr().err


def test_build_responses_is_deterministic(fx):
    assert main(["build-responses", "--config", str(fx / "config.yaml")]) == 0
    first = (fx / "responses.jsonl").read_bytes()
    assert main(["build-responses", "--config", str(fx / "config.yaml")]) == 0
    assert (fx / "responses.jsonl").read_bytes() == first
    lines = first.decode().splitlines()
    assert len(lines) == 11 and all(json.loads(l).get("response") for l in lines[1:])


def test_train_without_responses_fails(fx, capsys):
    assert main(["train", "--config", str(fx / "config.yaml")]) != 0
    assert "build-responses" in capsys.readouterr().err


def test_short_train_then_summarize_and_style(fx, capsys, monkeypatch):
    cfg = str(fx / "config.yaml")
    monkeypatch.setenv("SPEECHSUM_TRAIN__MAX_STEPS", "64")
    assert main(["build-responses", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert out.strip().splitlines()[-1].startswith("best checkpoint:")
    assert (fx / "runs" / "train" / "best.pt").exists()

    args = ["summarize", "--config", cfg, "--audio", str(fx / "audio" / "utt100.wav")]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert main(args + ["--style-suffix", "focusing on Lazio", "--cascade"]) == 0
    assert "cascade:" in capsys.readouterr().out

    assert main(["evaluate", "--config", cfg, "--mode", "style"]) == 0
    rows = [json.loads(l) for l in (fx / "runs" / "eval" / "style.jsonl").read_text().splitlines()]
    assert len(rows) == 3 * 3
    assert {r["prompt_id"] for r in rows} == {"p0", "p1", "p2"}


def test_summarize_missing_audio(fx, capsys):
    assert main(["summarize", "--config", str(fx / "config.yaml"), "--audio", str(fx / "none.wav"),
                 "--checkpoint", str(fx / "none.pt")]) != 0
