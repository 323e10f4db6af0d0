import dataclasses
from pathlib import Path

import numpy as np
import pytest

from packedar.cli import build_parser, main
from packedar.config import (
    PRESETS,
    ConfigError,
    RunConfig,
    build_config,
    parse_config_file,
)
from packedar.training import NonFiniteLoss
from packedar.verification import CheckResult

GOLDEN = Path(__file__).parent / "golden"

MICRO = [
    "--width", "8", "--state-dim", "2", "--mlp-ratio", "2", "--depth", "1",
    "--dec-layers", "1", "--dec-width", "8", "--dec-heads", "2",
    "--batch-size", "1", "--lr", "0.001",
]


# --- config layering -------------------------------------------------------------

def test_build_config_defaults():
    assert build_config() == RunConfig()
    base = build_config("base")
    assert base.image_size == 192
    assert base.patch_size == 16
    assert base.cluster_side == 4
    assert base.images_per_seq == 8


def test_config_file_parsing(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text(
        "# geometry\n"
        "image_size = 32\n"
        "\n"
        "depth = 2   # later duplicate wins\n"
        "depth = 6\n"
    )
    assert parse_config_file(f) == {"image_size": "32", "depth": "6"}
    cfg = build_config("desk", f)
    assert cfg.image_size == 32
    assert cfg.depth == 6


def test_config_file_syntax_error(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("image_size 32\n")
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_config_file(f)


def test_layering_order(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("width = 128\n")
    cfg = build_config("base", f, {"width": "96"})
    assert cfg.width == 96  # flag beats file beats preset (768)


def test_unknown_key_and_preset_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config("desk", None, {"wdith": "8"})
    f = tmp_path / "bad.cfg"
    f.write_text("frobnicate = 1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config("desk", f)
    with pytest.raises(ConfigError, match="unknown preset"):
        build_config("huge")


def test_value_coercion():
    cfg = build_config("desk", None, {"pos_embed": "off", "deterministic": "YES",
                                      "lr": "1e-3", "depth": "3"})
    assert cfg.pos_embed is False
    assert cfg.deterministic is True
    assert cfg.lr == 1e-3
    assert cfg.depth == 3
    with pytest.raises(ConfigError, match="bad value for depth"):
        build_config("desk", None, {"depth": "three"})
    with pytest.raises(ConfigError, match="not a boolean"):
        build_config("desk", None, {"pos_embed": "maybe"})


def test_validation_failures():
    with pytest.raises(ConfigError, match="divisible"):
        build_config("desk", None, {"patch_size": "5"})
    with pytest.raises(ConfigError, match="layout"):
        build_config("desk", None, {"layout": "ring"})
    with pytest.raises(ConfigError, match="heldout_frac"):
        build_config("desk", None, {"heldout_frac": "1.0"})
    with pytest.raises(ConfigError, match="images_per_seq"):
        build_config("desk", None, {"images_per_seq": "17"})


def test_snapshot_excludes_paths():
    snap = RunConfig(corpus_dir="/a", out_dir="/b").snapshot()
    assert "corpus_dir" not in snap and "out_dir" not in snap
    assert snap == RunConfig(corpus_dir="/c", out_dir="/d").snapshot()


def test_lr_scaling_rules():
    cfg = RunConfig(lr=0.0, batch_size=256)
    assert cfg.pretrain_lr() == pytest.approx(1.5e-4)
    assert cfg.finetune_lr() == pytest.approx(5e-4)
    assert RunConfig(lr=0.0, batch_size=8).pretrain_lr() == pytest.approx(1.5e-4 / 32)
    assert RunConfig(lr=0.01).pretrain_lr() == 0.01
    assert RunConfig(lr=0.01).finetune_lr() == 0.01


def test_base_preset_model_scale():
    # the base preset targets the ~85M-parameter encoder
    import torch
    from packedar.ssm import Encoder

    cfg = build_config("base")
    torch.manual_seed(0)
    enc = Encoder(cfg.encoder_config("one"))
    n = sum(p.numel() for p in enc.parameters())
    assert 60e6 < n < 110e6


# --- help surface ----------------------------------------------------------------

def test_help_golden_main(capsys):
    assert build_parser().format_help() == (GOLDEN / "help_main.txt").read_text()


def test_help_golden_pretrain():
    parser = build_parser()
    sub = next(a.choices for a in parser._actions
               if hasattr(a, "choices") and a.choices)
    assert sub["pretrain"].format_help() == (GOLDEN / "help_pretrain.txt").read_text()


def test_every_config_key_is_a_flag():
    parser = build_parser()
    sub = next(a.choices for a in parser._actions
               if hasattr(a, "choices") and a.choices)
    for command, p in sub.items():
        text = p.format_help()
        for f in dataclasses.fields(RunConfig):
            assert "--" + f.name.replace("_", "-") in text, (command, f.name)


def test_every_config_key_is_documented():
    text = (Path(__file__).resolve().parents[1] / "docs" / "config.md").read_text()
    for f in dataclasses.fields(RunConfig):
        assert f"`{f.name}`" in text, f.name


# --- subcommands -----------------------------------------------------------------

def test_gen_writes_balanced_corpus(tmp_path, capsys):
    d = tmp_path / "corpus"
    assert main(["gen", "--corpus-dir", str(d), "--count", "8"]) == 0
    out = capsys.readouterr().out
    assert f"wrote 8 images to {d}" in out
    labels = [line.split("\t")[1] for line in
              (d / "manifest.tsv").read_text().splitlines()]
    assert labels.count("0") == labels.count("3") == 2


def test_gen_deterministic(tmp_path):
    main(["gen", "--corpus-dir", str(tmp_path / "a"), "--count", "4"])
    main(["gen", "--corpus-dir", str(tmp_path / "b"), "--count", "4"])
    a = (tmp_path / "a/img_00003.ppm").read_bytes()
    assert a == (tmp_path / "b/img_00003.ppm").read_bytes()


def test_pack_desk_token_arithmetic(tmp_path, capsys):
    rc = main(["pack", "--count", "2", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "images: 2" in out
    assert "tokens per image: 20" in out
    assert "total tokens: 40" in out
    assert (tmp_path / "packed.bin").exists()


def test_pack_full_scale_token_arithmetic(tmp_path, capsys):
    rc = main(["pack", "--preset", "base", "--count", "8",
               "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "tokens per image: 160" in out
    assert "total tokens: 1280" in out
    capsys.readouterr()
    rc = main(["pack", "--preset", "base", "--count", "8",
               "--images-per-seq", "1", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert "total tokens: 160" in capsys.readouterr().out


def test_pack_from_disk_and_inspect(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    main(["gen", "--corpus-dir", str(corpus), "--count", "4"])
    capsys.readouterr()
    rc = main(["pack", "--corpus-dir", str(corpus), "--out-dir", str(tmp_path)])
    assert rc == 0
    capsys.readouterr()
    rc = main(["inspect", str(tmp_path / "packed.bin")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "layout: sc  separator: identity" in out
    assert "images: 2  pixel clusters/image: 4  cluster side: 2" in out
    assert "patch dim: 48  embed dim: 64" in out
    assert "tokens: 40 total, 8 separator" in out
    assert "position ids: 0..16" in out


def test_pack_needs_enough_images(tmp_path, capsys):
    rc = main(["pack", "--count", "1", "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "need 2" in capsys.readouterr().err


def test_inspect_mask_render(capsys):
    rc = main(["inspect-mask", "--image-size", "8", "--patch-size", "4",
               "--cluster-side", "1", "--images-per-seq", "1"])
    assert rc == 0
    assert capsys.readouterr().out == (
        "#····\n"
        "##···\n"
        "###··\n"
        "####·\n"
        "#####\n"
    )


def test_pretrain_cli_smoke(tmp_path, capsys):
    rc = main(["pretrain", *MICRO, "--steps", "2", "--images-per-seq", "1",
               "--count", "2", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "steps: 2" in out
    assert "final loss:" in out
    assert (tmp_path / "checkpoint.bin").exists()
    assert (tmp_path / "metrics.jsonl").exists()


def test_pretrain_cli_stop_and_resume(tmp_path, capsys):
    args = ["pretrain", *MICRO, "--steps", "2", "--images-per-seq", "1",
            "--count", "2", "--out-dir", str(tmp_path)]
    assert main([*args, "--stop-after", "1"]) == 0
    assert "steps: 1" in capsys.readouterr().out
    rc = main([*args, "--resume", str(tmp_path / "checkpoint.bin")])
    assert rc == 0
    assert "steps: 1" in capsys.readouterr().out


def test_finetune_cli_smoke(tmp_path, capsys):
    rc = main(["finetune", *MICRO, "--steps", "1", "--count", "8",
               "--drop-path", "0.1", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "sequence length: 17" in out
    assert "heldout accuracy:" in out
    assert (tmp_path / "finetune_metrics.jsonl").exists()


def test_verify_cli_green(capsys):
    rc = main(["verify"])
    assert rc == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert lines[-1] == "8/8 checks passed"
    assert sum(line.startswith("PASS ") for line in lines) == 8
    assert not any(line.startswith("FAIL ") for line in lines)


def test_verify_cli_red(monkeypatch, capsys):
    import packedar.cli as cli

    def fake_run_all(seed=0):
        return [CheckResult("mask_oracle", False, "mismatch at (3, 5)")]

    monkeypatch.setattr(cli, "run_all", fake_run_all)
    rc = main(["verify"])
    assert rc == 1
    out = capsys.readouterr().out
    assert "FAIL mask_oracle: mismatch at (3, 5)" in out
    assert "0/1 checks passed" in out


def test_training_abort_maps_to_exit_one(monkeypatch, capsys, tmp_path):
    import packedar.cli as cli

    def boom(cfg, images, resume_from=None, stop_after=None):
        raise NonFiniteLoss(3, "loss=nan")

    monkeypatch.setattr(cli, "pretrain", boom)
    rc = main(["pretrain", "--count", "2", "--out-dir", str(tmp_path)])
    assert rc == 1
    assert "aborted: non-finite value at step 3" in capsys.readouterr().err


# --- exit codes ------------------------------------------------------------------

def test_usage_errors_exit_two(tmp_path, capsys):
    assert main(["pack", "--depth", "three"]) == 2
    assert "bad value for depth" in capsys.readouterr().err

    assert main(["pack", "--patch-size", "5"]) == 2
    assert "config error" in capsys.readouterr().err

    assert main(["pack", "--config", str(tmp_path / "missing.cfg")]) == 2
    capsys.readouterr()

    bad = tmp_path / "bad.cfg"
    bad.write_text("frobnicate = 1\n")
    assert main(["pack", "--config", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err

    assert main(["pack", "--corpus-dir", str(tmp_path / "nowhere")]) == 2
    assert "manifest.tsv" in capsys.readouterr().err

    with pytest.raises(SystemExit) as exc:
        main(["pack", "--no-such-flag", "1"])
    assert exc.value.code == 2

    with pytest.raises(SystemExit):
        main([])  # a subcommand is required


def test_inspect_missing_dump_exits_two(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "nope.bin")]) == 2
    assert "error" in capsys.readouterr().err
