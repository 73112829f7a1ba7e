import json
import subprocess
import sys
from dataclasses import fields

import numpy as np
import pytest

from rmdino.checkpoint import load_checkpoint
from rmdino.cli import main
from rmdino.config import RunConfig
from rmdino.data import load_dataset, read_image, read_pgm, write_png

TINY = ["--set", "img_size_global=16", "--set", "img_size_local=8", "--set", "patch_size=4",
        "--set", "embed_dim=12", "--set", "depth=1", "--set", "heads=2", "--set", "head_hidden=16",
        "--set", "head_bottleneck=8", "--set", "out_dim=8", "--set", "local_crops=2", "--set", "batch_size=4"]

SUBCOMMANDS = ["train", "eval-knn", "eval-linear", "mask-preview", "attn-viz", "gen-synth"]


@pytest.fixture
def image_path(tmp_path, rng):
    return write_png(rng.random((3, 64, 64)) * 0.8 + 0.1, tmp_path / "img.png")


def test_train_zero_epochs_writes_initial_checkpoint(synth_root, tmp_path, capsys):
    run = tmp_path / "run"
    rc = main(["train", "--dataset", str(synth_root), "--run-dir", str(run), "--set", "epochs=0", *TINY])
    assert rc == 0
    out = capsys.readouterr().out
    assert "steps=0" in out and "final.ckpt" in out
    state, cfg = load_checkpoint(run / "final.ckpt")
    assert state.step == 0 and cfg.embed_dim == 12
    resolved = RunConfig.load(run / "config.resolved")
    assert resolved == cfg and resolved.dataset == str(synth_root)


def test_train_then_eval(synth_root, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--dataset", str(synth_root), "--run-dir", str(run), "--mask-ratio", "0",
                 "--set", "max_steps=2", *TINY]) == 0
    assert RunConfig.load(run / "config.resolved").mask_ratio == 0.0
    assert len((run / "metrics.tsv").read_text().splitlines()) == 3
    capsys.readouterr()
    assert main(["eval-knn", "--checkpoint", str(run / "final.ckpt"), "--dataset", str(synth_root)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("metric=knn top1=")
    summary = json.loads((run / "eval_knn.json").read_text())
    assert summary["n_train"] == 36 and summary["n_test"] == 12
    assert abs(summary["top1"] - float(line.split("top1=")[1])) < 1e-6
    assert main(["eval-linear", "--checkpoint", str(run / "final.ckpt"), "--dataset", str(synth_root),
                 "--set", "probe_epochs=2", "--run-dir", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "eval_linear.json").is_file()


def test_knn_self_match_without_split(tmp_path, rng, capsys):
    data = tmp_path / "data"
    for c in range(3):
        for i in range(4):
            write_png(rng.random((3, 16, 16)), data / f"c{c}" / f"{i}.png")
    run = tmp_path / "run"
    assert main(["train", "--dataset", str(data), "--run-dir", str(run), "--set", "epochs=0", *TINY]) == 0
    capsys.readouterr()
    assert main(["eval-knn", "--checkpoint", str(run / "final.ckpt"), "--dataset", str(data),
                 "--set", "knn_k=1"]) == 0
    assert capsys.readouterr().out.strip() == "metric=knn top1=1.000000"


def test_eval_fingerprint_check(synth_root, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", "--dataset", str(synth_root), "--run-dir", str(run), "--set", "epochs=0", *TINY])
    cfg_file = tmp_path / "other.cfg"
    cfg_file.write_text("mask_ratio=0.5\n")
    args = ["eval-knn", "--checkpoint", str(run / "final.ckpt"), "--dataset", str(synth_root),
            "--config", str(cfg_file), *TINY]
    assert main(args) == 3
    assert "fingerprint" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0


def test_missing_dataset_exit_2(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--run-dir", str(tmp_path / "r")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["train", "--run-dir", str(tmp_path / "r")]) == 2


def test_bad_overrides_exit_2(synth_root, tmp_path):
    base = ["train", "--dataset", str(synth_root), "--run-dir", str(tmp_path / "r")]
    assert main(base + ["--set", "bogus=1"]) == 2
    assert main(base + ["--set", "epochs"]) == 2
    assert main(base + ["--mask-ratio", "1.5"]) == 2
    assert main(base + ["--config", str(tmp_path / "missing.cfg")]) == 2


def test_malformed_checkpoint_exit_3(synth_root, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"RMDINOCK" + b"\0" * 20)
    assert main(["eval-knn", "--checkpoint", str(bad), "--dataset", str(synth_root)]) == 3
    assert main(["attn-viz", "--checkpoint", str(bad), "--image", str(synth_root / "class_00/img_0000.png"),
                 "--out", str(tmp_path / "o")]) == 3
    assert main(["eval-knn", "--checkpoint", str(tmp_path / "none.ckpt"), "--dataset", str(synth_root)]) == 2


def test_mask_preview(image_path, tmp_path, capsys):
    out = tmp_path / "prev"
    assert main(["mask-preview", "--image", str(image_path), "--out", str(out)]) == 0
    assert "masked_blocks=6,6" in capsys.readouterr().out
    names = sorted(p.name for p in out.iterdir())
    assert names == ["1_original.png", "2_global0_masked.png", "3_global1_masked.png",
                     "4_local0_clean.png", "5_local1_clean.png"]
    g = read_image(out / "2_global0_masked.png")
    assert (g == 0).all(axis=0)[::8, ::8].sum() == 6
    assert main(["mask-preview", "--image", str(image_path), "--out", str(tmp_path / "again")]) == 0
    for n in names:
        assert (out / n).read_bytes() == (tmp_path / "again" / n).read_bytes()
    assert main(["mask-preview", "--image", str(tmp_path / "no.png"), "--out", str(out)]) == 2


def test_attn_viz_fresh_init(image_path, tmp_path, capsys):
    out = tmp_path / "attn"
    assert main(["attn-viz", "--image", str(image_path), "--out", str(out)]) == 0
    assert "files=4" in capsys.readouterr().out
    for h in range(3):
        assert read_pgm(out / f"attn_head{h}.pgm").shape == (64, 64)
    assert main(["attn-viz", "--image", str(image_path), "--out", str(tmp_path / "m"), "--head-mode", "mean"]) == 0
    assert [p.name for p in (tmp_path / "m").iterdir()] == ["attn_mean.pgm"]


def test_attn_viz_from_checkpoint(synth_root, tmp_path):
    run = tmp_path / "run"
    main(["train", "--dataset", str(synth_root), "--run-dir", str(run), "--set", "epochs=0", *TINY])
    img = synth_root / "class_01" / "img_0000.png"
    outs = []
    for d in ("a", "b"):
        assert main(["attn-viz", "--checkpoint", str(run / "final.ckpt"), "--image", str(img),
                     "--out", str(tmp_path / d)]) == 0
        outs.append([(tmp_path / d / f"attn_head{h}.pgm").read_bytes() for h in range(2)])
    assert outs[0] == outs[1]
    assert read_pgm(tmp_path / "a" / "attn_mean.pgm").shape == (32, 32)


def test_gen_synth(tmp_path, capsys):
    out = tmp_path / "syn"
    assert main(["gen-synth", "--out", str(out), "--classes", "2", "--per-class", "4", "--size", "16"]) == 0
    ds = load_dataset(out)
    assert len(ds) == 8 and ds.images["class_01/img_0003.png"].shape == (3, 16, 16)
    assert len(ds.subset("test")) == 2
    assert main(["gen-synth", "--out", str(out), "--classes", "1"]) == 2


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_lists_every_key(sub, capsys):
    with pytest.raises(SystemExit) as e:
        main([sub, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for f in fields(RunConfig):
        assert f.name in text, f.name


def test_usage_errors_from_argparse(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--no-such-flag"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "rmdino", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-synth" in r.stdout
