import logging
from pathlib import Path

import numpy as np
import pytest

from rmdino import vit
from rmdino.checkpoint import (
    HEADER,
    MAGIC,
    CheckpointError,
    FingerprintMismatch,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from rmdino.config import RunConfig, parse_pairs
from rmdino.data import gen_synth, load_dataset, read_image, read_pgm, write_pgm, write_png
from rmdino.distill import Schedules, TrainState, train_step
from rmdino.views import make_views, sample_rng
from rmdino.visualize import export_attention, mask_preview, to_gray

GOLDEN = Path(__file__).parent / "golden"

# full-scale hyperparameters, written out independently of the dataclass defaults
FULL_SCALE = {
    "patch_size": 16, "epochs": 100, "batch_size": 50, "base_lr": 0.0005,
    "weight_decay": 0.04, "weight_decay_end": 0.4, "clip_grad": 3.0,
    "ema_start": 0.996, "ema_end": 1.0, "out_dim": 65536,
    "temp_student": 0.1, "temp_teacher": 0.04, "center_momentum": 0.9,
    "global_crops": 2, "global_scale_min": 0.4, "global_scale_max": 1.0,
    "local_crops": 8, "local_scale_min": 0.05, "local_scale_max": 0.4, "mask_ratio": 0.1,
}


class TestConfig:
    def test_defaults_match_golden(self):
        assert RunConfig().to_text() == (GOLDEN / "full_defaults.cfg").read_text()

    def test_defaults_match_hyperparameter_table(self):
        cfg = RunConfig()
        for k, v in FULL_SCALE.items():
            assert getattr(cfg, k) == v, k

    def test_round_trip(self):
        cfg = RunConfig.desk(mask_ratio=0.3, heavy_aug=True, run_dir="x y")
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_comments_and_overrides(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# header\nmask_ratio = 0.25  # trailing\n\nepochs=3\n")
        cfg = RunConfig.load(p, base=RunConfig.desk())
        assert cfg.mask_ratio == 0.25 and cfg.epochs == 3 and cfg.embed_dim == 96

    def test_errors(self):
        with pytest.raises(KeyError):
            RunConfig().with_overrides({"nope": "1"})
        with pytest.raises(ValueError):
            parse_pairs("just a line")
        with pytest.raises(ValueError):
            RunConfig().with_overrides({"epochs": "ten"})
        with pytest.raises(ValueError):
            RunConfig.desk(dtype="f16").validate()
        with pytest.raises(ValueError):
            RunConfig.desk(mask_ratio=1.2).validate()

    def test_fingerprint_ignores_locations(self):
        a = RunConfig.desk(dataset="/a", run_dir="r1")
        assert a.fingerprint() == RunConfig.desk(dataset="/b", run_dir="r2").fingerprint()
        assert a.fingerprint() != RunConfig.desk(mask_ratio=0.2).fingerprint()

    def test_presets(self):
        assert RunConfig.preset("full") == RunConfig()
        assert RunConfig.preset("desk").vit_config() == vit.ViTConfig()
        with pytest.raises(ValueError):
            RunConfig.preset("huge")


@pytest.fixture
def trained(tiny_cfg, rng):
    state = TrainState.init(tiny_cfg)
    sched = Schedules(tiny_cfg, 4)
    for step in range(2):
        imgs = [rng.random((3, 16, 16)).astype(np.float32) for _ in range(2)]
        vcfg = tiny_cfg.view_config()
        train_step([make_views(im, vcfg, sample_rng(0, step, i)) for i, im in enumerate(imgs)],
                   state, tiny_cfg, sched)
    return state, tiny_cfg


class TestCheckpoint:
    def test_bit_exact_round_trip(self, trained, tmp_path):
        state, cfg = trained
        path = save_checkpoint(state, cfg, tmp_path / "a.ckpt")
        loaded, lcfg = load_checkpoint(path)
        assert lcfg == cfg and loaded.step == state.step and loaded.seed == state.seed
        for k in state.student:
            assert loaded.student[k].data.tobytes() == state.student[k].data.tobytes()
            assert loaded.teacher[k].data.tobytes() == state.teacher[k].data.tobytes()
            assert loaded.opt.m[k].tobytes() == state.opt.m[k].tobytes()
            assert loaded.opt.v[k].tobytes() == state.opt.v[k].tobytes()
            assert loaded.opt.t[k] == state.opt.t[k]
            assert loaded.student[k].dtype == state.student[k].dtype
        assert loaded.center.c.tobytes() == state.center.c.tobytes()
        assert loaded.center.momentum == state.center.momentum

    def test_save_load_save_byte_identical(self, trained, tmp_path):
        state, cfg = trained
        a = save_checkpoint(state, cfg, tmp_path / "a.ckpt").read_bytes()
        loaded, lcfg = load_checkpoint(tmp_path / "a.ckpt")
        assert save_checkpoint(loaded, lcfg, tmp_path / "b.ckpt").read_bytes() == a
        assert not list(tmp_path.glob("*.tmp"))

    def test_header_layout(self, trained):
        state, cfg = trained
        buf = encode(state, cfg)
        magic, version, _, fp, reserved = HEADER.unpack_from(buf)
        assert magic == MAGIC and version == 1 and fp.hex() == cfg.fingerprint() and reserved == b"\0" * 16

    def test_resumed_training_matches_uninterrupted(self, trained, tmp_path, rng):
        state, cfg = trained
        save_checkpoint(state, cfg, tmp_path / "a.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "a.ckpt")
        imgs = [rng.random((3, 16, 16)).astype(np.float32) for _ in range(2)]
        sched = Schedules(cfg, 4)
        vcfg = cfg.view_config()
        outs = []
        for s in (state, loaded):
            batch = [make_views(im, vcfg, sample_rng(0, 5, i)) for i, im in enumerate(imgs)]
            outs.append(train_step(batch, s, cfg, sched)["loss"])
        assert outs[0] == outs[1]
        for k in state.student:
            assert loaded.student[k].data.tobytes() == state.student[k].data.tobytes()

    @pytest.mark.parametrize("cut", [10, 64, 200, -1])
    def test_truncated(self, trained, tmp_path, cut):
        state, cfg = trained
        buf = encode(state, cfg)
        (tmp_path / "t.ckpt").write_bytes(buf[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_corrupted_payload(self, trained, tmp_path):
        state, cfg = trained
        buf = bytearray(encode(state, cfg))
        buf[300] ^= 0xFF
        (tmp_path / "c.ckpt").write_bytes(bytes(buf))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_bad_magic_and_version(self, trained, tmp_path):
        state, cfg = trained
        buf = encode(state, cfg)
        (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + buf[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "m.ckpt")
        (tmp_path / "v.ckpt").write_bytes(buf[:8] + (2).to_bytes(4, "little") + buf[12:])
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_fingerprint_mismatch(self, trained, tmp_path, caplog):
        state, cfg = trained
        save_checkpoint(state, cfg, tmp_path / "a.ckpt")
        load_checkpoint(tmp_path / "a.ckpt", expected=cfg)
        other = RunConfig.desk(**{**cfg.__dict__, "mask_ratio": 0.5})
        with pytest.raises(FingerprintMismatch):
            load_checkpoint(tmp_path / "a.ckpt", expected=other)
        with caplog.at_level(logging.WARNING):
            loaded, _ = load_checkpoint(tmp_path / "a.ckpt", expected=other, force=True)
        assert "fingerprint" in caplog.text and loaded.step == state.step

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "none.ckpt")


def _write_class_tree(root, rng):
    for c in ("b_cls", "a_cls"):
        for i in range(3):
            write_png(rng.random((3, 8, 10)), root / c / f"{i}.png")


class TestDataset:
    def test_layout(self, tmp_path, rng):
        _write_class_tree(tmp_path, rng)
        ds = load_dataset(tmp_path)
        assert ds.classes == ["a_cls", "b_cls"] and len(ds) == 6
        assert ds.samples[0] == ("a_cls/0.png", 0) and ds.samples[-1] == ("b_cls/2.png", 1)
        imgs, labels = ds.arrays()
        assert imgs[0].shape == (3, 8, 10) and imgs[0].dtype == np.float32
        assert labels.tolist() == [0, 0, 0, 1, 1, 1]

    def test_deterministic_order(self, tmp_path, rng):
        _write_class_tree(tmp_path, rng)
        a, b = load_dataset(tmp_path), load_dataset(tmp_path)
        assert a.samples == b.samples
        assert all(a.images[k].tobytes() == b.images[k].tobytes() for k in a.images)

    def test_skips_unreadable(self, tmp_path, rng, caplog):
        _write_class_tree(tmp_path, rng)
        (tmp_path / "a_cls" / "broken.png").write_bytes(b"not an image")
        with caplog.at_level(logging.WARNING):
            ds = load_dataset(tmp_path)
        assert len(ds) == 6 and "broken.png" in caplog.text

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "absent")
        (tmp_path / "empty").mkdir()
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "empty")

    def test_png_round_trip(self, tmp_path, rng):
        img = np.round(rng.random((3, 5, 7)) * 255) / 255
        write_png(img, tmp_path / "x.png")
        np.testing.assert_allclose(read_image(tmp_path / "x.png"), img, atol=1e-6)


class TestSynth:
    def test_counts_and_split(self, synth_root):
        ds = load_dataset(synth_root)
        assert ds.classes == [f"class_{c:02d}" for c in range(4)] and len(ds) == 48
        assert len(ds.subset("test")) == 12 and len(ds.subset("train")) == 36
        assert ds.images["class_00/img_0000.png"].shape == (3, 32, 32)

    def test_reproducible(self, synth_root, tmp_path):
        again = gen_synth(tmp_path / "again", num_classes=4, per_class=12, img_size=32, seed=0)
        for p in sorted(synth_root.rglob("*.png")):
            assert p.read_bytes() == (again / p.relative_to(synth_root)).read_bytes()
        assert (synth_root / "split.tsv").read_bytes() == (again / "split.tsv").read_bytes()

    def test_classes_differ_in_colour(self, synth_root):
        ds = load_dataset(synth_root)
        means = []
        for c in range(4):
            imgs = [ds.images[p] for p, label in ds.samples if label == c]
            # foreground colour dominates the brightest pixels
            means.append(np.mean([im.reshape(3, -1)[:, im.sum(0).ravel() > 1.2].mean(1) for im in imgs], axis=0))
        means = np.array(means)
        dists = np.linalg.norm(means[:, None] - means[None], axis=-1)
        assert dists[~np.eye(4, dtype=bool)].min() > 0.1

    def test_bad_args(self, tmp_path):
        with pytest.raises(ValueError):
            gen_synth(tmp_path, num_classes=1)


class TestPGM:
    def test_round_trip_including_whitespace_bytes(self, tmp_path):
        g = np.array([[9, 10, 13], [32, 0, 255]], dtype=np.uint8)
        write_pgm(g, tmp_path / "a.pgm")
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), g)

    def test_to_gray(self):
        assert (to_gray(np.full((3, 3), 0.7)) == 128).all()
        g = to_gray(np.array([[0.0, 0.5], [1.0, 0.25]]))
        assert g.tolist() == [[0, 128], [255, 64]]


class TestAttentionExport:
    @pytest.fixture
    def model(self):
        cfg = vit.ViTConfig(img_size=16, local_img_size=8, patch_size=4, embed_dim=12, depth=1, heads=3,
                            head_hidden=16, head_bottleneck=8, out_dim=8)
        return cfg, vit.init_params(cfg, seed=0)

    def test_files_and_dims(self, model, rng, tmp_path):
        cfg, params = model
        img = rng.random((3, 16, 16)).astype(np.float32)
        exp = export_attention(params, cfg, img, tmp_path)
        assert [p.name for p in exp.paths] == ["attn_head0.pgm", "attn_head1.pgm", "attn_head2.pgm", "attn_mean.pgm"]
        for p in exp.paths:
            assert read_pgm(p).shape == (16, 16)
        np.testing.assert_allclose(exp.attn.sum(-1), 1.0, atol=1e-5)
        assert exp.attn.shape == (3, 17, 17)

    def test_other_resolution_and_mean_mode(self, model, rng, tmp_path):
        cfg, params = model
        exp = export_attention(params, cfg, rng.random((3, 24, 32)).astype(np.float32), tmp_path, head_mode="mean")
        assert [p.name for p in exp.paths] == ["attn_mean.pgm"] and read_pgm(exp.paths[0]).shape == (24, 32)
        with pytest.raises(ValueError):
            export_attention(params, cfg, np.zeros((3, 10, 16)), tmp_path)

    def test_uniform_attention_gives_mid_grey(self, model, rng, tmp_path):
        cfg, params = model
        flat = {k: v for k, v in params.items()}
        flat["blocks.0.attn.qkv.w"].data[:, :24] = 0.0  # q and k zero -> uniform rows
        flat["blocks.0.attn.qkv.b"].data[:24] = 0.0
        exp = export_attention(flat, cfg, rng.random((3, 16, 16)).astype(np.float32), tmp_path)
        for g in exp.maps:
            assert (g == 128).all()

    def test_byte_identical_reruns(self, model, rng, tmp_path):
        cfg, params = model
        img = rng.random((3, 16, 16)).astype(np.float32)
        a = [p.read_bytes() for p in export_attention(params, cfg, img, tmp_path / "a").paths]
        b = [p.read_bytes() for p in export_attention(params, cfg, img, tmp_path / "b").paths]
        assert a == b


def test_mask_preview_panels(tmp_path, rng):
    cfg = RunConfig.desk(mask_ratio=0.1).view_config()
    img = rng.random((3, 80, 80)).astype(np.float32) * 0.8 + 0.1
    paths, vs = mask_preview(img, cfg, np.random.default_rng(0), tmp_path)
    assert [p.stem for p in paths] == ["1_original", "2_global0_masked", "3_global1_masked",
                                       "4_local0_clean", "5_local1_clean"]
    g0 = read_image(paths[1])
    assert ((g0 == 0).all(axis=0)[::8, ::8]).sum() == 6
    again, _ = mask_preview(img, cfg, np.random.default_rng(0), tmp_path / "b")
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]
