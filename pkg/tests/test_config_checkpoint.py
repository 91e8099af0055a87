import shutil
import struct

import numpy as np
import pytest

from adaqat import checkpoint as ck
from adaqat.config import ConfigError, TrainConfig, load_config, parse_overrides, with_overrides
from adaqat.train import run_experiment


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.epochs == 30 and cfg.batch_size == 128 and cfg.lr == 0.1
        assert cfg.momentum == 0.9 and cfg.weight_decay == 1e-4
        c = cfg.controller
        assert (c.eta_w, c.eta_a, c.lam, c.osc_threshold) == (0.001, 0.0005, 0.15, 10)
        assert cfg.model.arch == "resnet-thin" and cfg.model.pinned_bits == 8

    def test_file_and_override(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[experiment]\nseed = 3\n\n[controller]\nlambda = 0.1\n\n[model]\nchannels = 4, 8\n"
                     "strides = 1,2\n")
        cfg = load_config(p, ["lambda=0.2"])
        assert cfg.seed == 3 and cfg.controller.lam == 0.2
        assert cfg.model.channels == [4, 8]

    def test_finetune_lr(self):
        assert load_config(None, ["mode=finetune", "checkpoint=x.bin"]).lr == 0.01

    @pytest.mark.parametrize("over,match", [
        (["nope=1"], "unknown config key"),
        (["controller.nope=1"], "unknown config key"),
        (["epochs=zero"], "train.epochs"),
        (["epochs=0"], "epochs"),
        (["mode=finetune"], "checkpoint"),
        (["arch=vgg"], "arch"),
        (["dataset=imagenet"], "dataset"),
        (["eta_w=-1"], "eta_w"),
        (["lambda"], "key=value"),
    ])
    def test_errors_name_the_field(self, over, match):
        with pytest.raises(ConfigError, match=match):
            load_config(None, over)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "x.ini")

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[optim]\nlr = 1\n")
        with pytest.raises(ConfigError, match="optim"):
            load_config(p)

    def test_dict_roundtrip(self):
        cfg = load_config(None, ["lambda=0.2", "subset=400", "widths=8,8"])
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_with_overrides(self):
        cfg = with_overrides(load_config(), ["controller.lam=0.3", "experiment.seed=9"])
        assert cfg.controller.lam == 0.3 and cfg.seed == 9

    def test_parse_overrides_keeps_equals_in_value(self):
        assert parse_overrides(["out_dir=a=b"]) == [("out_dir", "a=b")]


class TestCheckpointFormat:
    def sample(self):
        return ck.Checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5).reshape(())},
                             {"epoch": 3, "nested": {"a": [1, 2]}})

    def test_roundtrip(self, tmp_path):
        ck.save(tmp_path / "a.bin", self.sample())
        back = ck.load(tmp_path / "a.bin")
        np.testing.assert_array_equal(back.tensors["w"], self.sample().tensors["w"])
        assert back.tensors["s"].shape == ()
        assert back.meta == self.sample().meta

    def test_layout(self):
        buf = ck.encode(ck.Checkpoint({"ab": np.ones((2,), np.float32)}, {}))
        assert buf[:8] == b"ADAQATCK"
        assert struct.unpack("<II", buf[8:16]) == (ck.FORMAT_VERSION, 1)
        assert struct.unpack("<I", buf[16:20]) == (2,) and buf[20:22] == b"ab"
        assert struct.unpack("<II", buf[22:30]) == (1, 2)
        assert struct.unpack("<2f", buf[30:38]) == (1.0, 1.0)
        assert struct.unpack("<Q", buf[38:46]) == (2,) and buf[46:] == b"{}"

    def test_encoding_is_deterministic(self):
        assert ck.encode(self.sample()) == ck.encode(self.sample())

    def test_bad_magic(self):
        with pytest.raises(ck.CheckpointError, match="magic"):
            ck.decode(b"NOTACKPT" + bytes(20))

    def test_version_mismatch(self):
        buf = bytearray(ck.encode(self.sample()))
        buf[8:12] = struct.pack("<I", 99)
        with pytest.raises(ck.CheckpointVersionError, match="migrate"):
            ck.decode(bytes(buf))

    def test_truncated(self):
        with pytest.raises(ck.CheckpointError, match="truncated"):
            ck.decode(ck.encode(self.sample())[:-3])

    def test_trailing(self):
        with pytest.raises(ck.CheckpointError, match="trailing"):
            ck.decode(ck.encode(self.sample()) + b"x")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ck.CheckpointError):
            ck.load(tmp_path / "none.bin")


def resume_continuation(cfg, tmp_path):
    """Run 3 epochs straight, then replay epoch 2 from the epoch-1 checkpoint in a fresh directory.

    Returns (straight_dir, resumed_dir).
    """
    full = with_overrides(cfg, ["train.epochs=3", f"experiment.out_dir={tmp_path / 'full'}"])
    run_experiment(full)
    part = tmp_path / "part"
    part.mkdir()
    lines = (tmp_path / "full" / "metrics.csv").read_text().splitlines(keepends=True)
    kept = [lines[0]] + [l for l in lines[1:] if int(l.split(",", 1)[0]) < 2]
    (part / "metrics.csv").write_text("".join(kept))
    shutil.copy(tmp_path / "full" / "ckpt-001.bin", part / "ckpt-001.bin")
    resumed = with_overrides(full, [f"experiment.out_dir={part}", f"experiment.resume={part / 'ckpt-001.bin'}"])
    run_experiment(resumed)
    return tmp_path / "full", part


class TestReproducibility:
    def test_same_seed_byte_identical_metrics(self, blobs_cfg):
        run_experiment(blobs_cfg(out="a"))
        run_experiment(blobs_cfg(out="b"))
        a = (blobs_cfg(out="a").out_dir + "/metrics.csv")
        b = (blobs_cfg(out="b").out_dir + "/metrics.csv")
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_different_seed_differs(self, blobs_cfg):
        run_experiment(blobs_cfg(out="a"))
        run_experiment(blobs_cfg("seed=1", out="b"))
        assert open(blobs_cfg(out="a").out_dir + "/metrics.csv").read() != \
            open(blobs_cfg(out="b").out_dir + "/metrics.csv").read()

    def test_resume_is_bit_identical(self, blobs_cfg, tmp_path):
        full, part = resume_continuation(blobs_cfg(), tmp_path)
        assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
        a, b = ck.load(full / "ckpt-final.bin"), ck.load(part / "ckpt-final.bin")
        assert a.tensors.keys() == b.tensors.keys()
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
        assert a.meta["controller"] == b.meta["controller"]

    def test_resume_needs_metrics(self, blobs_cfg, tmp_path):
        run_experiment(blobs_cfg(out="a"))
        cfg = blobs_cfg(f"resume={tmp_path / 'a' / 'ckpt-000.bin'}", out="elsewhere")
        with pytest.raises(FileNotFoundError, match="metrics.csv"):
            run_experiment(cfg)
