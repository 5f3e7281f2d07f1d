import numpy as np
import pytest

from smvit import cli, netpbm
from smvit import model as M
from smvit import train as T
from smvit.saliency import BoundingBox
from smvit.tokenizer import ConfigError

TINY_RUN = "steps:4\nbatch_size:4\nn_train:8\nn_val:4\nn_test:8\nembed_dim:8\nheads:2\nlayers:1  # small\n"


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text(TINY_RUN)
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfigParsing:
    def test_comments_and_types(self):
        vals = cli.parse_kv("# header\nlr: 0.5\ncrop:false\nheads:2 # inline\n\n")
        assert vals == {"lr": 0.5, "crop": False, "heads": 2}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            cli.parse_kv("learning_rate:0.1")

    def test_bad_bool(self):
        with pytest.raises(ConfigError):
            cli.parse_kv("crop:maybe")

    def test_shared_keys(self):
        rc = cli.RunConfig.from_values({"seed": 3, "num_classes": 5})
        assert rc.train.seed == 3 and rc.toy.seed == 3
        assert rc.vit.num_classes == 5 and rc.toy.num_classes == 5

    def test_invariants_enforced(self):
        with pytest.raises(ConfigError):
            cli.RunConfig.from_values({"embed_dim": 10, "heads": 4})

    def test_overrides(self):
        assert cli.parse_overrides(["--d_theta=0.3", "--smge-infer=false"]) == {
            "d_theta": 0.3,
            "smge_infer": False,
        }
        with pytest.raises(cli.UsageError):
            cli.parse_overrides(["--nope=1"])


class TestMask:
    def test_manifest_pipeline(self, workdir, capsys):
        assert run("dataset", "--out", "ds", "--n", 2) == 0
        img = workdir / "ds" / "sample_0000000.ppm"
        rc = run("mask", "--in", img, "--out-mask", "m.pgm", "--out-bbox", "b.txt", "--crop", "c.ppm", "--size", 16)
        assert rc == 0
        assert "source=primary_threshold" in capsys.readouterr().out
        truth = netpbm.read_mask(workdir / "ds" / "sample_0000000_object.pgm")
        np.testing.assert_array_equal(netpbm.read_mask("m.pgm"), truth)
        box = BoundingBox.from_text((workdir / "b.txt").read_text())
        rows, cols = np.nonzero(truth)
        assert box == BoundingBox(rows.min(), cols.min(), rows.max(), cols.max())
        assert netpbm.read_ppm("c.ppm").shape == (16, 16, 3)

    def test_dataset_manifest(self, workdir):
        assert run("dataset", "--out", "ds", "--n", 3, "--start", 5, "--noise=0.1") == 0
        lines = (workdir / "ds" / "manifest.txt").read_text().splitlines()[1:]
        assert len(lines) == 3
        index, label, image, obj, sal = lines[0].split()
        assert int(index) == 5 and int(label) == T.generate_sample(T.ToySpec(noise=0.1), 5).label
        for name in (image, obj, sal):
            assert (workdir / "ds" / name).exists()

    def test_explicit_ground_truth_map(self, workdir, capsys):
        s = T.generate_sample(T.ToySpec(), 3)
        netpbm.write_image("i.ppm", s.image)
        netpbm.write_mask("s.pgm", s.foreground)
        assert run("mask", "--in", "i.ppm", "--saliency", "s.pgm", "--out-mask", "m.pgm", "--out-bbox", "b.txt") == 0
        got = netpbm.read_mask("m.pgm").astype(bool)
        fg = s.foreground.astype(bool)
        assert (got & fg).sum() / (got | fg).sum() == 1.0

    def test_zero_map_central(self, workdir, capsys):
        netpbm.write_image("i.ppm", np.zeros((10, 10, 3)))
        netpbm.write_pgm("z.pgm", np.zeros((10, 10), np.uint8))
        assert run("mask", "--in", "i.ppm", "--saliency", "z.pgm", "--out-mask", "m.pgm", "--out-bbox", "b.txt") == 0
        assert "central_fallback" in capsys.readouterr().out
        assert BoundingBox.from_text((workdir / "b.txt").read_text()) == BoundingBox(1, 1, 8, 8)

    def test_truncated_pgm(self, workdir, capsys):
        netpbm.write_image("i.ppm", np.zeros((4, 4, 3)))
        (workdir / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
        assert run("mask", "--in", "i.ppm", "--saliency", "t.pgm", "--out-mask", "m", "--out-bbox", "b") == 2
        assert "byte offset" in capsys.readouterr().err

    def test_missing_saliency_source(self, workdir, capsys):
        netpbm.write_image("i.ppm", np.zeros((4, 4, 3)))
        assert run("mask", "--in", "i.ppm", "--out-mask", "m", "--out-bbox", "b") == 2
        assert "manifest" in capsys.readouterr().err

    def test_missing_required_flag(self, workdir, capsys):
        assert run("mask", "--in", "i.ppm") == 2


class TestTrainEval:
    def test_train_eval_deterministic(self, workdir, capsys):
        assert run("train", "--config", "run.cfg", "--ckpt", "a.ckpt") == 0
        out = capsys.readouterr().out
        assert "split=val" in out and "smge_train=true" in out
        assert run("eval", "--config", "run.cfg", "--ckpt", "a.ckpt") == 0
        first = capsys.readouterr().out
        assert run("eval", "--config", "run.cfg", "--ckpt", "a.ckpt") == 0
        assert capsys.readouterr().out == first
        assert first.startswith("accuracy=") and "crop=true" in first

    def test_zero_theta_equals_vanilla(self, workdir, capsys):
        assert run("train", "--config", "run.cfg", "--ckpt", "g.ckpt", "--d_theta=0") == 0
        assert run("train", "--config", "run.cfg", "--ckpt", "v.ckpt", "--d_theta=0", "--smge_train=false") == 0
        assert (workdir / "g.ckpt").read_bytes() == (workdir / "v.ckpt").read_bytes()
        capsys.readouterr()
        run("eval", "--config", "run.cfg", "--ckpt", "g.ckpt", "--d_theta=0")
        a = capsys.readouterr().out.split()[:2]
        run("eval", "--config", "run.cfg", "--ckpt", "v.ckpt", "--smge_infer=false")
        assert capsys.readouterr().out.split()[:2] == a

    def test_mixed_flags_logged(self, workdir, capsys):
        assert run("train", "--config", "run.cfg", "--smge_train=true", "--smge_infer=false") == 0
        assert "smge_train=true smge_infer=false" in capsys.readouterr().out

    def test_config_violation_before_compute(self, workdir, capsys):
        assert run("train", "--config", "run.cfg", "--heads=3") == 2
        assert run("train", "--config", "run.cfg", "--lr=-1") == 2
        assert not list(workdir.glob("*.ckpt"))

    def test_eval_without_checkpoint(self, workdir):
        assert run("eval", "--config", "run.cfg") == 2

    def test_corrupt_checkpoint(self, workdir):
        (workdir / "bad.ckpt").write_bytes(b"SMVT\x01\x00")
        assert run("eval", "--config", "run.cfg", "--ckpt", "bad.ckpt") == 2


class TestAttend:
    @pytest.fixture
    def ckpt(self, workdir):
        run("train", "--config", "run.cfg", "--ckpt", "a.ckpt", "--steps=0")
        run("dataset", "--out", "ds", "--n", 1)
        return workdir / "a.ckpt"

    def test_heatmap_written(self, ckpt, workdir):
        assert run("attend", "--ckpt", ckpt, "--in", "ds/sample_0000000.ppm", "--out", "h.pgm") == 0
        heat = netpbm.read_pgm("h.pgm")
        assert heat.shape == (24, 24)

    def test_unguided_ignores_saliency_beyond_crop(self, ckpt, workdir):
        s = T.generate_sample(T.ToySpec(), 0)
        netpbm.write_mask("a.pgm", s.foreground)
        sharp = s.foreground.astype(float) * 0.9  # same mask after thresholding
        netpbm.write_map("b.pgm", sharp)
        for name in ("a", "b"):
            assert run(
                "attend", "--ckpt", ckpt, "--in", "ds/sample_0000000.ppm",
                "--saliency", f"{name}.pgm", "--out", f"h{name}.pgm", "--guided", "false",
            ) == 0
        np.testing.assert_array_equal(netpbm.read_pgm("ha.pgm"), netpbm.read_pgm("hb.pgm"))

    def test_resolution_mismatch(self, ckpt, workdir):
        netpbm.write_image("big.ppm", np.zeros((32, 32, 3)))
        netpbm.write_pgm("s.pgm", np.full((32, 32), 255, np.uint8))
        rc = run("attend", "--ckpt", ckpt, "--in", "big.ppm", "--saliency", "s.pgm", "--out", "h.pgm", "--crop", "false")
        assert rc == 2


class TestGradcheckSweep:
    def test_gradcheck(self, capsys):
        assert run("gradcheck", "--d_theta=0.25") == 0
        assert "failures=0" in capsys.readouterr().out

    def test_gradcheck_rejects_train_keys(self):
        assert run("gradcheck", "--lr=0.1") == 2

    def test_sweep(self, workdir, capsys):
        rc = run("sweep", "--config", "run.cfg", "--seeds=0,1", "--variants=vanilla,sm_vit", "--steps=2")
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [ln.split()[0] for ln in lines] == ["variant=vanilla", "variant=sm_vit"]

    def test_unknown_variant(self, workdir):
        assert run("sweep", "--config", "run.cfg", "--variants=magic") == 2


def test_checkpoint_config_used(workdir):
    run("train", "--config", "run.cfg", "--ckpt", "a.ckpt", "--steps=0")
    config, _ = M.load_checkpoint(workdir / "a.ckpt")
    assert config.embed_dim == 8 and config.layers == 1
