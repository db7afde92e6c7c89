import numpy as np
import pytest

from audiosr import cli, data, models
from audiosr.dsp import Signal


def run(*argv):
    return cli.main(list(argv))


def write_tone(path, n=8192, rate=12000, freq=440.0):
    t = np.arange(n) / rate
    data.wav_write(Signal(0.5 * np.sin(2 * np.pi * freq * t), rate), path)


@pytest.fixture()
def tiny_ckpt(tmp_path):
    m = models.build_edsr(models.EdsrConfig(filters=4, n_blocks=1), seed=0)
    path = tmp_path / "edsr.ckpt"
    models.save_checkpoint(m, path)
    return path


class TestUpsample:
    def test_spline_doubles_rate_and_length(self, tmp_path):
        src = tmp_path / "in.wav"
        dst = tmp_path / "out.wav"
        write_tone(src, n=4096)
        assert run("upsample", "--scale", "2", "--method", "spline", str(src), str(dst)) == 0
        out = data.wav_read(dst)
        assert len(out) == 8192
        assert out.sample_rate == 24000
        assert (tmp_path / "run.meta").exists()

    def test_model_method_needs_checkpoint(self, tmp_path):
        src = tmp_path / "in.wav"
        write_tone(src)
        code = run("upsample", "--scale", "2", "--method", "model", str(src), str(tmp_path / "o.wav"))
        assert code == 1

    def test_model_upsample(self, tmp_path, tiny_ckpt):
        src = tmp_path / "in.wav"
        dst = tmp_path / "out.wav"
        write_tone(src, n=2048)
        code = run(
            "upsample", "--scale", "2", "--method", "model",
            "--checkpoint", str(tiny_ckpt), str(src), str(dst),
        )
        assert code == 0
        out = data.wav_read(dst)
        assert len(out) == 4096
        assert out.sample_rate == 24000

    def test_missing_input_is_data_error(self, tmp_path):
        code = run("upsample", "--scale", "2", str(tmp_path / "nope.wav"), str(tmp_path / "o.wav"))
        assert code == 2


class TestProbeCommand:
    def test_writes_three_artifacts(self, tmp_path, tiny_ckpt):
        out = tmp_path / "probe"
        code = run(
            "probe", "--checkpoint", str(tiny_ckpt), "--out", str(out),
            "--length", "4096",
        )
        assert code == 0
        for name in ("report.txt", "spec.csv", "spec.pgm", "run.meta"):
            assert (out / name).exists()

    def test_bad_checkpoint_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert run("probe", "--checkpoint", str(bad), "--out", str(tmp_path / "p")) == 2


class TestEvalCommand:
    def test_spline_baseline_on_synth(self, tmp_path):
        out = tmp_path / "eval"
        code = run(
            "eval", "--spline", "--scale", "2", "--synth", "3",
            "--synth-seed", "5", "--out", str(out),
        )
        assert code == 0
        text = (out / "metrics.csv").read_text()
        assert "item_id,snr_db,lsd_db" in text
        assert "# scale = 2" in text

    def test_checkpoint_eval(self, tmp_path, tiny_ckpt):
        out = tmp_path / "eval"
        code = run(
            "eval", "--checkpoint", str(tiny_ckpt), "--scale", "2",
            "--synth", "2", "--out", str(out),
        )
        assert code == 0
        assert (out / "metrics.csv").exists()

    def test_needs_checkpoint_or_spline(self, tmp_path):
        assert run("eval", "--scale", "2", "--out", str(tmp_path / "e")) == 1


class TestPrepareAndTrain:
    def build_corpus(self, root, speakers=3):
        rng = np.random.default_rng(0)
        for s in range(speakers):
            d = root / f"p{s:03d}"
            d.mkdir(parents=True)
            for u in range(2):
                x = rng.normal(0, 0.1, 24000)
                data.wav_write(Signal(np.clip(x, -1, 1), 48000), d / f"u{u}.wav")

    def test_prepare_decimates_and_writes_manifest(self, tmp_path):
        root = tmp_path / "raw"
        self.build_corpus(root)
        out = tmp_path / "prepared"
        code = run(
            "prepare", "--root", str(root), "--out", str(out),
            "--target-rate", "12000", "--ratios", "0.5,0.25,0.25", "--seed", "1",
        )
        assert code == 0
        index = data.CorpusIndex.read_manifest(out / "manifest.txt")
        assert len(index.entries) == 6
        first = data.wav_read(index.entries[0].path)
        assert first.sample_rate == 12000
        assert len(first) == 6000

    def test_prepare_empty_root_is_data_error(self, tmp_path):
        (tmp_path / "raw").mkdir()
        assert run("prepare", "--root", str(tmp_path / "raw"), "--out", str(tmp_path / "o")) == 2

    def test_train_from_config(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text(
            "[run]\n"
            "model = edsr\n"
            "[model]\n"
            "filters = 4\n"
            "n_blocks = 1\n"
            "[train]\n"
            "steps = 3\n"
            "batch_size = 2\n"
            "patch_length = 256\n"
            "seed = 3\n"
            "[data]\n"
            "synth_count = 4\n"
            "synth_length = 2048\n"
        )
        out = tmp_path / "run"
        assert run("train", "--config", str(cfgfile), "--out", str(out)) == 0
        assert (out / "final.ckpt").exists()
        assert (out / "trainlog.csv").exists()
        assert (out / "run.meta").exists()
        loaded = models.load_checkpoint(out / "final.ckpt")
        assert loaded.kind == "edsr"
        assert loaded.train_step == 3

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("[train]\nsteps = 1\nbogus_key = 5\n")
        assert run("train", "--config", str(cfgfile), "--out", str(tmp_path / "o")) == 1
        assert "bogus_key" in capsys.readouterr().err

    def test_unknown_section_is_usage_error(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("[mystery]\nx = 1\n")
        assert run("train", "--config", str(cfgfile), "--out", str(tmp_path / "o")) == 1

    def test_train_gan_from_config(self, tmp_path):
        cfgfile = tmp_path / "gan.cfg"
        cfgfile.write_text(
            "[run]\n"
            "model = unet\n"
            "[model]\n"
            "depth = 2\n"
            "down_filters = 4,8\n"
            "down_kernels = 9,9\n"
            "bottleneck_filters = 8\n"
            "scale = 2\n"
            "[critic]\n"
            "layers = 2\n"
            "base_filters = 4\n"
            "kernel = 9\n"
            "[train]\n"
            "steps = 1\n"
            "batch_size = 2\n"
            "patch_length = 256\n"
            "[gan]\n"
            "n_critic = 2\n"
            "[data]\n"
            "synth_count = 4\n"
            "synth_length = 1024\n"
        )
        out = tmp_path / "gan"
        assert run("train-gan", "--config", str(cfgfile), "--out", str(out)) == 0
        assert (out / "generator.ckpt").exists()
        assert (out / "critic.ckpt").exists()


class TestCompareLosses:
    def test_emits_table_shaped_csv(self, tmp_path):
        out = tmp_path / "cmp"
        code = run(
            "compare-losses", "--model", "edsr", "--steps", "3", "--seed", "7",
            "--synth", "4", "--patch", "512", "--batch", "2", "--out", str(out),
        )
        assert code == 0
        lines = (out / "compare.csv").read_text().strip().splitlines()
        body = [l for l in lines if not l.startswith("#")]
        assert body[0] == "loss,snr_mean,snr_std,lsd_mean,lsd_std"
        assert body[1].startswith("l1,")
        assert body[2].startswith("l2,")


class TestExitCodes:
    def test_usage_error_on_unknown_flag(self):
        assert run("eval", "--scale", "2", "--frobnicate") == 1

    def test_usage_error_on_missing_subcommand(self):
        assert run() == 1

    def test_numeric_failure_exits_three(self, tmp_path, capsys):
        cfgfile = tmp_path / "blowup.cfg"
        cfgfile.write_text(
            "[run]\nmodel = edsr\n"
            "[model]\nfilters = 4\nn_blocks = 1\n"
            "[train]\nsteps = 3\nbatch_size = 1\npatch_length = 256\nlr = 1e200\n"
            "[data]\nsynth_count = 2\nsynth_length = 1024\n"
        )
        assert run("train", "--config", str(cfgfile), "--out", str(tmp_path / "o")) == 3
        assert "numeric failure" in capsys.readouterr().err

    def test_run_meta_deterministic(self, tmp_path):
        metas = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(
                "eval", "--spline", "--scale", "2", "--synth", "2",
                "--synth-seed", "3", "--out", str(out),
            ) == 0
            metas.append((out / "run.meta").read_bytes())
        assert metas[0] == metas[1]
