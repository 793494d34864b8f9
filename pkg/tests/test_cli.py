"""End-to-end exercises of the vdeblur command line."""

import numpy as np
import pytest

from vdeblur.cli import main
from vdeblur.data import load_frames, make_toy_dataset, save_frame
from vdeblur.model import init_disc_params, init_gen_params
from vdeblur.train import TrainConfig, save_training_checkpoint

SYNTH_ARGS = ["--n-clips", "2", "--frames-per-clip", "20", "--size", "32x32",
              "--window", "3", "--n-range", "4,5"]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    code = main(["synth", "--toy", "--seed", "1", "--out", str(out)] + SYNTH_ARGS)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def identity_ckpt(tmp_path_factory):
    """Untrained single-stage model; its residual head is zero, so restoration
    passes the middle frame through unchanged."""
    tc = TrainConfig(lr=1e-4, alpha=0.0, stages=1, patch=16,
                     pyramid_L=0, channels=8, align="off")
    gen = init_gen_params(tc.model_config(), np.random.default_rng(0))
    disc = init_disc_params(np.random.default_rng(1))
    path = tmp_path_factory.mktemp("ckpt") / "identity.npz"
    save_training_checkpoint(path, gen, disc, tc)
    return path


class TestSynth:
    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            code = main(["synth", "--toy", "--seed", "7", "--out",
                         str(tmp_path / name), "--n-clips", "1",
                         "--frames-per-clip", "12", "--size", "32x32",
                         "--window", "3", "--n-range", "4,5"])
            assert code == 0
        a, b = tmp_path / "a", tmp_path / "b"
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b and files_a
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_even_window_rejected(self, tmp_path, capsys):
        code = main(["synth", "--toy", "--seed", "0", "--out",
                     str(tmp_path / "x"), "--window", "8"])
        assert code == 2
        assert "odd" in capsys.readouterr().err

    def test_source_flags_are_exclusive(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x")]) == 2
        assert main(["synth", "--toy", "--sharp-dir", str(tmp_path),
                     "--out", str(tmp_path / "x")]) == 2

    def test_sharp_dir_source(self, tmp_path):
        src = tmp_path / "frames"
        src.mkdir()
        clip = make_toy_dataset(1, 12, 32, 32, seed=2)[0]
        for i, f in enumerate(clip.frames):
            save_frame(src / f"{i:05d}.png", f)
        out = tmp_path / "ds"
        code = main(["synth", "--sharp-dir", str(src), "--out", str(out),
                     "--window", "3", "--n-range", "4,5", "--seed", "0"])
        assert code == 0
        assert (out / "manifest.txt").is_file()
        assert (out / "frames" / "blur").is_dir()

    def test_resolved_config_echoed(self, tmp_path, capsys):
        main(["synth", "--toy", "--seed", "3", "--out", str(tmp_path / "x"),
              "--n-clips", "1", "--frames-per-clip", "20", "--size", "32x32",
              "--window", "3", "--n-range", "4,5"])
        out = capsys.readouterr().out
        assert "config: window=3" in out
        assert "config: seed=3" in out


class TestConfigFile:
    def test_flags_beat_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "bench.cfg"
        cfg.write_text("reps=2\nchannels=2\n")
        code = main(["bench", "--config", str(cfg), "--reps", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "config: reps=1" in out
        assert "config: channels=2" in out

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus=1\n")
        assert main(["bench", "--config", str(cfg)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit):
            main(["bench", "--bogus", "1"])


class TestTrainCommand:
    def test_short_run_writes_checkpoint_and_metrics(self, dataset_dir, tmp_path):
        ckpt = tmp_path / "run" / "model.npz"
        code = main(["train", "--data", str(dataset_dir), "--ckpt-out", str(ckpt),
                     "--stages", "1", "--pyramid-L", "0", "--channels", "8",
                     "--align", "off", "--alpha", "0", "--patch", "16",
                     "--epochs", "1", "--max-steps", "2", "--seed", "0"])
        assert code == 0
        assert ckpt.is_file()
        lines = (tmp_path / "run" / "model.npz.metrics.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,l1,loss_G,loss_D,lr,wall_ms"
        assert len(lines) == 3

    def test_missing_data_flag_rejected(self, tmp_path, capsys):
        assert main(["train", "--ckpt-out", str(tmp_path / "m.npz")]) == 2
        assert "--data" in capsys.readouterr().err

    def test_divergent_run_exits_with_numerical_failure(self, dataset_dir, tmp_path,
                                                        capsys):
        code = main(["train", "--data", str(dataset_dir), "--ckpt-out",
                     str(tmp_path / "m.npz"), "--stages", "1", "--pyramid-L", "0",
                     "--channels", "8", "--align", "off", "--alpha", "0",
                     "--patch", "16", "--epochs", "1", "--max-steps", "4",
                     "--lr", "1e10", "--seed", "0"])
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err


class TestDeblurCommand:
    def test_identity_checkpoint_passes_middle_frames_through(
            self, dataset_dir, identity_ckpt, tmp_path):
        in_dir = dataset_dir / "clip000" / "blur"
        out_dir = tmp_path / "restored"
        code = main(["deblur", "--ckpt", str(identity_ckpt), "--in", str(in_dir),
                     "--out", str(out_dir)])
        assert code == 0
        src = load_frames(in_dir)
        out = load_frames(out_dir)
        assert len(out) == len(src) - 2
        for i, frame in enumerate(out.frames):
            np.testing.assert_array_equal(frame.data, src.frames[i + 1].data)

    def test_output_names_follow_center_indices(self, dataset_dir, identity_ckpt,
                                                tmp_path):
        out_dir = tmp_path / "named"
        main(["deblur", "--ckpt", str(identity_ckpt), "--in",
              str(dataset_dir / "clip001" / "blur"), "--out", str(out_dir)])
        names = sorted(p.name for p in out_dir.iterdir())
        assert names[0] == "00001.png"

    def test_clip_shorter_than_window_rejected(self, identity_ckpt, tmp_path, capsys):
        short = tmp_path / "short"
        short.mkdir()
        save_frame(short / "00000.png", np.zeros((3, 16, 16), np.float32))
        code = main(["deblur", "--ckpt", str(identity_ckpt), "--in", str(short),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "frames" in capsys.readouterr().err

    def test_stage_override_conflict_rejected(self, dataset_dir, identity_ckpt,
                                              tmp_path):
        code = main(["deblur", "--ckpt", str(identity_ckpt), "--in",
                     str(dataset_dir / "clip000" / "blur"),
                     "--out", str(tmp_path / "o"), "--stages", "3"])
        assert code == 2


class TestEvalCommand:
    def test_identical_dirs_score_perfect_ssim(self, dataset_dir, tmp_path, capsys):
        gt = dataset_dir / "clip000" / "sharp"
        out_csv = tmp_path / "report.csv"
        code = main(["eval", "--pred", str(gt), "--gt", str(gt),
                     "--out", str(out_csv)])
        assert code == 0
        assert "mean_ssim=1.0" in capsys.readouterr().out
        mean_row = out_csv.read_text().strip().split("\n")[-1]
        assert mean_row.split(",")[2] == "1.0"

    def test_count_mismatch_rejected(self, dataset_dir, tmp_path, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        save_frame(pred / "00000.png", np.zeros((3, 16, 16), np.float32))
        code = main(["eval", "--pred", str(pred), "--gt",
                     str(dataset_dir / "clip000" / "sharp")])
        assert code == 2
        assert "mismatch" in capsys.readouterr().err

    def test_quantize_is_noop_on_png_frames(self, dataset_dir, capsys):
        gt = str(dataset_dir / "clip000" / "sharp")
        pred = str(dataset_dir / "clip000" / "blur")
        main(["eval", "--pred", pred, "--gt", gt])
        plain = capsys.readouterr().out.strip().split("\n")[-1]
        main(["eval", "--pred", pred, "--gt", gt, "--quantize"])
        quantized = capsys.readouterr().out.strip().split("\n")[-1]
        assert plain == quantized


class TestBenchCommand:
    def test_equivalence_and_table_layout(self, capsys):
        code = main(["bench", "--size", "8x8", "--channels", "4",
                     "--pyramid-L", "1", "--impl", "both", "--reps", "2"])
        assert code == 0
        lines = [ln for ln in capsys.readouterr().out.splitlines()
                 if not ln.startswith("config:")]
        assert lines[0] == "impl,level,reps,mean_ms,max_abs_diff"
        body = [ln.split(",") for ln in lines[1:]]
        assert {row[0] for row in body} == {"naive", "optimized"}
        for row in body:
            assert float(row[4]) <= 1e-5

    def test_zero_reps_rejected(self, capsys):
        assert main(["bench", "--reps", "0"]) == 2
        assert "reps" in capsys.readouterr().err

    def test_indivisible_size_rejected(self):
        assert main(["bench", "--size", "9x9", "--pyramid-L", "1"]) == 2
