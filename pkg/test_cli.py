import logging
import os

import numpy as np
import pytest

import main
from checkpoint import load_checkpoint, save_checkpoint
from gradcheck import CheckResult
from main import UsageError, blend_latents, parse_angles, run


def drop_file_handlers():
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture(autouse=True)
def restore_logging():
    yield
    drop_file_handlers()


TINY_CONFIG = """# desk config for tests
image_size = 8
latent_dim = 8
width = 0.03125
embed_dim = 8
batch_size = 2
prior_samples = 500
checkpoint_interval = 2
log_interval = 1
dtype = float64
seed = 1
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A two-step run shared by the inference command tests."""
    out = tmp_path_factory.mktemp("train")
    config = out / "tiny.conf"
    config.write_text(TINY_CONFIG, encoding="utf-8")
    code = run(["train", "--config", str(config), "--steps", "2", "--out", str(out)])
    drop_file_handlers()
    assert code == 0
    return out


class TestArguments:
    def test_unknown_command(self, tmp_path):
        assert run(["paint", "--out", str(tmp_path)]) == 2

    def test_inference_needs_a_checkpoint(self, tmp_path):
        assert run(["render", "--out", str(tmp_path)]) == 2
        assert run(["render", "--checkpoint", str(tmp_path / "nope.l3dg"), "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "bad.conf"
        config.write_text("image_size = 8\ncolour = red\n", encoding="utf-8")
        assert run(["train", "--config", str(config), "--out", str(tmp_path)]) == 2

    def test_corrupt_checkpoint(self, tmp_path):
        path = tmp_path / "broken.l3dg"
        path.write_bytes(b"not a checkpoint")
        assert run(["render", "--checkpoint", str(path), "--out", str(tmp_path)]) == 1

    def test_parse_angles(self):
        assert parse_angles("-30, 0,15", [1.0]) == [-30.0, 0.0, 15.0]
        assert parse_angles(None, [1.0]) == [1.0]
        for bad in ("a,b", ",", "0,61"):
            with pytest.raises(UsageError):
                parse_angles(bad, [])

    def test_blend_endpoints_are_exact(self, rng):
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        blends = blend_latents(a, b, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(blends[0], a)
        np.testing.assert_array_equal(blends[2], b)
        np.testing.assert_allclose(blends[1], 0.5 * (a + b))

    def test_gradcheck_failure_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(main, "run_suite", lambda seed, threads: [CheckResult("x", 1.0, 1e-5, False)])
        assert run(["gradcheck", "--out", str(tmp_path)]) == 1
        with open(tmp_path / "gradcheck.txt", encoding="utf-8") as f:
            assert "FAIL" in f.read()


class TestCommands:
    def test_training_outputs(self, trained):
        names = os.listdir(trained)
        assert "checkpoint_000002.l3dg" in names
        assert "loss.csv" in names and "checkpoints.json" in names and "lifted3d.log" in names

    @pytest.mark.parametrize("command, extra, produced", [
        ("render", ["--samples", "2"], "sample_01_panel.ppm"),
        ("sweep-yaw", ["--angles", "-30,0,30", "--samples", "2"], "sweep_yaw.ppm"),
        ("sweep-pitch", ["--samples", "1"], "sweep_pitch.ppm"),
        ("relight", ["--samples", "2"], "relight.ppm"),
        ("interpolate", [], "interpolate.ppm"),
        ("eval", ["--samples", "2", "--angles", "0,30"], "eval_report.csv"),
    ])
    def test_inference_command(self, trained, tmp_path, command, extra, produced):
        checkpoint = str(trained / "checkpoint_000002.l3dg")
        assert run([command, "--checkpoint", checkpoint, "--out", str(tmp_path)] + extra) == 0
        assert os.path.exists(tmp_path / produced)

    def test_eval_requires_frontal_angle(self, trained, tmp_path):
        checkpoint = str(trained / "checkpoint_000002.l3dg")
        assert run(["eval", "--checkpoint", checkpoint, "--out", str(tmp_path), "--angles", "15,30"]) == 2

    def test_resume_from_checkpoint(self, trained, tmp_path):
        checkpoint = str(trained / "checkpoint_000002.l3dg")
        config = tmp_path / "tiny.conf"
        config.write_text(TINY_CONFIG, encoding="utf-8")
        assert run(["train", "--config", str(config), "--steps", "3", "--checkpoint", checkpoint,
                    "--out", str(tmp_path)]) == 0
        assert os.path.exists(tmp_path / "checkpoint_000003.l3dg")

    def test_resume_from_run_directory(self, trained, tmp_path):
        config = tmp_path / "tiny.conf"
        config.write_text(TINY_CONFIG, encoding="utf-8")
        out = tmp_path / "out"
        assert run(["train", "--config", str(config), "--steps", "3", "--checkpoint", str(trained),
                    "--out", str(out)]) == 0
        drop_file_handlers()
        assert os.path.exists(out / "checkpoint_000003.l3dg")
        log = (out / "lifted3d.log").read_text(encoding="utf-8")
        assert "Resuming from" in log and "checkpoint_000002.l3dg" in log

    def test_resume_from_directory_without_checkpoints(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        config = tmp_path / "tiny.conf"
        config.write_text(TINY_CONFIG, encoding="utf-8")
        assert run(["train", "--config", str(config), "--checkpoint", str(empty), "--out", str(tmp_path)]) == 2

    def test_nan_parameter_fails_the_run_and_names_the_op(self, trained, tmp_path):
        ckpt = load_checkpoint(str(trained / "checkpoint_000002.l3dg"))
        ckpt.params["background"] = np.full_like(ckpt.params["background"], np.nan)
        broken = save_checkpoint(str(tmp_path / "broken.l3dg"), ckpt)
        config = tmp_path / "tiny.conf"
        config.write_text(TINY_CONFIG, encoding="utf-8")
        out = tmp_path / "out"
        assert run(["train", "--config", str(config), "--steps", "3", "--checkpoint", broken,
                    "--out", str(out)]) == 1
        drop_file_handlers()
        log = (out / "lifted3d.log").read_text(encoding="utf-8")
        assert "Non-finite loss at step 3" in log
        assert "Reshape output (tape node" in log and "leaf background" in log
        assert not os.path.exists(out / "checkpoint_000003.l3dg")
