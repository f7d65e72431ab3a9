import hashlib
import json

import numpy as np
import pytest

from avejca import autograd as ag
from avejca.cli import main
from avejca.config import RunConfig
from avejca.data import read_feature_file, save_checkpoint
from avejca.model import init_params

SMALL_SYNTH = ["--audio-dim", "6", "--visual-positions", "49", "--visual-channels", "3"]
SMALL_MODEL = dict(N=10, d_a=8, d_v=8, k=4, depth=1, class_count=6, audio_dim=6, visual_positions=49,
                   visual_channels=3, joint_hidden=4, mlp_hidden=[8, 8], epochs=2, batch_size=8, seed=3)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def synth_file(tmp_path):
    def make(name="train.avef", *extra):
        path = tmp_path / name
        assert main(["synth", "--out", str(path), "--classes", "5", "--per-class", "4", "--n", "10",
                     "--seed", "7", *SMALL_SYNTH, *extra]) == 0
        return path
    return make


def write_config(tmp_path, **overrides):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({**SMALL_MODEL, **overrides}))
    return path


class TestSynth:
    def test_counts(self, tmp_path, capsys):
        out = tmp_path / "s.avef"
        assert main(["synth", "--classes", "5", "--per-class", "64", "--n", "10", "--seed", "7",
                     "--out", str(out), *SMALL_SYNTH]) == 0
        data = read_feature_file(out)
        assert len(data) == 320 and data.labels.size == 3200
        text = capsys.readouterr().out
        assert "320 sequences, 3200 segments" in text and "background fraction" in text
        assert (tmp_path / "s.avef.config.json").exists()

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.avef", tmp_path / "b.avef"
        for out in (a, b):
            assert main(["synth", "--seed", "7", "--per-class", "8", "--out", str(out), *SMALL_SYNTH]) == 0
        assert sha(a) == sha(b)

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        a, b = tmp_path / "a.avef", tmp_path / "b.avef"
        monkeypatch.setenv("AVE_SEED", "7")
        assert main(["synth", "--per-class", "2", "--out", str(a), *SMALL_SYNTH]) == 0
        monkeypatch.delenv("AVE_SEED")
        assert main(["synth", "--per-class", "2", "--seed", "7", "--out", str(b), *SMALL_SYNTH]) == 0
        assert sha(a) == sha(b)

    def test_background_rate(self, tmp_path):
        out = tmp_path / "bg.avef"
        assert main(["synth", "--classes", "5", "--per-class", "64", "--background-rate", "0.3",
                     "--out", str(out), *SMALL_SYNTH]) == 0
        labels = read_feature_file(out).labels
        assert labels.size >= 3000
        assert abs(np.mean(labels == 5) - 0.3) <= 0.03

    def test_unwritable_path(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "missing" / "x.avef"), *SMALL_SYNTH]) == 3

    def test_invalid_spec(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--background-rate", "1.5"]) == 2


class TestTrainEval:
    def _train(self, tmp_path, synth_file, tag, **overrides):
        train = synth_file()
        val = synth_file("val.avef", "--split", "val")
        ckpt = tmp_path / f"{tag}.avec"
        config = write_config(tmp_path, train_path=str(train), val_path=str(val),
                              checkpoint_path=str(ckpt), **overrides)
        assert main(["train", "--config", str(config), "--log-path", str(tmp_path / f"{tag}.csv")]) == 0
        return ckpt, tmp_path / f"{tag}.csv", train

    def test_log_and_checkpoint(self, tmp_path, synth_file):
        ckpt, log, _ = self._train(tmp_path, synth_file, "run")
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_acc"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]
        assert ckpt.exists()
        assert (tmp_path / "run.avec.config.json").exists() and (tmp_path / "run.csv.config.json").exists()

    def test_two_runs_identical(self, tmp_path, monkeypatch):
        # relative paths so the embedded config echo is the same in both runs
        runs = []
        for name in ("one", "two"):
            run_dir = tmp_path / name
            run_dir.mkdir()
            monkeypatch.chdir(run_dir)
            assert main(["synth", "--out", "train.avef", "--per-class", "4", "--seed", "7", *SMALL_SYNTH]) == 0
            config = write_config(run_dir, train_path="train.avef", checkpoint_path="m.avec", log_path="m.csv")
            assert main(["train", "--config", str(config)]) == 0
            runs.append(run_dir)
        for artifact in ("m.csv", "m.avec"):
            assert (runs[0] / artifact).read_bytes() == (runs[1] / artifact).read_bytes()

    def test_depth_zero_trains(self, tmp_path, synth_file):
        ckpt, log, _ = self._train(tmp_path, synth_file, "flat", depth=0)
        assert len(log.read_text().splitlines()) == 3

    def test_flags_override_file(self, tmp_path, synth_file):
        ckpt, log, _ = self._train(tmp_path, synth_file, "short", epochs=5)
        train = synth_file()
        config = write_config(tmp_path, train_path=str(train), checkpoint_path=str(ckpt), epochs=5)
        out = tmp_path / "override.csv"
        assert main(["train", "--config", str(config), "--epochs", "1", "--log-path", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 2

    def test_dimension_mismatch_before_training(self, tmp_path, synth_file, capsys):
        train = synth_file()
        config = write_config(tmp_path, train_path=str(train), checkpoint_path=str(tmp_path / "m.avec"),
                              audio_dim=7)
        assert main(["train", "--config", str(config)]) == 2
        err = capsys.readouterr().err
        assert "(10, 7, 49, 3)" in err and "(10, 6, 49, 3)" in err
        assert not (tmp_path / "m.avec").exists()

    def test_missing_paths(self, tmp_path):
        assert main(["train", "--config", str(write_config(tmp_path))]) == 2

    def test_unknown_config_key(self, tmp_path):
        assert main(["train", "--config", str(write_config(tmp_path, dropout=0.5))]) == 2

    def test_eval_confusion_rows(self, tmp_path, synth_file, capsys):
        ckpt, _, train = self._train(tmp_path, synth_file, "ev")
        out = tmp_path / "cm.csv"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(train), "--out", str(out)]) == 0
        rows = out.read_text().splitlines()
        assert rows[0].startswith("true\\pred,")
        cm = np.array([[int(v) for v in row.split(",")[1:]] for row in rows[1:]])
        labels = read_feature_file(train).labels
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels.ravel(), minlength=6))
        assert "segment accuracy" in capsys.readouterr().out

    def test_eval_untrained_near_chance(self, tmp_path):
        # any single random model is biased toward a few classes; by label symmetry the
        # expectation over initialisations is 1/6, estimated here from 30 seeds
        data = tmp_path / "balanced.avef"
        assert main(["synth", "--out", str(data), "--classes", "5", "--per-class", "16",
                     "--background-rate", str(1 / 6), "--seed", "11", *SMALL_SYNTH]) == 0
        accuracies = []
        for seed in range(30):
            config = RunConfig(**{**SMALL_MODEL, "seed": seed}).validate()
            ckpt = tmp_path / "untrained.avec"
            save_checkpoint(ckpt, config, init_params(config))
            out = tmp_path / "cm.csv"
            assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
            cm = np.array([[int(v) for v in r.split(",")[1:]] for r in out.read_text().splitlines()[1:]])
            accuracies.append(np.trace(cm) / cm.sum())
        assert abs(np.mean(accuracies) - 1 / 6) <= 0.05

    def test_eval_dimension_mismatch(self, tmp_path, synth_file, capsys):
        train = synth_file()
        config = RunConfig(**{**SMALL_MODEL, "visual_channels": 4}).validate()
        ckpt = tmp_path / "wide.avec"
        save_checkpoint(ckpt, config, init_params(config))
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(train)]) == 2
        assert "do not match" in capsys.readouterr().err

    def test_eval_corrupt_file(self, tmp_path, synth_file):
        train = synth_file()
        train.write_bytes(b"JUNK" + train.read_bytes()[4:])
        config = RunConfig(**SMALL_MODEL).validate()
        ckpt = tmp_path / "m.avec"
        save_checkpoint(ckpt, config, init_params(config))
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(train)]) == 3
        ckpt.write_bytes(ckpt.read_bytes()[:-1] + b"\0")
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(train)]) == 3


class TestGradcheck:
    def test_passes_on_sampled_coordinates(self, capsys):
        assert main(["gradcheck", "--max-coords", "4"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "jca.2.W_ha" in out

    def test_corrupted_rule_fails(self, monkeypatch, capsys):
        monkeypatch.setattr(ag, "_tanh_backward", lambda g, ctx: (g * (1.0 + ctx["y"] ** 2),))
        assert main(["gradcheck", "--max-coords", "4"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_oversized_config_rejected(self):
        assert main(["gradcheck", "--d-a", "512", "--d-v", "512"]) == 2
        assert main(["gradcheck", "--N", "10"]) == 2


class TestParams:
    def test_sweep_increments_equal(self, capsys):
        assert main(["params", "--sweep"]) == 0
        lines = capsys.readouterr().out.split("depth sweep")[1].strip().splitlines()[1:]
        increments = {line.split()[3] for line in lines[1:]}
        assert len(increments) == 1

    def test_strategy_ordering(self, capsys):
        assert main(["params", "--strategies"]) == 0
        rows = capsys.readouterr().out.split("fusion strategy sweep")[1].strip().splitlines()
        c = {r.split()[0]: int(r.split()[1].replace(",", "")) for r in rows}
        assert c["addition"] == c["multiplication"] < c["concatenation"] < c["addition+fc"]
        assert c["addition+fc"] == c["multiplication+fc"] < c["concatenation+fc"]

    def test_depth_zero(self, capsys):
        assert main(["params", "--depth", "0"]) == 0
        jca_row = [r for r in capsys.readouterr().out.splitlines() if r.split()[:1] == ["jca"]]
        assert jca_row[0].split()[1] == "0"

    def test_bad_strategy(self):
        assert main(["params", "--fusion-strategy", "subtraction"]) == 2


class TestAttend:
    def _checkpoint(self, tmp_path, mutate=None):
        config = RunConfig(**SMALL_MODEL).validate()
        params = init_params(config)
        if mutate:
            mutate(params)
        path = tmp_path / "attn.avec"
        save_checkpoint(path, config, params)
        return path, params

    def _grids(self, out):
        return [np.loadtxt(out / f"segment_{t:02d}.csv", delimiter=",") for t in range(10)]

    def test_grids_sum_to_one(self, tmp_path, synth_file):
        ckpt, _ = self._checkpoint(tmp_path)
        out = tmp_path / "maps"
        assert main(["attend", "--checkpoint", str(ckpt), "--data", str(synth_file()),
                     "--index", "3", "--out", str(out)]) == 0
        for grid in self._grids(out):
            assert grid.shape == (7, 7)
            assert abs(grid.sum() - 1) <= 1e-6
        pgm = (out / "segment_00.pgm").read_bytes()
        assert pgm.startswith(b"P5\n7 7\n255\n") and len(pgm) == len(b"P5\n7 7\n255\n") + 49
        assert (out / "config.json").exists()

    def test_zero_projection_uniform(self, tmp_path, synth_file):
        def zero(params):
            params["early_fusion.audio_proj"][:] = 0
        ckpt, _ = self._checkpoint(tmp_path, zero)
        out = tmp_path / "maps"
        assert main(["attend", "--checkpoint", str(ckpt), "--data", str(synth_file()),
                     "--index", "0", "--out", str(out)]) == 0
        for grid in self._grids(out):
            np.testing.assert_allclose(grid, 1 / 49, atol=1e-12)

    def test_dominant_position(self, tmp_path, synth_file):
        from avejca.data import FeatureSet, write_feature_file

        ckpt, params = self._checkpoint(tmp_path)
        proj = params["early_fusion.audio_proj"]
        rng = np.random.default_rng(0)
        audio = rng.normal(size=(1, 10, 6))
        visual = rng.normal(0, 0.01, size=(1, 10, 49, 3))
        for t in range(10):
            q = proj @ audio[0, t]
            visual[0, t, 30] = 60 * q / np.linalg.norm(q)
        path = tmp_path / "constructed.avef"
        write_feature_file(path, FeatureSet(audio, visual, np.zeros((1, 10), dtype=np.int64)))
        out = tmp_path / "maps"
        assert main(["attend", "--checkpoint", str(ckpt), "--data", str(path), "--index", "0",
                     "--out", str(out)]) == 0
        for grid in self._grids(out):
            assert grid[30 // 7, 30 % 7] > 0.9

    def test_bad_index(self, tmp_path, synth_file):
        ckpt, _ = self._checkpoint(tmp_path)
        args = ["attend", "--checkpoint", str(ckpt), "--data", str(synth_file()), "--out", str(tmp_path / "m")]
        assert main([*args, "--index", "20"]) == 2
        assert main([*args, "--index", "-1"]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code == 2
