import csv
import json

import numpy as np
import pytest

from xraysep.checkpoint import load_checkpoint
from xraysep.cli import main
from xraysep.images import read_gray, write_png16

SMALL = ["--width", "4", "--patch-size", "16", "--overlap", "8", "--batch-size", "4"]


@pytest.fixture(scope="module")
def mixed(tmp_path_factory):
    d = tmp_path_factory.mktemp("mix")
    assert main(["mix", "--synthetic", "texture-pair", "--size", "32", "--seed", "0", "--out", str(d)]) == 0
    return d


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestMix:
    def test_synthetic_is_byte_identical(self, mixed, tmp_path):
        assert main(["mix", "--synthetic", "texture-pair", "--size", "32", "--seed", "0",
                     "--out", str(tmp_path)]) == 0
        for name in ("r1.png", "r2.png", "x1.png", "x2.png", "x.png", "x.json", "manifest.json"):
            assert (tmp_path / name).read_bytes() == (mixed / name).read_bytes()

    def test_zero_image_reproduces_input(self, tmp_path):
        img = np.random.default_rng(0).uniform(0, 1, size=(1, 16, 16))
        write_png16(tmp_path / "a.png", img)
        write_png16(tmp_path / "z.png", np.zeros_like(img))
        out = tmp_path / "out"
        assert main(["mix", "--x1", str(tmp_path / "a.png"), "--x2", str(tmp_path / "z.png"),
                     "--out", str(out)]) == 0
        assert (out / "x.png").read_bytes() == (tmp_path / "a.png").read_bytes()
        assert json.loads((out / "x.json").read_text())["factor"] == 1.0
        assert (out / "x1.png").read_bytes() == (tmp_path / "a.png").read_bytes()

    def test_sidecar_factor_is_inverse_max(self, tmp_path):
        a = np.full((1, 8, 8), 0.8)
        b = np.full((1, 8, 8), 0.6)
        write_png16(tmp_path / "a.png", a)
        write_png16(tmp_path / "b.png", b)
        out = tmp_path / "out"
        assert main(["mix", "--x1", str(tmp_path / "a.png"), "--x2", str(tmp_path / "b.png"),
                     "--out", str(out)]) == 0
        side = json.loads((out / "x.json").read_text())
        raw = read_gray(tmp_path / "a.png") + read_gray(tmp_path / "b.png")
        assert side["rescaled"] and side["factor"] == pytest.approx(1 / raw.max())
        np.testing.assert_allclose(read_gray(out / "x.png"), 1.0, atol=1e-5)

    def test_size_mismatch(self, tmp_path):
        write_png16(tmp_path / "a.png", np.zeros((1, 8, 8)))
        write_png16(tmp_path / "b.png", np.zeros((1, 8, 9)))
        assert main(["mix", "--x1", str(tmp_path / "a.png"), "--x2", str(tmp_path / "b.png"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_inputs_untouched(self, mixed, tmp_path):
        before = {p.name: p.read_bytes() for p in mixed.iterdir()}
        assert main(["train", "--manifest", str(mixed / "manifest.json"), "--epochs", "1",
                     "--out", str(tmp_path / "run"), *SMALL]) == 0
        assert {p.name: p.read_bytes() for p in mixed.iterdir()} == before


@pytest.fixture(scope="module")
def run(mixed, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--manifest", str(mixed / "manifest.json"), "--epochs", "1",
                 "--out", str(out), *SMALL]) == 0
    return out


class TestTrain:
    def test_layout(self, run):
        for name in ("config.json", "loss.csv", "summary.json", "x1hat.png", "x2hat.png", "xbar.png",
                     "error_map.png", "r1hat.png", "r2hat.png", "checkpoints/final.ckpt",
                     "checkpoints/epoch_1.ckpt"):
            assert (run / name).is_file(), name
        snaps = sorted(p.name for p in (run / "snapshots").iterdir())
        assert snaps == [f"epoch_1_{k}.png" for k in ("r1hat", "r2hat", "x1hat", "x2hat")]

    def test_one_row_loss_csv(self, run):
        rows = _rows(run / "loss.csv")
        assert len(rows) == 1 and rows[0]["epoch"] == "1"
        assert set(rows[0]) == {"epoch", "l1", "l2", "l3", "l4", "l5", "total"}

    def test_summary(self, run):
        s = json.loads((run / "summary.json").read_text())
        assert s["epochs"] == 1 and s["outcome"]["case"] in {"I", "II", "III"}
        assert s["mse"] >= 0 and s["recombination_error"] >= 0

    def test_outputs_are_16_bit(self, run):
        import cv2
        assert cv2.imread(str(run / "x1hat.png"), cv2.IMREAD_UNCHANGED).dtype == np.uint16

    def test_deterministic(self, mixed, run, tmp_path):
        assert main(["train", "--manifest", str(mixed / "manifest.json"), "--epochs", "1",
                     "--out", str(tmp_path), *SMALL]) == 0
        for name in ("loss.csv", "checkpoints/final.ckpt", "checkpoints/epoch_1.ckpt", "x1hat.png"):
            assert (tmp_path / name).read_bytes() == (run / name).read_bytes()

    def test_resume_matches_uninterrupted(self, mixed, tmp_path):
        man = str(mixed / "manifest.json")
        assert main(["train", "--manifest", man, "--epochs", "3", "--out", str(tmp_path / "full"),
                     "--snapshot-epochs", "1", *SMALL]) == 0
        assert main(["train", "--manifest", man, "--epochs", "1", "--out", str(tmp_path / "a"),
                     "--snapshot-epochs", "1", *SMALL]) == 0
        assert main(["train", "--manifest", man, "--epochs", "3", "--out", str(tmp_path / "b"),
                     "--resume", str(tmp_path / "a/checkpoints/final.ckpt"), *SMALL]) == 0
        assert (tmp_path / "b/loss.csv").read_bytes() == (tmp_path / "full/loss.csv").read_bytes()
        assert ((tmp_path / "b/checkpoints/final.ckpt").read_bytes()
                == (tmp_path / "full/checkpoints/final.ckpt").read_bytes())

    def test_separate_reproduces_train_output(self, mixed, run, tmp_path):
        assert main(["separate", "--manifest", str(mixed / "manifest.json"), "--out", str(tmp_path),
                     "--checkpoint", str(run / "checkpoints/final.ckpt"), *SMALL]) == 0
        for name in ("x1hat.png", "x2hat.png", "xbar.png"):
            assert (tmp_path / name).read_bytes() == (run / name).read_bytes()

    def test_manifest_fields_and_flag_precedence(self, mixed, tmp_path):
        man = json.loads((mixed / "manifest.json").read_text())
        man = {k: str(mixed / v) if k in ("r1", "r2", "x", "x1", "x2") else v for k, v in man.items()}
        man.update(epochs=5, width=4, patch_size=16, overlap=8, batch_size=4, lr=1e-4)
        (tmp_path / "m.json").write_text(json.dumps(man))
        assert main(["train", "--manifest", str(tmp_path / "m.json"), "--epochs", "1",
                     "--out", str(tmp_path / "o")]) == 0
        cfg = json.loads((tmp_path / "o/config.json").read_text())
        assert cfg["train"]["epochs"] == 1 and cfg["train"]["lr"] == 1e-4
        _, ck = load_checkpoint(tmp_path / "o/checkpoints/final.ckpt")
        assert ck.width == 4


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train", "--bogus"])
        assert info.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 1

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        assert main(["train", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path)]) == 2
        (tmp_path / "m.json").write_text(json.dumps({"r1": "missing.png", "r2": "x", "x": "y"}))
        assert main(["train", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path)]) == 2
        assert main(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_missing_images(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        assert main(["train", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path)]) == 2

    def test_bad_checkpoint(self, mixed, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"junk")
        assert main(["separate", "--manifest", str(mixed / "manifest.json"), "--out", str(tmp_path),
                     "--checkpoint", str(tmp_path / "c.ckpt")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_partial_artifacts(self, mixed, tmp_path):
        code = main(["train", "--manifest", str(mixed / "manifest.json"), "--epochs", "3",
                     "--lr", "1e30", "--out", str(tmp_path), *SMALL])
        assert code == 3
        assert (tmp_path / "config.json").is_file()


class TestBaseline:
    def test_baseline_run(self, mixed, tmp_path):
        assert main(["baseline", "--manifest", str(mixed / "manifest.json"), "--epochs", "2",
                     "--out", str(tmp_path), *SMALL]) == 0
        rows = _rows(tmp_path / "loss.csv")
        assert len(rows) == 2 and set(rows[0]) == {"epoch", "total"}
        assert (tmp_path / "xbar.png").is_file() and not (tmp_path / "r1hat.png").exists()
        assert main(["separate", "--manifest", str(mixed / "manifest.json"), "--out", str(tmp_path / "s"),
                     "--checkpoint", str(tmp_path / "checkpoints/final.ckpt"), *SMALL]) == 0
        assert (tmp_path / "s/xbar.png").read_bytes() == (tmp_path / "xbar.png").read_bytes()


class TestSweep:
    def test_one_point_grid_matches_train(self, mixed, tmp_path):
        man = str(mixed / "manifest.json")
        args = ["--manifest", man, "--epochs", "1", *SMALL]
        assert main(["sweep", *args, "--out", str(tmp_path / "s"), "--trials", "1"]) == 0
        assert main(["train", *args, "--out", str(tmp_path / "t")]) == 0
        row = _rows(tmp_path / "s/sweep.csv")[0]
        summary = json.loads((tmp_path / "t/summary.json").read_text())
        assert float(row["mean_mse"]) == pytest.approx(summary["mse"], rel=1e-12)
        assert float(row[f"case_{summary['outcome']['case']}"]) == 1.0

    def test_frequencies_and_determinism(self, mixed, tmp_path):
        args = ["sweep", "--manifest", str(mixed / "manifest.json"), "--epochs", "1", "--trials", "2",
                "--lambda3", "0,2", "--lambda4", "0,0.3", *SMALL]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
        rows = _rows(tmp_path / "a/sweep.csv")
        assert len(rows) == 4
        for r in rows:
            assert abs(sum(float(r[f"case_{c}"]) for c in ("I", "II", "III")) - 1.0) <= 1e-9
        for name in ("sweep.csv", "trials.csv", "mse_matrix.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        matrix = list(csv.reader(open(tmp_path / "a/mse_matrix.csv")))
        assert len(matrix) == 3 and len(matrix[0]) == 3


class TestGradcheck:
    def test_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--trials", "1", "--out", str(tmp_path)]) == 0
        table = capsys.readouterr().out
        assert "conv2d" in table and "FAIL" not in table
        assert len(_rows(tmp_path / "gradcheck.csv")) >= 8

    def test_corrupted_op_fails(self, capsys):
        assert main(["gradcheck", "--trials", "1", "--corrupt", "relu"]) == 3
        assert "relu" in capsys.readouterr().err
