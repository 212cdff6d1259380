import numpy as np
import pytest

from mono3d.cli import FAIL_EXIT, USAGE_EXIT, load_config, main
from mono3d.kitti import write_result_file, LabelRecord

CAR = "Car 0.00 0 -1.58 100.00 100.00 160.00 150.00 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


def write_frames(gt_dir, det_dir):
    gt_dir.mkdir(parents=True, exist_ok=True)
    det_dir.mkdir(parents=True, exist_ok=True)
    for k in range(3):
        (gt_dir / f"{k:06d}.txt").write_text(CAR + "\n")
        (det_dir / f"{k:06d}.txt").write_text(CAR + " 0.900000\n")


class TestConfigFile:
    def test_load(self, tmp_path):
        path = tmp_path / "cfg"
        path.write_text("steps = 5\n# comment\nmode=r11\n")
        assert load_config(path) == {"steps": "5", "mode": "r11"}

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "cfg"
        path.write_text("just words\n")
        with pytest.raises(ValueError, match="key=value"):
            load_config(path)

    def test_applies_to_eval(self, tmp_path, capsys):
        gt, det = tmp_path / "gt", tmp_path / "det"
        write_frames(gt, det)
        cfg = tmp_path / "cfg"
        cfg.write_text("mode=r11\ntask=2d\n")
        code = main(["eval", "--gt", str(gt), "--det", str(det),
                     "--classes", "Car", "--config", str(cfg)])
        assert code == 0
        out = capsys.readouterr().out
        assert "task=2d mode=r11" in out

    def test_explicit_flag_wins(self, tmp_path, capsys, monkeypatch):
        gt, det = tmp_path / "gt", tmp_path / "det"
        write_frames(gt, det)
        cfg = tmp_path / "cfg"
        cfg.write_text("task=2d\n")
        argv = ["mono3d", "eval", "--gt", str(gt), "--det", str(det),
                "--classes", "Car", "--task", "bev", "--config", str(cfg)]
        monkeypatch.setattr("sys.argv", argv)
        assert main(argv[1:]) == 0
        assert "task=bev" in capsys.readouterr().out


class TestEval:
    def test_identical_dirs_perfect_ap(self, tmp_path, capsys):
        gt, det = tmp_path / "gt", tmp_path / "det"
        write_frames(gt, det)
        code = main(["eval", "--gt", str(gt), "--det", str(det),
                     "--task", "2d", "--mode", "r40", "--classes", "Car"])
        assert code == 0
        out = capsys.readouterr().out
        assert "Car,2d,r40,1.0000,1.0000,1.0000" in out

    def test_missing_dir_usage_exit(self, tmp_path, capsys):
        code = main(["eval", "--gt", str(tmp_path / "nope"), "--det", str(tmp_path)])
        assert code == USAGE_EXIT
        assert "not a directory" in capsys.readouterr().err

    def test_empty_gt_dir(self, tmp_path, capsys):
        gt, det = tmp_path / "gt", tmp_path / "det"
        gt.mkdir(), det.mkdir()
        code = main(["eval", "--gt", str(gt), "--det", str(det)])
        assert code == USAGE_EXIT


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") >= 11
        assert "FAIL" not in out

    def test_tight_tolerance_fails(self, capsys):
        assert main(["gradcheck", "--tol", "1e-16"]) == FAIL_EXIT
        assert "FAIL" in capsys.readouterr().out


class TestVizAttention:
    def test_writes_pgm(self, tmp_path, capsys):
        out = tmp_path / "attn.pgm"
        assert main(["viz-attention", "--out", str(out)]) == 0
        raw = out.read_bytes()
        assert raw.startswith(b"P5\n")

    def test_from_tensor_file(self, tmp_path):
        from mono3d.tensor import Tensor, save_tensor
        rng = np.random.default_rng(0)
        tpath = tmp_path / "feats.m3tn"
        save_tensor(Tensor(rng.normal(size=(1, 4, 6, 10))), tpath)
        out = tmp_path / "attn.pgm"
        assert main(["viz-attention", "--out", str(out), "--tensor", str(tpath)]) == 0
        header = out.read_bytes().split(b"\n", 2)
        assert header[1] == b"10 6"


class TestTrainToy:
    def test_quick_run_with_trace(self, tmp_path, capsys):
        trace = tmp_path / "trace.csv"
        code = main(["train-toy", "--steps", "3", "--scenes", "2",
                     "--trace", str(trace)])
        assert code == 0
        lines = trace.read_text().splitlines()
        assert len(lines) == 4
        assert "total" in capsys.readouterr().out
