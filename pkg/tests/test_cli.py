import numpy as np
import pytest

from robodet.cli import box_pixel_rect, main, render_overlay
from robodet.data import generate_toy_dataset, read_ppm, write_ppm
from robodet.detect import BBox, Detection, load_anchors
from robodet.model import build_robo, init_network, save_weights


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_toy")
    generate_toy_dataset(10, "A", seed=2, out_dir=root)
    return root


@pytest.fixture(scope="module")
def weights_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli_weights") / "net.rbw"
    net = init_network(build_robo(1), seed=0)
    save_weights(net, path)
    return path


class TestExitCodes:
    def test_ops_succeeds(self, capsys):
        assert main(["ops", "--model", "robo", "--k", "2"]) == 0
        out = capsys.readouterr().out
        assert "l1" in out and "MAC" in out

    def test_train_without_data_is_validation_error(self, capsys):
        code = main(["train", "--out", "x.rbw"])
        assert code == 1
        assert "--data" in capsys.readouterr().err

    def test_missing_weight_file_is_runtime_error(self, capsys):
        code = main(["detect", "--weights", "/nonexistent.rbw",
                     "--images", "/nonexistent.ppm"])
        assert code == 2

    def test_unknown_flag_rejected(self):
        assert main(["ops", "--frobnicate"]) == 1


class TestGenDataAnchors:
    def test_smoke_pipeline(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["gen-data", "--n", "50", "--seed", "7", "--out", str(out)]) == 0
        assert main(["anchors", "--data", str(out)]) == 0
        anchors = load_anchors(out / "anchors.txt")
        assert anchors.shape == (4, 2)
        assert (anchors > 0).all()

    def test_gen_data_idempotent(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen-data", "--n", "4", "--seed", "3", "--out", str(a)])
        main(["gen-data", "--n", "4", "--seed", "3", "--out", str(b)])
        for name in ("img_00000.ppm", "img_00003.txt", "index.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTrainCli:
    def test_train_prune_eval_cycle(self, toy_dir, tmp_path, capsys):
        weights = tmp_path / "w.rbw"
        code = main([
            "train", "--data", str(toy_dir), "--out", str(weights),
            "--model", "robo", "--k", "1", "--epochs", "1", "--batch", "5",
            "--seed", "0",
        ])
        assert code == 0
        assert weights.exists()

        pruned = tmp_path / "p.rbw"
        assert main(["prune", "--weights", str(weights), "--out", str(pruned),
                     "--theta", "0.01"]) == 0
        out = capsys.readouterr().out
        assert "total:" in out

        csv_path = tmp_path / "report.csv"
        assert main(["eval", "--data", str(toy_dir), "--weights", str(weights),
                     "--out", str(csv_path)]) == 0
        header = csv_path.read_text().splitlines()[0]
        assert header.startswith("model,iou@0.75")
        assert "dist@64px" in header

    def test_detect_writes_dump_and_overlay(self, toy_dir, weights_file, tmp_path):
        img = next(toy_dir.glob("img_*.ppm"))
        out_dir = tmp_path / "dets"
        code = main(["detect", "--weights", str(weights_file),
                     "--images", str(img), "--conf", "0.0",
                     "--out-dir", str(out_dir)])
        assert code == 0
        dump = (out_dir / f"{img.stem}.txt").read_text()
        assert dump  # conf 0.0 keeps every candidate
        first = dump.splitlines()[0].split()
        assert len(first) == 6
        assert (out_dir / f"{img.stem}_overlay.ppm").exists()

    def test_bench_runs(self, capsys):
        assert main(["bench", "--model", "robo", "--k", "1", "--repeats", "3"]) == 0
        assert "ms" in capsys.readouterr().out

    def test_ops_compare_preset(self, capsys):
        assert main(["ops", "--model", "tiny_yolo_ref", "--compare"]) == 0
        out = capsys.readouterr().out
        assert "tiny_yolo_ref" in out and "robo_hr" in out


class TestOverlay:
    def test_zero_detections_copies_image(self, tmp_path, rng):
        img = rng.integers(0, 256, (32, 48, 3), dtype=np.uint8)
        out = tmp_path / "o.ppm"
        render_overlay(img, [], out)
        np.testing.assert_array_equal(read_ppm(out), img)

    def test_full_image_box_draws_borders(self, tmp_path):
        img = np.zeros((20, 30, 3), dtype=np.uint8)
        det = Detection(BBox(0.5, 0.5, 1.0, 1.0), 3, 0.9)
        out = tmp_path / "o.ppm"
        render_overlay(img, [det], out)
        got = read_ppm(out)
        magenta = np.array([255, 0, 255])
        assert (got[0, :] == magenta).all(axis=-1).all()
        assert (got[19, :] == magenta).all(axis=-1).all()
        assert (got[:, 0] == magenta).all(axis=-1).all()
        assert (got[:, 29] == magenta).all(axis=-1).all()

    def test_known_box_pixel_coordinates(self, tmp_path):
        # 256x192 image, box centered at (0.5, 0.5) with w=h=0.25:
        # columns [96, 159], rows [72, 119]
        assert box_pixel_rect(BBox(0.5, 0.5, 0.25, 0.25), 256, 192) == (96, 72, 159, 119)
        img = np.zeros((192, 256, 3), dtype=np.uint8)
        det = Detection(BBox(0.5, 0.5, 0.25, 0.25), 0, 0.5)
        out = tmp_path / "o.ppm"
        render_overlay(img, [det], out)
        got = read_ppm(out)
        orange = np.array([255, 165, 0])
        assert (got[72, 96:160] == orange).all()
        assert (got[119, 96:160] == orange).all()
        assert (got[72:120, 96] == orange).all()
        assert (got[72:120, 159] == orange).all()
        assert (got[73, 97] == 0).all() or (got[73, 97] == orange).all()  # label may paint

    def test_label_glyphs_painted(self, tmp_path):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        det = Detection(BBox(0.5, 0.6, 0.4, 0.4), 1, 0.87)
        out = tmp_path / "o.ppm"
        render_overlay(img, [det], out)
        got = read_ppm(out)
        assert (got == np.array([0, 255, 255])).all(axis=-1).sum() > 40
