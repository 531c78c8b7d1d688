import json

import numpy as np
import pytest

from ebsel.cli import main
from ebsel.imaging import load_png

SMOKE_CONFIG = {
    "data": {"count": 8, "size": 64, "preview_size": 32},
    "train": {"stage1_epochs": 2, "stage2_epochs": 3, "stage3_epochs": 4, "alternation_period": 2, "crop": None},
    "ablate": {"k_values": [1, 3], "branch_seeds": [0]},
}


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """Every stage run once through the command line on a tiny dataset."""
    root = tmp_path_factory.mktemp("smoke")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMOKE_CONFIG))
    c = ["--config", str(cfg)]
    data, s1, s2, s3, ev = (str(root / n) for n in ("data", "s1", "s2", "s3", "ev"))
    codes = {
        "gen-data": main(["gen-data", *c, "--out", data]),
        "pretrain-mef": main(["pretrain-mef", *c, "--data", data, "--out", s1]),
        "label-oracle": main(["label-oracle", *c, "--data", data, "--ckpt", f"{s1}/mef_stage1.ckpt", "--out", s1]),
        "pretrain-ebs": main(["pretrain-ebs", *c, "--data", data, "--oracle", f"{s1}/oracle.json", "--out", s2]),
        "joint-train": main(["joint-train", *c, "--data", data, "--ebs-ckpt", f"{s2}/ebs_stage2.ckpt",
                             "--mef-ckpt", f"{s1}/mef_stage1.ckpt", "--out", s3]),
        "eval": main(["eval", *c, "--data", data, "--ckpt", f"{s3}/ebs_stage3.ckpt",
                      "--mef-ckpt", f"{s3}/mef_stage3.ckpt", "--out", ev]),
    }
    return root, codes


class TestUsage:
    def test_no_arguments(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required(self):
        assert main(["eval", "--out", "x"]) == 1

    def test_missing_data_dir(self, tmp_path):
        assert main(["pretrain-mef", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"lr_ebs": -1}}))
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1


class TestGenData:
    def test_deterministic(self, tmp_path):
        args = ["--count", "2", "--size", "32", "--preview-size", "16", "--seed", "7"]
        assert main(["gen-data", *args, "--out", str(tmp_path / "a")]) == 0
        assert main(["gen-data", *args, "--out", str(tmp_path / "b")]) == 0
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert a == b
        record = json.loads((tmp_path / "a" / "run.gen-data.json").read_text())
        assert record["seed"] == 7 and record["outputs"]


class TestFuse:
    def test_identical_inputs(self, tmp_path):
        from ebsel.imaging import LdrImage, save_png

        img = LdrImage(np.round(np.random.default_rng(0).random((16, 16, 3)) * 255) / 255)
        paths = []
        for i in range(2):
            paths.append(str(tmp_path / f"in{i}.png"))
            save_png(img, paths[-1])
        assert main(["fuse", "--inputs", *paths, "--out", str(tmp_path / "out.png")]) == 0
        np.testing.assert_allclose(load_png(tmp_path / "out.png").pixels, img.pixels, atol=1 / 255)

    def test_size_mismatch(self, tmp_path):
        from ebsel.imaging import LdrImage, save_png

        save_png(LdrImage(np.zeros((8, 8, 3))), tmp_path / "a.png")
        save_png(LdrImage(np.zeros((8, 16, 3))), tmp_path / "b.png")
        assert main(["fuse", "--inputs", str(tmp_path / "a.png"), str(tmp_path / "b.png"),
                     "--out", str(tmp_path / "o.png")]) == 1


class TestSmokeRun:
    def test_all_stages_succeed(self, smoke):
        _, codes = smoke
        assert codes == {k: 0 for k in codes}

    def test_artifacts(self, smoke):
        root, _ = smoke
        for rel in ("s1/mef_stage1.ckpt", "s1/oracle.json", "s1/training_curves.png", "s2/ebs_stage2.ckpt",
                    "s3/ebs_stage3.ckpt", "s3/mef_stage3.ckpt", "ev/report.json", "ev/report.csv",
                    "ev/scene_psnr.png", "ev/config.resolved.json", "ev/run.eval.json"):
            assert (root / rel).is_file(), rel

    def test_report_rows_match_test_split(self, smoke):
        root, _ = smoke
        report = json.loads((root / "ev" / "report.json").read_text())
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        n_test = sum(e["split"] == "test" for e in manifest["scenes"])
        assert len(report["rows"]) == report["summary"]["n_scenes"] == n_test
        assert all(r["psnr"] <= r["oracle_psnr"] for r in report["rows"])

    def test_select_and_fuse_learned(self, smoke, tmp_path, capsys):
        root, _ = smoke
        scene = sorted((root / "data").glob("scene_*"))[0]
        assert main(["select", "--scene", str(scene), "--ckpt", str(root / "s3" / "ebs_stage3.ckpt")]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["indices"]) == 3 and abs(sum(doc["p"]) - 1) < 1e-5
        idx = ",".join(map(str, doc["indices"]))
        out = tmp_path / "f.png"
        assert main(["fuse-learned", "--scene", str(scene), "--indices", idx,
                     "--ckpt", str(root / "s3" / "mef_stage3.ckpt"), "--out", str(out)]) == 0
        assert load_png(out).shape == (64, 64)

    def test_fuse_learned_rejects_wrong_k(self, smoke, tmp_path):
        root, _ = smoke
        scene = sorted((root / "data").glob("scene_*"))[0]
        assert main(["fuse-learned", "--scene", str(scene), "--indices", "1,2",
                     "--ckpt", str(root / "s1" / "mef_stage1.ckpt"), "--out", str(tmp_path / "f.png")]) == 1

    def test_wrong_checkpoint_kind(self, smoke, tmp_path):
        root, _ = smoke
        assert main(["eval", "--data", str(root / "data"), "--ckpt", str(root / "s1" / "mef_stage1.ckpt"),
                     "--out", str(tmp_path)]) == 1

    def test_ablate(self, smoke, tmp_path):
        root, _ = smoke
        cfg = root / "cfg.json"
        assert main(["ablate", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert set(report["summary"]["k"]) == {"1", "3"}
        assert set(report["summary"]["branch"]) == {"full", "semantic", "illumination"}
        assert (tmp_path / "ablation.png").is_file()
