import json
import shutil

import pytest

from einet.cli import main
from einet.data.voc import T_DIR
from einet.data.weights_io import save_weights
from einet.detector import VariantConfig, init_detector

GEN = ["gen", "--regime", "night", "--seed", "7", "--videos", "3", "--test-videos", "1",
       "--frames-per-video", "3"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(GEN + ["--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    args = ["train", "--data", str(data), "--split", "train", "--variant", "full", "--epochs", "1",
            "--out", str(out)]
    assert main(args) == 0
    return out


def test_gen_is_deterministic(data, tmp_path, capsys):
    assert main(GEN + ["--out", str(tmp_path / "again")]) == 0
    a, b = tree(data), tree(tmp_path / "again")
    assert a == b and "manifest.csv" in a
    assert "train" in capsys.readouterr().out


def test_gen_rejects_short_videos(tmp_path, capsys):
    assert main(["gen", "--frames-per-video", "2", "--out", str(tmp_path)]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_train_outputs_and_determinism(data, trained, tmp_path):
    for name in ("weights.einw", "loss.csv", "loss.png", "run.json"):
        assert (trained / name).is_file()
    assert json.loads((trained / "run.json").read_text())["variant"] == "full"
    assert main(["train", "--data", str(data), "--split", "train", "--variant", "full", "--epochs", "1",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "weights.einw").read_bytes() == (trained / "weights.einw").read_bytes()


def test_config_file_supplies_defaults(data, trained, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# same run as the fixture\nvariant = full\nepochs = 1\nsplit=train\n")
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "weights.einw").read_bytes() == (trained / "weights.einw").read_bytes()
    # the echoed run.json is itself a valid config
    assert main(["train", "--config", str(trained / "run.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "weights.einw").read_bytes() == (trained / "weights.einw").read_bytes()


def test_bad_config_file(data, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    assert main(["train", "--data", str(data), "--config", str(cfg)]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_infer_then_eval(data, trained, tmp_path, capsys):
    w = str(trained / "weights.einw")
    assert main(["infer", "--data", str(data), "--weights", w, "--out", str(tmp_path / "i1")]) == 0
    assert main(["infer", "--data", str(data), "--weights", w, "--out", str(tmp_path / "i2")]) == 0
    dets = (tmp_path / "i1" / "detections.txt").read_text()
    assert dets == (tmp_path / "i2" / "detections.txt").read_text()
    assert main(["eval", "--data", str(data), "--detections", str(tmp_path / "i1" / "detections.txt"),
                 "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "eval.csv").read_text().startswith("class,gt,AP50,AP\n")
    assert "all" in capsys.readouterr().out


def test_eval_empty_detections(data, tmp_path):
    (tmp_path / "empty.txt").write_text("")
    assert main(["eval", "--data", str(data), "--detections", str(tmp_path / "empty.txt"),
                 "--out", str(tmp_path)]) == 0
    last = (tmp_path / "eval.csv").read_text().strip().splitlines()[-1].split(",")
    assert last[0] == "all" and last[2] == "0.00"


def test_infer_errors(data, trained, tmp_path, capsys):
    broken = tmp_path / "broken"
    shutil.copytree(data, broken)
    shutil.rmtree(broken / T_DIR)
    w = str(trained / "weights.einw")
    assert main(["infer", "--variant", "full", "--data", str(broken), "--weights", w, "--out", str(tmp_path)]) == 2
    assert "error[pairing]" in capsys.readouterr().err
    rgb_only = tmp_path / "rgb.einw"
    save_weights(init_detector(VariantConfig("baseline_rgb"), 0), rgb_only)
    assert main(["infer", "--variant", "full", "--data", str(data), "--weights", str(rgb_only),
                 "--out", str(tmp_path)]) == 2
    assert "error[weights]" in capsys.readouterr().err
    assert main(["infer", "--variant", "mi_cat", "--include-current-residual", "--data", str(data),
                 "--weights", w, "--out", str(tmp_path)]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_bench_stats_and_features(data, trained, tmp_path):
    assert main(["bench", "--variant", "baseline_rgb", "--frames", "2", "--runs", "2", "--warmup", "0",
                 "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "fps.csv").read_text().startswith("variant,input,frames,runs,FPS,std\n")
    assert main(["stats", "--data", str(data), "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "class_stats.csv").read_text().startswith(",Car,Van,")
    assert main(["dump-features", "--data", str(data), "--weights", str(trained / "weights.einw"),
                 "--out", str(tmp_path / "f")]) == 0
    assert {p.name for p in (tmp_path / "f").glob("*.pgm")} == {
        "rgb_image.pgm", "thermal_image.pgm", "rgb_feature.pgm", "denoised_feature.pgm"}


def test_ablate_smoke(data, tmp_path):
    assert main(["ablate", "--data", str(data), "--variants", "baseline_rgb,tpe_only", "--epochs", "1",
                 "--runs", "1", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("variant,AP50") and [r.split(",")[0] for r in rows[1:]] == ["baseline_rgb", "tpe_only"]
    assert (tmp_path / "ablation.png").is_file() and (tmp_path / "ablation_seed0.csv").is_file()


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "FAIL" not in (tmp_path / "gradcheck.txt").read_text()
