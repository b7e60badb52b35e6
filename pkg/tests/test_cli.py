import json
from pathlib import Path

import numpy as np
import pytest

from octsplat import __version__
from octsplat.cli import export_anchors, main
from octsplat.fileio import load_model, read_ply, write_ply
from octsplat.scenes import orbit_cameras

QUICK = Path(__file__).resolve().parents[1] / "configs" / "quick.ini"


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", "--config", str(QUICK), "--scene", "sphere", "--quiet", "--out", str(out)]) == 0
    return out


def test_version(capsys):
    assert main(["--version"]) == 0
    v = capsys.readouterr().out.strip()
    assert v == __version__ and len(v.split(".")) == 3


def test_fit_outputs_and_manifest(fitted):
    names = sorted(p.name for p in fitted.iterdir())
    assert names == ["config.ini", "log.csv", "manifest.json", "model.ckpt"]
    man = json.loads((fitted / "manifest.json").read_text())
    assert man["command"] == "fit" and man["seed"] == 0 and man["version"] == __version__
    assert man["outputs"] == ["config.ini", "log.csv", "model.ckpt"]
    assert list(man["inputs"].values())[0] and "--out" not in man["argv"]
    assert load_model(fitted / "model.ckpt").meta["scene_spec"] == "sphere"


def test_validation_errors_exit_2(tmp_path, capsys):
    assert main(["fit", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "a")]) == 2
    assert "none.ini" in capsys.readouterr().err
    assert main(["fit", "--config", str(QUICK), "--bogus", "--out", str(tmp_path / "b")]) == 2
    assert "--bogus" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[schedule]\nstage9_iters = 3\n")
    assert main(["fit", "--config", str(bad), "--out", str(tmp_path / "c")]) == 2
    assert "schedule.stage9_iters" in capsys.readouterr().err
    assert main(["fit", "--config", str(QUICK), "--scene", "teapot", "--out", str(tmp_path / "d")]) == 2
    assert main(["frobnicate"]) == 2
    # nothing is written when validation fails
    assert not any((tmp_path / n).exists() for n in "abcd")


def test_runtime_error_exits_1(tmp_path, capsys):
    bad = tmp_path / "nan.ini"
    bad.write_text(QUICK.read_text().replace("[schedule]", "[schedule]\nlr_logits = nan"))
    assert main(["fit", "--config", str(bad), "--scene", "sphere", "--quiet", "--out", str(tmp_path / "o")]) == 1
    assert "NonFiniteLoss" in capsys.readouterr().err
    assert (tmp_path / "o" / "manifest.json").exists()


def test_eval_and_render(fitted, tmp_path):
    ck = str(fitted / "model.ckpt")
    assert main(["eval", "--ckpt", ck, "--budget", "16", "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "view,psnr,ssim" and len(lines) == 10 and lines[-1].startswith("mean,")
    cams = tmp_path / "cams.json"
    cams.write_text(json.dumps({"cameras": [c.to_dict() for c in orbit_cameras(3, 16)]}))
    assert main(["render", "--ckpt", ck, "--camera-json", str(cams), "--budget", "16", "--pfm",
                 "--out", str(tmp_path / "r")]) == 0
    assert len(list((tmp_path / "r").glob("render_*.png"))) == 3
    assert len(list((tmp_path / "r").glob("render_*.pfm"))) == 3
    assert main(["eval", "--ckpt", ck, "--budget", "0", "--out", str(tmp_path / "z")]) == 2


def test_sample_anchors_ply(fitted, tmp_path):
    ck = str(fitted / "model.ckpt")
    for P in (0, 25):
        assert main(["sample-anchors", "--ckpt", ck, "--budget", str(P), "--out", str(tmp_path / f"s{P}")]) == 0
        text = (tmp_path / f"s{P}" / "anchors.ply").read_text()
        assert f"element vertex {P}\n" in text
        pos, props = read_ply(tmp_path / f"s{P}" / "anchors.ply")
        assert pos.shape == (P, 3) and props["log_prob"].shape == (P,)
    model = load_model(fitted / "model.ckpt")
    export_anchors(model, 25, 0, tmp_path / "direct.ply")
    assert (tmp_path / "direct.ply").read_bytes() == (tmp_path / "s25" / "anchors.ply").read_bytes()
    assert np.all(read_ply(tmp_path / "direct.ply")[1]["log_prob"] < 0)


def test_vecseq_command(tmp_path, rng):
    pts = rng.uniform(size=(30, 3))
    tok = np.c_[np.arange(30), rng.normal(size=(30, 2))]
    write_ply(tmp_path / "p.ply", pts)
    np.savetxt(tmp_path / "t.csv", tok, delimiter=",", header="id,a,b", comments="")
    args = ["vecseq", "--points", str(tmp_path / "p.ply"), "--tokens", str(tmp_path / "t.csv"), "--m", "12"]
    assert main(args + ["--out", str(tmp_path / "v")]) == 0
    order = np.loadtxt(tmp_path / "v" / "order.csv", delimiter=",", skiprows=1)
    assert order.shape == (12, 6)
    np.testing.assert_array_equal(order[0, 2:5], [0.5, 0.5, 0.5])
    src = order[:, 1].astype(int)
    assert len(set(src)) == 12
    toks = np.loadtxt(tmp_path / "v" / "tokens.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(toks[:, 0], src)
    assert main(args[:-1] + ["31", "--out", str(tmp_path / "w")]) == 2
    assert main(args + ["--pe-dim", "8", "--out", str(tmp_path / "x")]) == 2


def test_fm_toy_command(tmp_path):
    assert main(["fm-toy", "--variant", "unordered", "--seed", "2", "--steps", "10", "--m", "16",
                 "--out", str(tmp_path / "f")]) == 0
    lines = (tmp_path / "f" / "curves.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_loss" and lines[1].startswith("0,") and lines[-1].startswith("10,")


def test_oracle_check_command(tmp_path, capsys):
    assert main(["oracle-check", "--seed", "7", "--trials", "50", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    dev = float(out.split("deviation")[1].split()[0])
    assert dev < 1e-6
    assert json.loads((tmp_path / "o" / "oracle.json").read_text())["pass"] is True


def test_replay_reproduces_outputs(tmp_path):
    assert main(["fm-toy", "--steps", "5", "--m", "16", "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    assert main(["replay", "--manifest", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    for name in ("curves.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
