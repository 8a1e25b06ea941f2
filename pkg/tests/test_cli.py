import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from conftest import smooth_image

from ritrae.cli import build_parser, main
from ritrae.image import load_image, save_image
from ritrae.nn import save_weights
from ritrae.rdh import rdh_capacity


@pytest.fixture
def pair(tmp_path):
    rng = np.random.default_rng(0)
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    save_image(smooth_image(rng, 64, 64, lo=70, hi=180), a)
    save_image(smooth_image(rng, 64, 64, lo=70, hi=180), b)
    return a, b


@pytest.fixture(scope="module")
def model_file(desk, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "desk.w"
    save_weights(desk["model"], path)
    return path


def test_transform_restore_round_trip(pair, tmp_path, capsys):
    a, b = pair
    c, d = tmp_path / "c.pgm", tmp_path / "d.pgm"
    assert main(["transform", "--orig", str(a), "--target", str(b), "--out", str(c)]) == 0
    assert main(["restore", "--in", str(c), "--out", str(d), "--verify", str(a)]) == 0
    assert capsys.readouterr().out.strip() == "EXACT"
    assert d.read_bytes() == a.read_bytes()


def test_transform_is_idempotent(pair, tmp_path):
    a, b = pair
    for name in ("c1.pgm", "c2.pgm"):
        assert main(["transform", "--orig", str(a), "--target", str(b), "--out", str(tmp_path / name),
                     "--classes", "4", "--passes", "10"]) == 0
    assert (tmp_path / "c1.pgm").read_bytes() == (tmp_path / "c2.pgm").read_bytes()


def test_capacity_command(pair, capsys):
    a, _ = pair
    assert main(["capacity", "--img", str(a), "--passes", "6"]) == 0
    assert int(capsys.readouterr().out) == rdh_capacity(load_image(a), 6)


def test_payload_command(pair, capsys):
    a, b = pair
    assert main(["payload", "--orig", str(a), "--ae", str(b)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rit_aux_bits"] > 0 and out["rde_required_bits"] > 0


def test_exit_codes(pair, tmp_path, capsys):
    a, b = pair
    noise = tmp_path / "noise.pgm"
    save_image(np.random.default_rng(1).integers(0, 256, (64, 64), dtype=np.uint8), noise)
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n2 2\n65535\n1 2 3 4\n")
    out = str(tmp_path / "o.pgm")

    assert main(["capacity", "--img", str(tmp_path / "missing.pgm")]) == 5
    assert "error[io]" in capsys.readouterr().err
    assert main(["capacity", "--img", str(bad)]) == 5
    assert "unsupported maxval" in capsys.readouterr().err
    assert main(["transform", "--orig", str(noise), "--target", str(noise), "--out", out]) == 3
    assert "error[capacity]" in capsys.readouterr().err
    assert main(["restore", "--in", str(a), "--out", out]) == 4
    assert "error[integrity]" in capsys.readouterr().err
    assert main(["transform", "--orig", str(a), "--target", str(b), "--out", out, "--classes", "0"]) == 2
    assert "error[usage]" in capsys.readouterr().err

    cam = tmp_path / "cam.pgm"
    main(["transform", "--orig", str(a), "--target", str(b), "--out", str(cam)])
    assert main(["restore", "--in", str(cam), "--out", out, "--verify", str(b)]) == 4


def test_argparse_usage_errors():
    with pytest.raises(SystemExit) as err:
        main(["transform", "--orig", "x.pgm"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_every_flag_documents_its_default():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"dataset", "train", "attack", "transform", "restore", "make-rae", "eval",
                                "capacity", "payload"}
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.dest == "help":
                continue
            text = action.help % {"default": action.default} if action.help else ""
            assert "(default:" in text or "(required)" in text, f"{name} {action.option_strings}"


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "ritrae.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "make-rae" in out.stdout


def test_attack_and_make_rae(desk, model_file, tmp_path, capsys):
    img = tmp_path / "x.pgm"
    save_image(desk["X_test"][0], img)
    label = str(desk["y_test"][0])
    ae, rae, back = tmp_path / "ae.pgm", tmp_path / "rae.pgm", tmp_path / "back.pgm"
    assert main(["attack", "--model", str(model_file), "--in", str(img), "--label", label,
                 "--out", str(ae), "--epsilon", "8/255", "--no-early-stop"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["linf"] <= 8 / 255 + 1e-6 and info["iterations"] == 10
    assert main(["make-rae", "--model", str(model_file), "--in", str(img), "--out", str(rae),
                 "--ae-out", str(tmp_path / "ae2.pgm"), "--method", "deepfool"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["aux_bits"] <= info["capacity_bits"]
    assert main(["restore", "--in", str(rae), "--out", str(back), "--verify", str(img)]) == 0
    assert main(["attack", "--model", str(model_file), "--in", str(img), "--out", str(ae),
                 "--label", "42"]) == 2
    assert main(["attack", "--model", str(tmp_path / "nope.w"), "--in", str(img), "--out", str(ae)]) == 5


def test_config_section_selection(desk, model_file, tmp_path, capsys):
    cfg = Path(__file__).resolve().parents[1] / "configs" / "attacks.cfg"
    img = tmp_path / "x.pgm"
    save_image(desk["X_test"][0], img)
    assert main(["attack", "--model", str(model_file), "--in", str(img), "--out", str(tmp_path / "a.pgm"),
                 "--config", str(cfg), "--section", "ifgsm-eps2"]) == 0
    assert json.loads(capsys.readouterr().out)["linf"] <= 2 / 255 + 1e-6
    assert main(["attack", "--model", str(model_file), "--in", str(img), "--out", str(tmp_path / "a.pgm"),
                 "--config", str(cfg), "--section", "nope"]) == 2


def test_dataset_train_eval_end_to_end(tmp_path, capsys):
    data, model, rep = tmp_path / "data", tmp_path / "m.w", tmp_path / "rep"
    assert main(["dataset", "--out", str(data), "--size", "16"]) == 0
    assert json.loads(capsys.readouterr().out) == {"test": 540, "train": 1257}
    assert main(["train", "--data", str(data / "train"), "--out", str(model), "--epochs", "2",
                 "--architecture", "mlp"]) == 0
    assert "train_accuracy" in json.loads(capsys.readouterr().out)
    code = main(["eval", "--corpus", str(data / "test"), "--model", str(model), "--out", str(rep),
                 "--limit", "3", "--method", "ifgsm", "--classes", "1", "--block-size", "4"])
    out = capsys.readouterr()
    assert code == 0, out.err
    lines = (rep / "report.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 3 + 1
    assert (rep / "report.txt").read_text() == out.out
