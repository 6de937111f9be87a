import json
from pathlib import Path

import pytest
import yaml
from PIL import Image

from aurora_gan.cli import main
from aurora_gan.data import export_folder
from aurora_gan.trainer import Trainer


@pytest.fixture
def checkpoint(cfg, tiny_dataset, tmp_path):
    cfg.train.batch_size = 4
    t = Trainer(cfg, tiny_dataset)
    t.train_step((tiny_dataset.images_at(4)[:4], tiny_dataset.captions[:4]))
    t.grow()
    return t.save(tmp_path / "ck.pt")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_make_data_and_reference_fid(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"colors": ["red", "blue"], "shapes": ["circle"]}))
    code, out, _ = run(capsys, "make-data", tmp_path / "d", "--n", 40, "--size", 16, "--spec", spec)
    assert code == 0 and json.loads(out)["n"] == 40
    assert len(list((tmp_path / "d").glob("*.png"))) == 40
    code, out, _ = run(capsys, "reference-fid", tmp_path / "d", "--resolutions", 4, 8, "--n", 10,
                       "--out", tmp_path / "ref.json")
    values = json.loads(out)["values"]
    assert code == 0 and set(values) == {"4", "8"} and all(v >= 0 for v in values.values())
    assert json.loads((tmp_path / "ref.json").read_text())["n"] == 10


def test_train_and_resume(cfg, tmp_path, capsys):
    cfg.data.image_size = 16
    cfg.data.n = 32
    cfg.train.batch_size = 4
    cfg.train.max_steps_per_stage = [2, 2, 2]
    cfg.train.eval_every = 1000
    cfg.train.reference_n = 8
    path = tmp_path / "cfg.yaml"
    from aurora_gan.config import save_config

    save_config(cfg, path)
    code, out, _ = run(capsys, "train", path, "--out-dir", tmp_path / "run", "--stop-after", 3)
    assert code == 0 and json.loads(out)["step"] == 3
    code, out, _ = run(capsys, "train", path, "--out-dir", tmp_path / "run", "--resume")
    result = json.loads(out)
    assert code == 0 and result["step"] == 6 and result["resolution"] == 16


def test_sample(checkpoint, tmp_path, capsys):
    code, out, _ = run(capsys, "sample", checkpoint, "--prompt", "a red circle on a black background",
                       "--count", 3, "--out-dir", tmp_path / "s")
    assert code == 0
    files = sorted((tmp_path / "s").glob("*.png"))
    assert len(files) == 3 and Image.open(files[0]).size == (8, 8)


@pytest.mark.parametrize("mode,extra", [
    ("tokens", ["--prompts", "a red circle", "a blue square"]),
    ("z", ["--prompts", "a red circle", "--seeds", "1", "2"]),
    ("w", ["--seeds", "1", "2"]),
])
def test_interpolate(checkpoint, tmp_path, capsys, mode, extra):
    code, out, _ = run(capsys, "interpolate", checkpoint, "--mode", mode, "--steps", 4,
                       "--out", tmp_path / "g.png", *extra)
    assert code == 0 and json.loads(out)["rows"] == 4
    assert Image.open(tmp_path / "g.png").size == (1 * 9 + 1, 4 * 9 + 1)


def test_eval_fid_with_csv(checkpoint, tiny_dataset, tmp_path, capsys):
    export_folder(tiny_dataset, tmp_path / "d")
    code, out, _ = run(capsys, "eval-fid", checkpoint, tmp_path / "d", "--n", 16,
                       "--csv", tmp_path / "fid.csv")
    assert code == 0 and json.loads(out)["fid"] >= 0
    rows = (tmp_path / "fid.csv").read_text().splitlines()
    assert rows[0] == "step,resolution,n,seed,value" and len(rows) == 2


def route(checkpoint, out_dir, capsys):
    code, out, _ = run(capsys, "route-viz", checkpoint, "--prompt", "a blue square", "--seed", 3,
                       "--out-dir", out_dir)
    assert code == 0
    return [Path(p) for p in json.loads(out)["written"]]


def test_route_viz_byte_identical(checkpoint, tmp_path, capsys):
    a = route(checkpoint, tmp_path / "a", capsys)
    b = route(checkpoint, tmp_path / "b", capsys)
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    pngs = [p for p in a if p.suffix == ".png"]
    assert {Image.open(p).mode for p in pngs} == {"P"}
    for row in a[-1].read_text().splitlines()[1:]:
        assert abs(sum(float(v) for v in row.split("\t")[2:]) - 1) < 1e-6


def test_errors_are_one_line(tmp_path, capsys):
    code, _, err = run(capsys, "eval-fid", tmp_path / "missing.pt", tmp_path)
    assert code == 1
    assert err.count("\n") == 1 and err.startswith("error: ")
    code, _, err = run(capsys, "reference-fid", tmp_path / "nowhere")
    assert code == 1 and "FileNotFoundError" in err


def test_log_level_env(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("AURORA_LOG_LEVEL", "debug")
    code, _, _ = run(capsys, "make-data", tmp_path / "d", "--n", 2, "--size", 8)
    assert code == 0
