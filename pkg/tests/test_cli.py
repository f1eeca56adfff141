import json

import numpy as np
import pytest

from voxcam.cli import run_command, write_pgm_slices
from voxcam.nn import init_params, save_checkpoint
from voxcam.volume import Volume3D, load_dataset, load_volume, save_volume

from conftest import TINY_DIMS, tiny_config


@pytest.fixture
def ckpt_and_vol(tmp_path):
    model = init_params(tiny_config("unused").model, 0)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, model)
    vol = tmp_path / "v.vol3"
    save_volume(Volume3D(np.random.default_rng(0).random(TINY_DIMS)), vol)
    return ckpt, vol


def test_unknown_subcommand(capsys):
    assert run_command(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand():
    assert run_command([]) == 2


def test_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run_command(["pipeline", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("voxcam: error:") and err.count("\n") == 1


def test_missing_file(tmp_path, capsys):
    assert run_command(["explain", "--ckpt", str(tmp_path / "no.ckpt"), "--vol", "x"]) == 1
    assert capsys.readouterr().err.count("\n") == 1


def test_gen_data(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"dims": [16, 16, 8], "n_subjects_per_class": 3}))
    out = tmp_path / "data"
    assert run_command(["gen-data", "--spec", str(spec), "--seed", "7", "--out", str(out)]) == 0
    ds, anns = load_dataset(out)
    assert len(ds.subjects) == 6
    assert {a.name for a in anns} == {"structure", "ventricle", "cortex-shell"}
    snap = json.loads((out / "command.json").read_text())
    assert snap["command"] == "gen-data" and snap["seed"] == 7


def test_gen_data_reproducible(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"dims": [8, 8, 8], "n_subjects_per_class": 2}))
    for name in ("a", "b"):
        run_command(["gen-data", "--spec", str(spec), "--seed", "3", "--out", str(tmp_path / name)])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        if f.name != "command.json":
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_bad_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"shrink": 2.0}))
    assert run_command(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 1


def test_split(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(tiny_config(tmp_path / "run").to_json())
    out = tmp_path / "splits.json"
    assert run_command(["split", "--config", str(cfg), "--out", str(out)]) == 0
    plan = json.loads(out.read_text())
    assert len(plan["folds"]) == 2
    assert (tmp_path / "splits.json.cmd.json").exists()


def test_train_then_pipeline_resumes(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(tiny_config(tmp_path / "run").to_json())
    assert run_command(["train", "--config", str(cfg), "--fold", "1"]) == 0
    ckpt = tmp_path / "run" / "fold-1" / "stage1.ckpt"
    before = ckpt.stat().st_mtime_ns
    assert run_command(["pipeline", "--config", str(cfg)]) == 0
    assert ckpt.stat().st_mtime_ns == before


def test_train_bad_fold(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(tiny_config(tmp_path / "run").to_json())
    assert run_command(["train", "--config", str(cfg), "--fold", "5"]) == 1


def test_explain(ckpt_and_vol, tmp_path):
    ckpt, vol = ckpt_and_vol
    out = tmp_path / "h.vol3"
    args = ["explain", "--ckpt", str(ckpt), "--vol", str(vol), "--class", "1",
            "--out", str(out), "--pgm", str(tmp_path / "slices")]
    assert run_command(args) == 0
    heat = load_volume(out)
    assert heat.dims == TINY_DIMS
    assert 0 <= heat.data.min() and heat.data.max() <= 1
    slices = sorted((tmp_path / "slices").glob("*.pgm"))
    assert len(slices) == TINY_DIMS[2]
    first = out.read_bytes()
    assert run_command(args) == 0
    assert out.read_bytes() == first


def test_extract_roi(ckpt_and_vol, tmp_path):
    ckpt, vol = ckpt_and_vol
    out = tmp_path / "roi.vol3"
    assert run_command(["extract-roi", "--ckpt", str(ckpt), "--vol", str(vol),
                        "--a", "0.7", "--band", "low", "--out", str(out)]) == 0
    roi = load_volume(out).data
    mask = load_volume(tmp_path / "roi_mask.vol3").data
    assert set(np.unique(mask)) <= {0.0, 1.0}
    np.testing.assert_array_equal(roi[mask == 0], 0)


def test_bad_band(ckpt_and_vol):
    ckpt, vol = ckpt_and_vol
    assert run_command(["extract-roi", "--ckpt", str(ckpt), "--vol", str(vol), "--band", "mid"]) == 2


def test_pgm_format(tmp_path):
    vals = np.zeros((3, 2, 1))
    vals[2, 1, 0] = 1.0
    (p,) = write_pgm_slices(vals, tmp_path)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert list(raw[-6:]) == [0, 0, 0, 0, 0, 255]


def test_pipeline_and_report(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(tiny_config(tmp_path / "run").to_json())
    assert run_command(["pipeline", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert (run / "summary.json").exists()
    assert (run / "command-pipeline.json").exists()
    assert run_command(["sweep", "--config", str(cfg), "--a", "0.9", "--a", "0.8"]) == 0
    assert (run / "fold-0" / "sweep" / "a0.90-top" / "report.json").exists()
    assert run_command(["report", "--run", str(run)]) == 0
    report = run / "report"
    table = (report / "table_stage2.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in table[1:]] == ["0", "1", "Average"]
    assert (report / "confusion_stage2.csv").read_text().splitlines()[0] == "fold,tp,fp,fn,tn"
    assert "Average" in capsys.readouterr().out
