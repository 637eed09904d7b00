import json

import numpy as np
import pytest

from conservflow import cli
from conservflow.fields_io import MANIFEST_NAME, RunManifest, file_digest, read_matrix_csv, read_table_csv


def _run(argv):
    return cli.main([str(a) for a in argv])


def test_elliptic_small_ladder(tmp_path, capsys):
    assert _run(["elliptic", "--out-dir", tmp_path, "--degree", "1,2", "--mesh-ladder", "4,8"]) == 0
    man = RunManifest.load(tmp_path / MANIFEST_NAME)
    assert man.subcommand == "elliptic" and man.config["degrees"] == [1, 2]
    cols, rows = read_table_csv(tmp_path / next(f["path"] for f in man.files if f["path"].endswith(".csv")))
    assert "J_HOCFEM" in cols and len(rows) == 4
    assert all(float(r["J_HOCFEM"]) < 1e-12 for r in rows)


def test_spe10_without_raster_is_config_error(tmp_path, capsys):
    assert _run(["elliptic", "--out-dir", tmp_path, "--problem", "spe10"]) == 2
    assert "raster" in capsys.readouterr().err


def test_missing_raster_file_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "spe10", "raster": str(tmp_path / "nope.dat")}))
    assert _run(["elliptic", "--out-dir", tmp_path / "o", "--config", cfg]) == 2
    assert "nope.dat" in capsys.readouterr().err


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mesh_ladder": [8], "cfl_number": 0.5}))
    assert _run(["hyperbolic", "--out-dir", tmp_path / "o", "--config", cfg]) == 2
    assert "cfl_number" in capsys.readouterr().err


def test_bad_flag_values(tmp_path):
    assert _run(["hyperbolic", "--out-dir", tmp_path, "--cfl", "1.5"]) == 2
    assert _run(["hyperbolic", "--out-dir", tmp_path, "--mesh-ladder", "8,x"]) == 2
    assert _run(["elliptic", "--out-dir", tmp_path, "--threads", "0"]) == 2
    with pytest.raises(SystemExit):
        _run(["hyperbolic", "--out-dir", tmp_path, "--problem", "nonsense"])


def test_hyperbolic_run_and_report(tmp_path, capsys):
    out = tmp_path / "adv"
    assert _run(["hyperbolic", "--out-dir", out, "--problem", "advection", "--mesh-ladder", "8,16"]) == 0
    man = RunManifest.load(out / MANIFEST_NAME)
    names = {f["path"] for f in man.files}
    assert any(n.endswith(".vtk") for n in names)
    conv = next(n for n in names if "conv" in n)
    cols, rows = read_table_csv(out / conv)
    assert cols[:3] == ["Cells", "h", "err_l1"] and len(rows) == 2
    capsys.readouterr()
    assert _run(["report", "--out-dir", out]) == 0
    text = capsys.readouterr().out
    assert "err_l1" in text


def test_report_detects_tampering(tmp_path, capsys):
    out = tmp_path / "adv"
    assert _run(["hyperbolic", "--out-dir", out, "--mesh-ladder", "8,16"]) == 0
    man = RunManifest.load(out / MANIFEST_NAME)
    victim = out / man.files[0]["path"]
    victim.write_text(victim.read_text() + "\n")
    assert _run(["report", "--out-dir", out]) != 0


def test_report_without_manifest(tmp_path):
    assert _run(["report", "--out-dir", tmp_path]) == 2


def test_hyperbolic_outputs_are_reproducible(tmp_path):
    for d in ("a", "b"):
        assert _run(["hyperbolic", "--out-dir", tmp_path / d, "--problem", "burgers", "--mesh-ladder", "16"]) == 0
    a = RunManifest.load(tmp_path / "a" / MANIFEST_NAME)
    for f in a.files:
        assert file_digest(tmp_path / "b" / f["path"]) == f["sha256"]


def test_coupled_small_run(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"Lx": 32.0, "Ly": 8.0, "t_end": 6.0, "frame_times": [3.0, 6.0], "vtk": False}))
    out = tmp_path / "cp"
    assert _run(["coupled", "--out-dir", out, "--config", cfg, "--mesh-ladder", "2,1"]) == 0
    man = RunManifest.load(out / MANIFEST_NAME)
    names = [f["path"] for f in man.files]
    mass = next(n for n in names if "mass" in n)
    cols, rows = read_table_csv(out / mass)
    assert cols == ["t", "h", "rel_mass_err"]
    assert max(float(r["rel_mass_err"]) for r in rows) <= 1e-12
    sat = [n for n in names if n.startswith("saturation")]
    assert sat
    S, meta = read_matrix_csv(out / sat[0])
    assert S.min() >= 0 and S.max() <= 1
