import json
from importlib import resources

import numpy as np
import pytest

from syncstego import formats
from syncstego.cli import main

ASSET = resources.files("syncstego").joinpath("data/neighbor_tables.txt").read_text()


@pytest.fixture(scope="module")
def work(tmp_path_factory, estimated_model):
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-cover", "--size", "64", "--seed", "1", "--out", str(d / "c.qdct"),
                 "--costs-out", str(d / "c.cost")]) == 0
    formats.write_corr(d / "m.corr", estimated_model)
    return d


def run(*args):
    return main([str(a) for a in args])


def test_make_cover_outputs(work):
    cover = formats.read_qdct(work / "c.qdct")
    costs = formats.read_cost(work / "c.cost")
    assert (cover.height, cover.width) == (64, 64)
    assert costs.rho.shape == cover.coefficients.shape


def test_embed_writes_everything(work, tmp_path):
    out = {k: tmp_path / k for k in ("s.qdct", "s.chg", "r.json", "l.csv", "d.csv")}
    assert run("embed", "--cover", work / "c.qdct", "--costs", work / "c.cost", "--model", work / "m.corr",
               "--payload", 0.4, "--seed", 2, "--out", out["s.qdct"], "--changes", out["s.chg"],
               "--report", out["r.json"], "--lattice-csv", out["l.csv"], "--pmf-diff", out["d.csv"]) == 0
    rep = json.loads(out["r.json"].read_text())
    assert "runtime_s" not in rep and 0 < rep["H_in"] - rep["H_out"] < 0.1
    cover = formats.read_qdct(work / "c.qdct")
    stego = formats.read_qdct(out["s.qdct"])
    ch, lat = formats.read_chg(out["s.chg"])
    np.testing.assert_array_equal(stego.coefficients - cover.coefficients, ch)
    assert len(out["l.csv"].read_text().splitlines()) == 9
    assert np.loadtxt(out["d.csv"], delimiter=",").shape == (64, 64)


def test_embed_without_model_is_identity(work, tmp_path):
    assert run("embed", "--cover", work / "c.qdct", "--payload", 0.3, "--out", tmp_path / "s.qdct",
               "--report", tmp_path / "r.json", "--model", "none", "--timing") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["H_in"] == rep["H_out"] and rep["n_conditioned"] == 0 and "runtime_s" in rep


def test_embed_byte_identical_across_runs_and_threads(work, tmp_path):
    digests = []
    for i, t in enumerate((1, 1, 8)):
        d = tmp_path / str(i)
        d.mkdir()
        assert run("embed", "--cover", work / "c.qdct", "--model", work / "m.corr", "--payload", 0.5,
                   "--seed", 9, "--threads", t, "--out", d / "s.qdct", "--changes", d / "s.chg",
                   "--report", d / "r.json") == 0
        digests.append([(d / f).read_bytes() for f in ("s.qdct", "s.chg", "r.json")])
    assert digests[0] == digests[1] == digests[2]


def test_calibrate_and_report(work, tmp_path):
    csv_path = tmp_path / "sweep.csv"
    assert run("calibrate", "--cover", work / "c.qdct", "--model", work / "m.corr", "--grid", "0.1,0.3,0.5",
               "--out", csv_path, "--pmf-diff", tmp_path / "d.csv") == 0
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("cover,H_in,H_out,drop")
    figs = tmp_path / "figs"
    figs.mkdir()
    assert run("report", "--sweep", csv_path, "--pmf-diff", tmp_path / "d.csv", "--out", figs) == 0
    assert sorted(p.name for p in figs.iterdir()) == ["entropy_drop.png", "lattice_entropy.png",
                                                      "probability_difference.png"]


def test_estimate_cov_small(tmp_path):
    assert run("estimate-cov", "--images", 4, "--size", 32, "--out", tmp_path / "m.corr",
               "--report", tmp_path / "r.json") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert {"max_diagonal_rho", "intra_residual_full", "table_support_fraction"} <= rep.keys()
    formats.read_corr(tmp_path / "m.corr")


def test_estimate_cov_needs_two_images(tmp_path, capsys):
    assert run("estimate-cov", "--images", 1, "--out", tmp_path / "m.corr") == 1
    assert "samples" in capsys.readouterr().err


def test_validate_tables_dump(capsys):
    assert run("validate-tables", "--dump") == 0
    out = capsys.readouterr().out.splitlines()
    assert out == [f"lattice {i}: {n}" for i, n in enumerate([0, 2, 4, 6, 32, 34, 36, 38])]


def test_validate_tables_reports_location(tmp_path, capsys):
    p = tmp_path / "t.txt"
    p.write_text(ASSET.replace("L7 0,6 B0: 6,6 5,6", "L7 0,6 B0: 6,6", 1))
    assert run("validate-tables", "--tables", p) == 1
    err = capsys.readouterr().err
    assert "checksum" in err and "lattice 7, mode (0,6)" in err


@pytest.mark.parametrize("args", [
    ["embed", "--cover", "x.qdct", "--payload", "0.3", "--out", "s.qdct"],    # missing input
    ["embed", "--payload", "0.3", "--out", "s.qdct"],                          # missing required flag
    ["calibrate", "--cover", "x", "--grid", "", "--out", "o.csv"],             # empty grid
    ["embed", "--cover", "x", "--payload", "-1", "--out", "s"],                # bad payload
    ["frobnicate"],
])
def test_usage_errors_exit_3(args, monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        raise SystemExit(main(args))
    assert exc.value.code == 3


def test_threads_must_be_positive(work, tmp_path):
    assert run("embed", "--cover", work / "c.qdct", "--payload", 0.3, "--threads", 0,
               "--out", tmp_path / "s.qdct") == 3


def test_corrupted_cover_exit_1(work, tmp_path, capsys):
    bad = tmp_path / "bad.qdct"
    data = bytearray((work / "c.qdct").read_bytes())
    data[40] ^= 0xFF
    bad.write_bytes(bytes(data))
    assert run("embed", "--cover", bad, "--payload", 0.3, "--out", tmp_path / "s.qdct") == 1
    assert "checksum" in capsys.readouterr().err
    assert not (tmp_path / "s.qdct").exists()


def test_dimension_mismatch_names_both_files(work, tmp_path, capsys):
    assert run("make-cover", "--size", "32", "--out", tmp_path / "small.qdct",
               "--costs-out", tmp_path / "small.cost") == 0
    assert run("embed", "--cover", work / "c.qdct", "--costs", tmp_path / "small.cost", "--payload", 0.3,
               "--out", tmp_path / "s.qdct") == 1
    err = capsys.readouterr().err
    assert "small.cost" in err and "c.qdct" in err


def test_infeasible_payload_exit_2(work, tmp_path):
    assert run("embed", "--cover", work / "c.qdct", "--payload", 50, "--out", tmp_path / "s.qdct") == 2


def test_bad_model_exit_1(work, tmp_path):
    m = tmp_path / "m.corr"
    m.write_text('{"magic": "CORR", "version": 1, "threshold": 0.05, "entries": '
                 '[{"db": [0, 1], "a": [0, 1], "b": [0, 1], "rho": 3.0}]}')
    assert run("embed", "--cover", work / "c.qdct", "--model", m, "--payload", 0.3,
               "--out", tmp_path / "s.qdct") == 1
