from __future__ import annotations

import json

import pytest

from treecutoff.cli import atomic_write, main


def run(argv, tmp_path):
    return main(list(argv) + ["--out", str(tmp_path)])


def read_json(path):
    return json.loads(path.read_text())


def test_build_writes_outputs_and_manifest(tmp_path, capsys):
    assert run(["build", "--k", "2"], tmp_path) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["vertex_count"] == 5387
    man = read_json(tmp_path / "build_k2_c.manifest.json")
    assert man["command"] == "build" and man["config"]["k"] == 2
    assert sorted(man["outputs"]) == sorted(str(tmp_path / n) for n in
                                            ("build_k2_c.json", "build_k2_c_regions.csv"))
    out = read_json(tmp_path / "build_k2_c.json")
    assert out["manifest"] == "build_k2_c.manifest.json" and out["schema_version"] == 1
    assert (tmp_path / "build_k2_c_regions.csv").read_text().startswith("region,")


def test_exact_size_stem(tmp_path):
    assert run(["build", "--k", "2", "--mode", "exact_size"], tmp_path) == 0
    assert read_json(tmp_path / "build_k2_c_exact.json")["summary"]["vertex_count"] == 5390


@pytest.mark.parametrize("argv", [["build", "--k", "0"], ["build"], ["build", "--k", "2", "--base", "1"],
                                  ["mc", "--k", "1", "--seed", "1", "--replicates", "0"],
                                  ["mc", "--k", "1"],
                                  ["tmix", "--k", "1", "--eps", "1.5"],
                                  ["hitting", "--k", "1", "--start", "T9:3"],
                                  ["hitting", "--k", "1", "--laziness", "1.0"],
                                  ["couple", "--k", "1", "--seed", "1", "--mode", "exact_size"]])
def test_usage_errors_exit_2(argv, tmp_path):
    with pytest.raises(SystemExit) as e:
        run(argv, tmp_path)
    assert e.value.code == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "fam.cfg"
    cfg.write_text("k = 1\nalpha = 2\n")
    assert run(["build", "--config", str(cfg), "--k", "2"], tmp_path) == 0
    assert (tmp_path / "build_k2_c_a2.json").exists()
    bad = tmp_path / "bad.cfg"
    bad.write_text("k = 1\ncolour = red\n")
    with pytest.raises(SystemExit) as e:
        run(["build", "--config", str(bad)], tmp_path)
    assert e.value.code == 2


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("TREECUTOFF_OUT", str(tmp_path / "env"))
    assert main(["build", "--k", "1"]) == 0
    assert (tmp_path / "env" / "build_k1_c.json").exists()


def test_tmix(tmp_path, capsys):
    assert run(["tmix", "--k", "2", "--eps", "0.25"], tmp_path) == 0
    assert capsys.readouterr().out.strip() == "0.25 36143"
    out = read_json(tmp_path / "tmix_k2_c.json")
    assert out["tmix"]["0.25"] == 36143


def test_profile(tmp_path):
    assert run(["profile", "--k", "1", "--t-grid", "0,10,100"], tmp_path) == 0
    lines = (tmp_path / "profile_k1_c.csv").read_text().splitlines()
    assert lines[0] == "t,d" and len(lines) == 4
    d = [float(x.split(",")[1]) for x in lines[1:]]
    assert d == sorted(d, reverse=True)


def test_hitting(tmp_path, capsys):
    assert run(["hitting", "--k", "2", "--laziness", "0"], tmp_path) == 0
    out = read_json(tmp_path / "hitting_k2_c.json")
    assert out["residuals"]["mean"] <= 1e-10
    assert (tmp_path / "hitting_k2_c.csv").read_text().startswith("start,mean,variance")


def test_spectral(tmp_path):
    assert run(["spectral", "--k", "1", "--poincare", "--trials", "20",
                "--tree-sizes", "7,15"], tmp_path) == 0
    out = read_json(tmp_path / "spectral_k1_c.json")
    assert out["cheeger_consistent"] and out["report"]["method"] == "dense"
    assert out["poincare"]["line"]["passed"]
    assert (tmp_path / "spectral_k1_c_poincare_tree.csv").exists()


def test_mc_and_couple(tmp_path):
    assert run(["mc", "--k", "1", "--seed", "3", "--replicates", "50", "--samples"], tmp_path) == 0
    out = read_json(tmp_path / "mc_k1_c.json")
    assert out["truncations"] == 0 and out["decomposition_exact"] and out["seed"] == 3
    assert run(["couple", "--k", "1", "--seed", "3", "--replicates", "50"], tmp_path) == 0
    assert (tmp_path / "couple_k1_c_survival.csv").read_text().startswith("t,p_tau_gt_t,se")


def test_mc_truncation_exit_1(tmp_path):
    assert run(["mc", "--k", "1", "--seed", "3", "--replicates", "5", "--max-steps", "3"],
               tmp_path) == 1


def test_sweep_reports_per_k_errors(tmp_path):
    assert run(["sweep", "--k-list", "1,2", "--eps", "0.25,0.75"], tmp_path) == 0
    csv_text = (tmp_path / "sweep_k1-2_c.csv").read_text()
    assert csv_text.splitlines()[0].startswith("family,k,N,eps")
    assert run(["sweep", "--k-list", "1", "--mode", "exact_size", "--eps", "0.25"], tmp_path) == 1


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write(tmp_path / "a" / "x.txt", "hello")
    assert (tmp_path / "a" / "x.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["x.txt"]
