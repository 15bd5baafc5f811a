import csv
import json
import math

import pytest

from sbe2d import cli
from sbe2d.config import SCHEMA
from sbe2d.noise import read_field


def run(*argv):
    return cli.main(list(map(str, argv)))


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_help_documents_every_key(capsys):
    with pytest.raises(SystemExit) as info:
        run("simulate", "--help")
    assert info.value.code == 0
    text = capsys.readouterr().out
    for key in SCHEMA:
        assert key in text


def test_hermite_outputs(tmp_path):
    out = tmp_path / "h"
    assert run("hermite", "--family", "polynomial", "--param", 0, "--param", 0, "--param", 1,
               "--m-max", 40, "--output", out) == 0
    rows = list(csv.DictReader(open(out / "hermite.csv")))
    assert len(rows) == 41
    assert float(rows[2]["c_m"]) == pytest.approx(2.0)
    assert float(rows[2]["c_hat_m"]) == pytest.approx(math.sqrt(2.0))
    rep = json.loads((out / "decay.json").read_text())
    assert rep["c2"] == pytest.approx(2.0)
    m = manifest(out)
    assert m["command"] == "hermite" and m["status"] == "pass"
    assert m["config"]["m_max"] == 40 and "version" in m


def test_bad_config_exit_code(tmp_path, capsys):
    assert run("hermite", "--kappa", 0.3, "--output", tmp_path / "x") == 2
    assert "kappa" in capsys.readouterr().err
    cfg = tmp_path / "c.cfg"
    cfg.write_text("N = 16\nN = 32\n")
    assert run("simulate", "--config", cfg) == 2
    assert "N: duplicate" in capsys.readouterr().err


@pytest.fixture(scope="module")
def linear_sim(tmp_path_factory):
    base = tmp_path_factory.mktemp("sim")
    cfg = base / "lin.cfg"
    cfg.write_text("L = 2pi*4\nN = 16\ndt = 0.5\ntau = 100\ncoupling = 0\nensemble = 64\n"
                   "horizon = 2\nn_records = 2\nmodes = 1:0, 0:1\nseed = 3\n")
    out = base / "run"
    code = run("simulate", "--config", cfg, "--output", out)
    return code, out


def test_simulate_artifacts(linear_sim):
    code, out = linear_sim
    assert code == 0
    m = manifest(out)
    assert m["config"]["coupling"] == 0.0 and m["checks"]["real_field"]["pass"]
    values, meta = read_field(out / "snapshot_0002.bin")
    assert values.shape == (16, 16) and meta["tau"] == 100.0
    assert (out / "correlation.svg").read_text().startswith("<?xml")
    rows = list(csv.DictReader(open(out / "stats.csv")))
    assert len(rows) == 3 * 2


def test_compare_linear_run(linear_sim, tmp_path):
    _, out = linear_sim
    dest = tmp_path / "cmp"
    code = run("compare-effective", "--stats", out / "stats.csv", "--output", dest)
    rep = json.loads((dest / "comparison.json").read_text())
    assert rep["qualitative"] is False
    assert code == (0 if rep["max_sigma"] <= 3 else 1)
    assert (dest / "comparison.svg").exists()
    # F = 0 has no effective coefficient
    assert run("compare-effective", "--stats", out / "stats.csv", "--model", "effective",
               "--output", tmp_path / "bad") == 2


def test_compare_missing_stats(tmp_path):
    assert run("compare-effective", "--stats", tmp_path / "nope.csv", "--output", tmp_path) == 2


def test_fock_verify(tmp_path):
    out = tmp_path / "fv"
    assert run("fock-verify", "--set", "fock_K=2", "--set", "n_max=2", "--set", "fock_pairs=3",
               "--output", out) == 0
    res = json.loads((out / "fock_verify.json").read_text())
    assert res["pass"] and res["skew_symmetry"]["max_defect"] < 1e-10
    assert manifest(out)["status"] == "pass"


def test_ansatz_residual_outputs(tmp_path):
    out = tmp_path / "ar"
    code = run("ansatz-residual", "--set", "tau=100,1000", "--set", "fock_K=2", "--set", "n_max=3",
               "--output", out)
    rows = list(csv.DictReader(open(out / "residual.csv")))
    assert [float(r["tau"]) for r in rows] == [100.0, 1000.0]
    res = [float(r["residual"]) for r in rows]
    assert code == (0 if res[1] < res[0] else 1)
    assert manifest(out)["checks"]["strictly_decreasing"]["pass"] == (code == 0)


SWEEP = "tau = 100, 300, 1000\nN = 16\nensemble = 8\nn_corr = 6\nseed = 2\n"


def test_sweep_three_manifests_and_deterministic(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(SWEEP)
    out = tmp_path / "sw"
    assert run("sweep", "--config", cfg, "--output", out) == 0
    assert len(list(out.glob("tau_*/manifest.json"))) == 3
    first = {p.name: p.read_bytes() for p in out.glob("aggregate.*")}
    assert set(first) == {"aggregate.csv", "aggregate.json", "aggregate.svg"}
    agg = json.loads(first["aggregate.json"])
    assert not agg["partial"] and len(agg["rows"]) == 3
    assert run("sweep", "--config", cfg, "--output", out) == 0
    assert {p.name: p.read_bytes() for p in out.glob("aggregate.*")} == first


def test_single_tau_sweep_matches_single_run(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("sweep_kind = ansatz\ntau = 100\nfock_K = 2\nn_max = 3\n")
    assert run("sweep", "--config", cfg, "--output", tmp_path / "sw") == 0
    assert run("ansatz-residual", "--config", cfg, "--output", tmp_path / "one") == 0
    agg = list(csv.DictReader(open(tmp_path / "sw" / "aggregate.csv")))
    one = list(csv.DictReader(open(tmp_path / "one" / "residual.csv")))
    assert agg == one


def test_sweep_failure_marks_partial(tmp_path, monkeypatch):
    real = cli._residual_rows

    def flaky(cfg, taus, mol):
        if taus[0] > 500:
            raise FloatingPointError("forced failure")
        return real(cfg, taus, mol)

    monkeypatch.setattr(cli, "_residual_rows", flaky)
    cfg = tmp_path / "s.cfg"
    cfg.write_text("sweep_kind = ansatz\ntau = 100, 1000\nfock_K = 1\nn_max = 3\n")
    assert run("sweep", "--config", cfg, "--output", tmp_path / "sw") == 1
    agg = json.loads((tmp_path / "sw" / "aggregate.json").read_text())
    assert agg["partial"] and agg["failures"][0]["tau"] == 1000.0
    assert manifest(tmp_path / "sw" / "tau_1000")["status"] == "failed"
