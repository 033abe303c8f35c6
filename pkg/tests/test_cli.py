import csv
import json

import numpy as np
import pytest

from nnes.cli import resolve_observable, run
from nnes.model import build_scenario, default_config, minimal_config


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_file(tmp_path):
    cfg = default_config(length=2)
    cfg["numerics"]["horizon"] = 8.0
    p = tmp_path / "small.json"
    p.write_text(json.dumps(cfg))
    return p


def test_simulate_minimal(tmp_path):
    out = tmp_path / "o"
    assert run(["simulate", "--scenario", "minimal", "--out", str(out),
                "--observable", "site:0:0:X", "--observable", "site:1:0:Z", "--times", "0", "2.5"]) == 0
    rows = _rows(out / "nnes.csv")
    assert len(rows) == 4
    for r in rows:
        assert r["nnes_re"] == r["sigma_re"] and r["nnes_im"] == r["sigma_im"]
        assert float(r["quad_error"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["dimension"] == 4 and man["outputs"] == ["nnes.csv"]
    assert {"inputs", "code_version", "numerics", "seed"} <= set(man)


def test_kms_check_manifest(tmp_path):
    out = tmp_path / "o"
    assert run(["kms-check", "--scenario", "minimal", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["kms_max_residual"] < 1e-10


def test_bad_scenario_gives_error_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sigma": {"dim": 2}}))
    assert run(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().out)
    assert err["error"] == "ConfigError" and err["command"] == "simulate"
    assert run(["simulate", "--scenario", str(tmp_path / "missing.json")]) == 2


def test_bad_observable_fails_before_running(tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["simulate", "--scenario", "minimal", "--out", str(out),
                "--observable", "site:0:0:Z", "--observable", "site:5:0:Z"]) == 2
    assert "no such site" in json.loads(capsys.readouterr().out)["message"]
    assert not out.exists()


def test_observable_specs(tmp_path):
    sc = build_scenario(default_config(length=1))
    assert np.allclose(resolve_observable(sc, "site:1:0:z").matrix,
                       np.kron(np.eye(2), np.kron(np.diag([1, -1]), np.eye(2))))
    assert resolve_observable(sc, "current:2").is_hermitian()
    m = np.eye(8)
    np.save(tmp_path / "m.npy", m)
    assert np.allclose(resolve_observable(sc, f"matrix:{tmp_path / 'm.npy'}").matrix, m)
    (tmp_path / "m.json").write_text(json.dumps(np.eye(4).tolist()))
    for spec in ("current:3", "site:0:0:Q", "nonsense", f"matrix:{tmp_path / 'm.json'}"):
        with pytest.raises(ValueError):
            resolve_observable(sc, spec)


def test_reruns_are_byte_identical(tmp_path, small_file):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert run(["oracle", "--scenario", str(small_file), "--out", str(o), "--times", "0", "1"]) == 0
        assert run(["kms-check", "--scenario", str(small_file), "--out", str(o / "k"), "--seed", "7"]) == 0
    for name in ("oracle.csv", "k/kms.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = _rows(outs[0] / "oracle.csv")
    assert max(float(r["abs_difference"]) for r in rows) < 1e-5
    mans = [json.loads((o / "manifest.json").read_text()) for o in outs]
    for m in mans:
        m.pop("started"), m.pop("elapsed_s")
    assert mans[0] == mans[1]


def test_response_report(tmp_path, small_file):
    out = tmp_path / "o"
    assert run(["response", "--scenario", str(small_file), "--out", str(out),
                "--observable", "current:1"]) == 0
    (rep,) = json.loads((out / "response.json").read_text())
    assert rep["observable"] == "current:1"
    assert rep["difference"] < rep["tol_fd"]


def test_dyson_and_order_check(tmp_path, small_file, capsys):
    out = tmp_path / "o"
    assert run(["dyson", "--scenario", str(small_file), "--out", str(out), "--order", "4"]) == 2
    capsys.readouterr()
    assert run(["dyson", "--scenario", str(small_file), "--out", str(out), "--order", "2",
                "--observable", "current:1"]) == 0
    (rep,) = json.loads((out / "dyson.json").read_text())
    assert rep["order"] == 2 and rep["relative_difference"] < 1e-3


def test_scans_and_strip(tmp_path, small_file):
    out = tmp_path / "o"
    for cmd in (["moller", "--horizon", "3"], ["a5-scan", "--horizon", "3", "--picture", "free"],
                ["strip-check"]):
        assert run([cmd[0], "--scenario", str(small_file), "--out", str(out), *cmd[1:]]) == 0
    header = (out / "a5_0.csv").read_text().splitlines()[0]
    assert header == "s,g,running_integral,flags"
    strip = json.loads((out / "strip.json").read_text())
    assert strip["max_boundary_residual"] < 1e-10
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "strip-check"
