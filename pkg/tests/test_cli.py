import csv
import hashlib
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from qstrat.cli import parse_range, parallel_map, run, thread_count, ValidationError
from qstrat.qfield import load_field


def call(*argv):
    buf = io.StringIO()
    code = run(list(argv), buf)
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def branch_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("fields")
    path = d / "branch.qfld"
    code, _ = call("make-field", "--preset", "branch", "--q", "2", "--p", "1", "--nodes", "65", "--out", str(path))
    assert code == 0
    return path


def test_metric():
    assert call("metric", "--a", "0,0;2,0", "--b", "1,0;1,1") == (0, "1.7320508\n")


def test_metric_bad_point(capsys):
    code, _ = call("metric", "--a", "0,0;2", "--b", "1,0;1,1")
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"]


def test_unknown_flag_and_command(capsys):
    assert call("metric", "--a", "0,0", "--b", "1,1", "--bogus")[0] == 2
    assert call("nonsense")[0] == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert all(json.loads(line)["error"] == "validation" for line in err)


def test_make_field_writes_a_manifest(branch_file):
    f = load_field(branch_file)
    assert f.q == 2 and f.dims == (65, 65)
    manifest = json.loads((branch_file.parent / "manifest.json").read_text())
    entry = manifest["outputs"]["branch.qfld"]
    assert entry["command"] == "make-field"
    assert entry["sha256"] == hashlib.sha256(branch_file.read_bytes()).hexdigest()


def test_frequency_csv(branch_file):
    code, text = call("frequency", "--field", str(branch_file), "--center", "0,0", "--radii", "0.2:0.6:3")
    assert code == 0
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["radius", "D", "H", "I"]
    assert len(rows) == 4
    assert all(abs(float(r[3]) - 0.5) < 0.05 for r in rows[1:])


def test_frequency_is_thread_independent(branch_file, monkeypatch):
    args = ("frequency", "--field", str(branch_file), "--center", "0.1,0", "--radii", "0.2:0.6:5")
    _, one = call(*args)
    monkeypatch.setenv("QSTRAT_THREADS", "4")
    _, four = call(*args)
    assert one == four


def test_dk_json(branch_file):
    code, text = call("dk", "--field", str(branch_file), "--center", "0,0", "--radius", "0.5", "--k", "1")
    assert code == 0
    data = json.loads(text)
    assert data["value"] == pytest.approx(2**0.5, rel=0.05)
    assert data["competitor"]["invariance_dim"] == 2


def test_minimize_and_log(tmp_path):
    bd = tmp_path / "bd.qfld"
    assert call("make-field", "--nodes", "33", "--ball", "1.0", "--out", str(bd))[0] == 0
    out = tmp_path / "sol.qfld"
    code, text = call("minimize", "--boundary", str(bd), "--out", str(out))
    assert code == 0
    log = json.loads((tmp_path / "sol.qfld.log.json").read_text())
    energies = [h["energy"] for h in log["history"]]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(energies, energies[1:]))
    assert json.loads(text)["energy"] == pytest.approx(2 * np.pi, rel=0.1)


def test_minimize_missing_file(tmp_path):
    assert call("minimize", "--boundary", str(tmp_path / "nope.qfld"), "--out", str(tmp_path / "x.qfld"))[0] == 2


def test_stratify_report(branch_file, tmp_path):
    out = tmp_path / "report.json"
    code, _ = call("stratify", "--field", str(branch_file), "--k", "0", "--delta", "0.5", "--r0", "0.2",
                   "--kappa0", "0.5", "--domain", "disk:1", "--out", str(out))
    assert code == 0
    rep = json.loads(out.read_text())
    for key in ("params", "strata_points", "cover_levels", "audits", "tubular_bounds"):
        assert key in rep
    assert rep["params"]["mode"] == "practical" and rep["params"]["tau"] == 0.1
    assert rep["strata_points"] == [[0.0, 0.0]]
    assert rep["ok"]


def test_stratify_proof_mode_without_calibration(branch_file, tmp_path):
    code, _ = call("stratify", "--field", str(branch_file), "--delta", "0.5", "--r0", "0.2",
                   "--kappa0", "0.5", "--mode", "proof", "--out", str(tmp_path / "r.json"))
    assert code == 2


def test_stratify_rejects_r0_below_grid_resolution(branch_file, tmp_path, capsys):
    code, _ = call("stratify", "--field", str(branch_file), "--delta", "0.5", "--r0", "0.01",
                      "--kappa0", "0.5", "--out", str(tmp_path / "r.json"))
    assert code == 2 and "r_min" in capsys.readouterr().err


def test_stratify_is_deterministic(branch_file, tmp_path):
    texts = []
    for name in ("a.json", "b.json"):
        call("stratify", "--field", str(branch_file), "--delta", "0.5", "--r0", "0.2", "--kappa0", "0.5",
             "--out", str(tmp_path / name))
        texts.append((tmp_path / name).read_text())
    assert texts[0] == texts[1]


def test_minkowski(tmp_path):
    pts = tmp_path / "pts.csv"
    t = np.linspace(0, 1, 2001)
    np.savetxt(pts, np.stack([t, 0 * t], 1), delimiter=",")
    out = tmp_path / "est.json"
    code, _ = call("minkowski", "--points", str(pts), "--radii", "0.002:0.02:4", "--out", str(out), "--plot")
    assert code == 0
    est = json.loads(out.read_text())
    assert est["dim_estimate"] == pytest.approx(1.0, abs=0.1)
    assert (tmp_path / "est.svg").read_text().startswith("<svg")


def test_minkowski_needs_a_decade(tmp_path):
    pts = tmp_path / "pts.csv"
    pts.write_text("0,0\n")
    assert call("minkowski", "--points", str(pts), "--radii", "0.01:0.02:4", "--out", str(tmp_path / "e.json"))[0] == 2


def test_verify(branch_file):
    code, text = call("verify", "--field", str(branch_file), "--r0", "0.2")
    assert code == 0
    data = json.loads(text)
    assert data["consistent"] and data["calibration"]["source"] == "empirical"
    code, text = call("verify", "--instance", "broken")
    assert code == 0 and not json.loads(text)["consistent"]
    assert call("verify")[0] == 2


def test_theorem_a(tmp_path):
    code, text = call("theorem-a", "--preset", "branch2", "--kappa0", "0.5", "--out", str(tmp_path))
    assert code == 0 and text.startswith("PASS")
    res = json.loads((tmp_path / "theorem_a.json").read_text())
    assert res["estimate"]["dim_estimate"] <= 0.1
    assert "theorem_a.json" in json.loads((tmp_path / "manifest.json").read_text())["outputs"]


def test_theorem_a_bad_kappa():
    assert call("theorem-a", "--kappa0", "1.5")[0] == 2


def test_helpers(monkeypatch):
    assert np.allclose(parse_range("1:3:3"), [1, 2, 3])
    assert np.allclose(parse_range("1:100:3", geometric=True), [1, 10, 100])
    with pytest.raises(ValidationError):
        parse_range("1:2")
    assert parallel_map(lambda v: v * v, range(6), 3) == [0, 1, 4, 9, 16, 25]
    monkeypatch.setenv("QSTRAT_THREADS", "3")
    assert thread_count(1) == 3
    monkeypatch.setenv("QSTRAT_THREADS", "x")
    with pytest.raises(ValidationError):
        thread_count()


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "qstrat.cli", "metric", "--a", "0,0;2,0", "--b", "1,0;1,1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == "1.7320508\n"
    proc = subprocess.run([sys.executable, "-m", "qstrat.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
