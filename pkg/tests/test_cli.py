import csv
import json

import pytest

from hicontrast.cli import loglog_slope, main, parse_eps_list, parse_overrides
from hicontrast.model import ConfigError


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_parse_eps_list():
    assert parse_eps_list("2^-3..2^-8") == [2.0 ** -k for k in range(3, 9)]
    assert parse_eps_list("0.05, 0.025") == [0.05, 0.025]
    with pytest.raises(ConfigError):
        parse_eps_list("a,b")


def test_parse_overrides():
    assert parse_overrides(["epsilon=0.02", "defect.d_plus = 0.7"]) == {"epsilon": "0.02", "defect.d_plus": "0.7"}
    with pytest.raises(ConfigError):
        parse_overrides(["epsilon"])


def test_loglog_slope():
    eps = [0.1, 0.05, 0.025]
    assert loglog_slope(eps, [e ** 2 for e in eps]) == pytest.approx(2.0)


def test_bands(tmp_path):
    code, out = run(tmp_path, "bands", "--config", "constant_unit")
    assert code == 0
    rows = read_csv(out / "bands.csv")
    assert rows[0] == ["lambda", "discriminant"]
    assert float(rows[1][0]) == 0.0 and float(rows[1][1]) == pytest.approx(2.0, abs=1e-14)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["gaps"][0] == pytest.approx([11.842782150319252, 39.478417604357524], abs=1e-9)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "bands" and manifest["deterministic"] is True


def test_bands_deterministic(tmp_path):
    _, a = run(tmp_path, "bands", "--config", "layered", name="a")
    _, b = run(tmp_path, "bands", "--config", "layered", name="b")
    assert (a / "bands.csv").read_bytes() == (b / "bands.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_override_reaches_model(tmp_path):
    code, out = run(tmp_path, "bands", "--config", "constant_unit", "--set", "geometry.h=0.3")
    assert code == 0
    gaps = json.loads((out / "summary.json").read_text())["gaps"]
    assert gaps[0][0] != pytest.approx(11.842782150319252, abs=1e-3)


def test_defect_limit(tmp_path):
    code, out = run(tmp_path, "defect-limit", "--config", "gap_tuned")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    # (k pi / |D|)^2 = 25 k^2: k = 1 lies in gap 1, k = 2 in gap 2
    assert [m["index"] for m in summary["gap_modes"]] == [1, 2]
    assert [m["gap_index"] for m in summary["gap_modes"]] == [1, 2]
    assert summary["gap_modes"][0]["lambda0"] == pytest.approx(25.0, rel=1e-10)
    assert summary["gap_modes"][1]["lambda0"] == pytest.approx(100.0, rel=1e-10)


def test_defect_eps(tmp_path):
    code, out = run(tmp_path, "defect-eps", "--config", "gap_tuned")
    assert code == 0
    rows = read_csv(out / "eigenvalues.csv")
    assert rows[0] == ["epsilon", "lambda_eps", "lambda0", "error"]
    assert len(read_csv(out / "ratios.csv")) >= 9


def test_rates_lambda(tmp_path):
    code, out = run(tmp_path, "rates", "--config", "gap_tuned", "--quantity", "lambda_eps",
                    "--eps-list", "2^-3..2^-8")
    assert code == 0
    rows = read_csv(out / "rates.csv")
    assert len(rows) == 7
    summary = json.loads((out / "summary.json").read_text())
    assert summary["slopes"]["error"] >= 0.7


def test_decay(tmp_path):
    code, out = run(tmp_path, "decay", "--config", "gap_tuned", "--eps-list", "0.05,0.025")
    assert code == 0
    rows = read_csv(out / "decay.csv")[1:]
    for r in rows:
        assert float(r[5]) < 0.05


def test_oracle_check(tmp_path):
    code, out = run(tmp_path, "oracle-check", "--config", "gap_tuned")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_abs_disagreement"] < 1e-6 and summary["one_to_one"] is True


def test_resolvent_rate(tmp_path):
    code, out = run(tmp_path, "resolvent-rate", "--config", "constant_unit", "--eps-list", "2^-3..2^-6",
                    "--mesh", "128")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["min_slope"] >= 1.7
    assert summary["min_slope_corrected"] >= 3.5


def test_dispersion(tmp_path):
    diff = []
    for eps in ("0.05", "0.025"):
        code, out = run(tmp_path, "dispersion", "--config", "constant_unit", "--n-theta", "5", "--n-bands", "2",
                        "--set", f"epsilon={eps}", name=eps)
        assert code == 0
        diff.append(json.loads((out / "summary.json").read_text())["max_abs_difference"])
        assert len(read_csv(out / "dispersion.csv")) == 11
    assert 3.5 < diff[0] / diff[1] < 4.5


def test_config_errors_exit_2(tmp_path, capsys):
    assert run(tmp_path, "bands", "--config", "no_such_preset")[0] == 2
    assert run(tmp_path, "bands", "--config", "constant_unit", "--set", "epsilon=-1")[0] == 2
    assert run(tmp_path, "bands", "--config", "constant_unit", "--set", "epsilon")[0] == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("geometry: {h: 1.5}\n")
    assert run(tmp_path, "bands", "--config", str(bad))[0] == 2
    assert "config error" in capsys.readouterr().err


def test_module_error_exits_1(tmp_path, capsys):
    code, out = run(tmp_path, "defect-eps", "--config", "constant_unit")
    assert code == 1
    assert "error" in capsys.readouterr().err
    assert not (out / "summary.json").exists()
