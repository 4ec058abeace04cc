import csv
import os

import pytest

from crit_avalanche import cli
from crit_avalanche.config import SCHEMA, ConfigError, parse_config
from crit_avalanche.survival import NonConvergence


def _write(tmp_path, text, name="run.conf"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _rows(path):
    with open(path) as fh:
        body = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(body))


def test_minimal_config_fills_defaults():
    cfg = parse_config("seed = 3\nmeasure.kind = uniform\n")
    assert cfg["seed"] == 3
    assert cfg["b"] == 2 and cfg["v"] == 1.0
    assert cfg["grid.nodes"] == SCHEMA["grid.nodes"].default
    assert cfg.measure.cdf(0.25) == pytest.approx(0.25)
    assert cfg.family is None


def test_header_records_every_resolved_key_except_workers():
    cfg = parse_config("seed = 3\nmeasure.kind = uniform\nworkers = 3\n")
    keys = {ln.split(" = ")[0] for ln in cfg.header_lines()}
    assert "workers" not in keys
    assert set(SCHEMA) - {"workers"} <= keys
    assert {"measure.kind", "seed"} <= keys


def test_gap_without_p_names_the_key():
    with pytest.raises(ConfigError) as err:
        parse_config("seed = 1\nmeasure.kind = gap\n")
    assert any(e.startswith("measure.p") for e in err.value.errors)


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as err:
        parse_config("measure.kind = uniform\nb = 1\nsamples = 0\nbogus = 4\nv = 1\nv = 2\n")
    text = " ".join(err.value.errors)
    for key in ("seed", "b:", "samples", "bogus", "duplicate key v"):
        assert key in text


def test_unknown_measure_kind_rejected():
    with pytest.raises(ConfigError, match="unknown kind"):
        parse_config("seed = 1\nmeasure.kind = cauchy\n")


def test_missing_measure_rejected():
    with pytest.raises(ConfigError, match="measure"):
        parse_config("seed = 1\n")


def test_piecewise_and_nested_mix_parse():
    cfg = parse_config(
        "seed = 1\nmeasure.kind = mix\nmeasure.alpha = 0.25\n"
        "measure.rho0.kind = piecewise\nmeasure.rho0.piece = 0,0.5,1,1\nmeasure.rho0.atom = 0.75,0.5\n"
        "measure.rho1.kind = ramp\n"
    )
    assert cfg.measure.cdf(1.0) == pytest.approx(1.0)
    # 0.75 * (0.5 from the piece) + 0.25 * (0.5^2 from the ramp)
    assert cfg.measure.cdf(0.5) == pytest.approx(0.75 * 0.5 + 0.25 * 0.25)


def test_env_overrides_workers(monkeypatch):
    monkeypatch.setenv("CRIT_AVALANCHE_WORKERS", "5")
    assert parse_config("seed = 1\nmeasure.kind = ramp\nworkers = 2\n")["workers"] == 5
    monkeypatch.setenv("CRIT_AVALANCHE_WORKERS", "zero")
    with pytest.raises(ConfigError, match="CRIT_AVALANCHE_WORKERS"):
        parse_config("seed = 1\nmeasure.kind = ramp\n")


def test_zeta_on_gap_measure_gives_p(tmp_path):
    conf = _write(tmp_path, "seed = 1\nmeasure.kind = gap\nmeasure.p = 0.4\ngrid.nodes = 256\nzeta.n = 10\n")
    out = tmp_path / "out"
    assert cli.main(["zeta", "--config", conf, "--out", str(out)]) == 0
    rows = _rows(out / "zeta.csv")
    assert len(rows) == 10
    assert float(rows[-1]["ratio1"]) == pytest.approx(0.4, abs=1e-6)
    assert float(rows[-1]["ratio2"]) == pytest.approx(0.4, abs=1e-6)
    assert float(_rows(out / "zeta_summary.csv")[0]["z"]) == pytest.approx(0.4, abs=1e-6)
    head = (out / "zeta.csv").read_text().splitlines()
    assert head[0] == "# crit-avalanche zeta"
    assert "# measure.p = 0.4" in head


def test_verdict_prints_outcome(tmp_path, capsys):
    conf = _write(tmp_path, "seed = 1\nmeasure.kind = uniform\nmeasure.hi = 0.4\n")
    assert cli.main(["verdict", "--config", conf, "--out", str(tmp_path / "o")]) == 0
    assert capsys.readouterr().out.strip() == "finite_always"
    assert _rows(tmp_path / "o" / "verdict.csv")[0]["outcome"] == "finite_always"


def test_delta_scan_on_noncritical_measure_exits_2(tmp_path, capsys):
    conf = _write(tmp_path, "seed = 1\nmeasure.kind = gap\nmeasure.p = 0.4\nsamples = 100\n")
    assert cli.main(["exponents", "--scan", "delta", "--config", conf, "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err


def test_invalid_config_exits_2(tmp_path, capsys):
    conf = _write(tmp_path, "seed = 1\nmeasure.kind = uniform\nnot_a_key = 1\n")
    assert cli.main(["zeta", "--config", conf]) == 2
    assert "not_a_key: unknown key" in capsys.readouterr().err


def test_missing_config_argument_exits_2(capsys):
    assert cli.main(["zeta"]) == 2
    assert cli.main(["zeta", "--config", "/nonexistent/run.conf"]) == 2


def test_family_subcommand_without_family_exits_2(tmp_path):
    conf = _write(tmp_path, "seed = 1\nmeasure.kind = uniform\n")
    assert cli.main(["critical", "--config", conf, "--out", str(tmp_path / "o")]) == 2


def test_nonconvergence_exits_3_with_diagnostics(tmp_path, monkeypatch):
    def stuck(cfg, sink):
        raise NonConvergence("iteration stalled", residual=0.5)

    monkeypatch.setitem(cli.HANDLERS, "qinf", stuck)
    conf = _write(tmp_path, "seed = 1\nmeasure.kind = uniform\n")
    out = tmp_path / "o"
    assert cli.main(["qinf", "--config", conf, "--out", str(out)]) == 3
    diag = (out / "qinf_diagnostics.txt").read_text()
    assert "iteration stalled" in diag and "residual = 0.5" in diag


def test_run_log_records_workers_outside_csv(tmp_path, monkeypatch):
    monkeypatch.setenv("CRIT_AVALANCHE_WORKERS", "3")
    conf = _write(tmp_path, "seed = 1\nmeasure.kind = gap\nmeasure.p = 0.4\ngrid.nodes = 256\n")
    out = tmp_path / "o"
    assert cli.main(["chi", "--config", conf, "--out", str(out)]) == 0
    assert "workers=3" in (out / "run.log").read_text()
    assert "workers" not in (out / "chi.csv").read_text()
    # chi = r / (1 - b p) with r = 1 for the standard gap measure at v = 1
    assert float(_rows(out / "chi.csv")[0]["chi"]) == pytest.approx(1 / (1 - 0.8), rel=1e-6)


def test_fast_selftest_passes(capsys):
    assert cli.main(["selftest", "--level", "fast"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out
    assert out.strip().splitlines()[-1].endswith("checks passed")
