import json
import xml.dom.minidom

import numpy as np
import pytest

from collapsesim.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from collapsesim.config import DEFAULTS, env_overrides, load_config
from collapsesim.io import csv_text, read_csv
from collapsesim.model import ValidationError


def run(tmp_path, *argv, config=None):
    args = list(argv)
    if config is not None:
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        args += ["--config", str(path)]
    return main(args)


def test_rates_default_table(tmp_path):
    out = tmp_path / "rates.csv"
    assert run(tmp_path, "rates", "--out", str(out)) == EXIT_OK
    header, data = read_csv(out)
    assert header == ["x_index", "y_index", "gamma", "theta", "c"]
    assert len(data) == 16
    diag = data[data[:, 0] == data[:, 1]]
    np.testing.assert_array_equal(diag[:, 2], 0.0)


def test_rates_scale_linearly_with_kappa(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(tmp_path, "rates", "--out", str(a), config={"kappa": 2.0}) == EXIT_OK
    assert run(tmp_path, "rates", "--out", str(b), config={"kappa": 4.0}) == EXIT_OK
    np.testing.assert_array_equal(read_csv(b)[1][:, 2], 2 * read_csv(a)[1][:, 2])


def test_csv_round_trip_is_exact(tmp_path):
    values = [0.1, 1 / 3, 2.5e-300, -7.0]
    path = tmp_path / "v.csv"
    path.write_text(csv_text(["v"], [[v] for v in values]), encoding="utf-8")
    assert read_csv(path)[1][:, 0].tolist() == values


def test_evolve(tmp_path):
    out = tmp_path / "ev.csv"
    cfg = {"sigma": 1.0, "time": {"n_points": 6}}
    assert run(tmp_path, "evolve", "--out", str(out), config=cfg) == EXIT_OK
    header, data = read_csv(out)
    assert header[-2:] == ["negativity", "negativity_first_order"]
    assert data[0, header.index("negativity")] == pytest.approx(0.0, abs=1e-14)
    # p and q are negative and the exact state stays separable, so both columns vanish
    assert abs(data[1, -2] - data[1, -1]) <= 1e-12
    first = out.read_bytes()
    assert run(tmp_path, "evolve", "--out", str(out), config=cfg) == EXIT_OK
    assert out.read_bytes() == first


def test_evolve_without_first_order_column(tmp_path):
    out = tmp_path / "ev.csv"
    assert run(tmp_path, "evolve", "--out", str(out), config={"model": "dp-full"}) == EXIT_OK
    assert "negativity_first_order" not in read_csv(out)[0]


def test_sweep(tmp_path):
    out = tmp_path / "sw.csv"
    cfg = {"sweep": {"param": "sigma", "start": 2.0, "stop": 200.0, "num": 7}}
    assert run(tmp_path, "sweep", "--out", str(out), config=cfg) == EXIT_OK
    header, data = read_csv(out)
    assert len(data) == 7
    ratio = data[:, header.index("abs_q_over_p")]
    assert np.all(np.diff(ratio) < 0)


def test_sweep_small_spacing_endpoint(tmp_path):
    out = tmp_path / "sw.csv"
    cfg = {"sweep": {"param": "a", "values": [1e-9, 0.5, 1.0]}}
    assert run(tmp_path, "sweep", "--out", str(out), config=cfg) == EXIT_OK
    header, data = read_csv(out)
    assert abs(data[0, header.index("p")]) < 1e-20 and abs(data[0, header.index("q")]) < 1e-20


def test_sweep_rejects_csl(tmp_path):
    cfg = {"model": "csl-monitoring", "kappa": None, "gamma": 1.0}
    assert run(tmp_path, "sweep", config=cfg) == EXIT_VALIDATION


def test_trajectories_small_sample_and_reproducibility(tmp_path, capsys):
    cfg = {"sigma": 1.0, "trajectories": {"n_traj": 10, "checkpoints": 3}}
    out, rep = tmp_path / "tr.csv", tmp_path / "tr.json"
    code = run(tmp_path, "trajectories", "--out", str(out), "--report", str(rep), "--seed", "9", config=cfg)
    assert code in (EXIT_OK, EXIT_VALIDATION)
    err = capsys.readouterr().err
    assert "PASS" in err or "FAIL" in err
    first = (out.read_bytes(), rep.read_bytes())
    run(tmp_path, "trajectories", "--out", str(out), "--report", str(rep), "--seed", "9", "--threads", "2",
        config=cfg)
    assert (out.read_bytes(), rep.read_bytes()) == first
    assert json.loads(rep.read_text())["master_seed"] == 9


def test_trajectories_with_dump(tmp_path):
    cfg = {"sigma": 1.0, "trajectories": {"n_traj": 100, "checkpoints": 2, "with_backaction": True}}
    dump = tmp_path / "t.bin"
    assert run(tmp_path, "trajectories", "--dump", str(dump), "--out", str(tmp_path / "o.csv"),
               config=cfg) == EXIT_OK
    assert dump.read_bytes()[:8] == b"CSTRAJ01"


def test_plot(tmp_path):
    csv_path, svg = tmp_path / "sw.csv", tmp_path / "sw.svg"
    assert run(tmp_path, "sweep", "--out", str(csv_path)) == EXIT_OK
    assert main(["plot", str(csv_path), "--x", "sigma", "--y", "p,q,n_exact", "--log-x", "--out", str(svg)]) == 0
    text = svg.read_text(encoding="utf-8")
    xml.dom.minidom.parseString(text)
    assert text.count("<polyline") == 3
    first = svg.read_bytes()
    main(["plot", str(csv_path), "--x", "sigma", "--y", "p,q,n_exact", "--log-x", "--out", str(svg)])
    assert svg.read_bytes() == first


def test_plot_rejects_malformed_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,x\n0,abc\n", encoding="utf-8")
    assert main(["plot", str(bad), "--out", str(tmp_path / "x.svg")]) == EXIT_VALIDATION
    assert not (tmp_path / "x.svg").exists()


def test_config_errors_leave_no_output(tmp_path):
    out = tmp_path / "rates.csv"
    assert run(tmp_path, "rates", "--out", str(out), config={"model": "csl-monitoring"}) == EXIT_VALIDATION
    assert run(tmp_path, "rates", "--out", str(out), config={"sigma": -1}) == EXIT_VALIDATION
    assert run(tmp_path, "rates", "--out", str(out), config={"colour": "red"}) == EXIT_VALIDATION
    assert not out.exists()
    assert list(tmp_path.iterdir()) == [tmp_path / "cfg.json"]


def test_missing_config_is_an_io_error(tmp_path):
    assert main(["rates", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


def test_unwritable_output_is_an_io_error(tmp_path):
    assert main(["rates", "--out", str(tmp_path / "missing" / "r.csv")]) == EXIT_IO


def test_environment_overrides(monkeypatch):
    assert env_overrides({"CMSIM_SIGMA": "2.5", "CMSIM_TRAJECTORIES__N_TRAJ": "300", "OTHER": "x"}) == {
        "sigma": 2.5, "trajectories": {"n_traj": 300}}
    monkeypatch.setenv("CMSIM_MODEL", "dp-full")
    monkeypatch.setenv("CMSIM_SIGMA", "2.5")
    cfg = load_config()
    assert cfg.model == "dp-full" and cfg["sigma"] == 2.5
    monkeypatch.setenv("CMSIM_SIGMA", "zero")
    with pytest.raises(ValidationError):
        load_config()


def test_defaults():
    cfg = load_config(environ={})
    assert (cfg["kappa"], cfg["m"], cfg["a"], cfg["d"], cfg["sigma"]) == (2.0, 1.0, 1.0, 3.0, 10.0)
    assert cfg["sweep"]["dt"] == 1e-3 and cfg["trajectories"]["n_traj"] == 10_000
    assert cfg.constants.G == 1.0 and cfg.constants.hbar == 1.0
    assert set(DEFAULTS) >= {"model", "bipartition", "threads"}


def test_validate_quick_and_fault(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["validate", "--quick", "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    names = [c["name"] for c in report["checks"]]
    assert len(names) == len(set(names)) == 8
    assert report["passed"]
    first = out.read_bytes()
    assert main(["validate", "--quick", "--out", str(out), "--threads", "2"]) == EXIT_OK
    assert out.read_bytes() == first
    capsys.readouterr()
    assert main(["validate", "--quick", "--inject-fault", "flip-theta", "--out", str(out)]) == EXIT_VALIDATION
    failed = {c["name"] for c in json.loads(out.read_text())["checks"] if not c["passed"]}
    assert {"backaction-factorisation", "ensemble-vs-feedback-master-equation"} <= failed
