import configparser
import json
import math

import numpy as np
import pytest

from tslab import harness
from tslab.activations import ERF, RELU, ActivationKind
from tslab.cli import main
from tslab.gradient_flow import FlowConfig, init_student, integrate
from tslab.kernels import ERF_ANALYTIC
from tslab.population_loss import build_unit_orthonormal_teacher


def _write_config(path, text):
    path.write_text(text)
    return str(path)


SMALL = """
[sweep]
activation = erf
n = 2
k = 3
d = k+1
seeds = 0-1
output = {out}

[flow]
snapshot_stride = 0

[classifier]
pnc_corr = 0.9
"""


@pytest.mark.parametrize("text,expected", [
    ("2,4,8", [2, 4, 8]), ("10-12", [10, 11, 12]), ("1, 3-4", [1, 3, 4]), ("7", [7]),
])
def test_parse_int_list(text, expected):
    assert harness.parse_int_list(text) == expected


def test_parse_int_list_rejects_reversed_range():
    with pytest.raises(harness.ConfigError):
        harness.parse_int_list("5-3")


def test_config_from_file(tmp_path):
    cfg = harness.SweepConfig.from_file(_write_config(tmp_path / "c.ini", SMALL.format(out="x.jsonl")))
    assert cfg.n_values == [2] and cfg.k_values == [3] and cfg.seeds == [0, 1]
    assert cfg.dim(3) == 4 and cfg.flow.snapshot_stride == 0
    assert cfg.summary_path == "x.summary.csv"
    assert len(cfg.cells()) == 2


@pytest.mark.parametrize("patch,message", [
    (("seeds = 0-1", "seeds = "), "seed list is empty"),
    (("d = k+1", "d = 2"), "d=2 < k=3"),
    (("n = 2", "n = 2\ncolour = red"), "unknown [sweep] keys"),
    (("snapshot_stride = 0", "stepsize = 3"), "unknown [flow] key"),
    (("pnc_corr = 0.9", "pnc = 0.9"), "unknown [classifier] key"),
    (("activation = erf", "activation = swish"), "swish"),
])
def test_config_errors(tmp_path, patch, message):
    text = SMALL.format(out="x.jsonl").replace(*patch)
    with pytest.raises(harness.ConfigError, match=message.replace("[", r"\[").replace("]", r"\]")):
        harness.SweepConfig.from_file(_write_config(tmp_path / "c.ini", text))


def test_missing_config_file(tmp_path):
    with pytest.raises(harness.ConfigError):
        harness.SweepConfig.from_file(tmp_path / "absent.ini")


def test_phase_cell_round_trip():
    cell = harness.PhaseCell(2, 3, 0, 4, "erf", 0.1, 0.09, 0.01, "OptCA", 10, True, 1e-9)
    line = cell.to_json()
    assert json.loads(line)["type"] == "phase_cell"
    assert harness.PhaseCell.from_json(line) == cell
    with pytest.raises(ValueError):
        harness.PhaseCell.from_json('{"type": "other"}')


def test_theory_loss():
    assert harness.theory_loss(3, 3) == 0.0
    assert harness.theory_loss(2, 3) > 0


@pytest.fixture(scope="module")
def sweep_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    cfg = harness.SweepConfig.from_file(
        _write_config(root / "c.ini", SMALL.format(out=root / "a.jsonl")))
    cells = harness.run_phase_sweep(cfg)
    return cfg, cells, root


def test_sweep_records_and_summary(sweep_run):
    cfg, cells, _ = sweep_run
    assert [(c.n, c.k, c.seed) for c in cells] == cfg.cells()
    assert harness.read_records(cfg.output_path) == cells
    assert all(c.label == "OptCA" and c.converged for c in cells)
    schema = open(cfg.summary_path).read().splitlines()
    assert schema[0].startswith("n,k,seeds,frac_OptCA")
    row = harness.summarize(cells)[0]
    assert row["frac_OptCA"] == 1.0 and row["seeds"] == 2
    assert abs(row["mean_gap"]) < 1e-6


def test_sweep_is_byte_identical(sweep_run):
    cfg, _, root = sweep_run
    first = open(cfg.output_path, "rb").read()
    cfg.output_path = str(root / "b.jsonl")
    harness.run_phase_sweep(cfg)
    assert open(cfg.output_path, "rb").read() == first


def test_unconverged_cell_label(tmp_path):
    text = SMALL.format(out=tmp_path / "u.jsonl").replace("snapshot_stride = 0",
                                                          "snapshot_stride = 0\nmax_steps = 5")
    cells = harness.run_phase_sweep(harness.SweepConfig.from_file(_write_config(tmp_path / "c.ini", text)))
    assert {c.label for c in cells} == {"NotConverged"}


def test_emit_phase_and_read_back(sweep_run, tmp_path):
    _, cells, _ = sweep_run
    path = harness.emit_plot_data(cells, "phase", tmp_path / "phase.csv")
    schema, rows = harness.read_plot_data(path)
    assert schema.startswith("schema: phase")
    assert len(rows) == 1 + len(cells)
    assert rows[0][:3] == ["n", "k", "seed"]


def test_emit_trajectory(tmp_path):
    t = build_unit_orthonormal_teacher(3, 4)
    cfg = FlowConfig(seed=0, snapshot_stride=20, max_steps=100)
    rec = integrate(init_student(2, 4, cfg), t, ERF_ANALYTIC, cfg)
    schema, rows = harness.read_plot_data(harness.emit_plot_data(rec, "trajectory", tmp_path / "t.csv"))
    assert schema.startswith("schema: trajectory")
    assert rows[0][0] == "time" and rows[0][-1] == "loss"
    assert len(rows[0]) == 1 + 2 * 3 + 2 + 1
    assert len(rows) == 1 + len(rec.snapshots)


def test_emit_fgrid(tmp_path):
    r, u = np.linspace(0.1, 1, 4), np.linspace(0.1, 0.9, 3)
    F = np.arange(12.0).reshape(4, 3)
    schema, rows = harness.read_plot_data(harness.emit_plot_data((r, u, F), "fgrid", tmp_path / "f.csv"))
    assert "rows = r" in schema
    assert len(rows) == 5 and len(rows[0]) == 4
    assert float(rows[2][3]) == 5.0
    with pytest.raises(ValueError):
        harness.emit_plot_data((r, u, F.T), "fgrid", tmp_path / "g.csv")


def test_emit_unknown_kind(tmp_path):
    with pytest.raises(ValueError, match="unknown plot kind"):
        harness.emit_plot_data([], "heatmap", tmp_path / "x.csv")


def test_one_neuron_table():
    rows = harness.run_one_neuron_table([ERF, RELU, ActivationKind.parse("softplus:1")], range(1, 21))
    erf = [r for r in rows if r["activation"] == "erf"]
    relu = [r for r in rows if r["activation"] == "relu"]
    soft = [r for r in rows if r["activation"].startswith("softplus")]
    assert erf[1]["loss"] == pytest.approx(0.0232216806, abs=1e-9)
    assert all(r["grad_norm"] <= 1e-9 for r in erf)
    np.testing.assert_allclose([abs(r["a"]) for r in erf], range(1, 21), atol=1e-9)
    # over k = 2..20 the erf loss grows near-linearly and the ReLU loss quadratically
    erf_loss = np.array([r["loss"] for r in erf[1:]])
    relu_loss = np.array([r["loss"] for r in relu[1:]])
    erf_slopes, relu_slopes = np.diff(erf_loss), np.diff(relu_loss)
    assert np.all(erf_slopes > 0) and erf_slopes.max() / erf_slopes.min() < 1.5
    assert np.all(np.diff(relu_slopes) > 0) and relu_slopes[-1] / relu_slopes[0] > 5
    assert np.polyfit(np.arange(2, 21), relu_loss, 2)[0] > 0
    assert all(r["method"] == "fixed-point" for r in soft[1:])
    assert all(r["r_le_inv_sqrt_k"] and r["a_ge_k"] for r in soft[1:])


def test_hessian_scan_small():
    rows = harness.run_hessian_scan([2, 7], offsets=[1])
    assert [r["series"] for r in rows] == ["k=n+1", "k=n+1"]
    assert rows[0]["min_eig"] > 0 and rows[1]["min_eig"] < 0
    rows = harness.run_hessian_scan([2], ratios=[2])
    assert rows[0]["k"] == 4 and rows[0]["min_eig"] > 0
    with pytest.raises(ValueError):
        harness.run_hessian_scan([2])


def test_ca_table():
    rows = harness.ca_table(2, 4)
    assert {r["partition"] for r in rows} == {"1-1", "2-1", "3-1", "2-2"}
    best = [r for r in rows if r["optimal"]]
    assert len(best) == 1 and best[0]["partition"] == "3-1"
    assert {r["partition"]: r["count"] for r in rows}["2-2"] == 6


# ---------------------------------------------------------------------------
# command line


def test_cli_ca_table(capsys):
    assert main(["ca-table", "--n", "2", "--k", "4"]) == 0
    assert "partition" in capsys.readouterr().out


def test_cli_flow_ok_and_policy(tmp_path, capsys):
    assert main(["flow", "--n", "2", "--k", "3", "--seed", "1", "--out", str(tmp_path / "t.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["converged"] and out["label"] == "OptCA"
    cfg = _write_config(tmp_path / "f.ini", "[flow]\nmax_steps = 3\n")
    assert main(["flow", "--n", "2", "--k", "3", "--config", cfg]) == 1


def test_cli_invalid_inputs(tmp_path, capsys):
    assert main(["one-neuron", "--activation", "swish"]) == 2
    assert main(["flow", "--n", "2"]) == 2
    bad = _write_config(tmp_path / "bad.ini", SMALL.format(out="x.jsonl").replace("seeds = 0-1", "seeds ="))
    assert main(["phase-sweep", "--config", bad]) == 2
    assert "seed list is empty" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["phase-sweep"])
    assert exc.value.code == 2


def test_cli_phase_sweep_and_emit(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.ini", SMALL.format(out=tmp_path / "p.jsonl"))
    assert main(["phase-sweep", "--config", cfg]) == 0
    assert "OptCA 1.00" in capsys.readouterr().out
    assert main(["emit", str(tmp_path / "p.jsonl"), "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["emit", str(tmp_path / "p.jsonl")]) == 2


def test_cli_fgrid_and_hessian(tmp_path, capsys):
    assert main(["fgrid", "--activation", "softplus:1", "--points", "20",
                 "--out", str(tmp_path / "f.csv")]) == 0
    assert "sign change: True" in capsys.readouterr().out
    assert main(["hessian-scan", "--n", "2", "--ratio", "2"]) == 0
    assert "k=2n" in capsys.readouterr().out
