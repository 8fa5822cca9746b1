import json

import numpy as np
import pytest

from kinbridge.cli import main

SMALL_CONF = """
potential.family = quadratic
potential.alpha = 1.0
potential.gamma = 2.5
grid.nx = 31
grid.nv = 31
grid.x_min = -7.0
grid.x_max = 7.0
grid.v_min = -7.0
grid.v_max = 7.0
problem = ksp
marginals.mu.family = gaussian
marginals.mu.mean = -1.0
marginals.mu.var = 0.25
marginals.nu.family = gaussian
marginals.nu.mean = 1.0
marginals.nu.var = 0.25
horizons = 2, 3, 4, 5
delta = 0.25
sinkhorn.tol = 1e-10
seed = 0
"""


@pytest.fixture()
def conf(tmp_path):
    path = tmp_path / "small.conf"
    path.write_text(SMALL_CONF)
    return path


def test_kappa_json_output(capsys):
    assert main(["kappa", "--alpha", "1", "--gamma", "1"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["kappa"] == pytest.approx(0.375, abs=1e-6)
    assert payload["b"] == pytest.approx(0.5, abs=1e-5)
    assert len(payload["q_eigenvalues"]) == 2


def test_kappa_infeasible_exit_2(capsys):
    assert main(["kappa", "--alpha", "1", "--beta", "9", "--gamma", "1"]) == 2


def test_unknown_subcommand_exit_2():
    assert main(["frobnicate"]) == 2


def test_missing_config_exit_2(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "none.conf")]) == 2


def test_kernel_check_small(capsys):
    code = main(["kernel-check", "--alpha", "1", "--gamma", "1", "--t", "1.0",
                 "--nx", "21", "--nv", "21"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["row_ok"] and payload["column_ok"] and payload["reversibility_ok"]


def test_solve_with_dumps(conf, tmp_path, capsys):
    dump = tmp_path / "pots"
    code = main(["solve", "--config", str(conf), "--out", str(tmp_path),
                 "--dump-potentials", str(dump)])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["reports"]) == 4
    assert all(r["converged"] for r in payload["reports"])
    assert (tmp_path / "pots.T2.npz").exists()
    data = np.load(tmp_path / "pots.T2.npz")
    assert data["log_f"].shape == (31,)


def test_solve_dump_diagnostics(tmp_path, capsys):
    conf_one = tmp_path / "one.conf"
    text = SMALL_CONF.replace("horizons = 2, 3, 4, 5", "horizons = 2.0")
    # dense diagnostic flows need spatial resolution; 31 nodes at h=0.47 is
    # too coarse for the recursion and trips the mass guard
    text = text.replace("grid.nx = 31", "grid.nx = 43")
    text = text.replace("grid.nv = 31", "grid.nv = 43")
    conf_one.write_text(text + "times.count = 9\n")
    base = tmp_path / "diag"
    code = main(["solve", "--config", str(conf_one), "--out", str(tmp_path),
                 "--dump-diagnostics", str(base)])
    assert code == 0
    csv_path = tmp_path / "diag.T2.csv"
    assert csv_path.exists()
    header = csv_path.read_text().splitlines()[0]
    assert header.startswith("t,H,I,hf,hb,phi,psi")
    assert (tmp_path / "diag.T2.png").exists()


def test_turnpike_cli_writes_outputs(conf, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["turnpike", "--config", str(conf), "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "turnpike_ksp_summary.json").read_text())
    assert summary["passed"]
    assert (out / "turnpike_ksp.csv").exists()
    png = out / "turnpike_ksp.png"
    assert png.exists() and png.stat().st_size > 1000


def test_turnpike_cli_no_plot(conf, tmp_path):
    out = tmp_path / "out2"
    code = main(["turnpike", "--config", str(conf), "--out", str(out),
                 "--no-plot"])
    assert code == 0
    assert not (out / "turnpike_ksp.png").exists()


def test_window_cli_bad_t_fixed_exit_2(conf, tmp_path):
    assert main(["window", "--config", str(conf), "--out", str(tmp_path),
                 "--t-fixed", "1.9"]) == 2


def test_contraction_cli(conf, tmp_path, capsys):
    out = tmp_path / "outc"
    assert main(["contraction", "--config", str(conf), "--out", str(out)]) == 0
    assert (out / "contraction.json").exists()
    assert (out / "contraction.png").exists()


def test_csv_format_prints_rows(conf, tmp_path, capsys):
    out = tmp_path / "out3"
    code = main(["cost", "--config", str(conf), "--out", str(out),
                 "--no-plot", "--format", "csv"])
    assert code == 0
    head = capsys.readouterr().out.splitlines()[0]
    assert head.startswith("T,primal,dual,gap")
