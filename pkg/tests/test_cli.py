import json
import os

import numpy as np
import pytest

from pcbf import cli
from pcbf.dynamics import Trajectory
from pcbf.errors import InfeasibleFilterError
from pcbf.scenario import load_scenario, scenario_from_dict

from conftest import SCENARIOS

SCALAR = os.path.join(SCENARIOS, "scalar.toml")

TINY_OBSTACLE = """
name = "tiny"
duration = {duration}
delta_period = 10
initial_states = [{x0}]
model = "model.json"
[system]
n = 2
k_v = 1.0
[barrier]
kind = "obstacles"
alpha = 2.0
alpha_x = 3.0
obstacles = [{{ c = {center}, r = 1.0 }}]
[controller]
kind = "saturated_proportional"
k_p = 1.0
v_max = 1.0
[distribution]
x0_low = [-6.0, -2.0, -1.0, -1.0]
x0_high = [0.0, 2.0, 1.0, 1.0]
[train]
n_epochs = 2
n_rollouts = 8
rollout_T = 3.0
hidden = [8, 8]
fit_passes = 2
sample_stride = 5
rollout_chunk = 4
randomization = {{ k_v = [0.9, 1.1] }}
[compare]
modes = {modes}
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def summary(out):
    return json.loads((out / "summary.json").read_text())


def test_simulate_nominal_is_unsafe_and_buffered_is_safe(tmp_path):
    out = tmp_path / "nom"
    assert cli.main(["simulate", "--config", SCALAR, "--out", str(out)]) == 0
    assert summary(out)["min_h"] < 0 and summary(out)["violations"] > 0
    assert (out / "simulate.config.json").exists()
    assert (out / "traj_0.csv").read_text().startswith("t,x_0,x_1,v_0,delta,h,hdot")
    cfg = write(tmp_path, "c.toml", 'mode = "constant"\ndelta0 = 1.0\ninitial_states = [[2.0, -0.5]]\n')
    out2 = tmp_path / "const"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out2)]) == 0
    assert summary(out2)["min_h"] >= 0 and summary(out2)["violations"] == 0


def test_simulate_zero_duration(tmp_path):
    cfg = write(tmp_path, "z.toml", "duration = 0.0\ninitial_states = [[1.0, 0.0]]\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    tr = Trajectory.from_csv(tmp_path / "traj_0.csv")
    assert len(tr) == 1 and summary(tmp_path)["violations"] == 0


def test_simulate_outputs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--config", SCALAR, "--out", str(tmp_path / name)]) == 0
    for f in ("traj_0.csv", "traj_1.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resolved_config_lists_all_defaults(tmp_path):
    assert cli.main(["simulate", "--config", SCALAR, "--out", str(tmp_path), "--seed", "7"]) == 0
    resolved = json.loads((tmp_path / "simulate.config.json").read_text())["scenario"]
    assert resolved["seed"] == 7 and resolved["train"]["seed"] == 7
    assert resolved["predictor"]["delta_cap"] == 5.0 and resolved["train"]["sigma"] == 0.9


@pytest.mark.parametrize("text", ["bogus = 1\n", "mode = \"sideways\"\n", "[barrier]\nkind = \"ellipse\"\n",
                                  "initial_states = [[1.0]]\n", "[predictor]\neta = -1.0\n", "x = [\n"])
def test_config_errors_exit_2(tmp_path, text):
    cfg = write(tmp_path, "bad.toml", text)
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_config_and_model_exit_2(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    cfg = write(tmp_path, "l.toml", 'mode = "learned"\nmodel = "missing.json"\ninitial_states = [[1.0, 0.0]]\n')
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_3(tmp_path):
    cfg = write(tmp_path, "d.toml", "initial_states = [[1.0, 0.0]]\n[system]\nk_v = 1e4\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_infeasible_filter_exit_4(tmp_path, monkeypatch):
    def boom(args, sc, out):
        raise InfeasibleFilterError("Lgh vanished")

    monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
    assert cli.main(["simulate", "--config", SCALAR, "--out", str(tmp_path)]) == 4


def test_tabulate_delta_threads_and_env(tmp_path, monkeypatch):
    cfg = write(tmp_path, "g.toml", "[grid]\naxes = [[0.0, 2.0, 4], [-3.0, 1.0, 5]]\n")
    assert cli.main(["tabulate-delta", "--config", cfg, "--out", str(tmp_path / "a"), "--threads", "2"]) == 0
    monkeypatch.setenv("PCBF_THREADS", "3")
    assert cli.main(["tabulate-delta", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "delta_table.csv").read_text()
    assert a == (tmp_path / "b" / "delta_table.csv").read_text()
    assert len(a.splitlines()) == 21 and ",inf," in a
    assert json.loads((tmp_path / "b" / "tabulate-delta.config.json").read_text())["threads"] == 3
    assert cli.main(["tabulate-delta", "--config", SCALAR, "--out", str(tmp_path), "--threads", "0"]) == 2


def test_verify_certified_scenario(tmp_path):
    out = tmp_path / "v"
    assert cli.main(["verify", "--config", os.path.join(SCENARIOS, "scalar_certified.toml"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["hypotheses_hold"] and rep["barrier_ok"] and rep["stays_safe"]
    assert rep["delta0"] == pytest.approx(rep["delta0_lower_bound"])
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["lambda"] == 2.0 and cert["tracking_fn"] == "psi-error-norm"
    # re-check the saved trajectory through the --trajectory path
    assert cli.main(["verify", "--config", os.path.join(SCENARIOS, "scalar_certified.toml"), "--out",
                     str(tmp_path / "v2"), "--trajectory", str(out / "verify_traj.csv")]) == 0
    rep2 = json.loads((tmp_path / "v2" / "report.json").read_text())
    assert rep2["worst_residual"] == pytest.approx(rep["worst_residual"], abs=1e-6)


def test_train_then_compare(tmp_path):
    cfg = write(tmp_path, "t.toml", TINY_OBSTACLE.format(duration=2.0, x0="[-5.0, 0.6, 0.0, 0.0]",
                                                          center="[-2.5, 0.0]",
                                                          modes='["nominal", "optimized", "learned"]'))
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    metrics = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,mean_loss,frac_violating,wall_time_s" and len(metrics) == 3
    assert cli.main(["compare", "--config", cfg, "--out", str(tmp_path), "--timing"]) == 0
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert rows[0].split(",")[0] == "mode" and len(rows) == 4
    assert all(r.split(",")[-1] for r in rows[1:])
    s = json.loads((tmp_path / "compare_summary.json").read_text())
    assert len(s["sup_distance_optimized_learned"]) == 1 and s["sup_threshold"] == pytest.approx(0.1)


def test_compare_trivially_safe_start_gives_identical_trajectories(tmp_path):
    cfg = write(tmp_path, "s.toml", TINY_OBSTACLE.format(
        duration=2.0, x0="[-1.0, 0.5, 0.0, 0.0]", center="[20.0, 20.0]",
        modes='["nominal", "constant", "optimized", "realtime"]'))
    assert cli.main(["compare", "--config", cfg, "--out", str(tmp_path)]) == 0
    ref = Trajectory.from_csv(tmp_path / "compare_nominal_0.csv")
    for mode in ("constant", "optimized", "realtime"):
        tr = Trajectory.from_csv(tmp_path / f"compare_{mode}_0.csv")
        np.testing.assert_array_equal(tr.states, ref.states)
        assert np.all(tr.deltas == 0)
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert all(r.endswith(",") for r in rows[1:])  # no timing column without --timing


def test_svg_output(tmp_path):
    pytest.importorskip("matplotlib")
    cfg = write(tmp_path, "g.toml", "initial_states = [[1.0, -0.5]]\n[grid]\naxes = [[0.0, 2.0, 3], [-3.0, 1.0, 3]]\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path), "--svg"]) == 0
    assert cli.main(["tabulate-delta", "--config", cfg, "--out", str(tmp_path), "--svg"]) == 0
    assert (tmp_path / "traj_0.svg").read_text().lstrip().startswith("<?xml")
    assert (tmp_path / "delta_table.svg").exists()


def test_scenario_files_load():
    for name in ("scalar.toml", "scalar_certified.toml", "obstacle.toml"):
        sc = load_scenario(os.path.join(SCENARIOS, name))
        sc.system(), sc.barrier(), sc.controller(), sc.initial_states()
    sc = scenario_from_dict({"mode": "constant", "delta0": 0.3})
    assert sc.delta_provider() == 0.3
