import csv

import pytest
import yaml

from lyapsig.bench_cli import main, run_matrix
from lyapsig.bench_cli.results import ResultTable
from lyapsig.bench_cli.scenario import ScenarioError, load_scenario, parse_scenario


def _write(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


BASE = {"topology": "arterial-2", "demand": "medium", "controller": "back-pressure",
        "horizon": 400, "warmup": 100, "seeds": [3]}


def test_simulate_writes_step_csv(tmp_path, capsys):
    sc = _write(tmp_path, "s.yaml", BASE)
    out = tmp_path / "steps.csv"
    assert main(["simulate", sc, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "avg_vehicle_delay" in text and "seed: 3" in text
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:5] == ["time", "L_linear", "L_quadratic", "delta", "total_queue"]
    assert len(rows) == 401


def test_simulate_is_reproducible_and_seed_overridable(tmp_path, capsys):
    sc = _write(tmp_path, "s.yaml", BASE)
    main(["simulate", sc])
    a = capsys.readouterr().out
    main(["simulate", sc])
    b = capsys.readouterr().out
    main(["--seed", "4", "simulate", sc])
    c = capsys.readouterr().out
    main(["simulate", sc, "--seed", "4"])
    d = capsys.readouterr().out
    assert a == b and c == d and a != c


def test_train_then_simulate_round_trip(tmp_path, capsys):
    ckpt = tmp_path / "agent.json"
    data = {**BASE, "topology": "arterial-1", "controller": "rl-bp",
            "agent": {"checkpoint": str(ckpt),
                      "config": {"hidden": [16], "batch_size": 16, "learn_start": 16}},
            "training": {"episodes": 2, "horizon": 300, "warmup": 0}}
    sc = _write(tmp_path, "rl.yaml", data)
    assert main(["train", sc, "--checkpoint", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "episode 1" in out and ckpt.exists()
    with open(f"{ckpt}.log.csv") as fh:
        log_rows = list(csv.reader(fh))
    assert log_rows[0] == ["episode", "mean_reward", "mean_loss", "avg_delay", "epsilon"]
    assert len(log_rows) == 3
    assert main(["simulate", sc]) == 0
    first = capsys.readouterr().out
    assert main(["simulate", sc]) == 0
    assert capsys.readouterr().out == first


def test_rl_simulate_without_checkpoint_fails(tmp_path, capsys):
    sc = _write(tmp_path, "rl.yaml", {**BASE, "controller": "rl-q"})
    assert main(["simulate", sc]) == 2
    assert "agent.checkpoint" in capsys.readouterr().err


def test_matrix_table_and_csv(tmp_path, capsys):
    prefix = tmp_path / "m"
    argv = ["matrix", "--topologies", "arterial-2", "--demands", "low", "medium",
            "--controllers", "fixed", "back-pressure", "--seeds", "2", "--horizon", "400",
            "--warmup", "100", "--out", str(prefix)]
    assert main(argv) == 0
    text = capsys.readouterr().out
    lines = [l for l in text.splitlines() if l.startswith(("fixed", "back-pressure"))]
    assert len(lines) == 2  # one row per controller
    assert all(l.count("±") == 2 for l in lines)  # one cell per demand column
    csv_text = (tmp_path / "m.csv").read_text()
    table = ResultTable.from_csv(csv_text)
    assert len(table.cells) == 4 and all(len(v) == 2 for v in table.cells.values())
    assert table.to_csv() == csv_text
    assert (tmp_path / "m.txt").read_text() == text
    # rerun: identical bytes
    assert main(argv) == 0
    capsys.readouterr()
    assert (tmp_path / "m.csv").read_text() == csv_text


def test_matrix_parallel_matches_serial():
    kw = dict(topologies=["arterial-1"], demands=["medium"], shares=[0.0],
              controllers=["max-pressure", "doras-q"], seeds=[0, 1], horizon=300, warmup=50)
    assert run_matrix(**kw).to_csv() == run_matrix(**kw, jobs=2).to_csv()


def test_matrix_rejects_unknown_controller():
    with pytest.raises(ScenarioError):
        run_matrix(["arterial-1"], ["low"], [0.0], ["magic"], [0])
    with pytest.raises(ScenarioError):
        run_matrix(["arterial-1"], ["low"], [0.3], ["fixed"], [0])


def test_stability_output(tmp_path, capsys):
    sc = _write(tmp_path, "s.yaml", {**BASE, "demand": "low"})
    assert main(["stability", sc]) == 0
    out = capsys.readouterr().out
    for key in ("B:", "epsilon:", "B/epsilon:", "measured time-average total queue:",
                "bound held:"):
        assert key in out


def test_result_table_csv_round_trip():
    t = ResultTable()
    t.add("fixed", "arterial-4", "high", 0.25, [1.0, 2.5, 1 / 3])
    t.add("back-pressure", "arterial-4", "high", 0.25, [0.1])
    text = t.to_csv()
    assert ResultTable.from_csv(text).to_csv() == text
    assert t.std("back-pressure", "arterial-4", "high", 0.25) == 0.0
    with pytest.raises(ValueError):
        ResultTable.from_csv("a,b\n")


@pytest.mark.parametrize("data,key", [
    ({**BASE, "bogus": 1}, "bogus"),
    ({k: v for k, v in BASE.items() if k != "topology"}, "topology"),
    ({**BASE, "topology": "ring-3"}, "topology"),
    ({**BASE, "demand": "extreme"}, "demand"),
    ({**BASE, "truck_share": 0.3}, "truck_share"),
    ({**BASE, "controller": "magic"}, "controller"),
    ({**BASE, "timing": {"min_green": 5, "yelow": 3}}, "yelow"),
    ({**BASE, "geometry": {"lenght": 3}}, "lenght"),
    ({**BASE, "agent": {"config": {"gama": 0.9}}}, "gama"),
    ({**BASE, "agent": {"reward": "speed"}}, "agent.reward"),
    ({**BASE, "training": {"epochs": 3}}, "epochs"),
    ({**BASE, "seeds": []}, "seeds"),
    ({**BASE, "horizon": 50}, "horizon"),
    ({**BASE, "dt": "fast"}, "dt"),
])
def test_schema_errors_name_the_key(data, key):
    with pytest.raises(ScenarioError, match=key):
        parse_scenario(data)


def test_cli_reports_schema_errors(tmp_path, capsys):
    sc = _write(tmp_path, "bad.yaml", {**BASE, "bogus": 1})
    assert main(["simulate", sc]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["simulate", str(tmp_path / "missing.yaml")]) == 2


def test_scenario_defaults_and_topologies(tmp_path):
    sc = load_scenario(_write(tmp_path, "s.yaml", {"topology": {"kind": "grid", "rows": 2,
                                                                "cols": 3}}))
    assert sc.topology.label == "grid-2x3"
    assert len(sc.network().intersections) == 6
    assert sc.controller == "back-pressure" and sc.horizon == 3600 and sc.warmup == 300
