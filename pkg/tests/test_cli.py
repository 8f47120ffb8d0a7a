import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest
import yaml

from jointplan.cli import EXIT_CONFIG, EXIT_OK, main
from jointplan.energy import EnergyWeights, default_weights
from jointplan.learning.corpus import generate_corpus
from jointplan.sim.episode import EpisodeTrace

from conftest import random_mrf, random_tree_edges


def write_config(tmp_path, **d):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(dict({"out": "out"}, **d)))
    return str(p)


def write_mrf(path, mrf):
    d = {"unary": mrf.log_unary.tolist(),
         "pairwise": [{"i": i, "j": j, "potential": v.tolist()} for (i, j), v in mrf.log_pairwise.items()]}
    path.write_text(json.dumps(d))
    return str(path)


def report_values(text, column):
    """Numeric column of the per-node TV table printed by infer."""
    m = re.search(r"^\s*node\s+tv$(.*?)^max_tv", text, re.S | re.M)
    return np.array([float(ln.split()[column]) for ln in m.group(1).strip().splitlines()])


@pytest.fixture(scope="module")
def boxed_traces(tmp_path_factory):
    d = tmp_path_factory.mktemp("boxed")
    cfg = d / "c.yaml"
    cfg.write_text(yaml.safe_dump({"scenario": {"builtin": "boxed_in"}, "mode": "both", "out": "o"}))
    assert main(["run", "--config", str(cfg)]) == EXIT_OK
    return d / "o"


def test_run_writes_traces_and_summaries(tmp_path, capsys):
    cfg = write_config(tmp_path, scenario={"builtin": "empty_road"}, seed=list(range(10)))
    assert main(["run", "--config", cfg]) == EXIT_OK
    traces = sorted((tmp_path / "out").glob("trace_*.jsonl"))
    assert len(traces) == 10
    seeds = {EpisodeTrace.read(p).header["seed"] for p in traces}
    assert seeds == set(range(10))
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 10 and all(json.loads(ln)["outcome"] == "goal_reached" for ln in lines)
    summary = (tmp_path / "out" / "summary.jsonl").read_text().splitlines()
    assert json.loads(summary[0])["episodes"] == 10 and len(summary) == 11


def test_missing_scenario_names_the_path(tmp_path, capsys):
    cfg = write_config(tmp_path, scenario="nowhere/merge.yaml")
    assert main(["run", "--config", cfg]) == EXIT_CONFIG
    assert "nowhere/merge.yaml" in capsys.readouterr().err


def test_bad_configs_exit_nonzero(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG
    assert main(["run", "--config", write_config(tmp_path, mode="greedy")]) == EXIT_CONFIG
    assert main(["run", "--config", write_config(tmp_path, sede=3)]) == EXIT_CONFIG
    (tmp_path / "broken.yaml").write_text("mode: [unclosed\n")
    assert main(["run", "--config", str(tmp_path / "broken.yaml")]) == EXIT_CONFIG
    assert main(["run", "--config", write_config(tmp_path, weights="w.txt")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "sede" in err and "w.txt" in err
    with pytest.raises(SystemExit) as e:
        main(["teleport"])
    assert e.value.code == EXIT_CONFIG


def test_config_from_environment(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, scenario={"builtin": "empty_road"}, mode="non_interactive")
    monkeypatch.setenv("JOINTPLAN_CONFIG", cfg)
    assert main(["run"]) == EXIT_OK
    assert [p.name for p in (tmp_path / "out").glob("trace_*")] == ["trace_non_interactive_seed0.jsonl"]


def test_eval_empty_road_csv(tmp_path, capsys):
    cfg = write_config(tmp_path, scenario={"builtin": "empty_road"}, mode="both")
    assert main(["eval", "--config", cfg]) == EXIT_OK
    with open(tmp_path / "out" / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["mode"] for r in rows] == ["interactive", "non_interactive"]
    assert all(float(r["SR"]) == 1.0 and r["schema_version"] == "1" for r in rows)
    assert {"RL", "collisions", "timeouts", "mean_planning_time_s"} <= set(rows[0])
    assert "interactive" in capsys.readouterr().out


def test_infer_tree_fixture_tv_below_tolerance(tmp_path, capsys):
    rng = np.random.default_rng(11)
    path = write_mrf(tmp_path / "tree.json", random_mrf(rng, 5, 4, random_tree_edges(rng, 5), scale=2.0))
    assert main(["infer", "--config", write_config(tmp_path), path]) == EXIT_OK
    out = capsys.readouterr().out
    assert "lbp_converged=True" in out
    assert np.all(report_values(out, 1) < 1e-9)


def test_infer_triangle_fixture_reports_tv(tmp_path, capsys):
    path = str(Path(__file__).parent / "fixtures" / "exact_seed7.json")
    assert main(["infer", "--config", write_config(tmp_path), path]) == EXIT_OK
    tv = report_values(capsys.readouterr().out, 1)
    assert len(tv) == 3 and np.all(tv <= 0.05)


def test_infer_oversized_is_lbp_only(tmp_path, capsys):
    rng = np.random.default_rng(12)
    path = write_mrf(tmp_path / "big.json", random_mrf(rng, 8, 6, [(i, i + 1) for i in range(7)]))
    assert main(["infer", "--config", write_config(tmp_path), path]) == EXIT_OK
    out = capsys.readouterr().out
    assert "exact marginals skipped" in out and "max_tv" not in out
    assert len([ln for ln in out.splitlines() if re.match(r"^\s*\d+\s+\d+\s+\S+$", ln)]) == 48


def test_infer_malformed_fixture(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"unary": [[0.0, 1.0]], "pairwise": [{"i": 0}]}))
    assert main(["infer", "--config", write_config(tmp_path), str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert main(["infer", "--config", write_config(tmp_path)]) == EXIT_CONFIG


def test_fit_without_episodes_fails(tmp_path, boxed_traces):
    assert main(["fit", "--config", write_config(tmp_path)]) == EXIT_CONFIG
    # five ticks are shorter than one planning horizon
    tr = EpisodeTrace.read(boxed_traces / "trace_interactive_seed0.jsonl")
    short = EpisodeTrace(tr.header, tr.ticks[:5], tr.summary)
    short.write(tmp_path / "short.jsonl")
    assert main(["fit", "--config", write_config(tmp_path), str(tmp_path / "short.jsonl")]) == EXIT_CONFIG


def test_fit_zero_steps_returns_init(tmp_path, boxed_traces):
    cfg = write_config(tmp_path, fit={"traces": [str(boxed_traces / "trace_*.jsonl")], "options": {"steps": 0}})
    assert main(["fit", "--config", cfg]) == EXIT_OK
    w = EnergyWeights.from_text((tmp_path / "out" / "weights.txt").read_text())
    np.testing.assert_array_equal(w.w, default_weights().w)


def test_fit_reduces_loss_and_checks_gradient(tmp_path, boxed_traces, capsys):
    cfg = write_config(tmp_path, fit={"traces": [str(boxed_traces / "trace_interactive_seed0.jsonl")], "stride": 4,
                                      "options": {"steps": 5}})
    assert main(["fit", "--config", cfg, "--gradient-check"]) == EXIT_OK
    out = capsys.readouterr().out
    err = float(re.search(r"max relative error (\S+)", out).group(1))
    assert err < 1e-4
    with open(tmp_path / "out" / "loss_curve.csv") as f:
        loss = [float(r["loss"]) for r in csv.DictReader(f)]
    assert len(loss) == 6 and loss[-1] < loss[0]


def test_distill_small_corpus(tmp_path, capsys):
    (tmp_path / "corpus").mkdir()
    (tmp_path / "corpus" / "corpus.jsonl").write_text(generate_corpus(seed=3, teacher_pool=4, split_pool=10).to_jsonl())
    cfg = write_config(tmp_path, distill={"corpus": "corpus", "splits": 2, "train": 3, "test": 4,
                                          "options": {"steps": 2}, "teacher_options": {"steps": 2}})
    assert main(["distill", "--config", cfg]) == EXIT_OK
    out = capsys.readouterr().out
    assert re.search(r"distillation helped in \d of 2 splits", out)
    with open(tmp_path / "out" / "distill.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["split_seed"] for r in rows] == ["0", "1"]
    assert (tmp_path / "out" / "teacher_weights.txt").is_file()


def test_distill_lambda_zero_matches_undistilled(tmp_path, capsys):
    (tmp_path / "corpus").mkdir()
    (tmp_path / "corpus" / "corpus.jsonl").write_text(generate_corpus(seed=4, teacher_pool=3, split_pool=8).to_jsonl())
    cfg = write_config(tmp_path, distill={"corpus": "corpus", "splits": 1, "train": 3, "test": 3,
                                          "lambdas": {"distill": 0.0}, "options": {"steps": 3},
                                          "teacher_options": {"steps": 2}})
    assert main(["distill", "--config", cfg]) == EXIT_OK
    with open(tmp_path / "out" / "distill.csv") as f:
        (row,) = list(csv.DictReader(f))
    assert row["undistilled"] == row["distilled"]


def test_plot_frames(tmp_path, boxed_traces, capsys):
    tr = EpisodeTrace.read(boxed_traces / "trace_interactive_seed0.jsonl")
    ten = EpisodeTrace(tr.header, tr.ticks[:10], tr.summary)
    ten.write(tmp_path / "ten.jsonl")
    assert main(["plot", "--config", write_config(tmp_path), str(tmp_path / "ten.jsonl")]) == EXIT_OK
    frames = sorted((tmp_path / "out").glob("frame_*.svg"))
    assert len(frames) == 10
    for tick, f in zip(ten.ticks, frames):
        svg = f.read_text()
        expected = sum(p > 0.1 for pred in tick["predictions"] for _, p in pred["top"])
        assert svg.count('class="prediction"') == expected
        assert svg.count('class="agent"') == len(tick["agents"])


def test_plot_empty_and_malformed(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["plot", "--config", write_config(tmp_path), str(tmp_path / "empty.jsonl")]) == EXIT_OK
    assert "0 frames" in capsys.readouterr().out
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    assert main(["plot", "--config", write_config(tmp_path), str(tmp_path / "bad.jsonl")]) != EXIT_OK
    assert main(["plot", "--config", write_config(tmp_path), str(tmp_path / "none.jsonl")]) != EXIT_OK
