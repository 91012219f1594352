import filecmp
import json
import shutil

import numpy as np
import pandas as pd
import pytest

from quantcycle.cli import main
from quantcycle.config import load_config
from quantcycle.econometrics import is_psd
from quantcycle.fixture import FIXTURE_CONFIG, build_fixture, fixture_config_path, fixture_dir
from quantcycle.pipeline import STAGES, StageError, read_table, run_backtest, run_stage


def tree_diff(a, b):
    """Relative paths whose contents differ between two output trees."""
    out = []
    cmp = filecmp.dircmp(a, b)

    def walk(c, prefix):
        out.extend(prefix + n for n in c.left_only + c.right_only + c.diff_files + c.funny_files)
        for name, sub in c.subdirs.items():
            walk(sub, prefix + name + "/")
    walk(cmp, "")
    return out


def write_config(tmp_path, **changes):
    """Copy of the fixture config in ``tmp_path`` with data paths pointing at the bundled files."""
    raw = json.loads(json.dumps(FIXTURE_CONFIG))
    raw["data"] = {k: str(fixture_dir() / v) for k, v in raw["data"].items()}
    for dotted, value in changes.items():
        node = raw
        *head, last = dotted.split(".")
        for k in head:
            node = node.setdefault(k, {})
        if value is None:
            node.pop(last, None)
        else:
            node[last] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def backtest(tmp_path_factory):
    out = tmp_path_factory.mktemp("bt")
    assert main(["backtest", "--config", str(fixture_config_path()), "--out", str(out)]) == 0
    return out


def test_backtest_writes_every_stage(backtest):
    for stage in ("ingest", "fit", "rank", "views", "construct", "impact", "rebalance", "tca",
                  "attribute"):
        assert (backtest / stage).is_dir()
    report = json.loads((backtest / "report.json").read_text())
    assert report["metadata"]["seed"] == 7
    assert report["metadata"]["config_hash"] == load_config(fixture_config_path()).config_hash
    assert len(report["rebalances"]) > 5


def test_report_weights_sum_to_one(backtest):
    report = json.loads((backtest / "report.json").read_text())
    for r in report["rebalances"]:
        assert abs(sum(r["weights"].values()) - 1) < 1e-9
    held = read_table(backtest / "rebalance" / "holdings.csv")
    assets = [c for c in held.columns if c != "date"]
    assert np.abs(held[assets].to_numpy(float).sum(axis=1) - 1).max() < 1e-9


def test_emitted_covariances_symmetric_psd(backtest):
    cov = read_table(backtest / "fit" / "covariance.csv")
    assets = [c for c in cov.columns if c not in ("date", "asset")]
    for _, g in cov.groupby("date"):
        assert is_psd(g[assets].to_numpy(float))


def test_rank_one_row_per_date_and_asset(backtest):
    r = read_table(backtest / "rank" / "rankings.csv")
    sched = read_table(backtest / "ingest" / "schedule.csv")
    assert len(r) == len(sched) * 5
    assert not r.duplicated(["date", "asset"]).any()
    assert sorted(r.groupby("date")["rank"].apply(sorted).iloc[0]) == [1, 2, 3, 4, 5]


def test_json_and_csv_report_numbers_agree(backtest):
    report = json.loads((backtest / "report.json").read_text())
    summary = dict(pd.read_csv(backtest / "summary.csv", float_precision="round_trip").values)
    for k, v in report["attribution"]["risk_adjusted"].items():
        assert summary[f"risk_adjusted.{k}"] == v
    for k, v in report["tca"]["totals"].items():
        assert summary[f"tca.{k}"] == v


def test_brinson_totals_reconcile(backtest):
    att = json.loads((backtest / "attribute" / "attribution.json").read_text())
    assert sum(att["brinson_totals"].values()) == pytest.approx(att["gross_active_return"], abs=1e-12)


def test_same_seed_runs_are_byte_identical(backtest, tmp_path):
    assert main(["backtest", "--config", str(fixture_config_path()), "--out", str(tmp_path)]) == 0
    assert tree_diff(backtest, tmp_path) == []


def test_stage_by_stage_equals_backtest(backtest, tmp_path):
    for stage in STAGES:
        assert main([stage, "--config", str(fixture_config_path()), "--out", str(tmp_path)]) == 0
    assert tree_diff(backtest, tmp_path) == []


def test_seed_override_changes_only_seeded_outputs(backtest, tmp_path):
    assert main(["backtest", "--config", str(fixture_config_path()), "--out", str(tmp_path),
                 "--seed", "8"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["metadata"]["seed"] == 8
    # seed-free stages are untouched by the override
    assert filecmp.cmp(backtest / "construct" / "weights.csv", tmp_path / "construct" / "weights.csv",
                       shallow=False)


def test_no_view_construct_equals_cap_weights(tmp_path):
    cfg = write_config(tmp_path, **{"selection.auto_views": False, "black_litterman.views": []})
    out = tmp_path / "out"
    for stage in ("ingest", "fit-factors", "rank", "views", "construct"):
        assert main([stage, "--config", str(cfg), "--out", str(out)]) == 0
    w = read_table(out / "construct" / "weights.csv")
    caps = read_table(out / "ingest" / "cap_weights.csv")
    assert list(w["date"]) == list(caps["date"])
    assets = [c for c in w.columns if c != "date"]
    assert np.abs(w[assets].to_numpy(float) - caps[assets].to_numpy(float)).max() < 1e-9
    assert read_table(out / "views" / "views.csv").empty


def test_attribute_recovers_known_alpha(tmp_path):
    rng = np.random.default_rng(31)
    n, alpha, beta, rf = 250, 0.0004, 0.9, 0.0001
    m = rng.normal(0.0004, 0.01, n)
    p = rf + alpha + beta * (m - rf) + rng.normal(0, 0.004, n)
    perf = tmp_path / "performance.csv"
    pd.DataFrame({"date": pd.date_range("2022-01-03", periods=n).strftime("%Y-%m-%d"),
                  "portfolio_return": p, "benchmark_return": m, "risk_free": rf}).to_csv(
        perf, index=False, float_format="%.17g")
    cfg = write_config(tmp_path, **{"data.performance": str(perf)})
    out = tmp_path / "out"
    assert main(["attribute", "--config", str(cfg), "--out", str(out)]) == 0
    ra = json.loads((out / "attribute" / "attribution.json").read_text())["risk_adjusted"]
    assert abs(ra["jensen_alpha"] - alpha) < 3 * ra["alpha_standard_error"]
    assert abs(ra["beta"] - beta) < 0.05
    assert (out / "report.json").exists()


def test_stage_needs_earlier_artifacts(tmp_path, capsys):
    assert main(["construct", "--config", str(fixture_config_path()), "--out", str(tmp_path)]) == 1
    assert "run the 'ingest' stage first" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    raw = json.loads(json.dumps(FIXTURE_CONFIG))
    raw["rebalance"]["bandwidth"] = 0.1
    shutil.copytree(fixture_dir(), tmp_path / "fx")
    (tmp_path / "fx" / "config.json").write_text(json.dumps(raw))
    assert main(["backtest", "--config", str(tmp_path / "fx" / "config.json"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "rebalance" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["rank"], ["rank", "--config", "missing.json"],
                                  ["backtest", "--config", "x", "--stage", "nope"],
                                  ["rank", "--config", "x", "--seed", "-1"]])
def test_usage_errors_exit_1(argv):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_non_convergence_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, **{"rebalance.policy": "dp",
                                    "rebalance.dp": {"grid": 3, "max_iterations": 1}})
    code = main(["backtest", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "rebalance" in capsys.readouterr().err


def test_degenerate_performance_exits_2(tmp_path):
    perf = tmp_path / "performance.csv"
    perf.write_text("date,portfolio_return,benchmark_return\n" +
                    "".join(f"2022-01-{d:02d},0.00{d % 3},0.001\n" for d in range(1, 11)))
    cfg = write_config(tmp_path, **{"data.performance": str(perf)})
    assert main(["attribute", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_stage_error_carries_stage_and_cause(tmp_path):
    cfg = load_config(write_config(tmp_path, **{"rebalance.policy": "dp",
                                                "rebalance.dp": {"grid": 3, "max_iterations": 1}}))
    with pytest.raises(StageError) as exc:
        run_backtest(cfg, tmp_path / "o")
    assert exc.value.stage == "rebalance"
    assert exc.value.cause is not None


def test_stop_after_stage(tmp_path):
    cfg = load_config(fixture_config_path())
    run_backtest(cfg, tmp_path, "rank")
    assert (tmp_path / "rank" / "rankings.csv").exists()
    assert not (tmp_path / "views").exists()
    with pytest.raises(Exception):
        run_stage("nonsense", cfg, tmp_path)


def test_dp_policy_runs_end_to_end(tmp_path):
    cfg = write_config(tmp_path, **{"rebalance.policy": "dp"})
    assert main(["backtest", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    cmp = pd.read_csv(tmp_path / "o" / "rebalance" / "policy_comparison.csv")
    assert list(cmp["policy"]) == ["periodic", "band", "trigger", "dp"]


def test_bundled_fixture_matches_generator(tmp_path):
    build_fixture(tmp_path)
    for f in sorted(fixture_dir().iterdir()):
        if f.is_file():
            assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name
