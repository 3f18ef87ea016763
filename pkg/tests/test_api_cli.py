from __future__ import annotations

import json
import shutil

import pandas as pd
import pytest

import photostep_cli
from photostep_core import api
from photostep_core.exceptions import ConfigError
from photostep_core.helpers import read_json

SMALL_GRID = {"fluorophores": "1..4", "mu_f": 1000, "snr": 1.0, "p_AP": 0.01, "replicates": 10}
FAST_SAMPLER = "[Sampler]\nn_iter = 200\nmax_iter = 200\nextension = 100\nn_chains = 2\n"


@pytest.fixture
def grid_file(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(SMALL_GRID), encoding="utf-8")
    return path


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.ini"
    path.write_text(FAST_SAMPLER, encoding="utf-8")
    return path


# --- Settings and Grids ---


def test_grid_ranges_expand():
    combos, replicates = api.expand_sim_grid(SMALL_GRID)
    assert replicates == 10
    assert [c["n_fluorophores"] for c in combos] == [1, 2, 3, 4]
    assert all(c["mu_f_photons"] == 1000 for c in combos)


@pytest.mark.parametrize(
    "grid",
    [
        {"fluorophores": "one..four"},
        {"colour": [1, 2]},
        {"fluorophores": 1, "replicates": 0},
        {"fluorophores": 1, "n_fluorophores": 2},
    ],
)
def test_bad_grids(grid):
    with pytest.raises(ConfigError):
        api.expand_sim_grid(grid)


def test_max_iter_below_n_iter_caps_the_initial_run(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[Sampler]\nn_iter = 500\n", encoding="utf-8")
    settings = api.load_settings(path, max_iter=100, seed=7)
    assert settings.chain.n_iter == 100
    assert settings.chain.max_iter == 100
    assert settings.chain.seed == 7


def test_invalid_settings_are_config_errors(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[Sampler]\nn_chains = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        api.load_settings(path)
    path.write_text("[Hyperparams]\nweighting = flat\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        api.load_settings(path)


def test_group_lookup_order(hyper):
    doc = {"groups": {"mu1000_snr1": hyper, "other": hyper}, "members": {"odd_name": "other"}}
    assert api.hyper_for_trace("odd_name", doc) is hyper
    assert api.hyper_for_trace("mu1000_snr1_0003", doc) is hyper
    with pytest.raises(ConfigError):
        api.hyper_for_trace("mu500_snr1_0000", doc)
    assert api.hyper_for_trace("anything", {"groups": {"g": hyper}, "members": {}}) is hyper


def test_trace_group():
    assert api.trace_group("mu1000_snr0.1_0007") == "mu1000_snr0.1"
    assert api.trace_group("plain") == "plain"


# --- simulate ---


def test_simulate_writes_one_pool_per_grid(tmp_path, grid_file):
    out = tmp_path / "sim"
    assert photostep_cli.main(["--out", str(out), "--seed", "3", "simulate", "--grid", str(grid_file)]) == 0
    csvs = sorted(out.glob("*.csv"))
    assert len(csvs) == 40
    assert len(list(out.glob("*.truth.json"))) == 40
    assert csvs[0].name == "mu1000_snr1_0000.csv"
    manifest = read_json(out / "manifest.json")
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 3
    assert len(manifest["outputs"]) == 80


def test_simulate_is_reproducible(tmp_path, grid_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert photostep_cli.main(["--out", str(out), "--seed", "5", "simulate", "--grid", str(grid_file)]) == 0
    for path in sorted(a.glob("*.csv")) + sorted(a.glob("*.truth.json")):
        assert path.read_bytes() == (b / path.name).read_bytes()


def test_malformed_grid_exits_nonzero(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text('{"fluorophores": "1..",}', encoding="utf-8")
    assert photostep_cli.main(["--out", str(tmp_path / "sim"), "simulate", "--grid", str(grid)]) == 1


# --- hyperparams ---


def test_pooling_a_single_trace_keeps_its_estimate(tmp_path, grid_file):
    sim = tmp_path / "sim"
    api.simulate_pool(sim, grid_path=grid_file, seed=1)
    out = tmp_path / "hyper.json"
    code = photostep_cli.main(["--out", str(out), "hyperparams", str(sim / "mu1000_snr1_0000.csv")])
    assert code == 0
    doc = read_json(out)
    assert list(doc["groups"]) == ["mu1000_snr1"]
    estimate = doc["estimates"]["mu1000_snr1_0000"]
    pooled = doc["groups"]["mu1000_snr1"]
    assert pooled["eta_f"] == pytest.approx(estimate["eta_f_hat"], rel=1e-12)
    assert pooled["beta_b"] == pytest.approx(estimate["beta_b_hat"], rel=1e-12)
    assert (tmp_path / "hyper.manifest.json").exists()


def test_tag_pools_everything_into_one_group(tmp_path, grid_file):
    sim = tmp_path / "sim"
    api.simulate_pool(sim, grid_path=grid_file, seed=1)
    out = tmp_path / "hyper.json"
    settings = api.load_settings(None)
    result = api.estimate_hyperparams(str(sim / "*_000[0-1].csv"), out, settings, tag="batch")
    assert result["groups"] == ["batch"]
    assert result["n_traces"] == 2
    loaded = api.load_hyperparams(out)
    assert set(loaded["members"].values()) == {"batch"}


def test_missing_hyper_file_exits_nonzero(tmp_path, grid_file):
    sim = tmp_path / "sim"
    api.simulate_pool(sim, grid_path=grid_file, seed=1)
    argv = ["--out", str(tmp_path / "res"), "analyze", str(sim / "*.csv"), "--hyper", str(tmp_path / "absent.json")]
    assert photostep_cli.main(argv) == 1


def test_empty_glob_exits_nonzero(tmp_path):
    argv = ["--out", str(tmp_path / "res"), "analyze", str(tmp_path / "nothing" / "*.csv")]
    assert photostep_cli.main(argv) == 1


# --- analyze ---


def test_analysis_does_not_depend_on_worker_count(tmp_path, grid_file, fast_config):
    sim = tmp_path / "sim"
    api.simulate_pool(sim, grid={"fluorophores": 1, "mu_f": 1000, "snr": 1.0, "p_AP": 0.01, "replicates": 2}, seed=2)
    docs = {}
    for workers in (1, 2):
        out = tmp_path / f"res{workers}"
        argv = ["--config", str(fast_config), "--workers", str(workers), "--out", str(out), "analyze", str(sim / "*.csv")]
        assert photostep_cli.main(argv) == 0
        docs[workers] = {p.name: read_json(p) for p in sorted(out.glob("*.summary.json"))}
    assert len(docs[1]) == 2
    assert docs[1] == docs[2]
    summary = next(iter(docs[1].values()))
    assert summary["n_iterations"] == 200
    assert {"modal_k", "frame_counts", "convergence", "acceptance"} <= set(summary)


def test_analysis_can_keep_every_sample(tmp_path, grid_file, fast_config):
    sim = tmp_path / "sim"
    api.simulate_pool(sim, grid={"fluorophores": 2, "mu_f": 1000, "snr": 1.0, "p_AP": 0.01, "replicates": 1}, seed=4)
    out = tmp_path / "res"
    argv = ["--config", str(fast_config), "--workers", "1", "--out", str(out), "analyze", str(sim / "*.csv"), "--samples"]
    assert photostep_cli.main(argv) == 0
    samples = pd.read_csv(next(out.glob("*.samples.csv")))
    assert len(samples) == 2 * 200
    assert set(samples["chain"]) == {0, 1}
    assert read_json(out / "manifest.json")["command"] == "analyze"


# --- metrics ---


def test_truth_scored_against_itself_is_perfect(tmp_path, grid_file):
    sim = tmp_path / "sim"
    api.simulate_pool(sim, grid_path=grid_file, seed=1)
    out = tmp_path / "metrics.csv"
    assert photostep_cli.main(["--out", str(out), "metrics", str(sim), str(sim)]) == 0
    frame = pd.read_csv(out)
    traces = frame[~frame["trace_id"].isin(["mean", "ci95", "n"])]
    assert len(traces) == 40
    assert (traces["rmse_intensity"] == 0).all()
    assert (traces["accuracy"] == 1).all()
    assert (tmp_path / "metrics.manifest.json").exists()


def test_orphan_trace_ids_exit_nonzero(tmp_path, grid_file):
    sim = tmp_path / "sim"
    api.simulate_pool(sim, grid_path=grid_file, seed=1)
    partial = tmp_path / "partial"
    partial.mkdir()
    for path in sorted(sim.glob("*.truth.json"))[:5]:
        shutil.copy(path, partial / path.name)
    assert photostep_cli.main(["--out", str(tmp_path / "m.csv"), "metrics", str(partial), str(sim)]) == 1


@pytest.mark.slow
def test_low_snr_pool_meets_the_acceptance_bar(tmp_path):
    sim = tmp_path / "sim"
    grid = {"fluorophores": "1..4", "mu_f": 1000, "snr": 0.1, "p_AP": 0.005, "replicates": 3}
    api.simulate_pool(sim, grid=grid, seed=11)
    config = tmp_path / "acceptance.ini"
    config.write_text("[Sampler]\nn_iter = 3000\nmax_iter = 6000\nextension = 1000\nn_chains = 3\n", encoding="utf-8")
    settings = api.load_settings(config, seed=5)
    hyper_path = tmp_path / "hyper.json"
    api.estimate_hyperparams(str(sim / "*.csv"), hyper_path, settings)
    res = tmp_path / "res"
    api.analyze_traces(str(sim / "*.csv"), res, settings, hyper_path=hyper_path, workers=2)
    result = api.compute_metrics(res, sim, tmp_path / "metrics.csv")
    assert result["n_traces"] == 12
    assert result["mean"]["accuracy"] >= 0.95
    assert result["mean"]["precision"] >= 0.90
    assert result["mean"]["rmse_intensity"] <= 150.0
