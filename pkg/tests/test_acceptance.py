"""
End-to-end behaviour on grid scenarios.

The slow cases (zone recovery over 20 seeds, the p ~ 13k path, the default
simulation study) are deselected by default; run them with `pytest -m slow`.
"""

import json
import logging
import statistics
import time

import numpy as np
import pandas as pd
import pytest

from graphseg.cli import EXIT_OK, main
from graphseg.segment import ArConfig, extract_zones, run_path
from graphseg.sim import ExperimentSpec, generate_grid_scenario, lattice_graph, run_experiment
from graphseg.sparse import SparseSym

logger = logging.getLogger(__name__)


def test_unpenalized_path_returns_data():
    g = lattice_graph(25, 40)
    x = np.random.default_rng(8).normal(size=1000) * 4
    path = run_path(x, SparseSym.identity(1000), g, [0.0])
    record = path.records[0]
    assert np.max(np.abs(record.theta - x)) <= 1e-8 * np.max(np.abs(x))
    assert record.effective_dim == pytest.approx(1000, abs=1e-6)
    assert not record.gcv_defined


def test_full_fusion_single_zone():
    g = lattice_graph(10, 10)
    x = np.random.default_rng(9).poisson(10, size=100).astype(float)
    path = run_path(x, SparseSym.identity(100), g, [1e9])
    record = path.records[0]
    assert record.zone_count == 1
    assert np.max(np.abs(record.theta - x.mean())) <= 1e-4 * (x.max() - x.min())
    assert record.effective_dim <= 1.1


def test_refit_matches_zone_means():
    scenario, x = generate_grid_scenario(12, 12, 6, 6, sigma=0.2, seed=21)
    prec = SparseSym.identity(144, 25.0)
    path = run_path(x, prec, scenario.graph, np.geomspace(0.01, 10, 15))
    record = path.records[path.selected["bic"]]
    segmentation = extract_zones(scenario.graph, record.state(), refit=True, x=x, prec=prec)
    for zone in range(segmentation.zone_count):
        members = segmentation.zone_id == zone
        assert segmentation.zone_values[zone] == pytest.approx(x[members].mean(), rel=1e-10)


@pytest.mark.slow
def test_zone_recovery_over_seeds():
    ari, ratio = [], []
    start = time.perf_counter()
    for seed in range(20):
        result = run_experiment(ExperimentSpec(sigmas=[0.5], seed=seed, criteria=["aic"]))
        row = result.table().iloc[0]
        ari.append(row["ari"])
        ratio.append(row["zones_est"] / row["zones_true"])
    elapsed = time.perf_counter() - start
    logger.info(f"median ARI {statistics.median(ari):.3f}, median zone ratio "
                f"{statistics.median(ratio):.2f}, {elapsed:.1f}s")
    assert statistics.median(ari) >= 0.80
    assert statistics.median(ratio) <= 3.0


@pytest.mark.slow
def test_large_grid_path_completes():
    rows = cols = 114
    scenario, x = generate_grid_scenario(rows, cols, 19, 19, sigma=0.5, seed=2)
    prec = SparseSym.identity(rows * cols, 4.0)
    cfg = ArConfig(tol=1e-6, trace_mode="stochastic", probes=8)
    start = time.perf_counter()
    path = run_path(x, prec, scenario.graph, np.geomspace(1e-3 * 0.25, 1e3 * 0.25, 50), cfg)
    logger.info(f"p={rows * cols}: 50 penalties in {time.perf_counter() - start:.1f}s, "
                f"{path.total_iterations} iterations")
    assert not path.partial
    assert all(r.converged for r in path.records)


@pytest.mark.slow
def test_default_simulation_study(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["simulate", "--out", str(tmp_path / "b")]) == EXIT_OK
    a = pd.read_csv(tmp_path / "a" / "experiment.csv")
    b = pd.read_csv(tmp_path / "b" / "experiment.csv")
    assert len(a) == 12
    assert a["criterion"].tolist() == ["aic", "bic", "gcv", "min_rmse"] * 3
    pd.testing.assert_frame_equal(a.drop(columns=["seconds"]), b.drop(columns=["seconds"]))
    for sigma in ("0.1", "0.5", "1"):
        document = json.loads((tmp_path / "a" / f"map_sigma_{sigma}.geojson").read_text())
        assert len(document["features"]) == 400
        assert len(pd.read_csv(tmp_path / "a" / f"curves_sigma_{sigma}.csv")) == 50
