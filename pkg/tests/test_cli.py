"""End-to-end tests for the `graphseg` command line."""

import json

import numpy as np
import pandas as pd
import pytest

from graphseg.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, build_parser, main, segment_main
from graphseg.sim import lattice_graph


@pytest.fixture
def lattice_inputs(tmp_path):
    """A 6x6 lattice with a left and a right zone, as edge list and values CSVs."""
    g = lattice_graph(6, 6)
    rng = np.random.default_rng(5)
    x = np.where(np.arange(36) % 6 < 3, 2.0, 8.0) + rng.normal(scale=0.3, size=36)
    edges = pd.DataFrame({"src": [f"v{j}" for j in g.edges[:, 0]], "dst": [f"v{k}" for k in g.edges[:, 1]]})
    values = pd.DataFrame({"id": [f"v{i}" for i in range(36)], "value": x})
    edges.to_csv(tmp_path / "edges.csv", index=False)
    values.to_csv(tmp_path / "values.csv", index=False)
    return tmp_path / "edges.csv", tmp_path / "values.csv"


def records_without_timing(out):
    summary = json.loads((out / "path.json").read_text())
    for record in summary["records"]:
        record.pop("wall_time")
    return summary


def segment(inputs, out, *flags):
    graph, values = inputs
    return main(["segment", "--graph", str(graph), "--values", str(values), "--out", str(out), *flags])


class TestParser:
    def test_unset_flags_are_absent(self):
        args = build_parser().parse_args(["segment", "--values", "v.csv"])
        assert "criterion" not in args
        assert "epsilon" not in args

    def test_graph_sources_are_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["segment", "--graph", "g.csv", "--geojson", "g.geojson"])


class TestSegment:
    def test_fifty_penalties(self, lattice_inputs, tmp_path, capsys):
        out = tmp_path / "run"
        code = segment(lattice_inputs, out, "--lambda-min", "1e-3", "--lambda-max", "1e3",
                       "--lambda-count", "50", "--criterion", "aic")
        assert code == EXIT_OK
        summary = json.loads((out / "path.json").read_text())
        assert len(summary["records"]) == 50
        assert summary["criterion"] == "aic"
        stdout = capsys.readouterr().out
        assert "selected lambda" in stdout
        assert "zones: " in stdout
        frame = pd.read_csv(out / "segmentation.csv")
        assert sorted(frame["id"]) == sorted(f"v{i}" for i in range(36))

    def test_criterion_is_a_view_over_the_path(self, lattice_inputs, tmp_path):
        flags = ("--lambda-count", "12")
        assert segment(lattice_inputs, tmp_path / "aic", *flags) == EXIT_OK
        assert segment(lattice_inputs, tmp_path / "bic", *flags, "--criterion", "bic") == EXIT_OK
        aic = records_without_timing(tmp_path / "aic")
        bic = records_without_timing(tmp_path / "bic")
        assert aic["records"] == bic["records"]
        assert aic["selected"] == bic["selected"]
        assert bic["criterion"] == "bic"

    def test_deterministic_bundle(self, lattice_inputs, tmp_path):
        segment(lattice_inputs, tmp_path / "one", "--lambda-count", "8")
        segment(lattice_inputs, tmp_path / "two", "--lambda-count", "8")
        assert records_without_timing(tmp_path / "one") == records_without_timing(tmp_path / "two")
        for name in ("segmentation.csv", "cut_edges.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_missing_file(self, lattice_inputs, tmp_path, capsys):
        graph, _ = lattice_inputs
        out = tmp_path / "never"
        code = main(["segment", "--graph", str(graph), "--values", str(tmp_path / "absent.csv"),
                     "--out", str(out)])
        assert code == EXIT_INVALID
        assert not out.exists()
        assert "graphseg: error" in capsys.readouterr().err

    def test_config_file_with_flag_override(self, lattice_inputs, tmp_path):
        graph, values = lattice_inputs
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"graph": str(graph), "values": str(values), "criterion": "gcv",
                                      "lambda-count": 6, "out": str(tmp_path / "from-config")}))
        code = main(["segment", "--config", str(config), "--lambda-count", "4"])
        assert code == EXIT_OK
        summary = json.loads((tmp_path / "from-config" / "path.json").read_text())
        assert len(summary["records"]) == 4
        assert summary["criterion"] == "gcv"

    def test_explicit_lambdas_and_refit(self, lattice_inputs, tmp_path):
        out = tmp_path / "run"
        assert segment(lattice_inputs, out, "--lambdas", "0", "0.5", "5", "--refit") == EXIT_OK
        summary = json.loads((out / "path.json").read_text())
        assert [r["lambda"] for r in summary["records"]] == [0.0, 0.5, 5.0]

    def test_descending_lambdas_rejected(self, lattice_inputs, tmp_path):
        assert segment(lattice_inputs, tmp_path / "run", "--lambdas", "5", "1") == EXIT_INVALID

    def test_stochastic_trace(self, lattice_inputs, tmp_path):
        out = tmp_path / "run"
        assert segment(lattice_inputs, out, "--lambda-count", "5", "--trace", "stochastic",
                       "--probes", "16", "--seed", "3") == EXIT_OK
        summary = json.loads((out / "path.json").read_text())
        assert all(r["effective_dim_stderr"] is not None for r in summary["records"])

    def test_indefinite_precision_is_numerical_failure(self, lattice_inputs, tmp_path, capsys):
        mtx = tmp_path / "p.mtx"
        entries = "".join(f"{i} {i} -1.0\n" for i in range(1, 37))
        mtx.write_text(f"%%MatrixMarket matrix coordinate real symmetric\n36 36 36\n{entries}")
        code = segment(lattice_inputs, tmp_path / "run", "--precision", str(mtx), "--lambdas", "0.1", "1")
        assert code == EXIT_NUMERICAL
        assert "graphseg:" in capsys.readouterr().err

    def test_segment_script(self, lattice_inputs, tmp_path):
        graph, values = lattice_inputs
        code = segment_main(["--graph", str(graph), "--values", str(values), "--lambda-count", "3",
                             "--out", str(tmp_path / "run")])
        assert code == EXIT_OK


def write_lattices(directory, prefixes, offsets):
    """Disjoint 4x4 lattices, one per prefix, with a two-level signal on each."""
    g = lattice_graph(4, 4)
    rng = np.random.default_rng(17)
    edges, values = [], []
    for prefix, offset in zip(prefixes, offsets):
        edges += [(f"{prefix}{j:02d}", f"{prefix}{k:02d}") for j, k in g.edges]
        x = offset + np.where(np.arange(16) % 4 < 2, 1.0, 4.0) + rng.normal(scale=0.2, size=16)
        values += [(f"{prefix}{i:02d}", v) for i, v in enumerate(x)]
    directory.mkdir()
    pd.DataFrame(edges, columns=["src", "dst"]).to_csv(directory / "edges.csv", index=False)
    pd.DataFrame(values, columns=["id", "value"]).to_csv(directory / "values.csv", index=False)
    return directory / "edges.csv", directory / "values.csv"


class TestDisconnected:
    def test_components_fitted_separately(self, tmp_path, capsys):
        flags = ("--lambdas", "0.01", "0.1", "1", "10", "100")
        both = write_lattices(tmp_path / "both", ["a", "b"], [0.0, 20.0])
        assert segment(both, tmp_path / "joint", *flags) == EXIT_OK
        assert "fitted separately" in capsys.readouterr().out
        summary = json.loads((tmp_path / "joint" / "path.json").read_text())
        assert [c["component"] for c in summary["components"]] == [0, 1]
        assert summary["components"][0]["ids"] == [f"a{i:02d}" for i in range(16)]

        alone = write_lattices(tmp_path / "alone", ["a"], [0.0])
        assert segment(alone, tmp_path / "single", *flags) == EXIT_OK
        single = records_without_timing(tmp_path / "single")
        first = summary["components"][0]
        for record in first["records"]:
            record.pop("wall_time")
        assert first["records"] == single["records"]
        assert first["selected"] == single["selected"]

        frame = pd.read_csv(tmp_path / "joint" / "segmentation.csv")
        assert len(frame) == 32
        a_zones = set(frame.loc[frame["id"].str.startswith("a"), "zone"])
        b_zones = set(frame.loc[frame["id"].str.startswith("b"), "zone"])
        assert not a_zones & b_zones
        criteria = pd.read_csv(tmp_path / "joint" / "criteria.csv")
        assert criteria["component"].tolist() == [0] * 5 + [1] * 5

    def test_bridge_fits_one_path(self, tmp_path):
        graph, values = write_lattices(tmp_path / "both", ["a", "b"], [0.0, 20.0])
        centroids = pd.DataFrame({"id": [f"{p}{i:02d}" for p in "ab" for i in range(16)],
                                  "x": [i % 4 + (10 if p == "b" else 0) for p in "ab" for i in range(16)],
                                  "y": [i // 4 for p in "ab" for i in range(16)]})
        centroids.to_csv(tmp_path / "centroids.csv", index=False)
        out = tmp_path / "run"
        code = main(["segment", "--graph", str(graph), "--values", str(values), "--centroids",
                     str(tmp_path / "centroids.csv"), "--bridge", "--lambdas", "0.1", "1", "--out", str(out)])
        assert code == EXIT_OK
        summary = json.loads((out / "path.json").read_text())
        assert "components" not in summary
        assert len(summary["bridge_edges"]) == 1


def write_spec(tmp_path, **overrides):
    data = {"rows": 6, "cols": 6, "zone_rows": 3, "zone_cols": 3, "sigmas": [0.2, 0.5], "seed": 4,
            "lambda": {"min": 1e-3, "max": 1e2, "count": 8}}
    data.update(overrides)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(data))
    return path


class TestSimulate:
    def test_table_and_maps(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--spec", str(write_spec(tmp_path)), "--out", str(out)]) == EXIT_OK
        table = pd.read_csv(out / "experiment.csv")
        assert len(table) == 8
        assert table["criterion"].tolist()[-1] == "min_rmse"
        assert list(table.columns[:11]) == ["sigma", "criterion", "lambda", "rmse", "rand", "ari",
                                            "zones_est", "zones_true", "model_dim", "iters", "seconds"]
        for sigma in ("0.2", "0.5"):
            document = json.loads((out / f"map_sigma_{sigma}.geojson").read_text())
            assert len(document["features"]) == 36
            assert "zone_aic" in document["features"][0]["properties"]
            curves = pd.read_csv(out / f"curves_sigma_{sigma}.csv")
            assert len(curves) == 8
            assert {"lambda", "rmse", "ari", "zones_est"} <= set(curves.columns)

    def test_fixed_seed_reproduces_table(self, tmp_path):
        spec = write_spec(tmp_path)
        main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "a")])
        main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "b")])
        a = pd.read_csv(tmp_path / "a" / "experiment.csv").drop(columns=["seconds"])
        b = pd.read_csv(tmp_path / "b" / "experiment.csv").drop(columns=["seconds"])
        pd.testing.assert_frame_equal(a, b)

    def test_single_penalty(self, tmp_path):
        out = tmp_path / "sim"
        code = main(["simulate", "--spec", str(write_spec(tmp_path)), "--lambda-count", "1",
                     "--lambda-min", "0.5", "--lambda-max", "0.5", "--out", str(out)])
        assert code == EXIT_OK
        table = pd.read_csv(out / "experiment.csv")
        assert (table["lambda"] == 0.5).all()

    def test_sigmas_flag(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--spec", str(write_spec(tmp_path)), "--sigmas", "0.3",
                     "--out", str(out)]) == EXIT_OK
        assert len(pd.read_csv(out / "experiment.csv")) == 4
        assert (out / "curves_sigma_0.3.csv").exists()

    def test_stochastic_trace(self, tmp_path):
        out = tmp_path / "sim"
        code = main(["simulate", "--spec", str(write_spec(tmp_path, sigmas=[0.3])), "--trace", "stochastic",
                     "--probes", "8", "--out", str(out)])
        assert code == EXIT_OK
        curves = pd.read_csv(out / "curves_sigma_0.3.csv")
        exact = tmp_path / "exact"
        main(["simulate", "--spec", str(write_spec(tmp_path, sigmas=[0.3])), "--out", str(exact)])
        reference = pd.read_csv(exact / "curves_sigma_0.3.csv")
        assert not np.allclose(curves["effective_dim"], reference["effective_dim"])

    def test_invalid_spec(self, tmp_path, capsys):
        code = main(["simulate", "--spec", str(write_spec(tmp_path, sigmas=[-1.0])),
                     "--out", str(tmp_path / "sim")])
        assert code == EXIT_INVALID
        assert "sigma" in capsys.readouterr().err
