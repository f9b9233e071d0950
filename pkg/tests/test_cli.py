import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from dpca import experiments as ex
from dpca.cli import main
from dpca.models import read_shard

SMALL = ["--p", "20", "--n", "30", "--K", "3", "--spikes", "4,2", "--seed", "7"]


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, args):
    res = runner.invoke(main, args, catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res


def test_gen_manifest_roundtrip(runner, tmp_path):
    invoke(runner, ["gen", *SMALL, "--out", str(tmp_path / "a")])
    invoke(runner, ["gen", *SMALL, "--out", str(tmp_path / "b")])
    manifest, shards, U = ex.load_manifest(tmp_path / "a" / "manifest.json")
    assert len(shards) == 3 and U.shape == (20, 2)
    assert np.allclose(U.T @ U, np.eye(2), atol=1e-12)
    for e in manifest["shards"]:
        assert (tmp_path / "a" / e["file"]).read_bytes() == (tmp_path / "b" / e["file"]).read_bytes()
    s0 = read_shard(tmp_path / "a" / manifest["shards"][0]["file"])
    assert s0.data.shape == (30, 20)


def test_run_is_byte_identical(runner, tmp_path):
    args = ["run", *SMALL, "--reps", "2", "--estimators", "pooled,oneround,frdpca_shifted@2", "--name", "x"]
    invoke(runner, [*args, "--out", str(tmp_path / "a")])
    invoke(runner, [*args, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "x.csv").read_bytes() == (tmp_path / "b" / "x.csv").read_bytes()
    frame = pd.read_csv(tmp_path / "a" / "x.csv")
    assert len(frame) == 6 and frame["wall_time"].isna().all()
    summary = json.loads((tmp_path / "a" / "x.json").read_text())
    assert summary["rows"] == 6


def test_single_machine_distributed_equals_pooled(runner, tmp_path):
    invoke(runner, ["run", "--p", "15", "--n", "40", "--K", "1", "--spikes", "3", "--reps", "1",
                    "--estimators", "pooled,frdpca_shifted@3,oneround", "--name", "k1", "--out", str(tmp_path)])
    frame = pd.read_csv(tmp_path / "k1.csv").set_index("estimator")
    assert abs(frame.loc["pooled", "sq_error"] - frame.loc["frdpca_shifted@3", "sq_error"]) <= 1e-10
    assert abs(frame.loc["pooled", "sq_error"] - frame.loc["oneround", "sq_error"]) <= 1e-10


def test_run_from_manifest(runner, tmp_path):
    invoke(runner, ["gen", *SMALL, "--out", str(tmp_path / "d")])
    invoke(runner, ["run", "--manifest", str(tmp_path / "d" / "manifest.json"), "--estimators",
                    "pooled,frdpca_shifted", "--T", "3", "--name", "m", "--out", str(tmp_path)])
    frame = pd.read_csv(tmp_path / "m.csv")
    assert list(frame["estimator"]) == ["pooled", "frdpca_shifted"]
    assert (frame["sq_error"] < 1).all()


def test_run_rejects_bad_flags(runner):
    res = runner.invoke(main, ["run", "--sweep-n", "10,20", "--sweep-l", "1,2"])
    assert res.exit_code != 0
    res = runner.invoke(main, ["run", "--estimators", "nonsense"])
    assert res.exit_code != 0


def test_config_file_with_override(runner, tmp_path):
    cfg = {"scenario": "gaussian_spiked", "p": 12, "n": 25, "K": 2, "spikes": [3.0], "reps": 1,
           "estimators": ["pooled"], "name": "cfgrun"}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    invoke(runner, ["run", "--config", str(path), "--n", "40", "--out", str(tmp_path)])
    frame = pd.read_csv(tmp_path / "cfgrun.csv")
    assert frame["n"].tolist() == [40] and frame["p"].tolist() == [12]


def _rank2_csv(path, N=400, p=10, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, 2)) @ rng.standard_normal((2, p))
    pd.DataFrame(X, columns=[f"c{j}" for j in range(p)]).assign(label="x").to_csv(path, index=False)
    return X


def test_bench_rank_two_data_is_fully_retained(runner, tmp_path):
    csv = tmp_path / "toy.csv"
    _rank2_csv(csv)
    invoke(runner, ["bench", str(csv), "--kappa", "2", "--rho", "0.2", "--out", str(tmp_path)])
    frame = pd.read_csv(tmp_path / "bench_toy.csv")
    assert (frame["r"] == 2).all()
    np.testing.assert_allclose(frame["ar"], 1.0, atol=1e-10)


def test_benchmark_split_is_seeded_and_disjoint(tmp_path):
    X = _rank2_csv(tmp_path / "t.csv", N=300)
    spec = ex.BenchmarkSplitSpec(kappa=1.0, rho=0.2, seed=3)
    a, b = ex.split_benchmark(X, spec), ex.split_benchmark(X, spec)
    assert np.array_equal(a.train_rows, b.train_rows)
    rows = a.train_rows.ravel()
    assert len(set(rows)) == rows.size
    assert a.test.shape[0] == 300 - 240
    assert len(a.shards) == 240 // 10
    c = ex.split_benchmark(X, ex.BenchmarkSplitSpec(kappa=1.0, rho=0.2, seed=4))
    assert not np.array_equal(a.train_rows, c.train_rows)


def test_bench_insufficient_data(runner, tmp_path):
    csv = tmp_path / "tiny.csv"
    _rank2_csv(csv, N=12)
    res = runner.invoke(main, ["bench", str(csv), "--kappa", "2", "--out", str(tmp_path)])
    assert res.exit_code != 0 and "cannot fill" in res.output


def _report_input(path, values, name="e", extra=None):
    frame = pd.DataFrame({"experiment": name, "estimator": "pooled", "rep": range(len(values)),
                          "sq_error": values, "alignment": 0.5})
    if extra:
        frame = frame.assign(**extra)
    frame.to_csv(path, index=False)


def test_report_mean_sd(runner, tmp_path):
    _report_input(tmp_path / "r.csv", [1.0, 2.0, 3.0])
    invoke(runner, ["report", str(tmp_path / "r.csv"), "--out", str(tmp_path / "o")])
    out = pd.read_csv(tmp_path / "o" / "e_summary.csv")
    assert out.loc[0, "sq_error_mean"] == 2.0 and out.loc[0, "sq_error_sd"] == 1.0
    assert out.loc[0, "sq_error"] == "2.0000 ± 1.0000"
    assert out.loc[0, "alignment_sd"] == 0.0


def test_report_single_rep_passthrough(runner, tmp_path):
    _report_input(tmp_path / "r.csv", [0.25])
    invoke(runner, ["report", str(tmp_path / "r.csv"), "--out", str(tmp_path / "o")])
    out = pd.read_csv(tmp_path / "o" / "e_summary.csv", dtype={"sq_error": str})
    assert out.loc[0, "sq_error"] == "0.2500" and np.isnan(out.loc[0, "sq_error_sd"])


def test_report_mixed_schema(runner, tmp_path):
    _report_input(tmp_path / "a.csv", [1.0, 2.0])
    _report_input(tmp_path / "b.csv", [1.0, 2.0], extra={"p": 3})
    res = runner.invoke(main, ["report", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                               "--out", str(tmp_path / "o")])
    assert res.exit_code != 0 and "different column sets" in res.output


def test_config_schema_matches_dataclass():
    jsonschema = pytest.importorskip("jsonschema")
    from pathlib import Path
    import dataclasses
    schema = json.loads((Path(__file__).parents[1] / "docs" / "config.schema.json").read_text())
    fields = {f.name for f in dataclasses.fields(ex.ExperimentConfig)}
    assert set(schema["properties"]) == fields
    jsonschema.validate(json.loads(ex.ExperimentConfig().to_json()), schema)
