"""Monte-Carlo experiment harness and benchmark protocol behind the CLI.

Every replication draws one set of shards and hands the same shards to
all requested estimators (paired design), so error differences between
estimators are not sampling noise.  Per-replication seeds come from
``(seed, sweep_index, rep)`` and never depend on run order.

Estimator tokens
----------------
``oneround``            projector averaging only
``frdpca_shifted``      shifted subspace iteration, ``T`` rounds
``frdpca_unshifted``    the same without the noise shift
``frdpca_kendall``      shifted iteration on Kendall's tau summaries
``pooled``              PCA of the pooled covariance
``pooled_kendall``      PCA of the pooled Kendall's tau matrix

An iterative token may carry an explicit round, e.g. ``frdpca_shifted@2``.
Tokens of one family share a single run to the largest requested round.
"""
from __future__ import annotations

import dataclasses
import json
import math
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .coordinator import IterationConfig, distributed_pca
from .linalg import projector_distance
from .models import (DatasetShard, InnovationSpec, SpikedModelSpec, derive_seed, make_population, read_shard,
                     sample_elliptical, sample_gaussian_spiked, sample_general, write_shard)
from .oracle import pooled_covariance_pca, pooled_kendall_pca
from .theory import (RegimeError, classify_regime, oneround_mse_limit, phase_thresholds, pooled_mse_limit,
                     average_retention)
from .worker import LocalSummary, summarize

ESTIMATORS = ("oneround", "frdpca_shifted", "frdpca_unshifted", "pooled", "pooled_kendall", "frdpca_kendall")
ITERATIVE = {"frdpca_shifted", "frdpca_unshifted", "frdpca_kendall"}
SCENARIOS = ("gaussian_spiked", "general", "elliptical")

# metric columns; everything else in a report is a grouping key
METRICS = ("sq_error", "half_sq_error", "frob_error", "alignment", "comm_floats", "wall_time",
           "ar", "ar_relative")


class ConfigError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class MixedSchemaError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "gaussian_spiked"
    p: int = 200
    n: int = 200
    K: int = 60
    spikes: tuple[float, ...] = (5.0, 3.0, 2.0)
    T: int = 2
    reps: int = 10
    seed: int = 0
    estimators: tuple[str, ...] = ("oneround", "frdpca_shifted", "pooled")
    noise: tuple[float, float] = (1.0, 1.0)
    basis_mode: str = "random"
    basis_seed: int = 0
    alpha_signal: float = 0.0
    alpha_noise: float = 0.0
    nu: float = math.inf
    sweep_axis: str | None = None  # "n" or "l"
    sweep_values: tuple[float, ...] = ()
    inference_mode: bool = False
    init: str = "oneround"
    transport: str = "inprocess"
    name: str = "experiment"
    timing: bool = False  # wall-clock column; off keeps reruns byte-identical

    def __post_init__(self):
        self.spikes = tuple(float(s) for s in self.spikes)
        self.estimators = tuple(self.estimators)
        self.noise = tuple(self.noise)
        self.sweep_values = tuple(self.sweep_values)
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        for tok in self.estimators:
            base, _ = parse_estimator(tok)
            if base not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {tok!r}")
        if self.sweep_axis not in (None, "n", "l"):
            raise ConfigError(f"unknown sweep axis {self.sweep_axis!r}")
        if self.sweep_axis and not self.sweep_values:
            raise ConfigError("sweep axis given without values")
        if np.any(np.diff(self.sweep_values) <= 0):
            raise ConfigError("sweep values must be strictly increasing")

    @property
    def r(self) -> int:
        return len(self.spikes)

    def points(self) -> list[tuple[int, tuple[float, ...]]]:
        """``(n, spikes)`` at every sweep point."""
        if self.sweep_axis == "n":
            return [(int(v), self.spikes) for v in self.sweep_values]
        if self.sweep_axis == "l":
            # move the whole spike profile so its weakest spike sits at v
            return [(self.n, tuple(s - self.spikes[-1] + v for s in self.spikes)) for v in self.sweep_values]
        return [(self.n, self.spikes)]

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["nu"] = None if math.isinf(self.nu) else self.nu
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if d.get("nu") is None:
            d.pop("nu", None)
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def parse_estimator(token: str) -> tuple[str, int | None]:
    m = re.fullmatch(r"([a-z_]+)(?:@(\d+))?", token)
    if not m:
        raise ConfigError(f"bad estimator token {token!r}")
    return m.group(1), (int(m.group(2)) if m.group(2) else None)


def model_spec(cfg: ExperimentConfig, spikes) -> SpikedModelSpec:
    return SpikedModelSpec(p=cfg.p, spikes=tuple(spikes), noise=cfg.noise, basis_mode=cfg.basis_mode,
                           basis_seed=cfg.basis_seed)


def draw_shards(cfg: ExperimentConfig, spec: SpikedModelSpec, n: int, seed: int) -> list[DatasetShard]:
    if cfg.scenario == "gaussian_spiked":
        return sample_gaussian_spiked(spec, n, cfg.K, seed)
    if cfg.scenario == "general":
        return sample_general(spec, InnovationSpec(cfg.alpha_signal, cfg.alpha_noise), n, cfg.K, seed)
    return sample_elliptical(spec, cfg.nu, n, cfg.K, seed, skew=(cfg.alpha_signal, cfg.alpha_noise))


def error_metrics(U_hat: np.ndarray, U: np.ndarray) -> dict:
    d = projector_distance(U, U_hat)
    return {"sq_error": d**2, "half_sq_error": d**2 / 2.0, "frob_error": d,
            "alignment": float(np.linalg.norm(U.T @ U_hat) ** 2 / U.shape[1])}


def theory_columns(p: int, n: int, K: int, spikes) -> dict:
    c = p / n
    local, pooled = phase_thresholds(c, K)
    out = {"regime": classify_regime(min(spikes), c, K).value, "local_threshold": local,
           "pool_threshold": pooled, "pooled_mse_limit": pooled_mse_limit(p, n, K, spikes)}
    try:
        out["oneround_mse_limit"] = oneround_mse_limit(p, n, K, spikes)
    except RegimeError:
        out["oneround_mse_limit"] = math.nan
    return out


def _requested_rounds(tokens: Sequence[str], T: int) -> dict[str, list[tuple[str, int]]]:
    runs: dict[str, list[tuple[str, int]]] = {}
    for tok in tokens:
        base, t = parse_estimator(tok)
        if base in ITERATIVE:
            runs.setdefault(base, []).append((tok, t or T))
    return runs


def estimate_all(shards: Sequence[DatasetShard], tokens: Sequence[str], r: int, T: int, *,
                 inference_mode=False, init="oneround", init_seed=0, transport="inprocess",
                 summaries: dict[str, list[LocalSummary]] | None = None) -> dict[str, dict]:
    """Run every requested estimator on the same shards.

    Returns ``{token: {"basis", "comm_floats", "wall_time", "l_hat"}}``.
    """
    summaries = {} if summaries is None else summaries

    def local(kind):
        if kind not in summaries:
            summaries[kind] = [summarize(s, kind) for s in shards]
        return summaries[kind]

    out: dict[str, dict] = {}
    for tok in tokens:
        base, t = parse_estimator(tok)
        start = time.perf_counter()
        if base == "pooled":
            out[tok] = {"basis": pooled_covariance_pca(shards, r).basis, "comm_floats": 0}
        elif base == "pooled_kendall":
            out[tok] = {"basis": pooled_kendall_pca(shards, r).basis, "comm_floats": 0}
        elif base == "oneround":
            est = distributed_pca(local("covariance"), IterationConfig(r=r, T=1), transport=transport)
            out[tok] = {"basis": est.basis, "comm_floats": est.comm_log.total_floats}
        else:
            continue
        out[tok]["wall_time"] = time.perf_counter() - start
    for base, wanted in _requested_rounds(tokens, T).items():
        kind = "kendall_tau" if base == "frdpca_kendall" else "covariance"
        mode = "unshifted" if base == "frdpca_unshifted" else "shifted"
        t_max = max(t for _, t in wanted)
        start = time.perf_counter()
        est = distributed_pca(local(kind), IterationConfig(
            r=r, T=t_max, shift_mode=mode, estimator_kind=kind, inference_mode=inference_mode,
            init=init, init_seed=init_seed), transport=transport)
        elapsed = time.perf_counter() - start
        for tok, t in wanted:
            lhat = est.singular_values_per_round[t - 2] if t >= 2 and mode == "shifted" else None
            out[tok] = {"basis": est.history[t - 1], "wall_time": elapsed * t / t_max, "l_hat": lhat,
                        "comm_floats": sum(est.comm_log.floats(round=s) for s in range(1, t + 1))}
    return out


def run_experiment(cfg: ExperimentConfig, progress=None) -> pd.DataFrame:
    """One row per (sweep point, rep, estimator)."""
    rows = []
    for i, (n, spikes) in enumerate(cfg.points()):
        spec = model_spec(cfg, spikes)
        U = make_population(spec).basis
        theory = theory_columns(cfg.p, n, cfg.K, spikes)
        for rep in range(cfg.reps):
            seed = derive_seed(cfg.seed, i, rep)
            shards = draw_shards(cfg, spec, n, seed)
            results = estimate_all(shards, cfg.estimators, cfg.r, cfg.T, inference_mode=cfg.inference_mode,
                                   init=cfg.init, init_seed=seed, transport=cfg.transport)
            for tok in cfg.estimators:
                res = results[tok]
                row = {"experiment": cfg.name, "scenario": cfg.scenario, "estimator": tok, "p": cfg.p,
                       "n": n, "K": cfg.K, "r": cfg.r, "l_r": spikes[-1], "rep": rep, "seed": seed}
                row.update(error_metrics(res["basis"], U))
                row["comm_floats"] = res["comm_floats"]
                row["wall_time"] = res["wall_time"] if cfg.timing else math.nan
                lhat = res.get("l_hat")
                for j in range(cfg.r):
                    row[f"l_hat_{j + 1}"] = float(lhat[j]) if lhat is not None else math.nan
                row.update(theory)
                rows.append(row)
            if progress:
                progress(i, rep)
    return pd.DataFrame(rows)


# --- shard files on disk -------------------------------------------------------------

MANIFEST = "manifest.json"


def generate_shards(cfg: ExperimentConfig, out_dir) -> Path:
    """Write the ``K`` shards of replication 0 (first sweep point) plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n, spikes = cfg.points()[0]
    spec = model_spec(cfg, spikes)
    seed = derive_seed(cfg.seed, 0, 0)
    shards = draw_shards(cfg, spec, n, seed)
    files = []
    for s in shards:
        name = f"shard_{s.machine_index:04d}.fpca"
        write_shard(out_dir / name, s)
        files.append({"k": s.machine_index, "file": name, "seed": s.seed_used})
    manifest = {"config": json.loads(cfg.to_json()), "n": n, "spikes": list(spikes), "data_seed": seed,
                "true_basis": make_population(spec).basis.tolist(), "shards": files}
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path) -> tuple[dict, list[DatasetShard], np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    shards = [read_shard(path.parent / e["file"], e.get("seed", 0)) for e in manifest["shards"]]
    shards.sort(key=lambda s: s.machine_index)
    return manifest, shards, np.asarray(manifest["true_basis"], dtype=np.float64)


# --- benchmark protocol ----------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSplitSpec:
    kappa: float = 1.0
    rho: float = 0.1
    r_max: int = 5
    train_fraction: float = 0.8
    max_K: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not (self.kappa > 0 and self.rho > 0):
            raise ConfigError("kappa and rho must be positive")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")

    def sizes(self, p: int) -> tuple[int, int]:
        """``(n, r)`` for a dataset with ``p`` features; ``r`` is at least 1."""
        return math.floor(self.kappa * p), max(1, min(math.floor(self.rho * p), self.r_max))


def load_numeric_csv(path) -> np.ndarray:
    """Numeric columns only, rows with missing values dropped."""
    frame = pd.read_csv(path)
    frame = frame.select_dtypes(include="number").dropna(axis=0, how="any")
    return frame.to_numpy(dtype=np.float64)


@dataclass
class BenchmarkSplit:
    shards: list[DatasetShard]
    test: np.ndarray
    train_rows: np.ndarray  # indices into the ingested table, per shard in order
    n: int
    r: int


def split_benchmark(X: np.ndarray, split: BenchmarkSplitSpec, rep: int = 0) -> BenchmarkSplit:
    N, p = X.shape
    n, r = split.sizes(p)
    if p < 2:
        raise InsufficientDataError(f"need at least 2 numeric columns, got {p}")
    perm = np.random.default_rng(derive_seed(split.seed, rep)).permutation(N)
    n_train = int(math.floor(split.train_fraction * N))
    train, test = perm[:n_train], perm[n_train:]
    if n < 1 or n_train < 2 * n:
        raise InsufficientDataError(f"{n_train} training rows cannot fill two shards of n={n}")
    K = min(n_train // n, split.max_K)
    mean = X[train].mean(axis=0)
    used = train[:K * n].reshape(K, n)
    shards = [DatasetShard(k, X[rows] - mean, 0) for k, rows in enumerate(used)]
    return BenchmarkSplit(shards, X[test] - mean, used, n, r)


def run_benchmark(csv_path, split: BenchmarkSplitSpec, estimators: Sequence[str], reps: int = 1,
                  T: int = 2, dataset: str | None = None) -> pd.DataFrame:
    X = load_numeric_csv(csv_path)
    dataset = dataset or Path(csv_path).stem
    tokens = list(estimators)
    if "pooled" not in [parse_estimator(t)[0] for t in tokens]:
        tokens.append("pooled")  # reference for relative AR
    rows = []
    for rep in range(reps):
        sp = split_benchmark(X, split, rep)
        results = estimate_all(sp.shards, tokens, sp.r, T)
        pooled_ar = average_retention(results["pooled"]["basis"], sp.test)
        for tok in estimators:
            ar = average_retention(results[tok]["basis"], sp.test)
            rows.append({"experiment": f"bench_{dataset}", "dataset": dataset, "estimator": tok,
                         "kappa": split.kappa, "rho": split.rho, "p": X.shape[1], "n": sp.n,
                         "K": len(sp.shards), "r": sp.r, "rep": rep, "ar": ar, "ar_relative": ar / pooled_ar,
                         "comm_floats": results[tok]["comm_floats"], "wall_time": results[tok]["wall_time"]})
    return pd.DataFrame(rows)


# --- reports ------------------------------------------------------------------------

def format_pm(mean: float, sd: float, digits: int = 4) -> str:
    if not np.isfinite(sd):
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


def summarize_report(frame: pd.DataFrame, digits: int = 4) -> pd.DataFrame:
    """Collapse replications into ``mean``, ``sd`` (sample) and a ``mean ± sd`` string per metric."""
    metrics = [c for c in frame.columns if c in METRICS or c.startswith("l_hat_")]
    drop = {"rep", "seed"}
    keys = [c for c in frame.columns if c not in metrics and c not in drop]
    out = []
    for key, grp in frame.groupby(keys, sort=False, dropna=False):
        row = dict(zip(keys, key if isinstance(key, tuple) else (key,)))
        row["reps"] = len(grp)
        for m in metrics:
            vals = grp[m].to_numpy(dtype=np.float64)
            mean = float(np.mean(vals))
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan
            row[f"{m}_mean"], row[f"{m}_sd"] = mean, sd
            row[m] = format_pm(mean, sd, digits)
        out.append(row)
    return pd.DataFrame(out)


def build_reports(paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """One summary CSV per experiment name found in the inputs."""
    by_name: dict[str, list[pd.DataFrame]] = {}
    for path in paths:
        frame = pd.read_csv(path)
        if "experiment" not in frame.columns:
            raise MixedSchemaError(f"{path}: not a run/bench report (no 'experiment' column)")
        for name, grp in frame.groupby("experiment", sort=False):
            by_name.setdefault(str(name), []).append(grp)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, frames in by_name.items():
        cols = {tuple(f.columns) for f in frames}
        if len(cols) > 1:
            raise MixedSchemaError(f"experiment {name!r} appears with different column sets")
        target = out_dir / f"{name}_summary.csv"
        summarize_report(pd.concat(frames, ignore_index=True)).to_csv(target, index=False)
        written.append(target)
    return written


def json_summary(frame: pd.DataFrame) -> dict:
    summary = summarize_report(frame)
    cols = [c for c in summary.columns if not c.endswith("_mean") and not c.endswith("_sd")]
    return {"rows": int(len(frame)), "groups": json.loads(summary[cols].to_json(orient="records"))}
