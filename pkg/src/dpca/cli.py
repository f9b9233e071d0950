"""Command-line entry point: ``dpca {gen,run,bench,report,serve-worker}``."""
from __future__ import annotations

import json
import logging
import math
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import experiments as ex
from .coordinator import IterationConfig, run_distributed_pca
from .models import read_shard
from .netsim import Session, WorkerNode, serve_worker

log = logging.getLogger("dpca")

DEFAULT_SPIKES = (5.0, 3.0, 2.0)

RUN_COLUMNS_HELP = """\b
CSV columns (one row per sweep point x rep x estimator):
  experiment, scenario, estimator, p, n, K, r, l_r, rep, seed
  sq_error        ||U_hat U_hat^T - U U^T||_F^2
  half_sq_error   sq_error / 2
  frob_error      ||U_hat U_hat^T - U U^T||_F
  alignment       ||U^T U_hat||_F^2 / r
  comm_floats     floats moved up to the reported round
  wall_time       seconds (nan unless --timing)
  l_hat_i         spike estimates (shifted iterative estimators, T >= 2)
  regime, local_threshold, pool_threshold, pooled_mse_limit,
  oneround_mse_limit (nan below the local threshold)"""


def _floats(text: str | None) -> tuple[float, ...] | None:
    if text is None:
        return None
    return tuple(float(x) for x in text.split(",") if x.strip())


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise click.BadParameter(f"expected host:port, got {text!r}")
    return host, int(port)


def experiment_options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON config; command-line flags override its values."),
        click.option("--scenario", type=click.Choice(ex.SCENARIOS)),
        click.option("--p", type=int), click.option("--n", type=int), click.option("--K", "K", type=int),
        click.option("--r", type=int, help="Number of spikes; defaults to len(--spikes)."),
        click.option("--T", "T", type=int, help="Rounds for iterative estimators."),
        click.option("--reps", type=int), click.option("--seed", type=int),
        click.option("--spikes", help="Comma-separated spike strengths l_1 > ... > l_r."),
        click.option("--noise", help="Noise profile 'hi,lo' (1,1 is flat)."),
        click.option("--basis-mode", type=click.Choice(["canonical", "random"])),
        click.option("--alpha", help="Skewness 'signal,noise' for general/elliptical scenarios."),
        click.option("--nu", type=float, help="Degrees of freedom (elliptical scenario)."),
        click.option("--estimators", help=f"Comma-separated subset of {', '.join(ex.ESTIMATORS)}; "
                                          "iterative ones accept @t."),
        click.option("--sweep-n", help="Comma-separated n values."),
        click.option("--sweep-l", help="Comma-separated values for the weakest spike."),
        click.option("--inference-mode/--no-inference-mode", default=None,
                     help="Send S U and the shift separately."),
        click.option("--init", type=click.Choice(["oneround", "random"])),
        click.option("--transport", type=click.Choice(["inprocess", "tcp"])),
        click.option("--name", help="Experiment name used in output files."),
        click.option("--timing/--no-timing", default=None,
                     help="Record wall-clock seconds (off by default so reruns are byte-identical)."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def build_config(config_path=None, r=None, spikes=None, noise=None, alpha=None, sweep_n=None, sweep_l=None,
                 **flags) -> ex.ExperimentConfig:
    base = json.loads(Path(config_path).read_text()) if config_path else {}
    over = {k: v for k, v in flags.items() if v is not None}
    if spikes is not None:
        over["spikes"] = _floats(spikes)
    elif r is not None and "spikes" not in base:
        over["spikes"] = DEFAULT_SPIKES[:r] if r <= 3 else tuple(np.linspace(5.0, 2.0, r))
    if noise is not None:
        over["noise"] = _floats(noise)
    if alpha is not None:
        over["alpha_signal"], over["alpha_noise"] = _floats(alpha)
    if "estimators" in over:
        over["estimators"] = tuple(t.strip() for t in over["estimators"].split(","))
    if sweep_n and sweep_l:
        raise click.UsageError("choose one sweep axis")
    if sweep_n:
        over["sweep_axis"], over["sweep_values"] = "n", _floats(sweep_n)
    if sweep_l:
        over["sweep_axis"], over["sweep_values"] = "l", _floats(sweep_l)
    try:
        cfg = ex.ExperimentConfig.from_dict({**base, **over})
    except (ex.ConfigError, TypeError, ValueError) as exc:
        raise click.UsageError(str(exc)) from exc
    if r is not None and r != cfg.r:
        raise click.UsageError(f"--r {r} disagrees with {cfg.r} spikes")
    return cfg


def write_outputs(frame: pd.DataFrame, out: Path, name: str) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{name}.csv", out / f"{name}.json"
    frame.to_csv(csv_path, index=False, encoding="utf-8")
    json_path.write_text(json.dumps(ex.json_summary(frame), indent=2, ensure_ascii=False), encoding="utf-8")
    return csv_path, json_path


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Few-round distributed PCA experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@experiment_options
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Directory for shards + manifest.")
def gen(out, **kw):
    """Write K shard files and a JSON manifest with the true basis."""
    cfg = build_config(**kw)
    try:
        path = ex.generate_shards(cfg, out)
    except OSError as exc:
        raise click.ClickException(f"cannot write to {out}: {exc}") from exc
    click.echo(str(path))


@main.command(epilog=RUN_COLUMNS_HELP)
@experiment_options
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              help="Run once on shards written by 'gen' instead of simulating.")
@click.option("--connect", help="Comma-separated host:port of running serve-worker processes, in k order.")
@click.option("--out", type=click.Path(file_okay=False), default="results", show_default=True)
def run(manifest, connect, out, **kw):
    """Simulate and evaluate estimators; writes <name>.csv and <name>.json."""
    cfg = build_config(**kw)
    if connect:
        frame = _run_remote(cfg, [_address(a) for a in connect.split(",")], manifest)
    elif manifest:
        frame = _run_manifest(cfg, manifest)
    else:
        frame = ex.run_experiment(cfg, progress=lambda i, rep: log.info("point %d rep %d done", i, rep))
    csv_path, _ = write_outputs(frame, Path(out), cfg.name)
    click.echo(str(csv_path))


def _rows(cfg, results, U, n, K, spikes):
    rows = []
    for tok, res in results.items():
        row = {"experiment": cfg.name, "scenario": cfg.scenario, "estimator": tok, "p": U.shape[0], "n": n,
               "K": K, "r": U.shape[1], "l_r": spikes[-1], "rep": 0, "seed": cfg.seed}
        row.update(ex.error_metrics(res["basis"], U))
        row["comm_floats"] = res["comm_floats"]
        row["wall_time"] = res.get("wall_time", math.nan) if cfg.timing else math.nan
        lhat = res.get("l_hat")
        for j in range(U.shape[1]):
            row[f"l_hat_{j + 1}"] = float(lhat[j]) if lhat is not None else math.nan
        row.update(ex.theory_columns(U.shape[0], n, K, spikes))
        rows.append(row)
    return pd.DataFrame(rows)


def _run_manifest(cfg, manifest_path):
    manifest, shards, U = ex.load_manifest(manifest_path)
    results = ex.estimate_all(shards, cfg.estimators, U.shape[1], cfg.T, inference_mode=cfg.inference_mode,
                              init=cfg.init, init_seed=cfg.seed, transport=cfg.transport)
    return _rows(cfg, results, U, manifest["n"], len(shards), manifest["spikes"])


def _run_remote(cfg, addresses, manifest_path):
    if manifest_path is None:
        raise click.UsageError("--connect needs --manifest for the true basis and dimensions")
    manifest, _, U = ex.load_manifest(manifest_path)
    results = {}
    for tok in cfg.estimators:
        base, t = ex.parse_estimator(tok)
        if base not in ex.ITERATIVE and base != "oneround":
            raise click.UsageError(f"{tok} needs the raw data and cannot run over --connect")
        it = IterationConfig(r=U.shape[1], T=1 if base == "oneround" else (t or cfg.T),
                             shift_mode="unshifted" if base == "frdpca_unshifted" else "shifted",
                             estimator_kind="kendall_tau" if base == "frdpca_kendall" else "covariance",
                             inference_mode=cfg.inference_mode, init=cfg.init, init_seed=cfg.seed)
        try:
            with Session.tcp(addresses) as session:
                est = run_distributed_pca(session, it, n=manifest["n"], p=U.shape[0])
        except Exception as exc:  # surface transport failures as CLI errors
            raise click.ClickException(str(exc)) from exc
        results[tok] = {"basis": est.basis, "comm_floats": est.comm_log.total_floats,
                        "l_hat": est.spiked_eigenvalue_estimates}
    return _rows(cfg, results, U, manifest["n"], len(addresses), manifest["spikes"])


@main.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--kappa", type=float, default=1.0, show_default=True, help="n = floor(kappa p).")
@click.option("--kappas", help="Comma-separated kappa sweep (overrides --kappa).")
@click.option("--rho", type=float, default=0.1, show_default=True, help="r = min(floor(rho p), rmax).")
@click.option("--rmax", type=int, default=5, show_default=True)
@click.option("--max-K", "max_K", type=int, default=1000, show_default=True)
@click.option("--T", "T", type=int, default=2, show_default=True)
@click.option("--reps", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--estimators", default="oneround,frdpca_shifted,pooled", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="results", show_default=True)
def bench(csv_path, kappa, kappas, rho, rmax, max_K, T, reps, seed, estimators, out):
    """Train/test AR benchmark on a numeric CSV (centered by the training mean)."""
    tokens = [t.strip() for t in estimators.split(",")]
    frames = []
    for kap in (_floats(kappas) if kappas else (kappa,)):
        split = ex.BenchmarkSplitSpec(kappa=kap, rho=rho, r_max=rmax, max_K=max_K, seed=seed)
        try:
            frames.append(ex.run_benchmark(csv_path, split, tokens, reps=reps, T=T))
        except ex.InsufficientDataError as exc:
            raise click.ClickException(str(exc)) from exc
    frame = pd.concat(frames, ignore_index=True)
    csv_out, _ = write_outputs(frame, Path(out), frame["experiment"].iloc[0])
    click.echo(str(csv_out))


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="results", show_default=True)
def report(reports, out):
    """Aggregate run/bench CSVs into 'mean ± sd' tables, one file per experiment."""
    try:
        for path in ex.build_reports(reports, out):
            click.echo(str(path))
    except ex.MixedSchemaError as exc:
        raise click.ClickException(str(exc)) from exc


@main.command("serve-worker")
@click.option("--shard", "shard_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--listen", default="127.0.0.1:0", show_default=True, help="host:port to bind.")
@click.option("--once", is_flag=True, help="Exit after the first coordinator session.")
def serve_worker_cmd(shard_path, listen, once):
    """Serve one shard over TCP until a SHUTDOWN command arrives."""
    shard = read_shard(shard_path)
    host, port = _address(listen)
    node = WorkerNode(shard.machine_index, shard=shard)

    def ready(addr):
        click.echo(f"worker {shard.machine_index} listening on {addr[0]}:{addr[1]}")
        sys.stdout.flush()

    serve_worker(node, host, port, ready=ready, once=once)


if __name__ == "__main__":
    main()
