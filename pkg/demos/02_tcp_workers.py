"""Run the coordinator against real worker processes over TCP.

Generates shards on disk, starts one ``dpca serve-worker`` process per shard,
then runs the few-round estimator with ``dpca run --connect`` and compares it
with the same run done in-process.
"""
import subprocess
import sys
import tempfile
from pathlib import Path

import pandas as pd

tmp = Path(tempfile.mkdtemp(prefix="dpca-demo-"))
dpca = [sys.executable, "-m", "dpca"]
common = ["--p", "40", "--n", "80", "--K", "4", "--spikes", "4,2", "--seed", "11"]
subprocess.run([*dpca, "gen", *common, "--out", str(tmp / "shards")], check=True)

workers, addresses = [], []
for shard in sorted((tmp / "shards").glob("shard_*.fpca")):
    proc = subprocess.Popen([*dpca, "serve-worker", "--shard", str(shard), "--once"],
                            stdout=subprocess.PIPE, text=True)
    line = proc.stdout.readline().strip()  # "worker k listening on host:port"
    print(line, flush=True)
    workers.append(proc)
    addresses.append(line.rsplit(" ", 1)[-1])

manifest = str(tmp / "shards" / "manifest.json")
run = [*dpca, "run", "--manifest", manifest, "--estimators", "frdpca_shifted", "--T", "3"]
subprocess.run([*run, "--connect", ",".join(addresses), "--name", "remote", "--out", str(tmp)], check=True)
subprocess.run([*run, "--name", "local", "--out", str(tmp)], check=True)
for proc in workers:
    proc.wait(timeout=30)

remote, local = pd.read_csv(tmp / "remote.csv"), pd.read_csv(tmp / "local.csv")
print(remote[["estimator", "sq_error", "comm_floats"]].to_string(index=False))
print("identical to in-process run:", remote["sq_error"].equals(local["sq_error"]))
