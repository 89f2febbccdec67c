"""Phase-windowed utilization and KV usage under single-process batching.

Two tables: an input-length sweep at fixed batch, then a batch sweep at fixed
input length. Values are time-weighted means inside each phase's window.
"""

import argparse
import csv
import sys

from splitsim import SchedulerConfig, WorkloadSpec, generate, run
from splitsim.metrics import phase_windowed

COLS = ["sweep", "value", "phase", "elapsed_s", "compute_pct", "mem_pct", "kv_pct",
        "mean_e2e_s", "s_per_output_token"]


def rows(label, value, reqs):
    rep = run(reqs, SchedulerConfig("continuous"))
    for phase in ("prompt", "token"):
        win = phase_windowed(rep, phase)
        if not win.present:
            continue
        tpot = win.elapsed_s / rep.total_tokens if phase == "token" else ""
        yield [label, value, phase, f"{win.elapsed_s:.4f}", f"{win.mean_compute_pct:.2f}",
               f"{win.mean_mem_pct:.2f}", f"{win.mean_kv_pct:.2f}", f"{rep.e2e_mean_s:.4f}",
               tpot and f"{tpot:.6f}"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--inputs", type=int, nargs="+", default=[128, 256, 512, 1024])
    ap.add_argument("--batches", type=int, nargs="+", default=[10, 20, 40, 80, 160])
    ap.add_argument("--output-tokens", type=int, default=1024)
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(COLS)
    for n_in in args.inputs:
        w.writerows(rows("input_tokens", n_in, generate(WorkloadSpec(10, n_in, args.output_tokens))))
    for n in args.batches:
        w.writerows(rows("batch", n, generate(WorkloadSpec(n, 1024, args.output_tokens))))


if __name__ == "__main__":
    main()
