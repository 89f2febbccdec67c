"""Single process vs. two instances (time-sliced and MPS) across batch sizes.

Prints one CSV row per (variant, batch): makespan, speedup over the single
process, and mean per-instance elapsed time.

    python scripts/mps_batch_sweep.py --batches 10 20 40 80 160
"""

import argparse
import csv
import sys

from splitsim import GpuSpec, SchedulerConfig, SharingDiscipline, WorkloadSpec, generate, run

VARIANTS = {
    "SP": (SchedulerConfig("continuous"), SharingDiscipline("exclusive")),
    "MPx2": (SchedulerConfig("multi_instance", n_instances=2), SharingDiscipline("time_sliced")),
    "MPSx2": (SchedulerConfig("multi_instance", n_instances=2), SharingDiscipline("mps")),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batches", type=int, nargs="+", default=[10, 20, 40, 80, 160])
    ap.add_argument("--input-tokens", type=int, default=1024)
    ap.add_argument("--output-tokens", type=int, default=1024)
    ap.add_argument("--duplicate-weights", action="store_true")
    args = ap.parse_args()

    gpu = GpuSpec(shared_weights=not args.duplicate_weights)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["variant", "batch", "makespan_s", "speedup_vs_sp", "mean_instance_elapsed_s"])
    for n in args.batches:
        reqs = generate(WorkloadSpec(n, args.input_tokens, args.output_tokens))
        base = None
        for name, (sched, disc) in VARIANTS.items():
            rep = run(reqs, sched, gpu, discipline=disc)
            base = base or rep.makespan_s
            w.writerow([name, n, f"{rep.makespan_s:.4f}", f"{base / rep.makespan_s:.3f}",
                        f"{rep.mean_instance_elapsed_s:.4f}"])


if __name__ == "__main__":
    main()
