"""Multi-seed comparison of Baseline / R1 / R2 / R3 on the synthetic benchmark.

    python scripts/run_benchmark.py --seeds 0 1 2 3 4 --output-dir runs/benchmark
    python scripts/run_benchmark.py --skew '{"Music": 0.5, "Books": 0.5, "Video": 0.5}' \\
        --output-dir runs/overconfident --no-desync
"""

import argparse
import json
from pathlib import Path

from nlurerank.pipeline import ExperimentConfig, run_seeds


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--output-dir", default="runs/benchmark")
    p.add_argument("--skew", type=json.loads, default={})
    p.add_argument("--loss", type=json.loads, default={})
    p.add_argument("--no-desync", action="store_true")
    args = p.parse_args()

    cfg = ExperimentConfig(output_dir=args.output_dir, skew=args.skew, loss=args.loss)
    summary = run_seeds(cfg, args.seeds, desync=not args.no_desync)
    timings = json.loads((Path(args.output_dir) / "timings.json").read_text())

    print(f"{'scheme':<10}{'SemER mean':>12}{'stdev':>9}{'ECE mean':>10}{'stdev':>9}{'rel. %':>9}")
    for name, s in summary["schemes"].items():
        print(f"{name:<10}{s['semer']['mean']:>12.4f}{s['semer']['stdev']:>9.4f}"
              f"{s['ece']['mean']:>10.4f}{s['ece']['stdev']:>9.4f}{s['relative_improvement_of_mean']:>9.2f}")
    if "desync" in summary:
        d = summary["desync"]
        print(f"desync R3: full {d['full_semer']['mean']:.4f}  sampled {d['desync_semer']['mean']:.4f}  "
              f"relative degradation {d['relative_degradation_of_mean']:.3f}%")
    print("seconds per seed:", {k: round(v, 1) for k, v in timings.items()})


if __name__ == "__main__":
    main()
