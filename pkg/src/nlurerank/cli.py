"""Command-line driver for the experiment pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .hypotheses import EmptyInputError
from .maxent import DegenerateTrainingError, NotTrainedError
from .pipeline import ALL_SCHEMES, Experiment, ExperimentConfig, run_seeds
from .reranker import ContractViolation, ShapeError
from .schema import ConfigurationError

INVARIANT_ERRORS = (
    ConfigurationError,
    ContractViolation,
    ShapeError,
    DegenerateTrainingError,
    EmptyInputError,
    NotTrainedError,
    ZeroDivisionError,
    ValueError,
    OSError,
)


def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"not valid JSON: {e}") from None


def build_parser() -> argparse.ArgumentParser:
    d = ExperimentConfig()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields; its values override flags")
    common.add_argument("--seed", type=int, default=d.seed)
    common.add_argument("--schema-path", default=d.schema_path, help="domain schema JSON (default: bundled)")
    common.add_argument("--n-train", type=int, default=d.n_train)
    common.add_argument("--n-dev", type=int, default=d.n_dev)
    common.add_argument("--n-test", type=int, default=d.n_test)
    common.add_argument("--beam-ic", type=int, default=d.beam_ic)
    common.add_argument("--beam-ner", type=int, default=d.beam_ner)
    common.add_argument("--nbest", type=int, default=d.nbest)
    common.add_argument("--schemes", nargs="+", default=d.schemes, metavar="SCHEME", help=f"subset of {ALL_SCHEMES}")
    common.add_argument("--loss", type=_json_arg, default=d.loss, help='e.g. \'{"l2": 0.01}\'')
    common.add_argument("--optimizer", type=_json_arg, default=d.optimizer, help='e.g. \'{"max_iter": 2000}\'')
    common.add_argument("--component-l2", type=float, default=d.component_l2)
    common.add_argument("--component-epochs", type=int, default=d.component_epochs)
    common.add_argument("--skew", type=_json_arg, default=d.skew,
                        help='per-domain temperatures, e.g. \'{"Books": 0.5}\' or \'{"Books": {"ic": 2}}\'')
    common.add_argument("--k-grid", type=_json_arg, default=d.k_grid, help="candidate [k1, k2] pairs for R3")
    common.add_argument("--tune-fraction", type=float, default=d.tune_fraction)
    common.add_argument("--desync-fraction", type=float, default=d.desync_fraction)
    common.add_argument("--output-dir", default=d.output_dir)
    common.add_argument("--workers", type=int, default=d.workers)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nlurerank", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="write train/dev/test splits")
    sub.add_parser("train-components", parents=[common], help="train per-domain DC, IC and NER models")
    sub.add_parser("train-reranker", parents=[common], help="train re-ranker weights for the selected schemes")
    sub.add_parser("evaluate", parents=[common], help="decode the test split; write report.json")
    sub.add_parser("calib-report", parents=[common], help="print reliability curves and ECE per scheme")
    sub.add_parser("desync-experiment", parents=[common], help="R3 trained on independent per-domain dev samples")
    ra = sub.add_parser("run-all", parents=[common], help="full pipeline over one or more seeds")
    ra.add_argument("--seeds", type=int, nargs="+", help="run these seeds and write summary.json")
    ra.add_argument("--no-desync", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ConfigurationError(f"{args.config} must hold a JSON object")
        values.update(overrides)
    return ExperimentConfig.from_dict(values)


def _print_table(rows) -> None:
    print(f"{'scheme':<10}{'SemER':>10}{'IE rate':>10}{'ECE':>10}{'rel. impr. %':>14}")
    for r in rows:
        rel = "" if r["relative_improvement"] is None else f"{r['relative_improvement']:.2f}"
        print(f"{r['scheme']:<10}{r['semer']:>10.4f}{r['ie_rate']:>10.4f}{r['ece']:>10.4f}{rel:>14}")


def run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    cmd = args.command
    if cmd == "run-all" and args.seeds:
        summary = run_seeds(cfg, args.seeds, desync=not args.no_desync)
        for scheme, s in summary["schemes"].items():
            print(f"{scheme:<10} SemER {s['semer']['mean']:.4f} ± {s['semer']['stdev']:.4f}   "
                  f"ECE {s['ece']['mean']:.4f} ± {s['ece']['stdev']:.4f}   "
                  f"rel. impr. {s.get('relative_improvement_of_mean', float('nan')):.2f}%")
        if "desync" in summary:
            print(f"desync: R3 relative degradation {summary['desync']['relative_degradation_of_mean']:.3f}%")
        print(f"wrote {Path(cfg.output_dir) / 'summary.json'}")
        return 0

    exp = Experiment(cfg)
    if cmd == "gen-corpus":
        exp.splits()
        print(exp.corpus_stage().dir)
    elif cmd == "train-components":
        exp.components()
        print(exp.components_stage().dir)
    elif cmd == "train-reranker":
        _, tuning = exp.rerankers()
        if tuning:
            print(f"R3 k1, k2 = {tuning['chosen']} (tuned on {tuning['heldout_utterances']} held-out dev utterances)")
        print(exp.rerankers_stage().dir)
    elif cmd == "evaluate":
        _print_table(exp.evaluate()["schemes"])
    elif cmd == "calib-report":
        rep = exp.evaluate()
        sys.stdout.write((exp.root / "curves.tsv").read_text())
        for r in rep["schemes"]:
            print(f"# ECE {r['scheme']}: {r['ece']:.4f}")
    elif cmd in ("desync-experiment", "run-all"):
        if cmd == "run-all":
            _print_table(exp.evaluate()["schemes"])
        if cmd == "desync-experiment" or not args.no_desync:
            rep = exp.desync()
            print(f"R3 SemER full {rep['full_semer']:.4f}  desync {rep['desync_semer']:.4f}  "
                  f"relative degradation {rep['relative_degradation']:.3f}%")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except INVARIANT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
