"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 feasibility-audit failure,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .attack import AttackDivergence, FeasibilityError
from .harness import ConfigError
from .train import TrainingDivergence

EXIT_OK, EXIT_CONFIG, EXIT_FEASIBILITY, EXIT_DIVERGENCE = 0, 2, 3, 4

# flag name -> ExperimentConfig field
_OVERRIDES = {
    "eps": "eps", "iters": "iterations", "shots": "shots", "perturb": "perturb", "mode": "mode",
    "target_text": "target_text", "fractions": "fractions", "seed": "seed", "workers": "workers",
    "out": "out", "checkpoint": "checkpoint", "records": "n_records", "sweep_iters": "iteration_list",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vlmrobust", description="Adversarial attacks on a toy vision-language captioner.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="attack / selection seed")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--checkpoint", help="model checkpoint path")

    def attack_flags(sp):
        sp.add_argument("--eps", help="l-inf radius, e.g. 4/255")
        sp.add_argument("--iters", type=int, help="APGD iterations")
        sp.add_argument("--shots", type=int, choices=(0, 4))
        sp.add_argument("--perturb", choices=("all", "query"))
        sp.add_argument("--mode", choices=("untargeted", "targeted"))
        sp.add_argument("--target-text", help="target caption or a preset name (short, long)")
        sp.add_argument("--records", type=int, help="number of eval records to attack")

    common(sub.add_parser("train", help="train the captioner and write a checkpoint"))
    common(sub.add_parser("gen-data", help="write the synthetic dataset"))
    a = sub.add_parser("attack", help="attack eval records and score the captions")
    common(a)
    attack_flags(a)
    si = sub.add_parser("sweep-iters", help="attack at several iteration budgets")
    common(si)
    attack_flags(si)
    si.add_argument("--sweep-iters", help="comma-separated budgets, e.g. 1,10,100,500")
    ss = sub.add_parser("sweep-sparsify", help="keep only the largest perturbation entries")
    common(ss)
    attack_flags(ss)
    ss.add_argument("--fractions", help="comma-separated keep fractions")
    r = sub.add_parser("render", help="flatten a report into CSV and curve files")
    r.add_argument("report")
    r.add_argument("--out", help="output directory (default: next to the report)")
    return p


def config_from_args(args) -> harness.ExperimentConfig:
    overrides = {"command": args.command}
    for flag, name in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[name] = v if isinstance(v, str) else v
    return harness.load_config(getattr(args, "config", None), overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "render":
            from pathlib import Path
            out = args.out or str(Path(args.report).with_suffix("")) + "_tables"
            for path in harness.run_render(args.report, out):
                print(path)
            return EXIT_OK
        cfg = config_from_args(args)
        run = {"train": harness.run_train, "gen-data": harness.run_gen_data,
               "attack": harness.run_attack, "sweep-iters": harness.run_iteration_sweep,
               "sweep-sparsify": harness.run_sparsify_sweep}[args.command]
        report = run(cfg)
        for k, v in sorted(report["aggregates"].items()):
            print(f"{k}: {v}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FeasibilityError as e:
        print(f"feasibility audit failed: {e}", file=sys.stderr)
        return EXIT_FEASIBILITY
    except (AttackDivergence, TrainingDivergence) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
