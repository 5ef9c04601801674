"""Command-line entry point: ``icgp run|collect|train|infer|eval|realize-check``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as ex
from .realization import SUBSTEPS, RealizeDims, format_report, report_json, verify_realization


def _config(args) -> ex.ExperimentConfig:
    overrides = {"seed": args.seed, "round2": True if args.round2 else None}
    if args.config is None:
        return ex.ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    return ex.load_config(args.config, **overrides)


def _pipeline(args, stages) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = ex.Manifest(out, cfg)
    man.write()
    steps = {"collect": ex.stage_collect, "train": ex.stage_train, "infer": ex.stage_infer,
             "eval": ex.stage_eval}
    for name in stages:
        if name == "train" and not (out / "dataset.jsonl").exists():
            raise FileNotFoundError(f"{out / 'dataset.jsonl'} not found; run collect first")
        print(f"[icgp] {name} ...", flush=True)
        steps[name](cfg, out, man)
    if "eval" in stages:
        for label, s in man.data["stages"]["eval"]["summary"].items():
            print(f"  {label:24s} first-window {s['first_window_mean']:.4f}  "
                  f"final-window {s['final_window_mean']:.4f}")
    return 0


def _realize(args) -> int:
    dims = RealizeDims(A=args.A, B=args.B, H=args.H, S=args.S, G=args.G)
    report = verify_realization(dims, trials=args.trials, seed=args.seed or 0,
                                perturb=args.perturb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "realize-report.json").write_text(report_json(report) + "\n")
    print(format_report(report))
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icgp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "collect, train, infer and evaluate"),
                            ("collect", "record context-algorithm pretraining trajectories"),
                            ("train", "pretrain transformers on the collected dataset"),
                            ("infer", "play inference games with the trained checkpoints"),
                            ("eval", "write curves.csv and curves.svg from inference results")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--out", default="out", help="artifact directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--round2", action="store_true",
                        help="round rewards to 2 decimals in dataset.jsonl")
    rc = sub.add_parser("realize-check", help="verify the hand-built transformer fragments")
    rc.add_argument("--out", default="out")
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--trials", type=int, default=50)
    rc.add_argument("--perturb", nargs="?", const=SUBSTEPS[0], choices=SUBSTEPS,
                    help="corrupt one fragment (default: the MWU stack); the check must fail")
    for flag, default in (("A", 3), ("B", 3), ("H", 2), ("S", 2), ("G", 50)):
        rc.add_argument(f"--{flag}", type=int, default=default)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "realize-check":
            return _realize(args)
        stages = ex.STAGES if args.command == "run" else (args.command,)
        return _pipeline(args, stages)
    except (FileNotFoundError, ex.ConfigError, ValueError) as exc:
        print(f"icgp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
