"""Command-line entry points: data generation, training, evaluation,
ablation sweeps, and the self-check suites."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import checks, pipeline
from .config import RunConfig, dump_config, load_config
from .numerics import load_checkpoint
from .model import Localizer, VARIANTS
from .synth import SynthConfig, write_dataset, read_dataset


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok)


def _load_run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args.config).data
    cfg = replace(cfg, clips=args.clips, regime=args.regime, seed=args.seed)
    records = pipeline.build_records(cfg, cfg.clips, 0)
    write_dataset(records, args.out)
    print(f"wrote {len(records)} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    run_cfg = _load_run_config(args.config)
    report, _ = pipeline.train(run_cfg, out_dir=args.out_dir)
    last = report.epochs[-1]
    print(f"trained {len(report.epochs)} epochs; final total loss {last['total']:.4f}")
    if report.final_metrics:
        for thr, val in report.final_metrics["ap"].items():
            print(f"AP@{thr}: {val:.4f}")
    print(f"artifacts in {args.out_dir}")
    return 0


def cmd_eval(args) -> int:
    run_cfg = _load_run_config(args.config)
    if args.ap:
        run_cfg = replace(run_cfg, eval=replace(run_cfg.eval, ap_thresholds=_parse_floats(args.ap)))
    if args.ar:
        run_cfg = replace(run_cfg, eval=replace(run_cfg.eval, ar_budgets=_parse_ints(args.ar)))
    records = read_dataset(args.data)
    model = Localizer(run_cfg.model, seed=run_cfg.train.seed)
    model.params.load_state(load_checkpoint(args.ckpt))
    report, _ = pipeline.evaluate_model(model, records, run_cfg)
    out = report.to_json() if args.format == "json" else report.to_csv()
    print(out, end="" if out.endswith("\n") else "\n")
    return 0


def cmd_ablate_steps(args) -> int:
    run_cfg = _load_run_config(args.config)
    csv_text, _ = pipeline.ablate_steps(run_cfg, list(_parse_ints(args.steps)))
    print(csv_text, end="")
    if args.out:
        Path(args.out).write_text(csv_text)
    return 0


def cmd_ablate_structure(args) -> int:
    run_cfg = _load_run_config(args.config)
    report, metrics = pipeline.ablate_structure(run_cfg, args.variant)
    print(f"variant: {args.variant}")
    print(metrics.to_csv(), end="")
    if report.w_a_values:
        mean_w = sum(report.w_a_values) / len(report.w_a_values)
        print(f"mean w_a: {mean_w:.4f}")
    return 0


def cmd_check(args) -> int:
    csv_out = open(args.csv, "w") if args.csv else None
    try:
        passed, lines = checks.run_suite(args.suite, csv_out=csv_out)
    finally:
        if csv_out:
            csv_out.close()
    for line in lines:
        print(line)
    print(f"suite {args.suite}: {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def cmd_show_config(args) -> int:
    print(dump_config(_load_run_config(args.config)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iamsb",
                                     description="Cascaded-bridge forgery localizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=SynthConfig.clips)
    p.add_argument("--regime", choices=["audio", "visual", "both", "mixed"], default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model end to end")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ap", default="0.5,0.75,0.95")
    p.add_argument("--ar", default="10,20,50,100")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate-steps", help="step-budget sweep")
    p.add_argument("--steps", default="2,4,8,12")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate_steps)

    p = sub.add_parser("ablate-structure", help="structural variant run")
    p.add_argument("--variant", required=True, choices=list(VARIANTS))
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_ablate_structure)

    p = sub.add_parser("check", help="run an invariant suite")
    p.add_argument("--suite", required=True, choices=list(checks.SUITES))
    p.add_argument("--csv", default=None, help="sinkhorn diagnostic CSV path")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("show-config", help="print the effective configuration")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_show_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
