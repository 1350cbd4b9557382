"""Command line: run experiments, inspect checkpoints, aggregate run directories."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from rtsac.envsim import write_ppm
from rtsac.harness import ExperimentConfig, aggregate, load_config_file, run_experiment, write_outputs
from rtsac.nn import describe_parameters, load_parameters, save_parameters

log = logging.getLogger("rtsac")

# flags that map one-to-one onto config keys
_RUN_FLAGS = {
    "arch": str,
    "setting": str,
    "task": str,
    "clock": str,
    "seed": int,
    "budget": float,
}


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict[str, object] = {}
    if args.config:
        values.update(load_config_file(args.config))
    for flag in _RUN_FLAGS:
        v = getattr(args, flag)
        if v is not None:
            values["budget_s" if flag == "budget" else flag] = v
    values.update(_parse_set(args.set))
    return ExperimentConfig.from_mapping(values)


def dump_frames(buffer, out: Path, n: int) -> int:
    stacks = buffer.recent_frames(n)
    out.mkdir(parents=True, exist_ok=True)
    for i, stack in enumerate(stacks):
        newest = stack[-3:].transpose(1, 2, 0) / 255.0
        write_ppm(out / f"frame_{i:04d}.ppm", newest)
    return len(stacks)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    load = load_parameters(args.load_params) if args.load_params else None
    log.info("running %s", json.dumps(dataclasses.asdict(cfg)))
    result = run_experiment(cfg, load_params=load)
    out = Path(args.out)
    summary = write_outputs(result, out)
    if args.save_params:
        save_parameters(result.agent.snapshot(), args.save_params)
    if args.dump_frames:
        dump_frames(result.buffer, out / "frames", args.dump_frames)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    params = load_parameters(args.path)
    print(f"version {params.version}  checksum {params.checksum()}")
    for name, shape in describe_parameters(params):
        print(f"  {name:40s} {shape}")
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    print(json.dumps(aggregate(args.runs), indent=2, sort_keys=True))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtsac", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one agent and write logs")
    run.add_argument("--config", help="flat key = value file; flags override it")
    run.add_argument("--arch", choices=["seq", "async1", "async2"])
    run.add_argument("--setting", help="baseline, highres or largebatch")
    run.add_argument("--task", choices=["reaching", "tracking"])
    run.add_argument("--clock", choices=["virtual", "wall"])
    run.add_argument("--seed", type=int)
    run.add_argument("--budget", type=float, help="training budget in seconds")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any config key")
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--save-params", help="write final parameters here")
    run.add_argument("--load-params", help="initialize from a parameter file")
    run.add_argument("--dump-frames", type=int, default=0, metavar="N", help="write the newest N frames as PPM")
    run.set_defaults(func=cmd_run)

    insp = sub.add_parser("inspect-params", help="list tensors in a parameter file")
    insp.add_argument("path")
    insp.set_defaults(func=cmd_inspect)

    agg = sub.add_parser("aggregate", help="mean and standard error of overall performance")
    agg.add_argument("runs", nargs="+")
    agg.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
