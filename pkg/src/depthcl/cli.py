"""Command-line entry points.

Verbs: generate (datasets), run (a sequence), eval (a checkpoint on a
dataset), report (tables and curves from manifests), sweep (grid over
hyperparameters). Exit codes: 0 success, 2 configuration error,
3 numeric failure, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import data
from . import harness
from . import metrics as mt
from .errors import ConfigError, ContractError, DataFormatError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthcl",
                                     description="continual depth-completion benchmark harness")
    sub = parser.add_subparsers(dest="verb", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic domain dataset")
    gen.add_argument("--preset", required=True, choices=sorted(data.PRESETS))
    gen.add_argument("--count", type=int, default=200)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output container file")
    gen.add_argument("--height", type=int, default=None)
    gen.add_argument("--width", type=int, default=None)

    run = sub.add_parser("run", help="run a training sequence from a config file")
    run.add_argument("--config", required=True, help="JSON or YAML sequence config")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="override the output directory")
    run.add_argument("--strategy", default=None, help="override the strategy")
    run.add_argument("--resume", action="store_true", help="continue an interrupted run")
    run.add_argument("--no-report", action="store_true", help="skip report emission")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--cap-min", type=float, default=None)
    ev.add_argument("--cap-max", type=float, default=None)
    ev.add_argument("--parallel", action="store_true")

    rep = sub.add_parser("report", help="emit tables and curves from run manifests")
    rep.add_argument("--manifest", required=True, nargs="+")
    rep.add_argument("--out", required=True)
    rep.add_argument("--spto", choices=("mean", "sum"), default="mean")

    sw = sub.add_parser("sweep", help="grid sweep over config values")
    sw.add_argument("--config", required=True,
                    help="config file with a top-level 'sweep' mapping of dotted keys to value lists")
    sw.add_argument("--out", required=True)
    return parser


def _cmd_generate(args) -> int:
    spec = data.preset(args.preset)
    overrides = {}
    if args.height:
        overrides["height"] = args.height
    if args.width:
        overrides["width"] = args.width
    if overrides:
        spec = data.replace(spec, **overrides)
    dataset = data.generate_domain(spec, args.count, args.seed)
    data.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples of {spec.name!r} to {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    raw = harness.SequenceConfig.from_file(args.config).to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out_dir"] = args.out
    if args.strategy is not None:
        raw["strategy"] = args.strategy
    config = harness.SequenceConfig.from_dict(raw)
    manifest = harness.run_sequence(config, resume=args.resume)
    failed = [s for s in manifest.steps if s["status"] == "numeric-failure"]
    if not args.no_report and manifest.completed:
        harness.emit_report(manifest, out_dir=str(harness.Path(config.out_dir) / "report"))
    print(json.dumps({"out_dir": manifest.out_dir, "completed": manifest.completed,
                      "record": manifest.record_path}, indent=2))
    if failed:
        print(f"training aborted on step {failed[0]['index']}: {failed[0].get('error')}",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_eval(args) -> int:
    dataset = data.load_dataset(args.dataset)
    if args.cap_min is not None and args.cap_max is not None:
        cap = mt.RangeCap(args.cap_min, args.cap_max)
    elif dataset.spec is not None:
        cap = mt.RangeCap(dataset.spec.d_min, dataset.spec.d_max)
    else:
        raise ConfigError("dataset has no spec; pass --cap-min and --cap-max")
    frame, skipped = harness.evaluate_checkpoint(args.checkpoint, dataset, cap,
                                                 parallel=args.parallel)
    print(json.dumps({"metrics": frame.as_dict(), "frames": len(dataset),
                      "skipped_empty_mask": skipped}, indent=2))
    return EXIT_OK


def _cmd_report(args) -> int:
    files = harness.emit_report(list(args.manifest), out_dir=args.out,
                                spto_normalization=args.spto)
    print(json.dumps(files, indent=2))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    raw = json.loads(harness.Path(args.config).read_text()) \
        if not str(args.config).endswith((".yaml", ".yml")) else None
    if raw is None:
        import yaml
        raw = yaml.safe_load(harness.Path(args.config).read_text())
    grid = raw.pop("sweep", None)
    if not grid:
        raise ConfigError("sweep config needs a top-level 'sweep' mapping")
    manifests = harness.run_sweep(raw, grid, args.out)
    print(f"swept {len(manifests)} configurations into {args.out}")
    return EXIT_OK


_COMMANDS = {
    "generate": _cmd_generate,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
