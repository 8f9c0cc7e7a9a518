"""``irsd2d`` command line: train, sweep, eval, validate-config.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .baselines import SchemeId
from .experiment import (
    SCALE_PRESETS,
    ConfigError,
    ExperimentSpec,
    load_config,
    load_trained,
    parse_config_text,
    run_sweep,
    train_single,
)
from .ppo import evaluate

log = logging.getLogger("irsd2d")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty seed list")
    return values


def _scheme_list(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    for n in names:
        try:
            SchemeId.parse(n)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config (omit for built-in defaults)")
    common.add_argument("--scale", choices=sorted(SCALE_PRESETS), help="training-budget preset")
    common.add_argument("--seed", type=_int_list, help="comma-separated seeds, e.g. 0,1,2")
    common.add_argument("--scheme", type=_scheme_list, help="comma-separated schemes")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="irsd2d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and evaluate on the base config")
    sweep = sub.add_parser("sweep", parents=[common], help="run the configured sweep over schemes and seeds")
    sweep.add_argument("--jobs", type=int, default=1, help="worker processes")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--episodes", type=int, help="evaluation episodes (default: from the checkpoint config)")
    sub.add_parser("validate-config", parents=[common], help="parse a config and print the resolved settings")
    return p


def _load_spec(args) -> ExperimentSpec:
    overrides = {"seeds": args.seed, "schemes": args.scheme, "output_dir": str(args.out) if args.out else None}
    if args.config is None:
        return parse_config_text("", source="<defaults>", scale=args.scale, overrides=overrides)
    return load_config(args.config, scale=args.scale, overrides=overrides)


def _cmd_validate(args) -> int:
    spec = _load_spec(args)
    print(json.dumps(spec.resolved(), indent=2, sort_keys=True))
    print(f"config hash: {spec.config_hash()}")
    return EXIT_OK


def _cmd_train(args) -> int:
    spec = _load_spec(args)
    out = Path(spec.output_dir)
    for scheme in spec.schemes:
        for seed in spec.seeds:
            log.info("training %s seed %d", scheme.value, seed)
            s = train_single(spec, scheme, seed, out)
            print(f"{s['scheme']:<12} seed={s['seed']:<4} mean_sum_rate={s['mean_sum_rate'] / 1e6:.4f} Mbit/s "
                  f"qos_violation_rate={s['qos_violation_rate']:.3f}")
    print(f"outputs in {out}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = _load_spec(args)
    result = run_sweep(spec, jobs=args.jobs, progress=lambda sch, seed: log.info("done %s seed %d", sch.value, seed))
    print(f"{'scheme':<12} {spec.sweep_variable:>10} {'sum-rate [Mbit/s]':>18} {'feasible':>10}")
    for row in result.aggregate():
        print(f"{row['scheme']:<12} {row['sweep_value']:>10} {row['mean_sum_rate'] / 1e6:>18.4f} "
              f"{row['mean_feasible_sum_rate'] / 1e6:>10.4f}")
    print(f"outputs in {spec.output_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    try:
        result, spec, scheme, seed = load_trained(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    seeds = args.seed or [seed]
    for s in seeds:
        ev = evaluate(result, spec.hyper, seed=s, episodes=args.episodes)
        print(f"{scheme.value:<12} seed={s:<4} mean_sum_rate={ev.mean_sum_rate / 1e6:.4f} Mbit/s "
              f"std={ev.std_sum_rate / 1e6:.4f} feasible={ev.mean_feasible_sum_rate / 1e6:.4f} "
              f"qos_violation_rate={ev.qos_violation_rate:.3f}")
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "sweep": _cmd_sweep, "eval": _cmd_eval, "validate-config": _cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; that is a configuration problem here
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
