"""Command-line entry point: train, eval, and attack subcommands.

Any config key can be overridden on the command line as
``--section.key value`` (for example ``--training.episodes 500``).
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, parse_config
from .experiment import cmd_attack, cmd_eval, cmd_train

USAGE_OVERRIDES = "config overrides: --<section>.<key> <value> (e.g. --training.episodes 500)"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="platoon-privacy",
        description="Parameter-privacy data sharing for mixed-autonomy platoons",
        epilog=USAGE_OVERRIDES,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the distortion policy", epilog=USAGE_OVERRIDES)
    p_train.add_argument("--config", default=None, help="config document (defaults apply if omitted)")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None, help="output directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against both attackers", epilog=USAGE_OVERRIDES)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", default=None)

    p_attack = sub.add_parser("attack", help="replay attackers over a stored stream", epilog=USAGE_OVERRIDES)
    p_attack.add_argument("--config", default=None)
    p_attack.add_argument("--trace", required=True)
    p_attack.add_argument("--checkpoint", default=None, help="needed to replay the policy attacker on filtered streams")
    p_attack.add_argument("--seed", type=int, default=None)
    p_attack.add_argument("--out", default=None)
    return parser


def _collect_overrides(unknown: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(unknown):
        arg = unknown[i]
        if not arg.startswith("--") or "." not in arg:
            raise ConfigError(f"unrecognized argument: {arg}")
        key = arg[2:]
        if "=" in key:
            key, _, val = key.partition("=")
        else:
            i += 1
            if i >= len(unknown):
                raise ConfigError(f"missing value for override {arg}")
            val = unknown[i]
        overrides[key] = val
        i += 1
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)
    try:
        overrides = _collect_overrides(unknown)
        if args.seed is not None:
            overrides["experiment.seed"] = str(args.seed)
        cfg = parse_config(args.config if args.config is not None else "", overrides)

        if args.command == "train":
            ckpt = cmd_train(cfg, args.out)
            print(f"checkpoint written: {ckpt}")
        elif args.command == "eval":
            rows = cmd_eval(cfg, args.checkpoint, args.out)
            for r in rows:
                print(
                    f"{r.theta_label}: sigma_e real {r.sigma_e_real:.4f} filtered {r.sigma_e_filtered:.4f} "
                    f"| SR {r.sr_real:.4f} -> {r.sr_filtered:.4f} "
                    f"| fuel {r.fuel_real:.4f} -> {r.fuel_filtered:.4f} ({r.delta_pct:+.2f}%)"
                )
        elif args.command == "attack":
            out_path = cmd_attack(cfg, args.trace, args.out, args.checkpoint)
            print(f"attack trace written: {out_path}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
