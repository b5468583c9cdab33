"""Command-line entry point: run, sweep, gradcheck, replay, analyze.

Exit codes: 0 success, 1 user error (bad flags, bad config, bad files,
failed gradient check), 2 internal error.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from .env import ConfigError
from .harness import NonFiniteLossError, load_config, run_experiment, run_single
from .metrics import ArtifactError, analyze, analyze_csv
from .nets import NetworkSpec, gradient_check
from .render import render_frames_file

USER_ERRORS = (ConfigError, ArtifactError, FileNotFoundError, NonFiniteLossError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridrelay", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="train one population from a config file")
    p_run.add_argument("--config", required=True, help="config file (key = value lines)")
    p_run.add_argument("--seed", type=int, default=None, help="override master_seed")
    p_run.add_argument("--out", default=None, help="override the run output directory")

    p_sweep = sub.add_parser("sweep", help="run the config's full sweep grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--workers", type=int, default=1, help="parallel run processes")

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--seed", type=int, default=0)

    p_replay = sub.add_parser("replay", help="render recorded frames as text grids")
    p_replay.add_argument("--frames", required=True, help="frames.jsonl file")

    p_an = sub.add_parser("analyze", help="aggregate run directories into a table")
    p_an.add_argument("--runs", nargs="+", required=True, help="run directories")
    p_an.add_argument("--window", type=int, default=None, help="trailing episode window")
    p_an.add_argument("--out", default=None, help="write CSV here instead of stdout")

    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    run_dir = Path(args.out) if args.out is not None else Path(cfg.out_dir) / (
        f"agents{cfg.env.n_agents}_bneck"
        f"{'unlimited' if cfg.env.bottleneck is None else cfg.env.bottleneck}"
        f"_seed{cfg.master_seed}"
    )
    summary = run_single(
        cfg.env,
        cfg.algo,
        cfg.dqn,
        cfg.a2c,
        cfg.train_episodes,
        master_seed=cfg.master_seed,
        run_dir=run_dir,
        record_frames_episodes=cfg.record_frames_episodes,
    )
    pop = summary["population"]
    print(f"run written to {run_dir}")
    print(
        f"total_reward={pop['total_reward']:.3f} "
        f"mean_specialization={pop['mean_specialization']:.3f} "
        f"fairness={pop['fairness'] if pop['fairness'] is not None else 'n/a'}"
    )
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    results = run_experiment(cfg, workers=args.workers)
    failed = 0
    for run_dir, error in results:
        if error is None:
            print(f"ok    {run_dir}")
        else:
            failed += 1
            print(f"FAIL  {run_dir}: {error}")
    print(f"{len(results) - failed}/{len(results)} runs completed")
    return 0 if failed == 0 else 1


def _cmd_gradcheck(args) -> int:
    if args.tolerance <= 0:
        raise ConfigError(f"tolerance must be positive, got {args.tolerance}")
    # reduced widths keep the element-wise sweep quick; every layer type
    # and both heads are still exercised
    ok = True
    for head in ("dueling", "actor_critic"):
        spec = NetworkSpec(head=head, conv_channels=(4, 6), dense_units=16)
        report = gradient_check(spec, seed=args.seed, tolerance=args.tolerance)
        print(report.summary())
        ok = ok and report.passed
    return 0 if ok else 1


def _cmd_replay(args) -> int:
    print(render_frames_file(args.frames), end="")
    return 0


def _cmd_analyze(args) -> int:
    groups, errors = analyze(args.runs, window=args.window)
    for err in errors:
        print(f"warning: {err}", file=sys.stderr)
    text = analyze_csv(groups)
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    if not groups and errors:
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "run": _cmd_run,
            "sweep": _cmd_sweep,
            "gradcheck": _cmd_gradcheck,
            "replay": _cmd_replay,
            "analyze": _cmd_analyze,
        }[args.command]
        return handler(args)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
