"""Command-line entry points.

Configuration precedence: direct flags > --set overrides > config file >
built-in defaults. All commands print a JSON result object to stdout and
exit nonzero with a structured diagnostic on failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .commands import (RunConfig, apply_overrides, cmd_eval, cmd_phantoms,
                       cmd_pseudo, cmd_train, run_command)
from .errors import ConfigError


def _load_config_dict(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid config syntax ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: config root must be an object")
    return data


def _build_config(args) -> RunConfig:
    data = _load_config_dict(args.config)
    data = apply_overrides(data, args.set or [])
    for flag, key in (("dataset_root", "dataset_root"), ("output_dir", "output_dir"),
                      ("epochs", "epochs"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. mc.tau=0.004")
    parser.add_argument("--dataset-root", dest="dataset_root")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int)


def _emit(result) -> int:
    status, payload = result
    if status == 0:
        obj = payload.to_dict() if hasattr(payload, "to_dict") else payload
        print(json.dumps(obj, indent=2))
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vhskit",
                                     description="keypoint-based heart scoring toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantoms", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--valid", type=int, default=50)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--unlabeled", type=int, default=400)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=2026)
    p.add_argument("--vhs-min", type=float, default=6.5)
    p.add_argument("--vhs-max", type=float, default=11.5)
    p.add_argument("--noise", type=float, default=0.02)

    p = sub.add_parser("train", help="supervised training run")
    _add_run_flags(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("pseudo", help="self-training from a snapshot")
    _add_run_flags(p)
    p.add_argument("--snapshot", required=True)

    p = sub.add_parser("eval", help="score a snapshot on one split")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("serve", help="run the annotation and review service")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--snapshot")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--tau", type=float, default=0.005)
    p.add_argument("--k-passes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-dir")

    args = parser.parse_args(argv)

    if args.command == "phantoms":
        return _emit(run_command(
            cmd_phantoms, args.out, n_train=args.train, n_valid=args.valid,
            n_test=args.test, n_unlabeled=args.unlabeled, side=args.side,
            seed=args.seed, vhs_range=(args.vhs_min, args.vhs_max), noise=args.noise))
    if args.command == "train":
        return _emit(run_command(lambda: cmd_train(_build_config(args))))
    if args.command == "pseudo":
        return _emit(run_command(lambda: cmd_pseudo(_build_config(args), args.snapshot)))
    if args.command == "eval":
        return _emit(run_command(cmd_eval, args.snapshot, args.dataset_root, args.split))
    if args.command == "serve":
        return _serve(args)
    raise AssertionError(f"unhandled command {args.command}")


def _serve(args) -> int:
    import uvicorn

    from .server import create_app

    def build():
        return create_app(args.dataset_root, snapshot_path=args.snapshot, tau=args.tau,
                          k_passes=args.k_passes, seed=args.seed, run_dir=args.run_dir)

    status, app = run_command(lambda: (0, build()))
    if status != 0:
        return status
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except OSError as exc:
        print(json.dumps({"error": {"code": "OSError", "message": str(exc)}}), flush=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
