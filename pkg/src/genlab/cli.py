"""``genlab`` command line: builds a config, posts it to the service, saves the record.

Without ``--url`` the service runs in-process.  Exit status is 0 iff every
test in the run passed.
"""
from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import httpx

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # starlette warns about its own httpx transport
    from fastapi.testclient import TestClient

from .harness import COMMANDS, ExperimentConfig, RunRecord, load_config

# flags shared by the subcommands: (flag, destination, type, help)
PARAM_FLAGS = [("--b", "b", float, "branching rate"), ("--a", "a", float, "drift"),
               ("--c", "c", float, "immigration rate"), ("--T", "T", float, "conditioning horizon"),
               ("--cmig", "cmig", float, "migration rate"), ("--kernel", "kernel", str, "nn or uniform")]
OPTION_FLAGS = {
    "simulate": [("--model", "model", str), ("--N", "N", float), ("--K", "K", int), ("--x0", "x0", float),
                 ("--t", "t", float), ("--steps", "steps", int)],
    "verify-duality": [("--degree", "degree", int), ("--N", "N", float), ("--x0", "x0", float),
                       ("--t", "t", float)],
    "cox": [("--x0", "x0", float), ("--t", "t", float), ("--h", "h", float)],
    "yaglom": [("--x0", "x0", float), ("--normalization", "normalization", str), ("--family", "family", str)],
    "backbone": [("--t", "t", float), ("--K", "K", int)],
    "kallenberg": [("--x0", "x0", float), ("--t", "t", float)],
    "spatial": [("--sites", "sites", int), ("--N", "N", float), ("--t", "t", float)],
    "accept": [("--criteria", "criteria", int)],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genlab", description="Genealogy Monte Carlo experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=Path, help="TOML configuration file")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
        p.add_argument("--replicates", type=int)
        p.add_argument("--url", help="service base URL; omitted = in-process")
        for flag, dest, typ, help_ in PARAM_FLAGS:
            p.add_argument(flag, dest=f"param_{dest}", type=typ, help=help_)
        for flag, dest, typ in OPTION_FLAGS[cmd]:
            if dest == "criteria":
                p.add_argument(flag, dest="opt_criteria", type=typ, nargs="+")
            else:
                p.add_argument(flag, dest=f"opt_{dest}", type=typ)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        base = load_config(args.config).model_dump(exclude_none=True)
        if base["command"] != args.command:
            raise SystemExit(f"config is for {base['command']!r}, not {args.command!r}")
    else:
        base = {"command": args.command}
    if args.seed is not None:
        base["seed"] = args.seed
    if args.replicates is not None:
        base["replicates"] = args.replicates
    params = dict(base.get("params", {}))
    options = dict(base.get("options", {}))
    for key, val in vars(args).items():
        if val is None:
            continue
        if key.startswith("param_"):
            params[key[6:]] = val
        elif key.startswith("opt_"):
            options[key[4:]] = val
    base["params"], base["options"] = params, options
    return ExperimentConfig(**base)


def submit(config: ExperimentConfig, url: Optional[str] = None) -> RunRecord:
    body = config.model_dump(mode="json", exclude_none=True)
    if url is None:
        from .service import create_app
        with TestClient(create_app()) as client:
            resp = client.post("/runs", json=body)
    else:
        resp = httpx.post(url.rstrip("/") + "/runs", json=body, timeout=None)
    if resp.status_code != 200:
        raise SystemExit(f"service error {resp.status_code}: {resp.text}")
    return RunRecord.model_validate(resp.json())


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    record = submit(config, args.url)
    path = record.save(args.out)
    for rep in record.reports:
        status = "PASS" if rep["pass"] else "FAIL"
        est = "-" if rep["estimate"] is None else f"{rep['estimate']:.6g}"
        tgt = "-" if rep["paper_target"] is None else f"{rep['paper_target']:.6g}"
        se = "-" if rep["se"] is None else f"{rep['se']:.3g}"
        print(f"[{status}] {rep['statistic']}: estimate {est}, target {tgt}, se {se}")
    if "acceptance.txt" in record.artifacts:
        print(record.artifacts["acceptance.txt"], end="")
    print(f"record: {path}")
    return 0 if record.passed else 1


if __name__ == "__main__":
    sys.exit(main())
