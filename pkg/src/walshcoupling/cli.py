"""Command-line entry point.

    walshcoupling list
    walshcoupling run <experiment_id|all> [--config FILE] [--out DIR] [--seed U64]
                      [--paths N] [--dt X] [--workers K]
    walshcoupling replay <summary.json> [--out DIR] [--workers K]

Exit codes: 0 all records pass, 1 some acceptance rule failed, 2 bad
configuration, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from typing import Optional, Sequence

from . import experiments as ex
from .errors import ConfigurationError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
log = logging.getLogger("walshcoupling")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p = argparse.ArgumentParser(prog="walshcoupling", description="Walsh Brownian motion coupling experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="print the experiment registry", parents=[common])
    run = sub.add_parser("run", help="run one experiment or all of them", parents=[common])
    run.add_argument("experiment", help="experiment id or 'all'")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--seed", type=lambda s: int(s, 0), default=None, help="master seed (u64)")
    run.add_argument("--paths", type=int, default=None)
    run.add_argument("--dt", type=float, default=None)
    run.add_argument("--workers", type=int, default=None)
    rep = sub.add_parser("replay", help="re-run the configs recorded in a summary JSON", parents=[common])
    rep.add_argument("summary")
    rep.add_argument("--out", default=None)
    rep.add_argument("--workers", type=int, default=None)
    return p


def _configs(experiment: str, base: dict) -> list[ex.ExperimentConfig]:
    ids = ex.experiment_ids() if experiment == "all" else [experiment]
    out = []
    for eid in ids:
        if eid not in ex.REGISTRY:
            raise ConfigurationError(f"unknown experiment {eid!r}; see 'walshcoupling list'")
        kw = dict(base)
        kw["experiment_id"] = eid
        out.append(ex.ExperimentConfig(**kw))
    return out


def _execute(cfgs: list[ex.ExperimentConfig], out_dir: str) -> int:
    records, echo = [], []
    for cfg in cfgs:
        cfg.validate()
    for cfg in cfgs:
        log.info("running %s", cfg.experiment_id)
        recs = ex.run_experiment(cfg)
        records.extend(recs)
        echo.append(asdict(cfg.resolved()))
        for r in recs:
            print(f"{r.experiment_id:4s} {'PASS' if r.passed else 'FAIL'} {r.statistic_name} = {r.estimate:.6g}")
    try:
        csv_path, json_path = ex.emit_results(records, out_dir, {"runs": echo})
    except OSError as exc:
        print(f"error: cannot write results: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK if all(r.passed for r in records) else EXIT_FAIL


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "list":
            for eid in ex.experiment_ids():
                e = ex.REGISTRY[eid]
                print(f"{eid:4s} [{e.claim_ref}] {e.description}")
            return EXIT_OK
        if args.command == "run":
            base = {}
            if args.config:
                try:
                    with open(args.config, encoding="utf-8") as fh:
                        base = ex.parse_config_text(fh.read())
                except OSError as exc:
                    print(f"error: cannot read config: {exc}", file=sys.stderr)
                    return EXIT_IO
                base.pop("experiment_id", None)
            for key, val in (("master_seed", args.seed), ("n_paths", args.paths), ("dt", args.dt),
                             ("workers", args.workers), ("out_dir", args.out)):
                if val is not None:
                    base[key] = val
            cfgs = _configs(args.experiment, base)
            return _execute(cfgs, base.get("out_dir", "results"))
        try:
            with open(args.summary, encoding="utf-8") as fh:
                summary = json.load(fh)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read summary: {exc}", file=sys.stderr)
            return EXIT_IO
        names = {f.name for f in fields(ex.ExperimentConfig)}
        cfgs = []
        for run in summary.get("config", {}).get("runs", []):
            kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in run.items() if k in names}
            if args.workers is not None:
                kw["workers"] = args.workers
            if args.out is not None:
                kw["out_dir"] = args.out
            cfgs.append(ex.ExperimentConfig(**kw))
        if not cfgs:
            raise ConfigurationError("summary holds no recorded runs")
        return _execute(cfgs, cfgs[0].out_dir)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
