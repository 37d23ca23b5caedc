"""Command line driver for the batch experiments.

Subcommands: ``is-vs-mf``, ``saob-sweep``, ``table1``, ``validate``, and
``weights``.  All experiment settings live in one JSON config file (see
README); the effective config, with every default materialized, is written
next to the outputs so a run can be reproduced byte for byte.

Exit codes: 0 success, 1 usage or config error, 2 validation failure,
3 numerical failure.  Set ``GACV_LOG`` to change the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .covariance import ModelEnsembleSpec, SampleDesign, assemble_block_covariance
from .reporting import heatmap_svg, histogram_svg, write_csv, write_json, write_jsonl
from .weights import (
    DegenerateDesignError,
    InfeasibleConstraintError,
    estimator_variance,
    optimal_weights,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("gacv")


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return data


def _section(config: dict, name: str, args) -> dict:
    """Experiment section merged with the shared/CLI-level overrides."""
    section = dict(config.get(name, {}))
    if "seed" not in section and "seed" in config:
        section["seed"] = config["seed"]
    if args.seed is not None:
        section["seed"] = args.seed
    if args.trials is not None and name == "validate":
        section["trials"] = args.trials
    return section


def _threads(config: dict, args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(config.get("threads", 1)))


def _outdir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_is_vs_mf(args) -> int:
    config = _load_config(args.config)
    cfg = experiments.IsVsMfConfig.from_dict(_section(config, "is_vs_mf", args))
    result = experiments.run_is_vs_mf(cfg, threads=_threads(config, args))
    finite = result.ratio_grid[np.isfinite(result.ratio_grid)]
    print(
        f"is-vs-mf: {len(result.rows)} cells, rho={cfg.rho}, n={cfg.n}; "
        f"ratio range [{finite.min():.4f}, {finite.max():.4f}], "
        f"max at (m1={result.max_cell[0]}, extra_m2={result.max_cell[1]})"
    )
    out = _outdir(args)
    if out is not None:
        fields = [
            "experiment", "seed", "rho01", "rho02", "rho12", "n",
            "m1", "extra_m2", "m2", "variance_a", "variance_b", "ratio",
        ]
        write_csv(out / "is_vs_mf.csv", fields, result.rows)
        heatmap_svg(
            out / "is_vs_mf.svg",
            cfg.m1_grid,
            cfg.extra_m2_grid,
            result.ratio_grid,
            xlabel="evaluations of model 1 (m1)",
            ylabel="extra evaluations of model 2 (m2 - m1)",
            title=f"variance ratio, independent / reuse (rho={cfg.rho})",
        )
        write_json(out / "config.json", {"experiment": "is-vs-mf", "is_vs_mf": cfg.to_dict()})
        log.info("wrote %s", out / "is_vs_mf.csv")
    return EXIT_OK


def _cmd_saob_sweep(args) -> int:
    config = _load_config(args.config)
    cfg = experiments.SaobSweepConfig.from_dict(_section(config, "saob_sweep", args))
    result = experiments.run_saob_sweep(cfg, threads=_threads(config, args))
    for key, stats in result.summary["pairs"].items():
        print(
            f"saob-sweep (L,M)=({key}): {stats['completed']}/{stats['instances']} ok, "
            f"{stats['skipped']} skipped, fraction ratio>1 = "
            f"{stats['fraction_ratio_gt_1']:.3f}, max ratio = {stats['max_ratio']:.4f}"
        )
    out = _outdir(args)
    if out is not None:
        fields = [
            "experiment", "seed", "L", "M", "instance",
            "variance_a", "variance_b", "ratio", "status",
        ]
        write_csv(out / "saob_sweep.csv", fields, result.rows)
        series = {}
        for L, M in cfg.pairs:
            ratios = [
                r["ratio"] for r in result.rows
                if r["L"] == L and r["M"] == M and r["status"] == "ok"
            ]
            series[f"L={L},M={M}"] = ratios
        histogram_svg(
            out / "saob_sweep.svg",
            series,
            bins=cfg.bins,
            xlabel="variance ratio, independent groups / nested reuse",
            title="allocation sweep",
        )
        write_json(out / "summary.json", result.summary)
        write_jsonl(out / "allocations.jsonl", result.allocations)
        write_json(out / "config.json", {"experiment": "saob-sweep", "saob_sweep": cfg.to_dict()})
        log.info("wrote %s", out / "saob_sweep.csv")
    return EXIT_OK


def _cmd_table1(args) -> int:
    result = experiments.run_table1_demo()
    print(result.render())
    out = _outdir(args)
    if out is not None:
        rows = []
        for k, row in enumerate(result.rows):
            for l in range(result.num_lowfi + 1):
                rows.append(
                    {
                        "group": k + 1,
                        "model": l,
                        "mlb_evals": row["mlb"] if l in row["members"] else 0,
                        "gacv_evals": row["gacv"] if l in row["members"] else 0,
                    }
                )
        write_csv(out / "table1.csv", ["group", "model", "mlb_evals", "gacv_evals"], rows)
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = _load_config(args.config)
    cfg = experiments.ValidateConfig.from_dict(_section(config, "validate", args))
    result = experiments.run_validate(cfg)
    print(result.render())
    out = _outdir(args)
    if out is not None:
        rows = [
            {"replicate_index": i, "estimate": v} for i, v in enumerate(result.values)
        ]
        write_csv(out / "replicates.csv", ["replicate_index", "estimate"], rows)
        payload = result.summary.to_dict()
        payload["analytic_var"] = result.analytic_variance
        payload["analytic_mean"] = result.analytic_mean
        payload["mean_z"] = result.mean_z
        payload["var_z"] = result.var_z
        write_json(out / "summary.json", payload)
        write_json(out / "config.json", {"experiment": "validate", "validate": cfg.to_dict()})
    return EXIT_OK if result.ok else EXIT_VALIDATION


def _cmd_weights(args) -> int:
    if args.config is None:
        raise ConfigError("weights requires --config with a spec+design JSON file")
    config = _load_config(args.config)
    if "spec" not in config or "design" not in config:
        raise ConfigError("weights config needs 'spec' and 'design' entries")
    spec = ModelEnsembleSpec.from_json(json.dumps(config["spec"]))
    design = SampleDesign.from_json(json.dumps(config["design"]), num_lowfi=spec.num_lowfi)
    C = assemble_block_covariance(spec, design)
    weights = optimal_weights(C, design.scheme)
    print(weights.to_json())
    out = _outdir(args)
    if out is not None:
        write_json(
            out / "weights.json",
            {
                "weights": [b.tolist() for b in weights.per_group],
                "variance": estimator_variance(weights, C),
                "groups": [list(g) for g in design.scheme.groups],
            },
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gacv",
        description="grouped control-variate estimator experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler, blurb in (
        ("is-vs-mf", _cmd_is_vs_mf, "independent-samples vs sample-reuse ratio grid"),
        ("saob-sweep", _cmd_saob_sweep, "random-problem allocation sweep histogram"),
        ("table1", _cmd_table1, "worked allocation-conversion table"),
        ("validate", _cmd_validate, "empirical check of a fixture against analytic moments"),
        ("weights", _cmd_weights, "optimal weights for a user-supplied spec+design"),
    ):
        p = sub.add_parser(name, help=blurb, description=blurb)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory for CSV/SVG/JSON artifacts")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--trials", type=int, help="override replicate count (validate)")
        p.add_argument("--threads", type=int, help="worker threads for grid/sweep cells")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("GACV_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateDesignError, InfeasibleConstraintError, np.linalg.LinAlgError) as exc:
        log.error("%s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
