"""Command-line entry point: ``xferlab <subcommand> --config PATH [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 missing artifact.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import ConsistencyError, DataFormatError
from .evaluation import METRICS
from .model import ConfigurationError
from .pipeline import (Context, MissingArtifactError, StageError, Workspace, inversions,
                       normalize, run_compare_shap, run_pair_study, run_pipeline, run_sweep,
                       stage_ft, stage_gen_data, stage_pretrain, stage_source_supervision, stage_star,
                       stage_target_eval_set)
from .training import NumericFailure

log = logging.getLogger("xferlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4, 5

COMMANDS = ("gen-data", "pretrain", "explain", "finetune", "transfer", "eval", "sweep",
            "pair-study", "compare-shap", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xferlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: runs/<config name>)")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker threads for per-sample work (env XFERLAB_WORKERS)")
        sp.add_argument("--oracle", action="store_true",
                        help="also train the target-supervised model")
        sp.add_argument("--resume", action="store_true",
                        help="reuse artifacts whose fingerprints match")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    workers = args.workers
    if workers is None and os.environ.get("XFERLAB_WORKERS"):
        try:
            workers = int(os.environ["XFERLAB_WORKERS"])
        except ValueError as exc:
            raise ConfigurationError(f"XFERLAB_WORKERS={os.environ['XFERLAB_WORKERS']!r}") from exc
    if workers is not None:
        if workers < 1:
            raise ConfigurationError("--workers must be at least 1")
        cfg = cfg.with_workers(workers)
    return cfg


def _print_selected(res) -> None:
    n = res.normalized(res.selected)
    print(f"{res.source} -> {res.target}: alpha={res.selected.alpha!r} "
          f"lambda2={res.selected.lambda2!r}")
    for m in METRICS:
        print(f"  normalized {m} = {getattr(n, m):.6g}")


def _require_trained(ws: Workspace, cfg: ExperimentConfig) -> None:
    for name in ("base", f"{cfg.source}-ft", f"{cfg.target}-ft"):
        ws.require(name)
    for a in cfg.transfer.alpha_grid:
        ws.require(f"{cfg.source}-ftstar-a{a!r}")


def dispatch(args) -> int:
    cfg = _config(args)
    out = args.out or Path("runs") / args.config.stem
    cmd = args.command
    if cmd in ("sweep", "compare-shap", "transfer", "eval"):
        resume = True
    else:
        resume = args.resume
    if cmd == "pipeline":
        _print_selected(run_pipeline(cfg, out, resume=resume, oracle=args.oracle))
    elif cmd == "pair-study":
        study = run_pair_study(cfg, out, resume=resume)
        print(f"related mean normalized e_rmse = {study.related_mean:.6g}")
        print(f"unrelated mean normalized e_rmse = {study.unrelated_mean:.6g}")
        for name, r in study.correlations.items():
            print(f"pearson {name}: " + (f"r={r.r:.4f} p={r.p:.4g} n={r.n}" if r else "undefined"))
    elif cmd == "sweep":
        table = run_sweep(cfg, out)
        sys.stdout.write(table)
    elif cmd == "compare-shap":
        cmp = run_compare_shap(cfg, out)
        for P, m, lo, hi, n in cmp.rows:
            print(f"P={P}\tkernel_iou_at_10={m:.4f}\t[{lo:.4f}, {hi:.4f}]\tn={n}")
        print(f"model_iou_at_10={cmp.model_iou:.4f}\tcrossover={cmp.crossover or 'none'}"
              f"\tinversions={inversions([r[1] for r in cmp.rows])}")
    elif cmd in ("transfer", "eval"):
        ws = Workspace(out, resume=True)
        _require_trained(ws, cfg)
        res = run_pipeline(cfg, out, ctx=Context(cfg, ws), oracle=args.oracle)
        if cmd == "eval":
            print(f"reference {res.target}-ft: " +
                  " ".join(f"{m}={getattr(res.reference, m):.6g}" for m in METRICS))
            for o in res.outcomes:
                n = normalize(o.report, res.reference)
                print(f"alpha={o.alpha!r} lambda2={o.lambda2!r} " +
                      " ".join(f"{m}={getattr(n, m):.6g}" for m in METRICS))
        else:
            _print_selected(res)
    else:
        ws = Workspace(out, resume=resume)
        ctx = Context(cfg, ws)
        if cmd == "gen-data":
            stage_gen_data(ctx)
        elif cmd == "pretrain":
            stage_pretrain(ctx)
        elif cmd == "explain":
            stage_source_supervision(ctx, cfg.source)
            stage_target_eval_set(ctx, cfg.target)
        elif cmd == "finetune":
            stage_ft(ctx, cfg.target)
            for a in cfg.transfer.alpha_grid:
                stage_star(ctx, cfg.source, a)
                if args.oracle:
                    stage_star(ctx, cfg.target, a)
        ws.save()
        for name in ws.built:
            print(f"built {name}")
        for name in ws.reused:
            print(f"reused {name}")
    return EXIT_OK


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, MissingArtifactError):
        return EXIT_MISSING
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, (DataFormatError, ConsistencyError)):
        return EXIT_DATA
    if isinstance(exc, (NumericFailure, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (ConfigurationError, DataFormatError, ConsistencyError, NumericFailure,
            FloatingPointError, OSError, StageError) as exc:
        stage = f" [{exc.stage}]" if isinstance(exc, StageError) else ""
        print(f"xferlab {args.command}{stage}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
