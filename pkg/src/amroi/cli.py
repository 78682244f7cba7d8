"""``amroi`` command line: gen, train, eval, ablate, gradcheck, report.

Exit codes: 0 success, 2 configuration/usage (including a missing
checkpoint), 3 I/O or file format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment, gradsuite, metrics
from .config import ConfigError, load_config, write_resolved
from .datagen import FormatError, ValidationError, generate_corpus
from .model import VARIANTS, ModelError
from .numerics import ConfigurationError, NonFiniteError
from .plotting import report_figures
from .roi import GeometryError
from .trainer import Dataset, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("amroi")


class UsageError(Exception):
    pass


def _config(args):
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "variant", None):
        over["model.variant"] = args.variant
    if getattr(args, "workers", None):
        over["train.workers"] = args.workers
    return cfg.with_overrides(**over) if over else cfg


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n} is required for {args.command}")


def _dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "manifest.tsv").is_file():
        raise FileNotFoundError(f"no manifest.tsv under {root}")
    return Dataset.load(root)


def cmd_gen(args) -> int:
    _require(args, "out")
    cfg = _config(args)
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    records = generate_corpus(cfg.gen, out)
    write_resolved(cfg, out)
    print(f"wrote {len(records)} patients to {out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "out")
    cfg = _config(args)
    ds = _dataset(args.data)
    vertebrae = experiment.resolve_vertebrae(args.vertebra, cfg)
    results = experiment.run_training(ds, cfg, Path(args.out), vertebrae)
    print("vertebra,fold,best_epoch,val_rmse,val_r,checkpoint")
    for v, cv in results.items():
        for f in cv.folds:
            r = "nan" if f.val_r is None else f"{f.val_r:.6f}"
            print(f"{v},{f.fold},{f.best_epoch},{f.val_rmse:.6f},{r},{f.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "data", "out")
    cfg = _config(args)
    ds = _dataset(args.data)
    run = Path(args.run or args.out)
    vertebrae = experiment.resolve_vertebrae(args.vertebra, cfg)
    report = experiment.evaluate(ds, cfg, run, Path(args.out), vertebrae, oracle=args.oracle)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    _require(args, "data", "out")
    cfg = _config(args)
    ds = _dataset(args.data)
    vertebrae = experiment.resolve_vertebrae(args.vertebra, cfg)
    experiment.run_ablation(ds, cfg, Path(args.out), vertebrae)
    sys.stdout.write((Path(args.out) / "ablation.csv").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, seconds = gradsuite.timed_suite(corrupt=args.corrupt)
    sys.stdout.write(gradsuite.format_results(results))
    failed = [r.name for r in results if not r.passed]
    print(f"# {len(results) - len(failed)}/{len(results)} passed in {seconds:.1f}s")
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run or args.out or ".")
    out = Path(args.out or run)
    out.mkdir(parents=True, exist_ok=True)
    points_path = run / "eval_points.csv"
    if not points_path.is_file():
        raise FileNotFoundError(f"no eval_points.csv under {run}; run `amroi eval` first")
    points = experiment.read_points(points_path)
    abl_path = run / "ablation.csv"
    ablation = experiment.read_ablation(abl_path) if abl_path.is_file() else None
    lines = ["vertebra,n,r,rmse,auc,fit_slope,fit_intercept,r2,ba_mean,ba_lo,ba_hi,ba_outliers"]
    for v, d in points.items():
        p, t = d["pred_bmd"], d["true_bmd"]
        r = metrics.or_undefined(metrics.pearson_r, p, t)
        fit = metrics.or_undefined(metrics.linear_fit, p, t) or (None, None, None)
        ba = metrics.bland_altman(p, t)
        auc = metrics.or_undefined(metrics.roc_auc, -d["pred_t"], d["true_t"] < metrics.OSTEOPOROSIS_T)
        vals = [r, metrics.rmse(p, t), auc, *fit, ba.mean_diff, ba.lo, ba.hi]
        cells = ["undefined" if x is None else f"{x:.6f}" for x in vals]
        lines.append(",".join([v, str(len(p)), *cells, str(ba.outliers)]))
    text = "\n".join(lines) + "\n"
    (out / "report_summary.csv").write_text(text, encoding="utf-8")
    figures = report_figures(points, out, ablation)
    sys.stdout.write(text)
    for f in figures:
        print(f"# figure {f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amroi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        if data:
            sp.add_argument("--data", help="corpus directory holding manifest.tsv")

    common(sub.add_parser("gen", help="generate the synthetic corpus"), data=False)
    for name, helptext in (("train", "cross-validated training"),
                           ("eval", "evaluate fold ensembles on the held-out set"),
                           ("ablate", "compare all variants and the patch-grid sweep")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--vertebra", help="L1..L4 or 'all' (default: config train.vertebra)")
        if name != "ablate":
            sp.add_argument("--variant", choices=VARIANTS)
        if name != "eval":
            sp.add_argument("--workers", type=int, help="parallel fold jobs")
        if name == "eval":
            sp.add_argument("--run", help="training output directory (default: --out)")
            sp.add_argument("--oracle", action="store_true",
                            help="debug: substitute the ground truth for predictions")
    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--corrupt", metavar="OP", help="debug: scale OP's backward (e.g. msa)")
    sp = sub.add_parser("report", help="summary table and matplotlib figures from an eval run")
    sp.add_argument("--run", help="directory with eval_points.csv (and optionally ablation.csv)")
    sp.add_argument("--out", help="figure directory (default: --run)")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except experiment.MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, ConfigError, ModelError, ConfigurationError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ValidationError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
