"""Run orchestration behind the CLI: splits, cross-validated training,
evaluation files and the variant ablation."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics, plotting
from .config import RunConfig, write_resolved
from .datagen import VERTEBRAE, holdout_split, split_folds
from .model import PROPOSED, VARIANTS, Model, ModelConfig, load_checkpoint
from .trainer import Dataset, CrossValResult, cross_validate, ensemble_predict

log = logging.getLogger(__name__)

SPLIT_HEADER = "patient_id\trole\tfold"
POINTS_HEADER = "vertebra,patient_id,pred_bmd,true_bmd,pred_t,true_t"
PATCH_SWEEP = (2, 3, 4)


class MissingCheckpointError(FileNotFoundError):
    """A fold checkpoint expected by ``eval`` does not exist."""


def resolve_vertebrae(arg: str | None, cfg: RunConfig) -> list[str]:
    if arg is None:
        return [cfg.train.vertebra]
    if arg == "all":
        return list(VERTEBRAE)
    if arg not in VERTEBRAE:
        raise ValueError(f"unknown vertebra {arg!r}; choose from {VERTEBRAE} or 'all'")
    return [arg]


# -- splits ---------------------------------------------------------------------


def make_split(ds: Dataset, cfg: RunConfig) -> tuple[list[int], list[int], list[int]]:
    """Hold out a test set, then assign the development rows to folds."""
    dev, test = holdout_split(ds.records, cfg.train.test_fraction, cfg.seed)
    folds = split_folds([ds.records[i] for i in dev], cfg.train.folds, cfg.seed)
    return dev, folds, test


def write_split(path: Path, ds: Dataset, dev, folds, test) -> None:
    rows = [SPLIT_HEADER]
    role = {}
    for i, k in zip(dev, folds):
        role[i] = ("dev", k)
    for i in test:
        role[i] = ("test", -1)
    for i, rec in enumerate(ds.records):
        r, k = role[i]
        rows.append(f"{rec.patient_id}\t{r}\t{k}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_split(path: Path, ds: Dataset) -> tuple[list[int], list[int], list[int]]:
    index = {r.patient_id: i for i, r in enumerate(ds.records)}
    dev, folds, test = [], [], []
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SPLIT_HEADER:
        raise ValueError(f"{path}: not a split file")
    for line in lines[1:]:
        pid, role, fold = line.split("\t")
        if pid not in index:
            raise ValueError(f"{path}: patient {pid} missing from the corpus")
        if role == "test":
            test.append(index[pid])
        else:
            dev.append(index[pid])
            folds.append(int(fold))
    return dev, folds, test


# -- training --------------------------------------------------------------------


def run_training(ds: Dataset, cfg: RunConfig, out: Path, vertebrae: Sequence[str],
                 model_cfg: ModelConfig | None = None) -> dict[str, CrossValResult]:
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    dev, folds, test = make_split(ds, cfg)
    write_split(out / "split.tsv", ds, dev, folds, test)
    model_cfg = model_cfg or cfg.model
    results = {}
    for v in vertebrae:
        vdir = out / v
        vdir.mkdir(exist_ok=True)
        results[v] = cross_validate(ds, folds, dev, test, model_cfg,
                                    replace(cfg.train, vertebra=v), cfg.roi, vdir)
        log.info("%s %s: fold val rmse %s", model_cfg.variant, v,
                 [round(f.val_rmse, 4) for f in results[v].folds])
    return results


# -- evaluation ------------------------------------------------------------------


def load_fold_models(run: Path, vertebra: str, n_folds: int) -> list[Model]:
    models = []
    for k in range(n_folds):
        path = run / vertebra / f"fold{k}.ckpt"
        if not path.is_file():
            raise MissingCheckpointError(f"missing checkpoint {path}")
        models.append(load_checkpoint(path)[0])
    return models


def evaluate(ds: Dataset, cfg: RunConfig, run: Path, out: Path, vertebrae: Sequence[str],
             oracle: bool = False) -> metrics.EvalReport:
    """Ensemble the fold checkpoints on the held-out rows and write the report files.

    With ``oracle`` the ground truth stands in for the predictions.
    """
    split_path = run / "split.tsv"
    if split_path.is_file():
        _, _, test = read_split(split_path, ds)
    elif oracle:
        test = list(range(len(ds.records)))
    else:
        raise MissingCheckpointError(f"missing split file {split_path}")
    refs = dict(zip(VERTEBRAE, zip(cfg.gen.ref_mu, cfg.gen.ref_sigma)))
    pred_bmd, truth_bmd, pred_t, truth_t = {}, {}, {}, {}
    for v in vertebrae:
        k = VERTEBRAE.index(v)
        truth = ds.targets(test, v)
        if oracle:
            pred = truth.copy()
        else:
            models = load_fold_models(run, v, cfg.train.folds)
            x = ds.inputs(test, models[0].config, cfg.roi)
            pred = ensemble_predict(models, x)
        pred_bmd[v], truth_bmd[v] = pred, truth
        truth_t[v] = np.array([ds.records[i].t_score[k] for i in test])
        # the oracle reuses the stored T-scores so the round trip is exact
        pred_t[v] = truth_t[v].copy() if oracle else metrics.to_t_score(pred, v, refs)
    patient_pred = patient_truth = None
    if set(vertebrae) == set(VERTEBRAE):
        patient_pred = [[pred_t[v][j] for v in VERTEBRAE] for j in range(len(test))]
        patient_truth = [[truth_t[v][j] for v in VERTEBRAE] for j in range(len(test))]
    report = metrics.build_report(pred_bmd, truth_bmd, pred_t, truth_t, cfg.policy.policies(),
                                  patient_pred, patient_truth)

    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    (out / "eval_report.csv").write_text(report.to_csv(), encoding="utf-8")
    rows = [POINTS_HEADER]
    for v in vertebrae:
        for j, i in enumerate(test):
            rows.append(f"{v},{ds.records[i].patient_id},{pred_bmd[v][j]:.6f},"
                        f"{truth_bmd[v][j]:.6f},{pred_t[v][j]:.6f},{truth_t[v][j]:.6f}")
    (out / "eval_points.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (out / "scatter.svg").write_text(plotting.scatter_svg(truth_bmd, pred_bmd), encoding="utf-8")
    (out / "bland_altman.svg").write_text(plotting.bland_altman_svg(truth_bmd, pred_bmd),
                                          encoding="utf-8")
    return report


def read_points(path: Path) -> dict[str, dict[str, np.ndarray]]:
    """``eval_points.csv`` -> vertebra -> column -> values."""
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != POINTS_HEADER:
        raise ValueError(f"{path}: not an eval_points file")
    cols: dict[str, dict[str, list]] = {}
    for line in lines[1:]:
        v, _pid, *vals = line.split(",")
        d = cols.setdefault(v, {"pred_bmd": [], "true_bmd": [], "pred_t": [], "true_t": []})
        for key, x in zip(("pred_bmd", "true_bmd", "pred_t", "true_t"), vals):
            d[key].append(float(x))
    return {v: {k: np.array(x) for k, x in d.items()} for v, d in cols.items()}


# -- ablation ---------------------------------------------------------------------


def _scores(cv: CrossValResult, ds: Dataset, cfg: RunConfig) -> tuple[float | None, float, float | None]:
    v = cv.vertebra
    k = VERTEBRAE.index(v)
    truth = ds.targets(cv.test_idx, v)
    truth_t = np.array([ds.records[i].t_score[k] for i in cv.test_idx])
    refs = dict(zip(VERTEBRAE, zip(cfg.gen.ref_mu, cfg.gen.ref_sigma)))
    pred_t = metrics.to_t_score(cv.test_predictions, v, refs)
    r = metrics.or_undefined(metrics.pearson_r, cv.test_predictions, truth)
    auc = metrics.or_undefined(metrics.roc_auc, -pred_t, truth_t < metrics.OSTEOPOROSIS_T)
    return r, metrics.rmse(cv.test_predictions, truth), auc


def ablation_header(vertebrae: Sequence[str]) -> str:
    cols = ["kind", "variant", "patch_n", "proposed"]
    for v in vertebrae:
        cols += [f"r_{v}", f"rmse_{v}", f"auc_{v}"]
    return ",".join(cols + ["r_avg"])


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.6f}"


def run_ablation(ds: Dataset, cfg: RunConfig, out: Path, vertebrae: Sequence[str],
                 variants: Sequence[str] = VARIANTS, patch_sweep: Sequence[int] = PATCH_SWEEP):
    """Five variants under one seed, plus the MultiPatch grid-size sweep."""
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    dev, folds, test = make_split(ds, cfg)
    write_split(out / "split.tsv", ds, dev, folds, test)
    done: dict[tuple[str, int], list] = {}
    rows = [ablation_header(vertebrae)]
    jobs = [("variant", v, cfg.model.patch_n) for v in variants]
    jobs += [("patch_sweep", "MultiPatch", n) for n in patch_sweep]
    summary = []
    for kind, variant, n in jobs:
        key = (variant, n if "Patch" in variant else 0)
        if key not in done:
            mcfg = replace(cfg.model, variant=variant, patch_n=n)
            tag = f"{variant}_N{n}" if "Patch" in variant else variant
            res = []
            for v in vertebrae:
                vdir = out / tag / v
                vdir.mkdir(parents=True, exist_ok=True)
                cv = cross_validate(ds, folds, dev, test, mcfg, replace(cfg.train, vertebra=v),
                                    cfg.roi, vdir)
                res.append(_scores(cv, ds, cfg))
                log.info("ablation %s %s: r=%s", tag, v, res[-1][0])
            done[key] = res
        res = done[key]
        rs = [s[0] for s in res]
        r_avg = None if any(r is None for r in rs) else float(np.mean(rs))
        cells = [kind, variant, str(n if "Patch" in variant else 0),
                 "yes" if variant == PROPOSED else "no"]
        for r, e, a in res:
            cells += [_fmt(r), _fmt(e), _fmt(a)]
        rows.append(",".join(cells + [_fmt(r_avg)]))
        summary.append((kind, variant, n, r_avg))
    (out / "ablation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return summary


def read_ablation(path: Path) -> list[dict[str, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, line.split(","))) for line in lines[1:]]
