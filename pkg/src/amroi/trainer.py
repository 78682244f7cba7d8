"""SGD training with landmark-consistent augmentation, k-fold cross-validation
and fold ensembling.

Targets are standardised with the training-fold mean/SD before entering the
loss; models carry the scale so predictions come back in g/cm^2.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from . import metrics
from .datagen import VERTEBRAE, Image2D, LandmarkSet, PatientRecord, load_manifest, load_patient
from .model import VARIANTS, Model, ModelConfig, joint_loss, save_checkpoint
from .roi import RoiGeometry, make_modalities

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,split,loss,rmse,r"


class DivergenceError(FloatingPointError):
    """Training loss became non-finite."""


class LeakageError(AssertionError):
    """A held-out patient reached the training set."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 4e-4
    momentum: float = 0.0
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    aug_scale: float = 0.10
    aug_rotation: float = 5.0  # degrees
    aug_translation: float = 0.05  # fraction of the image size
    aug_flip: float = 0.5
    vertebra: str = "L1"
    folds: int = 4
    test_fraction: float = 0.2
    workers: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.vertebra not in VERTEBRAE:
            raise ValueError(f"vertebra must be one of {VERTEBRAE}")

    @property
    def augments(self) -> bool:
        return bool(self.aug_scale or self.aug_rotation or self.aug_translation or self.aug_flip)


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class Affine:
    scale: float = 1.0
    angle: float = 0.0  # degrees, counter-clockwise in image coordinates
    shift: tuple[float, float] = (0.0, 0.0)
    flip: bool = False


def sample_affine(cfg: TrainConfig, rng: np.random.Generator, size: int) -> Affine:
    return Affine(
        scale=1.0 + rng.uniform(-cfg.aug_scale, cfg.aug_scale),
        angle=rng.uniform(-cfg.aug_rotation, cfg.aug_rotation),
        shift=tuple(rng.uniform(-cfg.aug_translation, cfg.aug_translation, size=2) * size),
        flip=bool(rng.random() < cfg.aug_flip),
    )


def _matrix(a: Affine):
    th = math.radians(a.angle)
    c, s = math.cos(th), math.sin(th)
    return a.scale * np.array([[c, -s], [s, c]])


def transform_points(points: np.ndarray, a: Affine, width: int, height: int) -> np.ndarray:
    centre = np.array([(width - 1) / 2, (height - 1) / 2])
    p = np.array(points, dtype=np.float64)
    if a.flip:
        p[:, 0] = (width - 1) - p[:, 0]
    return (p - centre) @ _matrix(a).T + centre + np.asarray(a.shift)


def apply_affine(img: Image2D, lm: LandmarkSet, a: Affine) -> tuple[Image2D, LandmarkSet]:
    """Warp image and landmarks jointly; a flip also swaps left/right groups."""
    h, w = img.pixels.shape
    centre = np.array([(w - 1) / 2, (h - 1) / 2])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    q = np.stack([xx.ravel(), yy.ravel()], axis=1) - centre - np.asarray(a.shift)
    src = q @ np.linalg.inv(_matrix(a)).T + centre
    if a.flip:
        src[:, 0] = (w - 1) - src[:, 0]
    pix = map_coordinates(img.pixels.astype(np.float64), [src[:, 1], src[:, 0]],
                          order=1, mode="nearest").reshape(h, w)

    pts = transform_points(lm.points, a, w, h)
    if a.flip:
        # the anatomical left now appears on the image right: swap groups and
        # keep clavicle points ordered by increasing x
        pts = np.concatenate([pts[3:6][::-1], pts[0:3][::-1], pts[10:14], pts[6:10], pts[14:16]])
    pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
    return Image2D(pix.astype(np.float32), img.spacing), LandmarkSet(pts)


def augment(img: Image2D, lm: LandmarkSet, cfg: TrainConfig, rng: np.random.Generator):
    return apply_affine(img, lm, sample_affine(cfg, rng, img.width))


# -- optimiser --------------------------------------------------------------------


def sgd_step(params: dict, grads: dict, lr: float, wd: float, no_decay=frozenset(),
             momentum: float = 0.0, velocity: dict | None = None) -> dict:
    """``p <- p - lr * (g + wd * p)`` in place; names in ``no_decay`` skip the decay term."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        step = g if (wd == 0 or name in no_decay) else g + wd * p.data
        if momentum:
            buf = velocity.get(name) if velocity is not None else None
            buf = step if buf is None else momentum * buf + step
            if velocity is not None:
                velocity[name] = buf
            step = buf
        p.data -= (lr * step).astype(p.data.dtype, copy=False)
    return params


# -- data ---------------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    records: list[PatientRecord]
    images: list[Image2D] = field(repr=False, default_factory=list)
    landmarks: list[LandmarkSet] = field(repr=False, default_factory=list)

    @classmethod
    def load(cls, root: Path | str) -> "Dataset":
        root = Path(root)
        records = load_manifest(root / "manifest.tsv")
        ds = cls(root, records)
        for r in records:
            img, lm = load_patient(root, r)
            ds.images.append(img)
            ds.landmarks.append(lm)
        return ds

    def targets(self, idx: Sequence[int], vertebra: str) -> np.ndarray:
        return np.array([self.records[i].target(vertebra) for i in idx])

    def inputs(self, idx: Sequence[int], cfg: ModelConfig, geometry: RoiGeometry,
               train_cfg: TrainConfig | None = None, rng=None) -> np.ndarray:
        out = np.empty((len(idx), cfg.n_modalities, cfg.crop_size, cfg.crop_size), np.float32)
        for j, i in enumerate(idx):
            img, lm = self.images[i], self.landmarks[i]
            if train_cfg is not None and train_cfg.augments:
                img, lm = augment(img, lm, train_cfg, rng)
            out[j] = make_modalities(img, lm, cfg.layout, cfg.crop_size, geometry, cfg.patch_n).data
        return out


def audit_partition(records: Sequence[PatientRecord], train: Sequence[int], *held_out: Sequence[int]):
    seen = {records[i].patient_id for i in train}
    for group in held_out:
        leaked = seen & {records[i].patient_id for i in group}
        if leaked:
            raise LeakageError(f"{len(leaked)} held-out patients in training set, e.g. {sorted(leaked)[0]}")


# -- training ------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    val_rmse: float
    val_r: float | None
    best_epoch: int
    checkpoint: Path | None
    test_predictions: np.ndarray | None
    log_rows: list[str]
    model: Model = field(repr=False)


def job_seed(root: int, vertebra: str, fold: int, variant: str, extra: int = 0) -> int:
    ss = np.random.SeedSequence(root, spawn_key=(VERTEBRAE.index(vertebra), fold,
                                                 VARIANTS.index(variant), extra))
    return int(ss.generate_state(1)[0])


def _r_or_none(p, t):
    try:
        return metrics.pearson_r(p, t)
    except (metrics.UndefinedMetricError, ValueError):
        return None


def _fmt_row(epoch, split, loss, rmse_, r):
    r_s = "nan" if r is None else f"{r:.6f}"
    return f"{epoch},{split},{loss:.6f},{rmse_:.6f},{r_s}"


def train_fold(ds: Dataset, train_idx: Sequence[int], val_idx: Sequence[int], fold: int,
               model_cfg: ModelConfig, cfg: TrainConfig, geometry: RoiGeometry = RoiGeometry(),
               test_idx: Sequence[int] = (), checkpoint: Path | str | None = None,
               dtype=np.float32) -> FoldResult:
    """Train one fold model, keep the epoch with the lowest validation RMSE."""
    audit_partition(ds.records, train_idx, val_idx, test_idx)
    seed = job_seed(cfg.seed, cfg.vertebra, fold, model_cfg.variant)
    model = Model.create(model_cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))

    y_train = ds.targets(train_idx, cfg.vertebra)
    model.target_mean = float(y_train.mean())
    model.target_scale = float(y_train.std()) or 1.0
    y_val = ds.targets(val_idx, cfg.vertebra)
    x_val = ds.inputs(val_idx, model_cfg, geometry) if len(val_idx) else None

    no_decay = model.no_decay
    velocity: dict = {}
    best = (math.inf, None, -1, None)
    rows = []
    train_idx = np.asarray(train_idx)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_idx))
        losses, preds, truths = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            sel = train_idx[order[start:start + cfg.batch_size]]
            x = ds.inputs(sel, model_cfg, geometry, cfg, rng)
            y = ds.targets(sel, cfg.vertebra)
            z = (y - model.target_mean) / model.target_scale
            g, loc = model.forward(x)
            loss = joint_loss(g, loc, z, model_cfg.local_weight)
            lv = loss.item()
            if not math.isfinite(lv):
                raise DivergenceError(
                    f"{model_cfg.variant}/{cfg.vertebra} fold {fold}: loss {lv} at epoch {epoch}")
            loss.backward()
            grads = {n: p.grad for n, p in model.params.items()}
            sgd_step(model.params, grads, cfg.lr, cfg.weight_decay, no_decay, cfg.momentum, velocity)
            for p in model.params.values():
                p.grad = None
            losses.append(lv * len(sel))
            preds.append(g.data.astype(np.float64) * model.target_scale + model.target_mean)
            truths.append(y)
        p_tr, t_tr = np.concatenate(preds), np.concatenate(truths)
        rows.append(_fmt_row(epoch, f"fold{fold}/train", sum(losses) / len(train_idx),
                             metrics.rmse(p_tr, t_tr), _r_or_none(p_tr, t_tr)))
        if x_val is not None:
            p_val = predict(model, x_val)
            z_val = (y_val - model.target_mean) / model.target_scale
            v_loss = float(np.mean(((p_val - model.target_mean) / model.target_scale - z_val) ** 2))
            v_rmse = metrics.rmse(p_val, y_val)
            v_r = _r_or_none(p_val, y_val)
            rows.append(_fmt_row(epoch, f"fold{fold}/val", v_loss, v_rmse, v_r))
            if v_rmse < best[0]:
                best = (v_rmse, v_r, epoch, {n: p.data.copy() for n, p in model.params.items()})
        log.info("%s %s fold %d epoch %d: %s", model_cfg.variant, cfg.vertebra, fold, epoch, rows[-1])

    if best[3] is not None:
        for n, arr in best[3].items():
            model.params[n].data = arr
    else:
        best = (math.nan, None, cfg.epochs, None)
    path = None
    if checkpoint is not None:
        path = Path(checkpoint)
        save_checkpoint(path, model, {"fold": fold, "vertebra": cfg.vertebra,
                                      "best_epoch": best[2], "val_rmse": best[0]})
    test_pred = None
    if len(test_idx):
        test_pred = predict(model, ds.inputs(test_idx, model_cfg, geometry))
    return FoldResult(fold, best[0], best[1], best[2], path, test_pred, rows, model)


def predict(model: Model, x: np.ndarray, batch: int = 32) -> np.ndarray:
    return np.concatenate([model.predict(x[i:i + batch]) for i in range(0, len(x), batch)]) \
        if len(x) else np.empty(0)


def ensemble_predict(models: Sequence[Model], x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the models' global predictions."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    return np.mean([predict(m, x) for m in models], axis=0)


# -- cross-validation orchestration -------------------------------------------------------


@dataclass
class CrossValResult:
    vertebra: str
    variant: str
    folds: list[FoldResult]
    test_idx: list[int]
    test_predictions: np.ndarray  # fold ensemble
    log_rows: list[str]


def _fold_job(args):
    ds, tr, va, k, mcfg, tcfg, geom, te, ckpt = args
    res = train_fold(ds, tr, va, k, mcfg, tcfg, geom, te, ckpt)
    return res


def cross_validate(ds: Dataset, folds: Sequence[int], dev_idx: Sequence[int], test_idx: Sequence[int],
                   model_cfg: ModelConfig, cfg: TrainConfig, geometry: RoiGeometry = RoiGeometry(),
                   out_dir: Path | str | None = None) -> CrossValResult:
    """Train ``cfg.folds`` models on the development rows; ensemble them on ``test_idx``.

    ``folds`` holds a fold index for each entry of ``dev_idx``.
    """
    dev_idx, folds = np.asarray(dev_idx), np.asarray(folds)
    jobs = []
    for k in range(cfg.folds):
        tr, va = dev_idx[folds != k].tolist(), dev_idx[folds == k].tolist()
        ckpt = Path(out_dir) / f"fold{k}.ckpt" if out_dir is not None else None
        jobs.append((ds, tr, va, k, model_cfg, cfg, geometry, list(test_idx), ckpt))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    rows = [r for res in results for r in res.log_rows]
    if out_dir is not None:
        Path(out_dir, "train_log.csv").write_text(
            LOG_HEADER + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    if len(test_idx):
        ens = np.mean([r.test_predictions for r in results], axis=0)
    else:
        ens = np.empty(0)
    return CrossValResult(cfg.vertebra, model_cfg.variant, results, list(test_idx), ens, rows)


def train_all_vertebrae(ds: Dataset, folds, dev_idx, test_idx, model_cfg: ModelConfig,
                        cfg: TrainConfig, geometry: RoiGeometry = RoiGeometry(),
                        out_dir: Path | str | None = None,
                        vertebrae: Sequence[str] = VERTEBRAE) -> dict[str, CrossValResult]:
    """Independent cross-validated runs, one per lumbar vertebra."""
    out = {}
    for v in vertebrae:
        vdir = None
        if out_dir is not None:
            vdir = Path(out_dir) / v
            vdir.mkdir(parents=True, exist_ok=True)
        out[v] = cross_validate(ds, folds, dev_idx, test_idx, model_cfg,
                                replace(cfg, vertebra=v), geometry, vdir)
    return out
