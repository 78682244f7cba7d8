"""Regression, agreement and osteoporosis-screening statistics.

T-score conventions: a ground-truth case is osteoporotic when its T-score is
below -2.5; a prediction is called positive when its T-score is below the
policy threshold for that vertebra. Rates whose denominator is empty are
returned as ``None`` ("undefined"), never as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

VERTEBRAE = ("L1", "L2", "L3", "L4")
OSTEOPOROSIS_T = -2.5
OSTEOPENIA_T = -1.0
FLEX_THRESHOLDS = (-2.2, -2.1, -2.0, -1.9)
UNIFIED_THRESHOLDS = (-1.75, -2.0, -2.25, -2.5)


class UndefinedMetricError(ValueError):
    """The statistic is undefined for the given input (e.g. constant vector)."""


@dataclass(frozen=True)
class ThresholdPolicy:
    name: str
    thresholds: tuple[float, float, float, float]
    truth_threshold: float = OSTEOPOROSIS_T

    def __post_init__(self):
        if len(self.thresholds) != 4 or not all(math.isfinite(t) for t in self.thresholds):
            raise ValueError(f"policy {self.name}: need 4 finite thresholds")

    def threshold(self, vertebra: str) -> float:
        return self.thresholds[VERTEBRAE.index(vertebra)]

    @classmethod
    def unified(cls, t: float) -> "ThresholdPolicy":
        return cls(f"unified{t:g}", (t, t, t, t))

    @classmethod
    def flex(cls, thresholds=FLEX_THRESHOLDS) -> "ThresholdPolicy":
        return cls("flex", tuple(thresholds))


def default_policies() -> list[ThresholdPolicy]:
    return [ThresholdPolicy.unified(t) for t in UNIFIED_THRESHOLDS] + [ThresholdPolicy.flex()]


def _pair(pred, truth, min_len=1):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} pairs, got {p.size}")
    return p, t


# -- regression quality -----------------------------------------------------------


def pearson_r(pred, truth) -> float:
    p, t = _pair(pred, truth, 2)
    pc, tc = p - p.mean(), t - t.mean()
    denom = math.sqrt(float(pc @ pc) * float(tc @ tc))
    if denom == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return float(np.clip((pc @ tc) / denom, -1.0, 1.0))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def linear_fit(pred, truth) -> tuple[float, float, float]:
    """Least-squares line ``pred ~ A * truth + B`` and its R^2."""
    p, t = _pair(pred, truth, 2)
    tc = t - t.mean()
    sxx = float(tc @ tc)
    if sxx == 0.0:
        raise UndefinedMetricError("fit undefined for constant ground truth")
    slope = float(tc @ (p - p.mean())) / sxx
    intercept = float(p.mean() - slope * t.mean())
    resid = p - (slope * t + intercept)
    sst = float(((p - p.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    return slope, intercept, r2


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    sd_diff: float
    lo: float
    hi: float
    outliers: int
    n: int


def bland_altman(pred, truth) -> BlandAltman:
    """Limits of agreement on ``pred - truth`` with the sample SD (n - 1)."""
    p, t = _pair(pred, truth, 2)
    d = p - t
    m = float(d.mean())
    sd = float(d.std(ddof=1))
    lo, hi = m - 1.96 * sd, m + 1.96 * sd
    out = int(np.count_nonzero((d < lo) | (d > hi)))
    return BlandAltman(m, sd, lo, hi, out, d.size)


# -- classification --------------------------------------------------------------


def to_t_score(bmd, vertebra: str, refs: Mapping[str, tuple[float, float]]):
    """``(bmd - mu_ref) / sigma_ref`` for the vertebra's reference pair."""
    if vertebra not in refs:
        raise KeyError(f"no T-score reference for {vertebra}")
    mu, sigma = refs[vertebra]
    if not sigma > 0:
        raise ValueError(f"reference sigma for {vertebra} must be positive")
    return (np.asarray(bmd, dtype=np.float64) - mu) / sigma if np.ndim(bmd) else (bmd - mu) / sigma


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined with a single class")
    ranks = rankdata(s)  # average ranks for ties
    u = float(ranks[y].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _rate(num: int, den: int) -> float | None:
    return num / den if den else None


def sens_spec(pred_t, truth_t, threshold: float, truth_threshold: float = OSTEOPOROSIS_T):
    """Sensitivity and specificity of ``pred_t < threshold`` against ``truth_t < truth_threshold``."""
    p, t = _pair(pred_t, truth_t)
    pos = t < truth_threshold
    called = p < threshold
    tp = int(np.count_nonzero(called & pos))
    tn = int(np.count_nonzero(~called & ~pos))
    return _rate(tp, int(pos.sum())), _rate(tn, int((~pos).sum()))


def sens_spec_policy(pred_t: Mapping[str, Sequence[float]], truth_t: Mapping[str, Sequence[float]],
                     policy: ThresholdPolicy) -> dict[str, tuple[float | None, float | None]]:
    return {v: sens_spec(pred_t[v], truth_t[v], policy.threshold(v), policy.truth_threshold)
            for v in pred_t}


@dataclass
class PatientLevel:
    osteoporosis_sens: float | None
    osteoporosis_spec: float | None
    osteopenia_sens: float | None
    osteopenia_spec: float | None
    n_patients: int
    skipped: int


def patient_level(pred_t, truth_t, policy: ThresholdPolicy) -> PatientLevel:
    """Patient-level screening from per-vertebra T-scores.

    ``pred_t``/``truth_t`` are sequences of 4-vectors (L1..L4); a patient with
    a missing (None/NaN) value is skipped. Osteoporosis: any vertebra below
    its threshold. Osteopenia: not osteoporotic and any vertebra below -1.
    Osteopenia sensitivity is measured on truly osteopenic patients and
    specificity on truly normal ones; a normal patient is a false positive
    when called osteopenic.
    """
    thr = np.array(policy.thresholds)
    tp = fn = tn = fp = 0
    ptp = pfn = ptn = pfp = 0
    n = skipped = 0
    for pv, tv in zip(pred_t, truth_t):
        pv = np.array([np.nan if x is None else x for x in pv], dtype=np.float64)
        tv = np.array([np.nan if x is None else x for x in tv], dtype=np.float64)
        if pv.size != 4 or tv.size != 4 or not (np.all(np.isfinite(pv)) and np.all(np.isfinite(tv))):
            skipped += 1
            continue
        n += 1
        truth_porosis = bool(np.any(tv < policy.truth_threshold))
        pred_porosis = bool(np.any(pv < thr))
        if truth_porosis:
            tp += pred_porosis
            fn += not pred_porosis
        else:
            fp += pred_porosis
            tn += not pred_porosis
            truth_penia = bool(np.any(tv < OSTEOPENIA_T))
            pred_penia = (not pred_porosis) and bool(np.any(pv < OSTEOPENIA_T))
            if truth_penia:
                ptp += pred_penia
                pfn += not pred_penia
            else:
                pfp += pred_penia
                ptn += not pred_penia
    return PatientLevel(_rate(tp, tp + fn), _rate(tn, tn + fp),
                        _rate(ptp, ptp + pfn), _rate(ptn, ptn + pfp), n, skipped)


# -- report -------------------------------------------------------------------------


VERTEBRA_METRICS = ("r", "rmse", "fit_slope", "fit_intercept", "r2", "ba_mean", "ba_sd",
                    "ba_lo", "ba_hi", "ba_outliers", "auc", "sensitivity", "specificity")
PATIENT_METRICS = ("osteoporosis_sens", "osteoporosis_spec", "osteopenia_sens",
                   "osteopenia_spec", "n_patients", "skipped")


def or_undefined(fn, *args):
    """``fn(*args)``, or ``None`` when the metric is undefined for the input."""
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


@dataclass
class EvalReport:
    """Rows of ``(vertebra, metric, policy, value)``; ``None`` values are undefined."""

    rows: list[tuple[str, str, str, float | int | None]] = field(default_factory=list)

    def value(self, vertebra: str, metric: str, policy: str):
        for v, m, p, x in self.rows:
            if (v, m, p) == (vertebra, metric, policy):
                return x
        raise KeyError((vertebra, metric, policy))

    def to_csv(self) -> str:
        out = ["vertebra,metric,policy,value"]
        for v, m, p, x in self.rows:
            if x is None:
                s = "undefined"
            elif isinstance(x, (int, np.integer)):
                s = str(int(x))
            else:
                s = f"{x:.6f}"
            out.append(f"{v},{m},{p},{s}")
        return "\n".join(out) + "\n"


def vertebra_metrics(pred_bmd, truth_bmd, pred_t, truth_t, policy: ThresholdPolicy,
                     vertebra: str) -> dict[str, float | int | None]:
    fit = or_undefined(linear_fit, pred_bmd, truth_bmd) or (None, None, None)
    ba = bland_altman(pred_bmd, truth_bmd) if len(pred_bmd) >= 2 else None
    labels = np.asarray(truth_t) < policy.truth_threshold
    sens, spec = sens_spec(pred_t, truth_t, policy.threshold(vertebra), policy.truth_threshold)
    return {
        "r": or_undefined(pearson_r, pred_bmd, truth_bmd),
        "rmse": rmse(pred_bmd, truth_bmd),
        "fit_slope": fit[0],
        "fit_intercept": fit[1],
        "r2": fit[2],
        "ba_mean": ba.mean_diff if ba else None,
        "ba_sd": ba.sd_diff if ba else None,
        "ba_lo": ba.lo if ba else None,
        "ba_hi": ba.hi if ba else None,
        "ba_outliers": ba.outliers if ba else None,
        "auc": or_undefined(roc_auc, -np.asarray(pred_t, dtype=float), labels),
        "sensitivity": sens,
        "specificity": spec,
    }


def build_report(pred_bmd: Mapping[str, np.ndarray], truth_bmd: Mapping[str, np.ndarray],
                 pred_t: Mapping[str, np.ndarray], truth_t: Mapping[str, np.ndarray],
                 policies: Sequence[ThresholdPolicy],
                 patient_pred_t=None, patient_truth_t=None) -> EvalReport:
    """Per-vertebra metrics for every policy, plus patient-level rows when given."""
    report = EvalReport()
    for v in VERTEBRAE:
        if v not in pred_bmd:
            continue
        for pol in policies:
            vals = vertebra_metrics(pred_bmd[v], truth_bmd[v], pred_t[v], truth_t[v], pol, v)
            report.rows.extend((v, m, pol.name, vals[m]) for m in VERTEBRA_METRICS)
    if patient_pred_t is not None:
        for pol in policies:
            pl = patient_level(patient_pred_t, patient_truth_t, pol)
            report.rows.extend(("patient", m, pol.name, getattr(pl, m)) for m in PATIENT_METRICS)
    return report
