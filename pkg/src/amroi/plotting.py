"""Figures: dependency-free SVG plots for ``eval`` and matplotlib PNGs for ``report``.

The SVG writers draw the fit line and the +-1.96 SD limits as ``<line>``
elements so downstream tools can read them back.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metrics

_PANEL = 240
_PAD = 30


def _scale(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda x: a + (x - lo) / span * (b - a)


def _panel(ox, title, xs, ys, lines, xlabel, ylabel):
    """One panel; ``lines`` holds (x0, y0, x1, y1, css class) in data units."""
    lo_x, hi_x = float(np.min(xs)), float(np.max(xs))
    ys_all = np.concatenate([ys, [l[1] for l in lines], [l[3] for l in lines]]) if lines else ys
    lo_y, hi_y = float(np.min(ys_all)), float(np.max(ys_all))
    sx = _scale(lo_x, hi_x, ox + _PAD, ox + _PANEL - 10)
    sy = _scale(lo_y, hi_y, _PANEL - _PAD, 20)
    out = [f'<g class="panel"><text x="{ox + _PANEL / 2:.1f}" y="14" text-anchor="middle">{title}</text>',
           f'<rect x="{ox + _PAD}" y="20" width="{_PANEL - _PAD - 10}" height="{_PANEL - _PAD - 20}" '
           'fill="none" stroke="#999"/>']
    for x, y in zip(xs, ys):
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="1.5"/>')
    for x0, y0, x1, y1, cls in lines:
        out.append(f'<line class="{cls}" x1="{sx(x0):.2f}" y1="{sy(y0):.2f}" '
                   f'x2="{sx(x1):.2f}" y2="{sy(y1):.2f}"/>')
    out.append(f'<text x="{ox + _PANEL / 2:.1f}" y="{_PANEL - 5}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="{ox + 8}" y="{_PANEL / 2:.1f}" transform="rotate(-90 {ox + 8} {_PANEL / 2:.1f})" '
               f'text-anchor="middle">{ylabel}</text></g>')
    return out


def _svg(panels: list[list[str]]) -> str:
    w = _PANEL * max(len(panels), 1)
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{_PANEL}" '
            f'viewBox="0 0 {w} {_PANEL}" font-size="10" font-family="sans-serif">\n'
            '<style>circle{fill:#1f77b4;fill-opacity:.5} line.fit{stroke:#d62728;stroke-width:1.5} '
            'line.identity{stroke:#777;stroke-dasharray:3 2} line.mean{stroke:#2ca02c} '
            'line.limit{stroke:#d62728;stroke-dasharray:4 2}</style>\n')
    return head + "\n".join(s for p in panels for s in p) + "\n</svg>\n"


def scatter_svg(truth: Mapping[str, np.ndarray], pred: Mapping[str, np.ndarray]) -> str:
    """Predicted vs reference BMD per vertebra with the least-squares line."""
    panels = []
    for i, v in enumerate(truth):
        t, p = np.asarray(truth[v]), np.asarray(pred[v])
        lo, hi = float(t.min()), float(t.max())
        lines = [(lo, lo, hi, hi, "identity")]
        fit = metrics.or_undefined(metrics.linear_fit, p, t)
        title = v
        if fit is not None:
            a, b, r2 = fit
            lines.append((lo, a * lo + b, hi, a * hi + b, "fit"))
            title = f"{v}: y={a:.2f}x+{b:.2f} R2={r2:.2f}"
        panels.append(_panel(i * _PANEL, title, t, p, lines, "reference BMD", "predicted BMD"))
    return _svg(panels)


def bland_altman_svg(truth: Mapping[str, np.ndarray], pred: Mapping[str, np.ndarray]) -> str:
    """Difference vs mean per vertebra with the bias and +-1.96 SD limits."""
    panels = []
    for i, v in enumerate(truth):
        t, p = np.asarray(truth[v]), np.asarray(pred[v])
        m, d = (p + t) / 2, p - t
        ba = metrics.bland_altman(p, t)
        lo, hi = float(m.min()), float(m.max())
        lines = [(lo, ba.mean_diff, hi, ba.mean_diff, "mean"),
                 (lo, ba.lo, hi, ba.lo, "limit"), (lo, ba.hi, hi, ba.hi, "limit")]
        panels.append(_panel(i * _PANEL, f"{v}: SD={ba.sd_diff:.3f}", m, d, lines,
                             "mean", "difference"))
    return _svg(panels)


# -- matplotlib report ----------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates over all distinct thresholds, from (0,0) to (1,1)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return np.r_[0.0, fp / max(fp[-1], 1)], np.r_[0.0, tp / max(tp[-1], 1)]


def report_figures(points: Mapping[str, Mapping[str, np.ndarray]], out: Path,
                   ablation: Sequence[Mapping[str, str]] | None = None) -> list[Path]:
    """Scatter/fit, Bland-Altman and ROC PNGs, plus ablation bars when available."""
    plt = _pyplot()
    out = Path(out)
    written = []
    verts = list(points)
    n = len(verts)

    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, v in zip(axes[0], verts):
        t, p = points[v]["true_bmd"], points[v]["pred_bmd"]
        ax.scatter(t, p, s=6, alpha=0.5)
        lo, hi = float(t.min()), float(t.max())
        ax.plot([lo, hi], [lo, hi], ls="--", c="grey", lw=1)
        fit = metrics.or_undefined(metrics.linear_fit, p, t)
        if fit is not None:
            a, b, r2 = fit
            ax.plot([lo, hi], [a * lo + b, a * hi + b], c="C3", lw=1.5)
            ax.set_title(f"{v}  y={a:.2f}x+{b:.2f}  R2={r2:.2f}", fontsize=8)
        ax.set_xlabel("reference BMD (g/cm$^2$)")
        ax.set_ylabel("predicted BMD")
    fig.tight_layout()
    written.append(out / "scatter.png")
    fig.savefig(written[-1], dpi=110)
    plt.close(fig)

    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, v in zip(axes[0], verts):
        t, p = points[v]["true_bmd"], points[v]["pred_bmd"]
        ba = metrics.bland_altman(p, t)
        ax.scatter((p + t) / 2, p - t, s=6, alpha=0.5)
        for y, style in ((ba.mean_diff, "-"), (ba.lo, "--"), (ba.hi, "--")):
            ax.axhline(y, c="C3", ls=style, lw=1)
        ax.set_title(f"{v}  SD={ba.sd_diff:.3f}  out={ba.outliers}", fontsize=8)
        ax.set_xlabel("mean")
        ax.set_ylabel("prediction - reference")
    fig.tight_layout()
    written.append(out / "bland_altman.png")
    fig.savefig(written[-1], dpi=110)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    for v in verts:
        labels = points[v]["true_t"] < metrics.OSTEOPOROSIS_T
        if labels.all() or not labels.any():
            continue
        fpr, tpr = roc_curve(-points[v]["pred_t"], labels)
        auc = metrics.roc_auc(-points[v]["pred_t"], labels)
        ax.plot(fpr, tpr, label=f"{v} AUC={auc:.3f}")
    ax.plot([0, 1], [0, 1], c="grey", ls=":", lw=1)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    written.append(out / "roc.png")
    fig.savefig(written[-1], dpi=110)
    plt.close(fig)

    if ablation:
        rows = [r for r in ablation if r.get("r_avg", "undefined") != "undefined"]
        if rows:
            labels = [r["variant"] if r["kind"] == "variant" else f"Patch N={r['patch_n']}"
                      for r in rows]
            vals = [float(r["r_avg"]) for r in rows]
            colors = ["C3" if r["proposed"] == "yes" else "C0" for r in rows]
            fig, ax = plt.subplots(figsize=(6, 3.2))
            ax.bar(range(len(vals)), vals, color=colors)
            ax.set_xticks(range(len(vals)), labels, rotation=30, ha="right", fontsize=8)
            ax.set_ylabel("mean Pearson r")
            ax.set_ylim(min(0.0, min(vals)), 1.0)
            fig.tight_layout()
            written.append(out / "ablation.png")
            fig.savefig(written[-1], dpi=110)
            plt.close(fig)
    return written
