"""Voxel-wise scores, split-half noise ceiling, ROI tables and plain SVG plots."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .blobio import canonical_json

NA = float("nan")


def pearson(x, y) -> tuple[float, bool]:
    """Centered correlation and a degeneracy flag (True when either side is constant)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"pearson: length mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if sxx <= 0.0 or syy <= 0.0:
        return 0.0, True
    r = np.dot(xc, yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0)), False


def pearson_columns(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-column r for [n, N] arrays; zero-variance columns give 0."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"pearson_columns: shapes {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 2:
        raise ValueError("pearson needs n >= 2")
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    den = np.sqrt(np.sum(pc * pc, axis=0) * np.sum(tc * tc, axis=0))
    num = np.sum(pc * tc, axis=0)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, np.clip(num / safe, -1.0, 1.0), 0.0)


def repeat_groups(group_ids: np.ndarray) -> list[np.ndarray]:
    """Row indices per repeat group (ids < 0 are singletons and skipped), sorted by id."""
    group_ids = np.asarray(group_ids)
    return [np.flatnonzero(group_ids == g) for g in np.unique(group_ids[group_ids >= 0])]


def noise_ceiling(responses: np.ndarray, groups: Sequence[np.ndarray], n_splits: int = 20,
                  seed: int = 0, min_groups: int = 10) -> np.ndarray:
    """Split-half noise ceiling per voxel with Spearman-Brown correction, clamped to [0, 1].

    ``responses`` is [n_trials, N]; ``groups`` lists trial indices per repeated
    image.  Returns NaN for every voxel when fewer than ``min_groups`` groups
    have two or more presentations.
    """
    responses = np.asarray(responses, dtype=np.float64)
    usable = [np.asarray(g) for g in groups if len(g) >= 2]
    n_vox = responses.shape[1]
    if len(usable) < min_groups:
        return np.full(n_vox, NA)
    rng = np.random.default_rng(seed)
    total = np.zeros(n_vox)
    for _ in range(n_splits):
        a = np.zeros((len(usable), n_vox))
        b = np.zeros((len(usable), n_vox))
        for k, g in enumerate(usable):
            perm = rng.permutation(g)
            half = len(perm) // 2
            a[k] = responses[perm[:half]].mean(axis=0)
            b[k] = responses[perm[half:]].mean(axis=0)
        r = pearson_columns(a, b)
        sb = 2.0 * r / (1.0 + r)
        total += np.clip(np.where(r > -1.0, sb, 0.0), 0.0, 1.0)
    return total / n_splits


def repetition_average(values: np.ndarray, groups: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(values)[g].mean(axis=0) for g in groups])


@dataclass
class ChallengeResult:
    score: float
    fallback: bool  # True when no repeats were available
    per_voxel: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def challenge_score(pred: np.ndarray, truth: np.ndarray, groups: Sequence[np.ndarray],
                    nc: np.ndarray | None) -> ChallengeResult:
    """100 x mean over voxels of min(r_repavg^2 / max(NC^2, 0.01), 1).

    Without repeat groups (or without a usable NC) falls back to the
    single-trial mean r^2, flagged.
    """
    usable = [g for g in groups if len(g) >= 1]
    multi = [g for g in usable if len(g) >= 2]
    if not multi or nc is None or np.all(np.isnan(nc)):
        r = pearson_columns(pred, truth)
        return ChallengeResult(100.0 * float(np.mean(r * r)), True, r * r)
    p = repetition_average(pred, usable)
    t = repetition_average(truth, usable)
    r = pearson_columns(p, t)
    denom = np.maximum(np.nan_to_num(nc, nan=0.0) ** 2, 0.01)
    per = np.minimum(r * r / denom, 1.0)
    return ChallengeResult(100.0 * float(np.mean(per)), False, per)


@dataclass
class ScoreTable:
    r: np.ndarray
    nc: np.ndarray
    roi_label: np.ndarray
    roi_names: list[str]
    single_trial_mean_r: float
    challenge: float
    challenge_fallback: bool
    provenance: dict = field(default_factory=dict)

    @property
    def r2(self) -> np.ndarray:
        return self.r * self.r

    def rows(self) -> list[dict]:
        return [
            {"voxel": i, "roi": self.roi_names[self.roi_label[i]], "r": _fmt(self.r[i]), "r2": _fmt(self.r2[i]),
             "nc": _fmt(self.nc[i])}
            for i in range(len(self.r))
        ]

    def summary(self) -> dict:
        return {
            "single_trial_mean_r": _round(self.single_trial_mean_r),
            "challenge_score": _round(self.challenge),
            "challenge_fallback": self.challenge_fallback,
            "mean_nc": _round(float(np.nanmean(self.nc))) if np.any(~np.isnan(self.nc)) else None,
            "rois": roi_aggregate(self.r, self.roi_label, self.roi_names),
            "provenance": self.provenance,
        }


VOXEL_COLUMNS = ("voxel", "roi", "r", "r2", "nc")
ROI_COLUMNS = ("roi", "n", "mean_r", "median_r")


def score_table(pred: np.ndarray, truth: np.ndarray, group_ids: np.ndarray, roi_label: np.ndarray,
                roi_names: list[str], provenance: dict | None = None, nc_seed: int = 0,
                nc_splits: int = 20) -> ScoreTable:
    groups = repeat_groups(group_ids)
    nc = noise_ceiling(truth, groups, n_splits=nc_splits, seed=nc_seed)
    r = pearson_columns(pred, truth)
    ch = challenge_score(pred, truth, groups, nc)
    return ScoreTable(r=r, nc=nc, roi_label=np.asarray(roi_label), roi_names=list(roi_names),
                      single_trial_mean_r=float(np.mean(r)), challenge=ch.score, challenge_fallback=ch.fallback,
                      provenance=dict(provenance or {}))


def roi_aggregate(scores: np.ndarray, roi_label: np.ndarray, roi_names: list[str]) -> list[dict]:
    """Mean and median per ROI; an empty ROI yields an NA row."""
    scores = np.asarray(scores, dtype=np.float64)
    roi_label = np.asarray(roi_label)
    out = []
    for k, name in enumerate(roi_names):
        vals = scores[roi_label == k]
        if vals.size == 0:
            out.append({"roi": name, "n": 0, "mean_r": None, "median_r": None})
        else:
            out.append({"roi": name, "n": int(vals.size), "mean_r": _round(float(vals.mean())),
                        "median_r": _round(float(np.median(vals)))})
    return out


def _round(v: float) -> float:
    return float(f"{v:.10g}")


def _fmt(v: float) -> str:
    return "NA" if np.isnan(v) else f"{v:.10g}"


def write_csv(path: str | Path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    buf = io.StringIO(newline="")
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: ("NA" if row.get(c) is None else row.get(c)) for c in columns})
    Path(path).write_text(buf.getvalue())


def write_scores(out_dir: str | Path, table: ScoreTable, stem: str = "scores") -> dict:
    """Per-voxel CSV, per-ROI CSV and a JSON summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / f"{stem}.csv", table.rows(), VOXEL_COLUMNS)
    summary = table.summary()
    write_csv(out_dir / f"{stem}_roi.csv", summary["rois"], ROI_COLUMNS)
    (out_dir / f"{stem}_summary.json").write_text(canonical_json(summary))
    return summary


# ------------------------------------------------------------------ SVG
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def svg_lines(series: dict[str, Sequence[float]], x: Sequence[float], title: str = "",
              xlabel: str = "", ylabel: str = "", width: int = 480, height: int = 300) -> str:
    """Deterministic line plot with one polyline per series."""
    left, right, top, bottom = 50, 110, 30, 40
    pw, ph = width - left - right, height - top - bottom
    xs = np.asarray(x, dtype=np.float64)
    vals = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()]) if series else np.zeros(1)
    vals = vals[np.isfinite(vals)] if np.any(np.isfinite(vals)) else np.zeros(1)
    lo, hi = float(min(vals.min(), 0.0)), float(max(vals.max(), 0.0))
    hi = hi if hi > lo else lo + 1.0
    x0, x1 = float(xs.min()), float(xs.max()) if xs.max() > xs.min() else float(xs.min()) + 1.0

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (hi - v) / (hi - lo) * ph

    parts = [_svg_head(width, height, title)]
    parts.append(f'<line x1="{left}" y1="{py(0.0):.2f}" x2="{left + pw}" y2="{py(0.0):.2f}" stroke="#999"/>')
    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    for k, (name, ys) in enumerate(series.items()):
        col = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys) if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{left + pw + 8}" y="{top + 14 + 16 * k}" fill="{col}" font-size="11">{_esc(name)}</text>')
    parts.append(_axis_labels(left, top, pw, ph, x0, x1, lo, hi, xlabel, ylabel))
    parts.append("</svg>\n")
    return "\n".join(parts)


def svg_bars(values: dict[str, float], title: str = "", ylabel: str = "", width: int = 480,
             height: int = 300) -> str:
    left, right, top, bottom = 50, 20, 30, 60
    pw, ph = width - left - right, height - top - bottom
    names = list(values)
    vals = np.array([np.nan_to_num(values[n]) for n in names], dtype=np.float64) if names else np.zeros(0)
    lo = float(min(vals.min(initial=0.0), 0.0))
    hi = float(max(vals.max(initial=0.0), 0.0))
    hi = hi if hi > lo else lo + 1.0

    def py(v):
        return top + (hi - v) / (hi - lo) * ph

    parts = [_svg_head(width, height, title)]
    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    bw = pw / max(len(names), 1)
    for k, (name, v) in enumerate(zip(names, vals)):
        y0, y1 = sorted((py(0.0), py(v)))
        parts.append(f'<rect x="{left + k * bw + 0.1 * bw:.2f}" y="{y0:.2f}" width="{0.8 * bw:.2f}" '
                     f'height="{y1 - y0:.2f}" fill="{_PALETTE[k % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{left + (k + 0.5) * bw:.2f}" y="{top + ph + 14}" font-size="10" '
                     f'text-anchor="middle">{_esc(name)}</text>')
    parts.append(f'<text x="12" y="{top + ph / 2:.2f}" font-size="11" transform="rotate(-90 12 {top + ph / 2:.2f})" '
                 f'text-anchor="middle">{_esc(ylabel)}</text>')
    parts.append(f'<text x="{left - 4}" y="{top + 4}" font-size="10" text-anchor="end">{hi:.3g}</text>')
    parts.append(f'<text x="{left - 4}" y="{top + ph}" font-size="10" text-anchor="end">{lo:.3g}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def _svg_head(width: int, height: int, title: str) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            f'<text x="{width / 2:.1f}" y="18" font-size="13" text-anchor="middle">{_esc(title)}</text>')


def _axis_labels(left, top, pw, ph, x0, x1, lo, hi, xlabel, ylabel) -> str:
    return "\n".join([
        f'<text x="{left}" y="{top + ph + 14}" font-size="10" text-anchor="middle">{x0:.3g}</text>',
        f'<text x="{left + pw}" y="{top + ph + 14}" font-size="10" text-anchor="middle">{x1:.3g}</text>',
        f'<text x="{left - 4}" y="{top + 4}" font-size="10" text-anchor="end">{hi:.3g}</text>',
        f'<text x="{left - 4}" y="{top + ph}" font-size="10" text-anchor="end">{lo:.3g}</text>',
        f'<text x="{left + pw / 2:.1f}" y="{top + ph + 30}" font-size="11" text-anchor="middle">{_esc(xlabel)}</text>',
        f'<text x="12" y="{top + ph / 2:.2f}" font-size="11" transform="rotate(-90 12 {top + ph / 2:.2f})" '
        f'text-anchor="middle">{_esc(ylabel)}</text>',
    ])


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def dump_json(path: str | Path, obj) -> None:
    Path(path).write_text(canonical_json(json.loads(json.dumps(obj))))
