"""Validation metrics and the leave-one-head-out protocol.

Regions are assigned on the true CT of the validation head: non-bone is
``[-1024, 100]`` HU, bone ``(100, 3071]`` and dense bone ``(900, 3071]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .dataio import CT_MAX, CT_MIN, HUInterval, concat_tables
from .errors import DegenerateTestError, EmptyRegionError, InputError, SkewMixError
from .predictor import predict_partitioned, predict_volume, train_partitioned

__all__ = [
    "REGIONS",
    "ResidualWindow",
    "BlandAltman",
    "EvalReport",
    "RankTestResult",
    "mae",
    "psnr",
    "smoothed_residuals",
    "bland_altman",
    "wilcoxon_one_sided",
    "signed_rank_null",
    "evaluate_prediction",
    "loocv",
    "write_report",
    "write_residual_curve",
    "write_bland_altman",
    "summary_grid",
    "format_grid",
    "write_grid",
]

REGIONS = {
    "nonbone": HUInterval(CT_MIN, 100.0, lo_closed=True, hi_closed=True),
    "bone": HUInterval(100.0, CT_MAX, hi_closed=True),
    "dense_bone": HUInterval(900.0, CT_MAX, hi_closed=True),
    "overall": HUInterval(-math.inf, math.inf),
}
EXACT_MAX_N = 20


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise InputError(f"length mismatch: {pred.shape[0]} predictions, {truth.shape[0]} truths")
    return pred, truth


def mae(pred, truth, region=None):
    """Mean absolute error over voxels whose true CT lies in ``region``."""
    pred, truth = _pair(pred, truth)
    sel = np.ones(truth.shape, bool) if region is None else region.contains(truth)
    if not np.any(sel):
        raise EmptyRegionError(f"no voxels with true CT in {region}")
    return float(np.mean(np.abs(pred[sel] - truth[sel])))


def psnr(pred, truth):
    """``10 log10(n M^2 / sum (pred - truth)^2)`` with M the maximal true CT.

    Returns ``math.inf`` when the prediction is exact. Raises InputError when
    the maximal true CT is 0, where the peak is undefined.
    """
    pred, truth = _pair(pred, truth)
    if truth.size < 1:
        raise InputError("psnr needs at least one voxel")
    sse = float(np.sum((pred - truth) ** 2))
    if sse == 0.0:
        return math.inf
    peak = float(np.max(truth))
    if peak == 0.0:
        raise InputError("psnr is undefined when the maximal true CT is 0")
    return 10.0 * math.log10(truth.size * peak * peak / sse)


@dataclass(frozen=True)
class ResidualWindow:
    lo: float
    center: float
    mean_truth: float
    mean_residual: float
    mean_abs_residual: float
    count: int


def smoothed_residuals(pred, truth, window=20.0, origin=CT_MIN):
    """Residual means over non-overlapping HU windows ``[origin + j*w, origin + (j+1)*w)``.

    Windows are placed on the true CT; empty windows are omitted.
    """
    if not window > 0:
        raise InputError("window must be > 0")
    pred, truth = _pair(pred, truth)
    idx = np.floor((truth - origin) / window).astype(np.int64)
    keys, inv, counts = np.unique(idx, return_inverse=True, return_counts=True)
    resid = pred - truth
    sums = [np.bincount(inv, weights=v, minlength=len(keys)) for v in (truth, resid, np.abs(resid))]
    out = []
    for j, key in enumerate(keys):
        lo = origin + key * window
        c = int(counts[j])
        out.append(
            ResidualWindow(
                float(lo), float(lo + 0.5 * window),
                float(sums[0][j] / c), float(sums[1][j] / c), float(sums[2][j] / c), c,
            )
        )
    return out


@dataclass(frozen=True, eq=False)
class BlandAltman:
    avg: np.ndarray
    diff: np.ndarray
    bias: float
    sd: float

    @property
    def loa_low(self):
        return self.bias - 1.96 * self.sd

    @property
    def loa_high(self):
        return self.bias + 1.96 * self.sd

    @property
    def pairs(self):
        return list(zip(self.avg.tolist(), self.diff.tolist()))


def bland_altman(pred, truth):
    """Differences ``pred - truth`` against averages, with bias and 95% limits.

    The standard deviation uses ``ddof=1`` (0 for a single pair).
    """
    pred, truth = _pair(pred, truth)
    diff = pred - truth
    sd = float(np.std(diff, ddof=1)) if diff.size > 1 else 0.0
    return BlandAltman(0.5 * (pred + truth), diff, float(np.mean(diff)), sd)


@dataclass(frozen=True)
class RankTestResult:
    statistic: float
    p_value: float
    n_effective: int
    exact: bool = True


def signed_rank_null(ranks):
    """Exact null distribution of ``W+`` for the given (possibly tied) ranks.

    Returns ``(values, probabilities)``. Average ranks are half-integers, so
    the distribution is built on doubled ranks by sign-pattern convolution.
    """
    r2 = np.rint(2.0 * np.asarray(ranks, dtype=float)).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    support = np.flatnonzero(counts)
    return support / 2.0, counts[support] / float(2 ** len(r2))


def wilcoxon_one_sided(diffs, exact_max=EXACT_MAX_N):
    """One-sided Wilcoxon signed-rank test that the differences tend to be negative.

    With ``diffs = reference - competitor`` for an error metric, a small
    p-value favours the reference. Zero differences are dropped and ties get
    average ranks. ``p = P(W+ <= observed)`` is exact for up to ``exact_max``
    non-zero differences; above that a normal approximation with continuity
    and tie corrections is used.
    """
    d = np.asarray(diffs, dtype=float).ravel()
    if d.size < 1:
        raise InputError("need at least one difference")
    nz = d[d != 0]
    n = nz.size
    if n == 0:
        raise DegenerateTestError("all differences are zero")
    ranks = rankdata(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    if n <= exact_max:
        values, probs = signed_rank_null(ranks)
        p = float(probs[values <= w_plus + 1e-9].sum())
        return RankTestResult(w_plus, min(p, 1.0), n, True)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w_plus + 0.5 - mean) / math.sqrt(var)
    return RankTestResult(w_plus, float(min(ndtr(z), 1.0)), n, False)


@dataclass
class EvalReport:
    head: str
    n: int
    mae_nonbone: float
    mae_bone: float
    mae_dense_bone: float
    mae_overall: float
    psnr: float
    residual_curve: list = field(default_factory=list)
    bland_altman: BlandAltman | None = None

    METRICS = ("mae_nonbone", "mae_bone", "mae_dense_bone", "mae_overall", "psnr")

    def metric(self, name):
        return getattr(self, name)


def _region_mae(pred, truth, region):
    try:
        return mae(pred, truth, region)
    except EmptyRegionError:
        return math.nan


def _region_psnr(pred, truth):
    try:
        return psnr(pred, truth)
    except InputError:
        return math.nan


def evaluate_prediction(pred, truth, head="", window=20.0):
    """Full metric set for one validation head.

    Empty regions give NaN MAE; an undefined PSNR is NaN.
    """
    pred, truth = _pair(pred, truth)
    return EvalReport(
        head=head,
        n=int(truth.size),
        mae_nonbone=_region_mae(pred, truth, REGIONS["nonbone"]),
        mae_bone=_region_mae(pred, truth, REGIONS["bone"]),
        mae_dense_bone=_region_mae(pred, truth, REGIONS["dense_bone"]),
        mae_overall=mae(pred, truth),
        psnr=_region_psnr(pred, truth),
        residual_curve=smoothed_residuals(pred, truth, window),
        bland_altman=bland_altman(pred, truth),
    )


def loocv(tables, spec, cfg_full, cfg_part=None, *, method="partitioned", threads=None,
          window=20.0, on_fold=None):
    """Leave-one-head-out cross-validation.

    For each head, train on the concatenation of the others and evaluate the
    held-out head. ``method`` is ``"partitioned"`` (two-stage pipeline) or
    ``"full"`` (single model trained with ``cfg_full``). Training errors are
    re-raised with the 1-based fold number prepended to their message and
    stored as ``err.fold``.
    """
    tables = list(tables)
    if len(tables) < 2:
        raise InputError("leave-one-out needs at least two tables")
    if method not in ("partitioned", "full"):
        raise InputError(f"unknown method {method!r}")
    if method == "partitioned" and cfg_part is None:
        raise InputError("partitioned method needs cfg_part")
    from dataclasses import replace

    if threads is not None:
        cfg_full = replace(cfg_full, threads=threads)
        cfg_part = cfg_part and replace(cfg_part, threads=threads)
    reports = []
    for i, held in enumerate(tables):
        train = concat_tables([t for j, t in enumerate(tables) if j != i], patient_id=f"train{i}")
        try:
            if method == "partitioned":
                pm = train_partitioned(train, spec, cfg_full, cfg_part)
                pred = predict_partitioned(held.mr, pm, threads)
            else:
                from .mixture import fit

                model, _ = fit(train.data, cfg_full)
                pred = predict_volume(held.mr, model, threads)
        except SkewMixError as err:
            err.fold = i + 1
            err.args = (f"fold {i + 1} ({held.patient_id or 'unnamed'}): {err}",)
            raise
        report = evaluate_prediction(pred, held.ct, held.patient_id or f"fold{i + 1}", window)
        report.train_size = train.n
        reports.append(report)
        if on_fold is not None:
            on_fold(i, report, pred)
    return reports


def _num(x):
    return repr(float(x))


def write_report(path, report):
    """One ``metric,value`` row per region metric plus Bland-Altman summary rows."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["n", report.n])
        for name in EvalReport.METRICS:
            w.writerow([name, _num(report.metric(name))])
        ba = report.bland_altman
        if ba is not None:
            w.writerow(["ba_bias", _num(ba.bias)])
            w.writerow(["ba_sd", _num(ba.sd)])
            w.writerow(["ba_loa_low", _num(ba.loa_low)])
            w.writerow(["ba_loa_high", _num(ba.loa_high)])
    return path


def write_residual_curve(path, curve):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_lo", "window_center", "mean_truth", "mean_residual",
                    "mean_abs_residual", "count"])
        for c in curve:
            w.writerow([_num(c.lo), _num(c.center), _num(c.mean_truth), _num(c.mean_residual),
                        _num(c.mean_abs_residual), c.count])
    return path


def write_bland_altman(path, ba):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["avg", "diff"])
        for a, d in zip(ba.avg, ba.diff):
            w.writerow([f"{a:.10g}", f"{d:.10g}"])
    return path


def summary_grid(results, metric):
    """Table-style grid for one metric.

    ``results`` maps model name to its per-fold reports (same fold order). Rows
    are the heads, then ``Average`` and, with two or more models, ``p-value``
    of the one-sided signed-rank test of the first model against each other
    one (``-`` for the first model and for undefined tests). For PSNR the
    differences are negated so that small p-values always favour the first
    model.
    """
    names = list(results)
    if not names:
        raise InputError("no results")
    folds = len(results[names[0]])
    heads = [r.head for r in results[names[0]]]
    rows = [["head"] + names]
    for i in range(folds):
        rows.append([heads[i]] + [results[m][i].metric(metric) for m in names])
    rows.append(["Average"] + [float(np.mean([r.metric(metric) for r in results[m]])) for m in names])
    if len(names) > 1:
        ref = np.array([r.metric(metric) for r in results[names[0]]])
        sign = -1.0 if metric == "psnr" else 1.0
        prow = ["p-value", "-"]
        for m in names[1:]:
            other = np.array([r.metric(metric) for r in results[m]])
            diffs = sign * (ref - other)
            diffs = diffs[np.isfinite(diffs)]
            try:
                prow.append(wilcoxon_one_sided(diffs).p_value)
            except (DegenerateTestError, InputError):
                prow.append("-")
        rows.append(prow)
    return rows


def _cell(v):
    if isinstance(v, str):
        return v
    return f"{v:.2f}" if math.isfinite(v) else str(v)


def format_grid(rows, title=""):
    """Fixed-width text rendering of :func:`summary_grid` rows."""
    cells = []
    for row in rows:
        if row[0] == "p-value":
            cells.append([row[0]] + [v if isinstance(v, str) else f"{v:.3f}" for v in row[1:]])
        else:
            cells.append([_cell(v) for v in row])
    widths = [max(len(r[j]) for r in cells) for j in range(len(cells[0]))]
    lines = [title] if title else []
    for r in cells:
        if r[0] == "Average":
            lines.append("-" * len(lines[-1]))
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        if r is cells[0]:
            lines.append("-" * len(lines[-1]))
    return "\n".join(lines)


def write_grid(path, rows):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])
    return path
