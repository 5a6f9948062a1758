"""Agreement statistics for paired volume measurements.

Errors are reported the way the tables do: MAE in milliliters, MAPE in percent
against the reference, nonparametric Bland-Altman bias and limits as the median
and empirical 2.5th/97.5th percentiles of the differences.  The percentile
convention is linear interpolation of order statistics at position p*(N-1)+1,
applied identically everywhere.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

ML_PER_LITER = 1000.0


class ZeroVarianceError(ValueError):
    """Statistic undefined because an input vector has no variation."""


def _paired(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape or p.ndim != 1:
        raise ValueError(f"inputs must be 1D and paired, got {p.shape} vs {r.shape}")
    if p.size < 1:
        raise ValueError("inputs must be non-empty")
    return p, r


def mae_ml(pred, ref) -> float:
    """Mean absolute error in milliliters for inputs in liters."""
    p, r = _paired(pred, ref)
    return float(np.mean(np.abs(p - r)) * ML_PER_LITER)


def mape_percent(pred, ref) -> float:
    """Mean absolute percentage error; the reference is the denominator."""
    p, r = _paired(pred, ref)
    if np.any(r == 0):
        raise ValueError("MAPE undefined for zero reference values")
    return float(np.mean(np.abs(p - r) / np.abs(r)) * 100.0)


def pearson_r(x, y) -> float:
    p, r = _paired(x, y)
    if p.size < 2:
        raise ValueError("Pearson r needs at least 2 pairs")
    dx = p - p.mean()
    dy = r - r.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceError("Pearson r undefined: an input has zero variance")
    return float(np.dot(dx, dy) / math.sqrt(sxx * syy))


def percentile(x, q: float) -> float:
    """Linear interpolation between order statistics at position q*(N-1)+1."""
    arr = np.asarray(x, dtype=np.float64)
    return float(np.quantile(arr, q, method="linear"))


def bland_altman_np(pred, ref) -> tuple[float, float, float, np.ndarray]:
    """(bias_ml, p2.5_ml, p97.5_ml, diffs_liters) of pred - ref."""
    p, r = _paired(pred, ref)
    if p.size < 3:
        raise ValueError("Bland-Altman limits need at least 3 pairs")
    diffs = p - r
    bias = percentile(diffs, 0.5) * ML_PER_LITER
    lo = percentile(diffs, 0.025) * ML_PER_LITER
    hi = percentile(diffs, 0.975) * ML_PER_LITER
    return bias, lo, hi, diffs


def qq_points(x) -> np.ndarray:
    """(N, 2) array of (theoretical normal quantile, sorted sample value)."""
    arr = np.sort(np.asarray(x, dtype=np.float64))
    n = arr.size
    if n < 2:
        raise ValueError("QQ plot needs at least 2 values")
    theo = ndtri((np.arange(1, n + 1) - 0.5) / n)
    return np.column_stack([theo, arr])


# ---------------------------------------------------------------------------
# Shapiro-Wilk normality test, Royston's approximation (valid for 3 <= N <= 5000)
# ---------------------------------------------------------------------------

_SW_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_SW_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SW_MEAN_SMALL = (0.5440, -0.39978, 0.025054, -6.714e-4)       # 4 <= n <= 11
_SW_LOGSTD_SMALL = (1.3822, -0.77857, 0.062767, -0.0020322)
_SW_MEAN_LARGE = (-1.5861, -0.31082, -0.083751, 0.0038915)     # n >= 12, in log n
_SW_LOGSTD_LARGE = (-0.4803, -0.082676, 0.0030302)


def _poly(coeffs, x: float) -> float:
    return sum(c * x ** i for i, c in enumerate(coeffs))


def _sw_coefficients(n: int) -> np.ndarray:
    # Blom scores are antisymmetric, so only the top one or two coefficients
    # need the polynomial correction; the rest rescale by phi.
    m = ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    msum = float(np.dot(m, m))
    if n == 3:
        root_half = math.sqrt(0.5)
        return np.array([-root_half, 0.0, root_half])
    rsn = 1.0 / math.sqrt(n)
    a_n = m[-1] / math.sqrt(msum) + _poly(_SW_C1, rsn)
    if n <= 5:
        phi = (msum - 2.0 * m[-1] ** 2) / (1.0 - 2.0 * a_n ** 2)
        a = m / math.sqrt(phi)
    else:
        a_n1 = m[-2] / math.sqrt(msum) + _poly(_SW_C2, rsn)
        phi = ((msum - 2.0 * m[-1] ** 2 - 2.0 * m[-2] ** 2)
               / (1.0 - 2.0 * a_n ** 2 - 2.0 * a_n1 ** 2))
        a = m / math.sqrt(phi)
        a[-2], a[1] = a_n1, -a_n1
    a[-1], a[0] = a_n, -a_n
    return a


def shapiro_wilk(x) -> tuple[float, float]:
    """(W, p) via the Royston approximation; rejects N outside [3, 5000]."""
    arr = np.sort(np.asarray(x, dtype=np.float64))
    n = arr.size
    if n < 3 or n > 5000:
        raise ValueError(f"Shapiro-Wilk supported for 3 <= N <= 5000, got {n}")
    if arr[0] == arr[-1]:
        raise ZeroVarianceError("Shapiro-Wilk undefined for zero-variance input")
    a = _sw_coefficients(n)
    centered = arr - arr.mean()
    ssx = float(np.dot(centered, centered))
    w = float(np.dot(a, arr)) ** 2 / ssx
    w = min(w, 1.0)

    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))
    if 1.0 - w < 1e-15:
        return w, 1.0
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        z_in = -math.log(gamma - math.log(1.0 - w))
        mu = _poly(_SW_MEAN_SMALL, float(n))
        sigma = math.exp(_poly(_SW_LOGSTD_SMALL, float(n)))
    else:
        ln = math.log(n)
        z_in = math.log(1.0 - w)
        mu = _poly(_SW_MEAN_LARGE, ln)
        sigma = math.exp(_poly(_SW_LOGSTD_LARGE, ln))
    z = (z_in - mu) / sigma
    return w, float(ndtr(-z))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    """Metrics for one prediction-vs-reference comparison, volumes in liters."""

    case_ids: tuple[str, ...]
    pred: np.ndarray
    ref: np.ndarray
    n: int
    mae_ml: float
    mape_pct: float
    pearson_r: float | None
    bias_ml: float
    p2_5_ml: float
    p97_5_ml: float
    shapiro_w: float | None
    shapiro_p: float | None


def evaluate_pairs(case_ids, pred, ref) -> EvalReport:
    p, r = _paired(pred, ref)
    ids = tuple(case_ids)
    if len(ids) != p.size:
        raise ValueError("case id count does not match data length")
    try:
        rho = pearson_r(p, r)
    except ZeroVarianceError:
        rho = None
    bias, lo, hi, diffs = bland_altman_np(p, r)
    try:
        w, pval = shapiro_wilk(diffs)
    except (ValueError, ZeroVarianceError):
        w, pval = None, None
    return EvalReport(case_ids=ids, pred=p, ref=r, n=p.size,
                      mae_ml=mae_ml(p, r), mape_pct=mape_percent(p, r),
                      pearson_r=rho, bias_ml=bias, p2_5_ml=lo, p97_5_ml=hi,
                      shapiro_w=w, shapiro_p=pval)


METRICS_HEADER = "model,architecture,mape_pct,mae_ml,pearson_r,n"


def write_report_files(report: EvalReport, out_dir, stem: str,
                       model_name: str, architecture: str,
                       ref_label: str = "reference TLV (L)",
                       pred_label: str = "predicted TLV (L)") -> None:
    """Emit per-case CSV, Table-style metrics CSV, and the two SVG plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}_predictions.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["case_id", "pred_liters", "ref_liters"])
        for cid, p, r in zip(report.case_ids, report.pred, report.ref):
            writer.writerow([cid, f"{p:.6f}", f"{r:.6f}"])
    with open(out / f"{stem}_metrics.csv", "w", newline="") as f:
        f.write(METRICS_HEADER + "\n")
        r_text = "degenerate" if report.pearson_r is None else f"{report.pearson_r:.6f}"
        f.write(f"{model_name},{architecture},{report.mape_pct:.6f},"
                f"{report.mae_ml:.6f},{r_text},{report.n}\n")
    with open(out / f"{stem}_qq.csv", "w", newline="") as f:
        f.write("theoretical_quantile,difference_liters\n")
        for theo, sample in qq_points(report.pred - report.ref):
            f.write(f"{theo:.6f},{sample:.6f}\n")
    (out / f"{stem}_scatter.svg").write_text(
        scatter_svg(report.ref, report.pred, ref_label, pred_label, report))
    (out / f"{stem}_bland_altman.svg").write_text(
        bland_altman_svg(report.pred, report.ref))


def compare_measurements(a, b, label_a: str, label_b: str, out_dir, stem: str = "compare") -> EvalReport:
    """Full agreement report treating a as prediction and b as reference."""
    p, r = _paired(a, b)
    ids = [f"pair_{i:05d}" for i in range(p.size)]
    report = evaluate_pairs(ids, p, r)
    write_report_files(report, out_dir, stem, model_name=label_a, architecture=label_b,
                       ref_label=f"{label_b} (L)", pred_label=f"{label_a} (L)")
    return report


# ---------------------------------------------------------------------------
# Deterministic SVG plots (fixed 800x800 canvas, identity line in red)
# ---------------------------------------------------------------------------

_CANVAS = 800
_MARGIN = 90


def _nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12:
        ticks.append(round(t, 10))
        t += step
    return ticks


class _Plot:
    def __init__(self, xlo, xhi, ylo, yhi):
        self.xlo, self.xhi = xlo, xhi
        self.ylo, self.yhi = ylo, yhi
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_CANVAS}" height="{_CANVAS}" '
            f'viewBox="0 0 {_CANVAS} {_CANVAS}">',
            f'<rect width="{_CANVAS}" height="{_CANVAS}" fill="white"/>',
        ]

    def x(self, v: float) -> float:
        span = self.xhi - self.xlo
        return _MARGIN + (v - self.xlo) / span * (_CANVAS - 2 * _MARGIN)

    def y(self, v: float) -> float:
        span = self.yhi - self.ylo
        return _CANVAS - _MARGIN - (v - self.ylo) / span * (_CANVAS - 2 * _MARGIN)

    def axes(self, xlabel: str, ylabel: str, title: str) -> None:
        p = self.parts
        p.append(f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{_CANVAS - 2 * _MARGIN}" '
                 f'height="{_CANVAS - 2 * _MARGIN}" fill="none" stroke="black"/>')
        for t in _nice_ticks(self.xlo, self.xhi):
            if self.xlo <= t <= self.xhi:
                xx = self.x(t)
                p.append(f'<line x1="{xx:.2f}" y1="{_CANVAS - _MARGIN}" x2="{xx:.2f}" '
                         f'y2="{_CANVAS - _MARGIN + 6}" stroke="black"/>')
                p.append(f'<text x="{xx:.2f}" y="{_CANVAS - _MARGIN + 24}" font-size="14" '
                         f'text-anchor="middle">{t:g}</text>')
        for t in _nice_ticks(self.ylo, self.yhi):
            if self.ylo <= t <= self.yhi:
                yy = self.y(t)
                p.append(f'<line x1="{_MARGIN - 6}" y1="{yy:.2f}" x2="{_MARGIN}" '
                         f'y2="{yy:.2f}" stroke="black"/>')
                p.append(f'<text x="{_MARGIN - 10}" y="{yy + 5:.2f}" font-size="14" '
                         f'text-anchor="end">{t:g}</text>')
        p.append(f'<text x="{_CANVAS / 2:.0f}" y="{_CANVAS - 30}" font-size="16" '
                 f'text-anchor="middle">{xlabel}</text>')
        p.append(f'<text x="28" y="{_CANVAS / 2:.0f}" font-size="16" text-anchor="middle" '
                 f'transform="rotate(-90 28 {_CANVAS / 2:.0f})">{ylabel}</text>')
        p.append(f'<text x="{_CANVAS / 2:.0f}" y="50" font-size="17" '
                 f'text-anchor="middle">{title}</text>')

    def points(self, xs, ys) -> None:
        for xv, yv in zip(xs, ys):
            self.parts.append(f'<circle cx="{self.x(xv):.2f}" cy="{self.y(yv):.2f}" r="4" '
                              f'fill="steelblue" fill-opacity="0.55"/>')

    def line(self, x0, y0, x1, y1, color: str, dash: str = "") -> None:
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{self.x(x0):.2f}" y1="{self.y(y0):.2f}" '
                          f'x2="{self.x(x1):.2f}" y2="{self.y(y1):.2f}" '
                          f'stroke="{color}" stroke-width="2"{dash_attr}/>')

    def text(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def scatter_svg(ref, pred, xlabel: str, ylabel: str, report: EvalReport | None = None) -> str:
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    lo = float(min(ref.min(), pred.min()))
    hi = float(max(ref.max(), pred.max()))
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    plot = _Plot(lo - pad, hi + pad, lo - pad, hi + pad)
    plot.line(lo - pad, lo - pad, hi + pad, hi + pad, "red")
    plot.points(ref, pred)
    title = ""
    if report is not None:
        r_text = "n/a" if report.pearson_r is None else f"{report.pearson_r:.3f}"
        title = (f"N = {report.n}, r = {r_text}, MAE = {report.mae_ml:.0f} ml, "
                 f"MAPE = {report.mape_pct:.1f}%")
    plot.axes(xlabel, ylabel, title)
    return plot.text()


def bland_altman_svg(pred, ref) -> str:
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    bias, lo_ml, hi_ml, diffs = bland_altman_np(p, r)
    means = (p + r) / 2.0
    dlo = float(min(diffs.min(), lo_ml / ML_PER_LITER))
    dhi = float(max(diffs.max(), hi_ml / ML_PER_LITER))
    dpad = 0.1 * (dhi - dlo) if dhi > dlo else 0.5
    mlo, mhi = float(means.min()), float(means.max())
    mpad = 0.05 * (mhi - mlo) if mhi > mlo else 0.5
    plot = _Plot(mlo - mpad, mhi + mpad, dlo - dpad, dhi + dpad)
    for value, color, dash in ((bias, "black", ""), (lo_ml, "gray", "6,4"), (hi_ml, "gray", "6,4")):
        v = value / ML_PER_LITER
        plot.line(mlo - mpad, v, mhi + mpad, v, color, dash)
    plot.points(means, diffs)
    plot.axes("mean of measurements (L)", "difference (L)",
              f"bias = {bias:.0f} ml, P2.5 = {lo_ml:.0f} ml, P97.5 = {hi_ml:.0f} ml")
    return plot.text()
