"""Quality and rate metrics: PSNR, MS-SSIM, RD curves and Bjontegaard deltas."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .losses import _ssim_terms

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def psnr(x: torch.Tensor, y: torch.Tensor, peak: float = 1.0,
         cap_db: float = 100.0) -> float:
    """10 log10(peak^2 / MSE), capped so identical images stay finite."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(torch.mean((x.double() - y.double()) ** 2))
    if mse == 0.0:
        return cap_db
    return min(cap_db, 10.0 * math.log10(peak * peak / mse))


def ms_ssim(x: torch.Tensor, y: torch.Tensor,
            weights: tuple[float, ...] = MS_SSIM_WEIGHTS,
            window_size: int = 11) -> float:
    """Multi-scale SSIM with the canonical 5-scale weights.

    Images too small for all scales are scored on the scales that fit, with
    the weights renormalized (a warning is emitted). The contrast-structure
    factors are clamped at zero before exponentiation.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    min_side = min(int(x.shape[-2]), int(x.shape[-1]))
    usable = 0
    side = min_side
    while usable < len(weights) and side >= window_size:
        usable += 1
        side //= 2
    if usable == 0:
        raise ValueError(
            f"image {tuple(x.shape[-2:])} too small for even one "
            f"{window_size}px scale")
    if usable < len(weights):
        warnings.warn(
            f"image supports {usable} of {len(weights)} scales; "
            "renormalizing weights")
    w = np.asarray(weights[:usable], dtype=np.float64)
    w = w / w.sum()

    xb = x.unsqueeze(0) if x.dim() == 3 else x
    yb = y.unsqueeze(0) if y.dim() == 3 else y
    value = 1.0
    for i in range(usable):
        full, cs = _ssim_terms(xb, yb, window_size, 1.5)
        if i == usable - 1:
            value *= max(float(full), 0.0) ** w[i]
        else:
            value *= max(float(cs), 0.0) ** w[i]
            xb = F.avg_pool2d(xb, 2)
            yb = F.avg_pool2d(yb, 2)
    return float(value)


@dataclass
class RDPoint:
    """One operating point: rate in bits/pixel plus two quality scores."""

    bpp: float
    psnr_db: float
    msssim: float

    def __post_init__(self):
        if not (self.bpp > 0):
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not (math.isfinite(self.psnr_db) and math.isfinite(self.msssim)):
            raise ValueError("quality metrics must be finite")


@dataclass
class RDCurve:
    """Operating points ordered by strictly increasing rate."""

    points: list[RDPoint]

    def __post_init__(self):
        if len(self.points) < 4:
            raise ValueError(f"need >= 4 points for cubic fitting, got {len(self.points)}")
        rates = [p.bpp for p in self.points]
        if any(b >= a for a, b in zip(rates[1:], rates)):
            raise ValueError("bpp must be strictly increasing along the curve")

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def quality(self, metric: str = "psnr") -> np.ndarray:
        if metric == "psnr":
            return np.array([p.psnr_db for p in self.points])
        if metric == "msssim":
            return np.array([p.msssim for p in self.points])
        raise ValueError(f"unknown quality metric {metric!r}")


def _fit_log_rate(quality: np.ndarray, log_rate: np.ndarray, method: str):
    """Returns a callable integrating the fitted log-rate over [lo, hi]."""
    order = np.argsort(quality)
    q, lr = quality[order], log_rate[order]
    if len(np.unique(q)) != len(q):
        raise ValueError("duplicate quality values make the fit degenerate")
    if method == "akima" and len(q) > 4:
        from scipy.interpolate import Akima1DInterpolator
        spline = Akima1DInterpolator(q, lr)
        return lambda lo, hi: float(spline.antiderivative()(hi)
                                    - spline.antiderivative()(lo))
    poly = np.polyfit(q, lr, 3)
    ipoly = np.polyint(poly)
    return lambda lo, hi: float(np.polyval(ipoly, hi) - np.polyval(ipoly, lo))


def bd_rate(anchor: RDCurve, test: RDCurve, metric: str = "psnr",
            method: str = "auto") -> float:
    """Average rate difference (percent) at equal quality, Bjontegaard style.

    Cubic fit of log10(rate) against quality, integrated over the common
    quality interval. Negative values mean the test curve needs fewer bits.
    `method` is one of auto (cubic at 4 points, Akima above), cubic, akima.
    """
    if method not in ("auto", "cubic", "akima"):
        raise ValueError(f"unknown fit method {method!r}")
    qa, qt = anchor.quality(metric), test.quality(metric)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError("curves have no overlapping quality range")
    fit = "cubic" if method == "cubic" else ("akima" if method == "akima" else "auto")
    def pick(n): return "akima" if fit in ("akima", "auto") and n > 4 else "cubic"
    int_a = _fit_log_rate(qa, np.log10(anchor.rates()), pick(len(qa)))
    int_t = _fit_log_rate(qt, np.log10(test.rates()), pick(len(qt)))
    delta = (int_t(lo, hi) - int_a(lo, hi)) / (hi - lo)
    return 100.0 * (10.0 ** delta - 1.0)


def emit_rd_report(curves: list[RDCurve], labels: list[str], out_dir) -> dict[str, Path]:
    """CSV of all points plus one rate-quality plot per metric.

    The CSV is byte-deterministic for identical inputs.
    """
    if not curves:
        raise ValueError("no curves to report")
    if len(curves) != len(labels):
        raise ValueError(f"{len(curves)} curves vs {len(labels)} labels")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "rd_points.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["label", "bpp", "psnr", "msssim"])
        for label, curve in zip(labels, curves):
            for p in curve.points:
                writer.writerow([label, repr(p.bpp), repr(p.psnr_db), repr(p.msssim)])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {"csv": csv_path}
    for metric, column in (("psnr", "PSNR (dB)"), ("msssim", "MS-SSIM")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, curve in zip(labels, curves):
            ax.plot(curve.rates(), curve.quality(metric), marker="o", label=label)
        ax.set_xlabel("bpp")
        ax.set_ylabel(column)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"rd_{metric}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths[metric] = path
    return paths


def load_rd_csv(path) -> dict[str, RDCurve]:
    """Read curves back from the report CSV, one per label, sorted by rate."""
    rows: dict[str, list[RDPoint]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.setdefault(row["label"], []).append(
                RDPoint(float(row["bpp"]), float(row["psnr"]), float(row["msssim"])))
    return {label: RDCurve(sorted(pts, key=lambda p: p.bpp))
            for label, pts in rows.items()}
