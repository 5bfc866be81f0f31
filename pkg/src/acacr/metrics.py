"""Image-quality metrics: MAE, MSE, PSNR, SSIM, SAM, plus report aggregation.

All metrics take numpy arrays laid out [H, W, C] (or [H, W]) on a [0, L]
value scale. Helpers in this package store images in [0, 1] and rescale by
255 before calling in here, so L defaults to 255.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "mae", "mse", "psnr", "ssim", "sam",
    "MetricRow", "MetricReport", "compute_report",
]

_L_DEFAULT = 255.0
_K1 = 0.01
_K2 = 0.03


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    return x, y


def mae(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.mean(np.abs(x - y)))


def mse(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, L: float = _L_DEFAULT) -> float:
    """10*log10(L^2 / MSE) in dB; +inf for identical images."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(L * L / err)


def _global_ssim(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    return float((2 * mx * my + c1) * (2 * cov + c2)
                 / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_ssim_band(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    win = _gaussian_window()
    k = win.shape[0]
    if x.shape[0] < k or x.shape[1] < k:
        raise ValueError(f"image {x.shape} smaller than {k}x{k} SSIM window")

    def filt(img):
        sw = np.lib.stride_tricks.sliding_window_view(img, (k, k))
        return np.einsum("ijkl,kl->ij", sw, win)

    mx = filt(x)
    my = filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cov + c2)
            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(smap.mean())


def ssim(x, y, mode: str = "global", K1: float = _K1, K2: float = _K2,
         L: float = _L_DEFAULT) -> float:
    """SSIM with stabilizers C1=(K1*L)^2, C2=(K2*L)^2.

    'global' uses whole-image statistics; 'windowed' averages local SSIM over
    an 11x11 Gaussian window (sigma 1.5), per band, then over bands.
    """
    x, y = _check_pair(x, y)
    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    if mode == "global":
        vals = [_global_ssim(x[:, :, b], y[:, :, b], c1, c2) for b in range(x.shape[2])]
    elif mode == "windowed":
        vals = [_windowed_ssim_band(x[:, :, b], y[:, :, b], c1, c2) for b in range(x.shape[2])]
    else:
        raise ValueError(f"unknown SSIM mode {mode!r}")
    return float(np.mean(vals))


def sam(x, y, return_skipped: bool = False):
    """Mean per-pixel spectral angle between band vectors, in degrees.

    Pixels where either vector has zero norm are skipped; raises if every
    pixel is degenerate.
    """
    x, y = _check_pair(x, y)
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    xf = x.reshape(-1, x.shape[2])
    yf = y.reshape(-1, y.shape[2])
    nx = np.linalg.norm(xf, axis=1)
    ny = np.linalg.norm(yf, axis=1)
    valid = (nx > 0) & (ny > 0)
    skipped = int((~valid).sum())
    if not valid.any():
        raise ValueError("SAM undefined: all pixel vectors have zero norm")
    cosang = (xf[valid] * yf[valid]).sum(axis=1) / (nx[valid] * ny[valid])
    angles = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    result = float(angles.mean())
    if return_skipped:
        return result, skipped
    return result


@dataclass
class MetricRow:
    sample_id: str
    mae: float
    mse: float
    psnr_db: float
    ssim: float
    sam_deg: float

    def values(self):
        return (self.mae, self.mse, self.psnr_db, self.ssim, self.sam_deg)


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    ssim_mode: str = "global"
    sam_skipped_pixels: int = 0

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def mean_row(self) -> MetricRow:
        if not self.rows:
            raise ValueError("empty report")
        cols = list(zip(*(r.values() for r in self.rows)))
        return MetricRow("MEAN", *(float(np.mean(c)) for c in cols))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("sample_id,mae,mse,psnr_db,ssim,sam_deg\n")
        for row in self.rows + [self.mean_row()]:
            vals = ",".join("inf" if math.isinf(v) else f"{v:.10g}" for v in row.values())
            out.write(f"{row.sample_id},{vals}\n")
        return out.getvalue()


def compute_report(pairs, ssim_mode: str = "global", L: float = _L_DEFAULT) -> MetricReport:
    """Aggregate metrics over (sample_id, predicted, truth) triples.

    Inputs are expected in [0, 1] and are rescaled by L before evaluation.
    """
    report = MetricReport(ssim_mode=ssim_mode)
    for sample_id, pred, truth in pairs:
        x = np.asarray(pred, dtype=np.float64) * L
        y = np.asarray(truth, dtype=np.float64) * L
        sam_val, skipped = sam(x, y, return_skipped=True)
        report.sam_skipped_pixels += skipped
        report.add(MetricRow(
            sample_id=str(sample_id),
            mae=mae(x, y),
            mse=mse(x, y),
            psnr_db=psnr(x, y, L=L),
            ssim=ssim(x, y, mode=ssim_mode, L=L),
            sam_deg=sam_val,
        ))
    return report
