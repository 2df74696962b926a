"""Flow and image-similarity metrics.

Flow accuracy is measured by the end-point error (Euclidean norm of the flow
difference) and the end-angulation error (angle between estimated and
reference vectors, in degrees).  Image similarity between a deformed moving
volume and its fixed target uses SSIM, NRMSE, PSNR and NCC; both volumes are
min/max normalised to [0, 1] internally.

Note the NRMSE convention here is ``sqrt(MSE) / N`` with ``N`` the voxel
count; the usual range-normalised RMSE is reported alongside it as
``nrmse_range``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate

from .core import FlowField
from .errors import UndefinedMetricError

__all__ = [
    "MetricReport",
    "EaeResult",
    "ImageMetrics",
    "interior_mask",
    "epe",
    "eae",
    "image_metrics",
    "sepe",
]

EAE_NORM_FLOOR = 1e-3  # voxels; shorter vectors carry no usable direction
PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    epe_mean: float
    epe_std: float
    eae_mean: float
    eae_std: float
    ssim: float
    nrmse: float
    psnr: float
    ncc: float
    n_voxels_evaluated: int


class EaeResult(NamedTuple):
    mean: float
    std: float
    n_used: int
    n_excluded: int


class ImageMetrics(NamedTuple):
    ssim: float
    nrmse: float
    psnr: float
    ncc: float
    nrmse_range: float


def interior_mask(dims, margin: int) -> np.ndarray:
    """Boolean mask excluding a boundary band of ``margin`` voxels."""
    mask = np.zeros(tuple(dims), dtype=bool)
    if all(n > 2 * margin for n in dims):
        mask[margin:-margin or None, margin:-margin or None, margin:-margin or None] = True
    return mask


def _roi_mask(dims, roi) -> np.ndarray:
    if roi is None:
        return np.ones(tuple(dims), dtype=bool)
    return np.asarray(roi, dtype=bool)


def epe(est: FlowField, ref: FlowField, roi=None):
    """End-point error: per-voxel Euclidean norm of the flow difference.

    Returns ``(mean, std, per_voxel)``; statistics are taken over ``roi``
    (a boolean mask, default everywhere), the map covers the full grid.
    """
    if est.dims != ref.dims:
        raise ValueError("flow dims differ")
    per_voxel = np.linalg.norm(est.vectors - ref.vectors, axis=-1)
    sel = per_voxel[_roi_mask(est.dims, roi)]
    return float(sel.mean()), float(sel.std()), per_voxel


def eae(est: FlowField, ref: FlowField, roi=None) -> EaeResult:
    """End-angulation error in degrees between estimated and reference flow.

    Voxels where either vector is shorter than 1e-3 voxels are excluded from
    the statistics; if nothing remains the metric is undefined.
    """
    if est.dims != ref.dims:
        raise ValueError("flow dims differ")
    sel = _roi_mask(est.dims, roi)
    a = est.vectors[sel]
    b = ref.vectors[sel]
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    usable = (na >= EAE_NORM_FLOOR) & (nb >= EAE_NORM_FLOOR)
    n_excluded = int((~usable).sum())
    if not usable.any():
        raise UndefinedMetricError("all voxels excluded from angulation error")
    cosang = (a[usable] * b[usable]).sum(axis=-1) / (na[usable] * nb[usable])
    ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return EaeResult(float(ang.mean()), float(ang.std()), int(usable.sum()), n_excluded)


def _normalize01(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    lo, hi = a.min(), a.max()
    if hi - lo == 0:
        raise UndefinedMetricError("constant image: zero variance")
    return (a - lo) / (hi - lo)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    t = np.arange(-half, half + 1, dtype=float)
    g1 = np.exp(-(t**2) / (2.0 * sigma**2))
    g = (
        g1.reshape(-1, 1, 1) * g1.reshape(1, -1, 1) * g1.reshape(1, 1, -1)
    )
    return g / g.sum()


def _ssim(a: np.ndarray, b: np.ndarray) -> float:
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = correlate(a, win, mode="nearest")
    mu_b = correlate(b, win, mode="nearest")
    var_a = correlate(a * a, win, mode="nearest") - mu_a**2
    var_b = correlate(b * b, win, mode="nearest") - mu_b**2
    cov = correlate(a * b, win, mode="nearest") - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    pad = SSIM_WINDOW // 2
    core = ssim_map[pad:-pad, pad:-pad, pad:-pad]
    # tiny volumes have no window-sized interior; fall back to the full map
    return float(core.mean()) if core.size else float(ssim_map.mean())


def image_metrics(deformed: np.ndarray, fixed: np.ndarray) -> ImageMetrics:
    """Similarity between a deformed moving volume and the fixed target.

    Both volumes are normalised to [0, 1] first.  Raises
    :class:`UndefinedMetricError` on constant input (NCC undefined).
    """
    a = _normalize01(deformed)
    b = _normalize01(fixed)
    if a.shape != b.shape:
        raise ValueError("volume dims differ")
    n = a.size
    mse = float(((a - b) ** 2).mean())
    nrmse = np.sqrt(mse) / n
    nrmse_range = np.sqrt(mse)
    psnr = PSNR_CAP_DB if mse == 0 else min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt((da**2).mean())
    sb = np.sqrt((db**2).mean())
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("constant image: NCC undefined")
    ncc = float((da * db).sum() / (sa * sb * n))
    return ImageMetrics(_ssim(a, b), float(nrmse), float(psnr), ncc, float(nrmse_range))


def sepe(est, ref) -> float:
    """Squared end-point error between two 3-vectors (the training loss)."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    return float(((ref - est) ** 2).sum())
