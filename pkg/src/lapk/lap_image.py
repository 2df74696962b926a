"""Image-space local all-pass registration.

Per window, the filter relating two volumes is identified by linear least
squares: with ``f = f_0 + sum_n c_n f_n`` the residual

    f(-x) * fixed  -  f(x) * moving

is affine in ``c``, so the coefficients solve a small ridge-regularised
normal system.  Sliding the window over the volume gives a per-voxel
translational flow (read off the filter moments), and a coarse-to-fine
schedule of shrinking window sizes handles motion of varying strength.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter, uniform_filter
from scipy.signal import convolve, fftconvolve

from .core import FlowField, fft3, ifft3, k_axis, upsample_flow, warp
from .errors import AllUnreliableError, DegenerateWindowError
from .filter_basis import AllPassFilter, FilterBasis, build_basis, kernel_spectrum

__all__ = [
    "LapConfig",
    "solve_local_filter",
    "estimate_flow_single_level",
    "estimate_flow_multires",
    "inpaint_flow",
]

# a window is degenerate when its normal-matrix trace is this small relative
# to the window signal energy (flat regions: basis responses vanish)
TRACE_REL_FLOOR = 1e-20

# inpainting parameters: normalised-convolution fill then a light smoothing
FILL_SIGMA = 2.0
SMOOTH_BOX = 3


def _odd(w: int) -> int:
    return w if w % 2 == 1 else w + 1


@dataclass
class LapConfig:
    """Multi-resolution settings for image-space registration.

    ``levels`` are window sizes per pass, largest first, forced odd so a
    centre voxel exists.  The ridge weight is relative to the normal-matrix
    trace; estimates larger than ``W/2 - 1`` in any component are rejected.
    """

    levels: tuple = (65, 33, 17, 9, 5)
    n_coeffs: int = 4
    stride: int = 1
    tikhonov: float = 1e-6

    def __post_init__(self):
        self.levels = tuple(_odd(int(w)) for w in self.levels)
        if any(b >= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly decreasing")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray, eps: float, trace_floor: float) -> np.ndarray:
    n = gram.shape[0]
    trace = float(np.trace(gram))
    if trace < trace_floor:
        raise DegenerateWindowError("window carries no basis response")
    lam = eps * trace / n
    try:
        return np.linalg.solve(gram + lam * np.eye(n), rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateWindowError(str(exc)) from exc


def _circular_filter(vol: np.ndarray, kernel: np.ndarray, correlation: bool) -> np.ndarray:
    axes = [k_axis(n) for n in vol.shape]
    spec = kernel_spectrum(kernel, axes)
    if correlation:
        spec = np.conj(spec)
    out = ifft3(fft3(vol) * spec)
    return out.real if not np.iscomplexobj(vol) else out


def _residual_columns(fixed: np.ndarray, moving: np.ndarray, basis: FilterBasis, mode: str):
    """Design columns ``f_n(-x)*fixed - f_n(x)*moving`` and the rhs
    ``f_0*(moving - fixed)``, evaluated per ``mode``:

    * ``valid`` -- linear convolution, residuals only where the kernel fits;
    * ``wrap``  -- circular convolution over the whole (periodic) patch.
    """
    cols = []
    if mode == "valid":
        for kern in basis.kernels[1:]:
            rev = kern[::-1, ::-1, ::-1]
            cols.append(convolve(fixed, rev, mode="valid") - convolve(moving, kern, mode="valid"))
        rhs = convolve(moving - fixed, basis.kernels[0], mode="valid")
    elif mode == "wrap":
        for kern in basis.kernels[1:]:
            cols.append(
                _circular_filter(fixed, kern, correlation=True)
                - _circular_filter(moving, kern, correlation=False)
            )
        rhs = _circular_filter(moving - fixed, basis.kernels[0], correlation=False)
    else:
        raise ValueError(f"unknown mode '{mode}'")
    return cols, rhs


def solve_local_filter(
    fixed_win: np.ndarray,
    moving_win: np.ndarray,
    basis: FilterBasis,
    eps: float = 1e-6,
    mode: str = "valid",
) -> AllPassFilter:
    """Identify the filter coefficients relating two image patches.

    The patches must be at least as large as the basis support; residuals are
    evaluated where the kernels fit (``mode='valid'``) or over the full
    periodic patch (``mode='wrap'``, used for spectral cross-checks).
    """
    fixed_win = np.asarray(fixed_win, dtype=float)
    moving_win = np.asarray(moving_win, dtype=float)
    if fixed_win.shape != moving_win.shape:
        raise ValueError("patch dims differ")
    cols, rhs = _residual_columns(fixed_win, moving_win, basis, mode)
    a = np.stack([c.ravel() for c in cols], axis=1)
    b = rhs.ravel()
    gram = a.T @ a
    energy = float((fixed_win**2).sum() + (moving_win**2).sum())
    c = _ridge_solve(gram, a.T @ b, eps, TRACE_REL_FLOOR * (energy + 1e-300))
    return AllPassFilter(c, basis)


def _filtered_maps(fixed, moving, basis):
    """Whole-volume design columns via circular (periodic) convolution.

    Periodic filtering avoids the static frame edge that zero padding would
    imprint on both volumes; with window sizes approaching the FOV that edge
    otherwise drags every window's estimate towards zero.
    """
    axes = [k_axis(n) for n in fixed.shape]
    vf = fft3(fixed)
    vm = fft3(moving)
    cols = []
    for kern in basis.kernels[1:]:
        spec = kernel_spectrum(kern, axes)
        cols.append(ifft3(np.conj(spec) * vf - spec * vm).real)
    spec0 = kernel_spectrum(basis.kernels[0], axes)
    rhs = ifft3(spec0 * (vm - vf)).real
    return cols, rhs


def _kernel_moment_matrix(basis: FilterBasis) -> np.ndarray:
    """3 x N matrix of kernel first moments; the flow is ``2 * M @ c``
    because the composite filter keeps unit mass (f_0 sums to one, the
    other kernels to zero)."""
    from .filter_basis import _moments

    mom = np.zeros((3, basis.n_coeffs))
    for n, kern in enumerate(basis.kernels[1:]):
        mom[:, n] = _moments(kern)[1]
    return mom


def estimate_flow_single_level(
    fixed: np.ndarray,
    moving: np.ndarray,
    basis: FilterBasis,
    config: LapConfig,
) -> FlowField:
    """One sliding-window pass: a local filter solve per stride-grid voxel.

    Window sums of the residual products are taken with box filters, so every
    voxel's normal system costs O(1) after the whole-volume filtering.
    Degenerate windows and estimates beyond ``W/2 - 1`` become unreliable;
    stride gaps are filled by trilinear interpolation.
    """
    fixed = np.asarray(fixed, dtype=float)
    moving = np.asarray(moving, dtype=float)
    if fixed.shape != moving.shape:
        raise ValueError("volume dims differ")
    w = basis.support
    n = basis.n_coeffs
    dims = fixed.shape
    cols, rhs = _filtered_maps(fixed, moving, basis)

    # window sums of products; constant-mode padding restricts each sum to
    # in-volume residual samples
    def box(vol):
        return uniform_filter(vol, size=w, mode="constant") * float(w**3)

    gram_maps = {}
    for i in range(n):
        for j in range(i, n):
            gram_maps[(i, j)] = box(cols[i] * cols[j])
    rhs_maps = [box(cols[i] * rhs) for i in range(n)]
    energy_map = box(fixed**2 + moving**2)

    stride = config.stride
    gx = np.arange(0, dims[0], stride)
    gy = np.arange(0, dims[1], stride)
    gz = np.arange(0, dims[2], stride)
    sub = np.ix_(gx, gy, gz)

    nc = len(gx) * len(gy) * len(gz)
    gram = np.empty((nc, n, n))
    for i in range(n):
        for j in range(i, n):
            vals = gram_maps[(i, j)][sub].ravel()
            gram[:, i, j] = vals
            gram[:, j, i] = vals
    rvec = np.stack([m[sub].ravel() for m in rhs_maps], axis=1)

    trace = np.einsum("...ii->...", gram)
    ok = trace > TRACE_REL_FLOOR * (energy_map[sub].ravel() + 1e-300)
    lam = np.where(ok, config.tikhonov * trace / n, 1.0)
    gram_reg = gram + lam[:, None, None] * np.eye(n)
    coef = np.zeros((nc, n))
    if ok.any():
        try:
            coef[ok] = np.linalg.solve(gram_reg[ok], rvec[ok, :, None])[..., 0]
        except np.linalg.LinAlgError:
            for idx in np.flatnonzero(ok):
                try:
                    coef[idx] = np.linalg.solve(gram_reg[idx], rvec[idx])
                except np.linalg.LinAlgError:
                    ok[idx] = False

    moments = _kernel_moment_matrix(basis)
    u = 2.0 * coef @ moments.T
    max_disp = w / 2.0 - 1.0
    ok &= np.all(np.isfinite(u), axis=1)
    ok &= np.max(np.abs(u), axis=1) <= max_disp
    u[~ok] = 0.0

    shape_c = (len(gx), len(gy), len(gz))
    u_coarse = u.reshape(*shape_c, 3)
    rel_coarse = ok.reshape(shape_c)
    return upsample_flow(u_coarse, rel_coarse, dims, stride)


def inpaint_flow(flow: FlowField) -> FlowField:
    """Fill unreliable voxels and lightly smooth the field.

    Unreliable voxels take the normalised-convolution (Gaussian, sigma 2)
    average of reliable neighbours, falling back to the nearest reliable
    voxel where no neighbour is in reach; the whole field then gets a 3^3
    box smoothing.  Reliability flags pass through unchanged.
    """
    rel = flow.reliability
    if not rel.any():
        raise AllUnreliableError("no reliable voxels to inpaint from")
    vecs = flow.vectors.copy()
    if not rel.all():
        weight = rel.astype(float)
        den = gaussian_filter(weight, FILL_SIGMA, mode="constant")
        covered = den > 1e-6
        _, nearest = distance_transform_edt(~rel, return_indices=True)
        for c in range(3):
            num = gaussian_filter(vecs[..., c] * weight, FILL_SIGMA, mode="constant")
            filled = np.where(covered, num / np.where(covered, den, 1.0), 0.0)
            fallback = vecs[..., c][tuple(nearest)]
            filled = np.where(covered, filled, fallback)
            vecs[..., c] = np.where(rel, vecs[..., c], filled)
    smoothed = np.stack(
        [uniform_filter(vecs[..., c], size=SMOOTH_BOX, mode="nearest") for c in range(3)],
        axis=-1,
    )
    return FlowField(smoothed, rel.copy())


def _level_iterations(w: int) -> int:
    if w >= 45:
        return 1
    if w >= 25:
        return 2
    if w >= 13:
        return 4
    if w >= 7:
        return 18
    return 30


def _level_smoothing(w: int) -> float:
    # trust band of a level: increments are low-passed to roughly the scale
    # the window can resolve, which keeps the warp-estimate iteration stable
    if w >= 17:
        return w / 2.0
    if w >= 9:
        return 2.5
    return 0.8


def _compose_flow(accum: FlowField, delta: FlowField) -> FlowField:
    """``u_new(x) = delta(x) + u(x - delta(x))``: carry the earlier flow
    along the increment instead of adding in place (large-strain fields)."""
    carried = np.stack(
        [warp(accum.vectors[..., c], delta) for c in range(3)], axis=-1
    )
    return FlowField(delta.vectors + carried, delta.reliability)


def estimate_flow_multires(
    fixed: np.ndarray,
    moving: np.ndarray,
    config: LapConfig | None = None,
    iters_per_level=None,
    smooth_increments: bool = True,
) -> FlowField:
    """Coarse-to-fine registration: accumulate per-level flow increments.

    The moving volume is re-warped with the accumulated flow before every
    estimation pass (several passes per level); each increment is inpainted,
    low-passed to the level's trust band, and composed onto the running flow.
    Inputs are magnitude volumes.
    """
    if config is None:
        config = LapConfig()
    fixed = np.asarray(fixed, dtype=float)
    moving = np.asarray(moving, dtype=float)
    accum = FlowField.zeros(fixed.shape)
    for li, w in enumerate(config.levels):
        if w >= 2 * max(fixed.shape):
            continue
        basis = build_basis(w, config.n_coeffs)
        if iters_per_level is None:
            n_iter = _level_iterations(w)
        elif np.isscalar(iters_per_level):
            n_iter = int(iters_per_level)
        else:
            n_iter = int(iters_per_level[li])
        sig = _level_smoothing(w) if smooth_increments else 0.0
        for _ in range(n_iter):
            warped = warp(moving, accum)
            delta = inpaint_flow(estimate_flow_single_level(fixed, warped, basis, config))
            if sig >= 0.5:
                vecs = np.stack(
                    [gaussian_filter(delta.vectors[..., c], sig, mode="nearest") for c in range(3)],
                    axis=-1,
                )
                delta = FlowField(vecs, delta.reliability)
            accum = _compose_flow(accum, delta)
    return accum
