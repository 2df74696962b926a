"""Registration operating directly on (possibly undersampled) k-space.

Localisation that image-space methods get from windowing is obtained here by
tapering: multiplying the zero-filled reconstruction by a Hann window centred
at a voxel is, in k-space, a phase-modulated convolution with the window's
compact spectrum.  Each tapered neighbourhood is regridded onto a small
DC-centred patch grid (default 33^3) on which a local translation is
estimated, either by solving the all-pass filter least squares over the
acquired samples only, or by fitting a plane to the unwrapped cross-phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .core import FlowField, fft3, ifft3, k_axis, spatial_axis, upsample_flow
from .errors import InsufficientSamplesError
from .filter_basis import AllPassFilter, FilterBasis, kernel_spectrum
from .lap_image import TRACE_REL_FLOOR, _compose_flow, _ridge_solve, inpaint_flow

__all__ = [
    "Taper",
    "KPatch",
    "make_taper",
    "taper_and_regrid",
    "propagate_mask",
    "solve_kspace_filter",
    "estimate_translation_phase_slope",
    "kspace_flow_field",
    "merge_orthogonal_runs",
]

DEFAULT_PATCH = 33
KERNEL_TRUNC = 1e-3  # drop spectrum samples below this fraction of the peak
PHASE_NOISE_FLOOR = 1e-6  # relative weight below which samples are unusable
PHASE_RESIDUAL_LIMIT = np.pi / 2  # larger fit residuals flag the estimate


@dataclass
class Taper:
    """Separable Hann taper of width ``support`` and its spectral footprint.

    ``window`` is the 3D image-domain taper (peak 1 at the centre);
    regridding matrices for the k-space-native path are built per parent
    grid size and cached.
    """

    support: int = DEFAULT_PATCH
    window: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    truncation: float = KERNEL_TRUNC
    _regrid_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.support < 3 or self.support % 2 == 0:
            raise ValueError("taper support must be odd and >= 3")
        w1 = np.hanning(self.support)
        if self.window is None:
            self.window = (
                w1.reshape(-1, 1, 1) * w1.reshape(1, -1, 1) * w1.reshape(1, 1, -1)
            )
        self.window_1d = w1

    def regrid_matrix(self, n_parent: int) -> np.ndarray:
        """Truncated 1D spectral interpolation matrix (support x n_parent).

        Entry (j, a) is the window spectrum at ``kappa_j - k_a``; rows map the
        parent k-axis onto the patch k-axis.
        """
        key = n_parent
        if key not in self._regrid_cache:
            q = k_axis(self.support)[:, None] - k_axis(n_parent)[None, :]
            xi = spatial_axis(self.support)
            spec = np.cos(np.multiply.outer(q, xi)) @ self.window_1d
            peak = np.abs(spec).max()
            spec[np.abs(spec) < self.truncation * peak] = 0.0
            self._regrid_cache[key] = spec
        return self._regrid_cache[key]


@dataclass
class KPatch:
    """Tapered, regridded k-space neighbourhood anchored at a voxel centre."""

    center: tuple
    data: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.center = tuple(int(c) for c in self.center)
        self.data = np.asarray(self.data, dtype=complex)
        if self.mask is None:
            self.mask = np.ones(self.data.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape:
            raise ValueError("mask shape must match data")

    @property
    def size(self) -> tuple:
        return self.data.shape


def make_taper(support: int = DEFAULT_PATCH) -> Taper:
    return Taper(support=support)


def propagate_mask(parent_mask: np.ndarray, support: int) -> np.ndarray:
    """Acquired-sample footprint on the patch grid (nearest parent sample)."""
    parent_mask = np.asarray(parent_mask, dtype=bool)
    idx = []
    for n in parent_mask.shape:
        nearest = np.rint(k_axis(support) * n / (2 * np.pi)).astype(int) + n // 2
        idx.append(np.clip(nearest, 0, n - 1))
    return parent_mask[np.ix_(idx[0], idx[1], idx[2])]


def _windowed_crop(image: np.ndarray, x0, taper: Taper) -> np.ndarray:
    # the image of a DC-centred k-grid is periodic, so crops wrap at the FOV
    w = taper.support
    h = w // 2
    idx = [(np.arange(c - h, c + h + 1)) % image.shape[ax] for ax, c in enumerate(x0)]
    return image[np.ix_(*idx)] * taper.window


def taper_and_regrid(
    kspace: np.ndarray,
    x0,
    taper: Taper,
    parent_mask: np.ndarray | None = None,
    method: str = "image",
) -> KPatch:
    """Extract the tapered k-space patch anchored at voxel ``x0``.

    ``method='image'`` realises the defining operation: window the inverse
    transform around ``x0``, crop, and transform the crop.  ``method='kspace'``
    stays in k-space: phase-modulate so ``x0`` becomes the centre, then apply
    the truncated separable window spectrum as a regridding convolution.
    Both agree within the truncation tolerance.
    """
    kspace = np.asarray(kspace)
    dims = kspace.shape
    x0 = tuple(int(round(c)) for c in x0)
    if any(c < 0 or c >= n for c, n in zip(x0, dims)):
        raise ValueError(f"anchor {x0} outside FOV {dims}")
    w = taper.support
    if method == "image":
        data = fft3(_windowed_crop(ifft3(kspace), x0, taper))
    elif method == "kspace":
        center = tuple(n // 2 for n in dims)
        shift = np.array(x0, dtype=float) - np.array(center, dtype=float)
        kx, ky, kz = k_axis(dims[0]), k_axis(dims[1]), k_axis(dims[2])
        ramp = np.exp(
            1j
            * (
                shift[0] * kx[:, None, None]
                + shift[1] * ky[None, :, None]
                + shift[2] * kz[None, None, :]
            )
        )
        mod = kspace * ramp
        bx = taper.regrid_matrix(dims[0])
        by = taper.regrid_matrix(dims[1])
        bz = taper.regrid_matrix(dims[2])
        data = np.einsum("ja,kb,lc,abc->jkl", bx, by, bz, mod, optimize=True)
        data /= np.sqrt(float(w**3) * float(np.prod(dims)))
    else:
        raise ValueError(f"unknown method '{method}'")
    mask = None if parent_mask is None else propagate_mask(parent_mask, w)
    return KPatch(center=x0, data=data, mask=mask)


def _patch_spectra(basis: FilterBasis, dims) -> list:
    axes = [k_axis(n) for n in dims]
    return [kernel_spectrum(kern, axes) for kern in basis.kernels]


def solve_kspace_filter(
    fixed: KPatch,
    moving: KPatch,
    basis: FilterBasis,
    eps: float = 1e-6,
    spectra: list | None = None,
) -> AllPassFilter:
    """All-pass coefficients from k-space samples (acquired locations only).

    Minimises ``sum_k |F(k) v_m(k) - F(-k) v_f(k)|^2`` over the jointly
    acquired patch samples, ridge-regularised; ``F`` is the basis spectrum on
    the patch grid and ``F(-k) = conj(F(k))`` since the kernels are real.
    """
    if fixed.size != moving.size or fixed.center != moving.center:
        raise ValueError("patches must share centre and size")
    joint = fixed.mask & moving.mask
    n_acq = int(joint.sum())
    if n_acq < basis.n_coeffs + 1:
        raise InsufficientSamplesError(
            f"{n_acq} acquired samples < {basis.n_coeffs + 1} required"
        )
    if spectra is None:
        spectra = _patch_spectra(basis, fixed.data.shape)
    vf = fixed.data[joint]
    vm = moving.data[joint]
    cols = [spec[joint] * vm - np.conj(spec[joint]) * vf for spec in spectra]
    m = np.stack(cols[1:], axis=1)
    d = -cols[0]
    gram = (np.conj(m.T) @ m).real
    rhs = (np.conj(m.T) @ d).real
    energy = float((np.abs(vf) ** 2).sum() + (np.abs(vm) ** 2).sum())
    coeffs = _ridge_solve(gram, rhs, eps, TRACE_REL_FLOOR * (energy + 1e-300))
    return AllPassFilter(coeffs, basis)


def _radial_order(dims, joint: np.ndarray):
    kx, ky, kz = np.meshgrid(k_axis(dims[0]), k_axis(dims[1]), k_axis(dims[2]), indexing="ij")
    kvec = np.stack([kx[joint], ky[joint], kz[joint]], axis=1)
    order = np.argsort(np.linalg.norm(kvec, axis=1), kind="stable")
    return kvec[order], order


def _shell_slices(n: int):
    out = []
    start, size = 0, 8
    while start < n:
        stop = min(n, start + size)
        out.append(slice(start, stop))
        start = stop
        size = min(2 * size, 4096)
    return out


def _phase_fit_batch(q: np.ndarray, kvec: np.ndarray, ftype=np.float32):
    """Weighted plane fit of unwrapped cross-phases for a batch of patches.

    ``q`` holds cross spectra (batch, samples) sorted by |k| ascending;
    unwrapping proceeds shell by shell against the running fit, then a second
    pass re-unwraps against the converged plane.  Returns ``(u, reliable)``
    arrays; centres whose wrapped residuals stay large are flagged.
    """
    nb, ns = q.shape
    weight = np.abs(q).astype(ftype)
    wmax = weight.max(axis=1, keepdims=True)
    w = np.where(weight > wmax * PHASE_NOISE_FLOOR, weight, ftype(0.0)) / np.where(
        wmax > 0, wmax, ftype(1.0)
    )
    raw = np.angle(q).astype(ftype)
    shells = _shell_slices(ns)
    eye = 1e-12 * np.eye(3)
    kvec_f = kvec.astype(ftype)
    # the six unique k_i k_j products per sample feed the Gram via one matmul
    pij = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
    kk6 = np.stack([kvec_f[:, i] * kvec_f[:, j] for i, j in pij], axis=1)
    two_pi = ftype(2 * np.pi)

    def sweep(u_start):
        gram6 = np.zeros((nb, 6), dtype=np.float64)
        rhs = np.zeros((nb, 3), dtype=np.float64)
        u_cur = u_start.astype(ftype)
        theta = np.empty_like(raw)
        for sl in shells:
            kk = kvec_f[sl]
            pred = -(u_cur @ kk.T)
            th = raw[:, sl] + two_pi * np.rint((pred - raw[:, sl]) / two_pi)
            theta[:, sl] = th
            ww = w[:, sl]
            gram6 += ww @ kk6[sl]
            rhs -= (ww * th) @ kk
            gram = np.empty((nb, 3, 3))
            for pos, (i, j) in enumerate(pij):
                gram[:, i, j] = gram[:, j, i] = gram6[:, pos]
            try:
                u_cur = np.linalg.solve(gram + eye, rhs[..., None])[..., 0].astype(ftype)
            except np.linalg.LinAlgError:
                pass
        return u_cur.astype(np.float64), theta, gram

    u, _, _ = sweep(np.zeros((nb, 3)))
    u, theta, gram = sweep(u)
    resid = theta + (u @ kvec.T).astype(ftype)
    resid -= two_pi * np.rint(resid / two_pi)
    wsum = np.maximum(w.sum(axis=1), 1e-300)
    rms = np.sqrt((w * resid**2).sum(axis=1) / wsum)
    spanned = np.abs(np.linalg.det(gram)) > 1e-18
    reliable = (rms < PHASE_RESIDUAL_LIMIT) & spanned
    return u, reliable


def estimate_translation_phase_slope(fixed: KPatch, moving: KPatch):
    """Translation from the cross-phase slope: fit ``arg(v_f conj(v_m))``
    to ``-u . k`` by weighted least squares over acquired samples.

    Phases are unwrapped radially outward from DC against the running fit.
    Returns ``(u, reliable)``; the flag drops when the final wrapped
    residuals stay far from the fitted plane (unwrap failure).
    """
    if fixed.size != moving.size:
        raise ValueError("patches must share size")
    joint = fixed.mask & moving.mask
    q = fixed.data[joint] * np.conj(moving.data[joint])
    weight = np.abs(q)
    floor = weight.max() * PHASE_NOISE_FLOOR if weight.size else 0.0
    if int((weight > floor).sum()) < 4:
        raise InsufficientSamplesError("fewer than 4 usable samples for phase fit")
    kvec, order = _radial_order(fixed.data.shape, joint)
    u, reliable = _phase_fit_batch(q[order][None, :], kvec, ftype=np.float64)
    if not np.isfinite(u[0]).all():
        raise InsufficientSamplesError("acquired samples do not span 3 dimensions")
    return u[0], bool(reliable[0])


def merge_orthogonal_runs(run1, run2) -> np.ndarray:
    """Combine two orthogonal-slicing in-plane estimates into a 3-vector.

    Run 1 slices along z and sees (x, y); run 2 slices along x and sees
    (y, z); the shared y component is averaged.
    """
    u11, u21 = float(run1[0]), float(run1[1])
    u12, u22 = float(run2[0]), float(run2[1])
    return np.array([u11, 0.5 * (u21 + u12), u22])


def _chunked(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


class _PatchExtractor:
    """Batched tapered-patch extraction from a zero-filled image.

    The image is zero-padded by half a window so every in-FOV centre has a
    full crop; crops are gathered through a sliding-window view and
    transformed with one batched FFT per chunk.  By default patches come
    back in plain (uncentred) FFT layout with the centring phase omitted:
    both cancel in every quadratic data term, so only precomputed spectral
    weights need re-indexing.  ``centered=True`` returns true DC-centred
    patches.
    """

    def __init__(self, image: np.ndarray, taper: Taper):
        w = taper.support
        h = w // 2
        self.w = w
        self.window = taper.window.astype(np.float32)
        padded = np.pad(image.astype(np.complex64), h, mode="wrap")
        self.view = np.lib.stride_tricks.sliding_window_view(padded, (w, w, w))
        ax = 2.0 * np.pi * (w // 2) * np.arange(w) / w
        phase1 = np.exp(1j * ax).astype(np.complex64)
        self._center_phase = (
            phase1.reshape(-1, 1, 1) * phase1.reshape(1, -1, 1) * phase1.reshape(1, 1, -1)
        )

    def patches(self, centers, centered: bool = False) -> np.ndarray:
        idx = np.asarray(centers)
        crops = self.view[idx[:, 0], idx[:, 1], idx[:, 2]] * self.window
        spec = scipy.fft.fftn(crops, axes=(-3, -2, -1), norm="ortho", workers=-1)
        if centered:
            spec = np.fft.fftshift(spec * self._center_phase, axes=(-3, -2, -1))
        return spec


def _field_pass(
    img_f: np.ndarray,
    img_m: np.ndarray,
    joint: np.ndarray,
    taper: Taper,
    basis: FilterBasis,
    stride: int,
    solver: str,
    eps: float,
    dims,
) -> FlowField:
    """One sliding-window estimation pass over the stride grid."""
    w = taper.support
    gx = np.arange(0, dims[0], stride)
    gy = np.arange(0, dims[1], stride)
    gz = np.arange(0, dims[2], stride)
    centers = [(x, y, z) for x in gx for y in gy for z in gz]
    n_centers = len(centers)
    u = np.zeros((n_centers, 3))
    ok = np.zeros(n_centers, dtype=bool)
    max_disp = w / 2.0 - 1.0
    n_acq = int(joint.sum())
    extract_f = _PatchExtractor(img_f, taper)
    extract_m = _PatchExtractor(img_m, taper)
    plain = np.fft.ifftshift
    joint_plain = plain(joint)

    if solver == "eq13" and n_acq >= basis.n_coeffs + 1:
        # the normal system is quadratic in the data, so every Gram entry is
        # a weighted sum of |v_f|^2 + |v_m|^2 and Re/Im of v_f conj(v_m) with
        # centre-independent spectral weights: one BLAS call per chunk.
        # patches arrive in plain FFT layout, so weights are re-indexed too
        from .lap_image import _kernel_moment_matrix

        moments = _kernel_moment_matrix(basis)
        spectra = _patch_spectra(basis, (w, w, w))
        n = basis.n_coeffs
        s_acq = np.stack([plain(s)[joint_plain] for s in spectra])
        pair_idx = [(a, b) for a in range(n + 1) for b in range(a, n + 1)]
        w_e = np.stack([(np.conj(s_acq[a]) * s_acq[b]).real for a, b in pair_idx], axis=1)
        p3 = [s_acq[a] * s_acq[b] for a, b in pair_idx]
        w_qr = np.stack([-2.0 * p.real for p in p3], axis=1)
        w_qi = np.stack([-2.0 * p.imag for p in p3], axis=1)
        pair_pos = {ab: i for i, ab in enumerate(pair_idx)}
        weights = np.concatenate([w_e, w_qr, w_qi], axis=0).astype(np.float32)
        fully_sampled = bool(joint_plain.all())

        for chunk_idx in _chunked(np.arange(n_centers), 128):
            chunk_centers = [centers[ci] for ci in chunk_idx]
            pf = extract_f.patches(chunk_centers)
            pm = extract_m.patches(chunk_centers)
            if fully_sampled:
                batch_f = pf.reshape(len(chunk_idx), -1)
                batch_m = pm.reshape(len(chunk_idx), -1)
            else:
                batch_f = pf[:, joint_plain]
                batch_m = pm[:, joint_plain]
            e_dat = np.abs(batch_f) ** 2 + np.abs(batch_m) ** 2
            q = batch_f * np.conj(batch_m)
            data_cat = np.concatenate([e_dat, q.real, q.imag], axis=1)
            pairs = (data_cat @ weights).astype(np.float64)
            nb = len(chunk_idx)
            gram = np.empty((nb, n, n))
            rhs = np.empty((nb, n))
            for a in range(1, n + 1):
                rhs[:, a - 1] = -pairs[:, pair_pos[(0, a)]]
                for b in range(a, n + 1):
                    gram[:, a - 1, b - 1] = gram[:, b - 1, a - 1] = pairs[:, pair_pos[(a, b)]]
            trace = np.einsum("bii->b", gram)
            energy = e_dat.sum(axis=1).astype(np.float64)
            good = trace > TRACE_REL_FLOOR * (energy + 1e-300)
            lam = np.where(good, eps * trace / n, 1.0)
            gram += lam[:, None, None] * np.eye(n)
            try:
                coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                coef = np.zeros((nb, n))
                good[:] = False
            uu = 2.0 * coef @ moments.T
            good &= np.all(np.isfinite(uu), axis=1)
            good &= np.max(np.abs(uu), axis=1) <= max_disp
            uu[~good] = 0.0
            u[chunk_idx] = uu
            ok[chunk_idx] = good
    elif solver == "phase_slope" and n_acq >= 4:
        kx, ky, kz = np.meshgrid(
            plain(k_axis(w)), plain(k_axis(w)), plain(k_axis(w)), indexing="ij"
        )
        kvec_all = np.stack([kx[joint_plain], ky[joint_plain], kz[joint_plain]], axis=1)
        order = np.argsort(np.linalg.norm(kvec_all, axis=1), kind="stable")
        kvec = kvec_all[order]
        cols_take = np.flatnonzero(joint_plain.ravel())[order]
        for chunk_idx in _chunked(np.arange(n_centers), 128):
            chunk_centers = [centers[ci] for ci in chunk_idx]
            nb = len(chunk_idx)
            batch_f = extract_f.patches(chunk_centers).reshape(nb, -1)[:, cols_take]
            batch_m = extract_m.patches(chunk_centers).reshape(nb, -1)[:, cols_take]
            q = batch_f * np.conj(batch_m)
            uu, rel = _phase_fit_batch(q, kvec)
            rel &= np.all(np.isfinite(uu), axis=1)
            rel &= np.max(np.abs(uu), axis=1) <= max_disp
            uu[~rel] = 0.0
            u[chunk_idx] = uu
            ok[chunk_idx] = rel
    elif solver not in ("eq13", "phase_slope"):
        raise ValueError(f"unknown solver '{solver}'")

    shape_c = (len(gx), len(gy), len(gz))
    field = upsample_flow(u.reshape(*shape_c, 3), ok.reshape(shape_c), dims, stride)
    return inpaint_flow(field)


def kspace_flow_field(
    fixed_ks: np.ndarray,
    moving_ks: np.ndarray,
    mask=None,
    taper: Taper | None = None,
    basis: FilterBasis | None = None,
    stride: int = 2,
    solver: str = "eq13",
    eps: float = 1e-6,
    refine_iters: int = 0,
    refine_stride: int | None = None,
) -> FlowField:
    """Sliding-window translation estimation over tapered k-space patches.

    For every stride-grid voxel both (zero-filled) inputs are tapered and
    regridded at that centre and a local translation is estimated with the
    selected solver (``eq13`` or ``phase_slope``).  Failed or out-of-bound
    estimates become unreliable; gaps are interpolated and inpainted.

    Because the taper envelope does not move with the content, a single pass
    recovers only part of the displacement; ``refine_iters`` extra passes
    re-warp the moving reconstruction with the accumulated field (coarser
    ``refine_stride`` grid) before a final pass at the requested stride.
    """
    from .core import warp_complex

    fixed_ks = np.asarray(fixed_ks)
    moving_ks = np.asarray(moving_ks)
    if fixed_ks.shape != moving_ks.shape:
        raise ValueError("k-space dims differ")
    if taper is None:
        taper = make_taper()
    if basis is None:
        from .filter_basis import build_basis

        basis = build_basis(17, 4)
    dims = fixed_ks.shape
    kept = None if mask is None else mask.kept
    if kept is not None:
        fixed_ks = np.where(kept, fixed_ks, 0.0)
        moving_ks = np.where(kept, moving_ks, 0.0)
    img_f = ifft3(fixed_ks)
    img_m = ifft3(moving_ks)
    w = taper.support
    joint = np.ones((w, w, w), dtype=bool) if kept is None else propagate_mask(kept, w)

    if refine_stride is None:
        refine_stride = max(stride, 4)
    accum = FlowField.zeros(dims)
    for _ in range(max(0, int(refine_iters))):
        warped = warp_complex(img_m, accum)
        delta = _field_pass(img_f, warped, joint, taper, basis, refine_stride, solver, eps, dims)
        accum = _compose_flow(accum, delta)
    warped = warp_complex(img_m, accum)
    delta = _field_pass(img_f, warped, joint, taper, basis, stride, solver, eps, dims)
    return _compose_flow(accum, delta)
