"""Canonical filter basis for local all-pass registration.

The basis spans derivatives of an isotropic Gaussian: ``f_0`` is the Gaussian
itself (unit sum over the window), ``f_1..f_3`` are its first partial
derivatives, and ``f_4`` (used when ``n_coeffs == 4``) is the Laplacian of
Gaussian with the window mean removed so it has exactly zero response to
constants.  A filter ``f = f_0 + sum_n c_n f_n`` identified between two
volumes encodes a local translation that is read back from its first moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import spatial_axis
from .errors import DegenerateFilterError, UndefinedFrequencyError

__all__ = [
    "FilterBasis",
    "AllPassFilter",
    "build_basis",
    "flow_from_filter",
    "allpass_response",
    "kernel_spectrum",
]


@dataclass
class FilterBasis:
    """A family of ``n_coeffs + 1`` real kernels on a common support.

    ``kernels[0]`` is the even-symmetric base filter whose coefficient is
    fixed to one; the remaining kernels carry the free coefficients.
    """

    support: int
    n_coeffs: int
    kernels: list
    sigma: float

    def __post_init__(self):
        if len(self.kernels) != self.n_coeffs + 1:
            raise ValueError("expected n_coeffs + 1 kernels")
        self.kernels = [np.asarray(k, dtype=float) for k in self.kernels]


@dataclass
class AllPassFilter:
    """Coefficients of an identified filter, tied to its basis."""

    coefficients: np.ndarray
    basis: FilterBasis

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.basis.n_coeffs,):
            raise ValueError("coefficient count must match basis")

    def composite(self) -> np.ndarray:
        """The full kernel ``f = f_0 + sum_n c_n f_n``."""
        f = self.basis.kernels[0].copy()
        for c, k in zip(self.coefficients, self.basis.kernels[1:]):
            f += c * k
        return f


def build_basis(support: int, n_coeffs: int) -> FilterBasis:
    """Sample the Gaussian-derivative basis on a centred cubic grid.

    ``support`` must be odd and >= 5 so a centre voxel exists;
    ``n_coeffs`` selects 3 (Gaussian + first derivatives) or 4
    (adds the mean-removed Laplacian of Gaussian).
    The Gaussian width is tied to the support, ``sigma = (support - 2) / 4``.
    """
    if support < 5 or support % 2 == 0:
        raise ValueError(f"support must be odd and >= 5, got {support}")
    if n_coeffs not in (3, 4):
        raise ValueError(f"n_coeffs must be 3 or 4, got {n_coeffs}")

    sigma = (support - 2) / 4.0
    x = spatial_axis(support).reshape(-1, 1, 1)
    y = spatial_axis(support).reshape(1, -1, 1)
    z = spatial_axis(support).reshape(1, 1, -1)
    r2 = x * x + y * y + z * z
    g = np.exp(-r2 / (2.0 * sigma**2))
    g /= g.sum()

    kernels = [g, -x / sigma**2 * g, -y / sigma**2 * g, -z / sigma**2 * g]
    if n_coeffs == 4:
        log = (r2 / sigma**4 - 3.0 / sigma**2) * g
        log -= log.mean()  # zero DC despite window truncation
        kernels.append(log)
    return FilterBasis(support=support, n_coeffs=n_coeffs, kernels=kernels, sigma=sigma)


def _moments(kernel: np.ndarray):
    nx, ny, nz = kernel.shape
    x = spatial_axis(nx).reshape(-1, 1, 1)
    y = spatial_axis(ny).reshape(1, -1, 1)
    z = spatial_axis(nz).reshape(1, 1, -1)
    total = kernel.sum()
    first = np.array([(x * kernel).sum(), (y * kernel).sum(), (z * kernel).sum()])
    return total, first


def flow_from_filter(filt: AllPassFilter) -> np.ndarray:
    """Translation encoded by a filter: twice its centroid.

    Raises :class:`DegenerateFilterError` when the kernel mass is (near) zero,
    in which case the caller should mark the voxel unreliable.
    """
    f = filt.composite()
    total, first = _moments(f)
    if abs(total) < 1e-12:
        raise DegenerateFilterError("filter mass below 1e-12")
    return 2.0 * first / total


def kernel_spectrum(kernel: np.ndarray, k_axes) -> np.ndarray:
    """DFT of a centred kernel on an arbitrary centred k-grid.

    ``F(k) = sum_xi f(xi) exp(-1j * k . xi)`` evaluated by separable
    contraction; ``k_axes`` are the per-axis frequency samples of the target
    grid.  Exact for any grid size (no zero-padding involved).
    """
    kx, ky, kz = [np.asarray(a, dtype=float) for a in k_axes]
    ex = np.exp(-1j * np.outer(kx, spatial_axis(kernel.shape[0])))
    ey = np.exp(-1j * np.outer(ky, spatial_axis(kernel.shape[1])))
    ez = np.exp(-1j * np.outer(kz, spatial_axis(kernel.shape[2])))
    return np.einsum("ka,lb,mc,abc->klm", ex, ey, ez, kernel, optimize=True)


def allpass_response(filt: AllPassFilter, k) -> complex:
    """All-pass frequency response ``F(k) / F(-k)`` at a single frequency.

    Unit modulus wherever defined, since the composite kernel is real.
    """
    k = np.asarray(k, dtype=float)
    f = filt.composite()
    fwd = kernel_spectrum(f, ([k[0]], [k[1]], [k[2]]))[0, 0, 0]
    bwd = kernel_spectrum(f, ([-k[0]], [-k[1]], [-k[2]]))[0, 0, 0]
    if abs(bwd) < 1e-12:
        raise UndefinedFrequencyError(f"backward response vanishes at k={k}")
    return complex(fwd / bwd)
