"""Grids, Fourier transforms, phase-ramp translation and flow-based warping.

Conventions used throughout the toolkit:

* Arrays are indexed ``[x, y, z]``.
* Spatial coordinates are measured from the grid centre, ``xi = index - N//2``.
* k-space is DC-centred with per-axis frequencies ``k(i) = 2*pi*(i - N//2)/N``,
  i.e. ``k`` in ``[-pi, pi)`` for even sizes.
* The 3D DFT is unitary, so Parseval holds without constants:
  ``fft3(x) = (1/sqrt(Nx*Ny*Nz)) * sum_xi x(xi) exp(-1j*k.xi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.fft import fftn, fftshift, ifftn, ifftshift
from scipy.ndimage import map_coordinates

from .errors import NonFiniteInputError

__all__ = [
    "FlowField",
    "k_axis",
    "k_grids",
    "spatial_axis",
    "fft3",
    "ifft3",
    "apply_phase_ramp",
    "warp",
    "warp_complex",
    "upsample_flow",
]


def k_axis(n: int) -> np.ndarray:
    """DC-centred frequency samples ``2*pi*(i - n//2)/n`` for one axis."""
    return 2.0 * np.pi * (np.arange(n) - n // 2) / n


def spatial_axis(n: int) -> np.ndarray:
    """Centred voxel coordinates ``i - n//2`` for one axis."""
    return np.arange(n, dtype=float) - n // 2


def k_grids(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcastable (kx, ky, kz) grids for a DC-centred k-space of ``dims``."""
    nx, ny, nz = dims
    kx = k_axis(nx).reshape(-1, 1, 1)
    ky = k_axis(ny).reshape(1, -1, 1)
    kz = k_axis(nz).reshape(1, 1, -1)
    return kx, ky, kz


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains non-finite values")


def fft3(volume: np.ndarray) -> np.ndarray:
    """Unitary DC-centred 3D Fourier transform.

    The spatial origin sits at the centre voxel ``N//2``, so a unit impulse
    there transforms to a constant, real k-space.
    """
    volume = np.asarray(volume)
    _check_finite(volume, "fft3 input")
    return fftshift(fftn(ifftshift(volume), norm="ortho"))


def ifft3(kspace: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft3`; returns a complex volume."""
    kspace = np.asarray(kspace)
    _check_finite(kspace, "ifft3 input")
    return fftshift(ifftn(ifftshift(kspace), norm="ortho"))


def apply_phase_ramp(kspace: np.ndarray, u_t) -> np.ndarray:
    """Multiply a k-space by the linear phase ``exp(-1j * u_t . k)``.

    This shifts the underlying image content by ``u_t`` voxels (band-limited
    interpolation for fractional components).  Sample moduli are unchanged.
    """
    kspace = np.asarray(kspace)
    u_t = np.asarray(u_t, dtype=float)
    if not np.all(np.isfinite(u_t)):
        raise NonFiniteInputError("translation vector contains non-finite values")
    _check_finite(kspace, "apply_phase_ramp input")
    kx, ky, kz = k_grids(kspace.shape)
    phase = u_t[0] * kx + u_t[1] * ky + u_t[2] * kz
    return kspace * np.exp(-1j * phase)


@dataclass
class FlowField:
    """Per-voxel 3-vector displacement in voxel units plus a reliability flag.

    ``vectors`` has shape ``(nx, ny, nz, 3)``; ``reliability`` is boolean
    ``(nx, ny, nz)``.  Displacements follow the convention
    ``fixed(x) = moving(x - u(x))``: ``u`` carries content from the moving
    volume onto the fixed one.
    """

    vectors: np.ndarray
    reliability: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 4 or self.vectors.shape[-1] != 3:
            raise ValueError("vectors must have shape (nx, ny, nz, 3)")
        if self.reliability is None:
            self.reliability = np.ones(self.vectors.shape[:3], dtype=bool)
        else:
            self.reliability = np.asarray(self.reliability, dtype=bool)
        if self.reliability.shape != self.vectors.shape[:3]:
            raise ValueError("reliability shape must match vectors")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]

    @classmethod
    def zeros(cls, dims) -> "FlowField":
        return cls(np.zeros((*dims, 3)), np.ones(dims, dtype=bool))

    def copy(self) -> "FlowField":
        return FlowField(self.vectors.copy(), self.reliability.copy())

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=-1)


def _sample_coords(dims, flow: FlowField) -> np.ndarray:
    ix, iy, iz = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    coords = np.stack([ix, iy, iz]).astype(float)
    return coords - np.moveaxis(flow.vectors, -1, 0)


def warp(volume: np.ndarray, flow: FlowField) -> np.ndarray:
    """Deform a volume: ``out(x) = volume(x - u(x))`` with trilinear sampling.

    Sample positions outside the grid are clamped to the boundary voxel.
    """
    volume = np.asarray(volume, dtype=float)
    if volume.shape != flow.dims:
        raise ValueError(f"volume dims {volume.shape} != flow dims {flow.dims}")
    coords = _sample_coords(volume.shape, flow)
    return map_coordinates(volume, coords, order=1, mode="nearest")


def warp_complex(volume: np.ndarray, flow: FlowField) -> np.ndarray:
    """:func:`warp` for complex volumes (real and imaginary parts separately)."""
    volume = np.asarray(volume)
    coords = _sample_coords(volume.shape, flow)
    re = map_coordinates(volume.real, coords, order=1, mode="nearest")
    im = map_coordinates(volume.imag, coords, order=1, mode="nearest")
    return re + 1j * im


def upsample_flow(u_coarse: np.ndarray, rel_coarse: np.ndarray, dims, stride: int) -> FlowField:
    """Trilinearly interpolate a stride-grid flow back to the full grid.

    A full-grid voxel counts as reliable only when every coarse sample it
    interpolates from is reliable.
    """
    if stride == 1:
        return FlowField(u_coarse, rel_coarse)
    ix, iy, iz = np.meshgrid(
        np.arange(dims[0]) / stride,
        np.arange(dims[1]) / stride,
        np.arange(dims[2]) / stride,
        indexing="ij",
    )
    coords = np.stack([ix, iy, iz])
    vecs = np.stack(
        [map_coordinates(u_coarse[..., c], coords, order=1, mode="nearest") for c in range(3)],
        axis=-1,
    )
    relf = map_coordinates(rel_coarse.astype(float), coords, order=1, mode="nearest")
    return FlowField(vecs, relf >= 0.999)
