"""Non-rigid 3D registration in image space and k-space.

Deformation fields are estimated either from magnitude volumes (sliding-window
local all-pass filters, coarse to fine) or directly from acquired, possibly
undersampled, k-space samples (tapered patches, all-pass least squares or
phase-slope fits).  Supporting pieces: undersampling mask generation, synthetic
phantoms and ground-truth flows, evaluation metrics, binary file formats and a
batch CLI.
"""

from . import core, filter_basis, io, lap_image, lap_kspace, metrics, sampling, synthesis
from .core import FlowField, apply_phase_ramp, fft3, ifft3, warp

__version__ = "0.1.0"

__all__ = [
    "core",
    "filter_basis",
    "io",
    "lap_image",
    "lap_kspace",
    "metrics",
    "sampling",
    "synthesis",
    "FlowField",
    "apply_phase_ramp",
    "fft3",
    "ifft3",
    "warp",
]
