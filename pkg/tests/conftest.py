import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def lowpass_volume(dims, seed, cutoff=np.pi / 2):
    """Band-limited random volume (no energy at/above the cutoff)."""
    from lapk.core import fft3, ifft3, k_grids

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(dims)
    kx, ky, kz = k_grids(dims)
    keep = (kx**2 + ky**2 + kz**2) < cutoff**2
    return ifft3(fft3(noise) * keep).real
