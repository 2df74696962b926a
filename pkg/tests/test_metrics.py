import math

import numpy as np
import numpy.testing as npt
import pytest

from lapk.core import FlowField
from lapk.errors import UndefinedMetricError
from lapk.metrics import eae, epe, image_metrics, interior_mask, sepe


def _random_flow(rng, dims):
    return FlowField(rng.standard_normal((*dims, 3)))


def test_epe_zero_for_identical(rng):
    f = _random_flow(rng, (6, 6, 6))
    mean, std, per = epe(f, f)
    assert mean == 0 and std == 0
    assert per.max() == 0


def test_epe_constant_offset_345(rng):
    ref = _random_flow(rng, (6, 6, 6))
    est = FlowField(ref.vectors + np.array([3.0, 4.0, 0.0]))
    mean, std, per = epe(est, ref)
    npt.assert_allclose(per, 5.0, atol=1e-12)
    assert std < 1e-12


def test_epe_matches_loop_oracle(rng):
    est = _random_flow(rng, (8, 8, 8))
    ref = _random_flow(rng, (8, 8, 8))
    _, _, per = epe(est, ref)
    for idx in [(0, 0, 0), (3, 4, 5), (7, 7, 7)]:
        d = est.vectors[idx] - ref.vectors[idx]
        want = math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
        assert abs(per[idx] - want) < 1e-12


def test_eae_scale_invariant(rng):
    ref = _random_flow(rng, (6, 6, 6))
    est = FlowField(2.0 * ref.vectors)
    res = eae(est, ref)
    assert res.mean == pytest.approx(0.0, abs=1e-5)


def test_eae_orthogonal_is_90(rng):
    dims = (5, 5, 5)
    ref = FlowField(np.broadcast_to(np.array([1.0, 0, 0]), (*dims, 3)).copy())
    est = FlowField(np.broadcast_to(np.array([0, 2.0, 0]), (*dims, 3)).copy())
    assert eae(est, ref).mean == pytest.approx(90.0, abs=1e-9)


def test_eae_excludes_short_vectors(rng):
    dims = (4, 4, 4)
    vec = np.zeros((*dims, 3))
    vec[..., 0] = 1.0
    ref = FlowField(vec.copy())
    est = FlowField(vec.copy())
    est.vectors[0, 0, 0] = 1e-6  # below the direction floor
    res = eae(est, ref)
    assert res.n_excluded == 1
    assert res.n_used == 63


def test_eae_all_excluded_raises():
    dims = (4, 4, 4)
    zero = FlowField(np.zeros((*dims, 3)))
    with pytest.raises(UndefinedMetricError):
        eae(zero, zero)


def test_eae_matches_loop_oracle(rng):
    est = _random_flow(rng, (8, 8, 8))
    ref = _random_flow(rng, (8, 8, 8))
    res = eae(est, ref)
    angles = []
    for i in range(8):
        for j in range(8):
            for k in range(8):
                a = est.vectors[i, j, k]
                b = ref.vectors[i, j, k]
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                if na < 1e-3 or nb < 1e-3:
                    continue
                cosang = min(1.0, max(-1.0, float(a @ b) / (na * nb)))
                angles.append(math.degrees(math.acos(cosang)))
    assert abs(res.mean - np.mean(angles)) < 1e-9
    assert abs(res.std - np.std(angles)) < 1e-9


def test_image_metrics_identical(rng):
    a = rng.random((16, 16, 16))
    m = image_metrics(a, a)
    assert m.ssim == pytest.approx(1.0, abs=1e-12)
    assert m.nrmse == 0
    assert m.psnr == 99.0
    assert m.ncc == pytest.approx(1.0, abs=1e-12)


def test_image_metrics_inverted_ncc(rng):
    a = rng.random((12, 12, 12))
    m = image_metrics(1.0 - a, a)
    assert m.ncc == pytest.approx(-1.0, abs=1e-12)


def test_image_metrics_constant_raises():
    with pytest.raises(UndefinedMetricError):
        image_metrics(np.ones((8, 8, 8)), np.random.default_rng(0).random((8, 8, 8)))


def _metrics_oracle(a, b):
    """Straightforward-loop implementation of all four metrics."""
    a = (a - a.min()) / (a.max() - a.min())
    b = (b - b.min()) / (b.max() - b.min())
    n = a.size
    mse = 0.0
    for x in np.ndindex(a.shape):
        mse += (a[x] - b[x]) ** 2
    mse /= n
    nrmse = math.sqrt(mse) / n
    psnr = min(99.0, 10 * math.log10(1 / mse)) if mse > 0 else 99.0
    am, bm = a.mean(), b.mean()
    num = sa = sb = 0.0
    for x in np.ndindex(a.shape):
        num += (a[x] - am) * (b[x] - bm)
        sa += (a[x] - am) ** 2
        sb += (b[x] - bm) ** 2
    ncc = num / (math.sqrt(sa / n) * math.sqrt(sb / n) * n)

    half = 5
    sigma = 1.5
    t = np.arange(-half, half + 1, dtype=float)
    g1 = np.exp(-(t**2) / (2 * sigma**2))
    win = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    nx, ny, nz = a.shape
    for i in range(half, nx - half):
        for j in range(half, ny - half):
            for k in range(half, nz - half):
                pa = a[i - half : i + half + 1, j - half : j + half + 1, k - half : k + half + 1]
                pb = b[i - half : i + half + 1, j - half : j + half + 1, k - half : k + half + 1]
                mu_a = (win * pa).sum()
                mu_b = (win * pb).sum()
                va = (win * pa * pa).sum() - mu_a**2
                vb = (win * pb * pb).sum() - mu_b**2
                cov = (win * pa * pb).sum() - mu_a * mu_b
                vals.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
                )
    return float(np.mean(vals)), nrmse, psnr, float(ncc)


def test_image_metrics_match_loop_oracle(rng):
    a = rng.random((16, 16, 16))
    b = rng.random((16, 16, 16))
    got = image_metrics(a, b)
    ssim_o, nrmse_o, psnr_o, ncc_o = _metrics_oracle(a, b)
    assert abs(got.ssim - ssim_o) < 1e-9
    assert abs(got.nrmse - nrmse_o) < 1e-9
    assert abs(got.psnr - psnr_o) < 1e-9
    assert abs(got.ncc - ncc_o) < 1e-9


def test_sepe_examples():
    assert sepe((1, 2, 3), (1, 2, 3)) == 0
    assert sepe((1, 2, 2), (0, 0, 0)) == 9


def test_sepe_equals_epe_squared(rng):
    est = _random_flow(rng, (4, 4, 4))
    ref = _random_flow(rng, (4, 4, 4))
    _, _, per = epe(est, ref)
    for idx in [(0, 0, 0), (1, 2, 3), (3, 3, 3)]:
        s = sepe(est.vectors[idx], ref.vectors[idx])
        assert abs(s - per[idx] ** 2) < 1e-12


def test_metric_symmetry(rng):
    est = _random_flow(rng, (6, 6, 6))
    ref = _random_flow(rng, (6, 6, 6))
    assert epe(est, ref)[0] == epe(ref, est)[0]
    assert eae(est, ref).mean == pytest.approx(eae(ref, est).mean, abs=1e-12)
    a = rng.random((12, 12, 12))
    b = rng.random((12, 12, 12))
    assert image_metrics(a, b).ncc == pytest.approx(image_metrics(b, a).ncc, abs=1e-12)


def test_interior_mask():
    roi = interior_mask((8, 8, 8), 2)
    assert roi.sum() == 4**3
    assert roi[2, 2, 2] and not roi[1, 4, 4]
