import numpy as np
import numpy.testing as npt
import pytest

from lapk.core import FlowField, apply_phase_ramp, fft3, ifft3, warp
from lapk.errors import AllUnreliableError, DegenerateWindowError
from lapk.filter_basis import build_basis, flow_from_filter
from lapk.lap_image import (
    LapConfig,
    estimate_flow_multires,
    estimate_flow_single_level,
    inpaint_flow,
    solve_local_filter,
)
from lapk.metrics import epe, interior_mask
from lapk.synthesis import gen_phantom, gen_smooth_flow, make_pair


def shifted(volume, u):
    return ifft3(apply_phase_ramp(fft3(volume), u)).real


def test_config_validation():
    with pytest.raises(ValueError):
        LapConfig(levels=(9, 17))
    with pytest.raises(ValueError):
        LapConfig(stride=0)
    assert LapConfig(levels=(64, 32, 16, 8, 4)).levels == (65, 33, 17, 9, 5)


def test_identical_patches_give_zero_coefficients():
    phantom = gen_phantom((48, 48, 48), 3)
    win = phantom[10:27, 10:27, 10:27]
    filt = solve_local_filter(win, win, build_basis(9, 4))
    assert np.abs(filt.coefficients).max() < 1e-8


def test_shifted_patch_recovers_unit_shift():
    phantom = gen_phantom((48, 48, 48), 3)
    fixed = shifted(phantom, (1.0, 0, 0))
    c0, h = 24, 8
    sl = slice(c0 - h, c0 + h + 1)
    filt = solve_local_filter(fixed[sl, sl, sl], phantom[sl, sl, sl], build_basis(9, 4))
    u = flow_from_filter(filt)
    assert np.abs(u - np.array([1.0, 0, 0])).max() < 0.05


def test_flat_windows_degenerate():
    with pytest.raises(DegenerateWindowError):
        solve_local_filter(np.ones((17, 17, 17)), np.ones((17, 17, 17)), build_basis(9, 4))


def _design_by_shifted_slices(fixed, moving, kernels):
    """Independent design assembly: explicit sums over kernel offsets."""
    w = kernels[0].shape[0]
    h = w // 2
    out_shape = tuple(n - w + 1 for n in fixed.shape)
    cols = []
    for kern in kernels[1:]:
        acc = np.zeros(out_shape)
        for a in range(w):
            for b in range(w):
                for c in range(w):
                    # correlation of fixed with kern: kern(s) * fixed(x + s)
                    s = (a - h, b - h, c - h)
                    fx = fixed[
                        h + s[0] : h + s[0] + out_shape[0],
                        h + s[1] : h + s[1] + out_shape[1],
                        h + s[2] : h + s[2] + out_shape[2],
                    ]
                    mv = moving[
                        h - s[0] : h - s[0] + out_shape[0],
                        h - s[1] : h - s[1] + out_shape[1],
                        h - s[2] : h - s[2] + out_shape[2],
                    ]
                    acc += kern[a, b, c] * (fx - mv)
        cols.append(acc.ravel())
    rhs = np.zeros(out_shape)
    kern0 = kernels[0]
    diff = moving - fixed
    for a in range(w):
        for b in range(w):
            for c in range(w):
                s = (a - h, b - h, c - h)
                dv = diff[
                    h - s[0] : h - s[0] + out_shape[0],
                    h - s[1] : h - s[1] + out_shape[1],
                    h - s[2] : h - s[2] + out_shape[2],
                ]
                rhs += kern0[a, b, c] * dv
    return np.stack(cols, axis=1), rhs.ravel()


def test_solve_matches_dense_pseudoinverse_oracle():
    phantom = gen_phantom((48, 48, 48), 5)
    fixed = shifted(phantom, (0.7, -0.3, 0.2))
    basis = build_basis(9, 4)
    sl = slice(16, 33)  # 17^3 patch, 9^3 valid region
    fw, mw = fixed[sl, sl, sl], phantom[sl, sl, sl]
    eps = 1e-6
    filt = solve_local_filter(fw, mw, basis, eps=eps)

    a, b = _design_by_shifted_slices(fw, mw, basis.kernels)
    lam = eps * np.trace(a.T @ a) / basis.n_coeffs
    aug = np.vstack([a, np.sqrt(lam) * np.eye(basis.n_coeffs)])
    rhs = np.concatenate([b, np.zeros(basis.n_coeffs)])
    c_oracle = np.linalg.pinv(aug) @ rhs
    npt.assert_allclose(filt.coefficients, c_oracle, atol=1e-8)


def test_single_level_zero_motion():
    phantom = gen_phantom((32, 32, 32), 9)
    field = estimate_flow_single_level(phantom, phantom, build_basis(9, 4), LapConfig())
    assert field.reliability.all()
    assert np.abs(field.vectors).max() < 1e-8


def test_single_level_global_shift():
    phantom = gen_phantom((48, 48, 48), 3)
    fixed = shifted(phantom, (2.0, -1.0, 0.0))
    field = estimate_flow_single_level(fixed, phantom, build_basis(17, 4), LapConfig())
    roi = interior_mask((48, 48, 48), 12)
    err = np.linalg.norm(field.vectors - np.array([2.0, -1.0, 0.0]), axis=-1)
    assert err[roi].mean() < 0.1


def test_single_level_matches_patch_solve_in_interior():
    phantom = gen_phantom((48, 48, 48), 3)
    fixed = shifted(phantom, (2.0, -1.0, 0.0))
    basis = build_basis(9, 4)
    field = estimate_flow_single_level(fixed, phantom, basis, LapConfig())
    c0, h = 24, 8  # 2W-1 neighbourhood fully interior
    sl = slice(c0 - h, c0 + h + 1)
    filt = solve_local_filter(fixed[sl, sl, sl], phantom[sl, sl, sl], basis)
    npt.assert_allclose(field.vectors[c0, c0, c0], flow_from_filter(filt), atol=1e-9)


def test_single_level_smooth_flow_bound():
    # the window must stay local relative to the flow scale, which tracks the
    # grid size; this mirrors the native acquisition scale of ~256 voxels
    dims = (224, 224, 224)
    phantom = gen_phantom(dims, 11)
    flow = gen_smooth_flow(dims, 4.0, 42)
    v_f, v_m, u_ref = make_pair(phantom, flow)
    deformed = np.abs(ifft3(v_m))
    pristine = np.abs(ifft3(v_f))
    field = estimate_flow_single_level(
        deformed, pristine, build_basis(33, 4), LapConfig(stride=4)
    )
    roi = interior_mask(dims, 28)
    mean, _, _ = epe(field, u_ref, roi)
    assert mean < 1.0


def test_stride_interpolation_fills_gaps():
    phantom = gen_phantom((32, 32, 32), 9)
    fixed = shifted(phantom, (1.0, 0, 0))
    field = estimate_flow_single_level(fixed, phantom, build_basis(9, 4), LapConfig(stride=4))
    roi = interior_mask((32, 32, 32), 8)
    err = np.linalg.norm(field.vectors - np.array([1.0, 0, 0]), axis=-1)
    assert err[roi].mean() < 0.2


def test_inpaint_all_reliable_is_box_smoothing(rng):
    from scipy.ndimage import uniform_filter

    vecs = rng.standard_normal((8, 8, 8, 3))
    flow = FlowField(vecs.copy())
    out = inpaint_flow(flow)
    want = np.stack(
        [uniform_filter(vecs[..., c], size=3, mode="nearest") for c in range(3)], axis=-1
    )
    npt.assert_allclose(out.vectors, want, atol=1e-12)
    assert out.reliability.all()


def test_inpaint_fills_single_hole_in_constant_field():
    dims = (9, 9, 9)
    vecs = np.ones((*dims, 3))
    rel = np.ones(dims, dtype=bool)
    vecs[4, 4, 4] = (100.0, -50.0, 0.0)  # garbage value at the unreliable voxel
    rel[4, 4, 4] = False
    out = inpaint_flow(FlowField(vecs, rel))
    npt.assert_allclose(out.vectors[4, 4, 4], 1.0, atol=1e-6)


def test_inpaint_checkerboard_ramp():
    dims = (16, 16, 16)
    ix = np.arange(16, dtype=float)
    ramp = np.zeros((*dims, 3))
    ramp[..., 0] = 0.2 * ix[:, None, None]
    checker = (np.indices(dims).sum(axis=0) % 2).astype(bool)
    out = inpaint_flow(FlowField(ramp.copy(), checker))
    interior = interior_mask(dims, 2)
    err = np.abs(out.vectors[..., 0] - ramp[..., 0])
    assert err[interior].max() < 0.1


def test_inpaint_no_reliable_raises():
    flow = FlowField(np.zeros((4, 4, 4, 3)), np.zeros((4, 4, 4), dtype=bool))
    with pytest.raises(AllUnreliableError):
        inpaint_flow(flow)


def test_multires_self_registration_fixed_point():
    phantom = gen_phantom((48, 48, 48), 13)
    field = estimate_flow_multires(phantom, phantom)
    assert field.magnitude().mean() < 0.05


def test_multires_integer_shift_equivariance():
    phantom = gen_phantom((48, 48, 48), 17)
    d = np.array([3.0, -2.0, 1.0])
    fixed = shifted(phantom, d)
    field = estimate_flow_multires(fixed, phantom, iters_per_level=[1, 1, 2, 4, 6])
    roi = interior_mask((48, 48, 48), 6)
    err = np.linalg.norm(field.vectors - d, axis=-1)
    assert err[roi].mean() < 0.1


def test_multires_registration_reduces_nrmse():
    from lapk.metrics import image_metrics

    dims = (48, 48, 48)
    phantom = gen_phantom(dims, 19)
    flow = gen_smooth_flow(dims, 4.0, 23)
    v_f, v_m, u_ref = make_pair(phantom, flow)
    deformed = np.abs(ifft3(v_m))
    pristine = np.abs(ifft3(v_f))
    est = estimate_flow_multires(deformed, pristine)
    before = image_metrics(pristine, deformed).nrmse_range
    after = image_metrics(warp(pristine, est), deformed).nrmse_range
    assert after < 0.25 * before
