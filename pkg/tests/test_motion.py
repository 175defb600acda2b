import numpy as np
import pytest
import torch

from conftest import const_flow
from trajvfi.errors import InvalidArgument, NotFound
from trajvfi.flow import approximate_bilateral, resize_flow, upsample_flow, write_flo
from trajvfi.model import Interpolator
from trajvfi.motion import (BaseFlowEstimator, ConsistentMotion, FeaturePyramid, check_frames, correlation_volume,
                            estimate_base_flow, sidecar_paths)

R = 2


def _argmax_uv(cost, radius=R):
    k = cost.argmax(1)
    return k % (2 * radius + 1) - radius, k // (2 * radius + 1) - radius


def test_correlation_self_peaks_at_zero():
    a = torch.randn(1, 4, 8, 8)
    u, v = _argmax_uv(correlation_volume(a, a, R))
    assert (u == 0).all() and (v == 0).all()


def test_correlation_constant_map_peaks_at_zero_in_interior():
    a = torch.ones(1, 3, 8, 8)
    cost = correlation_volume(a, a, R)
    # ties are broken towards the first channel, so check the zero-offset value is maximal
    centre = (2 * R + 1) ** 2 // 2
    assert torch.allclose(cost[:, centre], torch.ones(1, 8, 8))
    assert (cost[:, :, R:-R, R:-R].max(1).values <= cost[:, centre, R:-R, R:-R] + 1e-6).all()


def test_correlation_shift_oracle():
    a = torch.randn(1, 6, 10, 10)
    b = torch.roll(a, shifts=1, dims=3)  # b(x+1, y) = a(x, y)
    u, v = _argmax_uv(correlation_volume(a, b, R))
    interior = (slice(None), slice(R, -R), slice(R, -R - 1))
    assert (u[interior] == 1).all() and (v[interior] == 0).all()


def test_correlation_orthogonal_is_zero():
    a = torch.zeros(1, 2, 6, 6)
    b = torch.zeros(1, 2, 6, 6)
    a[:, 0] = torch.rand(6, 6) + 0.1
    b[:, 1] = torch.rand(6, 6) + 0.1
    assert torch.equal(correlation_volume(a, b, R), torch.zeros(1, (2 * R + 1) ** 2, 6, 6))


def test_correlation_is_cosine_and_zero_outside():
    a, b = torch.randn(1, 3, 5, 5, dtype=torch.float64), torch.randn(1, 3, 5, 5, dtype=torch.float64)
    cost = correlation_volume(a, b, 1)
    for y in range(5):
        for x in range(5):
            for v in (-1, 0, 1):
                for u in (-1, 0, 1):
                    k = (v + 1) * 3 + (u + 1)
                    if 0 <= x + u < 5 and 0 <= y + v < 5:
                        p, q = a[0, :, y, x], b[0, :, y + v, x + u]
                        ref = float(p @ q / (p.norm() * q.norm()))
                    else:
                        ref = 0.0
                    assert abs(float(cost[0, k, y, x]) - ref) < 1e-9


def test_correlation_rejects_radius():
    with pytest.raises(InvalidArgument):
        correlation_volume(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), 4)
    with pytest.raises(InvalidArgument):
        correlation_volume(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), 0)


def test_pyramid_levels():
    pyr = FeaturePyramid((8, 16, 24))(torch.rand(2, 3, 16, 20))
    assert [tuple(f.shape) for f in pyr] == [(2, 24, 4, 5), (2, 16, 8, 10), (2, 8, 16, 20)]


def test_check_frames():
    with pytest.raises(InvalidArgument):
        check_frames(torch.zeros(1, 3, 10, 12), torch.zeros(1, 3, 10, 12))
    with pytest.raises(InvalidArgument):
        check_frames(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 12))
    check_frames(torch.zeros(1, 3, 8, 12), torch.zeros(1, 3, 8, 12))


def test_sidecar_passthrough(tmp_path):
    frame = tmp_path / "im1.png"
    fwd, bwd = sidecar_paths(frame)
    assert fwd.name == "im1.fwd.flo" and bwd.name == "im1.bwd.flo"
    write_flo(fwd, np.tile(np.float32([2, 0]), (8, 8, 1)))
    write_flo(bwd, np.tile(np.float32([-2, 0]), (8, 8, 1)))
    i0 = torch.rand(1, 3, 8, 8)
    o01, o10 = estimate_base_flow(i0, i0, sidecar=frame)
    assert torch.equal(o01, const_flow(8, 8, 2, 0, torch.float32))
    assert torch.equal(o10, const_flow(8, 8, -2, 0, torch.float32))


def test_sidecar_missing(tmp_path):
    with pytest.raises(NotFound):
        estimate_base_flow(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), sidecar=tmp_path / "im1.png")


def test_estimator_mode_shapes():
    pyr = FeaturePyramid((8, 16, 16))
    est = BaseFlowEstimator((8, 16, 16), 2)
    i0, i1 = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    o01, o10 = estimate_base_flow(i0, i1, est, pyr)
    assert o01.shape == o10.shape == (1, 2, 16, 16)
    with pytest.raises(InvalidArgument):
        estimate_base_flow(torch.rand(1, 3, 10, 16), torch.rand(1, 3, 10, 16), est, pyr)


def _cml_inputs(h=16, w=16, ch=(8, 16, 16), dtype=torch.float32):
    pyr = FeaturePyramid(ch).to(dtype)
    i0, i1 = torch.rand(1, 3, h, w, dtype=dtype), torch.rand(1, 3, h, w, dtype=dtype)
    return pyr(i0), pyr(i1)


def test_refine_level_zero_residual_upsamples():
    cml = ConsistentMotion((8, 16, 16), 2)
    cml.zero_residual = True
    pyr0, pyr1 = _cml_inputs()
    out0, out1 = cml.refine_level(const_flow(4, 4, 1, 0, torch.float32), const_flow(4, 4, -1, 0, torch.float32),
                                  pyr0[1], pyr1[1], 0)
    assert torch.equal(out0, const_flow(8, 8, 2, 0, torch.float32))
    assert torch.equal(out1, const_flow(8, 8, -2, 0, torch.float32))


def test_refine_level_untrained_is_upsampling():
    # the last trunk layer starts at zero, so an untrained component adds nothing
    cml = ConsistentMotion((8, 16, 16), 2)
    pyr0, pyr1 = _cml_inputs()
    out0, _ = cml.refine_level(const_flow(4, 4, 1, 0, torch.float32), const_flow(4, 4, -1, 0, torch.float32),
                               pyr0[1], pyr1[1], 0)
    assert torch.equal(out0, const_flow(8, 8, 2, 0, torch.float32))


def test_refine_level_rejects_level_mismatch():
    cml = ConsistentMotion((8, 16, 16), 2)
    pyr0, pyr1 = _cml_inputs()
    with pytest.raises(InvalidArgument):
        cml.refine_level(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), pyr0[2], pyr1[2], 1)


def test_refine_level_gradcheck():
    torch.manual_seed(1)
    cml = ConsistentMotion((8, 16, 16), 1, hidden=8).double()
    for trunk in cml.trunks:  # make the residual non-trivial
        torch.nn.init.normal_(trunk.body[-1].weight, std=0.1)
    pyr0, pyr1 = _cml_inputs(8, 8, dtype=torch.float64)
    f0, f1 = pyr0[1].detach(), pyr1[1].detach()
    p0 = (torch.rand(1, 2, 2, 2, dtype=torch.float64) - 0.5).requires_grad_()
    p1 = (torch.rand(1, 2, 2, 2, dtype=torch.float64) - 0.5).requires_grad_()
    fn = lambda a, b: torch.cat(cml.refine_level(a, b, f0, f1, 0), 1)
    assert torch.autograd.gradcheck(fn, (p0, p1), eps=1e-5, atol=1e-6, rtol=1e-4, nondet_tol=0.0)


def test_consistent_motion_zero_residual_is_bilateral_pipeline():
    cml = ConsistentMotion((8, 16, 16), 2)
    cml.zero_residual = True
    pyr0, pyr1 = _cml_inputs()
    o01, o10 = torch.randn(1, 2, 16, 16), torch.randn(1, 2, 16, 16)
    q0, q1 = cml(o01, o10, 0.3, pyr0, pyr1)
    a0, a1 = approximate_bilateral(resize_flow(o01, (4, 4)), resize_flow(o10, (4, 4)), 0.3)
    # two x2 refinement levels, each upsampling by 2
    torch.testing.assert_close(q0, upsample_flow(upsample_flow(a0)))
    torch.testing.assert_close(q1, upsample_flow(upsample_flow(a1)))


def test_consistent_motion_swap_symmetry():
    cml = ConsistentMotion((8, 16, 16), 2)
    cml.zero_residual = True
    pyr0, pyr1 = _cml_inputs()
    o01, o10 = torch.randn(1, 2, 16, 16, dtype=torch.float64), torch.randn(1, 2, 16, 16, dtype=torch.float64)
    q0, q1 = cml(o01, o10, 0.3, pyr0, pyr1)
    s0, s1 = cml(o10, o01, 0.7, pyr1, pyr0)
    torch.testing.assert_close(q0, s1)
    torch.testing.assert_close(q1, s0)


def test_trained_swap_symmetry_shared_trunks():
    # shared trunks make the refinement itself symmetric under swapping the frames
    cml = ConsistentMotion((8, 16, 16), 2)
    for trunk in cml.trunks:
        torch.nn.init.normal_(trunk.body[-1].weight, std=0.05)
    pyr0, pyr1 = _cml_inputs()
    o01, o10 = torch.randn(1, 2, 16, 16), torch.randn(1, 2, 16, 16)
    q0, q1 = cml(o01, o10, 0.5, pyr0, pyr1)
    s0, s1 = cml(o10, o01, 0.5, pyr1, pyr0)
    torch.testing.assert_close(q0, s1)
    torch.testing.assert_close(q1, s0)


def test_motion_output_shapes(tiny_config):
    model = Interpolator(tiny_config)
    mot = model.motion(torch.rand(2, 3, 16, 24), torch.rand(2, 3, 16, 24), 0.5)
    for key in ("o01", "o10"):
        assert mot[key].shape == (2, 2, 16, 24)
    for f in (*mot["approx"], *mot["consistent"]):
        assert f.shape == (2, 2, 16, 24)


def test_identical_frames_get_zero_refinement():
    # bias-free trunks on difference inputs: identical frames at t=0.5 stay exactly consistent
    torch.manual_seed(2)
    cml = ConsistentMotion((8, 16, 16), 2)
    for trunk in cml.trunks:
        torch.nn.init.normal_(trunk.body[-1].weight, std=0.1)
    pyr0, _ = _cml_inputs()
    o = torch.randn(1, 2, 16, 16)
    q0, q1 = cml(o, o, 0.5, pyr0, pyr0)
    assert torch.equal(q0, torch.zeros_like(q0)) and torch.equal(q1, torch.zeros_like(q1))
