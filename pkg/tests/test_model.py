import json
import zipfile
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import fd_agreement
from trajvfi.errors import InvalidArgument, InvalidData, NotFound
from trajvfi.model import Interpolator, ModelConfig, interpolate, load_checkpoint, read_checkpoint, save_checkpoint


def _frames(b=1, h=16, w=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, h, w, generator=g), torch.rand(b, 3, h, w, generator=g)


def test_untrained_output_is_query_frame(tiny_config):
    model = Interpolator(tiny_config)
    i0, i1 = _frames()
    out, aux = model(i0, i1, 0.5, return_aux=True)
    assert torch.equal(aux["residual"], torch.zeros_like(aux["residual"]))
    assert torch.equal(out, aux["i_q"].clamp(0, 1))


def test_output_shape_and_range(tiny_config):
    model = Interpolator(tiny_config)
    with torch.no_grad():  # perturb every parameter so the residual is not zero
        for prm in model.parameters():
            prm.add_(torch.randn_like(prm) * 0.3)
    i0, i1 = _frames(2, 16, 24)
    out = interpolate(i0, i1, 0.3, model)
    assert out.shape == (2, 3, 16, 24)
    assert out.min() >= 0 and out.max() <= 1


def test_dimension_check(tiny_config):
    model = Interpolator(tiny_config)
    with pytest.raises(InvalidArgument):
        model(torch.rand(1, 3, 18, 16), torch.rand(1, 3, 18, 16))


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(InvalidArgument):
        ModelConfig(scales=(2, 4))
    with pytest.raises(InvalidArgument):
        ModelConfig(tau=0.0)
    with pytest.raises(InvalidArgument):
        ModelConfig(layers=0)


def test_config_round_trip_and_fingerprint():
    cfg = ModelConfig(heads=2, scales=(1, 2))
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.fingerprint() == ModelConfig(heads=2, scales=(1, 2)).fingerprint()
    assert cfg.fingerprint() != ModelConfig().fingerprint()


def test_base_variant_has_no_attention(tiny_config):
    base = Interpolator(replace(tiny_config, use_cml=False, use_tac=False, use_tab=False))
    assert len(base.transformers) == 0 and base.fusion.scales == (1,)
    i0, i1 = _frames()
    out, aux = base(i0, i1, 0.5, return_aux=True)
    # without refinement the consistent pair is the bilateral approximation
    assert all(torch.equal(a, b) for a, b in zip(aux["approx"], aux["consistent"]))


@pytest.mark.parametrize("tac,tab,expected", [(True, False, 0.0), (False, True, 1.0)])
def test_single_branch_variants_force_p(tiny_config, monkeypatch, tac, tab, expected):
    model = Interpolator(replace(tiny_config, use_tac=tac, use_tab=tab))
    seen = []
    import trajvfi.attention as attention

    original = attention.joint_window_attention

    def spy(q, kc, kb, p, *a, **k):
        seen.append(p)
        return original(q, kc, kb, p, *a, **k)

    monkeypatch.setattr(attention, "joint_window_attention", spy)
    model(*_frames(), 0.5)
    assert seen and all(torch.all(p == expected) for p in seen)


def test_flip_equivariance_with_given_flows(tiny_config):
    # untrained filters are input independent, so the query path commutes with flips
    model = Interpolator(tiny_config)
    i0, i1 = _frames()
    o01 = torch.randn(1, 2, 16, 16)
    o10 = torch.randn(1, 2, 16, 16)
    flip_img = lambda x: torch.flip(x, dims=(-1,))
    flip_flow = lambda f: torch.stack([-f[:, 0], f[:, 1]], 1).flip(-1)
    out = model(i0, i1, 0.5, flows=(o01, o10))
    out_f = model(flip_img(i0), flip_img(i1), 0.5, flows=(flip_flow(o01), flip_flow(o10)))
    torch.testing.assert_close(flip_img(out_f), out, atol=1e-5, rtol=1e-5)


def test_given_flows_must_match(tiny_config):
    model = Interpolator(tiny_config)
    with pytest.raises(InvalidArgument):
        model(*_frames(), 0.5, flows=(torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 8, 8)))


def test_parameter_groups_partition_model(tiny_config):
    model = Interpolator(tiny_config)
    motion = {id(p) for p in model.motion_parameters()}
    rest = {id(p) for p in model.synthesis_parameters()}
    assert not motion & rest
    assert motion | rest == {id(p) for p in model.parameters()}


def test_checkpoint_round_trip(tmp_path, tiny_config):
    model = Interpolator(tiny_config)
    with torch.no_grad():
        for prm in model.parameters():
            prm.add_(torch.randn_like(prm) * 0.1)
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"stage": 2})
    loaded, meta = load_checkpoint(path)
    assert meta["schema_version"] == 1 and meta["stage"] == 2
    assert meta["fingerprint"] == tiny_config.fingerprint()
    i0, i1 = _frames()
    assert torch.equal(interpolate(i0, i1, 0.5, loaded), interpolate(i0, i1, 0.5, model.eval()))
    # byte-stable: saving the same parameters again gives the same archive
    save_checkpoint(tmp_path / "again.ckpt", loaded, {"stage": 2})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    _, params = read_checkpoint(path)
    assert all(v.dtype.name == "float32" for v in params.values())


def test_checkpoint_errors(tmp_path, tiny_config):
    with pytest.raises(NotFound):
        load_checkpoint(tmp_path / "none.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(InvalidData):
        load_checkpoint(tmp_path / "junk.ckpt")
    path = save_checkpoint(tmp_path / "m.ckpt", Interpolator(tiny_config))
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(entries["meta.json"])
    meta["schema_version"] = 99
    entries["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(tmp_path / "future.ckpt", "w") as zf:
        for n, data in entries.items():
            zf.writestr(n, data)
    with pytest.raises(InvalidData):
        load_checkpoint(tmp_path / "future.ckpt")
    meta["schema_version"] = 1
    meta["config"]["dim"] = 32
    entries["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(tmp_path / "mismatch.ckpt", "w") as zf:
        for n, data in entries.items():
            zf.writestr(n, data)
    with pytest.raises(InvalidData):
        load_checkpoint(tmp_path / "mismatch.ckpt")


def test_end_to_end_gradient_matches_small_steps(tiny_config):
    # bilinear warps and PReLU are piecewise linear; a tiny step rarely straddles a kink,
    # a 1e-3 step often does, so agreement has to improve as the step shrinks
    torch.manual_seed(0)
    model = Interpolator(tiny_config).double().eval()
    with torch.no_grad():
        for prm in model.parameters():
            prm.add_(torch.randn_like(prm) * 0.05)
    g = torch.Generator().manual_seed(1)
    i0, i1, weights = (torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64) for _ in range(3))
    coords = np.random.default_rng(1).choice(i0.numel(), size=40, replace=False)
    fn = lambda frame: (model(frame, i1, 0.5) * weights).sum()  # noqa: E731
    fine, finite = fd_agreement(fn, i0, coords, step=1e-6)
    coarse, _ = fd_agreement(fn, i0, coords, step=1e-3)
    assert finite and fine >= 0.95 and fine > coarse
