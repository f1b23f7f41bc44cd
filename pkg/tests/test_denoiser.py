import numpy as np
import pytest
import torch

from animsyn import denoiser as dn


def inputs(cfg, B=1, Fr=3, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    lat, S = cfg.latent_size, cfg.image_size
    r = lambda *s: torch.rand(*s, generator=g, dtype=dtype)
    return dict(composite=torch.randn(B, Fr, 12, lat, lat, generator=g, dtype=dtype),
                t=torch.tensor([400] * B), ref_latent=torch.randn(B, 4, lat, lat, generator=g, dtype=dtype),
                c_clip=torch.randn(B, cfg.clip_dim, generator=g, dtype=dtype),
                body=r(B, Fr, 3, S, S), face=r(B, Fr, 3, S, S), normal=r(B, Fr, 3, S, S))


@pytest.fixture
def tiny():
    torch.manual_seed(0)
    return dn.AnimationModel(dn.ModelConfig.tiny()).double().eval()


def randomize_temporal(model, scale=0.3):
    g = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, dn.MotionModule):
                m.attn.to_out.weight.copy_(scale * torch.randn(m.attn.to_out.weight.shape, generator=g))


def test_tiny_parameter_budget(tiny):
    n = sum(p.numel() for p in tiny.parameters())
    assert n <= 5000


def test_output_shape(tiny):
    x = inputs(tiny.cfg, B=2, Fr=3)
    assert tiny(**x).shape == (2, 3, 4, 4, 4)


def test_partition_is_exact(tiny):
    part = dn.partition(tiny)
    names = [n for n, _ in tiny.named_parameters()]
    assert sorted(part["spatial"] + part["temporal"]) == sorted(names)
    assert all(".temporal." in "." + n for n in part["temporal"])
    assert len(part["temporal"]) == 6 * 7  # norm w/b, q/k/v, out w/b per motion module
    groups = dn.grouped_parameters(tiny)
    assert sum(len(v) for v in groups.values()) == len(names)
    assert all(groups[g] for g in dn.GROUPS)


def test_set_trainable(tiny):
    dn.set_trainable(tiny, 2)
    assert {n for n, p in tiny.named_parameters() if p.requires_grad} == set(dn.partition(tiny)["temporal"])
    dn.set_trainable(tiny, 1)
    assert {n for n, p in tiny.named_parameters() if p.requires_grad} == set(dn.partition(tiny)["spatial"])


def test_fresh_motion_modules_are_identity(tiny):
    # zero-initialised outputs make 3D and 2D agree frame by frame
    x = inputs(tiny.cfg, Fr=1)
    torch.testing.assert_close(tiny(**x, mode="3D"), tiny(**x, mode="2D"), rtol=0, atol=0)


def test_temporal_toggle_matters_after_randomizing(tiny):
    x = inputs(tiny.cfg, Fr=3)
    bank = tiny.reference_write(x["ref_latent"])
    c = tiny.projector(x["c_clip"])
    sig = tiny.guidance(x["body"], x["face"], x["normal"])
    off = tiny.unet(x["composite"], x["t"], bank, c, sig.p_body, sig.p_normal, temporal=False)
    torch.testing.assert_close(tiny(**x), off, rtol=0, atol=0)
    randomize_temporal(tiny)
    assert (tiny(**x) - off).abs().max() > 1e-6


def test_frame_permutation_equivariance(tiny):
    x = inputs(tiny.cfg, Fr=4)
    perm = torch.tensor([2, 0, 3, 1])
    px = {k: (v[:, perm] if k in ("composite", "body", "face", "normal") else v) for k, v in x.items()}
    torch.testing.assert_close(tiny(**px), tiny(**x)[:, perm], rtol=1e-10, atol=1e-12)
    # positional encodings break it once the motion modules are active
    randomize_temporal(tiny)
    assert (tiny(**px) - tiny(**x)[:, perm]).abs().max() > 1e-8


def test_zero_output_layer_gives_zero(tiny):
    with torch.no_grad():
        tiny.unet.conv_out.weight.zero_()
        tiny.unet.conv_out.bias.zero_()
    assert tiny(**inputs(tiny.cfg)).abs().max() == 0


def test_batch_items_are_independent(tiny):
    x = inputs(tiny.cfg, B=2, Fr=2)
    full = tiny(**x)
    one = tiny(**{k: v[:1] for k, v in x.items()})
    torch.testing.assert_close(full[:1], one, rtol=1e-10, atol=1e-12)


def test_input_contract_errors(tiny):
    x = inputs(tiny.cfg, Fr=2)
    with pytest.raises(ValueError):
        tiny(**x, mode="2D")
    with pytest.raises(ValueError):
        tiny(**x, mode="4D")
    bad = dict(x, composite=x["composite"][:, :, :8])
    with pytest.raises(ValueError):
        tiny(**bad)
    with pytest.raises(ValueError):
        tiny(**dict(x, ref_latent=x["ref_latent"][..., :2]))
    bank = dn.MemoryBank({"down0": (torch.zeros(1), torch.zeros(1))})
    sig = tiny.guidance(x["body"], x["face"], x["normal"])
    with pytest.raises(KeyError):
        tiny.denoise(x["composite"], bank, tiny.projector(x["c_clip"]), sig, 10)


def test_too_many_frames():
    cfg = dn.ModelConfig.tiny()
    cfg.pe_max_len = 2
    m = dn.AnimationModel(cfg).double()
    with pytest.raises(ValueError):
        m(**inputs(cfg, Fr=3))


def test_assemble_input():
    z = np.zeros((2, 4, 3, 3))
    assert dn.assemble_input(z, z + 1, z + 2).shape == (2, 12, 3, 3)
    with pytest.raises(ValueError):
        dn.assemble_input(z, z[:1], z)
    with pytest.raises(ValueError):
        dn.assemble_input(z[:, :3], z[:, :3], z[:, :3])


def test_checkpoint_round_trip(tiny, tmp_path):
    randomize_temporal(tiny)
    dn.save_checkpoint(tmp_path / "m.npz", tiny, {"stage": 2})
    back, meta = dn.load_checkpoint(tmp_path / "m.npz")
    assert meta["stage"] == 2 and meta["model"] == tiny.cfg.to_dict()
    x = inputs(tiny.cfg)
    torch.testing.assert_close(back.double()(**x), tiny(**x), rtol=0, atol=0)
    np.savez(tmp_path / "junk.npz", __meta__=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        dn.load_checkpoint(tmp_path / "junk.npz")


def test_default_config_runs():
    m = dn.AnimationModel(dn.ModelConfig(image_size=32, base_width=16, heads=4, temporal_heads=4, ctx_dim=32))
    x = inputs(m.cfg, Fr=2, dtype=torch.float32)
    assert m(**x).shape == (1, 2, 4, 4, 4)


def test_single_precision_gradients_agree_with_double(tiny):
    randomize_temporal(tiny)
    x = inputs(tiny.cfg, Fr=2)
    target = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    grads = {}
    for dtype in (torch.float64, torch.float32):
        m = tiny.to(dtype)
        m.zero_grad()
        xi = {k: (v.to(dtype) if v.is_floating_point() else v) for k, v in x.items()}
        ((m(**xi) - target.to(dtype)) ** 2).mean().backward()
        grads[dtype] = {n: p.grad.double().clone() for n, p in m.named_parameters()}
    for g, items in dn.grouped_parameters(tiny).items():
        a = torch.cat([grads[torch.float32][n].flatten() for n, _ in items])
        b = torch.cat([grads[torch.float64][n].flatten() for n, _ in items])
        assert (a - b).norm() <= 1e-4 * b.norm() + 1e-12, g
