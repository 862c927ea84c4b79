import numpy as np
import pytest
import torch
import torch.nn.functional as F

from iboot.config import EncoderConfig, TargetConfig
from iboot.dataset import Clip
from iboot.encoders import (
    FeatureFileTarget,
    ImageEncoder2d,
    MomentumBranch,
    OnlineNetwork,
    OracleTarget,
    RandomProjectionTarget,
    VideoEncoder,
    build_target,
    ema_update,
    encode_online,
    encode_target,
    init_from_inflation,
)

SMALL = EncoderConfig(widths=(8, 8, 16), proj_hidden=32, proj_dim=16, pred_hidden=32)


def _clip(T=8, size=28, seed=0, source="c00_v0000"):
    g = torch.Generator().manual_seed(seed)
    return Clip(frames=torch.rand(T, size, size, 3, generator=g), source_id=source, start=0, stride=8)


def _net(dims=None):
    torch.manual_seed(0)
    return OnlineNetwork(SMALL, dims or {"a": 12})


def test_online_shapes():
    net = _net().eval()
    z, q = encode_online(net, _clip())
    assert z.shape == (8, 16)
    assert q["a"].shape == (8, 12)


def test_online_deterministic_in_eval_mode():
    net = _net().eval()
    _, q1 = encode_online(net, _clip())
    _, q2 = encode_online(net, _clip())
    assert torch.equal(q1["a"], q2["a"])


def test_single_pixel_changes_prediction():
    net = _net().eval()
    clip = _clip()
    _, q0 = encode_online(net, clip)
    bumped = clip.frames.clone()
    bumped[3, 10, 10, 1] += 0.01
    _, q1 = encode_online(net, Clip(bumped, clip.source_id, 0, 8))
    assert (q1["a"] - q0["a"]).abs().max() > 0


def test_prediction_is_differentiable_in_params():
    net = _net().train()
    frames = torch.stack([_clip(seed=i).frames for i in range(2)])
    _, q = net(frames)
    q["a"].sum().backward()
    assert all(p.grad is not None for p in net.parameters())


@pytest.mark.parametrize("T", [1, 2, 4, 8])
def test_temporal_feature_contract(T):
    net = _net().eval()
    target = RandomProjectionTarget("rp", 12, seed=0)
    clip = _clip(T=T)
    _, q = encode_online(net, clip)
    k = encode_target(target, clip)
    assert q["a"].shape[0] == k.shape[0] == T


def test_shape_mismatch_rejected():
    net = _net()
    with pytest.raises(ValueError):
        net(torch.rand(2, 8, 28, 28, 4))
    with pytest.raises(ValueError):
        RandomProjectionTarget("rp", 4)(torch.rand(1, 8, 28, 28, 3), [])


def test_random_projection_target_is_frozen_and_repeatable():
    t = build_target(TargetConfig(name="rp", kind="random-projection", output_dim=16))
    clip = _clip()
    a = encode_target(t, clip)
    b = encode_target(t, clip)
    assert a.shape == (8, 16)
    assert torch.equal(a, b)
    assert list(t.parameters()) == []
    assert not a.requires_grad


def test_target_blocks_gradient_into_clip():
    t = RandomProjectionTarget("rp", 8)
    frames = torch.rand(1, 4, 16, 16, 3, requires_grad=True)
    out = t(frames, [_clip(T=4, size=16)])
    assert not out.requires_grad


def test_oracle_anchor_within_ten_degrees():
    labels = {f"c{c:02d}_v0000": c for c in range(5)}
    t = OracleTarget("oracle", 32, labels, num_classes=5, noise=0.05, seed=3)
    for c in range(5):
        k = encode_target(t, _clip(seed=c, source=f"c{c:02d}_v0000"))
        cos = F.cosine_similarity(k, t.anchors[c].expand_as(k), dim=1)
        assert torch.all(torch.rad2deg(torch.acos(cos.clamp(-1, 1))) < 10.0)


def test_oracle_noise_depends_on_frame_content():
    t = OracleTarget("oracle", 16, {"x": 0}, num_classes=1, seed=0)
    a = encode_target(t, _clip(seed=1, source="x"))
    b = encode_target(t, _clip(seed=2, source="x"))
    assert not torch.equal(a, b)
    assert torch.equal(a, encode_target(t, _clip(seed=1, source="x")))


def test_feature_file_target(tmp_path):
    feats = np.random.default_rng(0).standard_normal((64, 6)).astype(np.float32)
    np.savez(tmp_path / "f.npz", vid=feats)
    t = FeatureFileTarget("file", tmp_path / "f.npz")
    clip = Clip(torch.zeros(4, 8, 8, 3), "vid", start=3, stride=5)
    np.testing.assert_array_equal(encode_target(t, clip).numpy(), feats[[3, 8, 13, 18]])
    assert t.output_dim == 6
    with pytest.raises(KeyError):
        encode_target(t, Clip(torch.zeros(4, 8, 8, 3), "other", 0, 1))


def _filled(module, value_fn):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(value_fn(p))


def test_ema_extremes():
    net = _net()
    mom = MomentumBranch(net)
    _filled(mom, lambda p: torch.randn_like(p))
    before = {k: v.clone() for k, v in mom.state_dict().items()}
    ema_update(mom, net, 1.0)
    for name, p in mom.named_parameters():
        assert torch.equal(p, before[name])
    ema_update(mom, net, 0.0)
    online = dict(net.named_parameters())
    for name, p in mom.named_parameters():
        assert torch.equal(p, online[name])


def test_ema_midpoint():
    net = _net()
    mom = MomentumBranch(net)
    _filled(mom, torch.zeros_like)
    _filled(net, lambda p: torch.full_like(p, 2.0))
    ema_update(mom, net, 0.5)
    for p in mom.parameters():
        assert torch.equal(p, torch.ones_like(p))


def test_ema_shape_mismatch():
    mom = MomentumBranch(_net())
    other = OnlineNetwork(EncoderConfig(widths=(4, 4, 4), proj_hidden=8, proj_dim=4, pred_hidden=8), {"a": 3})
    with pytest.raises(ValueError):
        ema_update(mom, other, 0.5)


def test_momentum_branch_has_no_gradients():
    mom = MomentumBranch(_net())
    assert all(not p.requires_grad for p in mom.parameters())
    out = mom(torch.rand(2, 4, 16, 16, 3))
    assert not out.requires_grad


def _image_net(seed=0):
    torch.manual_seed(seed)
    net = ImageEncoder2d(SMALL.widths)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.uniform_(0.5, 1.5)
                m.bias.uniform_(-0.1, 0.1)
    return net.eval()


def test_inflation_matches_2d_net_on_constant_video():
    image_net = _image_net()
    video = VideoEncoder(SMALL.widths, temporal_kernel=3)
    init_from_inflation(video, image_net.state_dict())
    video.eval()
    frame = torch.rand(2, 28, 28, 3, generator=torch.Generator().manual_seed(9))
    clip = frame.unsqueeze(1).expand(-1, 6, -1, -1, -1)
    per_frame = video(clip)  # B x T x C
    ref = image_net(frame)
    for t in range(6):
        torch.testing.assert_close(per_frame[:, t], ref, atol=1e-5, rtol=0)


def test_inflation_sums_back_to_2d_kernel():
    image_net = _image_net(1)
    video = init_from_inflation(VideoEncoder(SMALL.widths, temporal_kernel=3), image_net.state_dict())
    w2 = image_net.state_dict()
    for name, w3 in video.state_dict().items():
        if w3.ndim == 5:
            torch.testing.assert_close(w3.sum(dim=2), w2[name], atol=1e-6, rtol=0)


def test_inflation_temporal_extent_one_copies_verbatim():
    image_net = _image_net(2)
    video = init_from_inflation(VideoEncoder(SMALL.widths, temporal_kernel=1), image_net.state_dict())
    w2 = image_net.state_dict()
    for name, w3 in video.state_dict().items():
        if w3.ndim == 5:
            assert torch.equal(w3[:, :, 0], w2[name])


def test_inflation_shape_mismatch():
    image_net = ImageEncoder2d((4, 4, 4))
    with pytest.raises(ValueError):
        init_from_inflation(VideoEncoder(SMALL.widths), image_net.state_dict())


def test_network_without_predictor_needs_matching_widths():
    cfg = EncoderConfig(widths=(4, 4, 4), proj_hidden=8, proj_dim=6, pred_hidden=8, use_predictor=False)
    net = OnlineNetwork(cfg, {"a": 6}).eval()
    z, q = net(torch.rand(1, 2, 16, 16, 3))
    assert torch.equal(z, q["a"])
    with pytest.raises(ValueError):
        OnlineNetwork(cfg, {"a": 5})
