import pytest
import torch
import torchvision

from asanet.networks import (
    ASABlock,
    ComponentSet,
    DepthNet,
    FeaturePair,
    asa_block_forward,
    load_pretrained_backbone,
    set_trainable,
)


@pytest.fixture(scope="module")
def nets():
    torch.manual_seed(0)
    return ComponentSet().eval()


def test_feature_pair_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="differ in shape"):
        FeaturePair(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 4))


@pytest.mark.parametrize("squeeze", ["mean", "max", "conv"])
def test_asa_mask_in_open_unit_interval_and_shapes(squeeze):
    block = ASABlock(8, 16, stride=2, squeeze=squeeze).eval()
    pair = FeaturePair(torch.randn(2, 8, 12, 12), torch.randn(2, 8, 12, 12))
    out = block.separate(pair)
    for att in out.attention:
        assert att.mask.shape == (2, 1, 6, 6)
        assert 0 < att.mask.min() and att.mask.max() < 1
    assert block(pair).static.shape == (2, 16, 6, 6)


def test_asa_unknown_squeeze_rejected():
    with pytest.raises(ValueError):
        ASABlock(8, 8, squeeze="median")


def test_asa_forced_masks_route_everything():
    torch.manual_seed(1)
    block = ASABlock(8, 8).eval()
    pair = FeaturePair(torch.randn(1, 8, 6, 6), torch.randn(1, 8, 6, 6))
    u_s, u_d = block.transform(pair.static), block.transform(pair.dynamic)
    ones = asa_block_forward(block, pair, force_mask=1.0)
    torch.testing.assert_close(ones.static, u_s + u_d)
    assert ones.dynamic.abs().max() == 0
    zeros = asa_block_forward(block, pair, force_mask=0.0)
    torch.testing.assert_close(zeros.dynamic, u_s + u_d)
    assert zeros.static.abs().max() == 0


def test_asa_shortcut_added_after_aggregation():
    torch.manual_seed(2)
    block = ASABlock(8, 8).eval()
    pair = FeaturePair(torch.randn(1, 8, 6, 6), torch.randn(1, 8, 6, 6))
    agg = asa_block_forward(block, pair)
    out = block(pair)
    torch.testing.assert_close(out.static, torch.relu(agg.static + pair.static))
    torch.testing.assert_close(out.dynamic, torch.relu(agg.dynamic + pair.dynamic))


def test_depthnet_outputs_four_scales_finest_first():
    net = DepthNet().eval()
    with torch.no_grad():
        disps = net(torch.rand(2, 3, 64, 96))
    assert [d.shape[-2:] for d in disps] == [(64, 96), (32, 48), (16, 24), (8, 12)]
    assert all(0 < d.min() and d.max() < 1 for d in disps)


def test_depthnet_rejects_bad_inputs():
    net = DepthNet().eval()
    with pytest.raises(ValueError, match="3-channel"):
        net(torch.rand(1, 4, 64, 64))
    with pytest.raises(ValueError, match="divisible by 32"):
        net(torch.rand(1, 3, 60, 64))


def test_asa_encoder_pyramids(nets):
    with torch.no_grad():
        static, dynamic = nets.asa(torch.rand(1, 6, 64, 192))
    assert [s.shape[1:] for s in static] == [(64, 16, 48), (128, 8, 24), (256, 4, 12), (512, 2, 6)]
    assert [d.shape for d in dynamic] == [s.shape for s in static]


def test_zero_initialized_heads(nets):
    a, b = torch.rand(2, 3, 64, 192), torch.rand(2, 3, 64, 192)
    with torch.no_grad():
        out = nets.motion(a, [b])
    assert out.ego_motion[0].shape == (2, 6) and out.ego_motion[0].abs().max() == 0
    assert out.motion_field[0].shape == (2, 3, 64, 192) and out.motion_field[0].abs().max() == 0
    assert nets.ego.head.weight.abs().max() == 0 and nets.field.head.weight.abs().max() == 0


def test_component_lookup_and_flags():
    nets = ComponentSet()
    with pytest.raises(KeyError):
        nets.component("pose")
    with pytest.raises(KeyError):
        set_trainable(nets, {"posenet": False})
    set_trainable(nets, {"depth": False, "asa": False, "ego": False, "field": True})
    assert not any(p.requires_grad for p in nets.depth.parameters())
    assert all(p.requires_grad for p in nets.field.parameters())
    nets.apply_modes(True)
    assert not nets.depth.training and nets.field.training


def test_component_state_round_trip():
    a, b = ComponentSet(), ComponentSet()
    b.load_component_state(a.component_state())
    for name in ("depth", "asa", "ego", "field"):
        for (k, v), (_, w) in zip(a.component(name).state_dict().items(), b.component(name).state_dict().items()):
            assert torch.equal(v, w), k


def test_load_pretrained_backbone(tmp_path):
    ref = torchvision.models.resnet18(weights=None)
    path = tmp_path / "r18.pth"
    torch.save(ref.state_dict(), path)
    nets = ComponentSet()
    counts = load_pretrained_backbone(nets, path)
    assert counts["depth"] > 100 and counts["asa"] > 50
    assert torch.equal(nets.depth.encoder.net.layer3[1].conv2.weight, ref.layer3[1].conv2.weight)
    assert torch.equal(nets.asa.stages[1][0].shortcut[0].weight, ref.layer2[0].downsample[0].weight)
    stem = nets.asa.conv1.weight
    torch.testing.assert_close(stem[:, :3] + stem[:, 3:], ref.conv1.weight)
