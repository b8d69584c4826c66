"""DepthNet, the ASA dual-path encoder and the two motion decoders."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock, ResNet

COMPONENT_NAMES = ("depth", "asa", "ego", "field")
SQUEEZE_MODES = ("mean", "max", "conv")
_MASK_EPS = 1e-6

# stage widths and block counts of the supported backbones
BACKBONES = {
    "resnet18": ((64, 128, 256, 512), (2, 2, 2, 2)),
    "resnet34": ((64, 128, 256, 512), (3, 4, 6, 3)),
}


@dataclass
class FeaturePair:
    static: torch.Tensor
    dynamic: torch.Tensor

    def __post_init__(self):
        if self.static.shape != self.dynamic.shape:
            raise ValueError(
                f"static and dynamic features differ in shape: "
                f"{tuple(self.static.shape)} vs {tuple(self.dynamic.shape)}"
            )


@dataclass
class AttentionState:
    descriptor: torch.Tensor
    mask: torch.Tensor


@dataclass
class ASAOutput:
    """Aggregated features before the residual shortcut, plus intermediates."""

    pair: FeaturePair
    transformed: FeaturePair
    attention: tuple[AttentionState, AttentionState]


def _conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class ASABlock(nn.Module):
    """Residual block whose body splits each path into static and dynamic parts.

    ``transform`` is the non-identity branch of a basic residual block and is
    shared by both paths, as are the squeeze and excitation stages. The
    shortcut of each path is added to that path's aggregated output.
    """

    def __init__(self, in_channels, out_channels, stride=1, squeeze="mean", hidden=16):
        super().__init__()
        if squeeze not in SQUEEZE_MODES:
            raise ValueError(f"unknown squeeze mode {squeeze!r}, expected one of {SQUEEZE_MODES}")
        self.squeeze_mode = squeeze
        self.transform = nn.Sequential(OrderedDict([
            ("conv1", _conv3x3(in_channels, out_channels, stride)),
            ("bn1", nn.BatchNorm2d(out_channels)),
            ("relu", nn.ReLU(inplace=True)),
            ("conv2", _conv3x3(out_channels, out_channels)),
            ("bn2", nn.BatchNorm2d(out_channels)),
        ]))
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()
        self.squeeze = nn.Conv2d(out_channels, 1, 1) if squeeze == "conv" else None
        self.excite = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )

    def attend(self, u: torch.Tensor) -> AttentionState:
        if self.squeeze_mode == "mean":
            psi = u.mean(1, keepdim=True)
        elif self.squeeze_mode == "max":
            psi = u.amax(1, keepdim=True)
        else:
            psi = self.squeeze(u)
        mask = _MASK_EPS + (1 - 2 * _MASK_EPS) * torch.sigmoid(self.excite(psi))
        return AttentionState(descriptor=psi, mask=mask)

    def separate(self, pair: FeaturePair, force_mask: float | None = None) -> ASAOutput:
        u_s = self.transform(pair.static)
        u_d = self.transform(pair.dynamic)
        att_s, att_d = self.attend(u_s), self.attend(u_d)
        m_s, m_d = att_s.mask, att_d.mask
        if force_mask is not None:
            m_s = torch.full_like(m_s, force_mask)
            m_d = torch.full_like(m_d, force_mask)
        s_to_s = m_s * u_s
        d_to_s = m_d * u_d
        # (1 - M) * U written as U - M * U so the two halves partition U exactly
        s_to_d = u_s - s_to_s
        d_to_d = u_d - d_to_s
        return ASAOutput(
            pair=FeaturePair(s_to_s + d_to_s, s_to_d + d_to_d),
            transformed=FeaturePair(u_s, u_d),
            attention=(att_s, att_d),
        )

    def forward(self, pair: FeaturePair) -> FeaturePair:
        agg = self.separate(pair).pair
        return FeaturePair(
            F.relu(agg.static + self.shortcut(pair.static)),
            F.relu(agg.dynamic + self.shortcut(pair.dynamic)),
        )


def asa_block_forward(block: ASABlock, pair: FeaturePair, force_mask: float | None = None) -> FeaturePair:
    """Separation and aggregation only (no shortcut)."""
    return block.separate(pair, force_mask).pair


class ASAEncoder(nn.Module):
    """ResNet-style encoder over a stacked frame pair with ASA residual stages.

    The stem output seeds both paths. Returns the static and dynamic
    pyramids at strides 4, 8, 16 and 32.
    """

    def __init__(self, backbone="resnet18", num_input_images=2, squeeze="mean"):
        super().__init__()
        widths, depths = BACKBONES[backbone]
        self.num_ch_enc = widths
        self.conv1 = nn.Conv2d(3 * num_input_images, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        stages = []
        cin = 64
        for i, (width, depth) in enumerate(zip(widths, depths)):
            blocks = []
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(ASABlock(cin, width, stride, squeeze=squeeze))
                cin = width
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, stacked: torch.Tensor):
        x = self.maxpool(F.relu(self.bn1(self.conv1((stacked - 0.45) / 0.225))))
        pair = FeaturePair(x, x)
        static, dynamic = [], []
        for stage in self.stages:
            for block in stage:
                pair = block(pair)
            static.append(pair.static)
            dynamic.append(pair.dynamic)
        return static, dynamic


class ResnetEncoder(nn.Module):
    """Plain ResNet encoder for the depth network; features at strides 2..32."""

    def __init__(self, backbone="resnet18"):
        super().__init__()
        widths, depths = BACKBONES[backbone]
        self.num_ch_enc = (64,) + widths
        self.net = ResNet(BasicBlock, list(depths))
        del self.net.fc

    def forward(self, image):
        n = self.net
        x = F.relu(n.bn1(n.conv1((image - 0.45) / 0.225)))
        feats = [x]
        x = n.layer1(n.maxpool(x))
        feats.append(x)
        for layer in (n.layer2, n.layer3, n.layer4):
            x = layer(x)
            feats.append(x)
        return feats


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(cin, cout, 3)
        self.act = nn.ELU(inplace=True)

    def forward(self, x):
        return self.act(self.conv(self.pad(x)))


class DepthDecoder(nn.Module):
    def __init__(self, num_ch_enc, scales=(0, 1, 2, 3)):
        super().__init__()
        self.scales = tuple(scales)
        self.num_ch_dec = (16, 32, 64, 128, 256)
        self.upconv0 = nn.ModuleList()
        self.upconv1 = nn.ModuleList()
        for i in range(4, -1, -1):
            cin = num_ch_enc[-1] if i == 4 else self.num_ch_dec[i + 1]
            self.upconv0.append(ConvBlock(cin, self.num_ch_dec[i]))
            cin = self.num_ch_dec[i] + (num_ch_enc[i - 1] if i > 0 else 0)
            self.upconv1.append(ConvBlock(cin, self.num_ch_dec[i]))
        self.dispconv = nn.ModuleDict({
            str(s): nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(self.num_ch_dec[s], 1, 3))
            for s in self.scales
        })

    def forward(self, feats):
        out = {}
        x = feats[-1]
        for k, i in enumerate(range(4, -1, -1)):
            x = self.upconv0[k](x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i > 0:
                x = torch.cat([x, feats[i - 1]], 1)
            x = self.upconv1[k](x)
            if i in self.scales:
                out[i] = torch.sigmoid(self.dispconv[str(i)](x))
        return [out[s] for s in self.scales]


class DepthNet(nn.Module):
    def __init__(self, backbone="resnet18", scales=(0, 1, 2, 3)):
        super().__init__()
        self.encoder = ResnetEncoder(backbone)
        self.decoder = DepthDecoder(self.encoder.num_ch_enc, scales)

    def forward(self, image):
        """Disparities in (0, 1), one per scale, finest first."""
        if image.shape[1] != 3:
            raise ValueError(f"expected a 3-channel image, got {image.shape[1]} channels")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} is not divisible by 32")
        return self.decoder(self.encoder(image))


class EgoMotionDecoder(nn.Module):
    """Regresses a 6-DoF pose (axis-angle, translation) from the deepest static features."""

    def __init__(self, in_channels=512, output_scale=0.01):
        super().__init__()
        self.output_scale = output_scale
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 256, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(256, 6, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, static_features):
        deepest = static_features[-1] if isinstance(static_features, (list, tuple)) else static_features
        out = self.head(self.net(deepest)).mean(dim=(2, 3))
        return self.output_scale * out


class MotionFieldDecoder(nn.Module):
    """U-shaped decoder over the dynamic pyramid; emits a per-pixel residual
    translation (metres) at the input resolution."""

    def __init__(self, num_ch_enc=(64, 128, 256, 512), output_scale=0.01):
        super().__init__()
        self.output_scale = output_scale
        self.num_ch_dec = (16, 32, 64, 128, 256)
        # decoder level i works at output stride 2**i; skips exist at strides 4, 8, 16
        skip_ch = {2: num_ch_enc[0], 3: num_ch_enc[1], 4: num_ch_enc[2]}
        self.upconv0 = nn.ModuleList()
        self.upconv1 = nn.ModuleList()
        for i in range(4, -1, -1):
            cin = num_ch_enc[-1] if i == 4 else self.num_ch_dec[i + 1]
            self.upconv0.append(ConvBlock(cin, self.num_ch_dec[i]))
            self.upconv1.append(ConvBlock(self.num_ch_dec[i] + skip_ch.get(i, 0), self.num_ch_dec[i]))
        self.skip_index = {4: 2, 3: 1, 2: 0}
        self.head = nn.Conv2d(self.num_ch_dec[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, dynamic_features):
        x = dynamic_features[-1]
        for k, i in enumerate(range(4, -1, -1)):
            x = self.upconv0[k](x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i in self.skip_index:
                x = torch.cat([x, dynamic_features[self.skip_index[i]]], 1)
            x = self.upconv1[k](x)
        return self.output_scale * self.head(x)


@dataclass
class MotionOutput:
    ego_motion: list
    motion_field: list


class ComponentSet(nn.Module):
    """The four trainable components: depth, asa, ego and field."""

    def __init__(self, backbone="resnet18", scales=(0, 1, 2, 3), squeeze="mean",
                 pose_scale=0.01, field_scale=0.01):
        super().__init__()
        self.backbone = backbone
        self.depth = DepthNet(backbone, scales)
        self.asa = ASAEncoder(backbone, squeeze=squeeze)
        self.ego = EgoMotionDecoder(self.asa.num_ch_enc[-1], pose_scale)
        self.field = MotionFieldDecoder(self.asa.num_ch_enc, field_scale)
        self.trainable = {name: True for name in COMPONENT_NAMES}

    def component(self, name) -> nn.Module:
        if name not in COMPONENT_NAMES:
            raise KeyError(f"unknown component {name!r}; expected one of {COMPONENT_NAMES}")
        return getattr(self, name)

    def apply_modes(self, training: bool = True):
        """Trainable components follow ``training``; frozen ones stay in eval mode
        so their normalization statistics do not drift."""
        for name in COMPONENT_NAMES:
            self.component(name).train(training and self.trainable[name])
        return self

    def motion(self, target, sources, with_field=True) -> MotionOutput:
        ego, fields = [], []
        for src in sources:
            static, dynamic = self.asa(torch.cat([target, src], 1))
            ego.append(self.ego(static))
            if with_field:
                fields.append(self.field(dynamic))
        return MotionOutput(ego_motion=ego, motion_field=fields)

    def visual_odometry(self, target, source):
        """Inference path for odometry: encoder and ego decoder only."""
        static, _ = self.asa(torch.cat([target, source], 1))
        return self.ego(static)

    def component_state(self):
        return {name: self.component(name).state_dict() for name in COMPONENT_NAMES}

    def load_component_state(self, states):
        for name in COMPONENT_NAMES:
            self.component(name).load_state_dict(states[name])


def set_trainable(components: ComponentSet, flags: dict) -> ComponentSet:
    """Set per-component trainable flags. Unnamed components keep their flag."""
    unknown = set(flags) - set(COMPONENT_NAMES)
    if unknown:
        raise KeyError(f"unknown component(s) {sorted(unknown)}; expected {COMPONENT_NAMES}")
    for name, flag in flags.items():
        components.trainable[name] = bool(flag)
        for p in components.component(name).parameters():
            p.requires_grad_(bool(flag))
    return components


def load_pretrained_backbone(components: ComponentSet, path) -> dict:
    """Load ImageNet-style ResNet weights (torchvision key layout) from ``path``.

    The depth encoder takes every matching tensor. The ASA encoder takes the
    stem (first convolution duplicated over the stacked frames and halved)
    and, per block, the residual branch and shortcut. Returns counts of
    loaded tensors per component.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    counts = {"depth": 0, "asa": 0}

    enc = components.depth.encoder.net
    own = enc.state_dict()
    matched = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    own.update(matched)
    enc.load_state_dict(own)
    counts["depth"] = len(matched)

    asa = components.asa
    own = asa.state_dict()
    mapping = {}
    if "conv1.weight" in state:
        w = state["conv1.weight"]
        reps = asa.conv1.weight.shape[1] // w.shape[1]
        mapping["conv1.weight"] = torch.cat([w] * reps, 1) / reps
    for suffix in ("weight", "bias", "running_mean", "running_var"):
        if f"bn1.{suffix}" in state:
            mapping[f"bn1.{suffix}"] = state[f"bn1.{suffix}"]
    for i, stage in enumerate(asa.stages):
        for j in range(len(stage)):
            src = f"layer{i + 1}.{j}."
            dst = f"stages.{i}.{j}."
            for k, v in state.items():
                if not k.startswith(src):
                    continue
                rest = k[len(src):]
                if rest.startswith(("conv1", "bn1", "conv2", "bn2")):
                    mapping[dst + "transform." + rest] = v
                elif rest.startswith("downsample."):
                    mapping[dst + "shortcut." + rest[len("downsample."):]] = v
    matched = {k: v for k, v in mapping.items() if k in own and own[k].shape == v.shape}
    own.update(matched)
    asa.load_state_dict(own)
    counts["asa"] = len(matched)
    return counts
