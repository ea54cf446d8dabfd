"""Teacher encoders, the one-class bottleneck and the de-convolutional student decoder."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
from torchvision.models import resnet as tv_resnet
from torchvision.models.resnet import Bottleneck


@dataclass(frozen=True)
class BackboneSpec:
    """Channel layout shared by teacher, bottleneck and decoder."""

    stage_planes: tuple[int, int, int]  # bottleneck "planes" per stage; output = planes * 4
    stem_channels: int
    groups: int
    base_width: int
    encoder_blocks: tuple[int, int, int]
    decoder_blocks: tuple[int, int, int]
    bottleneck_blocks: int

    @property
    def level_channels(self) -> tuple[int, int, int]:
        return tuple(p * Bottleneck.expansion for p in self.stage_planes)


# ResNeXt-50 32x4d and Wide-ResNet-50-2 stage layouts (layers 1-3 used).
FULL_SPECS = {
    "resnext_pretrained": BackboneSpec((64, 128, 256), 64, 32, 4, (3, 4, 6), (3, 4, 6), 3),
    "rd_default_pretrained": BackboneSpec((64, 128, 256), 64, 1, 128, (3, 4, 6), (3, 4, 6), 3),
}


def tiny_spec(backbone: str, divisor: int) -> BackboneSpec:
    """Width-scaled, one-block-per-stage analogue of the full backbones.

    ``tiny_random`` mirrors the wide RD encoder, ``tiny_random_resnext`` the
    grouped ResNeXt encoder. Both keep the bottleneck width at twice the planes.
    """
    planes = tuple(max(p // divisor, 1) for p in (64, 128, 256))
    stem = max(64 // divisor, 1)
    if backbone == "tiny_random":
        groups, base_width = 1, 128
    elif backbone == "tiny_random_resnext":
        groups = max(32 // divisor, 1)
        base_width = 128 // groups
    else:
        raise ValueError(f"not a tiny backbone: {backbone}")
    return BackboneSpec(planes, stem, groups, base_width, (1, 1, 1), (1, 1, 1), 1)


def conv3x3(cin, cout, stride=1, groups=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, groups=groups, bias=False)


def conv1x1(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=False)


def deconv2x2(cin, cout, stride=2, groups=1):
    return nn.ConvTranspose2d(cin, cout, kernel_size=2, stride=stride, groups=groups, bias=False)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.constant_(m.weight, 1)
            nn.init.constant_(m.bias, 0)


class TinyEncoder(nn.Module):
    """Three-stage ResNet-style encoder at strides 4, 8, 16."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.conv1 = nn.Conv2d(3, spec.stem_channels, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(spec.stem_channels)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        inplanes = spec.stem_channels
        layers = []
        for planes, blocks, stride in zip(spec.stage_planes, spec.encoder_blocks, (1, 2, 2)):
            layer, inplanes = _make_encoder_layer(inplanes, planes, blocks, stride, spec)
            layers.append(layer)
        self.layer1, self.layer2, self.layer3 = layers
        _init_weights(self)


def _make_encoder_layer(inplanes, planes, blocks, stride, spec: BackboneSpec):
    out = planes * Bottleneck.expansion
    downsample = None
    if stride != 1 or inplanes != out:
        downsample = nn.Sequential(conv1x1(inplanes, out, stride), nn.BatchNorm2d(out))
    mods = [Bottleneck(inplanes, planes, stride, downsample, spec.groups, spec.base_width)]
    for _ in range(1, blocks):
        mods.append(Bottleneck(out, planes, groups=spec.groups, base_width=spec.base_width))
    return nn.Sequential(*mods), out


def build_teacher(backbone: str, divisor: int = 8, weights_path: str | None = None,
                  resnext_depth: int = 50) -> tuple[nn.Module, BackboneSpec]:
    if backbone in ("tiny_random", "tiny_random_resnext"):
        spec = tiny_spec(backbone, divisor)
        net = TinyEncoder(spec)
    elif backbone == "resnext_pretrained":
        spec = FULL_SPECS[backbone]
        net = tv_resnet.resnext50_32x4d() if resnext_depth == 50 else tv_resnet.resnext101_32x8d()
        if resnext_depth != 50:
            spec = BackboneSpec((64, 128, 256), 64, 32, 8, (3, 4, 23), (3, 4, 6), 3)
    elif backbone == "rd_default_pretrained":
        spec = FULL_SPECS[backbone]
        net = tv_resnet.wide_resnet50_2()
    else:
        raise ValueError(f"unknown backbone {backbone!r}")
    if weights_path:
        state = torch.load(Path(weights_path), map_location="cpu", weights_only=True)
        net.load_state_dict(state, strict=False)
    # drop classifier head / last stage; only layers 1-3 feed the pyramid
    for name in ("layer4", "avgpool", "fc"):
        if hasattr(net, name):
            delattr(net, name)
    return net, spec


def teacher_features(net: nn.Module, x: torch.Tensor) -> list[torch.Tensor]:
    x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
    f1 = net.layer1(x)
    f2 = net.layer2(f1)
    f3 = net.layer3(f2)
    return [f1, f2, f3]


class OCBE(nn.Module):
    """One-class bottleneck embedding: fuse the three teacher levels at stride 16,
    then compress with strided residual blocks to stride 32."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        c1, c2, c3 = spec.level_channels
        self.conv1 = conv3x3(c1, c2, 2)
        self.bn1 = nn.BatchNorm2d(c2)
        self.conv2 = conv3x3(c2, c3, 2)
        self.bn2 = nn.BatchNorm2d(c3)
        self.conv3 = conv3x3(c2, c3, 2)
        self.bn3 = nn.BatchNorm2d(c3)
        self.relu = nn.ReLU(inplace=True)
        planes = spec.stage_planes[2] * 2
        out = planes * Bottleneck.expansion
        downsample = nn.Sequential(conv1x1(3 * c3, out, 2), nn.BatchNorm2d(out))
        blocks = [Bottleneck(3 * c3, planes, 2, downsample, spec.groups, spec.base_width)]
        for _ in range(1, spec.bottleneck_blocks):
            blocks.append(Bottleneck(out, planes, groups=spec.groups, base_width=spec.base_width))
        self.bn_layer = nn.Sequential(*blocks)
        self.out_channels = out
        _init_weights(self)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        l1 = self.relu(self.bn2(self.conv2(self.relu(self.bn1(self.conv1(feats[0]))))))
        l2 = self.relu(self.bn3(self.conv3(feats[1])))
        return self.bn_layer(torch.cat([l1, l2, feats[2]], dim=1))


class DeBottleneck(nn.Module):
    """Bottleneck block whose strided 3x3 conv is replaced by a 2x2 transposed conv."""

    expansion = 4

    def __init__(self, inplanes, planes, stride=1, upsample=None, groups=1, base_width=64):
        super().__init__()
        width = int(planes * (base_width / 64.0)) * groups
        self.conv1 = conv1x1(inplanes, width)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = deconv2x2(width, width, stride, groups) if stride == 2 else conv3x3(width, width, 1, groups)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = conv1x1(width, planes * self.expansion)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.upsample = upsample

    def forward(self, x):
        identity = x if self.upsample is None else self.upsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class Decoder(nn.Module):
    """Student decoder: three upsampling stages mirroring teacher layers 3, 2, 1."""

    def __init__(self, spec: BackboneSpec, in_channels: int):
        super().__init__()
        self.inplanes = in_channels
        p1, p2, p3 = spec.stage_planes
        n1, n2, n3 = spec.decoder_blocks
        self.layer1 = self._make_layer(p3, n1, spec)
        self.layer2 = self._make_layer(p2, n2, spec)
        self.layer3 = self._make_layer(p1, n3, spec)
        _init_weights(self)

    def _make_layer(self, planes, blocks, spec: BackboneSpec):
        out = planes * DeBottleneck.expansion
        upsample = nn.Sequential(deconv2x2(self.inplanes, out, 2), nn.BatchNorm2d(out))
        mods = [DeBottleneck(self.inplanes, planes, 2, upsample, spec.groups, spec.base_width)]
        self.inplanes = out
        for _ in range(1, blocks):
            mods.append(DeBottleneck(out, planes, groups=spec.groups, base_width=spec.base_width))
        return nn.Sequential(*mods)

    def stages(self):
        return [self.layer1, self.layer2, self.layer3]
