"""Student attention modules inserted after each decoder stage."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class AttentionSpec:
    c_in: int
    h_in: int
    c_out: int
    h_out: int


# Layouts for the standard 256x256 input with stage widths 256/512/1024.
STANDARD_SPECS = {
    "A3": AttentionSpec(256, 64, 256, 64),
    "A2": AttentionSpec(512, 32, 512, 32),
    "A1": AttentionSpec(1024, 16, 1024, 16),
}
INNER_WIDTHS = (64, 128, 256)


class SelfAttention2d(nn.Module):
    """Single-head spatial self-attention with a zero-initialised residual gate.

    Query/key projections use ``channels // 8`` channels, values keep all
    channels; ``out = x + gamma * attend(x)``.
    """

    def __init__(self, channels: int):
        super().__init__()
        qk = max(channels // 8, 1)
        self.query = nn.Conv2d(channels, qk, 1)
        self.key = nn.Conv2d(channels, qk, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.scale = 1.0 / math.sqrt(qk)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2).unsqueeze(1)  # B, 1, N, qk
        k = self.key(x).flatten(2).transpose(1, 2).unsqueeze(1)
        v = self.value(x).flatten(2).transpose(1, 2).unsqueeze(1)  # B, 1, N, C
        out = F.scaled_dot_product_attention(q, k, v, scale=self.scale)
        out = out.squeeze(1).transpose(1, 2).reshape(b, c, h, w)
        return x + self.gamma * out


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1)


class StudentAttentionModule(nn.Module):
    """Shape-preserving attention U-Net applied to one decoder stage output.

    Encoder blocks (conv, self-attention, 2x2 max-pool) at widths w1, w2, a
    bottleneck of conv-BN-ReLU / self-attention layers at w3, and two decoder
    blocks that upsample and concatenate the matching pre-pool encoder output.
    The result is added back to the input through a zero-initialised gate, so a
    freshly built module is the identity.
    """

    def __init__(self, spec: AttentionSpec, widths: tuple[int, int, int] = INNER_WIDTHS):
        super().__init__()
        if spec.c_in != spec.c_out or spec.h_in != spec.h_out:
            raise ValueError(f"attention modules are shape-preserving, got {spec}")
        self.spec = spec
        w1, w2, w3 = widths
        self.enc1_conv = _conv(spec.c_in, w1)
        self.enc1_attn = SelfAttention2d(w1)
        self.enc2_conv = _conv(w1, w2)
        self.enc2_attn = SelfAttention2d(w2)
        self.pool = nn.MaxPool2d(2, 2)
        self.bottleneck = nn.Sequential(
            _conv(w2, w3), nn.BatchNorm2d(w3), nn.ReLU(inplace=True),
            SelfAttention2d(w3),
            _conv(w3, w3), nn.BatchNorm2d(w3), nn.ReLU(inplace=True),
            SelfAttention2d(w3),
            _conv(w3, w3), nn.BatchNorm2d(w3), nn.ReLU(inplace=True),
            SelfAttention2d(w3),
            _conv(w3, w2), nn.BatchNorm2d(w2),
        )
        self.dec1_conv = _conv(2 * w2, w1)
        self.dec2_conv = _conv(2 * w1, spec.c_out)
        self.gate = nn.Parameter(torch.zeros(1))

    def body(self, f: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        h, w = f.shape[-2:]
        e1 = self.enc1_attn(self.enc1_conv(f))
        p1 = self.pool(e1)
        e2 = self.enc2_attn(self.enc2_conv(p1))
        p2 = self.pool(e2)
        z = self.bottleneck(p2)
        u1 = F.interpolate(z, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        d1 = self.dec1_conv(torch.cat([u1, e2], dim=1))
        u2 = F.interpolate(d1, size=(h, w), mode="bilinear", align_corners=False)
        d2 = self.dec2_conv(torch.cat([u2, e1], dim=1))
        if trace is not None:
            trace.extend([
                ("enc1", tuple(e1.shape[1:])), ("pool1", tuple(p1.shape[1:])),
                ("enc2", tuple(e2.shape[1:])), ("pool2", tuple(p2.shape[1:])),
                ("bottleneck", tuple(z.shape[1:])), ("upsample1", tuple(u1.shape[1:])),
                ("dec1", tuple(d1.shape[1:])), ("upsample2", tuple(u2.shape[1:])),
                ("dec2", tuple(d2.shape[1:])),
            ])
        return d2

    def forward(self, f: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        if f.shape[1] != self.spec.c_in or tuple(f.shape[-2:]) != (self.spec.h_in, self.spec.h_in):
            raise ValueError(
                f"expected (*, {self.spec.c_in}, {self.spec.h_in}, {self.spec.h_in}), got {tuple(f.shape)}"
            )
        return f + self.gate * self.body(f, trace)

    def gates(self) -> list[nn.Parameter]:
        return [self.gate] + [m.gamma for m in self.modules() if isinstance(m, SelfAttention2d)]
