import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from scenead.erf import (
    compare_erf,
    compute_erf,
    heatmap_rgb,
    random_locations,
    receptive_field_box,
    support_in_box,
)
from scenead.model import ModelConfig, build_model
from scenead.model.attention import SelfAttention2d


def _fill(conv: nn.Module, value: float = 1.0):
    with torch.no_grad():
        conv.weight.fill_(value)
        if conv.bias is not None:
            conv.bias.zero_()
    return conv


def test_single_conv_support_is_kernel_footprint():
    net = _fill(nn.Conv2d(1, 1, 3, padding=1)).double()
    erf = compute_erf(net, torch.zeros(1, 16, 16, dtype=torch.float64), (7, 5))
    assert erf.area == 9
    assert erf.bbox() == (6, 8, 4, 6)


def test_identity_support_is_one_pixel():
    net = _fill(nn.Conv2d(3, 3, 1)).double()
    erf = compute_erf(net, torch.rand(3, 8, 8, dtype=torch.float64), (2, 3))
    assert erf.area == 1 and erf.support_mask[2, 3]


def test_erf_argument_checks():
    net = nn.Conv2d(1, 1, 3, padding=1)
    with pytest.raises(IndexError):
        compute_erf(net, torch.zeros(1, 8, 8), (8, 0))
    with pytest.raises(IndexError):
        compute_erf(net, torch.zeros(1, 8, 8), (0, 0), level=1)
    with pytest.raises(ValueError):
        compute_erf(net, torch.zeros(1, 8, 8), (0, 0), tau=1.5)


def test_box_hand_values():
    stack = nn.Sequential(nn.Conv2d(1, 1, 3, padding=1), nn.Conv2d(1, 1, 3, stride=2, padding=1))
    # output row 4 -> conv2 rows 7..9 -> conv1 rows 6..10
    assert receptive_field_box(stack, (4, 4), (32, 32)) == (6, 10, 6, 10)
    up = nn.Sequential(nn.ConvTranspose2d(1, 1, 2, stride=2))
    assert receptive_field_box(up, (5, 4), (8, 8)) == (2, 2, 2, 2)
    with pytest.raises(TypeError):
        receptive_field_box(nn.Sequential(nn.Linear(2, 2)), (0, 0), (4, 4))


LAYERS = {
    "conv3": lambda: nn.Conv2d(2, 2, 3, padding=1),
    "conv3s2": lambda: nn.Conv2d(2, 2, 3, stride=2, padding=1),
    "conv5d2": lambda: nn.Conv2d(2, 2, 3, padding=2, dilation=2),
    "pool": lambda: nn.MaxPool2d(2, 2),
    "up": lambda: nn.ConvTranspose2d(2, 2, 2, stride=2),
    "relu": lambda: nn.ReLU(),
    "bn": lambda: nn.BatchNorm2d(2),
}


@settings(max_examples=30, deadline=None)
@given(names=st.lists(st.sampled_from(sorted(LAYERS)), min_size=1, max_size=5), seed=st.integers(0, 1000))
def test_conv_support_inside_analytic_box(names, seed):
    torch.manual_seed(seed)
    stack = nn.Sequential(nn.Conv2d(1, 2, 3, padding=1), *[LAYERS[n]() for n in names]).double()
    x = torch.rand(1, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        h, w = stack(x[None]).shape[-2:]
    rng = np.random.default_rng(seed)
    for loc in random_locations((h, w), 4, rng):
        erf = compute_erf(stack, x, loc)
        assert support_in_box(erf, receptive_field_box(stack, loc, (32, 32)))


def test_decoder_style_student_inside_box():
    torch.manual_seed(0)
    student = nn.Sequential(
        nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.BatchNorm2d(8), nn.ReLU(),
        nn.Conv2d(8, 8, 3, stride=2, padding=1), nn.BatchNorm2d(8), nn.ReLU(),
        nn.ConvTranspose2d(8, 8, 2, stride=2), nn.BatchNorm2d(8), nn.ReLU(),
        nn.Conv2d(8, 8, 3, padding=1),
    ).double()
    x = torch.rand(3, 64, 64, dtype=torch.float64)
    for loc in [(0, 0), (10, 20), (31, 31), (16, 3)]:
        erf = compute_erf(student, x, loc)
        box = receptive_field_box(student, loc, (64, 64))
        assert erf.area > 0 and support_in_box(erf, box)


def _tiny_omniad(seed=0):
    cfg = ModelConfig(backbone="tiny_random", use_attention_modules=True, input_size=(64, 64), init_seed=seed)
    return build_model(cfg).double()


@pytest.mark.parametrize("level", [0, 1, 2])
def test_zero_gate_areas_equal(level):
    m = _tiny_omniad()
    rng = np.random.default_rng(level)
    imgs = [rng.random((3, 64, 64)) for _ in range(2)]
    locs = random_locations((16 >> level, 16 >> level), 4, rng)
    res = compare_erf(m, m.without_attention(), imgs, locs, level)
    assert all(r["area_with"] == r["area_without"] for r in res["per_location"])
    assert res["ratio"] == 1.0 and not res["violations"]


def test_compare_rejects_unrelated_models():
    a, b = _tiny_omniad(0), _tiny_omniad(1)
    with pytest.raises(ValueError):
        compare_erf(a, b.without_attention(), [np.zeros((3, 64, 64))], [(1, 1)])


class _Toy(nn.Module):
    """Conv stack, optionally followed by a global self-attention layer."""

    def __init__(self, attention: bool):
        super().__init__()
        torch.manual_seed(0)
        self.body = nn.Sequential(nn.Conv2d(4, 4, 3, padding=1), nn.ReLU(), nn.Conv2d(4, 4, 3, padding=1))
        self.attention = SelfAttention2d(4) if attention else None
        if attention:
            n = 12 * 12
            with torch.no_grad():
                # zero query/key -> uniform attention over all N positions;
                # values scaled by N so the global term is not drowned out
                for p in (*self.attention.query.parameters(), *self.attention.key.parameters()):
                    p.zero_()
                self.attention.value.weight.mul_(n)
                self.attention.gamma.fill_(1.0)

    def forward(self, x):
        f = self.body(x)
        return self.attention(f) if self.attention is not None else f


def test_global_attention_toy_strictly_broadens():
    with_att, without = _Toy(True).double(), _Toy(False).double()
    rng = np.random.default_rng(0)
    imgs = [rng.random((4, 12, 12)) for _ in range(4)]
    res = compare_erf(with_att, without, imgs, random_locations((12, 12), 16, rng))
    assert res["area_with"] > res["area_without"]
    assert res["area_with"] >= 4 * res["area_without"]  # attention reaches far beyond the conv footprint
    assert res["area_without"] <= 25.0


def test_erf_deterministic():
    m = _tiny_omniad()
    m.set_gates(0.5)
    x = np.random.default_rng(1).random((3, 64, 64))
    a = compute_erf(m, x, (5, 6), level=0)
    b = compute_erf(m, x, (5, 6), level=0)
    assert np.array_equal(a.magnitude, b.magnitude)
    assert m.training  # mode restored after the probe


def test_heatmap_ramp():
    mag = np.array([[0.0, 1.0], [0.25, 4.0]])
    rgb = heatmap_rgb(mag, gamma=1.0)
    assert rgb.dtype == np.uint8 and rgb.shape == (2, 2, 3)
    assert tuple(rgb[0, 0]) == (0, 0, 0) and tuple(rgb[1, 1]) == (255, 255, 255)
    assert heatmap_rgb(np.zeros((2, 2))).max() == 0
