"""Effective receptive fields measured through input gradients."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .data import ImageTensor

DEFAULT_TAU = 0.025


@dataclass
class ErfMap:
    location: tuple[int, int]
    magnitude: np.ndarray  # H x W, sum over channels of |d out / d input|
    support_mask: np.ndarray  # H x W bool
    level: int = 0
    tau: float = DEFAULT_TAU

    @property
    def area(self) -> int:
        return int(self.support_mask.sum())

    def bbox(self) -> tuple[int, int, int, int] | None:
        """Inclusive (r0, r1, c0, c1) of the support, or None if empty."""
        rows, cols = np.nonzero(self.support_mask)
        if not len(rows):
            return None
        return int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        x = x.data
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1:
        raise ValueError(f"expected a single image, got shape {tuple(x.shape)}")
    return x


def _level_output(model: nn.Module, x: torch.Tensor, level: int) -> torch.Tensor:
    # anomaly models take [0, 1] images and expose their student pyramid;
    # plain modules are called directly
    if hasattr(model, "student_pyramid"):
        x = model.preprocess(x)
        out = model.student_pyramid(x)
    else:
        out = model(x)
    if isinstance(out, (list, tuple)):
        if not 0 <= level < len(out):
            raise IndexError(f"level {level} out of range for {len(out)} outputs")
        out = out[level]
    elif level != 0:
        raise IndexError(f"level {level} requested from a single-output model")
    return out


def compute_erf(model: nn.Module, x, location: tuple[int, int], level: int = 0,
                tau: float = DEFAULT_TAU) -> ErfMap:
    """Gradient ERF of one output location.

    A unit cotangent on every channel at ``location`` of the chosen output level
    is backpropagated to the input. Pixels whose channel-summed absolute gradient
    exceeds ``tau`` times the maximum form the support.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    was_training = model.training
    model.eval()
    try:
        x = _as_batch(x).detach().to(next(model.parameters()).dtype).clone().requires_grad_(True)
        with torch.enable_grad():
            out = _level_output(model, x, level)
            i, j = location
            h, w = out.shape[-2:]
            if not (0 <= i < h and 0 <= j < w):
                raise IndexError(f"location {location} outside the {h}x{w} output grid")
            out[0, :, i, j].sum().backward()
    finally:
        model.train(was_training)
    mag = x.grad[0].abs().sum(0).double().cpu().numpy()
    peak = mag.max()
    support = mag > tau * peak if peak > 0 else np.zeros(mag.shape, dtype=bool)
    return ErfMap(location=(int(i), int(j)), magnitude=mag, support_mask=support, level=level, tau=tau)


def _config_signature(model) -> dict | None:
    cfg = getattr(model, "config", None)
    if cfg is None:
        return None
    d = cfg.to_dict()
    d.pop("use_attention_modules", None)
    return d


def _shared_weights_match(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    for k in set(sa) & set(sb):
        if k.startswith("attention."):
            continue
        if not torch.equal(sa[k], sb[k]):
            return False
    return True


def compare_erf(model_with: nn.Module, model_without: nn.Module, images: Sequence, locations: Sequence,
                level: int = 0, tau: float = DEFAULT_TAU) -> dict:
    """ERF areas of two models over every (image, location) pair.

    The broadening inequality area_with >= area_without is evaluated per pair and
    on the mean; violations are listed rather than hidden.
    """
    sig_a, sig_b = _config_signature(model_with), _config_signature(model_without)
    if sig_a != sig_b:
        raise ValueError("models differ beyond their attention modules")
    if not _shared_weights_match(model_with, model_without):
        raise ValueError("models do not share backbone/bottleneck/decoder weights")
    rows = []
    for n, img in enumerate(images):
        for loc in locations:
            a = compute_erf(model_with, img, tuple(loc), level, tau).area
            b = compute_erf(model_without, img, tuple(loc), level, tau).area
            rows.append({"image": n, "location": [int(loc[0]), int(loc[1])], "area_with": a, "area_without": b,
                         "ratio": a / b if b else float("inf") if a else 1.0})
    mean_with = float(np.mean([r["area_with"] for r in rows]))
    mean_without = float(np.mean([r["area_without"] for r in rows]))
    return {
        "level": level,
        "tau": tau,
        "per_location": rows,
        "area_with": mean_with,
        "area_without": mean_without,
        "ratio": mean_with / mean_without if mean_without else float("inf"),
        "mean_pair_ratio": float(np.mean([r["ratio"] for r in rows])),
        "broadens": mean_with >= mean_without,
        "violations": [r for r in rows if r["area_with"] < r["area_without"]],
    }


def random_locations(grid: tuple[int, int], n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    h, w = grid
    return [(int(rng.integers(h)), int(rng.integers(w))) for _ in range(n)]


# analytic receptive field -----------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _layer_geometry(m: nn.Module):
    """(kernel, stride, padding, dilation, transposed) per axis, or None if pointwise."""
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.MaxPool2d, nn.AvgPool2d)):
        k, s, p = _pair(m.kernel_size), _pair(m.stride), _pair(m.padding)
        d = _pair(getattr(m, "dilation", 1))
        return k, s, p, d, isinstance(m, nn.ConvTranspose2d)
    if isinstance(m, (nn.ReLU, nn.BatchNorm2d, nn.Identity, nn.LeakyReLU, nn.GELU, nn.Sigmoid, nn.Tanh)):
        return None
    raise TypeError(f"no analytic receptive field for {type(m).__name__}")


def _input_span(lo: int, hi: int, k: int, s: int, p: int, d: int, transposed: bool) -> tuple[int, int]:
    if not transposed:
        return lo * s - p, hi * s - p + d * (k - 1)
    # output o receives input i when o = i * s - p + d * t for some tap t
    return -(-(lo + p - d * (k - 1)) // s), (hi + p) // s


def receptive_field_box(stack: nn.Sequential, location: tuple[int, int],
                        input_shape: tuple[int, int]) -> tuple[int, int, int, int]:
    """Inclusive (r0, r1, c0, c1) input box that can influence ``location``.

    Works for plain sequential stacks of convolutions, transposed convolutions,
    pooling and pointwise layers. The box is clipped to the input.
    """
    layers = [m for m in stack.modules() if not isinstance(m, nn.Sequential)]
    spans = [[location[0], location[0]], [location[1], location[1]]]
    for m in reversed(layers):
        geo = _layer_geometry(m)
        if geo is None:
            continue
        k, s, p, d, tr = geo
        for ax in range(2):
            spans[ax] = list(_input_span(*spans[ax], k[ax], s[ax], p[ax], d[ax], tr))
    h, w = input_shape
    return (max(spans[0][0], 0), min(spans[0][1], h - 1), max(spans[1][0], 0), min(spans[1][1], w - 1))


def support_in_box(erf: ErfMap, box: tuple[int, int, int, int]) -> bool:
    r0, r1, c0, c1 = box
    inside = np.zeros_like(erf.support_mask)
    inside[r0:r1 + 1, c0:c1 + 1] = True
    return not np.any(erf.support_mask & ~inside)


# visualisation ------------------------------------------------------------------

def heatmap_rgb(magnitude: np.ndarray, gamma: float = 0.5) -> np.ndarray:
    """Black-red-yellow-white ramp of the normalised magnitude, uint8 H x W x 3."""
    peak = magnitude.max()
    v = (magnitude / peak) ** gamma if peak > 0 else np.zeros_like(magnitude)
    rgb = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    return (rgb * 255 + 0.5).astype(np.uint8)


def save_erf_heatmap(path: Path, erf: ErfMap) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_rgb(erf.magnitude)).save(path)


__all__ = [
    "DEFAULT_TAU",
    "ErfMap",
    "compute_erf",
    "compare_erf",
    "random_locations",
    "receptive_field_box",
    "support_in_box",
    "heatmap_rgb",
    "save_erf_heatmap",
]
