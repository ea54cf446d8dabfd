"""Reverse-distillation teacher/student models, loss and anomaly maps."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from ..data import NORM_MEAN, NORM_STD, ImageTensor
from .attention import INNER_WIDTHS, AttentionSpec, StudentAttentionModule
from .backbones import OCBE, Decoder, build_teacher, teacher_features

BACKBONES = ("resnext_pretrained", "rd_default_pretrained", "tiny_random", "tiny_random_resnext")
COS_EPS = 1e-8
CHECKPOINT_FORMAT = "scenead-checkpoint/1"


@dataclass
class ModelConfig:
    backbone: str = "resnext_pretrained"
    use_attention_modules: bool = True
    input_size: tuple[int, int] = (256, 256)
    width_divisor: int = 8
    backbone_weights: str | None = None
    resnext_depth: int = 50
    upsample_mode: str = "bilinear"
    smoothing_sigma: float = 4.0
    norm_mean: tuple[float, float, float] = NORM_MEAN
    norm_std: tuple[float, float, float] = NORM_STD
    init_seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        self.input_size = tuple(int(v) for v in self.input_size)
        self.norm_mean = tuple(self.norm_mean)
        self.norm_std = tuple(self.norm_std)
        if self.input_size[0] % 16 or self.input_size[1] % 16:
            raise ValueError(f"input size must be a multiple of 16, got {self.input_size}")

    @property
    def is_tiny(self) -> bool:
        return self.backbone.startswith("tiny")

    @property
    def divisor(self) -> int:
        return self.width_divisor if self.is_tiny else 1

    @property
    def attention_widths(self) -> tuple[int, int, int]:
        return tuple(max(w // self.divisor, 1) for w in INNER_WIDTHS)

    def attention_specs(self) -> dict[str, AttentionSpec]:
        """A3 sits on the stride-4 level, A2 on stride 8, A1 on stride 16."""
        h, _ = self.input_size
        c = [256 // self.divisor, 512 // self.divisor, 1024 // self.divisor]
        return {
            "A3": AttentionSpec(c[0], h // 4, c[0], h // 4),
            "A2": AttentionSpec(c[1], h // 8, c[1], h // 8),
            "A1": AttentionSpec(c[2], h // 16, c[2], h // 16),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["norm_mean"] = list(self.norm_mean)
        d["norm_std"] = list(self.norm_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AnomalyMap:
    scores: np.ndarray  # H x W, smoothed
    provenance: list[np.ndarray] = field(default_factory=list)  # per-level upsampled maps, pre-sum
    raw: np.ndarray | None = None  # summed, pre-smoothing


class ReverseDistillation(nn.Module):
    """Frozen teacher encoder, trainable bottleneck and student decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.init_seed)
        teacher, spec = build_teacher(config.backbone, config.width_divisor,
                                      config.backbone_weights, config.resnext_depth)
        self.spec = spec
        self.teacher = teacher
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.bottleneck = OCBE(spec)
        self.decoder = Decoder(spec, self.bottleneck.out_channels)
        self.register_buffer("mean", torch.tensor(config.norm_mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(config.norm_std).view(1, 3, 1, 1))
        self.teacher.eval()

    use_attention = False

    def train(self, mode: bool = True):
        super().train(mode)
        self.teacher.eval()  # frozen BN statistics
        return self

    def student_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("teacher.")]

    def preprocess(self, images) -> torch.Tensor:
        """[0, 1] images (ImageTensor, array or tensor) -> normalised N x 3 x H x W."""
        if isinstance(images, ImageTensor):
            images = images.data
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        x = x.to(self.mean.dtype)
        return (x - self.mean) / self.std

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != tuple(self.config.input_size):
            raise ValueError(f"expected N x 3 x {self.config.input_size}, got {tuple(x.shape)}")

    def teacher_forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Multiscale teacher features for a normalised batch; no autograd state."""
        self.check_input(x)
        if torch.is_grad_enabled() and x.requires_grad:
            return teacher_features(self.teacher, x)
        with torch.no_grad():
            return teacher_features(self.teacher, x)

    def attend(self, level_index: int, f: torch.Tensor) -> torch.Tensor:
        return f

    def student_forward(self, teacher_feats: list[torch.Tensor]) -> list[torch.Tensor]:
        z = self.bottleneck(teacher_feats)
        outs = []
        # decoder stage i reconstructs teacher level 3 - i
        for i, stage in enumerate(self.decoder.stages()):
            z = stage(z)
            z = self.attend(i, z)
            outs.append(z)
        pyr = outs[::-1]
        for s, t in zip(pyr, teacher_feats):
            if s.shape != t.shape:
                raise ValueError(f"student level {tuple(s.shape)} does not mirror teacher {tuple(t.shape)}")
        return pyr

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        t = self.teacher_forward(x)
        return t, self.student_forward(t)

    def student_pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Student features with gradients flowing back to the input image."""
        self.check_input(x)
        return self.student_forward(teacher_features(self.teacher, x))

    def without_attention(self) -> "ReverseDistillation":
        return self


class OmniAD(ReverseDistillation):
    """Reverse distillation with a student attention module after each decoder stage."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        specs = config.attention_specs()
        torch.manual_seed(config.init_seed + 1)
        # decoder order: A1 (stride 16), A2 (stride 8), A3 (stride 4)
        self.attention = nn.ModuleList(
            [StudentAttentionModule(specs[k], config.attention_widths) for k in ("A1", "A2", "A3")]
        )
        self.use_attention = True

    def attend(self, level_index: int, f: torch.Tensor) -> torch.Tensor:
        if not self.use_attention:
            return f
        return self.attention[level_index](f)

    def gates(self) -> list[nn.Parameter]:
        return [g for m in self.attention for g in m.gates()]

    def set_gates(self, value: float) -> None:
        with torch.no_grad():
            for g in self.gates():
                g.fill_(value)

    def without_attention(self) -> "OmniAD":
        """A view sharing every module but skipping the attention modules."""
        view = copy.copy(self)
        view.use_attention = False
        return view


def build_model(config: ModelConfig) -> ReverseDistillation:
    return OmniAD(config) if config.use_attention_modules else ReverseDistillation(config)


# loss and anomaly maps -------------------------------------------------------

def cosine_distance_map(t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity along channels: N x C x H x W -> N x H x W, in [0, 2]."""
    dot = (t * s).sum(dim=1)
    denom = torch.clamp_min(t.norm(dim=1) * s.norm(dim=1), COS_EPS)
    cos = torch.clamp(dot / denom, -1.0, 1.0)
    return 1.0 - cos


def distillation_loss(teacher: list[torch.Tensor], student: list[torch.Tensor]) -> torch.Tensor:
    """Mean over levels of the mean per-position cosine distance."""
    if len(teacher) != len(student):
        raise ValueError("pyramids have different depths")
    terms = []
    for t, s in zip(teacher, student):
        if t.shape != s.shape:
            raise ValueError(f"level shapes differ: {tuple(t.shape)} vs {tuple(s.shape)}")
        terms.append(cosine_distance_map(t, s).mean())
    return torch.stack(terms).mean()


def anomaly_maps_from_features(
    teacher: list[torch.Tensor],
    student: list[torch.Tensor],
    out_size: tuple[int, int],
    sigma: float = 4.0,
    mode: str = "bilinear",
) -> list[AnomalyMap]:
    with torch.no_grad():
        levels = []
        for t, s in zip(teacher, student):
            d = cosine_distance_map(t, s).unsqueeze(1)
            kw = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
            levels.append(F.interpolate(d, size=tuple(out_size), mode=mode, **kw)[:, 0])
        levels_np = [lv.double().cpu().numpy() for lv in levels]
    maps = []
    for n in range(levels_np[0].shape[0]):
        prov = [lv[n] for lv in levels_np]
        raw = np.sum(prov, axis=0)
        scores = gaussian_filter(raw, sigma=sigma) if sigma > 0 else raw.copy()
        maps.append(AnomalyMap(scores=scores, provenance=prov, raw=raw))
    return maps


def anomaly_map(x, model: ReverseDistillation) -> AnomalyMap | list[AnomalyMap]:
    """Anomaly map(s) for one image or a batch of [0, 1] images."""
    single = isinstance(x, ImageTensor) or (np.ndim(x) == 3)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        xb = model.preprocess(x)
        t, s = model(xb)
    model.train(was_training)
    maps = anomaly_maps_from_features(t, s, tuple(xb.shape[-2:]), model.config.smoothing_sigma,
                                      model.config.upsample_mode)
    return maps[0] if single else maps


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path: Path, model: ReverseDistillation, epoch: int, val_f1: float, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state_dict": {k: v for k, v in model.state_dict().items() if not k.startswith("teacher.")},
        "teacher_state_dict": {k: v for k, v in model.state_dict().items() if k.startswith("teacher.")},
        "epoch": epoch,
        "val_f1": val_f1,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path) -> tuple[ReverseDistillation, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a scenead checkpoint")
    config = ModelConfig.from_dict(payload["config"])
    config.backbone_weights = None  # teacher weights come from the checkpoint itself
    model = build_model(config)
    state = dict(payload["teacher_state_dict"])
    state.update(payload["state_dict"])
    model.load_state_dict(state)
    model.eval()
    return model, payload
