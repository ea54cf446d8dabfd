"""Student training, checkpoint selection, evaluation and the ablation grid."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import VARIANTS, SceneDataset, load_binary_mask, load_dataset, write_json
from .metrics import DegenerateTruthError, EvalReport, evaluate_maps, optimal_f1_sweep
from .model import ModelConfig, ReverseDistillation, build_model, distillation_loss, save_checkpoint
from .model.omniad import anomaly_maps_from_features
from .synthesis import ensure_variant

log = logging.getLogger(__name__)

METHODS = ("OmniAD", "OmniAD w/o R", "OmniAD w/o A^i", "RD")
VARIANT_LABELS = {"none": "No Aug", "qanv": "QANV", "inv": "INV", "both": "Both"}

# method -> (backbone family, attention modules)
_METHOD_LAYOUT = {
    "OmniAD": ("resnext", True),
    "OmniAD w/o R": ("rd_default", True),
    "OmniAD w/o A^i": ("resnext", False),
    "RD": ("rd_default", False),
}
_BACKBONE_BY_SCALE = {
    "full": {"resnext": "resnext_pretrained", "rd_default": "rd_default_pretrained"},
    "tiny": {"resnext": "tiny_random_resnext", "rd_default": "tiny_random"},
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 0.005
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    val_fraction: float = 0.2
    augmentation_tag: str = "none"
    eval_batch_size: int = 16

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.augmentation_tag not in VARIANTS:
            raise ValueError(f"unknown augmentation tag {self.augmentation_tag!r}")
        if self.optimizer != "adam":
            raise ValueError("only the 'adam' optimizer is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class RunManifest:
    config_hash: str
    dataset_root: str
    dataset_variant: str
    resolved_config: dict
    train_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    checkpoint_path: str = ""
    wall_clock_s: float = 0.0
    val_refs: list[str] = field(default_factory=list)
    test_refs: list[str] = field(default_factory=list)
    n_train_images: int = 0
    n_synthesized: int = 0
    test_report: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def save(self, path: Path) -> None:
        write_json(path, self.to_dict())


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


def method_config(method: str, scale: str = "tiny", **overrides) -> ModelConfig:
    family, attention = _METHOD_LAYOUT[method]
    return ModelConfig(backbone=_BACKBONE_BY_SCALE[scale][family], use_attention_modules=attention, **overrides)


# data helpers ----------------------------------------------------------------

def _load_stack(dataset: SceneDataset, refs: Sequence[str], size: tuple[int, int]) -> torch.Tensor:
    if not refs:
        return torch.empty(0, 3, *size)
    x = torch.from_numpy(np.stack([dataset.load(r).data for r in refs]))
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x


def _load_masks(dataset: SceneDataset, refs: Sequence[str], size: tuple[int, int]) -> list[np.ndarray]:
    out = []
    for r in refs:
        m = load_binary_mask(dataset.path(dataset.test_masks[dataset.test_images.index(r)]))
        if m.shape != tuple(size):
            t = torch.from_numpy(m[None, None].astype(np.float32))
            m = F.interpolate(t, size=tuple(size), mode="nearest")[0, 0].numpy().astype(np.uint8)
        out.append(m)
    return out


def split_validation(dataset: SceneDataset, fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded draw of validation queries, stratified by whether the mask is empty.

    Returns ``(val_refs, test_refs)``; the two are disjoint and keep dataset order.
    """
    refs = list(dataset.test_images)
    has_pos = [bool(load_binary_mask(dataset.path(m)).any()) for m in dataset.test_masks]
    rng = np.random.default_rng(seed)
    chosen = set()
    for flag in (True, False):
        stratum = [r for r, p in zip(refs, has_pos) if p == flag]
        if not stratum:
            continue
        n = int(round(fraction * len(stratum)))
        if flag and n == 0 and len(stratum) > 1:
            n = 1
        n = min(n, len(stratum) - 1) if len(stratum) > 1 else 0
        if n:
            chosen.update(rng.choice(stratum, size=n, replace=False).tolist())
    val = [r for r in refs if r in chosen]
    test = [r for r in refs if r not in chosen]
    return val, test


def predict_maps(model: ReverseDistillation, images: torch.Tensor, batch_size: int = 16) -> list[np.ndarray]:
    was_training = model.training
    model.eval()
    maps = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            xb = model.preprocess(images[i:i + batch_size])
            t, s = model(xb)
            maps += [m.scores for m in anomaly_maps_from_features(
                t, s, tuple(xb.shape[-2:]), model.config.smoothing_sigma, model.config.upsample_mode)]
    model.train(was_training)
    return maps


def _val_f1(model, images, masks, batch_size) -> float:
    if not len(images):
        return 0.0
    maps = predict_maps(model, images, batch_size)
    scores = np.concatenate([m.ravel() for m in maps])
    truth = np.concatenate([m.ravel() for m in masks])
    try:
        return float(optimal_f1_sweep(scores, truth)["f1_max"])
    except DegenerateTruthError:
        return 0.0


def evaluate_model(model: ReverseDistillation, dataset: SceneDataset, refs: Sequence[str] | None = None,
                   batch_size: int = 16) -> tuple[EvalReport, list[np.ndarray]]:
    refs = list(dataset.test_images if refs is None else refs)
    size = model.config.input_size
    maps = predict_maps(model, _load_stack(dataset, refs, size), batch_size)
    return evaluate_maps(maps, _load_masks(dataset, refs, size), refs), maps


# training ----------------------------------------------------------------------

def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def resolved_run_config(model_config: ModelConfig, train_config: TrainConfig, dataset_root) -> dict:
    return {
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "dataset": str(dataset_root),
    }


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: SceneDataset | str | Path,
          out_dir: Path, progress: bool = False) -> RunManifest:
    if not isinstance(dataset, SceneDataset):
        dataset = load_dataset(Path(dataset), train_config.augmentation_tag)
    elif dataset.augmentation_tag != train_config.augmentation_tag:
        raise ValueError(
            f"dataset variant {dataset.augmentation_tag!r} != train config {train_config.augmentation_tag!r}")
    if not dataset.train_images:
        raise TrainingError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    resolved = resolved_run_config(model_config, train_config, dataset.root_path)
    manifest = RunManifest(
        config_hash=config_hash(resolved),
        dataset_root=str(dataset.root_path),
        dataset_variant=dataset.augmentation_tag,
        resolved_config=resolved,
        n_train_images=len(dataset.train_images),
        n_synthesized=len(dataset.synthesized),
    )

    val_refs, test_refs = split_validation(dataset, train_config.val_fraction, train_config.seed)
    if set(val_refs) & set(test_refs):
        raise TrainingError("validation and test references overlap")
    manifest.val_refs, manifest.test_refs = val_refs, test_refs

    size = model_config.input_size
    x_train = _load_stack(dataset, dataset.train_images, size)
    x_val = _load_stack(dataset, val_refs, size)
    m_val = _load_masks(dataset, val_refs, size)

    model_config = copy.deepcopy(model_config)
    model_config.init_seed = train_config.seed
    model = build_model(model_config)
    opt = torch.optim.Adam(model.student_parameters(), lr=train_config.lr, betas=train_config.betas)
    gen = torch.Generator().manual_seed(train_config.seed)
    _seed_everything(train_config.seed)

    best_f1, best_state = -math.inf, None
    n = len(x_train)
    for epoch in range(train_config.max_epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        batches = [perm[i:i + train_config.batch_size] for i in range(0, n, train_config.batch_size)]
        if len(batches) > 1 and len(batches[-1]) == 1:
            batches.pop()  # batch norm cannot train on a single sample
        total, count = 0.0, 0
        for idx in batches:
            xb = model.preprocess(x_train[idx])
            t, s = model(xb)
            loss = distillation_loss(t, s)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        manifest.train_loss.append(total / count)
        f1 = _val_f1(model, x_val, m_val, train_config.eval_batch_size)
        manifest.val_f1.append(f1)
        if f1 > best_f1:  # strict: ties keep the earliest epoch
            best_f1 = f1
            manifest.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if progress:
            log.info("epoch %d loss %.5f val_f1 %.4f", epoch, manifest.train_loss[-1], f1)

    model.load_state_dict(best_state)
    ckpt = out_dir / "checkpoint.pt"
    save_checkpoint(ckpt, model, manifest.best_epoch, best_f1,
                    {"val_refs": val_refs, "test_refs": test_refs, "config_hash": manifest.config_hash})
    manifest.checkpoint_path = str(ckpt)

    if test_refs:
        report, _ = evaluate_model(model, dataset, test_refs, train_config.eval_batch_size)
        manifest.test_report = report.to_dict()
    manifest.wall_clock_s = time.perf_counter() - t_start
    manifest.save(out_dir / "run_manifest.json")
    return manifest


def train_from_config(resolved: dict, out_dir: Path) -> RunManifest:
    """Re-run a training job from a resolved config (e.g. a manifest's ``resolved_config``)."""
    mc = ModelConfig.from_dict(resolved["model"])
    tc = TrainConfig(**resolved["train"])
    return train(mc, tc, resolved["dataset"], out_dir)


# ablation grid -----------------------------------------------------------------

def cell_dirname(method: str, variant: str) -> str:
    return f"{method.replace(' ', '_').replace('/', '').replace('^', '')}__{variant}"


def ablation_grid(dataset_root: Path, out_dir: Path, scale: str = "tiny",
                  model_overrides: dict | None = None, train_overrides: dict | None = None,
                  methods: Iterable[str] = METHODS, variants: Iterable[str] = VARIANTS,
                  report_path: Path | None = None, build_missing: bool = True) -> dict:
    """Train every (method, augmentation variant) cell; failures are recorded per cell.

    Missing synthesized folders are rendered first when ``build_missing`` is set.
    """
    out_dir = Path(out_dir)
    methods, variants = list(methods), list(variants)
    cells: dict = {m: {} for m in methods}
    build_errors = {}
    if build_missing:
        for variant in variants:
            try:
                ensure_variant(Path(dataset_root), variant)
            except Exception as exc:
                build_errors[variant] = f"{type(exc).__name__}: {exc}"
    for method in methods:
        for variant in variants:
            cell_dir = out_dir / cell_dirname(method, variant)
            if variant in build_errors:
                cells[method][variant] = {"error": build_errors[variant]}
                continue
            try:
                mc = method_config(method, scale, **(model_overrides or {}))
                tc = TrainConfig(**{**(train_overrides or {}), "augmentation_tag": variant})
                man = train(mc, tc, dataset_root, cell_dir)
                rep = man.test_report or {}
                cells[method][variant] = {
                    "pixel_f1": rep.get("pixel_f1"),
                    "pixel_auroc": rep.get("pixel_auroc"),
                    "best_epoch": man.best_epoch,
                    "manifest": str(cell_dir / "run_manifest.json"),
                    "backbone": mc.backbone,
                    "use_attention_modules": mc.use_attention_modules,
                }
            except Exception as exc:  # one failing cell must not sink the grid
                log.exception("grid cell %s / %s failed", method, variant)
                cells[method][variant] = {"error": f"{type(exc).__name__}: {exc}"}
    report = {"dataset": str(dataset_root), "scale": scale, "methods": methods, "variants": variants,
              "cells": cells}
    write_json(Path(report_path) if report_path else out_dir / "grid_report.json", report)
    return report
