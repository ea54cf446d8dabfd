"""On-disk scene dataset layout, image/mask I/O and loading.

Layout of a dataset root::

    train/good/*.png        captured normal images
    train/qanv/*.png        query-aligned synthesized views (optional)
    train/inv/*.png         interpolated synthesized views (optional)
    test/*.png              query images
    ground_truth/*_mask.png binary masks paired by stem with test images
    poses.json              relative image path -> {quaternion wxyz, translation xyz}
    manifest.json           split counts, augmentation provenance, intrinsics
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .poses import CameraPose, Intrinsics, load_poses

AugmentationTag = Literal["none", "qanv", "inv", "both"]
VARIANTS: tuple[str, ...] = ("none", "qanv", "inv", "both")
VARIANT_FOLDERS = {
    "none": ("good",),
    "qanv": ("good", "qanv"),
    "inv": ("good", "inv"),
    "both": ("good", "qanv", "inv"),
}
SYNTH_FOLDERS = ("qanv", "inv")
MASK_SUFFIX = "_mask"

# ImageNet statistics; pretrained backbones expect them.
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


class DatasetError(ValueError):
    pass


class MissingMaskError(DatasetError):
    pass


class DimMismatchError(DatasetError):
    pass


class BadManifestError(DatasetError):
    pass


@dataclass
class ImageTensor:
    """RGB image as a float32 C x H x W array in [0, 1]."""

    data: np.ndarray
    source: Literal["captured", "synthesized"] = "captured"
    ref: str | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] != 3 or data.shape[1] <= 0 or data.shape[2] <= 0:
            raise ValueError(f"expected 3 x H x W image, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("image contains non-finite values")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to_uint8(self) -> np.ndarray:
        """H x W x 3 uint8 array."""
        return np.round(np.clip(self.data, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)

    @classmethod
    def from_uint8(cls, arr: np.ndarray, **kw) -> "ImageTensor":
        return cls(arr.transpose(2, 0, 1).astype(np.float32) / 255.0, **kw)


def normalize(data: np.ndarray, mean=NORM_MEAN, std=NORM_STD) -> np.ndarray:
    """Per-channel standardisation of a [0, 1] C x H x W (or N x C x H x W) array."""
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return (data - mean) / std


def _atomic_write_bytes(path: Path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix + ".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj) -> None:
    def _w(tmp):
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
    _atomic_write_bytes(path, _w)


def save_image(path: Path, img: ImageTensor) -> None:
    arr = img.to_uint8()
    _atomic_write_bytes(path, lambda tmp: Image.fromarray(arr, "RGB").save(tmp, format="PNG"))


def load_image(path: Path, source="captured", ref=None) -> ImageTensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return ImageTensor.from_uint8(arr, source=source, ref=ref)


def save_mask(path: Path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    _atomic_write_bytes(path, lambda tmp: Image.fromarray(arr, "L").save(tmp, format="PNG"))


def load_binary_mask(path: Path) -> np.ndarray:
    """Binary H x W uint8 mask: any 8-bit value above 127 becomes 1.

    RGB masks are reduced with the per-pixel channel maximum.
    """
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGB", "RGBA"):
                arr = np.asarray(im.convert("RGB")).max(axis=2)
            else:
                arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable mask file {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def mask_name(test_ref: str) -> str:
    return f"ground_truth/{Path(test_ref).stem}{MASK_SUFFIX}.png"


@dataclass
class SceneDataset:
    root_path: Path
    train_images: list[str]
    test_images: list[str]
    test_masks: list[str]
    augmentation_tag: str = "none"
    synthesized: frozenset[str] = frozenset()
    poses: dict[str, CameraPose] | None = None
    intrinsics: Intrinsics | None = None
    manifest: dict = field(default_factory=dict)

    def path(self, ref: str) -> Path:
        return self.root_path / ref

    def is_synthesized(self, ref: str) -> bool:
        return ref in self.synthesized

    @property
    def captured_train(self) -> list[str]:
        return [r for r in self.train_images if r not in self.synthesized]

    def load(self, ref: str) -> ImageTensor:
        return load_image(self.path(ref), "synthesized" if ref in self.synthesized else "captured", ref)

    def mask_for(self, test_ref: str) -> np.ndarray:
        return load_binary_mask(self.path(self.test_masks[self.test_images.index(test_ref)]))


def _list_pngs(root: Path, sub: str) -> list[str]:
    d = root / sub
    if not d.is_dir():
        return []
    return sorted(f"{sub}/{p.name}" for p in d.iterdir() if p.suffix.lower() == ".png")


def read_manifest(root: Path) -> dict:
    p = Path(root) / "manifest.json"
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def load_dataset(root: Path, variant: str = "none") -> SceneDataset:
    root = Path(root)
    if variant not in VARIANTS:
        raise ValueError(f"unknown augmentation variant {variant!r}; choose from {VARIANTS}")
    if not root.is_dir():
        raise FileNotFoundError(root)
    manifest = read_manifest(root)
    counts = manifest.get("counts", {})

    on_disk = {f"train/{f}": _list_pngs(root, f"train/{f}") for f in ("good",) + SYNTH_FOLDERS}
    on_disk["test"] = _list_pngs(root, "test")
    on_disk["ground_truth"] = _list_pngs(root, "ground_truth")
    for split, n in counts.items():
        if split in on_disk and len(on_disk[split]) != n:
            raise BadManifestError(f"manifest says {n} files in {split}, found {len(on_disk[split])}")

    train, synth = [], set()
    for folder in VARIANT_FOLDERS[variant]:
        refs = on_disk[f"train/{folder}"]
        if folder != "good" and not refs:
            raise BadManifestError(f"variant {variant!r} needs train/{folder}/ but it is empty or missing")
        train.extend(refs)
        if folder in SYNTH_FOLDERS:
            synth.update(refs)

    tests = on_disk["test"]
    masks = []
    test_stems = {Path(t).stem for t in tests}
    for ref in on_disk["ground_truth"]:
        stem = Path(ref).stem
        if not stem.endswith(MASK_SUFFIX) or stem[: -len(MASK_SUFFIX)] not in test_stems:
            raise BadManifestError(f"mask {ref} has no matching test image")
    for ref in tests:
        m = mask_name(ref)
        if not (root / m).exists():
            raise MissingMaskError(f"test image {ref} has no mask {m}")
        if _image_size(root / m) != _image_size(root / ref):
            raise DimMismatchError(
                f"mask {m} is {_image_size(root / m)}, image {ref} is {_image_size(root / ref)}"
            )
        masks.append(m)

    intrinsics = Intrinsics(**manifest["intrinsics"]) if "intrinsics" in manifest else None
    poses = None
    if (root / "poses.json").exists():
        if intrinsics is None:
            if not (train or tests):
                raise BadManifestError("poses.json present but no images to infer intrinsics")
            h, w = _image_size(root / (train or tests)[0])
            intrinsics = Intrinsics.from_fov(w, h)
        poses = load_poses(root / "poses.json", intrinsics)

    return SceneDataset(
        root_path=root,
        train_images=train,
        test_images=tests,
        test_masks=masks,
        augmentation_tag=variant,
        synthesized=frozenset(synth),
        poses=poses,
        intrinsics=intrinsics,
        manifest=manifest,
    )


def anomaly_pixel_stats(dataset: SceneDataset) -> dict:
    """Per-image anomalous-pixel fraction, aggregated over the test split."""
    if not dataset.test_masks:
        raise DatasetError("dataset has no test masks")
    fr = np.array([load_binary_mask(dataset.path(m)).mean() for m in dataset.test_masks])
    return {
        "mean_fraction": float(fr.mean()),
        "std_fraction": float(fr.std()),
        "min_fraction": float(fr.min()),
        "max_fraction": float(fr.max()),
    }
