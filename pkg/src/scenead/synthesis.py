"""Novel-view augmentation builders.

INV renders views interpolated along a greedy tour of the captured training
poses; QANV renders the clean scene at poses estimated for each query image.
Both write into ``train/<variant>/`` and record provenance in the manifest.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

from .data import (
    DatasetError,
    ImageTensor,
    SceneDataset,
    read_manifest,
    save_image,
    write_json,
)
from .poses import CameraPose, build_greedy_trajectory, densify_trajectory, load_poses, save_poses
from .render import LocalizerHandle, ProceduralRenderer, RendererHandle, scene_from_dict

log = logging.getLogger(__name__)


class MissingPosesError(DatasetError):
    pass


def _render_all(renderer: RendererHandle, poses: Sequence[CameraPose]) -> list[ImageTensor]:
    if hasattr(renderer, "render_many"):
        imgs = renderer.render_many(poses)
    else:
        imgs = [renderer.render(p) for p in poses]
    for im in imgs:
        im.source = "synthesized"
    return imgs


def renderer_from_manifest(root: Path) -> ProceduralRenderer:
    man = read_manifest(root)
    if "scene" not in man:
        raise DatasetError(f"{root}/manifest.json carries no procedural scene description")
    return ProceduralRenderer(scene_from_dict(man["scene"]))


def _persist(dataset: SceneDataset, folder: str, names: list[str], images, poses, provenance: dict) -> None:
    root = dataset.root_path
    out_dir = root / "train" / folder
    out_dir.mkdir(parents=True, exist_ok=True)
    for old in out_dir.glob("*.png"):
        old.unlink()
    refs = [f"train/{folder}/{n}" for n in names]
    for ref, im in zip(refs, images):
        save_image(root / ref, im)

    poses_path = root / "poses.json"
    intr = dataset.intrinsics or (poses[0].intrinsics if poses else None)
    all_poses = load_poses(poses_path, intr) if poses_path.exists() and intr else {}
    all_poses = {r: p for r, p in all_poses.items() if not r.startswith(f"train/{folder}/")}
    all_poses.update(zip(refs, poses))
    if all_poses:
        save_poses(poses_path, all_poses)

    man = read_manifest(root)
    man.setdefault("counts", {})[f"train/{folder}"] = len(refs)
    man.setdefault("augmentation", {})[folder] = provenance
    write_json(root / "manifest.json", man)


def build_inv_augmentation(
    dataset: SceneDataset,
    renderer: RendererHandle,
    k: int = 12,
    start_index: int = 0,
    write: bool = True,
) -> tuple[list[ImageTensor], list[CameraPose]]:
    refs = dataset.captured_train
    if dataset.poses is None or any(r not in dataset.poses for r in refs):
        raise MissingPosesError("INV needs a pose for every captured training image")
    poses = [dataset.poses[r] for r in refs]
    if not poses:
        return [], []
    tour = build_greedy_trajectory(poses, start_index)
    new_poses = densify_trajectory(poses, tour, k)
    images = _render_all(renderer, new_poses)
    if write:
        names = [f"inv_{i // k:04d}_{i % k:02d}.png" for i in range(len(new_poses))]
        _persist(dataset, "inv", names, images, new_poses, {
            "k": k,
            "start_index": start_index,
            "trajectory": [refs[i] for i in tour],
            "renderer": getattr(renderer, "scene_id", type(renderer).__name__),
            "count": len(images),
        })
    return images, new_poses


def build_qanv_augmentation(
    dataset: SceneDataset,
    renderer: RendererHandle,
    localizer: LocalizerHandle,
    write: bool = True,
) -> tuple[list[ImageTensor], list[CameraPose]]:
    if not dataset.test_images:
        raise DatasetError("QANV needs query images")
    kept_refs, est = [], []
    failures = []
    for ref in dataset.test_images:
        pose = localizer.localize(dataset.load(ref))
        if pose is None:
            failures.append(ref)
            continue
        kept_refs.append(ref)
        est.append(pose)
    if not est:
        log.warning("QANV: every one of %d localizations failed", len(failures))
    images = _render_all(renderer, est) if est else []
    if write:
        names = [f"qanv_{Path(r).stem}.png" for r in kept_refs]
        _persist(dataset, "qanv", names, images, est, {
            "renderer": getattr(renderer, "scene_id", type(renderer).__name__),
            "localizer": localizer.backend_id,
            "count": len(images),
            "failures": len(failures),
            "failed_refs": failures,
        })
    return images, est


def ensure_variant(root: Path, variant: str, k: int = 12, start_index: int = 0) -> None:
    """Build any missing synthesized folder a variant needs, using the manifest scene
    and ground-truth query poses."""
    from .data import SYNTH_FOLDERS, VARIANT_FOLDERS, load_dataset
    from .render import GroundTruthLocalizer

    root = Path(root)
    for folder in VARIANT_FOLDERS[variant]:
        if folder not in SYNTH_FOLDERS or (root / "train" / folder).is_dir():
            continue
        ds = load_dataset(root, "none")
        renderer = renderer_from_manifest(root)
        if folder == "inv":
            build_inv_augmentation(ds, renderer, k, start_index)
        else:
            if ds.poses is None:
                raise MissingPosesError("QANV needs query poses")
            build_qanv_augmentation(ds, renderer, GroundTruthLocalizer(ds.poses))
