"""Synthetic multi-view scene dataset generator."""
from __future__ import annotations

import shutil
import warnings
from pathlib import Path

import numpy as np

from .data import ImageTensor, save_image, save_mask, write_json
from .poses import CameraPose, Intrinsics, ring_poses, save_poses
from .render import (
    ProceduralScene,
    inject_anomaly,
    random_city,
    render_procedural_u8,
    scene_to_dict,
)

# loose bracket around the real-capture range of anomalous-pixel fractions
FRACTION_RANGE = (0.0003, 0.05)
# table-top style cameras: looking down on the city, mostly without horizon
ELEVATION_DEG = (40.0, 70.0)
RADIUS = 6.0


def default_anomalies(scene: ProceduralScene, rng: np.random.Generator, n_add: int = 2) -> list[dict]:
    """Two added objects, one removed and one recoloured building."""
    specs = []
    ext = scene.ground_extent - 1.5
    prims = scene.primitives
    for _ in range(n_add):
        for _ in range(200):
            xy = rng.uniform(-ext, ext, 2)
            size = rng.uniform(0.25, 0.4, 3)
            clear = all(np.all(np.abs(xy - np.asarray(p.center[:2])) > (size[:2] + np.asarray(p.size[:2])) / 2 + 0.1)
                        for p in prims)
            if clear:
                break
        specs.append({"kind": "add_primitive", "params": {
            "center": [float(xy[0]), float(xy[1]), float(size[2] / 2)],
            "size": [float(s) for s in size],
            "color": [float(c) for c in rng.uniform(0.1, 1.0, 3)],
        }})
    volumes = [np.prod(p.size) for p in prims]
    order = np.argsort(volumes)
    specs.append({"kind": "remove_primitive", "params": {"index": int(order[0])}})
    target = int(order[1])
    old = np.asarray(prims[target].color)
    specs.append({"kind": "recolor_primitive", "params": {
        "index": target, "color": [float(c) for c in np.clip(1.0 - old, 0.05, 0.95)]}})
    return specs


def _anomaly_site(scene: ProceduralScene, spec: dict) -> np.ndarray:
    if spec["kind"] == "add_primitive":
        return np.asarray(spec["params"]["center"], dtype=np.float64)
    return np.asarray(scene.primitives[spec["params"]["index"]].center, dtype=np.float64)


def make_fixture(
    root: Path,
    seed: int = 7,
    n_train_poses: int = 64,
    n_query_poses: int = 32,
    anomaly_spec: list[dict] | None = None,
    image_size: int = 128,
    overwrite: bool = True,
    elevation_deg: tuple[float, float] = ELEVATION_DEG,
    radius: float = RADIUS,
) -> dict:
    """Render a clean training set and anomalous queries with render-diff masks.

    Returns fixture statistics (mask fractions, warnings).
    """
    if n_train_poses < 1 or n_query_poses < 1:
        raise ValueError("need at least one train and one query pose")
    root = Path(root)
    if root.exists() and overwrite:
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    scene = random_city(seed)
    K = Intrinsics.from_fov(image_size, image_size, 60.0)
    anomalies = anomaly_spec if anomaly_spec is not None else default_anomalies(scene, rng)
    mutated = [inject_anomaly(scene, a["kind"], a["params"]) for a in anomalies]

    poses: dict[str, CameraPose] = {}
    # training cameras aim at random points of the city so their framing covers the queries'
    aim_extent = scene.ground_extent / 2
    for i in range(n_train_poses):
        aim = rng.uniform(-aim_extent, aim_extent, 2)
        pose = ring_poses(1, rng, K, radius, elevation_deg, target=(aim[0], aim[1], 0.0))[0]
        ref = f"train/good/{i:04d}.png"
        save_image(root / ref, ImageTensor.from_uint8(render_procedural_u8(scene, pose)))
        poses[ref] = pose

    fractions, query_anomaly = [], []
    lo, hi = FRACTION_RANGE
    for i in range(n_query_poses):
        a_idx = i % len(anomalies)
        site = _anomaly_site(scene, anomalies[a_idx])
        mut_scene, mask_at = mutated[a_idx]
        for _ in range(20):
            pose = ring_poses(1, rng, K, radius, elevation_deg, target=(site[0], site[1], 0.0))[0]
            mask = mask_at(pose)
            if lo <= mask.mean() <= hi:
                break
        ref = f"test/{i:04d}.png"
        save_image(root / ref, ImageTensor.from_uint8(render_procedural_u8(mut_scene, pose)))
        save_mask(root / f"ground_truth/{i:04d}_mask.png", mask)
        poses[ref] = pose
        fractions.append(float(mask.mean()))
        query_anomaly.append(a_idx)

    save_poses(root / "poses.json", poses)
    fr = np.asarray(fractions)
    out_of_range = int(np.sum((fr < lo) | (fr > hi)))
    if out_of_range:
        warnings.warn(f"{out_of_range} fixture masks have anomalous fractions outside {FRACTION_RANGE}")
    manifest = {
        "counts": {"train/good": n_train_poses, "test": n_query_poses, "ground_truth": n_query_poses},
        "intrinsics": K.to_dict(),
        "image_size": [image_size, image_size],
        "renderer": scene.scene_id,
        "localizer": None,
        "seed": seed,
        "elevation_deg": list(elevation_deg),
        "radius": radius,
        "scene": scene_to_dict(scene),
        "anomalies": anomalies,
        "query_anomaly": query_anomaly,
        "augmentation": {},
    }
    write_json(root / "manifest.json", manifest)
    return {
        "mean_fraction": float(fr.mean()),
        "min_fraction": float(fr.min()),
        "max_fraction": float(fr.max()),
        "out_of_range": out_of_range,
    }


__all__ = ["make_fixture", "default_anomalies", "FRACTION_RANGE"]
