"""Procedural cuboid-city renderer, anomaly injection and camera localizers.

The renderer is a small deterministic rasteriser: a checkered ground plane is
ray-cast per pixel, then axis-aligned cuboids are painted far-to-near with
back-face culling, near-plane clipping and Lambertian shading. Each pixel
averages a ``supersample`` x ``supersample`` grid of samples, which keeps the
distant checkerboard from aliasing. Output colours are quantised to 8 bits so
a render survives a PNG round trip unchanged.
"""
from __future__ import annotations

import json
import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .data import ImageTensor, load_image
from .poses import CameraPose, Intrinsics, save_poses

NEAR = 1e-2
DIFF_TOL_U8 = 2  # render-diff tolerance, in 8-bit levels (2/255)

# (axis, sign) for the six faces of a cuboid
_FACES = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]


@dataclass(frozen=True)
class Cuboid:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    color: tuple[float, float, float]

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"cuboid size must be positive, got {self.size}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def face(self, axis: int, sign: int) -> np.ndarray:
        """Four corners of one face, in cyclic order."""
        lo, hi = self.lo, self.hi
        a, b = [i for i in range(3) if i != axis]
        v = hi[axis] if sign > 0 else lo[axis]
        quad = []
        for ua, ub in ((lo[a], lo[b]), (hi[a], lo[b]), (hi[a], hi[b]), (lo[a], hi[b])):
            p = np.empty(3)
            p[axis], p[a], p[b] = v, ua, ub
            quad.append(p)
        return np.array(quad)

    def distance_to(self, point: np.ndarray) -> float:
        d = np.maximum(np.maximum(self.lo - point, 0), point - self.hi)
        return float(np.linalg.norm(d))


@dataclass(frozen=True)
class ProceduralScene:
    primitives: tuple[Cuboid, ...] = ()
    ground_extent: float = 4.0
    tile: float = 0.5
    ground_colors: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.55, 0.55, 0.52), (0.42, 0.43, 0.45))
    light_dir: tuple[float, float, float] = (-0.4, -0.3, -1.0)
    ambient: float = 0.35
    background: tuple[float, float, float] = (0.75, 0.82, 0.90)
    seed: int | None = None
    scene_id: str = "procedural"
    supersample: int = 3

    def __post_init__(self):
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")

    @property
    def diameter(self) -> float:
        return 2 * math.sqrt(2) * self.ground_extent


def random_city(seed: int, n_buildings: int = 14, extent: float = 3.0) -> ProceduralScene:
    """A reproducible toy city of cuboid buildings on a checkered ground."""
    rng = np.random.default_rng(seed)
    prims: list[Cuboid] = []
    tries = 0
    while len(prims) < n_buildings and tries < 1000:
        tries += 1
        sx, sy = rng.uniform(0.35, 0.9, 2)
        sz = rng.uniform(0.3, 1.6)
        cx, cy = rng.uniform(-extent + 0.5, extent - 0.5, 2)
        cand = Cuboid((float(cx), float(cy), float(sz / 2)), (float(sx), float(sy), float(sz)),
                      tuple(float(c) for c in rng.uniform(0.15, 0.95, 3)))
        # keep a gap between footprints so painter ordering stays valid
        if any(np.all(np.abs(np.asarray(cand.center[:2]) - np.asarray(p.center[:2]))
                      < (np.asarray(cand.size[:2]) + np.asarray(p.size[:2])) / 2 + 0.15) for p in prims):
            continue
        prims.append(cand)
    return ProceduralScene(primitives=tuple(prims), ground_extent=extent + 1.0, seed=seed,
                           scene_id=f"city-{seed}")


# rasterisation -------------------------------------------------------------

def _clip_near(poly: np.ndarray, near: float = NEAR) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-frame polygon against z >= near."""
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cin, nin = cur[2] >= near, nxt[2] >= near
        if cin:
            out.append(cur)
        if cin != nin:
            s = (near - cur[2]) / (nxt[2] - cur[2])
            out.append(cur + s * (nxt - cur))
    return np.array(out) if out else np.empty((0, 3))


def _fill_convex(poly2d: np.ndarray, h: int, w: int) -> tuple[slice, slice, np.ndarray] | None:
    """Pixels whose centres fall inside a convex polygon (given in pixel units)."""
    if len(poly2d) < 3:
        return None
    x0 = max(int(math.floor(poly2d[:, 0].min() - 0.5)), 0)
    x1 = min(int(math.ceil(poly2d[:, 0].max() + 0.5)), w)
    y0 = max(int(math.floor(poly2d[:, 1].min() - 0.5)), 0)
    y1 = min(int(math.ceil(poly2d[:, 1].max() + 0.5)), h)
    if x0 >= x1 or y0 >= y1:
        return None
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)
    area2 = np.sum(poly2d[:, 0] * np.roll(poly2d[:, 1], -1) - np.roll(poly2d[:, 0], -1) * poly2d[:, 1])
    if abs(area2) < 1e-12:
        return None
    sgn = 1.0 if area2 > 0 else -1.0
    inside = np.ones(px.shape, dtype=bool)
    for i in range(len(poly2d)):
        ax, ay = poly2d[i]
        bx, by = poly2d[(i + 1) % len(poly2d)]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside &= sgn * cross >= 0
    return slice(y0, y1), slice(x0, x1), inside


def _shade(albedo, normal, light_dir, ambient) -> np.ndarray:
    L = -np.asarray(light_dir, dtype=np.float64)
    L /= np.linalg.norm(L)
    lam = max(0.0, float(np.dot(normal, L)))
    return np.asarray(albedo, dtype=np.float64) * (ambient + (1 - ambient) * lam)


def _quantize(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def _render_float(scene: ProceduralScene, K: Intrinsics, R: np.ndarray, C: np.ndarray) -> np.ndarray:
    h, w = K.height, K.width
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = np.clip(np.asarray(scene.background, dtype=np.float64), 0, 1)

    if scene.ground_extent > 0:
        u = (np.arange(w) + 0.5 - K.cx) / K.fx
        v = (np.arange(h) + 0.5 - K.cy) / K.fy
        uu, vv = np.meshgrid(u, v)
        dirs = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ R  # camera -> world directions
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -C[2] / dz
        hit = (dz < 0) & (s > 0) if C[2] > 0 else np.zeros_like(dz, dtype=bool)
        gx = C[0] + s * dirs[..., 0]
        gy = C[1] + s * dirs[..., 1]
        with np.errstate(invalid="ignore"):
            hit &= (np.abs(gx) <= scene.ground_extent) & (np.abs(gy) <= scene.ground_extent)
        parity = (np.floor(gx[hit] / scene.tile) + np.floor(gy[hit] / scene.tile)).astype(np.int64) % 2
        cols = np.stack([np.clip(_shade(c, np.array([0.0, 0.0, 1.0]), scene.light_dir, scene.ambient), 0, 1)
                         for c in scene.ground_colors])
        img[hit] = cols[parity]

    order = sorted(range(len(scene.primitives)),
                   key=lambda i: (-scene.primitives[i].distance_to(C), i))
    for i in order:
        cub = scene.primitives[i]
        for axis, sign in _FACES:
            normal = np.zeros(3)
            normal[axis] = sign
            quad = cub.face(axis, sign)
            if np.dot(normal, C - quad[0]) <= 0:
                continue  # back-facing (or camera in the face plane)
            cam = (quad - C) @ R.T
            cam = _clip_near(cam)
            if len(cam) < 3:
                continue
            pix = np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], axis=1)
            filled = _fill_convex(pix, h, w)
            if filled is None:
                continue
            ys, xs, inside = filled
            img[ys, xs][inside] = np.clip(_shade(cub.color, normal, scene.light_dir, scene.ambient), 0, 1)
    return img


def render_procedural_u8(scene: ProceduralScene, pose: CameraPose) -> np.ndarray:
    """Render to an H x W x 3 uint8 array.

    Each pixel averages ``scene.supersample``^2 sub-pixel samples, which keeps the
    far ground texture from aliasing into noise.
    """
    K, ss = pose.intrinsics, scene.supersample
    K_hi = Intrinsics(K.fx * ss, K.fy * ss, K.cx * ss, K.cy * ss, K.width * ss, K.height * ss)
    img = _render_float(scene, K_hi, pose.R, pose.translation)
    if ss > 1:
        img = img.reshape(K.height, ss, K.width, ss, 3).mean(axis=(1, 3))
    return _quantize(img)


def render_procedural(scene: ProceduralScene, pose: CameraPose) -> ImageTensor:
    return ImageTensor.from_uint8(render_procedural_u8(scene, pose), source="synthesized")


class RendererHandle(Protocol):
    scene_id: str
    deterministic: bool
    has_ground_truth_geometry: bool

    def render(self, pose: CameraPose) -> ImageTensor: ...


@dataclass
class ProceduralRenderer:
    scene: ProceduralScene
    deterministic: bool = True
    has_ground_truth_geometry: bool = True

    @property
    def scene_id(self) -> str:
        return self.scene.scene_id

    def render(self, pose: CameraPose) -> ImageTensor:
        return render_procedural(self.scene, pose)

    def render_many(self, poses: Sequence[CameraPose]) -> list[ImageTensor]:
        return [self.render(p) for p in poses]


@dataclass
class ExternalRenderer:
    """Delegate rendering to an external program (e.g. a NeRF).

    The command is run as ``command REQUEST_DIR``; it must read
    ``REQUEST_DIR/poses.json`` and write one ``<name>.png`` per entry.
    """

    command: Sequence[str]
    scene_id: str = "external"
    deterministic: bool = False
    has_ground_truth_geometry: bool = False

    def render_many(self, poses: Sequence[CameraPose]) -> list[ImageTensor]:
        work = Path(tempfile.mkdtemp(prefix="scenead-render-"))
        try:
            names = [f"{i:06d}.png" for i in range(len(poses))]
            save_poses(work / "poses.json", dict(zip(names, poses)))
            if poses:
                (work / "intrinsics.json").write_text(json.dumps(poses[0].intrinsics.to_dict()))
            subprocess.run([*self.command, str(work)], check=True)
            return [load_image(work / n, source="synthesized") for n in names]
        finally:
            shutil.rmtree(work, ignore_errors=True)

    def render(self, pose: CameraPose) -> ImageTensor:
        return self.render_many([pose])[0]


# anomalies -----------------------------------------------------------------

def render_diff_mask(a: np.ndarray, b: np.ndarray, tol: int = DIFF_TOL_U8) -> np.ndarray:
    """1 where two uint8 renders differ by more than ``tol`` levels in any channel."""
    d = np.abs(a.astype(np.int16) - b.astype(np.int16)).max(axis=-1)
    return (d > tol).astype(np.uint8)


def inject_anomaly(scene: ProceduralScene, kind: str, params: Mapping) -> tuple[ProceduralScene, Callable]:
    """Mutate a scene and return it with a per-pose ground-truth mask oracle.

    kinds: ``add_primitive`` (params: center, size, color),
    ``remove_primitive`` (params: index), ``recolor_primitive`` (params: index, color).
    """
    prims = list(scene.primitives)
    if kind == "add_primitive":
        prims.append(Cuboid(tuple(params["center"]), tuple(params["size"]), tuple(params["color"])))
    elif kind in ("remove_primitive", "recolor_primitive"):
        idx = params["index"]
        if not 0 <= idx < len(prims):
            raise IndexError(f"no primitive {idx} to {kind.split('_')[0]}")
        if kind == "remove_primitive":
            prims.pop(idx)
        else:
            prims[idx] = replace(prims[idx], color=tuple(params["color"]))
    else:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    mutated = replace(scene, primitives=tuple(prims), scene_id=f"{scene.scene_id}+{kind}")

    def mask_at(pose: CameraPose) -> np.ndarray:
        return render_diff_mask(render_procedural_u8(scene, pose), render_procedural_u8(mutated, pose))

    return mutated, mask_at


# localizers ----------------------------------------------------------------

class LocalizerHandle(Protocol):
    backend_id: str

    def localize(self, query: ImageTensor) -> CameraPose | None: ...


@dataclass
class GroundTruthLocalizer:
    """Looks up the true pose of a query by its dataset reference."""

    poses: Mapping[str, CameraPose]
    backend_id: str = "gt"

    def localize(self, query: ImageTensor) -> CameraPose | None:
        return self.poses.get(query.ref)


@dataclass
class NoisyLocalizer:
    """Ground-truth pose perturbed by a random rotation and centre offset.

    Defaults: 1 degree rotation and 1% of the scene diameter translation (std).
    """

    poses: Mapping[str, CameraPose]
    scene_diameter: float
    rot_deg: float = 1.0
    trans_frac: float = 0.01
    seed: int = 0
    backend_id: str = "noisy"
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def localize(self, query: ImageTensor) -> CameraPose | None:
        pose = self.poses.get(query.ref)
        if pose is None:
            return None
        axis = self._rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(self._rng.normal(0, self.rot_deg))
        dR = Rotation.from_rotvec(axis * angle).as_matrix()
        R = dR @ pose.R
        c = pose.translation + self._rng.normal(0, self.trans_frac * self.scene_diameter, 3)
        return CameraPose.from_matrix(R, c, pose.intrinsics)


@dataclass
class ExternalLocalizer:
    """Reads poses produced by an external tool (e.g. hloc) from a poses.json."""

    poses_file: Path
    intrinsics: Intrinsics
    backend_id: str = "external"

    def __post_init__(self):
        from .poses import load_poses
        self._poses = load_poses(Path(self.poses_file), self.intrinsics)

    def localize(self, query: ImageTensor) -> CameraPose | None:
        return self._poses.get(query.ref)


def scene_to_dict(scene: ProceduralScene) -> dict:
    return {
        "primitives": [{"center": list(p.center), "size": list(p.size), "color": list(p.color)}
                       for p in scene.primitives],
        "ground_extent": scene.ground_extent,
        "tile": scene.tile,
        "ground_colors": [list(c) for c in scene.ground_colors],
        "light_dir": list(scene.light_dir),
        "ambient": scene.ambient,
        "background": list(scene.background),
        "seed": scene.seed,
        "scene_id": scene.scene_id,
        "supersample": scene.supersample,
    }


def scene_from_dict(d: Mapping) -> ProceduralScene:
    return ProceduralScene(
        primitives=tuple(Cuboid(tuple(p["center"]), tuple(p["size"]), tuple(p["color"])) for p in d["primitives"]),
        ground_extent=d["ground_extent"],
        tile=d["tile"],
        ground_colors=tuple(tuple(c) for c in d["ground_colors"]),
        light_dir=tuple(d["light_dir"]),
        ambient=d["ambient"],
        background=tuple(d["background"]),
        seed=d.get("seed"),
        scene_id=d.get("scene_id", "procedural"),
        supersample=d.get("supersample", 1),
    )


__all__ = [
    "Cuboid", "ProceduralScene", "random_city", "render_procedural", "render_procedural_u8",
    "ProceduralRenderer", "ExternalRenderer", "RendererHandle", "inject_anomaly", "render_diff_mask",
    "GroundTruthLocalizer", "NoisyLocalizer", "ExternalLocalizer", "LocalizerHandle",
    "scene_to_dict", "scene_from_dict"
]
