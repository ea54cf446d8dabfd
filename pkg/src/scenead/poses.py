"""Camera poses, greedy trajectories and interpolated viewpoints.

Convention: ``rotation`` is the world-to-camera rotation as a unit quaternion
(w, x, y, z) with w >= 0, and ``translation`` is the camera centre in world
coordinates (metres). The camera frame is right-handed with x right, y down
and z along the optical axis, so a world point ``p`` maps to
``R @ (p - translation)``. ``poses.json`` stores the equivalent
world-to-camera translation ``t = -R @ C`` (COLMAP style).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

QUAT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if min(self.fx, self.fy) <= 0 or min(self.width, self.height) <= 0:
            raise ValueError(f"degenerate intrinsics: {self}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64)


def canonical_quaternion(q) -> np.ndarray:
    """Normalise and pick the w >= 0 representative of the double cover."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0 or (q[0] == 0 and next((c for c in q[1:] if c != 0), 0) < 0):
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics.from_fov(128, 128))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            q = canonical_quaternion(q)
        elif q[0] < 0:
            q = -q
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.intrinsics == other.intrinsics)

    @property
    def R(self) -> np.ndarray:
        """World-to-camera rotation matrix."""
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    @property
    def t(self) -> np.ndarray:
        """World-to-camera translation."""
        return -self.R @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.R.T

    @classmethod
    def from_matrix(cls, R: np.ndarray, center, intrinsics: Intrinsics) -> "CameraPose":
        x, y, z, w = Rotation.from_matrix(R).as_quat()
        return cls(np.array([w, x, y, z]), np.asarray(center, dtype=np.float64), intrinsics)

    @classmethod
    def look_at(cls, eye, target, intrinsics: Intrinsics, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return cls.from_matrix(R, eye, intrinsics)


def quaternion_angle(q1, q2) -> float:
    """Geodesic rotation angle (radians) between two unit quaternions."""
    d = abs(float(np.dot(q1, q2)))
    return 2.0 * math.acos(min(1.0, d))


def slerp(q0, q1, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    if t == 0.0:
        return q0.copy()
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if t == 1.0:
        return q1.copy()
    d = min(d, 1.0)
    theta = math.acos(d)
    if theta < 1e-10:
        q = (1 - t) * q0 + t * q1
    else:
        s = math.sin(theta)
        q = (math.sin((1 - t) * theta) / s) * q0 + (math.sin(t * theta) / s) * q1
    return q / np.linalg.norm(q)


def interpolate_pose(a: CameraPose, b: CameraPose, t: float) -> CameraPose:
    """Geodesic rotation and linear centre interpolation; t=0 -> a, t=1 -> b."""
    if a.intrinsics != b.intrinsics:
        raise ValueError("poses must share intrinsics to be interpolated")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return CameraPose(a.rotation.copy(), a.translation.copy(), a.intrinsics)
    if t == 1.0:
        return CameraPose(b.rotation.copy(), b.translation.copy(), b.intrinsics)
    q = slerp(a.rotation, b.rotation, t)
    c = (1 - t) * a.translation + t * b.translation
    return CameraPose(q, c, a.intrinsics)


def build_greedy_trajectory(poses: Sequence[CameraPose], start_index: int = 0) -> list[int]:
    """Nearest-neighbour tour over camera centres, lowest index on ties."""
    n = len(poses)
    if n == 0:
        raise ValueError("empty pose set")
    if not 0 <= start_index < n:
        raise IndexError(f"start_index {start_index} out of range for {n} poses")
    centers = np.stack([p.translation for p in poses])
    visited = np.zeros(n, dtype=bool)
    order = [start_index]
    visited[start_index] = True
    cur = start_index
    for _ in range(n - 1):
        d = np.linalg.norm(centers - centers[cur], axis=1)
        d[visited] = np.inf
        cur = int(np.argmin(d))  # argmin returns the first (lowest) index on ties
        visited[cur] = True
        order.append(cur)
    return order


def densify_trajectory(poses: Sequence[CameraPose], trajectory: Sequence[int], k: int = 12) -> list[CameraPose]:
    """Emit k interior poses between each consecutive trajectory pair."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if sorted(trajectory) != list(range(len(poses))):
        raise ValueError("trajectory must be a permutation of the pose indices")
    out = []
    for i, j in zip(trajectory[:-1], trajectory[1:]):
        for step in range(1, k + 1):
            out.append(interpolate_pose(poses[i], poses[j], step / (k + 1)))
    return out


# poses.json I/O ------------------------------------------------------------

def pose_to_record(pose: CameraPose) -> dict:
    return {"quaternion": pose.rotation.tolist(), "translation": pose.t.tolist()}


def pose_from_record(rec: Mapping, intrinsics: Intrinsics) -> CameraPose:
    q = canonical_quaternion(rec["quaternion"])
    w, x, y, z = q
    R = Rotation.from_quat([x, y, z, w]).as_matrix()
    center = -R.T @ np.asarray(rec["translation"], dtype=np.float64)
    return CameraPose(q, center, intrinsics)


def save_poses(path: Path, poses: Mapping[str, CameraPose]) -> None:
    data = {ref: pose_to_record(p) for ref, p in sorted(poses.items())}
    Path(path).write_text(json.dumps(data, indent=1))


def load_poses(path: Path, intrinsics: Intrinsics) -> dict[str, CameraPose]:
    data = json.loads(Path(path).read_text())
    return {ref: pose_from_record(rec, intrinsics) for ref, rec in data.items()}


def ring_poses(
    n: int,
    rng: np.random.Generator,
    intrinsics: Intrinsics,
    radius: float = 6.0,
    elevation_deg: Iterable[float] = (25.0, 55.0),
    radius_jitter: float = 0.1,
    target=(0.0, 0.0, 0.0),
) -> list[CameraPose]:
    """Look-at cameras on a hemisphere ring with random azimuth, height and range."""
    lo, hi = elevation_deg
    out = []
    for _ in range(n):
        az = rng.uniform(0, 2 * math.pi)
        el = math.radians(rng.uniform(lo, hi))
        r = radius * (1 + rng.uniform(-radius_jitter, radius_jitter))
        eye = np.array([r * math.cos(el) * math.cos(az), r * math.cos(el) * math.sin(az), r * math.sin(el)])
        aim = np.asarray(target, dtype=np.float64) + rng.normal(0, 0.15, 3) * np.array([1, 1, 0])
        out.append(CameraPose.look_at(eye, aim, intrinsics))
    return out
