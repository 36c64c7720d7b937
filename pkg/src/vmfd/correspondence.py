"""Point-to-pixel pairing through ideal pinhole cameras."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "CameraModel",
    "PointPixelPair",
    "PointPixelPairs",
    "backproject",
    "look_at_extrinsics",
    "project_points",
    "project_scene",
    "sensor_distance",
]


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.extrinsics, dtype=np.float64)
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise ValueError(f"intrinsics must be 3x3 and extrinsics 4x4; got {K.shape}, {T.shape}")
        if K[2, 2] != 1.0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must have K[2,2] = 1 and positive focal lengths")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    def check_rigid(self, atol: float = 1e-6) -> None:
        """Raise if the extrinsics are not an invertible rigid transform."""
        T = self.extrinsics
        if abs(np.linalg.det(T)) < 1e-12:
            raise np.linalg.LinAlgError("extrinsics are not invertible")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=atol) or abs(np.linalg.det(R) - 1.0) > atol:
            raise ValueError("extrinsics rotation block must be orthonormal with determinant +1")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("extrinsics bottom row must be (0, 0, 0, 1)")


class PointPixelPair(NamedTuple):
    point_index: int
    pixel_uv: tuple[int, int]
    weak_label: int
    distance: float


@dataclass
class PointPixelPairs:
    """Column storage for matched pairs, ordered by point index."""

    point_index: np.ndarray
    pixel_uv: np.ndarray        # (M, 2) integer (u = column, v = row)
    weak_label: np.ndarray
    distance: np.ndarray        # LiDAR-frame range, meters
    depth: np.ndarray           # camera-frame z, meters
    camera_index: np.ndarray

    def __len__(self) -> int:
        return self.point_index.shape[0]

    def __getitem__(self, i: int) -> PointPixelPair:
        u, v = self.pixel_uv[i]
        return PointPixelPair(int(self.point_index[i]), (int(u), int(v)),
                              int(self.weak_label[i]), float(self.distance[i]))

    def subset(self, idx) -> PointPixelPairs:
        return PointPixelPairs(self.point_index[idx], self.pixel_uv[idx], self.weak_label[idx],
                               self.distance[idx], self.depth[idx], self.camera_index[idx])

    @classmethod
    def concatenate(cls, parts: list[PointPixelPairs]) -> PointPixelPairs:
        if not parts:
            return _empty_pairs()
        merged = cls(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("point_index", "pixel_uv", "weak_label", "distance",
                                 "depth", "camera_index")))
        return merged.subset(np.argsort(merged.point_index, kind="stable"))


def _empty_pairs() -> PointPixelPairs:
    return PointPixelPairs(np.zeros(0, np.int64), np.zeros((0, 2), np.int64), np.zeros(0, np.int64),
                           np.zeros(0), np.zeros(0), np.zeros(0, np.int64))


def sensor_distance(point) -> float | np.ndarray:
    """Euclidean range from the LiDAR origin; accepts one point or an (N, 3) array."""
    return np.linalg.norm(np.asarray(point, dtype=np.float64), axis=-1)


def _to_camera(points: np.ndarray, camera: CameraModel) -> np.ndarray:
    return points @ camera.rotation.T + camera.translation


def project_points(points, camera: CameraModel, labels_image, camera_index: int = 0) -> PointPixelPairs:
    """Pair each visible point with its nearest pixel and that pixel's weak label."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3); got {points.shape}")
    labels_image = np.asarray(labels_image)
    if labels_image.shape != (camera.height, camera.width):
        raise ValueError(f"labels_image must be ({camera.height}, {camera.width}); got {labels_image.shape}")
    camera.check_rigid()

    cam = _to_camera(points, camera)
    z = cam[:, 2]
    in_front = z > 0
    uvw = cam[in_front] @ camera.intrinsics.T
    uv = np.floor(uvw[:, :2] / uvw[:, 2:3] + 0.5)
    inside = ((uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
              & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height))
    idx = np.flatnonzero(in_front)[inside]
    uv = uv[inside].astype(np.int64)
    return PointPixelPairs(
        point_index=idx.astype(np.int64),
        pixel_uv=uv,
        weak_label=labels_image[uv[:, 1], uv[:, 0]].astype(np.int64),
        distance=sensor_distance(points[idx]),
        depth=z[idx],
        camera_index=np.full(idx.shape[0], camera_index, dtype=np.int64),
    )


def project_scene(points, cameras, label_images) -> PointPixelPairs:
    """Project through several cameras; a point seen by more than one keeps the first."""
    points = np.asarray(points, dtype=np.float64)
    taken = np.zeros(points.shape[0], dtype=bool)
    parts = []
    for c, (camera, labels) in enumerate(zip(cameras, label_images)):
        pairs = project_points(points, camera, labels, camera_index=c)
        keep = ~taken[pairs.point_index]
        pairs = pairs.subset(keep)
        taken[pairs.point_index] = True
        parts.append(pairs)
    return PointPixelPairs.concatenate(parts)


def backproject(pixel_uv, depth, camera: CameraModel) -> np.ndarray:
    """Lift pixels at camera-frame depth back to LiDAR-frame points."""
    uv = np.atleast_2d(np.asarray(pixel_uv, dtype=np.float64))
    depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    K = camera.intrinsics
    x = (uv[:, 0] - K[0, 2] - K[0, 1] * (uv[:, 1] - K[1, 2]) / K[1, 1]) * depth / K[0, 0]
    y = (uv[:, 1] - K[1, 2]) * depth / K[1, 1]
    cam = np.column_stack([x, y, depth])
    return (cam - camera.translation) @ camera.rotation


def look_at_extrinsics(yaw: float, height: float = 0.0) -> np.ndarray:
    """LiDAR-to-camera transform for a camera at the origin looking along ``yaw`` in the x-y plane.

    LiDAR frame is x forward, y left, z up; camera frame is x right, y down, z forward.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    T = np.eye(4)
    T[:3, :3] = np.stack([right, down, forward])
    T[:3, 3] = -T[:3, :3] @ np.array([0.0, 0.0, height])
    return T
