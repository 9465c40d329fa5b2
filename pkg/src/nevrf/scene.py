"""Cameras, rays, multi-view frames, and the on-disk dataset container.

Conventions used everywhere downstream:
  - world-to-camera extrinsics, OpenCV axes (+x right, +y down, +z forward);
  - pinhole intrinsics K = [[fx,0,cx],[0,fy,cy],[0,0,1]] in pixels;
  - pixel centers sit at integer coordinates + 0.5, so the continuous
    coordinate of pixel (i, j) is (i + 0.5, j + 0.5) and a projection p is
    inside the image iff 0 <= p < (W, H).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import BehindCameraError, DegenerateViewError, FormatError, ShapeError

# Minimum camera-frame depth before a point counts as behind the camera.
DEPTH_EPS = 1e-8


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics, rigid world-to-camera transform, image size."""

    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (4, 4) world-to-camera
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.extrinsics, dtype=np.float64)
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise ShapeError(f"camera matrices have shapes {K.shape}, {T.shape}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        R = T[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("extrinsics rotation block is not orthonormal")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("extrinsics last row must be [0,0,0,1]")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        K.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """World-space unit vector along the optical (+z) axis."""
        return self.rotation[2]


@dataclass(frozen=True)
class Ray:
    """World-space ray with a sampling interval."""

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,) unit
    near: float = 0.0
    far: float = 1e6

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,):
            raise ShapeError("ray origin/direction must be 3-vectors")
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.near < self.far):
            raise ValueError("require 0 <= near < far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class View(NamedTuple):
    camera: Camera
    image: np.ndarray  # (H, W, 3) float in [0, 1]


@dataclass(frozen=True)
class MultiViewFrame:
    """All calibrated views of one time instance."""

    time_index: int
    views: tuple

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("a frame needs at least 2 views")
        for cam, img in self.views:
            if img.shape != (cam.height, cam.width, 3):
                raise ShapeError(
                    f"image shape {img.shape} does not match camera "
                    f"{cam.height}x{cam.width}"
                )
        object.__setattr__(self, "views", tuple(View(c, i) for c, i in self.views))

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def cameras(self) -> list:
        return [v.camera for v in self.views]

    @property
    def images(self) -> list:
        return [v.image for v in self.views]

    def image_nbytes(self) -> int:
        return sum(v.image.nbytes for v in self.views)


@dataclass(frozen=True)
class SequenceGroup:
    """A consecutive chunk of frames processed as one sequential unit."""

    frames: tuple
    group_start: int
    group_end: int

    def __post_init__(self):
        times = [f.time_index for f in self.frames]
        if times != list(range(self.group_start, self.group_end + 1)):
            raise ValueError("group frames must be consecutive in time")
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# Projection / ray generation
# ---------------------------------------------------------------------------


def project_point(camera: Camera, x: np.ndarray) -> tuple:
    """Project a world point; returns (pixel (2,), depth).

    Raises BehindCameraError when the camera-frame depth is <= DEPTH_EPS.
    The returned pixel may lie outside the image; callers check bounds.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = camera.rotation @ x + camera.translation
    depth = xc[2]
    if depth <= DEPTH_EPS:
        raise BehindCameraError(f"depth {depth:.3g} <= {DEPTH_EPS}")
    K = camera.intrinsics
    px = K[0, 0] * xc[0] / depth + K[0, 2]
    py = K[1, 1] * xc[1] / depth + K[1, 2]
    return np.array([px, py]), float(depth)


def project_points(camera: Camera, pts: np.ndarray):
    """Vectorized projection. Returns (pixels (N,2), depths (N,), in_front (N,)).

    Behind-camera points get in_front=False instead of an exception; their
    pixel values are unusable.
    """
    pts = np.asarray(pts)
    xc = pts @ camera.rotation.T + camera.translation
    depths = xc[:, 2]
    in_front = depths > DEPTH_EPS
    safe = np.where(in_front, depths, 1.0)
    K = camera.intrinsics
    pixels = np.stack(
        [K[0, 0] * xc[:, 0] / safe + K[0, 2], K[1, 1] * xc[:, 1] / safe + K[1, 2]],
        axis=-1,
    )
    return pixels, depths, in_front


def in_image_bounds(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    p = np.asarray(pixels)
    return (
        (p[..., 0] >= 0.0)
        & (p[..., 0] < camera.width)
        & (p[..., 1] >= 0.0)
        & (p[..., 1] < camera.height)
    )


def generate_ray(camera: Camera, pixel, near: float = 0.0, far: float = 1e6) -> Ray:
    """Ray from the camera center through a continuous pixel coordinate."""
    px, py = float(pixel[0]), float(pixel[1])
    K = camera.intrinsics
    d_cam = np.array([(px - K[0, 2]) / K[0, 0], (py - K[1, 2]) / K[1, 1], 1.0])
    d_world = camera.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=camera.center, direction=d_world, near=near, far=far)


def generate_rays(camera: Camera, pixels: np.ndarray):
    """Vectorized ray generation. Returns (origins (N,3), dirs (N,3) unit)."""
    p = np.asarray(pixels, dtype=np.float64)
    K = camera.intrinsics
    d_cam = np.stack(
        [
            (p[:, 0] - K[0, 2]) / K[0, 0],
            (p[:, 1] - K[1, 2]) / K[1, 1],
            np.ones(len(p)),
        ],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def angular_difference(ray: Ray, point: np.ndarray, camera: Camera) -> float:
    """Angle in [0, pi] between the ray direction and camera-center -> point."""
    v = np.asarray(point, dtype=np.float64) - camera.center
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateViewError("camera center coincides with the point")
    cosang = np.clip(np.dot(ray.direction, v / n), -1.0, 1.0)
    return float(np.arccos(cosang))


def angular_differences(ray_dirs: np.ndarray, points: np.ndarray, centers: np.ndarray):
    """Angles between per-point ray directions and every camera center.

    ray_dirs (N,3) unit, points (N,3), centers (V,3) -> (N, V) angles;
    degenerate (coincident) pairs get +inf so they sort last.
    """
    v = points[:, None, :] - centers[None, :, :]  # (N, V, 3)
    n = np.linalg.norm(v, axis=-1)
    degenerate = n < 1e-12
    n_safe = np.where(degenerate, 1.0, n)
    cosang = np.einsum("nd,nvd->nv", ray_dirs, v) / n_safe
    ang = np.arccos(np.clip(cosang, -1.0, 1.0))
    return np.where(degenerate, np.inf, ang)


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def save_image(path: str, image: np.ndarray) -> None:
    """Write a float [0,1] HxWx3 image as 8-bit PNG or binary PPM (by suffix)."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if path.endswith(".ppm"):
        h, w = u8.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(u8.tobytes())
    else:
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    """Load PNG or binary PPM to float32 HxWx3 scaled to [0, 1]."""
    if path.endswith(".ppm"):
        with open(path, "rb") as f:
            data = f.read()
        fields = []
        pos = 0
        while len(fields) < 4:
            while pos < len(data) and data[pos : pos + 1].isspace():
                pos += 1
            if data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        if fields[0] != b"P6":
            raise FormatError(f"not a binary PPM: {path}")
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        pos += 1  # single whitespace after maxval
        raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
        return (raw.reshape(h, w, 3).astype(np.float32)) / float(maxval)
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Parsed manifest; images stay on disk until a frame is loaded."""

    root: str
    bbox_min: np.ndarray  # (3,)
    bbox_max: np.ndarray  # (3,)
    cameras: list  # list[Camera], shared by all frames
    frame_paths: list  # frame_paths[t][v] relative to root

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def write_manifest(
    root: str,
    bbox_min,
    bbox_max,
    cameras: Sequence[Camera],
    frame_paths: Sequence[Sequence[str]],
) -> str:
    doc = {
        "bbox": [float(v) for v in list(bbox_min) + list(bbox_max)],
        "cameras": [
            {
                "K": np.asarray(c.intrinsics, dtype=np.float64).ravel().tolist(),
                "T": np.asarray(c.extrinsics, dtype=np.float64).ravel().tolist(),
                "width": c.width,
                "height": c.height,
            }
            for c in cameras
        ],
        "frames": [list(paths) for paths in frame_paths],
    }
    path = os.path.join(root, "manifest.json")
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    return path


def load_manifest(path: str) -> Dataset:
    with open(path) as f:
        doc = json.load(f)
    try:
        bbox = np.asarray(doc["bbox"], dtype=np.float64)
        if bbox.shape != (6,):
            raise FormatError("manifest bbox must hold 6 floats")
        cams = [
            Camera(
                intrinsics=np.asarray(c["K"], dtype=np.float64).reshape(3, 3),
                extrinsics=np.asarray(c["T"], dtype=np.float64).reshape(4, 4),
                width=int(c["width"]),
                height=int(c["height"]),
            )
            for c in doc["cameras"]
        ]
        frames = [list(map(str, paths)) for paths in doc["frames"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad manifest: {e}") from e
    for paths in frames:
        if len(paths) != len(cams):
            raise FormatError("every frame must list one image per camera")
    return Dataset(
        root=os.path.dirname(os.path.abspath(path)),
        bbox_min=bbox[:3],
        bbox_max=bbox[3:],
        cameras=cams,
        frame_paths=frames,
    )


def load_frame(ds: Dataset, t: int) -> MultiViewFrame:
    views = []
    for cam, rel in zip(ds.cameras, ds.frame_paths[t]):
        img = load_image(os.path.join(ds.root, rel))
        views.append(View(cam, img))
    return MultiViewFrame(time_index=t, views=tuple(views))


def iter_groups(ds: Dataset, group_size: int = 20) -> Iterator[SequenceGroup]:
    """Stream the dataset as consecutive groups; one group resident at a time."""
    for start in range(0, ds.n_frames, group_size):
        end = min(start + group_size, ds.n_frames)
        frames = tuple(load_frame(ds, t) for t in range(start, end))
        yield SequenceGroup(frames=frames, group_start=start, group_end=end - 1)
