"""Synthetic dynamic multi-view scenes with an analytic ground-truth renderer.

This module is the external oracle for the pipeline tests: exact
ray-primitive intersections, flat view-independent albedo shading, and exact
point-in-primitive occupancy. It deliberately shares no rendering code with
the volume renderer; even ray generation is inlined here so the two paths
only agree through the documented camera conventions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError
from .scene import Camera, save_image, write_manifest


# ---------------------------------------------------------------------------
# Textures (procedural, 3D, view independent)
# ---------------------------------------------------------------------------


@dataclass
class Texture:
    kind: str  # "solid" | "checker" | "gradient"
    colors: np.ndarray  # solid: (1,3); checker: (2,3); gradient: (2,3) lo/hi
    scale: float = 0.25  # checker cell size (world units)
    axis: int = 2  # gradient axis

    def sample(self, pts: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "solid":
            return np.broadcast_to(self.colors[0], (len(pts), 3)).copy()
        if self.kind == "checker":
            cells = np.floor(pts / self.scale).astype(np.int64).sum(axis=1)
            parity = (cells % 2).astype(bool)
            return np.where(parity[:, None], self.colors[1], self.colors[0])
        if self.kind == "gradient":
            t = np.clip((pts[:, self.axis] - lo) / (hi - lo), 0.0, 1.0)
            return self.colors[0] + t[:, None] * (self.colors[1] - self.colors[0])
        raise FormatError(f"unknown texture kind {self.kind!r}")


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray  # (3,) base position
    radius: float = 0.0  # sphere
    half_extents: np.ndarray = field(default_factory=lambda: np.zeros(3))  # box
    texture: Texture = field(
        default_factory=lambda: Texture("solid", np.array([[0.8, 0.8, 0.8]]))
    )
    motion_amp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    motion_period: float = 0.0  # frames per cycle; 0 disables motion
    motion_phase: float = 0.0
    appear_frame: int = 0

    def active(self, t: int) -> bool:
        return t >= self.appear_frame

    def center_at(self, t: float) -> np.ndarray:
        if self.motion_period <= 0:
            return self.center
        ang = 2.0 * math.pi * (t / self.motion_period) + self.motion_phase
        return self.center + self.motion_amp * math.sin(ang)


@dataclass
class RigSpec:
    n_cameras: int = 12
    radius: float = 3.0
    elevations_deg: tuple = (15.0,)
    focal_px: float = 70.0
    width: int = 64
    height: int = 64
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class SceneSpec:
    primitives: list
    rig: RigSpec
    n_frames: int = 20
    bbox_min: np.ndarray = field(default_factory=lambda: -np.ones(3))
    bbox_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lambert: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rig.n_cameras < 4:
            raise ValueError("rig needs at least 4 cameras")


# --- JSON round trip -------------------------------------------------------


def spec_to_json(spec: SceneSpec) -> dict:
    return {
        "n_frames": spec.n_frames,
        "bbox": [*map(float, spec.bbox_min), *map(float, spec.bbox_max)],
        "background": [float(v) for v in spec.background],
        "lambert": spec.lambert,
        "seed": spec.seed,
        "rig": {
            "n_cameras": spec.rig.n_cameras,
            "radius": spec.rig.radius,
            "elevations_deg": list(spec.rig.elevations_deg),
            "focal_px": spec.rig.focal_px,
            "width": spec.rig.width,
            "height": spec.rig.height,
            "target": [float(v) for v in spec.rig.target],
        },
        "primitives": [
            {
                "kind": p.kind,
                "center": [float(v) for v in p.center],
                "radius": p.radius,
                "half_extents": [float(v) for v in p.half_extents],
                "texture": {
                    "kind": p.texture.kind,
                    "colors": np.asarray(p.texture.colors).tolist(),
                    "scale": p.texture.scale,
                    "axis": p.texture.axis,
                },
                "motion_amp": [float(v) for v in p.motion_amp],
                "motion_period": p.motion_period,
                "motion_phase": p.motion_phase,
                "appear_frame": p.appear_frame,
            }
            for p in spec.primitives
        ],
    }


_SPEC_KEYS = {"n_frames", "bbox", "background", "lambert", "seed", "rig", "primitives"}
_RIG_KEYS = {"n_cameras", "radius", "elevations_deg", "focal_px", "width", "height", "target"}
_PRIM_KEYS = {
    "kind", "center", "radius", "half_extents", "texture",
    "motion_amp", "motion_period", "motion_phase", "appear_frame",
}


def spec_from_json(doc: dict) -> SceneSpec:
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise FormatError(f"unknown scene spec keys: {sorted(unknown)}")
    rig_doc = doc.get("rig", {})
    unknown = set(rig_doc) - _RIG_KEYS
    if unknown:
        raise FormatError(f"unknown rig keys: {sorted(unknown)}")
    rig = RigSpec(
        n_cameras=int(rig_doc.get("n_cameras", 12)),
        radius=float(rig_doc.get("radius", 3.0)),
        elevations_deg=tuple(rig_doc.get("elevations_deg", (15.0,))),
        focal_px=float(rig_doc.get("focal_px", 70.0)),
        width=int(rig_doc.get("width", 64)),
        height=int(rig_doc.get("height", 64)),
        target=np.asarray(rig_doc.get("target", [0.0, 0.0, 0.0]), dtype=np.float64),
    )
    prims = []
    for p in doc.get("primitives", []):
        unknown = set(p) - _PRIM_KEYS
        if unknown:
            raise FormatError(f"unknown primitive keys: {sorted(unknown)}")
        tex_doc = p.get("texture", {"kind": "solid", "colors": [[0.8, 0.8, 0.8]]})
        tex = Texture(
            kind=tex_doc["kind"],
            colors=np.asarray(tex_doc["colors"], dtype=np.float64),
            scale=float(tex_doc.get("scale", 0.25)),
            axis=int(tex_doc.get("axis", 2)),
        )
        prims.append(
            Primitive(
                kind=p["kind"],
                center=np.asarray(p["center"], dtype=np.float64),
                radius=float(p.get("radius", 0.0)),
                half_extents=np.asarray(
                    p.get("half_extents", [0.0, 0.0, 0.0]), dtype=np.float64
                ),
                texture=tex,
                motion_amp=np.asarray(p.get("motion_amp", [0, 0, 0]), dtype=np.float64),
                motion_period=float(p.get("motion_period", 0.0)),
                motion_phase=float(p.get("motion_phase", 0.0)),
                appear_frame=int(p.get("appear_frame", 0)),
            )
        )
    bbox = np.asarray(doc.get("bbox", [-1, -1, -1, 1, 1, 1]), dtype=np.float64)
    return SceneSpec(
        primitives=prims,
        rig=rig,
        n_frames=int(doc.get("n_frames", 20)),
        bbox_min=bbox[:3],
        bbox_max=bbox[3:],
        background=np.asarray(doc.get("background", [0, 0, 0]), dtype=np.float64),
        lambert=bool(doc.get("lambert", False)),
        seed=int(doc.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# Camera rig
# ---------------------------------------------------------------------------


def _look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera 4x4 with OpenCV axes (+z forward, +y down)."""
    f = target - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def rig_cameras(rig: RigSpec) -> list:
    """Inward-looking ring(s): azimuths evenly spaced per elevation, staggered
    between rings."""
    n_rings = len(rig.elevations_deg)
    base = rig.n_cameras // n_rings
    counts = [base + (1 if i < rig.n_cameras % n_rings else 0) for i in range(n_rings)]
    K = np.array(
        [
            [rig.focal_px, 0.0, rig.width / 2.0],
            [0.0, rig.focal_px, rig.height / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    cams = []
    for ring, (elev_deg, count) in enumerate(zip(rig.elevations_deg, counts)):
        elev = math.radians(elev_deg)
        for i in range(count):
            az = 2.0 * math.pi * (i + 0.5 * (ring % 2)) / count
            eye = rig.target + rig.radius * np.array(
                [
                    math.cos(elev) * math.cos(az),
                    math.cos(elev) * math.sin(az),
                    math.sin(elev),
                ]
            )
            cams.append(
                Camera(
                    intrinsics=K,
                    extrinsics=_look_at(eye, rig.target),
                    width=rig.width,
                    height=rig.height,
                )
            )
    return cams


# ---------------------------------------------------------------------------
# Analytic rendering
# ---------------------------------------------------------------------------


def _sphere_hits(origins, dirs, center, radius):
    oc = origins - center
    b = np.einsum("nd,nd->n", oc, dirs)
    c = np.einsum("nd,nd->n", oc, oc) - radius * radius
    disc = b * b - c
    ok = disc > 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    ok &= t > 1e-9
    return np.where(ok, t, np.inf)


def _box_hits(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.fmin(ta, tb)
    tmax = np.fmax(ta, tb)
    par = dirs == 0.0
    if par.any():
        between = (origins >= lo) & (origins <= hi)
        tmin = np.where(par, np.where(between, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(between, np.inf, -np.inf), tmax)
    t0 = tmin.max(axis=-1)
    t1 = tmax.min(axis=-1)
    ok = (t1 >= t0) & (t0 > 1e-9)
    return np.where(ok, t0, np.inf)


def _primitive_normal(p: Primitive, t: float, pts: np.ndarray) -> np.ndarray:
    c = p.center_at(t)
    if p.kind == "sphere":
        n = pts - c
        return n / np.linalg.norm(n, axis=-1, keepdims=True)
    rel = (pts - c) / p.half_extents
    idx = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(pts)
    n[np.arange(len(pts)), idx] = np.sign(rel[np.arange(len(pts)), idx])
    return n


def analytic_render(spec: SceneSpec, t: int, camera: Camera):
    """Exact nearest-hit render. Returns (image (H,W,3) in [0,1], depth (H,W)).

    Depth is the camera-frame z of the hit, +inf where the ray escapes.
    """
    h, w = camera.height, camera.width
    K = camera.intrinsics
    ii, jj = np.meshgrid(np.arange(w), np.arange(h))
    px = ii.ravel() + 0.5
    py = jj.ravel() + 0.5
    d_cam = np.stack(
        [(px - K[0, 2]) / K[0, 0], (py - K[1, 2]) / K[1, 1], np.ones(h * w)], axis=-1
    )
    R = camera.extrinsics[:3, :3]
    dirs = d_cam @ R  # rows of R are camera axes in world coords
    norms = np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = dirs / norms
    origin = -R.T @ camera.extrinsics[:3, 3]
    origins = np.broadcast_to(origin, dirs.shape)

    best_t = np.full(h * w, np.inf)
    best_prim = np.full(h * w, -1, dtype=np.int64)
    for pi, prim in enumerate(spec.primitives):
        if not prim.active(t):
            continue
        c = prim.center_at(t)
        if prim.kind == "sphere":
            th = _sphere_hits(origins, dirs, c, prim.radius)
        elif prim.kind == "box":
            th = _box_hits(origins, dirs, c - prim.half_extents, c + prim.half_extents)
        else:
            raise FormatError(f"unknown primitive kind {prim.kind!r}")
        closer = th < best_t
        best_t = np.where(closer, th, best_t)
        best_prim = np.where(closer, pi, best_prim)

    img = np.broadcast_to(spec.background, (h * w, 3)).copy()
    for pi, prim in enumerate(spec.primitives):
        mask = best_prim == pi
        if not mask.any():
            continue
        pts = origins[mask] + best_t[mask, None] * dirs[mask]
        shade = prim.texture.sample(
            pts, lo=float(spec.bbox_min.min()), hi=float(spec.bbox_max.max())
        )
        if spec.lambert:
            light = np.array([0.4, 0.3, 0.85])
            light = light / np.linalg.norm(light)
            n = _primitive_normal(prim, t, pts)
            lam = np.clip(n @ light, 0.0, 1.0)
            shade = shade * (0.35 + 0.65 * lam[:, None])
        img[mask] = shade

    hit = np.isfinite(best_t)
    # camera-frame z depth (not ray parameter times norm: dirs are unit, so
    # depth = t * cos(angle to optical axis) = t / ||d_cam||)
    depth = np.where(hit, best_t / norms.ravel(), np.inf)
    return img.reshape(h, w, 3), depth.reshape(h, w)


def true_occupancy(spec: SceneSpec, t: int, pts: np.ndarray) -> np.ndarray:
    """Exact strict-interior test against all primitives active at frame t."""
    pts = np.atleast_2d(pts)
    occ = np.zeros(len(pts), dtype=bool)
    for prim in spec.primitives:
        if not prim.active(t):
            continue
        c = prim.center_at(t)
        if prim.kind == "sphere":
            occ |= np.einsum("nd,nd->n", pts - c, pts - c) < prim.radius**2
        else:
            occ |= np.all(np.abs(pts - c) < prim.half_extents, axis=-1)
    return occ


def make_dataset(spec: SceneSpec, out_dir: str, image_format: str = "png") -> str:
    """Render every frame/view to disk and write the manifest.

    Returns the manifest path. Deterministic for a fixed spec."""
    cams = rig_cameras(spec.rig)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    frame_paths = []
    for t in range(spec.n_frames):
        paths = []
        for v, cam in enumerate(cams):
            img, _ = analytic_render(spec, t, cam)
            rel = f"images/frame_{t:04d}_view_{v:02d}.{image_format}"
            save_image(os.path.join(out_dir, rel), img)
            paths.append(rel)
        frame_paths.append(paths)
    return write_manifest(out_dir, spec.bbox_min, spec.bbox_max, cams, frame_paths)
