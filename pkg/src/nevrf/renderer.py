"""Differentiable ray marching over a density grid with blended colors.

The forward pass records a tape so the trainer can backpropagate the
photometric loss to the grid values, the blending MLP, and (through the
feature maps) the encoder. Transmittance math runs in float64 regardless of
the working precision; colors follow the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import blending, nn
from .errors import ShapeError
from .grid import (
    DensityGrid,
    interp_weights,
    raw_to_alpha,
    raw_to_alpha_grad,
    scatter_grid_gradient,
)
from .scene import Camera, MultiViewFrame, Ray, generate_rays

PSNR_SENTINEL = 99.0


@dataclass
class RayMarchConfig:
    """Ray marching configuration.

    near/far of None means per-ray bounds from the grid bbox intersection.
    prune/termination thresholds are performance guards; exact=True disables
    them (used by gradient audits and precision tests).
    """

    n_s: int = 128
    near: Optional[float] = None
    far: Optional[float] = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    k_views: int = 4
    jitter: bool = False
    per_ray_selection: bool = False
    prune_alpha: float = 2e-4
    prune_weight: float = 1e-5
    term_transmittance: float = 1e-4
    exact: bool = False

    def __post_init__(self):
        if self.n_s < 2:
            raise ValueError("n_s must be >= 2")
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.near is not None and self.far is not None and not (self.near < self.far):
            raise ValueError("near must be < far")


@dataclass
class CompositeResult:
    color: np.ndarray  # (3,)
    weights: np.ndarray  # (n_s,) per-sample contribution T_i * alpha_i
    opacity: float  # sum of weights


def sample_points(ray: Ray, cfg: RayMarchConfig, rng: Optional[np.random.Generator] = None):
    """Points at segment midpoints of [near, far] (or jittered within segments).

    Returns (points (n_s, 3), step lengths (n_s,))."""
    near = cfg.near if cfg.near is not None else ray.near
    far = cfg.far if cfg.far is not None else ray.far
    step = (far - near) / cfg.n_s
    offsets = (
        rng.uniform(0.0, 1.0, cfg.n_s)
        if (cfg.jitter and rng is not None)
        else np.full(cfg.n_s, 0.5)
    )
    ts = near + (np.arange(cfg.n_s) + offsets) * step
    pts = ray.origin[None, :] + ts[:, None] * ray.direction[None, :]
    return pts, np.full(cfg.n_s, step)


def composite(alphas: np.ndarray, colors: np.ndarray, background: np.ndarray) -> CompositeResult:
    """Front-to-back alpha compositing of one ray."""
    a = np.clip(np.asarray(alphas, dtype=np.float64), 0.0, 1.0 - 1e-12)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - a)])
    weights = trans[:-1] * a
    color = weights @ np.asarray(colors, dtype=np.float64) + trans[-1] * background
    return CompositeResult(color=color, weights=weights, opacity=float(weights.sum()))


def ray_bbox_intersect(origins: np.ndarray, dirs: np.ndarray, bbox_min, bbox_max):
    """Slab intersection. Returns (t_near (B,), t_far (B,), hit (B,))."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (bbox_min - origins) * inv
        t2 = (bbox_max - origins) * inv
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    # parallel-axis rays: inside -> (-inf, inf), outside -> empty
    par = dirs == 0.0
    if par.any():
        inside = (origins >= bbox_min) & (origins <= bbox_max)
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.max(lo, axis=-1)
    t_far = np.min(hi, axis=-1)
    t_near = np.maximum(t_near, 1e-6)
    hit = t_far > t_near
    return t_near, t_far, hit


@dataclass
class RenderTape:
    grid: DensityGrid
    flat_idx: np.ndarray
    tri_w: np.ndarray
    inside: np.ndarray
    raw: np.ndarray  # (B, n_s)
    alphas: np.ndarray  # (B, n_s) float64
    trans: np.ndarray  # (B, n_s) T_i
    weights: np.ndarray  # (B, n_s)
    t_res: np.ndarray  # (B,)
    point_colors: np.ndarray  # (B, n_s, 3) incl. background placeholders
    active: np.ndarray  # (B*n_s,) bool
    blend_tape: Optional[blending.BlendTape]
    step: np.ndarray  # (B,)
    background: np.ndarray
    hit: np.ndarray  # (B,)


@dataclass
class RenderGrads:
    grid_values: np.ndarray
    mlp: Optional[nn.MlpParams]
    featmaps: Optional[np.ndarray]


def render_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    grid: DensityGrid,
    ft: "FrameTensors",
    cfg: RayMarchConfig,
    mlp: Optional[nn.MlpParams] = None,
    featmaps: Optional[np.ndarray] = None,
    exclude: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    want_tape: bool = False,
    net_tape: bool = True,
):
    """Render a batch of rays through the full pipeline.

    Returns (colors (B, 3), aux dict, tape or None). Learned blending needs
    both featmaps and mlp; featmaps=None renders with uniform weights over
    the valid selected views. net_tape=False records a grid-only tape (for
    density-only refinement steps).
    """
    B = len(origins)
    n_s = cfg.n_s
    t0, t1, hit = ray_bbox_intersect(origins, dirs, grid.bbox_min, grid.bbox_max)
    if cfg.near is not None:
        t0 = np.full(B, cfg.near)
    if cfg.far is not None:
        t1 = np.full(B, cfg.far)
        hit = t1 > t0
    t0 = np.where(hit, t0, 1.0)
    t1 = np.where(hit, t1, 2.0)

    step = (t1 - t0) / n_s  # (B,)
    if cfg.jitter and rng is not None:
        offsets = rng.uniform(0.0, 1.0, (B, n_s))
    else:
        offsets = np.full((B, n_s), 0.5)
    ts = t0[:, None] + (np.arange(n_s)[None, :] + offsets) * step[:, None]
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    pts_flat = pts.reshape(-1, 3)

    flat_idx, tri_w, inside = interp_weights(grid, pts_flat)
    raw = (grid.values.ravel()[flat_idx] * tri_w).sum(axis=-1)
    raw = np.where(inside, raw, grid.empty_raw).reshape(B, n_s)

    alphas = raw_to_alpha(raw.astype(np.float64), step[:, None])
    alphas = np.clip(alphas, 0.0, 1.0 - 1e-12)
    alphas[~hit] = 0.0
    cum = np.cumprod(1.0 - alphas, axis=1)
    trans = np.concatenate([np.ones((B, 1)), cum[:, :-1]], axis=1)
    weights = trans * alphas
    t_res = cum[:, -1]

    if cfg.exact:
        active = np.repeat(hit, n_s)
    else:
        act = (
            (weights > cfg.prune_weight)
            & (alphas > cfg.prune_alpha)
            & (trans > cfg.term_transmittance)
        )
        active = (act & hit[:, None]).reshape(-1)

    bg = cfg.background
    point_colors = np.broadcast_to(bg, (B * n_s, 3)).copy()
    blend_tape = None
    if active.any():
        apts = pts_flat[active]
        adirs = np.repeat(dirs, n_s, axis=0)[active]
        aexcl = None
        if exclude is not None:
            aexcl = np.repeat(np.asarray(exclude), n_s)[active]
        preselected = None
        if cfg.per_ray_selection:
            # select views once per ray (at its midpoint), reuse for samples
            mid = origins + (0.5 * (t0 + t1))[:, None] * dirs
            mid_rep = np.repeat(mid, n_s, axis=0)[active]
            preselected, _ = blending.select_views_batch(
                mid_rep, adirs, ft.cams, cfg.k_views, aexcl
            )
        colors_a, any_valid, blend_tape = blending.blend_points_batch(
            apts,
            adirs,
            ft.cams,
            ft.images,
            featmaps,
            mlp,
            cfg.k_views,
            exclude=aexcl,
            want_tape=want_tape and net_tape and featmaps is not None,
            preselected=preselected,
        )
        colors_a = np.where(any_valid[:, None], colors_a, bg)
        point_colors[active] = colors_a

    pc = point_colors.reshape(B, n_s, 3)
    colors = np.einsum("bn,bnc->bc", weights, pc) + t_res[:, None] * bg
    aux = {"opacity": weights.sum(axis=1), "t_res": t_res, "hit": hit}

    tape = None
    if want_tape:
        tape = RenderTape(
            grid=grid,
            flat_idx=flat_idx,
            tri_w=tri_w,
            inside=inside,
            raw=raw,
            alphas=alphas,
            trans=trans,
            weights=weights,
            t_res=t_res,
            point_colors=pc,
            active=active,
            blend_tape=blend_tape,
            step=step,
            background=bg,
            hit=hit,
        )
    return colors, aux, tape


def render_rays_backward(tape: RenderTape, gcolors: np.ndarray) -> RenderGrads:
    """Backpropagate d(loss)/d(pixel colors) through the recorded render."""
    B, n_s, _ = tape.point_colors.shape
    g = np.asarray(gcolors, dtype=np.float64)

    # colors: only active points with learned blending carry gradient
    gw = np.einsum("bc,bnc->bn", g, tape.point_colors)  # d/d weights
    g_tres = g @ tape.background

    mlp_grads, fmap_grads = None, None
    if tape.blend_tape is not None and tape.active.any():
        gpc = (tape.weights[:, :, None] * g[:, None, :]).reshape(-1, 3)
        gpc = gpc[tape.active]
        # points with no visibility rendered the background constant
        valid_any = tape.blend_tape.valid.any(axis=1)
        gpc = gpc * valid_any[:, None]
        mlp_grads, fmap_grads = blending.blend_points_backward(tape.blend_tape, gpc)

    # alpha gradients: dL/da_i = T_i*gw_i - S_i/(1-a_i),
    # S_i = sum_{j>i} gw_j*w_j + g_tres*T_res
    a = tape.alphas
    gww = gw * tape.weights
    suffix = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1]
    s_after = np.concatenate([suffix[:, 1:], np.zeros((B, 1))], axis=1)
    s_after = s_after + (g_tres * tape.t_res)[:, None]
    galpha = gw * tape.trans - s_after / (1.0 - a)
    galpha[~tape.hit] = 0.0

    graw = galpha * raw_to_alpha_grad(tape.raw, tape.step[:, None])
    grid_g = scatter_grid_gradient(
        tape.grid, tape.flat_idx, tape.tri_w, graw.reshape(-1), tape.inside
    )
    return RenderGrads(grid_values=grid_g, mlp=mlp_grads, featmaps=fmap_grads)


@dataclass
class FrameTensors:
    """Stacked per-view arrays of one frame (shared image size)."""

    cams: blending.CameraStack
    images: np.ndarray  # (V, H, W, 3)
    _col_imgs: Optional[list] = None  # cached encoder patches per view


def frame_tensors(frame: MultiViewFrame, dtype=np.float32) -> FrameTensors:
    cams = blending.stack_cameras(frame.cameras)
    images = np.stack([img.astype(dtype, copy=False) for img in frame.images])
    return FrameTensors(cams=cams, images=images)


def compute_featmaps(
    encoder: nn.EncoderParams, ft: FrameTensors, want_tapes: bool = False
):
    """Per-view feature maps (V, H, W, F); optionally with encoder tapes.

    Image patches are extracted once per frame and reused across steps."""
    if ft._col_imgs is None:
        ft._col_imgs = [
            nn._im2col(img.astype(encoder.w1.dtype, copy=False))
            for img in ft.images
        ]
    maps, tapes = [], []
    for v in range(len(ft.images)):
        if want_tapes:
            fmap, tape = nn.encode_features(
                encoder, ft.images[v], want_tape=True, col_img=ft._col_imgs[v]
            )
            tapes.append(tape)
        else:
            fmap = nn.encode_features(encoder, ft.images[v], col_img=ft._col_imgs[v])
        maps.append(fmap)
    stacked = np.stack(maps)
    return (stacked, tapes) if want_tapes else stacked


def render_pixel(
    frame: MultiViewFrame,
    featmaps: Optional[np.ndarray],
    grid: DensityGrid,
    mlp: Optional[nn.MlpParams],
    camera: Camera,
    pixel,
    cfg: RayMarchConfig,
    exclude: Optional[int] = None,
    ft: Optional[FrameTensors] = None,
) -> np.ndarray:
    """Render one pixel through the full chain (convenience wrapper)."""
    if ft is None:
        ft = frame_tensors(frame)
    origins, dirs = generate_rays(camera, np.asarray([pixel], dtype=np.float64))
    excl = None if exclude is None else np.array([exclude])
    colors, _, _ = render_rays(
        origins, dirs, grid, ft, cfg, mlp=mlp, featmaps=featmaps, exclude=excl
    )
    return colors[0]


def render_image(
    frame: MultiViewFrame,
    grid: DensityGrid,
    camera: Camera,
    cfg: RayMarchConfig,
    mlp: Optional[nn.MlpParams] = None,
    encoder: Optional[nn.EncoderParams] = None,
    featmaps: Optional[np.ndarray] = None,
    exclude: Optional[int] = None,
    chunk: int = 8192,
    ft: Optional[FrameTensors] = None,
) -> np.ndarray:
    """Render a full view. Deterministic when cfg.jitter is off."""
    if ft is None:
        ft = frame_tensors(frame)
    if featmaps is None and encoder is not None:
        featmaps = compute_featmaps(encoder, ft)
    h, w = camera.height, camera.width
    ii, jj = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=-1)
    origins, dirs = generate_rays(camera, pixels)
    out = np.zeros((h * w, 3))
    for s in range(0, h * w, chunk):
        e = min(s + chunk, h * w)
        excl = None if exclude is None else np.full(e - s, exclude)
        colors, _, _ = render_rays(
            origins[s:e], dirs[s:e], grid, ft, cfg,
            mlp=mlp, featmaps=featmaps, exclude=excl,
        )
        out[s:e] = colors
    return np.clip(out.reshape(h, w, 3), 0.0, 1.0)


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images; identical images report the sentinel."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(1.0 / mse))
