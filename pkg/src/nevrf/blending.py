"""Multi-view radiance blending.

For each sample point: pick the k source views with the smallest angular
difference to the target ray, back-project, gather per-view features / pixel
colors / direction cosines, aggregate mean + per-view deviation statistics,
run a shared per-view MLP branch to one logit per view, softmax across views,
and blend the source pixel colors with the resulting weights.

Scalar functions implement the per-point contracts; the *_batch path is the
vectorized differentiable chain the renderer and trainer run on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import InsufficientViewsError, NoVisibilityError, ShapeError
from .scene import (
    Camera,
    MultiViewFrame,
    Ray,
    angular_differences,
    project_point,
    in_image_bounds,
)
from .errors import BehindCameraError


@dataclass
class CameraStack:
    """Per-view camera arrays for vectorized projection (shared image size)."""

    rot: np.ndarray  # (V, 3, 3)
    trans: np.ndarray  # (V, 3)
    centers: np.ndarray  # (V, 3)
    fx: np.ndarray  # (V,)
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    width: int
    height: int

    @property
    def n_views(self) -> int:
        return len(self.centers)


def stack_cameras(cameras: Sequence[Camera]) -> CameraStack:
    w, h = cameras[0].width, cameras[0].height
    if any(c.width != w or c.height != h for c in cameras):
        raise ShapeError("batched path needs a shared image size across views")
    return CameraStack(
        rot=np.stack([c.rotation for c in cameras]),
        trans=np.stack([c.translation for c in cameras]),
        centers=np.stack([c.center for c in cameras]),
        fx=np.array([c.intrinsics[0, 0] for c in cameras]),
        fy=np.array([c.intrinsics[1, 1] for c in cameras]),
        cx=np.array([c.intrinsics[0, 2] for c in cameras]),
        cy=np.array([c.intrinsics[1, 2] for c in cameras]),
        width=w,
        height=h,
    )


@dataclass
class ViewBundle:
    """Per-point gathered data from the k selected source views."""

    view_ids: np.ndarray  # (k,)
    features: np.ndarray  # (k, F)
    colors: np.ndarray  # (k, 3)
    cosines: np.ndarray  # (k,), cos(target ray dir, source pixel ray)
    valid: np.ndarray  # (k,) bool


@dataclass
class AggregatedFeatures:
    mean: np.ndarray  # u, (F,)
    deviations: np.ndarray  # v_j = (f_j - u)^2, (k, F)
    fhat: np.ndarray  # (k, 3F + 1); zeros for invalid views
    valid: np.ndarray  # (k,)


@dataclass
class BlendWeights:
    w: np.ndarray  # (k,), nonnegative, sums to 1; invalid views get 0


# ---------------------------------------------------------------------------
# Scalar per-point surface
# ---------------------------------------------------------------------------


def select_views(
    point,
    ray: Ray,
    frame: MultiViewFrame,
    k: int,
    exclude: Optional[int] = None,
) -> list:
    """Ids of the k views with smallest angular difference, ascending; ties
    break toward the lower view index. The rendered view is excluded during
    training."""
    n_eligible = frame.n_views - (1 if exclude is not None else 0)
    if n_eligible < k:
        raise InsufficientViewsError(f"{n_eligible} eligible views < k={k}")
    centers = np.stack([c.center for c in frame.cameras])
    ang = angular_differences(
        ray.direction[None], np.asarray(point, dtype=np.float64)[None], centers
    )[0]
    if exclude is not None:
        ang[exclude] = np.inf
    order = np.argsort(ang, kind="stable")
    return order[:k].tolist()


def gather_bundle(
    point,
    ray: Ray,
    frame: MultiViewFrame,
    view_ids: Sequence[int],
    feature_maps: Sequence[np.ndarray],
) -> ViewBundle:
    """Back-project the point into each selected view and sample its data.

    Out-of-view / behind-camera views come back flagged invalid, not as
    errors."""
    point = np.asarray(point, dtype=np.float64)
    k = len(view_ids)
    fdim = feature_maps[view_ids[0]].shape[-1]
    features = np.zeros((k, fdim))
    colors = np.zeros((k, 3))
    cosines = np.zeros(k)
    valid = np.zeros(k, dtype=bool)
    for j, vid in enumerate(view_ids):
        cam, img = frame.views[vid]
        try:
            pixel, _depth = project_point(cam, point)
        except BehindCameraError:
            continue
        if not in_image_bounds(cam, pixel[None])[0]:
            continue
        features[j] = nn.sample_feature(feature_maps[vid], pixel)
        colors[j] = nn.sample_feature(img, pixel)
        to_point = point - cam.center
        norm = np.linalg.norm(to_point)
        if norm < 1e-12:
            continue
        cosines[j] = np.dot(ray.direction, to_point / norm)
        valid[j] = True
    return ViewBundle(
        view_ids=np.asarray(view_ids), features=features, colors=colors,
        cosines=cosines, valid=valid,
    )


def aggregate(bundle: ViewBundle) -> AggregatedFeatures:
    """Mean u over valid views, per-view squared deviations, and the
    concatenated per-view vectors [f_j, cos_j, v_j, u]."""
    if not bundle.valid.any():
        raise NoVisibilityError("no valid source view sees the point")
    f = bundle.features
    valid = bundle.valid
    u = f[valid].mean(axis=0)
    dev = np.where(valid[:, None], (f - u) ** 2, 0.0)
    k, fdim = f.shape
    fhat = np.zeros((k, 3 * fdim + 1))
    fhat[valid] = np.concatenate(
        [
            f[valid],
            bundle.cosines[valid, None],
            dev[valid],
            np.broadcast_to(u, (valid.sum(), fdim)),
        ],
        axis=-1,
    )
    return AggregatedFeatures(mean=u, deviations=dev, fhat=fhat, valid=valid)


def blend_weights(agg: AggregatedFeatures, params: nn.MlpParams) -> BlendWeights:
    """Per-view logits from the shared branch MLP; invalid views are masked to
    -inf before the softmax."""
    if not agg.valid.any():
        raise NoVisibilityError("no valid source view sees the point")
    logits, _ = nn.mlp_forward(params, agg.fhat)
    logits = logits[:, 0].astype(np.float64)
    logits[~agg.valid] = -np.inf
    return BlendWeights(w=nn.softmax(logits))


def blend_color(weights: BlendWeights, bundle: ViewBundle) -> np.ndarray:
    """c = sum_j w_j * c_j; stays in the convex hull of the source colors."""
    return weights.w @ bundle.colors


# ---------------------------------------------------------------------------
# Batched differentiable chain
# ---------------------------------------------------------------------------


@dataclass
class BlendTape:
    """Everything the backward pass needs, for the active points only."""

    mlp_tape: object
    softmax_out: np.ndarray  # (P, k)
    colors_k: np.ndarray  # (P, k, 3)
    features: np.ndarray  # (P, k, F)
    mean: np.ndarray  # (P, F)
    n_valid: np.ndarray  # (P,)
    valid: np.ndarray  # (P, k)
    feat_idx: np.ndarray  # (P*k, 4) flat indices into V*H*W
    feat_w: np.ndarray  # (P*k, 4)
    fmap_shape: tuple


def view_cosines(points: np.ndarray, ray_dirs: np.ndarray, cams: CameraStack):
    """cos(angle) between each point's ray direction and camera->point, (P, V).

    Degenerate pairs (camera center on the point) get -inf so they always
    sort last; sorting by descending cosine equals sorting by ascending
    angular difference."""
    v = points[:, None, :] - cams.centers[None, :, :]  # (P, V, 3)
    n2 = np.einsum("pvd,pvd->pv", v, v)
    degenerate = n2 < 1e-24
    dots = np.einsum("pd,pvd->pv", ray_dirs, v)
    cos = dots / np.sqrt(np.where(degenerate, 1.0, n2))
    return np.where(degenerate, -np.inf, np.clip(cos, -1.0, 1.0))


def select_views_batch(
    points: np.ndarray,
    ray_dirs: np.ndarray,
    cams: CameraStack,
    k: int,
    exclude: Optional[np.ndarray] = None,
):
    """Top-k view ids (P, k) by smallest angular difference, plus the cosine
    matrix (P, V) they were ranked on."""
    n_eligible = cams.n_views - (1 if exclude is not None else 0)
    if n_eligible < k:
        raise InsufficientViewsError(f"{n_eligible} eligible views < k={k}")
    cos = view_cosines(points, ray_dirs, cams)
    if exclude is not None:
        excl = np.asarray(exclude)
        rows = np.arange(len(points))
        mask = excl >= 0
        cos[rows[mask], excl[mask]] = -np.inf
    order = np.argsort(-cos, axis=1, kind="stable")[:, :k]
    return order, cos


def project_batch(cams: CameraStack, points: np.ndarray, view_idx: np.ndarray):
    """Project (P,3) points into per-point selected views (P,k).

    Projects into all views with one matmul, then gathers the selected
    columns. Returns (pixels (P,k,2), depths (P,k), valid (P,k))."""
    xc = np.matmul(points, cams.rot.transpose(0, 2, 1)) + cams.trans[:, None, :]
    depth_all = xc[..., 2]  # (V, P)
    safe = np.where(depth_all > 1e-8, depth_all, 1.0)
    px_all = cams.fx[:, None] * xc[..., 0] / safe + cams.cx[:, None]
    py_all = cams.fy[:, None] * xc[..., 1] / safe + cams.cy[:, None]
    ok_all = (
        (depth_all > 1e-8)
        & (px_all >= 0.0)
        & (px_all < cams.width)
        & (py_all >= 0.0)
        & (py_all < cams.height)
    )
    px = np.take_along_axis(px_all.T, view_idx, axis=1)
    py = np.take_along_axis(py_all.T, view_idx, axis=1)
    depth = np.take_along_axis(depth_all.T, view_idx, axis=1)
    valid = np.take_along_axis(ok_all.T, view_idx, axis=1)
    return np.stack([px, py], axis=-1), depth, valid


def blend_points_batch(
    points: np.ndarray,
    ray_dirs: np.ndarray,
    cams: CameraStack,
    images: np.ndarray,
    featmaps: Optional[np.ndarray],
    mlp: Optional[nn.MlpParams],
    k: int,
    exclude: Optional[np.ndarray] = None,
    want_tape: bool = False,
    preselected: Optional[np.ndarray] = None,
):
    """Blended colors for a batch of sample points.

    mode is implied by the arguments: with featmaps+mlp the learned weights
    are used; with featmaps=None the fallback of uniform weights over valid
    views applies (coarse reconstruction and the no-blend-net ablation).
    preselected (P, k) view ids skip the per-point selection (per-ray mode).

    Returns (colors (P, 3), any_valid (P,), tape or None). Points no view
    sees keep any_valid=False and a zero color; the renderer substitutes the
    background there.
    """
    P = len(points)
    if preselected is None:
        view_idx, cos_all = select_views_batch(points, ray_dirs, cams, k, exclude)
    else:
        view_idx = preselected
        cos_all = view_cosines(points, ray_dirs, cams)
    pixels, _depth, valid = project_batch(cams, points, view_idx)

    flat_pix = pixels.reshape(-1, 2)
    flat_view = view_idx.reshape(-1)
    # clamp invalid projections into range; their samples get masked out
    flat_pix = np.clip(
        flat_pix,
        0.0,
        np.array([cams.width, cams.height], dtype=np.float64) - 1e-6,
    )
    colors_k, _, _ = nn.sample_maps_batch(images, flat_view, flat_pix)
    colors_k = (colors_k.reshape(P, k, 3)) * valid[:, :, None]
    n_valid = valid.ravel().reshape(P, k).sum(axis=1)
    any_valid = n_valid > 0

    if featmaps is None:
        wsum = np.where(any_valid, n_valid, 1.0)
        weights = valid / wsum[:, None]
        out = np.einsum("pk,pkc->pc", weights, colors_k)
        return out, any_valid, None

    feats, feat_idx, feat_w = nn.sample_maps_batch(featmaps, flat_view, flat_pix)
    fdim = featmaps.shape[-1]
    feats = feats.reshape(P, k, fdim) * valid[:, :, None]

    cos = np.take_along_axis(cos_all, view_idx, axis=1)
    cos = (np.where(np.isfinite(cos), cos, 0.0) * valid).astype(feats.dtype)

    n_safe = np.where(any_valid, n_valid, 1.0)
    u = feats.sum(axis=1) / n_safe[:, None]  # (P, F)
    dev = np.where(valid[:, :, None], (feats - u[:, None, :]) ** 2, 0.0)
    fhat = np.concatenate(
        [feats, cos[:, :, None], dev, np.broadcast_to(u[:, None, :], dev.shape)],
        axis=-1,
    )
    fhat = fhat * valid[:, :, None]

    logits, mlp_tape = nn.mlp_forward(
        mlp, fhat.reshape(P * k, -1).astype(mlp.weights[0].dtype, copy=False)
    )
    logits = logits.reshape(P, k)
    masked = np.where(valid, logits, -np.inf)
    # rows with no valid view would softmax over all -inf; park them at 0
    masked = np.where(any_valid[:, None], masked, 0.0)
    weights = nn.softmax(masked, axis=1)
    out = np.einsum("pk,pkc->pc", weights, colors_k)
    out = out * any_valid[:, None]

    tape = None
    if want_tape:
        tape = BlendTape(
            mlp_tape=mlp_tape,
            softmax_out=weights,
            colors_k=colors_k,
            features=feats,
            mean=u,
            n_valid=n_safe,
            valid=valid,
            feat_idx=feat_idx,
            feat_w=feat_w,
            fmap_shape=featmaps.shape,
        )
    return out, any_valid, tape


def blend_points_backward(tape: BlendTape, gcolors: np.ndarray):
    """Adjoint of blend_points_batch (learned mode).

    gcolors (P, 3) -> (mlp param grads, feature-map grads (V, H, W, F)).
    Gradients w.r.t. the source images are not produced (images are data).
    """
    P, k, _ = tape.colors_k.shape
    w = tape.softmax_out
    gw = np.einsum("pc,pkc->pk", gcolors, tape.colors_k)
    glogits = nn.softmax_backward(w, gw, axis=1)
    glogits = glogits * tape.valid

    mlp_grads, gfhat = nn.mlp_backward(tape.mlp_tape, glogits.reshape(P * k, 1))
    fdim = tape.features.shape[-1]
    gfhat = gfhat.reshape(P, k, 3 * fdim + 1) * tape.valid[:, :, None]
    gf_direct = gfhat[:, :, :fdim]
    gdev = gfhat[:, :, fdim + 1 : 2 * fdim + 1]
    gu_terms = gfhat[:, :, 2 * fdim + 1 :]

    diff = (tape.features - tape.mean[:, None, :]) * tape.valid[:, :, None]
    gu = gu_terms.sum(axis=1) - (2.0 * diff * gdev).sum(axis=1)
    gf = gf_direct + 2.0 * diff * gdev
    gf = gf + (gu / tape.n_valid[:, None])[:, None, :] * tape.valid[:, :, None]

    gfeat_flat = (gf * tape.valid[:, :, None]).reshape(P * k, fdim)
    gmaps = nn.scatter_map_gradient(
        tape.fmap_shape, tape.feat_idx, tape.feat_w, gfeat_flat
    )
    return mlp_grads, gmaps
