"""Sequential training: coarse per-frame density reconstruction, continual
blending-network learning with a three-part ray replay buffer, and per-frame
density refinement.

Each group of frames streams through three stages: (1) every frame gets a
density grid optimized against a fixed uniform-blend color model, warm
started from the previous frame; (2) the group's first frame jointly trains
the networks and its grid, mixing replayed rays into every batch; (3) the
remaining frames freeze the networks and refine only their grids. Replayed
rays are ray-based records: frozen per-point aggregated features, source
view colors, and compositing weights; no image data is ever retained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import blending, nn, renderer
from .errors import DivergedError
from .grid import AlignedGroupGrids, DensityGrid, align_group, empty_grid
from .renderer import (
    FrameTensors,
    RayMarchConfig,
    RenderTape,
    compute_featmaps,
    frame_tensors,
    render_rays,
    render_rays_backward,
)
from .scene import MultiViewFrame, SequenceGroup, generate_rays


@dataclass
class TrainConfig:
    """Every knob the training pipeline reads; defaults are desk scale."""

    batch_rays: int = 512
    replay_fraction: float = 0.20
    coarse_iters: int = 200
    coarse_warm_iters: Optional[int] = None  # cap for warm-started frames
    cl_iters: int = 1000
    density_iters: int = 200
    tau: float = 0.05  # motion threshold, L-inf over RGB in [0,1]
    capacity_error: int = 4096
    capacity_motion: int = 4096
    capacity_random: int = 4096
    buffer_update_every: int = 1  # admit records every Nth CL step
    lr_net: float = 1e-3
    lr_grid: float = 1e-1
    n_s: int = 64
    k_views: int = 4
    coarse_k: int = 3
    grid_dim: int = 64
    feature_dim: int = 8
    encoder_hidden: int = 16
    mlp_hidden: int = 32
    mlp_layers: int = 2
    group_size: int = 20
    seed: int = 0
    test_views: tuple = ()
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    use_replay: bool = True
    use_blend_net: bool = True
    jitter: bool = True
    coarse_loss_target: Optional[float] = None
    per_ray_selection: bool = False
    # raw density the coarse stage starts from: translucent everywhere, so
    # every sample contributes color and the photometric gradient can both
    # grow surfaces and carve free space (an empty start renders background
    # for any density and gets no gradient at all)
    coarse_init_raw: float = 0.0
    # proportional pull toward empty, weighted by the transmittance reaching
    # each voxel: kills free-floating density the photometric term cannot
    # see (all source views agree with the background there) while leaving
    # occluded interiors alone; applied outside Adam so tiny gradients are
    # not amplified
    coarse_vis_decay: float = 0.02
    refine_vis_decay: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.replay_fraction <= 1.0):
            raise ValueError("replay fraction must be in [0, 1]")
        if min(self.coarse_iters, self.cl_iters, self.density_iters) < 1:
            raise ValueError("iteration counts must be >= 1")
        self.background = np.asarray(self.background, dtype=np.float64)

    def march(self, **overrides) -> RayMarchConfig:
        base = dict(
            n_s=self.n_s,
            background=self.background,
            k_views=self.k_views,
            per_ray_selection=self.per_ray_selection,
        )
        base.update(overrides)
        return RayMarchConfig(**base)


# ---------------------------------------------------------------------------
# Replay records and the experience buffer
# ---------------------------------------------------------------------------


@dataclass
class RaySampleRecord:
    """A frozen ray: per-point multi-view features and everything needed to
    re-render its color under new network parameters, detached from images.

    Only points that actually contributed to the pixel are stored; the
    background-weighted remainder is folded into base_color.
    """

    features: np.ndarray  # (m, k, 3F+1) float32, frozen
    view_colors: np.ndarray  # (m, k, 3) float32
    valid: np.ndarray  # (m, k) bool
    point_weights: np.ndarray  # (m,) float32, frozen compositing weights
    base_color: np.ndarray  # (3,) float32
    gt_color: np.ndarray  # (3,) float32
    frame: int
    view: int
    pixel: tuple
    error: float
    serial: int

    @property
    def nbytes(self) -> int:
        return (
            self.features.nbytes
            + self.view_colors.nbytes
            + self.valid.nbytes
            + self.point_weights.nbytes
            + self.base_color.nbytes
            + self.gt_color.nbytes
        )


class ExperienceBuffer:
    """Three disjoint sub-buffers of ray records.

    - error: the highest-training-error records seen, kept sorted descending;
    - motion: records whose ground-truth pixel changed more than tau in the
      following frame, uniform random eviction on overflow;
    - random: reservoir-sampled records from the whole training stream,
      uniform random eviction on overflow.
    """

    def __init__(
        self,
        capacity_error: int,
        capacity_motion: int,
        capacity_random: int,
        tau: float,
        rng: np.random.Generator,
    ):
        self.capacity_error = capacity_error
        self.capacity_motion = capacity_motion
        self.capacity_random = capacity_random
        self.tau = tau
        self.rng = rng
        self.q_error: list = []
        self.q_motion: list = []
        self.q_random: list = []
        self._random_seen = 0

    def __len__(self) -> int:
        return len(self.q_error) + len(self.q_motion) + len(self.q_random)

    @property
    def nbytes(self) -> int:
        return sum(r.nbytes for r in self.q_error + self.q_motion + self.q_random)

    def all_records(self) -> list:
        return self.q_error + self.q_motion + self.q_random

    def update(self, records: Sequence[RaySampleRecord], motion_flags) -> None:
        """Admit a batch of candidate records (disjoint routing: error-based
        first, then motion, then the stochastic reservoir)."""
        merged = self.q_error + list(records)
        merged.sort(key=lambda r: (-r.error, r.serial))
        self.q_error = merged[: self.capacity_error]
        kept = {r.serial for r in self.q_error}
        for rec, moving in zip(records, motion_flags):
            if rec.serial in kept:
                continue
            if moving and self.capacity_motion > 0:
                if len(self.q_motion) < self.capacity_motion:
                    self.q_motion.append(rec)
                else:
                    victim = int(self.rng.integers(len(self.q_motion)))
                    self.q_motion[victim] = rec
            elif self.capacity_random > 0:
                self._random_seen += 1
                if len(self.q_random) < self.capacity_random:
                    self.q_random.append(rec)
                elif (
                    self.rng.random()
                    < self.capacity_random / self._random_seen
                ):
                    victim = int(self.rng.integers(len(self.q_random)))
                    self.q_random[victim] = rec

    def sample(self, n: int, rng: np.random.Generator) -> list:
        """n draws with replacement, proportional to sub-buffer sizes."""
        pool = self.all_records()
        if not pool:
            return []
        idx = rng.integers(0, len(pool), size=n)
        return [pool[i] for i in idx]

    def stats(self) -> dict:
        errors = [r.error for r in self.all_records()]
        hist, edges = np.histogram(errors, bins=10) if errors else (np.zeros(10), np.linspace(0, 1, 11))
        return {
            "count_error": len(self.q_error),
            "count_motion": len(self.q_motion),
            "count_random": len(self.q_random),
            "nbytes": self.nbytes,
            "error_histogram": hist.tolist(),
            "error_bin_edges": [float(e) for e in edges],
        }

    def save(self, path: str) -> None:
        pools = {"e": self.q_error, "m": self.q_motion, "r": self.q_random}
        payload = {"random_seen": np.array([self._random_seen])}
        for tag, pool in pools.items():
            for i, r in enumerate(pool):
                payload[f"{tag}{i}_features"] = r.features
                payload[f"{tag}{i}_view_colors"] = r.view_colors
                payload[f"{tag}{i}_valid"] = r.valid
                payload[f"{tag}{i}_point_weights"] = r.point_weights
                payload[f"{tag}{i}_base_color"] = r.base_color
                payload[f"{tag}{i}_gt_color"] = r.gt_color
                payload[f"{tag}{i}_meta"] = np.array(
                    [r.frame, r.view, r.pixel[0], r.pixel[1], r.serial]
                )
                payload[f"{tag}{i}_error"] = np.array([r.error])
        np.savez_compressed(path, **payload)

    def load(self, path: str) -> None:
        data = np.load(path)
        self._random_seen = int(data["random_seen"][0])
        pools = {"e": [], "m": [], "r": []}
        names = {n.split("_", 1)[0] for n in data.files if n != "random_seen"}
        for name in sorted(names, key=lambda s: (s[0], int(s[1:]))):
            meta = data[f"{name}_meta"]
            pools[name[0]].append(
                RaySampleRecord(
                    features=data[f"{name}_features"],
                    view_colors=data[f"{name}_view_colors"],
                    valid=data[f"{name}_valid"],
                    point_weights=data[f"{name}_point_weights"],
                    base_color=data[f"{name}_base_color"],
                    gt_color=data[f"{name}_gt_color"],
                    frame=int(meta[0]),
                    view=int(meta[1]),
                    pixel=(int(meta[2]), int(meta[3])),
                    error=float(data[f"{name}_error"][0]),
                    serial=int(meta[4]),
                )
            )
        self.q_error, self.q_motion, self.q_random = pools["e"], pools["m"], pools["r"]


# ---------------------------------------------------------------------------
# Memory accounting (the fixed-footprint contract)
# ---------------------------------------------------------------------------


@dataclass
class MemoryAccounting:
    current_image_bytes: int = 0
    peak_image_bytes: int = 0
    peak_buffer_bytes: int = 0

    def group_loaded(self, nbytes: int) -> None:
        self.current_image_bytes = nbytes
        self.peak_image_bytes = max(self.peak_image_bytes, nbytes)

    def group_freed(self) -> None:
        self.current_image_bytes = 0

    def buffer_size(self, nbytes: int) -> None:
        self.peak_buffer_bytes = max(self.peak_buffer_bytes, nbytes)

    @property
    def peak_total(self) -> int:
        return self.peak_image_bytes + self.peak_buffer_bytes


# ---------------------------------------------------------------------------
# Trainer state
# ---------------------------------------------------------------------------


@dataclass
class TrainerState:
    mlp: nn.MlpParams
    encoder: nn.EncoderParams
    adam: nn.Adam
    buffer: ExperienceBuffer
    last_grid: Optional[DensityGrid]
    serial_counter: int
    rng: np.random.Generator
    accounting: MemoryAccounting

    def next_serial(self) -> int:
        self.serial_counter += 1
        return self.serial_counter


def mlp_input_dim(feature_dim: int) -> int:
    return 3 * feature_dim + 1


def init_state(cfg: TrainConfig) -> TrainerState:
    seq = np.random.SeedSequence(cfg.seed)
    init_ss, run_ss, buf_ss = seq.spawn(3)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    sizes = (
        [mlp_input_dim(cfg.feature_dim)]
        + [cfg.mlp_hidden] * cfg.mlp_layers
        + [1]
    )
    return TrainerState(
        mlp=nn.init_mlp(sizes, init_rng),
        encoder=nn.init_encoder(init_rng, cfg.encoder_hidden, cfg.feature_dim),
        adam=nn.Adam(),
        buffer=ExperienceBuffer(
            cfg.capacity_error,
            cfg.capacity_motion,
            cfg.capacity_random,
            cfg.tau,
            np.random.Generator(np.random.PCG64(buf_ss)),
        ),
        last_grid=None,
        serial_counter=0,
        rng=np.random.Generator(np.random.PCG64(run_ss)),
        accounting=MemoryAccounting(),
    )


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3)
    view_ids: np.ndarray  # (B,)
    pixels: np.ndarray  # (B, 2) integer pixel coords
    gt_colors: np.ndarray  # (B, 3)
    replay: list  # list[RaySampleRecord]


def train_view_ids(frame: MultiViewFrame, cfg: TrainConfig) -> np.ndarray:
    ids = [v for v in range(frame.n_views) if v not in set(cfg.test_views)]
    return np.asarray(ids)


def sample_current_rays(
    frame: MultiViewFrame, n: int, cfg: TrainConfig, rng: np.random.Generator
):
    views = train_view_ids(frame, cfg)
    vi = views[rng.integers(0, len(views), size=n)]
    w = frame.cameras[0].width
    h = frame.cameras[0].height
    px = rng.integers(0, w, size=n)
    py = rng.integers(0, h, size=n)
    origins = np.zeros((n, 3))
    dirs = np.zeros((n, 3))
    gts = np.zeros((n, 3))
    pix_cont = np.stack([px + 0.5, py + 0.5], axis=-1)
    for v in np.unique(vi):
        mask = vi == v
        o, d = generate_rays(frame.cameras[v], pix_cont[mask])
        origins[mask] = o
        dirs[mask] = d
        gts[mask] = frame.images[v][py[mask], px[mask]]
    return origins, dirs, vi, np.stack([px, py], axis=-1), gts


def make_batch(
    frame: MultiViewFrame,
    buffer: ExperienceBuffer,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainBatch:
    """(1 - replay_fraction) current-frame rays plus replayed records drawn
    proportionally to sub-buffer sizes; all current when the buffer is empty."""
    n_replay = int(round(cfg.replay_fraction * cfg.batch_rays))
    if len(buffer) == 0 or not cfg.use_replay:
        n_replay = 0
    n_current = cfg.batch_rays - n_replay
    origins, dirs, vi, pixels, gts = sample_current_rays(frame, n_current, cfg, rng)
    replay = buffer.sample(n_replay, rng) if n_replay else []
    return TrainBatch(
        origins=origins, dirs=dirs, view_ids=vi, pixels=pixels,
        gt_colors=gts, replay=replay,
    )


# ---------------------------------------------------------------------------
# Replay term: re-render frozen records under the current networks
# ---------------------------------------------------------------------------


def replay_forward_backward(
    records: Sequence[RaySampleRecord], mlp: nn.MlpParams, loss_scale: float
):
    """Render replayed records with current blending weights and return
    (colors (R,3), per-record squared errors, mlp grads scaled by loss_scale).

    Only blend weights and the blended color are recomputed; features,
    per-view colors, and compositing weights stay frozen.
    """
    R = len(records)
    feats = np.concatenate([r.features.reshape(-1, r.features.shape[-1]) for r in records])
    m_per = np.array([len(r.point_weights) for r in records])
    k = records[0].features.shape[1]
    valid = np.concatenate([r.valid for r in records])  # (P, k)
    vcolors = np.concatenate([r.view_colors for r in records])  # (P, k, 3)
    pw = np.concatenate([r.point_weights for r in records]).astype(np.float64)
    ray_of_point = np.repeat(np.arange(R), m_per)

    logits, tape = nn.mlp_forward(
        mlp, feats.astype(mlp.weights[0].dtype, copy=False)
    )
    logits = logits.reshape(-1, k)
    masked = np.where(valid, logits, -np.inf)
    any_valid = valid.any(axis=1)
    masked = np.where(any_valid[:, None], masked, 0.0)
    wb = nn.softmax(masked, axis=1)
    pt_colors = np.einsum("pk,pkc->pc", wb, vcolors.astype(np.float64))
    pt_colors = pt_colors * any_valid[:, None]

    colors = np.stack([r.base_color.astype(np.float64) for r in records])
    np.add.at(colors, ray_of_point, pw[:, None] * pt_colors)

    gts = np.stack([r.gt_color.astype(np.float64) for r in records])
    resid = colors - gts
    errors = (resid**2).mean(axis=1)

    gray = 2.0 * resid * loss_scale  # d(loss)/d(ray color)
    gpt = pw[:, None] * gray[ray_of_point] * any_valid[:, None]
    gwb = np.einsum("pc,pkc->pk", gpt, vcolors.astype(np.float64))
    glogits = nn.softmax_backward(wb, gwb, axis=1) * valid
    mlp_grads, _ = nn.mlp_backward(tape, glogits.reshape(-1, 1))
    return colors, errors, mlp_grads


# ---------------------------------------------------------------------------
# Record capture from a render tape
# ---------------------------------------------------------------------------


def capture_records(
    tape: RenderTape,
    batch: TrainBatch,
    errors: np.ndarray,
    frame_idx: int,
    state: TrainerState,
) -> list:
    """Freeze the batch's current-frame rays into replay records."""
    if tape.blend_tape is None:
        return []
    B, n_s, _ = tape.point_colors.shape
    bt = tape.blend_tape
    fdim3 = bt.mlp_tape.inputs[0].shape[-1]
    k = bt.valid.shape[1]
    fhat = bt.mlp_tape.inputs[0].reshape(-1, k, fdim3)
    usable = bt.valid.any(axis=1)  # active points some view actually sees
    active_pos = np.flatnonzero(tape.active)
    bg = tape.background

    # contiguous per-ray segments over the usable active points
    u_pos = active_pos[usable]
    fhat_u = fhat[usable].astype(np.float32)
    colors_u = bt.colors_k[usable].astype(np.float32)
    valid_u = bt.valid[usable]
    pw_u = tape.weights.reshape(-1)[u_pos].astype(np.float32)
    ray_u = u_pos // n_s
    order = np.argsort(ray_u, kind="stable")
    ray_sorted = ray_u[order]
    starts = np.searchsorted(ray_sorted, np.arange(B), side="left")
    ends = np.searchsorted(ray_sorted, np.arange(B), side="right")

    w_all = tape.weights.sum(axis=1)
    var_mass = np.bincount(ray_u, weights=pw_u.astype(np.float64), minlength=B)
    bases = ((tape.t_res + (w_all - var_mass))[:, None] * bg).astype(np.float32)
    gts = batch.gt_colors.astype(np.float32)

    records = []
    for b in range(B):
        sel = order[starts[b] : ends[b]]
        records.append(
            RaySampleRecord(
                features=fhat_u[sel],
                view_colors=colors_u[sel],
                valid=valid_u[sel],
                point_weights=pw_u[sel],
                base_color=bases[b],
                gt_color=gts[b],
                frame=frame_idx,
                view=int(batch.view_ids[b]),
                pixel=(int(batch.pixels[b, 0]), int(batch.pixels[b, 1])),
                error=float(errors[b]),
                serial=state.next_serial(),
            )
        )
    return records


def motion_flags(
    batch: TrainBatch, next_frame: Optional[MultiViewFrame], tau: float
) -> np.ndarray:
    """True where the ground-truth pixel moves more than tau (L-inf over RGB)
    between this frame and the next."""
    n = len(batch.gt_colors)
    if next_frame is None:
        return np.zeros(n, dtype=bool)
    flags = np.zeros(n, dtype=bool)
    for i in range(n):
        v = int(batch.view_ids[i])
        px, py = int(batch.pixels[i, 0]), int(batch.pixels[i, 1])
        nxt = next_frame.images[v][py, px]
        flags[i] = np.max(np.abs(nxt - batch.gt_colors[i])) > tau
    return flags


def update_buffer(
    records: Sequence[RaySampleRecord],
    flags: np.ndarray,
    buffer: ExperienceBuffer,
) -> None:
    buffer.update(records, flags)


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------


def visibility_decay(
    grid: DensityGrid, tape: RenderTape, rate: float, step_cap: float
) -> None:
    """Pull voxels toward the empty density, scaled by the mean transmittance
    the batch rays carried into them. Occluded space (T ~ 0) stays put, and
    the per-step pull is capped below the optimizer step size so supported
    surfaces always win the tug of war."""
    if rate <= 0.0:
        return
    size = grid.values.size
    t_flat = tape.trans.reshape(-1)
    w = tape.tri_w * tape.inside[:, None]
    num = np.bincount(
        tape.flat_idx.ravel(), weights=(w * t_flat[:, None]).ravel(), minlength=size
    )
    den = np.bincount(tape.flat_idx.ravel(), weights=w.ravel(), minlength=size)
    touched = den > 1e-12
    vis = np.zeros(size)
    vis[touched] = num[touched] / den[touched]
    # ramp: only voxels the rays pass through nearly unattenuated decay;
    # partially occluded surface shells are spared
    ramp = np.clip((vis[touched] - 0.7) / 0.3, 0.0, 1.0)
    g = grid.values.ravel()
    pull = rate * ramp * (g[touched] - grid.empty_raw)
    g[touched] -= np.clip(pull, 0.0, step_cap).astype(g.dtype)


@dataclass
class StepResult:
    loss: float
    loss_current: float
    loss_replay: float
    ray_errors: np.ndarray  # per current-frame ray
    tape: Optional[RenderTape]


def train_step(
    batch: TrainBatch,
    grid: DensityGrid,
    grid_adam: nn.Adam,
    state: TrainerState,
    ft: FrameTensors,
    featmaps: Optional[np.ndarray],
    enc_tapes: Optional[list],
    cfg: TrainConfig,
    update_networks: bool,
    keep_tape: bool = False,
) -> StepResult:
    """One optimization transaction: photometric loss on current rays plus
    the replay term, a single Adam apply. grid_adam is per-frame; network
    moments live in the shared state optimizer."""
    march = cfg.march(jitter=cfg.jitter)
    mlp = state.mlp if cfg.use_blend_net else None
    fmaps = featmaps if cfg.use_blend_net else None
    colors, _, tape = render_rays(
        batch.origins, batch.dirs, grid, ft, march,
        mlp=mlp, featmaps=fmaps, exclude=batch.view_ids,
        rng=state.rng, want_tape=True, net_tape=update_networks,
    )
    resid = colors - batch.gt_colors
    B = len(colors)
    loss_cur = float((resid**2).mean())
    ray_errors = (resid**2).mean(axis=1)

    gcolors = 2.0 * resid / (B * 3)
    grads = render_rays_backward(tape, gcolors)

    loss_rep = 0.0
    mlp_rep_grads = None
    if batch.replay:
        scale = 1.0 / (len(batch.replay) * 3)
        rep_colors, rep_errors, mlp_rep_grads = replay_forward_backward(
            batch.replay, state.mlp, scale
        )
        loss_rep = float(
            ((rep_colors - np.stack([r.gt_color for r in batch.replay])) ** 2).mean()
        )
        for rec, err in zip(batch.replay, rep_errors):
            rec.error = float(err)

    loss = loss_cur + loss_rep
    if not np.isfinite(loss):
        raise DivergedError(f"loss diverged ({loss})")

    # grid step
    grid_adam.step(
        {"grid": grid.values}, {"grid": grads.grid_values}, cfg.lr_grid
    )
    visibility_decay(grid, tape, cfg.refine_vis_decay, 0.35 * cfg.lr_grid)
    # network step
    if update_networks and cfg.use_blend_net:
        net_params = state.mlp.param_dict()
        net_grads = {}
        if grads.mlp is not None:
            net_grads.update(grads.mlp.param_dict())
        if mlp_rep_grads is not None:
            rep = mlp_rep_grads.param_dict()
            for name in rep:
                net_grads[name] = net_grads.get(name, 0.0) + rep[name]
        if grads.featmaps is not None and enc_tapes is not None:
            enc_total = None
            for v, etape in enumerate(enc_tapes):
                g = nn.encoder_backward(etape, grads.featmaps[v])
                if enc_total is None:
                    enc_total = g
                else:
                    enc_total.w1 += g.w1
                    enc_total.b1 += g.b1
                    enc_total.w2 += g.w2
                    enc_total.b2 += g.b2
            net_params.update(state.encoder.param_dict())
            net_grads.update(enc_total.param_dict())
        if net_grads:
            state.adam.step(net_params, net_grads, cfg.lr_net)

    return StepResult(
        loss=loss,
        loss_current=loss_cur,
        loss_replay=loss_rep,
        ray_errors=ray_errors,
        tape=tape if keep_tape else None,
    )


# ---------------------------------------------------------------------------
# Coarse density reconstruction
# ---------------------------------------------------------------------------


def coarse_density_init(
    group: SequenceGroup,
    bbox_min,
    bbox_max,
    prev_grid: Optional[DensityGrid],
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    log=None,
):
    """Per-frame grids from photometric loss under the fixed uniform-blend
    color model (mean of the coarse_k nearest views), warm started frame to
    frame. Returns (AlignedGroupGrids, per-frame stats)."""
    rng = rng or np.random.Generator(np.random.PCG64(cfg.seed + 17))
    march = cfg.march(jitter=True, k_views=cfg.coarse_k)
    grids = []
    stats = []
    prev = prev_grid
    for frame in group.frames:
        warm = prev is not None and prev.values.shape == (cfg.grid_dim,) * 3
        if warm:
            grid = prev.copy()
        else:
            grid = empty_grid(bbox_min, bbox_max, (cfg.grid_dim,) * 3)
            grid.values[:] = cfg.coarse_init_raw
        max_iters = cfg.coarse_iters
        if warm and cfg.coarse_warm_iters is not None:
            max_iters = min(max_iters, cfg.coarse_warm_iters)
        ft = frame_tensors(frame)
        adam = nn.Adam()
        iters_run = 0
        final_loss = np.inf
        for it in range(max_iters):
            origins, dirs, vi, _, gts = sample_current_rays(
                frame, cfg.batch_rays, cfg, rng
            )
            colors, _, tape = render_rays(
                origins, dirs, grid, ft, march,
                exclude=vi, rng=rng, want_tape=True,
            )
            resid = colors - gts
            loss = float((resid**2).mean())
            if not np.isfinite(loss):
                raise DivergedError(f"init-diverged at frame {frame.time_index}")
            gcolors = 2.0 * resid / resid.size
            grads = render_rays_backward(tape, gcolors)
            adam.step({"grid": grid.values}, {"grid": grads.grid_values}, cfg.lr_grid)
            visibility_decay(grid, tape, cfg.coarse_vis_decay, 0.35 * cfg.lr_grid)
            iters_run = it + 1
            final_loss = loss
            if cfg.coarse_loss_target is not None and loss <= cfg.coarse_loss_target:
                break
        if log is not None:
            log.write(
                {"stage": "coarse", "frame": frame.time_index,
                 "iters": iters_run, "loss": final_loss}
            )
        stats.append({"frame": frame.time_index, "iters": iters_run, "loss": final_loss})
        grids.append(grid)
        prev = grid
    return align_group(grids), stats


# ---------------------------------------------------------------------------
# Group training
# ---------------------------------------------------------------------------


def train_group(
    group: SequenceGroup,
    state: TrainerState,
    cfg: TrainConfig,
    bbox_min,
    bbox_max,
    log=None,
):
    """Run the three-stage scheme on one group; returns the refined aligned
    grids. Image data of previous groups is never touched."""
    aligned, _ = coarse_density_init(
        group, bbox_min, bbox_max, state.last_grid, cfg, state.rng, log=log
    )
    grids = [g for g in aligned.grids]

    for fi, frame in enumerate(group.frames):
        grid = grids[fi]
        grid_adam = nn.Adam()
        ft = frame_tensors(frame)
        is_cl = fi == 0
        iters = cfg.cl_iters if is_cl else cfg.density_iters
        next_frame = group.frames[fi + 1] if fi + 1 < len(group.frames) else None
        featmaps, enc_tapes = None, None
        if cfg.use_blend_net and not is_cl:
            featmaps = compute_featmaps(state.encoder, ft)
        for it in range(iters):
            if cfg.use_blend_net and is_cl:
                featmaps, enc_tapes = compute_featmaps(
                    state.encoder, ft, want_tapes=True
                )
            capture = (
                is_cl and cfg.use_replay and cfg.use_blend_net
                and it % cfg.buffer_update_every == 0
            )
            batch = make_batch(frame, state.buffer, cfg, state.rng)
            res = train_step(
                batch, grid, grid_adam, state, ft, featmaps, enc_tapes, cfg,
                update_networks=is_cl, keep_tape=capture,
            )
            if capture:
                recs = capture_records(
                    res.tape, batch, res.ray_errors, frame.time_index, state
                )
                flags = motion_flags(batch, next_frame, cfg.tau)
                update_buffer(recs, flags, state.buffer)
                state.accounting.buffer_size(state.buffer.nbytes)
            if log is not None and (it % 50 == 0 or it == iters - 1):
                log.write(
                    {
                        "stage": "cl" if is_cl else "density",
                        "group": group.group_start,
                        "frame": frame.time_index,
                        "step": it,
                        "loss_current": res.loss_current,
                        "loss_replay": res.loss_replay,
                    }
                )
    state.last_grid = grids[-1]
    return AlignedGroupGrids(grids=grids)


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def evaluate_frame(
    frame: MultiViewFrame,
    grid: DensityGrid,
    state: TrainerState,
    cfg: TrainConfig,
    view_ids: Sequence[int],
    n_s: Optional[int] = None,
) -> list:
    """Rendered-vs-ground-truth PSNR per requested view."""
    march = cfg.march(jitter=False, n_s=n_s or max(cfg.n_s, 96))
    ft = frame_tensors(frame)
    featmaps = None
    mlp = None
    if cfg.use_blend_net:
        featmaps = compute_featmaps(state.encoder, ft)
        mlp = state.mlp
    out = []
    for v in view_ids:
        img = renderer.render_image(
            frame, grid, frame.cameras[v], march,
            mlp=mlp, featmaps=featmaps, ft=ft,
        )
        out.append(renderer.psnr(img, frame.images[v]))
    return out


class TrainLogger:
    """Append-only JSON-lines log."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self._fh = open(path, "a") if path else None

    def write(self, entry: dict) -> None:
        if self._fh:
            json.dump(entry, self._fh, sort_keys=True)
            self._fh.write("\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None
