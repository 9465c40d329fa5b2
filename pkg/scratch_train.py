"""Scratch: coarse init occupancy + one CL frame timing at tiny scale."""
import time

import numpy as np

from nevrf import synth
from nevrf.grid import raw_to_alpha
from nevrf.scene import SequenceGroup, MultiViewFrame, View
from nevrf.training import TrainConfig, coarse_density_init, init_state, train_group

spec = synth.SceneSpec(
    primitives=[
        synth.Primitive(
            kind="sphere", center=np.zeros(3), radius=0.45,
            texture=synth.Texture("checker", np.array([[0.9, 0.2, 0.2], [0.95, 0.85, 0.3]]), scale=0.22),
        )
    ],
    rig=synth.RigSpec(n_cameras=12, radius=2.6, elevations_deg=(18.0, -18.0),
                      focal_px=48.0, width=48, height=48),
    n_frames=2,
    bbox_min=-0.7 * np.ones(3),
    bbox_max=0.7 * np.ones(3),
)

cams = synth.rig_cameras(spec.rig)
frames = []
for t in range(spec.n_frames):
    views = tuple(View(c, synth.analytic_render(spec, t, c)[0].astype(np.float32)) for c in cams)
    frames.append(MultiViewFrame(time_index=t, views=views))
group = SequenceGroup(frames=tuple(frames), group_start=0, group_end=spec.n_frames - 1)

cfg = TrainConfig(
    batch_rays=1024, coarse_iters=150, cl_iters=30, density_iters=20,
    grid_dim=32, n_s=48, test_views=(5, 11), seed=0,
)

t0 = time.time()
rng = np.random.default_rng(0)
aligned, stats = coarse_density_init(group, spec.bbox_min, spec.bbox_max, None, cfg, rng)
t1 = time.time()
print(f"coarse init: {t1-t0:.1f}s for {len(group)} frames ({stats[0]['iters']} iters each)")
print("final losses:", [f"{s['loss']:.5f}" for s in stats])

g = aligned.grids[0]
alpha_unit = raw_to_alpha(g.values.astype(np.float64), 1.0)
occupied = alpha_unit > 0.5

# compare against true occupancy on the node lattice
axes = [np.linspace(g.bbox_min[a], g.bbox_max[a], g.dims[a]) for a in range(3)]
gx, gy, gz = np.meshgrid(*axes, indexing="ij")
nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
inside = synth.true_occupancy(spec, 0, nodes).reshape(g.dims)

h = float(g.voxel_size[0])
dist = np.linalg.norm(nodes, axis=-1).reshape(g.dims)
dilated = dist < (0.45 + 2 * h)

interior_covered = occupied[inside].mean() if inside.any() else 1.0
inside_dilation = (occupied & ~dilated).sum()
print(f"voxel size {h:.4f}; occupied={occupied.sum()}, interior nodes={inside.sum()}")
print(f"interior coverage: {interior_covered:.3f}")
print(f"occupied outside 2-voxel dilation: {inside_dilation}")

# CL timing
state = init_state(cfg)
t0 = time.time()
grids = train_group(group, state, cfg, spec.bbox_min, spec.bbox_max)
t1 = time.time()
print(f"train_group (30 CL + 20 dens iters): {t1-t0:.1f}s, buffer={len(state.buffer)}")
