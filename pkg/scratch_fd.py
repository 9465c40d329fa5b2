"""Scratch finite-difference audit of the differentiable chain."""
import numpy as np

from nevrf import blending, nn
from nevrf.grid import DensityGrid, empty_grid
from nevrf.renderer import FrameTensors, RayMarchConfig, render_rays, render_rays_backward
from nevrf.scene import Camera, MultiViewFrame, View
from nevrf.synth import RigSpec, rig_cameras

rng = np.random.default_rng(0)


def make_frame(n_views=6, size=16):
    rig = RigSpec(n_cameras=n_views, radius=3.0, elevations_deg=(15.0, -10.0),
                  focal_px=18.0, width=size, height=size)
    cams = rig_cameras(rig)
    views = [View(c, rng.uniform(0, 1, (size, size, 3))) for c in cams]
    return MultiViewFrame(time_index=0, views=tuple(views))


def loss_of(colors):
    return float((colors ** 2).sum())


frame = make_frame()
ft = FrameTensors(cams=blending.stack_cameras(frame.cameras),
                  images=np.stack([v.image for v in frame.views]))
F = 4
mlp = nn.init_mlp([3 * F + 1, 16, 16, 1], rng, dtype=np.float64)
featmaps = rng.uniform(-1, 1, (len(frame.views), 16, 16, F))

grid = empty_grid([-1, -1, -1], [1, 1, 1], (8, 8, 8), dtype=np.float64)
grid.values[:] = rng.uniform(-2, 4, grid.values.shape)

cfg = RayMarchConfig(n_s=16, background=np.array([0.2, 0.3, 0.4]), k_views=3, exact=True)
origins = np.stack([c.center for c in frame.cameras[:2]])
dirs = -origins / np.linalg.norm(origins, axis=-1, keepdims=True)

colors, aux, tape = render_rays(origins, dirs, grid, ft, cfg, mlp=mlp,
                                featmaps=featmaps, want_tape=True)
print("colors", colors)
gcolors = 2.0 * colors
grads = render_rays_backward(tape, gcolors)

h = 1e-5


def render_loss():
    c, _, _ = render_rays(origins, dirs, grid, ft, cfg, mlp=mlp, featmaps=featmaps)
    return loss_of(c)


# grid FD on a few touched values
idx = np.argsort(-np.abs(grads.grid_values.ravel()))[:5]
for i in idx:
    orig = grid.values.ravel()[i]
    grid.values.ravel()[i] = orig + h
    lp = render_loss()
    grid.values.ravel()[i] = orig - h
    lm = render_loss()
    grid.values.ravel()[i] = orig
    fd = (lp - lm) / (2 * h)
    an = grads.grid_values.ravel()[i]
    print(f"grid[{i}] fd={fd:+.8f} an={an:+.8f} rel={abs(fd-an)/max(1e-12,abs(fd)):.2e}")

# mlp FD
w = mlp.weights[0]
gw = grads.mlp.weights[0]
for (r, c) in [(0, 0), (3, 5), (10, 2)]:
    orig = w[r, c]
    w[r, c] = orig + h
    lp = render_loss()
    w[r, c] = orig - h
    lm = render_loss()
    w[r, c] = orig
    fd = (lp - lm) / (2 * h)
    an = gw[r, c]
    print(f"mlpW0[{r},{c}] fd={fd:+.8f} an={an:+.8f} rel={abs(fd-an)/max(1e-12,abs(fd)):.2e}")

# featmap FD
gm = grads.featmaps
fi = np.argsort(-np.abs(gm.ravel()))[:4]
for i in fi:
    orig = featmaps.ravel()[i]
    featmaps.ravel()[i] = orig + h
    lp = render_loss()
    featmaps.ravel()[i] = orig - h
    lm = render_loss()
    featmaps.ravel()[i] = orig
    fd = (lp - lm) / (2 * h)
    an = gm.ravel()[i]
    print(f"fmap[{i}] fd={fd:+.8f} an={an:+.8f} rel={abs(fd-an)/max(1e-12,abs(fd)):.2e}")

# encoder FD through featmaps
enc = nn.init_encoder(rng, hidden=6, feature_dim=F, dtype=np.float64)
img = rng.uniform(0, 1, (9, 9, 3))
fmap, etape = nn.encode_features(enc, img, want_tape=True)
gout = rng.normal(size=fmap.shape)
egr = nn.encoder_backward(etape, gout)


def enc_loss():
    return float((nn.encode_features(enc, img) * gout).sum())


for name, arr, gvals in [("w1", enc.w1, egr.w1), ("w2", enc.w2, egr.w2),
                         ("b1", enc.b1, egr.b1)]:
    flat = arr.ravel()
    gflat = gvals.ravel()
    for i in [0, len(flat) // 2]:
        orig = flat[i]
        flat[i] = orig + h
        lp = enc_loss()
        flat[i] = orig - h
        lm = enc_loss()
        flat[i] = orig
        fd = (lp - lm) / (2 * h)
        an = gflat[i]
        print(f"enc {name}[{i}] fd={fd:+.8f} an={an:+.8f} rel={abs(fd-an)/max(1e-12,abs(fd)):.2e}")
