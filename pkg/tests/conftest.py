import numpy as np
import pytest

from nevrf import synth
from nevrf.scene import MultiViewFrame, SequenceGroup, View


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_camera(rng, width=32, height=24, focal=30.0):
    """Random pose looking roughly at the origin from a random direction."""
    eye = rng.normal(size=3)
    eye = eye / np.linalg.norm(eye) * rng.uniform(2.0, 4.0)
    target = rng.normal(scale=0.1, size=3)
    ext = synth._look_at(eye, target)
    K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
    from nevrf.scene import Camera

    return Camera(intrinsics=K, extrinsics=ext, width=width, height=height)


def sphere_scene_spec(
    n_frames=1,
    n_cameras=12,
    size=48,
    elevations=(18.0, -18.0),
    extra_primitives=(),
    radius=0.45,
    focal=48.0,
):
    prims = [
        synth.Primitive(
            kind="sphere",
            center=np.zeros(3),
            radius=radius,
            texture=synth.Texture(
                "checker",
                np.array([[0.9, 0.2, 0.2], [0.95, 0.85, 0.3]]),
                scale=0.22,
            ),
        )
    ]
    prims.extend(extra_primitives)
    rig = synth.RigSpec(
        n_cameras=n_cameras,
        radius=2.6,
        elevations_deg=elevations,
        focal_px=focal,
        width=size,
        height=size,
    )
    return synth.SceneSpec(
        primitives=prims,
        rig=rig,
        n_frames=n_frames,
        bbox_min=-0.7 * np.ones(3),
        bbox_max=0.7 * np.ones(3),
    )


def render_group(spec, t0=0, t1=None):
    """Materialize a SequenceGroup of analytically rendered frames."""
    t1 = spec.n_frames - 1 if t1 is None else t1
    cams = synth.rig_cameras(spec.rig)
    frames = []
    for t in range(t0, t1 + 1):
        views = tuple(
            View(c, synth.analytic_render(spec, t, c)[0].astype(np.float32))
            for c in cams
        )
        frames.append(MultiViewFrame(time_index=t, views=views))
    return SequenceGroup(frames=tuple(frames), group_start=t0, group_end=t1)
