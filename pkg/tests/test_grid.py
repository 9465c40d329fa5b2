import numpy as np
import pytest

import mpmath

from nevrf.errors import FormatError, OutOfBoundsError
from nevrf.grid import (
    AlignedGroupGrids,
    DensityGrid,
    align_group,
    empty_grid,
    grid_flat_values,
    interp_density,
    interp_gradient,
    interp_weights,
    load_nvgd,
    raw_to_alpha,
    raw_to_alpha_grad,
    save_nvgd,
    EMPTY_RAW,
    DENSITY_SHIFT,
)


def random_grid(rng, dims=(5, 6, 7), lo=-2.0, hi=4.0, bbox=((-1, -1, -1), (1, 1, 1))):
    return DensityGrid(
        bbox_min=np.array(bbox[0], dtype=np.float64),
        bbox_max=np.array(bbox[1], dtype=np.float64),
        values=rng.uniform(lo, hi, size=dims),
    )


def trilinear_oracle(grid, x):
    """Direct 8-corner weighted sum, written independently of interp_weights."""
    f = (np.asarray(x) - grid.bbox_min) / grid.voxel_size
    i = np.floor(f).astype(int)
    i = np.minimum(i, np.array(grid.dims) - 2)
    i = np.maximum(i, 0)
    t = f - i
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (t[0] if dx else 1 - t[0])
                    * (t[1] if dy else 1 - t[1])
                    * (t[2] if dz else 1 - t[2])
                )
                acc += w * grid.values[i[0] + dx, i[1] + dy, i[2] + dz]
    return acc


class TestInterpDensity:
    def test_value_at_node(self, rng):
        g = random_grid(rng)
        for _ in range(20):
            idx = [int(rng.integers(0, d)) for d in g.dims]
            x = g.node_position(*idx)
            assert interp_density(g, x) == pytest.approx(
                g.values[tuple(idx)], abs=1e-9
            )

    def test_constant_cell_center(self, rng):
        g = empty_grid([-1, -1, -1], [1, 1, 1], (4, 4, 4))
        g.values[:] = 3.0
        center = g.bbox_min + 1.5 * g.voxel_size
        assert interp_density(g, center) == pytest.approx(3.0, abs=1e-12)

    def test_matches_direct_formula_oracle(self, rng):
        for _ in range(1000):
            g = random_grid(rng, dims=tuple(rng.integers(2, 8, size=3)))
            x = rng.uniform(g.bbox_min, g.bbox_max)
            assert interp_density(g, x) == pytest.approx(
                trilinear_oracle(g, x), abs=1e-6
            )

    def test_outside_returns_empty_constant(self, rng):
        g = random_grid(rng)
        assert interp_density(g, [5.0, 0.0, 0.0]) == EMPTY_RAW

    def test_continuity_across_cell_faces(self, rng):
        g = random_grid(rng, dims=(6, 6, 6), lo=-1.0, hi=1.0)
        eps = 1e-5
        for _ in range(100):
            axis = rng.integers(0, 3)
            idx = int(rng.integers(1, g.dims[axis] - 1))
            x = rng.uniform(g.bbox_min + 1e-3, g.bbox_max - 1e-3)
            x[axis] = g.bbox_min[axis] + idx * g.voxel_size[axis]
            lo, hi = x.copy(), x.copy()
            lo[axis] -= eps
            hi[axis] += eps
            assert abs(interp_density(g, hi) - interp_density(g, lo)) < 1e-3


class TestInterpGradient:
    def test_weight_one_at_node(self, rng):
        g = random_grid(rng)
        x = g.node_position(2, 3, 4)
        pairs = interp_gradient(g, x)
        weights = {i: w for i, w in pairs}
        target = np.ravel_multi_index((2, 3, 4), g.dims)
        assert weights[target] == pytest.approx(1.0, abs=1e-9)
        assert sum(w for _, w in pairs) == pytest.approx(1.0, abs=1e-9)

    def test_cell_center_uniform_weights(self, rng):
        g = random_grid(rng)
        x = g.bbox_min + 1.5 * g.voxel_size
        pairs = interp_gradient(g, x)
        for _, w in pairs:
            assert w == pytest.approx(0.125, abs=1e-9)

    def test_outside_raises(self, rng):
        g = random_grid(rng)
        with pytest.raises(OutOfBoundsError):
            interp_gradient(g, [5.0, 0.0, 0.0])

    def test_matches_finite_differences(self, rng):
        h = 1e-4
        for _ in range(50):
            g = random_grid(rng, dims=(4, 5, 4))
            x = rng.uniform(g.bbox_min, g.bbox_max)
            for flat, w in interp_gradient(g, x):
                orig = g.values.flat[flat]
                g.values.flat[flat] = orig + h
                up = interp_density(g, x)
                g.values.flat[flat] = orig - h
                dn = interp_density(g, x)
                g.values.flat[flat] = orig
                fd = (up - dn) / (2 * h)
                if abs(fd) > 1e-9:
                    assert abs(fd - w) / max(abs(fd), 1e-9) < 1e-6

    def test_weights_nonnegative_sum_one(self, rng):
        g = random_grid(rng)
        pts = rng.uniform(g.bbox_min, g.bbox_max, size=(500, 3))
        _, w, inside = interp_weights(g, pts)
        assert inside.all()
        assert (w >= 0).all()
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)


class TestRawToAlpha:
    def test_negative_infinity_limit(self):
        assert raw_to_alpha(-1e9, 0.5) == pytest.approx(0.0, abs=1e-300)

    def test_closed_form_half(self):
        # raw=0 with shift 0: alpha = 0.5 exactly at step ln2 / softplus(0)
        step = np.log(2.0) / np.log(2.0)
        assert raw_to_alpha(0.0, step, shift=0.0) == pytest.approx(0.5, abs=1e-12)

    def test_matches_extended_precision_oracle(self, rng):
        mpmath.mp.dps = 50
        for _ in range(200):
            raw = float(rng.uniform(-8, 8))
            step = float(rng.uniform(0.01, 2.0))
            sp = mpmath.log(1 + mpmath.exp(raw + DENSITY_SHIFT))
            expect = float(1 - mpmath.exp(-sp * step))
            got = float(raw_to_alpha(raw, step))
            assert got == pytest.approx(expect, rel=1e-7)

    def test_compositing_consistency(self, rng):
        for _ in range(200):
            raw = float(rng.uniform(-8, 8))
            s1, s2 = rng.uniform(0.01, 1.0, size=2)
            whole = raw_to_alpha(raw, s1 + s2)
            split = 1 - (1 - raw_to_alpha(raw, s1)) * (1 - raw_to_alpha(raw, s2))
            assert whole == pytest.approx(split, abs=1e-6)

    def test_monotone_in_raw(self):
        raws = np.linspace(-10, 10, 101)
        alphas = raw_to_alpha(raws, 0.3)
        assert (np.diff(alphas) > 0).all()
        assert (alphas >= 0).all() and (alphas < 1).all()

    def test_gradient_matches_finite_difference(self, rng):
        h = 1e-6
        for _ in range(100):
            raw = float(rng.uniform(-6, 6))
            step = float(rng.uniform(0.05, 1.0))
            fd = (raw_to_alpha(raw + h, step) - raw_to_alpha(raw - h, step)) / (2 * h)
            assert raw_to_alpha_grad(raw, step) == pytest.approx(fd, rel=1e-6)


class TestAlignGroup:
    def test_shared_bbox_is_bit_identical(self, rng):
        grids = [random_grid(rng, dims=(4, 4, 4)) for _ in range(3)]
        for g in grids[1:]:
            g.bbox_min = grids[0].bbox_min.copy()
            g.bbox_max = grids[0].bbox_max.copy()
        out = align_group(grids)
        for a, b in zip(out.grids, grids):
            assert a is b  # pass-through, nothing resampled

    def test_single_grid_identity(self, rng):
        g = random_grid(rng)
        out = align_group([g])
        assert out.grids[0] is g

    def test_integer_voxel_shift(self, rng):
        # second grid offset by exactly one voxel along x: after alignment its
        # values appear at indices shifted by one
        vals = rng.uniform(-1, 1, size=(4, 4, 4)).astype(np.float64)
        h = 2.0 / 3.0  # voxel size for 4 nodes over [-1, 1]
        g0 = DensityGrid(
            bbox_min=np.array([-1.0, -1.0, -1.0]),
            bbox_max=np.array([1.0, 1.0, 1.0]),
            values=vals.copy(),
        )
        g1 = DensityGrid(
            bbox_min=np.array([-1.0 + h, -1.0, -1.0]),
            bbox_max=np.array([1.0 + h, 1.0, 1.0]),
            values=vals.copy(),
        )
        out = align_group([g0, g1])
        a0, a1 = out.grids
        assert a0.dims == (5, 4, 4)
        # grid0 occupies x-slots 0..3, grid1 occupies 1..4
        assert np.array_equal(a0.values[:4], vals)
        assert np.array_equal(a1.values[1:], vals)
        assert np.all(a0.values[4] == g0.empty_raw)
        assert np.all(a1.values[0] == g1.empty_raw)

    def test_mismatched_dims_rejected_by_container(self, rng):
        g0 = random_grid(rng, dims=(4, 4, 4))
        g1 = random_grid(rng, dims=(5, 4, 4))
        with pytest.raises(Exception):
            AlignedGroupGrids(grids=[g0, g1])


class TestNvgdFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        g = random_grid(rng, dims=(4, 3, 5))
        g.values = g.values.astype(np.float32)
        path = str(tmp_path / "g.nvgd")
        save_nvgd(path, g)
        back = load_nvgd(path)
        assert back.dims == g.dims
        assert np.array_equal(back.values, g.values)
        assert np.allclose(back.bbox_min, g.bbox_min, atol=1e-7)

    def test_x_fastest_ordering(self, rng):
        g = random_grid(rng, dims=(3, 4, 5))
        flat = grid_flat_values(g)
        # entry at flat position x + Nx*(y + Ny*z)
        nx, ny, nz = g.dims
        for _ in range(30):
            x, y, z = (int(rng.integers(0, d)) for d in g.dims)
            assert flat[x + nx * (y + ny * z)] == np.float32(g.values[x, y, z])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.nvgd"
        p.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_nvgd(str(p))

    def test_truncated_rejected(self, tmp_path, rng):
        g = random_grid(rng, dims=(3, 3, 3))
        path = str(tmp_path / "g.nvgd")
        save_nvgd(path, g)
        data = open(path, "rb").read()
        p2 = tmp_path / "trunc.nvgd"
        p2.write_bytes(data[:-5])
        with pytest.raises(FormatError):
            load_nvgd(str(p2))
