"""Ray sampling and volume rendering tests."""

import math

import numpy as np
import pytest

from chromafield.color import AbBinTable
from chromafield.field import (
    FieldParams,
    GradBuffer,
    init_field,
    softplus_inv,
)
from chromafield.rendering import (
    Camera,
    PatchBoundsError,
    PatchSpec,
    RayBundle,
    clip_to_bbox,
    importance_sample,
    pixel_rays,
    render_backward,
    render_image,
    render_rays,
    sample_patch_rays,
    stratified_sample,
)


class FixedRng:
    """rng stub returning preset uniform draws."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def random(self, shape):
        return np.broadcast_to(self.values, shape).copy()


def small_table(q: int = 4) -> AbBinTable:
    centers = np.stack([np.arange(q) * 10.0 - 20.0, np.zeros(q)], axis=1)
    return AbBinTable(centers=centers, grid_step=10.0)


def make_camera(width=16, height=16, focal=20.0, dist=3.0) -> Camera:
    return Camera.look_at(
        eye=[dist, 0.0, 0.0], target=[0.0, 0.0, 0.0],
        width=width, height=height, focal=focal,
    )


def single_ray(t_near=0.0, t_far=2.0) -> RayBundle:
    return RayBundle(
        origins=np.array([[0.0, 0.0, 0.0]]),
        dirs=np.array([[1.0, 0.0, 0.0]]),
        t_near=np.array([t_near]),
        t_far=np.array([t_far]),
    )


class TestCamera:
    def test_orthonormal_enforced(self):
        with pytest.raises(ValueError):
            Camera(width=8, height=8, focal=10.0, rot=np.eye(3) * 2.0, pos=np.zeros(3))

    def test_principal_ray_hits_target(self):
        cam = make_camera()
        o, d = cam.cast(np.array([[cam.cx, cam.cy]]))
        # target = origin; ray from eye along d passes through it
        t = -(o[0] @ d[0]) / (d[0] @ d[0])
        closest = o[0] + t * d[0]
        assert np.linalg.norm(closest) < 1e-9

    def test_directions_unit(self):
        cam = make_camera()
        rays = pixel_rays(cam)
        np.testing.assert_allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-9)


class TestPatchRays:
    def test_unit_scale_coords(self):
        spec = PatchSpec(center=(10.0, 10.0), scale=1.0, size=2)
        coords = spec.pixel_coords().reshape(-1, 2)
        got = {tuple(c) for c in coords}
        assert got == {(9.0, 9.0), (9.0, 10.0), (10.0, 9.0), (10.0, 10.0)}

    def test_half_scale_offsets(self):
        spec = PatchSpec(center=(10.0, 10.0), scale=0.5, size=2)
        coords = spec.pixel_coords()
        np.testing.assert_allclose(coords[..., 0].min(), 9.5)
        np.testing.assert_allclose(coords[..., 0].max(), 10.0)

    def test_out_of_bounds_rejected(self):
        cam = make_camera(width=16, height=16)
        with pytest.raises(PatchBoundsError):
            sample_patch_rays(cam, PatchSpec(center=(1.0, 8.0), scale=1.0, size=8))

    def test_valid_patch_shape(self):
        cam = make_camera(width=32, height=32)
        pr = sample_patch_rays(cam, PatchSpec(center=(16.0, 16.0), scale=0.5, size=8))
        assert len(pr.rays) == 64
        assert pr.coords.shape == (8, 8, 2)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PatchSpec(center=(0, 0), scale=1.0, size=3)
        with pytest.raises(ValueError):
            PatchSpec(center=(0, 0), scale=0.0, size=4)


class TestStratified:
    def test_single_sample_in_range(self):
        rng = np.random.default_rng(0)
        t = stratified_sample(np.array([1.0]), np.array([2.0]), 1, rng)
        assert t.shape == (1, 1) and 1.0 <= t[0, 0] <= 2.0

    def test_midpoint_rng(self):
        rng = FixedRng(0.5)
        t = stratified_sample(np.array([0.0]), np.array([4.0]), 4, rng)
        np.testing.assert_allclose(t[0], [0.5, 1.5, 2.5, 3.5])

    def test_strictly_increasing(self):
        rng = np.random.default_rng(1)
        t = stratified_sample(np.zeros(100), np.full(100, 3.0), 16, rng)
        assert np.all(np.diff(t, axis=1) > 0)


class TestImportance:
    def test_all_zero_weights_uniform(self):
        rng = FixedRng(np.array([0.25, 0.75]))
        t = importance_sample(
            np.array([[0.0, 1.0]]), np.array([[0.0, 0.0]]), 2, rng,
            t_near=np.array([0.0]), t_far=np.array([2.0]),
        )
        np.testing.assert_allclose(t[0], [0.5, 1.5])

    def test_single_interval_mass(self):
        rng = np.random.default_rng(2)
        t = importance_sample(
            np.array([[0.0, 1.0, 2.0]]), np.array([[0.0, 5.0, 0.0]]), 32, rng,
            t_near=np.array([0.0]), t_far=np.array([3.0]),
        )
        assert np.all((t >= 1.0) & (t <= 2.0))

    def test_hand_inverted_cdf(self):
        # weights (1, 3) on unit intervals [0,1) and [1,2): CDF slope 0.25
        # then 0.75; quantiles 0.125, 0.5, 0.875 invert to 0.5, 4/3, 11/6.
        rng = FixedRng(np.array([0.125, 0.5, 0.875]))
        t = importance_sample(
            np.array([[0.0, 1.0]]), np.array([[1.0, 3.0]]), 3, rng,
            t_near=np.array([0.0]), t_far=np.array([2.0]),
        )
        np.testing.assert_allclose(t[0], [0.5, 4.0 / 3.0, 11.0 / 6.0], atol=1e-6)


def constant_field(sigma, lum, q=4, res=(2, 2, 2)) -> FieldParams:
    p = init_field([-1, -1, -1], [1, 1, 1], res, small_table(q))
    if sigma == 0.0:
        p.density_raw[:] = -60.0  # softplus(-60) ~ 1e-26
    else:
        p.density_raw[:] = softplus_inv(sigma)
    p.lum_raw[:] = 60.0 if lum == 1.0 else math.log(lum / (1 - lum))
    return p


class TestRenderRays:
    def test_empty_space_black(self):
        p = constant_field(0.0, 0.5)
        res = render_rays(p, single_ray(), 8, 8, np.random.default_rng(0))
        assert abs(res.lum[0]) < 1e-12
        assert np.all(res.weights < 1e-12)

    def test_opaque_first_sample(self):
        p = constant_field(1e5, 0.75)
        rng = np.random.default_rng(0)
        res = render_rays(p, single_ray(t_far=1.5), 8, 8, rng)
        assert abs(res.lum[0] - 0.75) < 1e-6
        assert abs(res.weights[0, 0] - 1.0) < 1e-9

    def test_two_sample_closed_form(self):
        # sigma*delta = ln 2 for both samples, lum = 1:
        # weights (0.5, 0.25), L = 0.75.
        sigma = 2.0
        delta = math.log(2.0) / sigma
        p = constant_field(sigma, 1.0)
        ray = single_ray(t_near=0.0, t_far=2 * delta)
        ts = np.array([[0.0, delta]])
        res = render_rays(p, ray, 2, 0, np.random.default_rng(0), ts=ts)
        np.testing.assert_allclose(res.weights[0], [0.5, 0.25], atol=1e-9)
        assert abs(res.lum[0] - 0.75) < 1e-9

    def test_transmittance_monotone_weight_sum(self):
        rng = np.random.default_rng(3)
        p = init_field([-1, -1, -1], [1, 1, 1], (4, 4, 4), small_table())
        p.density_raw[:] = rng.normal(1.0, 2.0, size=p.density_raw.shape)
        cam = make_camera()
        rays = pixel_rays(cam)
        res = render_rays(p, rays, 16, 16, rng, keep_cache=True)
        trans = res.cache.trans
        assert np.all(np.diff(trans, axis=1) <= 1e-12)
        assert np.all(res.weights >= 0)
        assert np.all(res.weights.sum(axis=1) <= 1.0 + 1e-6)

    def test_color_dist_is_probability(self):
        rng = np.random.default_rng(4)
        p = init_field([-1, -1, -1], [1, 1, 1], (3, 3, 3), small_table())
        p.logits[:] = rng.normal(size=p.logits.shape)
        p.density_raw[:] = rng.normal(size=p.density_raw.shape)
        cam = make_camera(width=8, height=8)
        res = render_rays(p, pixel_rays(cam), 8, 8, rng)
        np.testing.assert_allclose(res.dist.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(res.dist >= 0)

    def test_quadrature_cauchy_convergence(self):
        # smooth analytic field: doubling M shrinks the change in L
        p = init_field([-1, -1, -1], [1, 1, 1], (8, 8, 8), small_table())
        xs = np.linspace(-1, 1, 8)
        gx, gy, gz = np.meshgrid(xs, xs, xs, indexing="ij")
        p.density_raw[:] = 2.0 * np.exp(-(gx**2 + gy**2 + gz**2))
        p.lum_raw[:] = gx + 0.3 * gy
        ray = single_ray(t_far=2.0)
        ray.origins[0] = [-1.0, 0.05, -0.02]
        vals = []
        for m in (16, 32, 64, 128):
            rng = FixedRng(0.5)  # midpoint quadrature, deterministic
            vals.append(render_rays(p, ray, m, 0, rng).lum[0])
        d1 = abs(vals[1] - vals[0])
        d2 = abs(vals[2] - vals[1])
        d3 = abs(vals[3] - vals[2])
        assert d2 < d1 and d3 < d2


class TestRenderBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(5)
        p = init_field([-1, -1, -1], [1, 1, 1], (2, 2, 2), small_table())
        res = render_rays(p, single_ray(), 4, 0, rng, keep_cache=True)
        g = GradBuffer.zeros_like(p)
        render_backward(p, res.cache, np.zeros(1), np.zeros((1, 4)), g)
        assert np.abs(g.density).max() == 0
        assert np.abs(g.lum).max() == 0
        assert np.abs(g.logits).max() == 0

    def test_single_sample_chain_rule(self):
        # d(lum_out)/d(raw lum at a corner) = weight * sigmoid' * trilinear w
        p = constant_field(2.0, 0.3)
        ray = single_ray(t_far=1.0)
        ts = np.array([[0.0]])
        res = render_rays(p, ray, 1, 0, np.random.default_rng(0), ts=ts, keep_cache=True)
        g = GradBuffer.zeros_like(p)
        render_backward(p, res.cache, np.ones(1), None, g)
        w1 = res.weights[0, 0]
        lum = res.cache.lum[0, 0]
        expect = w1 * lum * (1 - lum) * res.cache.w[0, 0]
        got = g.lum.reshape(-1)[res.cache.idx[0, 0]]
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        worst = 0.0
        for trial in range(25):
            q = 3
            p = init_field([-1, -1, -1], [1, 1, 1], (2, 2, 2), small_table(q))
            p.density_raw[:] = rng.normal(0.5, 1.0, size=p.density_raw.shape)
            p.lum_raw[:] = rng.normal(size=p.lum_raw.shape)
            p.logits[:] = rng.normal(size=p.logits.shape)
            n_rays = 3
            o = rng.uniform(-0.5, 0.5, size=(n_rays, 3))
            o[:, 0] = -1.5
            d = rng.normal(size=(n_rays, 3))
            d[:, 0] = np.abs(d[:, 0]) + 1.0
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            rays = RayBundle(o, d, np.full(n_rays, 1e-3), np.full(n_rays, 4.0))
            clipped = clip_to_bbox(rays, p.bbox_min, p.bbox_max)
            m = 4
            ts = stratified_sample(clipped.t_near, clipped.t_far, m, rng)
            dl = rng.normal(size=n_rays)
            dd = rng.normal(size=(n_rays, q))

            res = render_rays(p, rays, m, 0, rng, ts=ts, keep_cache=True)
            g = GradBuffer.zeros_like(p)
            render_backward(p, res.cache, dl, dd, g)

            def loss():
                r = render_rays(p, rays, m, 0, rng, ts=ts)
                return float((dl * r.lum).sum() + (dd * r.dist).sum())

            h = 1e-4
            for grid, gbuf in (
                (p.density_raw, g.density),
                (p.lum_raw, g.lum),
                (p.logits, g.logits),
            ):
                flat = grid.reshape(-1)
                gflat = gbuf.reshape(-1)
                probe = rng.choice(flat.size, size=min(6, flat.size), replace=False)
                for j in probe:
                    orig = flat[j]
                    flat[j] = orig + h
                    up = loss()
                    flat[j] = orig - h
                    dn = loss()
                    flat[j] = orig
                    fd = (up - dn) / (2 * h)
                    denom = max(abs(fd), abs(gflat[j]), 1e-6)
                    worst = max(worst, abs(fd - gflat[j]) / denom)
        assert worst < 1e-4


class TestRenderImage:
    def test_zero_density_black(self):
        p = constant_field(0.0, 0.9)
        cam = make_camera(width=8, height=8)
        lum, ab, rgb = render_image(p, cam, m_coarse=8, m_fine=8)
        assert np.abs(lum).max() < 1e-9
        np.testing.assert_array_equal(ab, np.broadcast_to(p.table.centers[0], ab.shape))

    def test_uniform_logits_tie_break(self):
        p = constant_field(5.0, 0.5)
        cam = make_camera(width=8, height=8)
        _, ab, _ = render_image(p, cam, m_coarse=8, m_fine=8)
        np.testing.assert_array_equal(ab, np.broadcast_to(p.table.centers[0], ab.shape))

    def test_opaque_slab_luminance(self):
        # dense slab facing the camera with lum 0.8
        p = init_field([-1, -1, -1], [1, 1, 1], (8, 8, 8), small_table())
        p.density_raw[:] = softplus_inv(200.0)
        p.lum_raw[:] = math.log(0.8 / 0.2)
        cam = make_camera(width=9, height=9, focal=30.0, dist=3.0)
        lum, _, _ = render_image(p, cam, m_coarse=128, m_fine=128)
        assert abs(lum[4, 4] - 0.8) < 0.02

    def test_workers_match_serial(self):
        rng = np.random.default_rng(8)
        p = init_field([-1, -1, -1], [1, 1, 1], (3, 3, 3), small_table())
        p.density_raw[:] = rng.normal(size=p.density_raw.shape)
        p.logits[:] = rng.normal(size=p.logits.shape)
        cam = make_camera(width=12, height=6)
        a = render_image(p, cam, m_coarse=4, m_fine=4, seed=3, chunk=16, workers=1)
        b = render_image(p, cam, m_coarse=4, m_fine=4, seed=3, chunk=16, workers=4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
