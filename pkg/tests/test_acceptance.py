"""Acceptance criteria, one test per criterion with a pass/fail line each.

The two end-to-end criteria train the desk-scale defaults on a 3-blob
synthetic scene and take several minutes apiece; everything else is fast.
Run with -s to see the per-criterion lines.
"""

import json
import math
import time

import numpy as np
import pytest

from chromafield.cli import main as cli_main
from chromafield.color import (
    build_ab_bin_table,
    lab_to_rgb,
    rgb_to_lab,
    soft_label_batch,
)
from chromafield.colorize import ab_histogram, hist_similarity, purify
from chromafield.field import GradBuffer, init_field, softplus_inv
from chromafield.metrics import colorfulness, psnr, ssim
from chromafield.rendering import (
    RayBundle,
    clip_to_bbox,
    render_backward,
    render_image,
    render_rays,
)
from chromafield.scenes import Blob, SyntheticScene, analytic_opacity, generate_views
from chromafield.training import (
    TrainConfig,
    loss_classification,
    loss_photometric,
    train_color,
    train_luminance,
)
from chromafield.color import AbBinTable

RUN_BUDGET_SECONDS = 15 * 60


def report(name: str, ok: bool, detail: str = "") -> None:
    tag = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"[{tag}] {name}{suffix}")
    assert ok, f"{name}{suffix}"


def small_table(q: int = 3) -> AbBinTable:
    centers = np.stack([np.arange(q) * 10.0 - 10.0, np.zeros(q)], axis=1)
    return AbBinTable(centers=centers, grid_step=10.0)


def desk_scene() -> SyntheticScene:
    """Three blobs on a triangle, placed so no orbit view has one blob
    occluding another (blends defeat argmax decoding by construction) and
    colored at moderate chroma so rim darkening against the black
    background stays within one quantization step."""
    colors = [(0.744, 0.476, 0.456), (0.436, 0.609, 0.44), (0.431, 0.516, 0.698)]
    blobs = []
    for i, ang in enumerate((90.0, 210.0, 330.0)):
        a = math.radians(ang)
        blobs.append(Blob(center=[0.68 * math.cos(a), 0.68 * math.sin(a), 0.0],
                          radius=0.22, density_peak=150.0, rgb=colors[i]))
    return SyntheticScene(blobs=blobs, bbox_min=[-1.1] * 3, bbox_max=[1.1] * 3)


@pytest.fixture(scope="module")
def desk_dataset():
    return generate_views(desk_scene(), 16, image_size=64, samples_per_ray=256,
                          orbit_elevation_deg=40.0)


@pytest.fixture(scope="module")
def stage1(desk_dataset):
    """Default desk config, stage 1; shared by the end-to-end criteria."""
    cfg = TrainConfig(seed=0, holdout=1)
    params = init_field(desk_dataset.bbox_min, desk_dataset.bbox_max,
                        (32, 32, 32), build_ab_bin_table())
    t0 = time.monotonic()
    train_luminance(desk_dataset, cfg, params)
    return params, time.monotonic() - t0


class TestGradientOracle:
    def test_gradients_match_finite_differences(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(2024)
        worst = 0.0
        checked = 0
        for _ in range(100):
            q = 3
            p = init_field([-1, -1, -1], [1, 1, 1], (2, 2, 2), small_table(q))
            p.density_raw[:] = rng.normal(0.5, 1.0, size=p.density_raw.shape)
            p.lum_raw[:] = rng.normal(size=p.lum_raw.shape)
            p.logits[:] = rng.normal(size=p.logits.shape)
            n = 2
            o = np.tile(np.array([[-2.0, 0.0, 0.0]]), (n, 1))
            d = rng.normal(size=(n, 3))
            d[:, 0] = np.abs(d[:, 0]) + 2.0
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            rays = RayBundle(o, d, np.full(n, 1e-3), np.full(n, 6.0))
            clipped = clip_to_bbox(rays, p.bbox_min, p.bbox_max)
            m = int(rng.integers(1, 5))
            ts = np.sort(rng.uniform(clipped.t_near[:, None],
                                     clipped.t_far[:, None], size=(n, m)), axis=1)
            gt = rng.random(n)
            lidx = np.stack([rng.choice(q, size=2, replace=False) for _ in range(n)])
            lw = rng.random((n, 2))
            lw /= lw.sum(axis=1, keepdims=True)

            def total_loss():
                r = render_rays(p, rays, m, 0, rng, ts=ts)
                return (loss_photometric(r.lum, gt)[0]
                        + loss_classification(r.dist, lidx, lw)[0])

            res = render_rays(p, rays, m, 0, rng, ts=ts, keep_cache=True)
            _, d_lum = loss_photometric(res.lum, gt)
            _, d_dist = loss_classification(res.dist, lidx, lw)
            g = GradBuffer.zeros_like(p)
            render_backward(p, res.cache, d_lum, d_dist, g)

            h = 1e-5
            for grid, gbuf in ((p.density_raw, g.density), (p.lum_raw, g.lum),
                               (p.logits, g.logits)):
                flat, gflat = grid.reshape(-1), gbuf.reshape(-1)
                for j in rng.choice(flat.size, size=3, replace=False):
                    orig = flat[j]
                    flat[j] = orig + h
                    up = total_loss()
                    flat[j] = orig - h
                    dn = total_loss()
                    flat[j] = orig
                    fd = (up - dn) / (2 * h)
                    denom = max(abs(fd), abs(gflat[j]), 1e-6)
                    worst = max(worst, abs(fd - gflat[j]) / denom)
                    checked += 1
        elapsed = time.monotonic() - t0
        report(
            "gradient oracle: analytic = finite differences (rel err <= 1e-3)",
            worst < 1e-3 and elapsed < 60.0,
            f"{checked} derivatives over 100 instances, worst {worst:.2e}, {elapsed:.1f}s",
        )


class TestRenderingInvariants:
    def test_invariants(self):
        rng = np.random.default_rng(11)
        p = init_field([-1, -1, -1], [1, 1, 1], (4, 4, 4), small_table())
        p.density_raw[:] = rng.normal(1.0, 2.0, size=p.density_raw.shape)
        n = 64
        o = np.tile(np.array([[-2.0, 0.0, 0.0]]), (n, 1))
        d = rng.normal(size=(n, 3))
        d[:, 0] = np.abs(d[:, 0]) + 1.0
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rays = RayBundle(o, d, np.full(n, 1e-3), np.full(n, 6.0))
        res = render_rays(p, rays, 16, 16, rng, keep_cache=True)
        ok_trans = bool(np.all(np.diff(res.cache.trans, axis=1) <= 1e-12))
        ok_wsum = bool(np.all(res.weights.sum(axis=1) <= 1.0 + 1e-6))
        report("rendering: transmittance non-increasing", ok_trans)
        report("rendering: weight sums <= 1 + 1e-6", ok_wsum)

    def test_zero_density_black(self):
        p = init_field([-1, -1, -1], [1, 1, 1], (2, 2, 2), small_table())
        p.density_raw[:] = -80.0
        ray = RayBundle(np.array([[-2.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]),
                        np.array([1e-3]), np.array([6.0]))
        res = render_rays(p, ray, 16, 16, np.random.default_rng(0))
        report("rendering: zero density renders black", abs(res.lum[0]) < 1e-10)

    def test_opaque_first_sample(self):
        p = init_field([-1, -1, -1], [1, 1, 1], (2, 2, 2), small_table())
        p.density_raw[:] = softplus_inv(1e5)
        p.lum_raw[:] = math.log(0.65 / 0.35)
        ray = RayBundle(np.array([[-2.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]),
                        np.array([1e-3]), np.array([6.0]))
        res = render_rays(p, ray, 8, 0, np.random.default_rng(0))
        report(
            "rendering: opaque first sample dominates",
            abs(res.lum[0] - 0.65) < 1e-6 and abs(res.weights[0, 0] - 1.0) < 1e-9,
        )

    def test_two_sample_closed_form(self):
        sigma = 2.0
        delta = math.log(2.0) / sigma
        p = init_field([-1, -1, -1], [1, 1, 1], (2, 2, 2), small_table())
        p.density_raw[:] = softplus_inv(sigma)
        p.lum_raw[:] = 60.0  # sigmoid -> 1 to double precision
        ray = RayBundle(np.array([[-0.5, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]),
                        np.array([1e-6]), np.array([2 * delta]))
        ray = RayBundle(ray.origins, ray.dirs, ray.t_near, ray.t_far)
        res = render_rays(p, ray, 2, 0, np.random.default_rng(0),
                          ts=np.array([[0.0, delta]]))
        ok = (abs(res.lum[0] - 0.75) < 1e-9
              and abs(res.weights[0, 0] - 0.5) < 1e-9
              and abs(res.weights[0, 1] - 0.25) < 1e-9)
        report("rendering: two-sample ln2 case gives L = 0.75 +- 1e-9", ok,
               f"L = {res.lum[0]:.12f}")


class TestColorSpaceSuite:
    def test_roundtrip(self):
        rng = np.random.default_rng(77)
        rgb = rng.random((10_000, 3))
        err = np.abs(lab_to_rgb(rgb_to_lab(rgb)) - rgb).max()
        report("color: Lab round-trip within 1e-4", err < 1e-4, f"max err {err:.2e}")

    def test_bin_count(self):
        t = build_ab_bin_table()
        report("color: bin table Q in [305, 325] (313 expected)",
               305 <= t.count <= 325, f"Q = {t.count}")

    def test_soft_labels(self):
        t = build_ab_bin_table()
        rng = np.random.default_rng(5)
        ab = rgb_to_lab(rng.random((500, 3)))[:, 1:]
        idx, w = soft_label_batch(ab, t, k=5)
        ok_prob = bool(np.all(w >= 0)
                       and np.abs(w.sum(axis=1) - 1.0).max() < 1e-9)
        nearest, _ = t.nearest(ab, k=1)
        picked = np.take_along_axis(idx, np.argmax(w, axis=1)[:, None], axis=1)[:, 0]
        ok_argmax = bool(np.array_equal(picked, nearest[:, 0]))
        report("color: soft labels are probability vectors", ok_prob)
        report("color: soft-label argmax equals nearest bin", ok_argmax)


class TestLossIdentities:
    def test_kl_identity_and_sign(self):
        idx = np.array([[0, 2]])
        w = np.array([[0.3, 0.7]])
        dist = np.zeros((1, 4))
        dist[0, idx[0]] = w[0]
        zero_loss, _ = loss_classification(dist, idx, w)
        rng = np.random.default_rng(3)
        nonneg = True
        positive_when_diff = True
        for _ in range(100):
            d = rng.random((1, 4)) + 1e-3
            d /= d.sum()
            loss, _ = loss_classification(d, idx, w)
            nonneg &= loss >= -1e-12
            if np.abs(d[0, idx[0]] - w[0]).max() > 1e-6:
                positive_when_diff &= loss > 0
        report("loss: KL zero iff prediction matches labels on support",
               abs(zero_loss) < 1e-12 and positive_when_diff)
        report("loss: KL nonnegative", nonneg)

    def test_hand_case(self):
        loss, _ = loss_classification(
            np.array([[0.25, 0.75]]), np.array([[0, 1]]), np.array([[0.5, 0.5]])
        )
        report("loss: hand case 0.1438 +- 1e-4", abs(loss - 0.1438) < 1e-4,
               f"loss = {loss:.6f}")


class FixedSimilarityBase:
    def __init__(self, sim, threshold=0.80):
        self.sim = sim
        self.threshold = threshold

    def best_similarity(self, hist):
        return self.sim


class TestPurification:
    def test_strict_threshold(self):
        patch = np.full((4, 4, 2), 10.0)
        kept_081 = purify(patch, FixedSimilarityBase(0.81)) is not None
        rej_080 = purify(patch, FixedSimilarityBase(0.80)) is None
        rej_low = purify(patch, FixedSimilarityBase(0.5)) is None
        report("purify: kept at 0.81, rejected at 0.80 and below",
               kept_081 and rej_080 and rej_low)

    def test_cosine_bounds_and_self(self):
        rng = np.random.default_rng(9)
        bounded = True
        for _ in range(50):
            h1 = ab_histogram(rng.uniform(-110, 110, (40, 2)))
            h2 = ab_histogram(rng.uniform(-110, 110, (40, 2)))
            s = hist_similarity(h1, h2)
            bounded &= 0.0 <= s <= 1.0
        h = ab_histogram(rng.uniform(-110, 110, (60, 2)))
        self_ok = abs(hist_similarity(h, h) - 1.0) < 1e-12
        report("purify: cosine similarity within [0, 1]", bounded)
        report("purify: self-similarity equals 1", self_ok)


class TestStageFreeze:
    def test_density_luminance_bitwise_frozen(self, desk_dataset):
        cfg = TrainConfig(epochs=1, patches_per_epoch=12, patch_size=8,
                          m_coarse=8, m_fine=8, seed=3, holdout=1,
                          n_base=2, colorizer="palette")
        params = init_field(desk_dataset.bbox_min, desk_dataset.bbox_max,
                            (8, 8, 8), build_ab_bin_table())
        train_luminance(desk_dataset, cfg, params)
        density = params.density_raw.copy()
        lum = params.lum_raw.copy()
        logits = params.logits.copy()
        train_color(params, desk_dataset, cfg)
        frozen = (np.array_equal(params.density_raw, density)
                  and np.array_equal(params.lum_raw, lum))
        moved = not np.array_equal(params.logits, logits)
        report("stage-2 freeze: density and luminance grids bitwise unchanged",
               frozen and moved)


class TestEndToEndStage1:
    def test_heldout_psnr(self, desk_dataset, stage1):
        params, train_seconds = stage1
        view = desk_dataset.views[-1]
        lum, _, _ = render_image(params, view.camera, m_coarse=32, m_fine=32,
                                 seed=0, workers=4)
        val = psnr(lum, view.lum)
        report(
            "end-to-end stage 1: held-out luminance PSNR >= 30 dB within budget",
            val >= 30.0 and train_seconds <= RUN_BUDGET_SECONDS,
            f"PSNR {val:.2f} dB, trained in {train_seconds/60:.1f} min",
        )


def _stage2_fraction(desk_dataset, stage1_params, noise_sigma):
    cfg = TrainConfig(seed=0, holdout=1, colorizer="oracle",
                      oracle_noise_sigma=noise_sigma)
    params = init_field(desk_dataset.bbox_min, desk_dataset.bbox_max,
                        (32, 32, 32), stage1_params.table)
    params.density_raw[:] = stage1_params.density_raw
    params.lum_raw[:] = stage1_params.lum_raw
    t0 = time.monotonic()
    train_color(params, desk_dataset, cfg)
    seconds = time.monotonic() - t0
    view = desk_dataset.views[-1]
    _, ab, _ = render_image(params, view.camera, m_coarse=32, m_fine=32,
                            seed=0, workers=4)
    mask = analytic_opacity(desk_scene(), view.camera) >= 0.5
    dist = np.linalg.norm(ab - view.lab[..., 1:], axis=-1)
    return float((dist[mask] <= 10.0).mean()), seconds, int(mask.sum())


class TestEndToEndStage2:
    def test_noisy_oracle_consistency(self, desk_dataset, stage1):
        frac, seconds, n_vis = _stage2_fraction(desk_dataset, stage1[0], 8.0)
        report(
            "end-to-end stage 2: noisy oracle (sigma 8) >= 90% within one bin step",
            frac >= 0.90 and seconds <= RUN_BUDGET_SECONDS,
            f"{frac*100:.1f}% of {n_vis} visible pixels, {seconds/60:.1f} min",
        )

    def test_clean_oracle_consistency(self, desk_dataset, stage1):
        frac, seconds, n_vis = _stage2_fraction(desk_dataset, stage1[0], 0.0)
        report(
            "end-to-end stage 2: clean oracle (sigma 0) >= 98% within one bin step",
            frac >= 0.98 and seconds <= RUN_BUDGET_SECONDS,
            f"{frac*100:.1f}% of {n_vis} visible pixels, {seconds/60:.1f} min",
        )


class TestDeterminism:
    def test_bitwise_identical_runs(self, tmp_path):
        scene_path = tmp_path / "scene.json"
        desk_scene().to_json(scene_path)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "epochs": 2, "patches_per_epoch": 12, "patch_size": 8,
            "m_coarse": 8, "m_fine": 8, "image_size": 24,
            "samples_per_ray": 32, "resolution": 8, "n_base": 2,
            "colorizer": "oracle", "oracle_noise_sigma": 4.0, "holdout": 1,
        }))
        data = tmp_path / "data"
        assert cli_main(["make-synthetic", "--scene", str(scene_path),
                         "--out", str(data), "--views", "5",
                         "--config", str(cfg_path)]) == 0
        artifacts = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli_main(["train-lum", "--dataset", str(data), "--out", str(out),
                             "--config", str(cfg_path), "--seed", "11"]) == 0
            assert cli_main(["train-color", "--dataset", str(data),
                             "--checkpoint", str(out / "field_lum.cnrf"),
                             "--out", str(out), "--config", str(cfg_path),
                             "--seed", "11"]) == 0
            assert cli_main(["render", "--dataset", str(data),
                             "--checkpoint", str(out / "field_color.cnrf"),
                             "--out", str(out / "renders"), "--views", "4",
                             "--config", str(cfg_path), "--seed", "11"]) == 0
            assert cli_main(["eval", "--dataset", str(data),
                             "--pred", str(out / "renders"),
                             "--out", str(out / "eval"),
                             "--config", str(cfg_path)]) == 0
            artifacts.append({
                "lum": (out / "field_lum.cnrf").read_bytes(),
                "color": (out / "field_color.cnrf").read_bytes(),
                "log1": (out / "train_lum_log.csv").read_bytes(),
                "log2": (out / "train_color_log.csv").read_bytes(),
                "render": (out / "renders" / "render_004.png").read_bytes(),
                "tsv": (out / "eval" / "report.tsv").read_bytes(),
                "json": (out / "eval" / "report.json").read_bytes(),
            })
        same = all(artifacts[0][k] == artifacts[1][k] for k in artifacts[0])
        report("determinism: identical seeds give bitwise-identical artifacts", same)


class TestMetricsCriteria:
    def test_colorfulness_values(self):
        gray_ok = abs(colorfulness(np.full((8, 8, 3), 0.4))) < 1e-9
        red = np.zeros((8, 8, 3))
        red[..., 0] = 1.0
        formula = 0.3 * math.sqrt(255.0**2 + 127.5**2)  # = 85.5296...
        red_val = colorfulness(red)
        report("metrics: constant gray colorfulness = 0", gray_ok)
        report(
            "metrics: constant red colorfulness matches formula +- 0.01",
            abs(red_val - formula) < 0.01,
            f"value {red_val:.4f}, formula {formula:.4f}",
        )

    def test_psnr_monotone_and_ssim_identity(self):
        rng = np.random.default_rng(15)
        gt = rng.random((32, 32, 3))
        vals = [psnr(np.clip(gt + rng.normal(0, amp, gt.shape), 0, 1), gt)
                for amp in (0.01, 0.05, 0.2)]
        mono = vals[0] > vals[1] > vals[2]
        img = rng.random((16, 16))
        ssim_ok = abs(ssim(img, img) - 1.0) < 1e-12
        report("metrics: PSNR strictly decreases with noise amplitude", mono)
        report("metrics: ssim(x, x) = 1", ssim_ok)
