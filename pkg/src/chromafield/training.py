"""Two-stage optimization of the voxel field.

Stage 1 fits density and luminance to the monochrome views with a summed
squared-error patch loss.  Stage 2 freezes those grids and trains only the
color logits: render a luminance patch, colorize it, gate it against the
base references, soft-label every pixel, and descend the per-pixel KL
between soft labels and the rendered color distribution.

The logits grid is large (Q channels per voxel), so stage 2 renders it
through a sparse matrix over the voxels each patch actually touches and
applies Adam per touched row (per-row step counts and bias correction).
Quadrature samples with weight below ``weight_floor`` are dropped from the
color path only; they carry that weight as their gradient factor, so the
dropped terms are negligible by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .color import soft_label_batch
from .colorize import (
    ColorizeError,
    OracleColorizer,
    PaletteColorizer,
    PatchQuery,
    build_base_set,
    colorize_query,
    purify,
)
from .field import FieldParams, GradBuffer, softplus
from .rendering import (
    PatchSpec,
    RayBundle,
    clip_to_bbox,
    importance_sample,
    render_backward,
    render_rays,
    sample_patch_rays,
    stratified_sample,
)
from .scenes import MultiViewDataset

__all__ = [
    "TrainConfig",
    "OptimizerError",
    "AdamState",
    "adam_step",
    "SparseAdamState",
    "adam_step_rows",
    "loss_photometric",
    "loss_classification",
    "train_luminance",
    "train_color",
    "make_colorizer",
]


class OptimizerError(RuntimeError):
    """Non-finite gradients; the step was aborted."""


@dataclass
class TrainConfig:
    epochs: int = 30
    patches_per_epoch: int = 256
    patch_size: int = 32  # K
    s_min: float = 0.3
    s_max: float = 0.7
    lr_lum: float = 5e-2
    lr_color: float = 1e-1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m_coarse: int = 32
    m_fine: int = 32
    seed: int = 0
    holdout: int = 0  # trailing views excluded from training
    # purification
    n_base: int = 5
    s_base: float = 0.7
    base_threshold: float = 0.80
    hist_bins: int = 32
    # soft labels
    label_k: int = 5
    label_sigma: float = 5.0
    # colorizer
    colorizer: str = "oracle"  # oracle | palette | external
    oracle_noise_sigma: float = 0.0
    external_cmd: str = ""
    external_timeout: float = 30.0
    # numerics
    prob_floor: float = 1e-8
    weight_floor: float = 1e-4

    def __post_init__(self) -> None:
        if not 0.0 < self.s_min <= self.s_max:
            raise ValueError("need 0 < s_min <= s_max")
        if self.epochs < 0 or self.patches_per_epoch < 1:
            raise ValueError("bad epoch/patch counts")
        if self.colorizer not in ("oracle", "palette", "external"):
            raise ValueError(f"unknown colorizer {self.colorizer!r}")


def make_colorizer(config: TrainConfig, dataset: MultiViewDataset):
    if config.colorizer == "oracle":
        return OracleColorizer(
            dataset, noise_sigma=config.oracle_noise_sigma, seed=config.seed + 1
        )
    if config.colorizer == "palette":
        return PaletteColorizer()
    from .colorize import ExternalColorizer

    if not config.external_cmd:
        raise ValueError("external colorizer needs external_cmd")
    return ExternalColorizer(config.external_cmd, timeout=config.external_timeout)


def loss_photometric(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed squared error over pixels and its gradient 2 (pred - gt)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and target shapes differ")
    diff = pred - gt
    return float((diff**2).sum()), 2.0 * diff


def loss_classification(
    pred_dist: np.ndarray,
    label_idx: np.ndarray,
    label_w: np.ndarray,
    prob_floor: float = 1e-8,
) -> tuple[float, np.ndarray]:
    """Per-pixel KL(label || prediction) summed over pixels.

    ``pred_dist`` is (N, Q); labels are sparse, (N, k) indices and weights.
    Bins outside a pixel's label support contribute zero.  Returns the loss
    and its gradient w.r.t. ``pred_dist``.
    """
    pred_dist = np.asarray(pred_dist, dtype=np.float64)
    n, q = pred_dist.shape
    rows = np.arange(n)[:, None]
    p = np.maximum(pred_dist[rows, label_idx], prob_floor)
    loss = float((label_w * (np.log(label_w) - np.log(p))).sum())
    grad = np.zeros_like(pred_dist)
    np.add.at(grad, (rows, label_idx), -label_w / p)
    return loss, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update."""
    if not np.all(np.isfinite(grad)):
        raise OptimizerError("non-finite gradient entries; step aborted")
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1**state.t)
    vhat = state.v / (1.0 - beta2**state.t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class SparseAdamState:
    """Adam moments with per-row step counts for row-sparse gradients."""

    m: np.ndarray  # (V, Q)
    v: np.ndarray  # (V, Q)
    t: np.ndarray  # (V,) int64

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "SparseAdamState":
        return cls(
            m=np.zeros_like(param),
            v=np.zeros_like(param),
            t=np.zeros(param.shape[0], dtype=np.int64),
        )


@numba.njit(cache=True, parallel=True)
def _adam_rows_kernel(param, rows, grad, m, v, t, lr, beta1, beta2, eps):  # pragma: no cover
    q = param.shape[1]
    for i in numba.prange(rows.shape[0]):
        r = rows[i]
        t[r] += 1
        bc1 = 1.0 - beta1 ** t[r]
        bc2 = 1.0 - beta2 ** t[r]
        for j in range(q):
            g = grad[i, j]
            mm = beta1 * m[r, j] + (1.0 - beta1) * g
            vv = beta2 * v[r, j] + (1.0 - beta2) * g * g
            m[r, j] = mm
            v[r, j] = vv
            param[r, j] -= lr * (mm / bc1) / (np.sqrt(vv / bc2) + eps)


def adam_step_rows(
    param: np.ndarray,
    rows: np.ndarray,
    grad_rows: np.ndarray,
    state: SparseAdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Adam restricted to the given rows; untouched rows keep their moments.

    Rows must be unique within one call (parallel row updates).
    """
    if not np.all(np.isfinite(grad_rows)):
        raise OptimizerError("non-finite gradient entries; step aborted")
    _adam_rows_kernel(
        param, np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(grad_rows), state.m, state.v, state.t,
        lr, beta1, beta2, eps,
    )


def _training_views(dataset: MultiViewDataset, config: TrainConfig) -> list:
    views = dataset.views[: len(dataset.views) - config.holdout] if config.holdout else dataset.views
    if len(views) < 2:
        raise ValueError("training needs at least 2 views")
    return views


def _draw_patch_spec(view, config: TrainConfig, rng: np.random.Generator, scale=None) -> PatchSpec:
    s = float(rng.uniform(config.s_min, config.s_max)) if scale is None else scale
    k = config.patch_size
    w, h = view.camera.width, view.camera.height
    lo_u, hi_u = s * k / 2, (w - 1) - s * (k / 2 - 1)
    lo_v, hi_v = s * k / 2, (h - 1) - s * (k / 2 - 1)
    if lo_u > hi_u or lo_v > hi_v:
        raise ValueError(f"patch K={k} at scale {s} does not fit a {w}x{h} image")
    u = float(rng.uniform(lo_u, hi_u))
    v = float(rng.uniform(lo_v, hi_v))
    return PatchSpec(center=(u, v), scale=s, size=k)


def _bilinear_lum(view, coords: np.ndarray) -> np.ndarray:
    from .colorize import _bilinear

    return _bilinear(view.lum, coords)


def train_luminance(
    dataset: MultiViewDataset,
    config: TrainConfig,
    params: FieldParams,
    log_fn=None,
    on_epoch_end=None,
) -> FieldParams:
    """Stage 1: fit density and luminance grids to the monochrome views."""
    views = _training_views(dataset, config)
    rng = np.random.default_rng(config.seed)
    grads = GradBuffer(
        density=np.zeros_like(params.density_raw),
        lum=np.zeros_like(params.lum_raw),
        logits=np.zeros((0,)),  # stage 1 never touches color
    )
    st_d = AdamState.zeros_like(params.density_raw)
    st_l = AdamState.zeros_like(params.lum_raw)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for step in range(config.patches_per_epoch):
            cam_i = int(rng.integers(len(views)))
            view = views[cam_i]
            spec = _draw_patch_spec(view, config, rng)
            pr = sample_patch_rays(view.camera, spec)
            res = render_rays(
                params, pr.rays, config.m_coarse, config.m_fine, rng,
                want_color=False, keep_cache=True,
            )
            gt = _bilinear_lum(view, pr.coords).reshape(-1)
            loss, d_lum = loss_photometric(res.lum, gt)
            grads.density.fill(0.0)
            grads.lum.fill(0.0)
            render_backward(params, res.cache, d_lum, None, grads, color=False)
            try:
                adam_step(params.density_raw, grads.density, st_d, config.lr_lum,
                          config.beta1, config.beta2, config.adam_eps)
                adam_step(params.lum_raw, grads.lum, st_l, config.lr_lum,
                          config.beta1, config.beta2, config.adam_eps)
            except OptimizerError:
                if log_fn:
                    log_fn(f"{epoch},{step},nan,0,1")
                continue
            losses.append(loss)
            if log_fn:
                log_fn(f"{epoch},{step},{loss!r},1,0")
        history.append(float(np.mean(losses)) if losses else float("nan"))
        if on_epoch_end:
            on_epoch_end(epoch, params, history[-1])
    return params


@numba.njit(cache=True, parallel=True)
def _color_render_kernel(ptr, rows, coef, logits, out):  # pragma: no cover
    q = logits.shape[1]
    for p in numba.prange(ptr.shape[0] - 1):
        for e in range(ptr[p], ptr[p + 1]):
            for c in range(8):
                wgt = coef[e, c]
                if wgt != 0.0:
                    r = rows[e, c]
                    for j in range(q):
                        out[p, j] += wgt * logits[r, j]


@numba.njit(cache=True, parallel=True)
def _color_adam_kernel(starts, urows, pix, cf, du, param, m, v, t,
                       lr, beta1, beta2, eps):  # pragma: no cover
    q = param.shape[1]
    for k in numba.prange(urows.shape[0]):
        r = urows[k]
        gbuf = np.zeros(q)
        for e in range(starts[k], starts[k + 1]):
            c = cf[e]
            p = pix[e]
            for j in range(q):
                gbuf[j] += c * du[p, j]
        t[r] += 1
        bc1 = 1.0 - beta1 ** t[r]
        bc2 = 1.0 - beta2 ** t[r]
        for j in range(q):
            g = gbuf[j]
            mm = beta1 * m[r, j] + (1.0 - beta1) * g
            vv = beta2 * v[r, j] + (1.0 - beta2) * g * g
            m[r, j] = mm
            v[r, j] = vv
            param[r, j] -= lr * (mm / bc1) / (np.sqrt(vv / bc2) + eps)


@dataclass
class ColorStepPlan:
    """Index structure tying a patch's kept quadrature samples to voxels.

    Entries are the (kept sample, corner) pairs; ``ptr`` slices them per
    pixel in pixel order, while ``starts``/``urows`` slice the same entries
    re-sorted by voxel row for the gradient scatter.
    """

    n_pixels: int
    ptr: np.ndarray  # (N+1,)
    rows: np.ndarray  # (Nk, 8) voxel rows
    coef: np.ndarray  # (Nk, 8) quadrature x trilinear weight
    urows: np.ndarray  # (U,) unique voxel rows, ascending
    starts: np.ndarray  # (U+1,)
    entry_pix: np.ndarray  # (Nk*8,) pixel of each entry, row-sorted
    entry_coef: np.ndarray  # (Nk*8,)

    def rendered_logits(self, logits_flat: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_pixels, logits_flat.shape[1]))
        if self.rows.size:
            _color_render_kernel(self.ptr, self.rows, self.coef, logits_flat, out)
        return out

    def gradient_rows(self, du: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row gradient sums, numpy reference path (used by tests)."""
        grad = np.zeros((self.urows.size, du.shape[1]))
        for k in range(self.urows.size):
            sl = slice(self.starts[k], self.starts[k + 1])
            grad[k] = self.entry_coef[sl] @ du[self.entry_pix[sl]]
        return self.urows, grad

    def apply_adam(self, du, logits_flat, state, lr, beta1, beta2, eps) -> None:
        if not np.all(np.isfinite(du)):
            raise OptimizerError("non-finite gradient entries; step aborted")
        if self.urows.size:
            _color_adam_kernel(
                self.starts, self.urows, self.entry_pix, self.entry_coef,
                np.ascontiguousarray(du), logits_flat,
                state.m, state.v, state.t, lr, beta1, beta2, eps,
            )


def _color_forward(
    params: FieldParams,
    rays: RayBundle,
    config: TrainConfig,
    rng: np.random.Generator,
):
    """Frozen-field luminance render plus the color-logit forward.

    Returns (lum, dist, plan); gradients flow back through ``plan``.
    """
    rays = clip_to_bbox(rays, params.bbox_min, params.bbox_max)
    t_c = stratified_sample(rays.t_near, rays.t_far, config.m_coarse, rng)
    from scipy.special import expit

    from .field import query_scalar_grids

    def field_sigma_lum(ts):
        n, m = ts.shape
        pts = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
        d_raw, l_raw, idx, w, inside = query_scalar_grids(params, pts.reshape(-1, 3))
        sigma = np.where(inside, softplus(d_raw), 0.0).reshape(n, m)
        lum = np.where(inside, expit(l_raw), 0.0).reshape(n, m)
        return sigma, lum, idx.reshape(n, m, 8), w.reshape(n, m, 8)

    def quadrature(sigma, ts):
        deltas = np.diff(np.concatenate([ts, rays.t_far[:, None]], axis=1), axis=1)
        tau = sigma * deltas
        alpha = -np.expm1(-tau)
        trans = np.exp(-np.concatenate(
            [np.zeros_like(tau[:, :1]), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
        return trans * alpha

    sigma_c, _, _, _ = field_sigma_lum(t_c)
    w_c = quadrature(sigma_c, t_c)
    t_f = importance_sample(t_c, w_c, config.m_fine, rng, rays.t_near, rays.t_far)
    ts = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
    sigma, lum, idx, w = field_sigma_lum(ts)
    weights = quadrature(sigma, ts)
    lum_out = (weights * lum).sum(axis=1)

    n_pix = len(rays)
    keep = weights > config.weight_floor
    ray_ids, _ = np.nonzero(keep)  # ascending: row-major scan
    rows = idx[keep]
    coef = weights[keep][:, None] * w[keep]
    ptr = np.searchsorted(ray_ids, np.arange(n_pix + 1))

    flat_rows = rows.ravel()
    order = np.argsort(flat_rows, kind="stable")
    sorted_rows = flat_rows[order]
    if sorted_rows.size:
        first = np.flatnonzero(np.r_[True, sorted_rows[1:] != sorted_rows[:-1]])
        urows = sorted_rows[first]
        starts = np.append(first, sorted_rows.size)
    else:
        urows = sorted_rows
        starts = np.zeros(1, dtype=np.int64)
    plan = ColorStepPlan(
        n_pixels=n_pix, ptr=ptr, rows=rows, coef=coef,
        urows=urows, starts=starts,
        entry_pix=np.repeat(ray_ids, 8)[order],
        entry_coef=coef.ravel()[order],
    )
    logits_flat = params.logits.reshape(-1, params.num_bins)
    u = plan.rendered_logits(logits_flat)
    z = u - u.max(axis=1, keepdims=True)
    e = np.exp(z)
    dist = e / e.sum(axis=1, keepdims=True)
    return lum_out, dist, plan


def train_color(
    params: FieldParams,
    dataset: MultiViewDataset,
    config: TrainConfig,
    log_fn=None,
    on_epoch_end=None,
    colorizer=None,
) -> FieldParams:
    """Stage 2: train color logits on colorized, purified patches.

    Density and luminance grids are read-only here; only the logits grid
    moves.  Patches whose colorization fails or is rejected by purification
    contribute no loss for that step.
    """
    views = _training_views(dataset, config)
    rng = np.random.default_rng(config.seed)
    own_colorizer = colorizer is None
    if own_colorizer:
        colorizer = make_colorizer(config, dataset)

    def render_base_patch(cam_i, scale, rng):
        view = views[cam_i]
        spec = _draw_patch_spec(view, config, rng, scale=scale)
        pr = sample_patch_rays(view.camera, spec)
        res = render_rays(params, pr.rays, config.m_coarse, config.m_fine, rng,
                          want_color=False)
        return PatchQuery(
            lum=res.lum.reshape(spec.size, spec.size),
            coords=pr.coords,
            view_index=cam_i,
        )

    try:
        base = build_base_set(
            render_base_patch, colorizer, len(views),
            config.n_base, config.s_base, config.base_threshold,
            rng, bins=config.hist_bins,
        )

        logits_flat = params.logits.reshape(-1, params.num_bins)
        st = SparseAdamState.zeros_like(logits_flat)
        history = []
        failures_in_a_row = 0
        for epoch in range(config.epochs):
            losses = []
            kept = rejected = 0
            for step in range(config.patches_per_epoch):
                cam_i = int(rng.integers(len(views)))
                view = views[cam_i]
                spec = _draw_patch_spec(view, config, rng)
                pr = sample_patch_rays(view.camera, spec)
                lum_out, dist, plan = _color_forward(params, pr.rays, config, rng)
                query = PatchQuery(
                    lum=lum_out.reshape(spec.size, spec.size),
                    coords=pr.coords,
                    view_index=cam_i,
                )
                try:
                    ab = colorize_query(colorizer, query)
                    failures_in_a_row = 0
                except ColorizeError:
                    failures_in_a_row += 1
                    if failures_in_a_row >= 25:
                        raise
                    rejected += 1
                    if log_fn:
                        log_fn(f"{epoch},{step},nan,{kept},{rejected}")
                    continue
                purified = purify(ab, base, bins=config.hist_bins)
                if purified is None:
                    rejected += 1
                    if log_fn:
                        log_fn(f"{epoch},{step},nan,{kept},{rejected}")
                    continue
                label_idx, label_w = soft_label_batch(
                    purified.reshape(-1, 2), params.table,
                    k=config.label_k, sigma=config.label_sigma,
                )
                loss, g_dist = loss_classification(dist, label_idx, label_w,
                                                   prob_floor=config.prob_floor)
                du = dist * (g_dist - (g_dist * dist).sum(axis=1, keepdims=True))
                try:
                    plan.apply_adam(du, logits_flat, st, config.lr_color,
                                    config.beta1, config.beta2, config.adam_eps)
                except OptimizerError:
                    rejected += 1
                    if log_fn:
                        log_fn(f"{epoch},{step},nan,{kept},{rejected}")
                    continue
                kept += 1
                losses.append(loss)
                if log_fn:
                    log_fn(f"{epoch},{step},{loss!r},{kept},{rejected}")
            history.append(float(np.mean(losses)) if losses else float("nan"))
            if on_epoch_end:
                on_epoch_end(epoch, params, history[-1])
    finally:
        if own_colorizer and hasattr(colorizer, "close"):
            colorizer.close()
    return params
