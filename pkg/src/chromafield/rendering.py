"""Ray generation, hierarchical sampling, and differentiable volume rendering.

Camera convention: x right, y down, z forward in camera space; ``rot`` maps
camera coordinates to world coordinates and ``pos`` is the camera center.
A pixel (px, py) casts through direction ((px-cx)/f, (py-cy)/f, 1).

The quadrature follows weight_m = T(m) * (1 - exp(-sigma_m * delta_m)) with
T(m) = exp(-sum_{l<m} sigma_l * delta_l), delta_m = t_{m+1} - t_m and the
final delta closing at t_far.  Color logits are volume-rendered raw and
normalized with a softmax per pixel afterwards (render-then-normalize).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .color import decode_argmax, lab_to_rgb
from .field import FieldParams, GradBuffer, query_scalar_grids, softplus

__all__ = [
    "Camera",
    "PatchSpec",
    "PatchBoundsError",
    "RayBundle",
    "PatchRays",
    "RenderResult",
    "sample_patch_rays",
    "pixel_rays",
    "clip_to_bbox",
    "stratified_sample",
    "importance_sample",
    "render_rays",
    "render_backward",
    "render_image",
    "write_planes",
    "read_plane",
]


class PatchBoundsError(ValueError):
    """Scaled patch extends outside the image bounds."""


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    rot: np.ndarray  # (3,3) world-from-camera
    pos: np.ndarray  # (3,) camera center in world
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self) -> None:
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.pos = np.asarray(self.pos, dtype=np.float64)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if np.abs(self.rot @ self.rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation must be orthonormal")
        if self.cx is None:
            self.cx = (self.width - 1) / 2.0
        if self.cy is None:
            self.cy = (self.height - 1) / 2.0

    @classmethod
    def look_at(cls, eye, target, width, height, focal, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise ValueError("view direction parallel to up vector")
        right /= nr
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        return cls(width=width, height=height, focal=focal, rot=rot, pos=eye)

    def cast(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World origins and unit directions for pixel coordinates (..., 2)."""
        coords = np.asarray(coords, dtype=np.float64)
        px = (coords[..., 0] - self.cx) / self.focal
        py = (coords[..., 1] - self.cy) / self.focal
        d_cam = np.stack([px, py, np.ones_like(px)], axis=-1)
        d = d_cam @ self.rot.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.pos, d.shape).copy()
        return o, d


@dataclass
class PatchSpec:
    center: tuple[float, float]  # (u, v) pixels
    scale: float
    size: int  # K, patch side

    def __post_init__(self) -> None:
        if self.size < 2 or self.size % 2:
            raise ValueError("patch size must be even and >= 2")
        if self.scale <= 0:
            raise ValueError("patch scale must be positive")

    def pixel_coords(self) -> np.ndarray:
        """(K, K, 2) sub-pixel positions (s*x + u, s*y + v)."""
        k = self.size
        offsets = np.arange(-k // 2, k // 2, dtype=np.float64)
        xs = self.scale * offsets + self.center[0]
        ys = self.scale * offsets + self.center[1]
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.stack([gx, gy], axis=-1)


@dataclass
class RayBundle:
    origins: np.ndarray  # (N, 3)
    dirs: np.ndarray  # (N, 3) unit
    t_near: np.ndarray  # (N,)
    t_far: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class PatchRays:
    rays: RayBundle
    coords: np.ndarray  # (K, K, 2) pixel positions
    spec: PatchSpec


def sample_patch_rays(camera: Camera, spec: PatchSpec) -> PatchRays:
    """Rays through the K x K scaled patch around spec.center.

    Sub-pixel patch positions must stay within [0, W-1] x [0, H-1] so that
    bilinear ground-truth lookup is defined everywhere.
    """
    coords = spec.pixel_coords()
    if (
        coords[..., 0].min() < 0
        or coords[..., 1].min() < 0
        or coords[..., 0].max() > camera.width - 1
        or coords[..., 1].max() > camera.height - 1
    ):
        raise PatchBoundsError(
            f"patch at {spec.center} scale {spec.scale} leaves the image"
        )
    o, d = camera.cast(coords.reshape(-1, 2))
    n = o.shape[0]
    bundle = RayBundle(
        origins=o,
        dirs=d,
        t_near=np.full(n, 1e-3),
        t_far=np.full(n, 1e6),
    )
    return PatchRays(rays=bundle, coords=coords, spec=spec)


def pixel_rays(camera: Camera) -> RayBundle:
    """One ray per integer pixel of the full image, row-major."""
    xs = np.arange(camera.width, dtype=np.float64)
    ys = np.arange(camera.height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    o, d = camera.cast(np.stack([gx, gy], axis=-1).reshape(-1, 2))
    n = o.shape[0]
    return RayBundle(o, d, np.full(n, 1e-3), np.full(n, 1e6))


def clip_to_bbox(rays: RayBundle, bbox_min, bbox_max) -> RayBundle:
    """Tighten per-ray [t_near, t_far] to the axis-aligned box (slab test).

    Rays that miss the box get a degenerate near-zero span; the field reads
    as empty there, so they render as background.
    """
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.dirs
        t0 = (bbox_min - rays.origins) * inv
        t1 = (bbox_max - rays.origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # Axis-parallel rays: the slab constrains nothing if inside, everything
    # if outside; encode that as -inf/+inf or an empty interval.
    par = rays.dirs == 0.0
    inside = (rays.origins >= bbox_min) & (rays.origins <= bbox_max)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_enter = np.maximum(lo.max(axis=1), rays.t_near)
    t_exit = np.minimum(hi.min(axis=1), rays.t_far)
    miss = t_exit <= t_enter
    t_enter = np.where(miss, rays.t_near, t_enter)
    t_exit = np.where(miss, rays.t_near + 1e-6, t_exit)
    return RayBundle(rays.origins, rays.dirs, t_enter, t_exit)


def stratified_sample(
    t_near: np.ndarray, t_far: np.ndarray, m: int, rng: np.random.Generator
) -> np.ndarray:
    """One uniform draw per equal sub-interval of [t_near, t_far]; (N, M)."""
    if m < 1:
        raise ValueError("sample count must be >= 1")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    n = t_near.shape[0]
    u = rng.random((n, m))
    edges = np.arange(m, dtype=np.float64)
    frac = (edges[None, :] + u) / m
    return t_near[:, None] + frac * (t_far - t_near)[:, None]


def importance_sample(
    coarse_t: np.ndarray,
    weights: np.ndarray,
    m_fine: int,
    rng: np.random.Generator,
    t_near: np.ndarray | None = None,
    t_far: np.ndarray | None = None,
) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant distribution that puts
    each weight's mass on its sample's interval [t_m, t_{m+1}) (the last
    interval closes at t_far).  All-zero rays fall back to uniform over
    [t_near, t_far].
    """
    coarse_t = np.atleast_2d(np.asarray(coarse_t, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    n, m = coarse_t.shape
    if t_far is None:
        t_far = coarse_t[:, -1] + (coarse_t[:, -1] - coarse_t[:, 0]) / max(m - 1, 1)
    if t_near is None:
        t_near = coarse_t[:, 0]
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n,))
    edges = np.concatenate([coarse_t, t_far[:, None]], axis=1)  # (N, M+1)

    total = weights.sum(axis=1)
    empty = total <= 0.0
    safe_w = np.where(empty[:, None], 1.0, weights)
    pdf = safe_w / safe_w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n, 1)), np.cumsum(pdf, axis=1)], axis=1)

    u = rng.random((n, m_fine))
    # batched searchsorted: offset each row into a disjoint band
    band = 2.0 * np.arange(n)[:, None]
    idx = np.searchsorted(
        (cdf + band).ravel(), (u + band).ravel(), side="right"
    ).reshape(n, m_fine) - 1 - np.arange(n)[:, None] * (m + 1)
    idx = np.clip(idx, 0, m - 1)
    lo = np.take_along_axis(edges, idx, axis=1)
    hi = np.take_along_axis(edges, idx + 1, axis=1)
    c0 = np.take_along_axis(cdf, idx, axis=1)
    mass = np.take_along_axis(pdf, idx, axis=1)
    frac = np.where(mass > 0, (u - c0) / np.where(mass > 0, mass, 1.0), 0.0)
    samples = lo + frac * (hi - lo)
    uniform = t_near[:, None] + u * (t_far - t_near)[:, None]
    return np.where(empty[:, None], uniform, samples)


@dataclass
class RenderCache:
    """Forward state retained for the backward pass."""

    ts: np.ndarray  # (N, M) merged sample depths
    deltas: np.ndarray  # (N, M)
    idx: np.ndarray  # (N, M, 8) flat grid node indices
    w: np.ndarray  # (N, M, 8) trilinear weights (zeroed outside bbox)
    inside: np.ndarray  # (N, M)
    d_raw: np.ndarray  # (N, M) interpolated raw density
    l_raw: np.ndarray  # (N, M) interpolated raw luminance
    sigma: np.ndarray  # (N, M)
    lum: np.ndarray  # (N, M)
    alpha: np.ndarray  # (N, M)
    trans: np.ndarray  # (N, M) transmittance T(m)
    weights: np.ndarray  # (N, M) quadrature weights
    logits_pts: np.ndarray | None  # (N, M, Q)
    rendered_logits: np.ndarray | None  # (N, Q)
    dist: np.ndarray | None  # (N, Q)


@dataclass
class RenderResult:
    lum: np.ndarray  # (N,)
    dist: np.ndarray | None  # (N, Q) softmax color distribution
    weights: np.ndarray  # (N, M) quadrature weights of the final pass
    ts: np.ndarray  # (N, M)
    cache: RenderCache | None = None


def _quadrature(sigma: np.ndarray, deltas: np.ndarray):
    """alpha, transmittance, and weights for (N, M) samples."""
    tau = sigma * deltas
    alpha = -np.expm1(-tau)
    trans = np.exp(-np.concatenate([np.zeros_like(tau[:, :1]), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    weights = trans * alpha
    return alpha, trans, weights


def _sample_field(params: FieldParams, rays: RayBundle, ts: np.ndarray):
    n, m = ts.shape
    pts = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
    d_raw, l_raw, idx, w, inside = query_scalar_grids(params, pts.reshape(-1, 3))
    idx = idx.reshape(n, m, 8)
    w = w.reshape(n, m, 8)
    inside = inside.reshape(n, m)
    d_raw = d_raw.reshape(n, m)
    l_raw = l_raw.reshape(n, m)
    sigma = np.where(inside, softplus(d_raw), 0.0)
    lum = np.where(inside, expit(l_raw), 0.0)
    return idx, w, inside, d_raw, l_raw, sigma, lum


def _point_logits(params: FieldParams, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dense per-point logits (N, M, Q); only for small batches (backward)."""
    q = params.num_bins
    return np.einsum(
        "nmc,nmcq->nmq", w, params.logits.reshape(-1, q)[idx], optimize=True
    )


def _rendered_logits(
    params: FieldParams, idx: np.ndarray, w: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """Volume-rendered logits (N, Q) without materializing per-point logits.

    Each (sample, corner) pair contributes quadrature weight times trilinear
    weight to one voxel row; accumulating through a sparse matrix keeps the
    memory at O(nonzeros + N Q)."""
    n, m = weights.shape
    coef = weights[:, :, None] * w  # (N, M, 8)
    keep = coef != 0.0
    ray_ids = np.broadcast_to(np.arange(n)[:, None, None], coef.shape)[keep]
    cols = idx[keep]
    data = coef[keep]
    nvox = int(np.prod(params.resolution))
    basis = sp.csr_matrix((data, (ray_ids, cols)), shape=(n, nvox))
    return basis @ params.logits.reshape(nvox, params.num_bins)


def render_rays(
    params: FieldParams,
    rays: RayBundle,
    m_coarse: int,
    m_fine: int,
    rng: np.random.Generator,
    want_color: bool = True,
    keep_cache: bool = False,
    ts: np.ndarray | None = None,
) -> RenderResult:
    """Hierarchical render: stratified coarse pass, importance-sampled fine
    pass, final integration over the merged sorted set.  Passing ``ts``
    skips sampling and integrates at exactly those depths."""
    rays = clip_to_bbox(rays, params.bbox_min, params.bbox_max)
    if ts is None:
        if m_coarse < 1 or m_fine < 0:
            raise ValueError("sampling counts must be >= 1 coarse, >= 0 fine")
        t_c = stratified_sample(rays.t_near, rays.t_far, m_coarse, rng)
        if m_fine > 0:
            pts = rays.origins[:, None, :] + t_c[..., None] * rays.dirs[:, None, :]
            d_raw, _, _, _, coarse_in = query_scalar_grids(params, pts.reshape(-1, 3))
            sigma_c = np.where(coarse_in, softplus(d_raw), 0.0).reshape(t_c.shape)
            deltas_c = np.diff(np.concatenate([t_c, rays.t_far[:, None]], axis=1), axis=1)
            _, _, w_c = _quadrature(sigma_c, deltas_c)
            t_f = importance_sample(t_c, w_c, m_fine, rng, rays.t_near, rays.t_far)
            ts = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
        else:
            ts = t_c
    else:
        ts = np.atleast_2d(np.asarray(ts, dtype=np.float64))

    idx, w, inside, d_raw, l_raw, sigma, lum = _sample_field(params, rays, ts)
    deltas = np.diff(np.concatenate([ts, rays.t_far[:, None]], axis=1), axis=1)
    alpha, trans, weights = _quadrature(sigma, deltas)
    out_lum = (weights * lum).sum(axis=1)
    logits_pts = None
    rendered_logits = None
    dist = None
    if want_color:
        if keep_cache:
            # backward needs per-point logits; callers keep these small
            logits_pts = _point_logits(params, idx, w)
            rendered_logits = np.einsum("nm,nmq->nq", weights, logits_pts, optimize=True)
        else:
            rendered_logits = _rendered_logits(params, idx, w, weights)
        z = rendered_logits - rendered_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        dist = e / e.sum(axis=1, keepdims=True)
    cache = None
    if keep_cache:
        cache = RenderCache(
            ts=ts, deltas=deltas, idx=idx, w=w, inside=inside,
            d_raw=d_raw, l_raw=l_raw, sigma=sigma, lum=lum,
            alpha=alpha, trans=trans, weights=weights,
            logits_pts=logits_pts, rendered_logits=rendered_logits, dist=dist,
        )
    return RenderResult(lum=out_lum, dist=dist, weights=weights, ts=ts, cache=cache)


def render_backward(
    params: FieldParams,
    cache: RenderCache,
    d_lum: np.ndarray | None,
    d_dist: np.ndarray | None,
    grads: GradBuffer,
    density: bool = True,
    luminance: bool = True,
    color: bool = True,
) -> None:
    """Exact analytic gradients of the quadrature w.r.t. the raw grids.

    ``d_lum`` is d(loss)/d(rendered luminance) per ray; ``d_dist`` is
    d(loss)/d(softmax distribution) per ray.  Flags select which grids
    receive gradient.
    """
    n, m = cache.ts.shape
    nvox = int(np.prod(params.resolution))
    d_lum = np.zeros(n) if d_lum is None else np.asarray(d_lum, dtype=np.float64)

    du = None
    if d_dist is not None and cache.dist is not None:
        # softmax backward: du = p * (g - <g, p>)
        p = cache.dist
        g = np.asarray(d_dist, dtype=np.float64)
        du = p * (g - (g * p).sum(axis=1, keepdims=True))

    # d(loss)/d(weight_m): contribution of every rendered channel
    a = d_lum[:, None] * cache.lum
    if du is not None:
        a = a + np.einsum("nq,nmq->nm", du, cache.logits_pts, optimize=True)

    if density:
        # d(loss)/d(sigma_k) = delta_k * (T_{k+1} a_k - sum_{m>k} w_m a_m)
        wa = cache.weights * a
        suffix = np.cumsum(wa[:, ::-1], axis=1)[:, ::-1] - wa
        t_next = cache.trans * (1.0 - cache.alpha)
        d_sigma = cache.deltas * (t_next * a - suffix)
        d_draw = np.where(cache.inside, d_sigma * expit(cache.d_raw), 0.0)
        contrib = d_draw[:, :, None] * cache.w
        grads.density += np.bincount(
            cache.idx.ravel(), weights=contrib.ravel(), minlength=nvox
        ).reshape(params.density_raw.shape)

    if luminance:
        dl = d_lum[:, None] * cache.weights
        d_lraw = np.where(cache.inside, dl * cache.lum * (1.0 - cache.lum), 0.0)
        contrib = d_lraw[:, :, None] * cache.w
        grads.lum += np.bincount(
            cache.idx.ravel(), weights=contrib.ravel(), minlength=nvox
        ).reshape(params.lum_raw.shape)

    if color and du is not None:
        dz = cache.weights[:, :, None] * du[:, None, :]  # (N, M, Q)
        flat = grads.logits.reshape(nvox, -1)
        np.add.at(flat, cache.idx.reshape(-1, 8), (cache.w[..., None] * dz[:, :, None, :]).reshape(-1, 8, params.num_bins))


def render_image(
    params: FieldParams,
    camera: Camera,
    m_coarse: int = 32,
    m_fine: int = 32,
    seed: int = 0,
    chunk: int = 4096,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-frame render: (H, W) luminance in [0,1], (H, W, 2) decoded ab,
    and (H, W, 3) clamped sRGB from the Lab concatenation."""
    bundle = pixel_rays(camera)
    n = len(bundle)
    lum = np.empty(n)
    ab = np.empty((n, 2))

    spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(span):
        s, e = span
        sub = RayBundle(
            bundle.origins[s:e], bundle.dirs[s:e], bundle.t_near[s:e], bundle.t_far[s:e]
        )
        # independent stream per chunk keeps results invariant to chunking
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(s,)))
        res = render_rays(params, sub, m_coarse, m_fine, rng)
        lum[s:e] = res.lum
        ab[s:e] = decode_argmax(res.dist, params.table)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)

    h, w = camera.height, camera.width
    lum_img = lum.reshape(h, w)
    ab_img = ab.reshape(h, w, 2)
    lab = np.concatenate([100.0 * lum_img[..., None], ab_img], axis=-1)
    rgb = lab_to_rgb(lab, clamp=True)
    return lum_img, ab_img, rgb


def write_planes(path_base, lum_img: np.ndarray, ab_img: np.ndarray) -> None:
    """Raw float32 sidecars: L in [0,100] (.L.f32) and ab (.ab.f32)."""
    with open(str(path_base) + ".L.f32", "wb") as fh:
        fh.write((100.0 * lum_img).astype("<f4").tobytes())
    with open(str(path_base) + ".ab.f32", "wb") as fh:
        fh.write(ab_img.astype("<f4").tobytes())


def read_plane(path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} float32 values")
    return data.reshape(shape).astype(np.float64)
