"""Dense trilinear voxel grids for density, luminance, and color logits.

Grid nodes are vertex-centered: node (i,j,k) sits at
bbox_min + (i,j,k)/(resolution-1) * (bbox_max - bbox_min), so the bbox
corners are grid nodes and trilinear interpolation covers the whole box.
Raw (pre-activation) values are interpolated first; activations are
softplus for density and sigmoid for luminance.  Points outside the bbox
read as sigma = 0, lum = 0, logits = 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .color import AbBinTable

__all__ = [
    "FieldParams",
    "FieldSample",
    "GradBuffer",
    "init_field",
    "query_field",
    "query_backward",
    "trilinear_coeffs",
    "softplus",
    "softplus_inv",
    "save_field",
    "load_field",
]

_MAGIC = b"CNRF"
_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class FieldParams:
    bbox_min: np.ndarray  # (3,)
    bbox_max: np.ndarray  # (3,)
    density_raw: np.ndarray  # (Nx, Ny, Nz) raw, sigma = softplus(.)
    lum_raw: np.ndarray  # (Nx, Ny, Nz) raw, lum = sigmoid(.)
    logits: np.ndarray  # (Nx, Ny, Nz, Q)
    table: AbBinTable

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density_raw.shape

    @property
    def num_bins(self) -> int:
        return int(self.logits.shape[-1])

    def validate(self) -> None:
        if self.lum_raw.shape != self.density_raw.shape:
            raise ValueError("density and luminance grids must share resolution")
        if self.logits.shape[:3] != self.density_raw.shape:
            raise ValueError("logits grid must share the scalar grid resolution")
        if self.logits.shape[-1] != self.table.count:
            raise ValueError("logits channel count must equal the bin table count")
        for g in (self.density_raw, self.lum_raw, self.logits):
            if not np.all(np.isfinite(g)):
                raise ValueError("grids must hold finite values only")


@dataclass
class FieldSample:
    """Activated field outputs at query points (batch of N)."""

    sigma: np.ndarray  # (N,) >= 0
    lum: np.ndarray  # (N,) in [0, 1]
    logits: np.ndarray  # (N, Q)


@dataclass
class GradBuffer:
    density: np.ndarray
    lum: np.ndarray
    logits: np.ndarray

    @classmethod
    def zeros_like(cls, params: FieldParams) -> "GradBuffer":
        return cls(
            density=np.zeros_like(params.density_raw),
            lum=np.zeros_like(params.lum_raw),
            logits=np.zeros_like(params.logits),
        )

    def zero(self) -> None:
        self.density.fill(0.0)
        self.lum.fill(0.0)
        self.logits.fill(0.0)


def init_field(
    bbox_min,
    bbox_max,
    resolution,
    table: AbBinTable,
    init_sigma: float = 0.1,
    init_lum: float = 0.5,
) -> FieldParams:
    """Fresh field: activated sigma = init_sigma everywhere, lum = init_lum,
    logits zero (uniform color distribution after softmax)."""
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    if np.any(bbox_max <= bbox_min):
        raise ValueError("bbox extents must be positive on every axis")
    res = tuple(int(r) for r in resolution)
    if len(res) != 3 or any(r < 2 for r in res):
        raise ValueError("resolution must be >= 2 per axis")
    if init_sigma <= 0 or not 0 < init_lum < 1:
        raise ValueError("init_sigma must be > 0 and init_lum in (0, 1)")
    d0 = float(softplus_inv(init_sigma))
    l0 = float(np.log(init_lum / (1.0 - init_lum)))
    return FieldParams(
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        density_raw=np.full(res, d0),
        lum_raw=np.full(res, l0),
        logits=np.zeros(res + (table.count,)),
        table=table,
    )


def trilinear_coeffs(
    params: FieldParams, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point interpolation structure for the shared grid layout.

    Returns (idx, w, inside): flat node indices (N, 8) into a raveled
    (Nx, Ny, Nz) grid, trilinear weights (N, 8), and the in-bbox mask (N,).
    Weights of outside points are zeroed.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    res = np.array(params.resolution)
    extent = params.bbox_max - params.bbox_min
    inside = np.all((x >= params.bbox_min) & (x <= params.bbox_max), axis=1)
    g = (x - params.bbox_min) * ((res - 1) / extent)
    np.clip(g, 0.0, res - 1, out=g)
    i0 = np.minimum(g.astype(np.int64), res - 2)
    f = g - i0

    stride = np.array([res[1] * res[2], res[2], 1], dtype=np.int64)
    # corner order: (dx, dy, dz) with dz fastest
    offsets = np.array(
        [dx * stride[0] + dy * stride[1] + dz
         for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
        dtype=np.int64,
    )
    idx = (i0 @ stride)[:, None] + offsets[None, :]
    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    w[~inside] = 0.0
    return idx, w, inside


def _interp(grid_flat: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (grid_flat[idx] * w).sum(axis=1)


@numba.njit(cache=True, parallel=True)
def _scalar2_kernel(x, bmin, scale, nx, ny, nz, dflat, lflat,
                    d_raw, l_raw, idx, w, inside):  # pragma: no cover
    n = x.shape[0]
    for i in numba.prange(n):
        ins = True
        gx = (x[i, 0] - bmin[0]) * scale[0]
        gy = (x[i, 1] - bmin[1]) * scale[1]
        gz = (x[i, 2] - bmin[2]) * scale[2]
        if gx < 0.0 or gx > nx - 1 or gy < 0.0 or gy > ny - 1 or gz < 0.0 or gz > nz - 1:
            ins = False
        if gx < 0.0:
            gx = 0.0
        elif gx > nx - 1:
            gx = float(nx - 1)
        if gy < 0.0:
            gy = 0.0
        elif gy > ny - 1:
            gy = float(ny - 1)
        if gz < 0.0:
            gz = 0.0
        elif gz > nz - 1:
            gz = float(nz - 1)
        ix = min(int(gx), nx - 2)
        iy = min(int(gy), ny - 2)
        iz = min(int(gz), nz - 2)
        fx = gx - ix
        fy = gy - iy
        fz = gz - iz
        base = (ix * ny + iy) * nz + iz
        dv = 0.0
        lv = 0.0
        c = 0
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    j = base + (dx * ny + dy) * nz + dz
                    ww = wx * wy * wz if ins else 0.0
                    idx[i, c] = j
                    w[i, c] = ww
                    dv += ww * dflat[j]
                    lv += ww * lflat[j]
                    c += 1
        d_raw[i] = dv
        l_raw[i] = lv
        inside[i] = ins


def query_scalar_grids(params: FieldParams, x: np.ndarray):
    """Fused raw trilinear read of the density and luminance grids.

    Returns (d_raw, l_raw, idx, w, inside) for points (N, 3); the idx/w
    pairs feed the backward scatter and the sparse color path.  Matches
    :func:`trilinear_coeffs` + :func:`_interp` exactly, minus the
    temporaries.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    n = x.shape[0]
    nx, ny, nz = params.resolution
    scale = (np.array([nx, ny, nz], dtype=np.float64) - 1.0) / (
        params.bbox_max - params.bbox_min
    )
    d_raw = np.empty(n)
    l_raw = np.empty(n)
    idx = np.empty((n, 8), dtype=np.int64)
    w = np.empty((n, 8))
    inside = np.empty(n, dtype=np.bool_)
    _scalar2_kernel(
        x, np.ascontiguousarray(params.bbox_min), scale, nx, ny, nz,
        params.density_raw.reshape(-1), params.lum_raw.reshape(-1),
        d_raw, l_raw, idx, w, inside,
    )
    return d_raw, l_raw, idx, w, inside


def query_field(params: FieldParams, x: np.ndarray) -> FieldSample:
    """Trilinear raw interpolation at world points x (N, 3), then activations."""
    idx, w, inside = trilinear_coeffs(params, x)
    d_raw = _interp(params.density_raw.reshape(-1), idx, w)
    l_raw = _interp(params.lum_raw.reshape(-1), idx, w)
    sigma = np.where(inside, softplus(d_raw), 0.0)
    lum = np.where(inside, expit(l_raw), 0.0)
    q = params.num_bins
    logits = np.einsum(
        "nc,ncq->nq", w, params.logits.reshape(-1, q)[idx], optimize=True
    )
    return FieldSample(sigma=sigma, lum=lum, logits=logits)


def query_backward(
    params: FieldParams,
    x: np.ndarray,
    d_sigma: np.ndarray | None,
    d_lum: np.ndarray | None,
    d_logits: np.ndarray | None,
    grads: GradBuffer,
) -> None:
    """Accumulate d(loss)/d(raw grids) for upstream gradients at points x.

    Upstream arrays may be None to skip a channel.  Outside-bbox points
    contribute nothing (their outputs are constants).
    """
    idx, w, inside = trilinear_coeffs(params, x)
    nvox = int(np.prod(params.resolution))
    if d_sigma is not None:
        d_raw = _interp(params.density_raw.reshape(-1), idx, w)
        up = np.where(inside, np.asarray(d_sigma, dtype=np.float64), 0.0)
        contrib = (up * expit(d_raw))[:, None] * w  # softplus' = sigmoid
        grads.density += np.bincount(
            idx.ravel(), weights=contrib.ravel(), minlength=nvox
        ).reshape(params.density_raw.shape)
    if d_lum is not None:
        l_raw = _interp(params.lum_raw.reshape(-1), idx, w)
        s = expit(l_raw)
        up = np.where(inside, np.asarray(d_lum, dtype=np.float64), 0.0)
        contrib = (up * s * (1.0 - s))[:, None] * w
        grads.lum += np.bincount(
            idx.ravel(), weights=contrib.ravel(), minlength=nvox
        ).reshape(params.lum_raw.shape)
    if d_logits is not None:
        up = np.asarray(d_logits, dtype=np.float64).copy()
        up[~inside] = 0.0
        flat = grads.logits.reshape(nvox, -1)
        np.add.at(flat, idx, w[:, :, None] * up[:, None, :])


def save_field(params: FieldParams, path) -> None:
    """Binary format: magic CNRF, version u32, bbox 6xf64, resolution 3xu32,
    Q u32, then the three grids as little-endian float32, x varying fastest
    (channel fastest within a voxel for the logits grid)."""
    params.validate()
    nx, ny, nz = params.resolution
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(np.concatenate([params.bbox_min, params.bbox_max]).astype("<f8").tobytes())
        fh.write(struct.pack("<3I", nx, ny, nz))
        fh.write(struct.pack("<I", params.num_bins))
        for grid in (params.density_raw, params.lum_raw):
            fh.write(np.transpose(grid, (2, 1, 0)).astype("<f4").tobytes())
        fh.write(np.transpose(params.logits, (2, 1, 0, 3)).astype("<f4").tobytes())


def load_field(path, table: AbBinTable) -> FieldParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a field checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        bbox = np.frombuffer(fh.read(48), dtype="<f8")
        nx, ny, nz = struct.unpack("<3I", fh.read(12))
        (q,) = struct.unpack("<I", fh.read(4))
        if q != table.count:
            raise ValueError(
                f"{path}: checkpoint has {q} color bins, table has {table.count}"
            )
        nvox = nx * ny * nz

        def read_grid(count):
            data = np.frombuffer(fh.read(4 * count), dtype="<f4")
            if data.size != count:
                raise ValueError(f"{path}: truncated grid data")
            return data.astype(np.float64)

        density = read_grid(nvox).reshape(nz, ny, nx).transpose(2, 1, 0)
        lum = read_grid(nvox).reshape(nz, ny, nx).transpose(2, 1, 0)
        logits = read_grid(nvox * q).reshape(nz, ny, nx, q).transpose(2, 1, 0, 3)
    params = FieldParams(
        bbox_min=bbox[:3].copy(),
        bbox_max=bbox[3:].copy(),
        density_raw=np.ascontiguousarray(density),
        lum_raw=np.ascontiguousarray(lum),
        logits=np.ascontiguousarray(logits),
        table=table,
    )
    params.validate()
    return params
