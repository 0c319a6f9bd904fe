"""sRGB (D65) <-> CIE Lab conversion, ab-plane quantization, and soft labels.

All conversions are plain float64 numpy on arrays of shape (..., 3); the last
axis holds the channels.  L is in [0, 100] and a, b nominally in [-128, 128]
in every interchange signature; training code normalizes L to [0, 1] itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "OutOfGamutError",
    "rgb_to_lab",
    "lab_to_rgb",
    "AbBinTable",
    "build_ab_bin_table",
    "save_bin_table",
    "load_bin_table",
    "SoftLabel",
    "soft_label",
    "soft_label_batch",
    "decode_argmax",
]

# Linear-sRGB -> XYZ for the D65 / 2-degree observer.  The white point is the
# image of (1,1,1), i.e. the matrix row sums, so the gray axis lands exactly
# on a = b = 0.
_RGB_TO_XYZ = np.array(
    [
        [0.4124, 0.3576, 0.1805],
        [0.2126, 0.7152, 0.0722],
        [0.0193, 0.1192, 0.9505],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0
# Slack for "channel is inside [0,1]" so float round-trip noise on gamut
# boundaries does not spuriously report out-of-gamut.
_GAMUT_TOL = 1e-6


class OutOfGamutError(ValueError):
    """Lab value has no sRGB representation and clamping was not requested."""


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    # Negative linear values appear for out-of-gamut Lab inputs; keep the
    # transfer function odd so they stay negative and fail the gamut test.
    mag = np.abs(c)
    enc = np.where(mag > 0.0031308, 1.055 * mag ** (1.0 / 2.4) - 0.055, 12.92 * mag)
    return np.sign(c) * enc


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def _lab_finv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3.0 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert sRGB values in [0,1] (shape (...,3)) to CIE Lab.

    Reference sRGB(D65) -> XYZ -> Lab mapping; total and deterministic on
    valid input.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab: np.ndarray, clamp: bool = False) -> np.ndarray:
    """Convert CIE Lab (shape (...,3)) back to sRGB.

    Exact inverse of :func:`rgb_to_lab` on in-gamut inputs.  With ``clamp``
    set, out-of-gamut channels are clamped to [0,1]; otherwise such inputs
    raise :class:`OutOfGamutError`.
    """
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _lab_finv(np.stack([fx, fy, fz], axis=-1)) * _WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    if clamp:
        return np.clip(rgb, 0.0, 1.0)
    if np.any(rgb < -_GAMUT_TOL) or np.any(rgb > 1.0 + _GAMUT_TOL):
        raise OutOfGamutError("Lab value maps outside the sRGB cube")
    return np.clip(rgb, 0.0, 1.0)


def _gamut_mask(ab: np.ndarray, l_values: np.ndarray) -> np.ndarray:
    """True for each ab pair representable in sRGB at >= 1 of the given L."""
    ab = np.asarray(ab, dtype=np.float64)
    ok = np.zeros(ab.shape[0], dtype=bool)
    for lum in l_values:
        lab = np.concatenate([np.full((ab.shape[0], 1), float(lum)), ab], axis=1)
        fy = (lab[:, 0] + 16.0) / 116.0
        fx = fy + lab[:, 1] / 500.0
        fz = fy - lab[:, 2] / 200.0
        xyz = _lab_finv(np.stack([fx, fy, fz], axis=-1)) * _WHITE
        raw = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
        ok |= np.all((raw >= -_GAMUT_TOL) & (raw <= 1.0 + _GAMUT_TOL), axis=1)
    return ok


@dataclass(frozen=True)
class AbBinTable:
    """Quantized in-gamut ab centers, ordered lexicographically by (a, b)."""

    centers: np.ndarray  # (Q, 2) float64
    grid_step: float

    def __post_init__(self) -> None:
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "centers", c)
        order = np.lexsort((c[:, 1], c[:, 0]))
        if not np.array_equal(order, np.arange(len(c))):
            raise ValueError("centers must be sorted lexicographically by (a, b)")

    @property
    def count(self) -> int:
        return int(self.centers.shape[0])

    def nearest(self, ab: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the k nearest centers for each ab pair.

        Equal distances within the selection resolve to the lower bin index
        (stable sort over the candidate set).
        ``ab`` has shape (..., 2); returns (..., k) index and distance arrays.
        """
        if not 1 <= k <= self.count:
            raise ValueError(f"k must be in [1, {self.count}]")
        ab = np.asarray(ab, dtype=np.float64)
        flat = ab.reshape(-1, 2)
        d2 = (
            (flat**2).sum(axis=1)[:, None]
            + (self.centers**2).sum(axis=1)[None, :]
            - 2.0 * (flat @ self.centers.T)
        )
        np.maximum(d2, 0.0, out=d2)
        if k < self.count:
            cand = np.sort(np.argpartition(d2, k - 1, axis=1)[:, :k], axis=1)
            cd2 = np.take_along_axis(d2, cand, axis=1)
            # rows where the k-th distance ties centers outside the selection
            # fall back to a full stable sort so the lower index always wins
            kth = cd2.max(axis=1)
            ambiguous = (d2 <= kth[:, None]).sum(axis=1) > k
            if np.any(ambiguous):
                full = np.argsort(d2[ambiguous], axis=1, kind="stable")[:, :k]
                cand[ambiguous] = full
                cd2[ambiguous] = np.take_along_axis(d2[ambiguous], full, axis=1)
        else:
            cand = np.broadcast_to(np.arange(self.count), d2.shape).copy()
            cd2 = np.take_along_axis(d2, cand, axis=1)
        order = np.argsort(cd2, axis=1, kind="stable")
        idx = np.take_along_axis(cand, order, axis=1)
        dist = np.sqrt(np.take_along_axis(cd2, order, axis=1))
        shape = ab.shape[:-1] + (k,)
        return idx.reshape(shape), dist.reshape(shape)


def build_ab_bin_table(
    grid_step: float = 10.0,
    half_range: float = 110.0,
    l_sweep: np.ndarray | None = None,
    dilate: bool = True,
) -> AbBinTable:
    """Quantize the ab plane and keep the centers representable in sRGB.

    Candidates sit at all multiples of ``grid_step`` in
    [-half_range, half_range]^2; a candidate is strictly in gamut iff it is
    representable for at least one L in ``l_sweep`` (default L = 1..99 step
    1).  With ``dilate`` (the default) the 8-neighbors of strictly in-gamut
    candidates are kept as well: boundary colors quantize into those
    neighboring bins, so the standard quantized ab palettes include them.
    ``dilate=False`` keeps only the strictly representable centers.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    n = int(round(half_range / grid_step))
    if abs(n * grid_step - half_range) > 1e-9:
        raise ValueError("half_range must be a positive multiple of grid_step")
    if l_sweep is None:
        l_sweep = np.arange(1.0, 100.0)
    vals = (np.arange(-n, n + 1) * grid_step).astype(np.float64)
    grid = np.stack(np.meshgrid(vals, vals, indexing="ij"), axis=-1).reshape(-1, 2)
    keep = _gamut_mask(grid, np.asarray(l_sweep, dtype=np.float64))
    if dilate:
        m = keep.reshape(2 * n + 1, 2 * n + 1)
        out = m.copy()
        for da in (-1, 0, 1):
            for db in (-1, 0, 1):
                shifted = np.zeros_like(m)
                src = m[
                    max(0, -da) : m.shape[0] - max(0, da),
                    max(0, -db) : m.shape[1] - max(0, db),
                ]
                shifted[
                    max(0, da) : m.shape[0] - max(0, -da),
                    max(0, db) : m.shape[1] - max(0, -db),
                ] = src
                out |= shifted
        keep = out.reshape(-1)
    return AbBinTable(centers=grid[keep], grid_step=float(grid_step))


def save_bin_table(table: AbBinTable, path) -> None:
    """Write a table as text: header ``grid_step count``, then ``a b`` rows."""
    lines = [f"{float(table.grid_step)!r} {table.count}"]
    lines += [f"{float(a)!r} {float(b)!r}" for a, b in table.centers]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_bin_table(path) -> AbBinTable:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed bin table header")
        step, count = float(header[0]), int(header[1])
        centers = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if centers.shape != (count, 2):
        raise ValueError(f"{path}: expected {count} centers, got {centers.shape}")
    return AbBinTable(centers=centers, grid_step=step)


@dataclass(frozen=True)
class SoftLabel:
    """Sparse distribution over table bins: k (index, weight) pairs.

    Entries are ordered by ascending distance; weights sum to 1.
    """

    indices: np.ndarray  # (k,) int
    weights: np.ndarray  # (k,) float64


def soft_label_batch(
    ab: np.ndarray, table: AbBinTable, k: int = 5, sigma: float = 5.0
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-weighted k-nearest-bin encoding for a batch of ab pairs.

    weight_i is proportional to exp(-dist_i^2 / (2 sigma^2)), normalized to
    sum to 1 per pixel.  Returns ((..., k) indices, (..., k) weights).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    idx, dist = table.nearest(ab, k=k)
    logw = -(dist**2) / (2.0 * sigma**2)
    logw -= logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=-1, keepdims=True)
    return idx, w


def soft_label(ab, table: AbBinTable, k: int = 5, sigma: float = 5.0) -> SoftLabel:
    idx, w = soft_label_batch(np.asarray(ab, dtype=np.float64), table, k=k, sigma=sigma)
    return SoftLabel(indices=idx, weights=w)


def decode_argmax(dist: np.ndarray, table: AbBinTable) -> np.ndarray:
    """Map distributions over the Q bins to the ab center of the argmax bin.

    ``dist`` has shape (..., Q); ties resolve to the lowest bin index.
    All-zero distributions are rejected.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[-1] != table.count:
        raise ValueError("distribution length does not match table count")
    if np.any(dist < 0):
        raise ValueError("distribution entries must be nonnegative")
    if np.any(dist.max(axis=-1) <= 0):
        raise ValueError("all-zero distribution cannot be decoded")
    q = np.argmax(dist, axis=-1)
    return table.centers[q]
