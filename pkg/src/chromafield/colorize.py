"""Color-knowledge sources and their guards.

Three interchangeable colorizers produce an ab patch for a rendered
luminance patch: an oracle reading the ground-truth dataset (plus optional
per-query Gaussian noise), a deterministic palette curve, and an external
subprocess speaking a binary request/response protocol over stdio.

Histogram similarity gates which colorized patches are allowed to supervise
training: a patch survives purification iff its ab histogram's best cosine
similarity against the base references strictly exceeds the threshold.
"""

from __future__ import annotations

import os
import selectors
import shlex
import struct
import subprocess
import time
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ColorizeError",
    "PatchQuery",
    "OracleColorizer",
    "PaletteColorizer",
    "ExternalColorizer",
    "colorize_query",
    "Histogram2D",
    "ab_histogram",
    "hist_similarity",
    "BaseSet",
    "purify",
    "build_base_set",
    "REQUEST_MAGIC",
    "RESPONSE_MAGIC",
    "encode_request",
    "decode_response",
]

AB_RANGE = 110.0
REQUEST_MAGIC = b"CLRQ"
RESPONSE_MAGIC = b"CLRA"


class ColorizeError(RuntimeError):
    """A colorizer query failed; the caller skips the patch."""


@dataclass
class PatchQuery:
    """Rendered luminance patch plus the provenance the oracle needs."""

    lum: np.ndarray  # (K, K) in [0, 1]
    coords: np.ndarray | None = None  # (K, K, 2) pixel positions in the view
    view_index: int | None = None


def _bilinear(plane: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (H, W) or (H, W, C) ``plane`` at float (x, y) ``coords``."""
    h, w = plane.shape[:2]
    x = np.clip(coords[..., 0], 0.0, w - 1.0)
    y = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = np.minimum(x.astype(np.int64), w - 2)
    y0 = np.minimum(y.astype(np.int64), h - 2)
    fx = (x - x0)[..., None] if plane.ndim == 3 else x - x0
    fy = (y - y0)[..., None] if plane.ndim == 3 else y - y0
    p00 = plane[y0, x0]
    p01 = plane[y0, x0 + 1]
    p10 = plane[y0 + 1, x0]
    p11 = plane[y0 + 1, x0 + 1]
    return (
        p00 * (1 - fx) * (1 - fy)
        + p01 * fx * (1 - fy)
        + p10 * (1 - fx) * fy
        + p11 * fx * fy
    )


class OracleColorizer:
    """Ground-truth ab lookup with fresh zero-mean Gaussian noise per query.

    Emulates the view-to-view inconsistency of a real 2D colorizer while
    staying centered on the truth, which is what makes the averaging
    behavior of query-based injection testable.
    """

    def __init__(self, dataset, noise_sigma: float = 0.0, seed: int = 0):
        self.dataset = dataset
        self.noise_sigma = float(noise_sigma)
        self.rng = np.random.default_rng(seed)

    def colorize(self, query: PatchQuery) -> np.ndarray:
        if query.coords is None or query.view_index is None:
            raise ColorizeError("oracle queries need pixel coords and a view index")
        view = self.dataset.views[query.view_index]
        ab = _bilinear(view.lab[..., 1:], query.coords)
        if self.noise_sigma > 0:
            ab = ab + self.rng.normal(0.0, self.noise_sigma, size=ab.shape)
        return np.clip(ab, -128.0, 128.0)


class PaletteColorizer:
    """Deterministic per-pixel lookup ab = curve(L).

    The default curve moves a linearly with luminance and holds b fixed:
    a = 40 (L - 0.5), b = 20.
    """

    def __init__(self, curve=None):
        self.curve = curve if curve is not None else (lambda l: (40.0 * (l - 0.5), np.full_like(l, 20.0)))

    @classmethod
    def constant(cls, a: float, b: float) -> "PaletteColorizer":
        return cls(curve=lambda l: (np.full_like(l, a), np.full_like(l, b)))

    def colorize(self, query: PatchQuery) -> np.ndarray:
        a, b = self.curve(np.asarray(query.lum, dtype=np.float64))
        return np.clip(np.stack([a, b], axis=-1), -128.0, 128.0)


def encode_request(lum: np.ndarray) -> bytes:
    """CLRQ, u32 width, u32 height, width*height float32 L, row-major, LE."""
    lum = np.asarray(lum, dtype=np.float64)
    h, w = lum.shape
    return (
        REQUEST_MAGIC
        + struct.pack("<II", w, h)
        + lum.astype("<f4").tobytes()
    )


def decode_response(payload: bytes, width: int, height: int) -> np.ndarray:
    """Parse a full CLRA response; raises ColorizeError on any malformation."""
    header = 4 + 8
    if len(payload) < header:
        raise ColorizeError("truncated response header")
    if payload[:4] != RESPONSE_MAGIC:
        raise ColorizeError(f"bad response magic {payload[:4]!r}")
    w, h = struct.unpack("<II", payload[4:12])
    if (w, h) != (width, height):
        raise ColorizeError(f"response dims {(w, h)} do not echo request {(width, height)}")
    body = payload[header:]
    if len(body) != w * h * 8:
        raise ColorizeError("truncated response body")
    ab = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w, 2)
    if not np.all(np.isfinite(ab)) or np.abs(ab).max() > 128.0:
        raise ColorizeError("response ab values outside [-128, 128]")
    return ab


class ExternalColorizer:
    """Client for the stdio subprocess protocol; one in-flight request.

    A protocol failure kills the child; the next query respawns it once.
    Use as a context manager or call close().
    """

    def __init__(self, command: str, timeout: float = 30.0):
        self.command = command
        self.timeout = float(timeout)
        self._proc: subprocess.Popen | None = None

    def _spawn(self) -> None:
        self._proc = subprocess.Popen(
            shlex.split(self.command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )
        os.set_blocking(self._proc.stdout.fileno(), False)

    def _read_exact(self, n: int, deadline: float) -> bytes:
        fd = self._proc.stdout.fileno()
        buf = bytearray()
        sel = selectors.DefaultSelector()
        sel.register(fd, selectors.EVENT_READ)
        try:
            while len(buf) < n:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ColorizeError("external colorizer timed out")
                if not sel.select(timeout=remaining):
                    continue
                chunk = os.read(fd, n - len(buf))
                if chunk == b"":
                    raise ColorizeError("external colorizer closed its output")
                buf.extend(chunk)
        finally:
            sel.close()
        return bytes(buf)

    def colorize(self, query: PatchQuery) -> np.ndarray:
        lum = np.asarray(query.lum, dtype=np.float64)
        h, w = lum.shape
        if self._proc is None or self._proc.poll() is not None:
            self._spawn()
        try:
            self._proc.stdin.write(encode_request(lum))
            self._proc.stdin.flush()
            deadline = time.monotonic() + self.timeout
            payload = self._read_exact(12 + w * h * 8, deadline)
            return decode_response(payload, w, h)
        except (BrokenPipeError, OSError) as exc:
            self._kill()
            raise ColorizeError(f"external colorizer I/O failure: {exc}") from exc
        except ColorizeError:
            self._kill()
            raise

    def _kill(self) -> None:
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except Exception:
                pass
            self._proc = None

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except Exception:
                self._proc.kill()
        self._proc = None

    def __enter__(self) -> "ExternalColorizer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def colorize_query(colorizer, query: PatchQuery) -> np.ndarray:
    """Run one query; (K, K, 2) ab in [-128, 128] or ColorizeError."""
    ab = colorizer.colorize(query)
    ab = np.asarray(ab, dtype=np.float64)
    if ab.shape != query.lum.shape + (2,):
        raise ColorizeError(f"colorizer returned shape {ab.shape}")
    return ab


@dataclass(frozen=True)
class Histogram2D:
    """Normalized B x B histogram over the ab square [-110, 110]^2."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("histogram must be square")
        if np.any(v < 0):
            raise ValueError("histogram entries must be nonnegative")
        total = v.sum()
        if total <= 0:
            raise ValueError("empty histogram")
        object.__setattr__(self, "values", v / total)

    @property
    def bins(self) -> int:
        return self.values.shape[0]


def ab_histogram(ab: np.ndarray, bins: int = 32) -> Histogram2D:
    """Count ab pairs on a uniform grid over [-110, 110]^2, edge-clamped."""
    if bins < 2:
        raise ValueError("need at least 2 bins per axis")
    ab = np.asarray(ab, dtype=np.float64).reshape(-1, 2)
    scaled = (ab + AB_RANGE) / (2.0 * AB_RANGE) * bins
    ij = np.clip(scaled.astype(np.int64), 0, bins - 1)
    flat = ij[:, 0] * bins + ij[:, 1]
    counts = np.bincount(flat, minlength=bins * bins).reshape(bins, bins)
    return Histogram2D(values=counts.astype(np.float64))


def hist_similarity(h1: Histogram2D, h2: Histogram2D) -> float:
    """Cosine similarity of the two histograms; in [0, 1] for valid inputs."""
    if h1.bins != h2.bins:
        raise ValueError("histograms must share the bin count")
    a = h1.values.ravel()
    b = h2.values.ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm histogram")
    return float(min(1.0, (a @ b) / (na * nb)))


@dataclass
class BaseSet:
    """Reference colorized patches with precomputed histograms."""

    patches: list[np.ndarray]
    histograms: list[Histogram2D]
    threshold: float

    def __post_init__(self) -> None:
        if not self.patches:
            raise ValueError("base set needs at least one reference")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")

    def best_similarity(self, hist: Histogram2D) -> float:
        return max(hist_similarity(hist, h) for h in self.histograms)


def purify(ab_patch: np.ndarray, base: BaseSet, bins: int = 32) -> np.ndarray | None:
    """Keep the patch iff its best base similarity strictly exceeds the
    threshold; rejected patches contribute no color supervision."""
    sim = base.best_similarity(ab_histogram(ab_patch, bins=bins))
    return ab_patch if sim > base.threshold else None


def build_base_set(
    render_patch,
    colorizer,
    n_cameras: int,
    n: int,
    s_base: float,
    threshold: float,
    rng: np.random.Generator,
    bins: int = 32,
    max_retries_per_patch: int = 10,
) -> BaseSet:
    """Colorize ``n`` wide-field patches rendered from random cameras.

    ``render_patch(cam_index, scale, rng) -> PatchQuery`` is supplied by the
    trainer and hides camera/center sampling.  A failed colorizer query
    resamples a different patch, up to the retry budget.
    """
    if n < 1:
        raise ValueError("need at least one base patch")
    patches: list[np.ndarray] = []
    hists: list[Histogram2D] = []
    for _ in range(n):
        for attempt in range(max_retries_per_patch):
            cam = int(rng.integers(n_cameras))
            query = render_patch(cam, s_base, rng)
            try:
                ab = colorize_query(colorizer, query)
            except ColorizeError:
                continue
            patches.append(ab)
            hists.append(ab_histogram(ab, bins=bins))
            break
        else:
            raise ColorizeError(
                f"could not colorize a base patch in {max_retries_per_patch} tries"
            )
    return BaseSet(patches=patches, histograms=hists, threshold=threshold)
