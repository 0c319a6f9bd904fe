"""Colorization backends.

A backend is a callable mapping an (H, W) float64 luminance array in [0, 1]
to an (H, W, 2) float64 ab array in [-128, 128].  The rule-based fallback is
always available and fully deterministic; the model wrapper adapts any
importable callable (for example the inference entry point of a pretrained
colorization network) to the same signature.
"""

from __future__ import annotations

import importlib

import numpy as np

__all__ = ["fallback_colorize", "load_model_backend"]


def fallback_colorize(lum: np.ndarray) -> np.ndarray:
    """Monotone luminance-to-chroma curve: a = 40 (L - 0.5), b = 20."""
    lum = np.asarray(lum, dtype=np.float64)
    a = 40.0 * (lum - 0.5)
    b = np.full_like(lum, 20.0)
    return np.stack([a, b], axis=-1)


def load_model_backend(spec: str):
    """Resolve "package.module:callable" into a validated backend.

    The callable receives the luminance array and must return ab values per
    pixel; outputs are checked and clipped to the protocol range.
    """
    if ":" not in spec:
        raise ValueError(f"model spec {spec!r} must look like module:callable")
    mod_name, attr = spec.split(":", 1)
    module = importlib.import_module(mod_name)
    fn = getattr(module, attr)

    def backend(lum: np.ndarray) -> np.ndarray:
        ab = np.asarray(fn(lum), dtype=np.float64)
        if ab.shape != lum.shape + (2,):
            raise ValueError(
                f"model returned shape {ab.shape}, expected {lum.shape + (2,)}"
            )
        if not np.all(np.isfinite(ab)):
            raise ValueError("model returned non-finite chroma values")
        return np.clip(ab, -128.0, 128.0)

    return backend
