"""Synthetic blob scenes, orbit cameras, and dataset I/O.

Dataset directory layout:
    cameras.json      {"focal", "width", "height", "bbox", "poses": [3x4 ...]}
    view_%03d.png     8-bit sRGB render
    view_%03d.L.f32   float32 L plane, Lab scale [0, 100], row-major
    view_%03d.ab.f32  float32 (a, b) pairs, row-major

Poses are world-from-camera [R | t], row-major.  The float sidecars carry
the exact pre-quantization Lab planes; PNGs are for viewing and PSNR-style
comparison only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .color import rgb_to_lab
from .rendering import Camera, clip_to_bbox, pixel_rays, read_plane

__all__ = [
    "Blob",
    "SyntheticScene",
    "View",
    "MultiViewDataset",
    "DatasetError",
    "analytic_field",
    "orbit_cameras",
    "generate_views",
    "save_dataset",
    "load_dataset",
]


class DatasetError(ValueError):
    """Malformed or inconsistent dataset on disk."""


@dataclass
class Blob:
    center: np.ndarray  # (3,)
    radius: float
    density_peak: float
    rgb: np.ndarray  # (3,) in [0,1]
    falloff: str = "gaussian"  # or "hard"

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("blob radius must be positive")
        if self.falloff not in ("gaussian", "hard"):
            raise ValueError(f"unknown falloff {self.falloff!r}")


@dataclass
class SyntheticScene:
    blobs: list[Blob]
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self) -> None:
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        for b in self.blobs:
            if np.any(b.center < self.bbox_min) or np.any(b.center > self.bbox_max):
                raise ValueError("blob centers must lie inside the bbox")

    @classmethod
    def from_json(cls, path) -> "SyntheticScene":
        with open(path) as fh:
            data = json.load(fh)
        try:
            blobs = [
                Blob(
                    center=b["center"],
                    radius=b["radius"],
                    density_peak=b["density_peak"],
                    rgb=b["rgb"],
                    falloff=b.get("falloff", "gaussian"),
                )
                for b in data["blobs"]
            ]
            return cls(blobs=blobs, bbox_min=data["bbox"][0], bbox_max=data["bbox"][1])
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{path}: malformed scene spec ({exc})") from exc

    def to_json(self, path) -> None:
        data = {
            "bbox": [self.bbox_min.tolist(), self.bbox_max.tolist()],
            "blobs": [
                {
                    "center": b.center.tolist(),
                    "radius": b.radius,
                    "density_peak": b.density_peak,
                    "rgb": b.rgb.tolist(),
                    "falloff": b.falloff,
                }
                for b in self.blobs
            ],
        }
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2)


def analytic_field(scene: SyntheticScene, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Continuous ground-truth field: density and sRGB emission at points x.

    Gaussian blobs contribute peak * exp(-|x-c|^2 / (2 (r/2)^2)); hard blobs
    contribute peak inside radius r.  Emission is the density-weighted blob
    color mix, black where the total density vanishes.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    sigma = np.zeros(n)
    color_acc = np.zeros((n, 3))
    for b in scene.blobs:
        d2 = ((x - b.center) ** 2).sum(axis=1)
        if b.falloff == "gaussian":
            s = b.density_peak * np.exp(-d2 / (2.0 * (b.radius / 2.0) ** 2))
        else:
            s = np.where(d2 <= b.radius**2, b.density_peak, 0.0)
        sigma += s
        color_acc += s[:, None] * b.rgb
    rgb = np.where(sigma[:, None] > 0, color_acc / np.maximum(sigma, 1e-300)[:, None], 0.0)
    return sigma, rgb


@dataclass
class View:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) in [0,1]
    lab: np.ndarray  # (H, W, 3), L in [0,100]
    lum: np.ndarray = field(init=False)  # (H, W) L/100

    def __post_init__(self) -> None:
        self.lum = self.lab[..., 0] / 100.0


@dataclass
class MultiViewDataset:
    views: list[View]
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __len__(self) -> int:
        return len(self.views)


def orbit_cameras(
    target,
    n_views: int,
    radius: float,
    elevation_deg: float,
    width: int,
    height: int,
    focal: float,
    phase: float = 0.0,
) -> list[Camera]:
    """Cameras evenly spaced on a circle around ``target``, all looking at it."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    elev = math.radians(elevation_deg)
    for i in range(n_views):
        phi = phase + 2.0 * math.pi * i / n_views
        eye = target + radius * np.array(
            [math.cos(phi) * math.cos(elev), math.sin(phi) * math.cos(elev), math.sin(elev)]
        )
        cams.append(Camera.look_at(eye, target, width=width, height=height, focal=focal))
    return cams


def _render_analytic(scene: SyntheticScene, camera: Camera, samples_per_ray: int) -> np.ndarray:
    """Deterministic midpoint quadrature of the analytic field, (H, W, 3)."""
    rays = clip_to_bbox(pixel_rays(camera), scene.bbox_min, scene.bbox_max)
    n = len(rays)
    m = samples_per_ray
    frac = (np.arange(m) + 0.5) / m
    ts = rays.t_near[:, None] + frac[None, :] * (rays.t_far - rays.t_near)[:, None]
    pts = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
    sigma, rgb = analytic_field(scene, pts.reshape(-1, 3))
    sigma = sigma.reshape(n, m)
    rgb = rgb.reshape(n, m, 3)
    deltas = ((rays.t_far - rays.t_near) / m)[:, None] * np.ones_like(sigma)
    tau = sigma * deltas
    alpha = -np.expm1(-tau)
    trans = np.exp(
        -np.concatenate([np.zeros((n, 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1)
    )
    weights = trans * alpha
    img = (weights[..., None] * rgb).sum(axis=1)
    return img.reshape(camera.height, camera.width, 3)


def analytic_opacity(scene: SyntheticScene, camera: Camera, samples_per_ray: int = 256) -> np.ndarray:
    """Accumulated opacity per pixel of the exact scene; (H, W) in [0, 1].

    Thresholding this mask picks out the pixels where a ray meets surface.
    """
    rays = clip_to_bbox(pixel_rays(camera), scene.bbox_min, scene.bbox_max)
    n = len(rays)
    m = samples_per_ray
    frac = (np.arange(m) + 0.5) / m
    ts = rays.t_near[:, None] + frac[None, :] * (rays.t_far - rays.t_near)[:, None]
    pts = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
    sigma, _ = analytic_field(scene, pts.reshape(-1, 3))
    tau = sigma.reshape(n, m) * ((rays.t_far - rays.t_near) / m)[:, None]
    alpha = -np.expm1(-tau.sum(axis=1))
    return alpha.reshape(camera.height, camera.width)


def generate_views(
    scene: SyntheticScene,
    n_views: int,
    image_size: int = 64,
    focal: float | None = None,
    orbit_radius: float | None = None,
    orbit_elevation_deg: float = 25.0,
    samples_per_ray: int = 256,
) -> MultiViewDataset:
    """Orbit views of the scene with exact Lab ground truth per view."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    center = (scene.bbox_min + scene.bbox_max) / 2.0
    diag = float(np.linalg.norm(scene.bbox_max - scene.bbox_min))
    if orbit_radius is None:
        orbit_radius = 1.5 * diag
    if focal is None:
        # frame the whole box with ~10% margin
        focal = 1.1 * image_size * (orbit_radius - diag / 2) / diag
    cams = orbit_cameras(
        center, n_views, orbit_radius, orbit_elevation_deg,
        width=image_size, height=image_size, focal=focal,
    )
    views = []
    for cam in cams:
        rgb = np.clip(_render_analytic(scene, cam, samples_per_ray), 0.0, 1.0)
        lab = rgb_to_lab(rgb)
        views.append(View(camera=cam, rgb=rgb, lab=lab))
    return MultiViewDataset(views=views, bbox_min=scene.bbox_min, bbox_max=scene.bbox_max)


def save_dataset(dataset: MultiViewDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not dataset.views:
        raise DatasetError("dataset has no views")
    w, h = dataset.views[0].camera.width, dataset.views[0].camera.height
    focal = dataset.views[0].camera.focal
    poses = []
    for v in dataset.views:
        if v.camera.width != w or v.camera.height != h:
            raise DatasetError("views must share image dimensions")
        if v.rgb.shape != (h, w, 3) or v.lab.shape != (h, w, 3):
            raise DatasetError("image dimensions do not match the camera")
        poses.append(np.concatenate([v.camera.rot, v.camera.pos[:, None]], axis=1).tolist())
    meta = {
        "focal": focal,
        "width": w,
        "height": h,
        "bbox": [dataset.bbox_min.tolist(), dataset.bbox_max.tolist()],
        "poses": poses,
    }
    with open(directory / "cameras.json", "w") as fh:
        json.dump(meta, fh)
    for i, v in enumerate(dataset.views):
        img = np.clip(np.rint(v.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(directory / f"view_{i:03d}.png")
        with open(directory / f"view_{i:03d}.L.f32", "wb") as fh:
            fh.write(v.lab[..., 0].astype("<f4").tobytes())
        with open(directory / f"view_{i:03d}.ab.f32", "wb") as fh:
            fh.write(v.lab[..., 1:].astype("<f4").tobytes())


def load_dataset(directory) -> MultiViewDataset:
    directory = Path(directory)
    cam_path = directory / "cameras.json"
    if not cam_path.exists():
        raise DatasetError(f"{directory}: missing cameras.json")
    try:
        with open(cam_path) as fh:
            meta = json.load(fh)
        focal, w, h = meta["focal"], meta["width"], meta["height"]
        bbox_min, bbox_max = meta["bbox"]
        poses = meta["poses"]
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"{cam_path}: malformed camera file ({exc})") from exc
    views = []
    for i, pose in enumerate(poses):
        pose = np.asarray(pose, dtype=np.float64)
        if pose.shape != (3, 4):
            raise DatasetError(f"{cam_path}: pose {i} is not 3x4")
        cam = Camera(width=w, height=h, focal=focal, rot=pose[:, :3], pos=pose[:, 3])
        png = directory / f"view_{i:03d}.png"
        if not png.exists():
            raise DatasetError(f"{directory}: missing {png.name}")
        rgb = np.asarray(Image.open(png), dtype=np.float64)[..., :3] / 255.0
        if rgb.shape != (h, w, 3):
            raise DatasetError(f"{png}: dimension mismatch")
        lplane = read_plane(directory / f"view_{i:03d}.L.f32", (h, w))
        ab = read_plane(directory / f"view_{i:03d}.ab.f32", (h, w, 2))
        lab = np.concatenate([lplane[..., None], ab], axis=-1)
        views.append(View(camera=cam, rgb=rgb, lab=lab))
    return MultiViewDataset(
        views=views,
        bbox_min=np.asarray(bbox_min, dtype=np.float64),
        bbox_max=np.asarray(bbox_max, dtype=np.float64),
    )
