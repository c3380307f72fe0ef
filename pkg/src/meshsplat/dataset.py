"""Synthetic multi-view dataset generation and loading.

A dataset directory holds one RGB and one mask PNG per view, the camera
file, the normalized target mesh, and a small metadata file. Ground
truth is rendered with this package's own renderer, so fitting against
a dataset is a closed-loop inverse-rendering problem.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .camera import default_intrinsics, load_cameras, look_at, save_cameras
from .mesh import load_mesh, normalize_mesh, save_mesh
from .render import render_mesh

HOLDOUT_STRIDE = 11

_AXES = {"x": np.array([1.0, 0, 0]), "y": np.array([0, 1.0, 0]), "z": np.array([0, 0, 1.0])}


def fibonacci_hemisphere(n: int, radius: float = 3.0, up: str = "z") -> np.ndarray:
    """Well-spread points on the upper hemisphere of the given radius.

    Spiral construction: heights step down from the pole, azimuth
    advances by the golden angle. The first point is exactly the pole.
    """
    if n < 1:
        raise ValueError("need at least one view")
    if up not in _AXES:
        raise ValueError(f"up must be one of {sorted(_AXES)}, got {up!r}")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - i / n          # in (0, 1], pole first
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    if up == "x":
        pts = pts[:, [2, 0, 1]]
    elif up == "y":
        pts = pts[:, [1, 2, 0]]
    return radius * pts


def hemisphere_cameras(n: int, radius: float, resolution, up: str = "z"):
    width, height = resolution
    positions = fibonacci_hemisphere(n, radius, up)
    up_hint = _AXES[up]
    return [
        look_at(pos, (0.0, 0.0, 0.0), up_hint=up_hint,
                **default_intrinsics(width, height))
        for pos in positions
    ]


def _save_png(path: Path, array: np.ndarray) -> None:
    data = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8)).save(path)


def _load_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing image file: {path}")
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


@dataclass(frozen=True)
class ViewDataset:
    root: Path
    cameras: tuple
    rgb_paths: tuple
    mask_paths: tuple
    metadata: dict

    def __len__(self):
        return len(self.cameras)

    def load_rgb(self, i: int) -> np.ndarray:
        return _load_png(self.rgb_paths[i])

    def load_mask(self, i: int) -> np.ndarray:
        return _load_png(self.mask_paths[i])

    @property
    def train_indices(self) -> list:
        return [i for i in range(len(self)) if i % HOLDOUT_STRIDE != 0]

    @property
    def holdout_indices(self) -> list:
        return [i for i in range(len(self)) if i % HOLDOUT_STRIDE == 0]

    def target_mesh_path(self) -> Path:
        return self.root / "target_mesh.ply"


def _write_metadata(path: Path, meta: dict) -> None:
    lines = [f"{k} = {meta[k]}" for k in sorted(meta)]
    path.write_text("\n".join(lines) + "\n")


def _read_metadata(path: Path) -> dict:
    meta = {}
    if not path.exists():
        return meta
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def make_views(
    mesh, n_views: int = 253, resolution=(256, 256), radius: float = 3.0,
    up: str = "z", seed: int = 0, out_dir=None, background=(0.0, 0.0, 0.0),
) -> ViewDataset:
    """Normalize a mesh and render ground-truth views from a Fibonacci
    hemisphere of cameras, all looking at the origin.

    ``mesh`` is a TriangleMesh or a path to one. Writes RGB and mask
    PNGs, the camera file, metadata, and the normalized target mesh.
    """
    if out_dir is None:
        raise ValueError("out_dir is required")
    if isinstance(mesh, (str, Path)):
        mesh = load_mesh(mesh)
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    mesh, _ = normalize_mesh(mesh)
    cams = hemisphere_cameras(n_views, radius, resolution, up)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rgb_paths = []
    mask_paths = []
    for i, cam in enumerate(cams):
        render = render_mesh(mesh, cam, background=background)
        rgb_path = out / f"view_{i:04d}.png"
        mask_path = out / f"mask_{i:04d}.png"
        _save_png(rgb_path, render.rgb)
        _save_png(mask_path, render.alpha)
        rgb_paths.append(rgb_path)
        mask_paths.append(mask_path)

    save_cameras(cams, out / "cameras.txt")
    save_mesh(mesh, out / "target_mesh.ply")
    meta = {
        "n_views": n_views,
        "width": resolution[0],
        "height": resolution[1],
        "radius": radius,
        "up": up,
        "seed": seed,
        "version": __version__,
    }
    _write_metadata(out / "metadata.txt", meta)
    return ViewDataset(root=out, cameras=tuple(cams),
                       rgb_paths=tuple(rgb_paths), mask_paths=tuple(mask_paths),
                       metadata=meta)


def load_views(root) -> ViewDataset:
    """Open an existing dataset directory."""
    root = Path(root)
    cam_file = root / "cameras.txt"
    if not cam_file.exists():
        raise FileNotFoundError(f"no camera file at {cam_file}")
    cams = load_cameras(cam_file)
    rgb_paths = []
    mask_paths = []
    for i in range(len(cams)):
        rgb = root / f"view_{i:04d}.png"
        mask = root / f"mask_{i:04d}.png"
        if not rgb.exists():
            raise FileNotFoundError(f"view {i}: missing image file {rgb}")
        if not mask.exists():
            raise FileNotFoundError(f"view {i}: missing mask file {mask}")
        rgb_paths.append(rgb)
        mask_paths.append(mask)
    meta = _read_metadata(root / "metadata.txt")
    return ViewDataset(root=root, cameras=tuple(cams),
                       rgb_paths=tuple(rgb_paths), mask_paths=tuple(mask_paths),
                       metadata=meta)
