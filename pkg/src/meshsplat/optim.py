"""Optimization of vertex positions and colors from rendered images.

Positions use a vector-aware Adam variant whose second moment tracks the
squared norm of each per-vertex gradient, shared across that vertex's
three components. The shared denominator makes the update direction
rotation-equivariant, which plain Adam is not. Colors use ordinary
per-component Adam. ``fit`` runs the full loop with seeded view
batching, logging, and checkpointing.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .camera import Camera
from .losses import LossWeights, total_loss
from .mesh import TriangleMesh, save_mesh

logger = logging.getLogger(__name__)


class VectorAdam:
    """Adam with a per-vertex scalar second moment.

    ``m`` is per-component as usual; ``v`` accumulates the squared
    gradient norm of each row, so all components of a row are rescaled
    by the same denominator.
    """

    def __init__(self, n_rows: int, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros((n_rows, 3))
        self.v = np.zeros(n_rows)
        self.step_count = 0
        self.rejected = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> np.ndarray:
        """One update. Returns new parameters; state advances unless the
        gradient is non-finite, in which case the step is rejected and
        the parameters come back unchanged."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.m.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match state {self.m.shape}")
        if not np.all(np.isfinite(grad)):
            self.rejected += 1
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            logger.warning("rejected step %d: %d non-finite gradient entries",
                           self.step_count + 1, bad)
            return np.asarray(params, dtype=np.float64)
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * np.sum(grad * grad, axis=1)
        m_hat = self.m / (1 - self.beta1 ** t)
        v_hat = self.v / (1 - self.beta2 ** t)
        delta = -lr * m_hat / (np.sqrt(v_hat)[:, None] + self.eps)
        return np.asarray(params, dtype=np.float64) + delta

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v,
                "step_count": np.int64(self.step_count),
                "rejected": np.int64(self.rejected)}

    def load_state_dict(self, state: dict) -> None:
        self.m = np.array(state["m"], dtype=np.float64)
        self.v = np.array(state["v"], dtype=np.float64)
        self.step_count = int(state["step_count"])
        self.rejected = int(state["rejected"])


class ScalarAdam:
    """Standard per-component Adam, for quantities with no geometric
    orientation (colors)."""

    def __init__(self, shape, lr: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step_count = 0
        self.rejected = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> np.ndarray:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.m.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match state {self.m.shape}")
        if not np.all(np.isfinite(grad)):
            self.rejected += 1
            logger.warning("rejected step %d: non-finite gradient", self.step_count + 1)
            return np.asarray(params, dtype=np.float64)
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** t)
        v_hat = self.v / (1 - self.beta2 ** t)
        return np.asarray(params, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v,
                "step_count": np.int64(self.step_count),
                "rejected": np.int64(self.rejected)}

    def load_state_dict(self, state: dict) -> None:
        self.m = np.array(state["m"], dtype=np.float64)
        self.v = np.array(state["v"], dtype=np.float64)
        self.step_count = int(state["step_count"])
        self.rejected = int(state["rejected"])


def cosine_lr(iteration: int, total: int, base_lr: float, floor_fraction: float = 0.1) -> float:
    """Cosine decay from base_lr to floor_fraction * base_lr."""
    if total <= 1:
        return base_lr
    frac = min(max(iteration / (total - 1), 0.0), 1.0)
    lo = floor_fraction * base_lr
    return lo + (base_lr - lo) * 0.5 * (1.0 + np.cos(np.pi * frac))


def shift_initialization(mesh: TriangleMesh, offset) -> TriangleMesh:
    """Rigidly translate every vertex by ``offset``."""
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (3,):
        raise ValueError("offset must be a 3-vector")
    return mesh.with_vertices(mesh.vertices + offset)


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    batch_size: int = 1
    lr_positions: float = 1e-3
    lr_colors: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_floor_fraction: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    background: tuple = (0.0, 0.0, 0.0)
    rescale: bool = True
    optimize_colors: bool = True
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0    # 0 = final checkpoint only
    log_every: int = 50
    eval_every: int = 0          # 0 = never compute chamfer during the run
    eval_samples: int = 20000

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class FitResult:
    mesh: TriangleMesh
    history: list
    config: FitConfig
    wall_time: float


class _ViewSampler:
    """Seeded shuffled cycling without replacement: every view appears
    once per epoch, batches consume the permutation in order."""

    def __init__(self, n_views: int, seed: int):
        self.n = n_views
        self.rng = np.random.default_rng(seed)
        self.queue: list[int] = []

    def next_batch(self, size: int) -> list[int]:
        while len(self.queue) < size:
            self.queue.extend(self.rng.permutation(self.n).tolist())
        batch = self.queue[:size]
        del self.queue[:size]
        return batch


def _config_snapshot(config: FitConfig, path: Path) -> None:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, LossWeights):
            for wf in fields(value):
                lines.append(f"weights.{wf.name} = {getattr(value, wf.name)!r}")
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = {','.join(repr(v) for v in value)}")
        else:
            lines.append(f"{f.name} = {value!r}")
    path.write_text("\n".join(lines) + "\n")


_HISTORY_COLUMNS = ["iteration", "total", "color", "silhouette", "edge",
                    "laplacian", "lr", "wall_time", "chamfer"]


def _write_checkpoint(out_dir: Path, tag: str, mesh: TriangleMesh,
                      pos_opt: VectorAdam, col_opt: ScalarAdam) -> None:
    save_mesh(mesh, out_dir / f"mesh_{tag}.ply")
    state = {}
    for key, val in pos_opt.state_dict().items():
        state[f"pos_{key}"] = val
    for key, val in col_opt.state_dict().items():
        state[f"col_{key}"] = val
    np.savez(out_dir / f"optim_{tag}.npz", **state)


def fit(
    mesh: TriangleMesh,
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    config: FitConfig = FitConfig(),
    out_dir=None,
    reference_mesh: Optional[TriangleMesh] = None,
) -> FitResult:
    """Fit vertex positions (and optionally colors) to the target views.

    ``reference_mesh`` enables periodic chamfer evaluation when
    ``config.eval_every`` is positive. With ``out_dir`` set, the run
    writes a config snapshot, a streaming history CSV, checkpoints, and
    a loss-curve figure.
    """
    if len(cameras) == 0:
        raise ValueError("need at least one view")
    if not (len(cameras) == len(images) == len(masks)):
        raise ValueError("cameras, images, masks must have matching lengths")
    dtype = np.dtype(config.dtype).type

    out_path = None
    csv_file = None
    writer = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        _config_snapshot(config, out_path / "config.txt")
        csv_file = open(out_path / "history.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(_HISTORY_COLUMNS)

    pos_opt = VectorAdam(len(mesh.vertices), lr=config.lr_positions,
                         beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    col_opt = ScalarAdam(mesh.colors.shape, lr=config.lr_colors,
                         beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    sampler = _ViewSampler(len(cameras), config.seed)

    current = mesh
    history: list[dict] = []
    t0 = time.perf_counter()
    try:
        for it in range(config.iterations):
            batch = sampler.next_batch(config.batch_size)
            try:
                report, grad_v, grad_c = total_loss(
                    current,
                    [cameras[i] for i in batch],
                    [images[i] for i in batch],
                    [masks[i] for i in batch],
                    weights=config.weights,
                    background=config.background,
                    rescale=config.rescale,
                    dtype=dtype,
                )
            except Exception as exc:
                raise RuntimeError(f"loss evaluation failed at iteration {it}: {exc}") from exc

            lr_pos = cosine_lr(it, config.iterations, config.lr_positions,
                               config.lr_floor_fraction)
            new_vertices = pos_opt.step(current.vertices, grad_v, lr=lr_pos)
            new_colors = current.colors
            if config.optimize_colors:
                lr_col = cosine_lr(it, config.iterations, config.lr_colors,
                                   config.lr_floor_fraction)
                new_colors = np.clip(col_opt.step(current.colors, grad_c, lr=lr_col), 0.0, 1.0)
            current = TriangleMesh(new_vertices, current.facets, new_colors)

            chamfer = ""
            if (reference_mesh is not None and config.eval_every > 0
                    and (it + 1) % config.eval_every == 0):
                from .metrics import chamfer_distance
                chamfer = chamfer_distance(current, reference_mesh,
                                           n_samples=config.eval_samples,
                                           seed=config.seed)
            row = {
                "iteration": it,
                "total": report.total,
                "color": report.color,
                "silhouette": report.silhouette,
                "edge": report.edge,
                "laplacian": report.laplacian,
                "lr": lr_pos,
                "wall_time": time.perf_counter() - t0,
                "chamfer": chamfer,
            }
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in _HISTORY_COLUMNS])
                csv_file.flush()
            if config.log_every > 0 and (it % config.log_every == 0 or it == config.iterations - 1):
                logger.info("iter %d/%d total %.6f color %.6f sil %.6f",
                            it, config.iterations, report.total, report.color,
                            report.silhouette)
            if (out_path is not None and config.checkpoint_every > 0
                    and (it + 1) % config.checkpoint_every == 0):
                _write_checkpoint(out_path, f"{it + 1:06d}", current, pos_opt, col_opt)
    finally:
        if csv_file is not None:
            csv_file.close()

    wall = time.perf_counter() - t0
    if out_path is not None:
        _write_checkpoint(out_path, "final", current, pos_opt, col_opt)
        from .figures import plot_loss_curves
        plot_loss_curves(history, out_path / "loss_curves.png")
    return FitResult(mesh=current, history=history, config=config, wall_time=wall)
