"""Loss terms for image-supervised mesh fitting.

Two image terms (color, silhouette) compare renders against targets and
backpropagate through the renderer; two mesh terms (edge length,
Laplacian) regularize the geometry directly. ``total_loss`` combines
them over a batch of views and returns vertex and color gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import Camera
from .mesh import TriangleMesh
from .render import render_backward, render_mesh

BCE_CLAMP = 1e-6


@dataclass(frozen=True)
class LossWeights:
    color: float = 1.0
    silhouette: float = 1.0
    edge: float = 0.1
    laplacian: float = 0.1


@dataclass(frozen=True)
class LossReport:
    """Per-term values for one evaluation of the objective."""

    color: float
    silhouette: float
    edge: float
    laplacian: float
    total: float
    n_views: int


def color_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean squared error over all pixels and channels.

    Returns ``(value, grad)`` where ``grad`` has the shape of
    ``rendered``.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    value = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return value, grad


def silhouette_loss(alpha: np.ndarray, mask: np.ndarray):
    """Binary cross entropy between coverage and a target mask.

    Predictions are clamped to ``[BCE_CLAMP, 1 - BCE_CLAMP]`` before the
    logs; the gradient is zero wherever the clamp is active.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if alpha.shape != mask.shape:
        raise ValueError(f"shape mismatch: {alpha.shape} vs {mask.shape}")
    p = np.clip(alpha, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = float(-np.mean(mask * np.log(p) + (1.0 - mask) * np.log1p(-p)))
    inside = (alpha > BCE_CLAMP) & (alpha < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (-mask / p + (1.0 - mask) / (1.0 - p)) / alpha.size, 0.0)
    return value, grad


def edge_length_loss(mesh: TriangleMesh, vertices: np.ndarray | None = None):
    """Variance-style penalty pulling edges toward their mean length.

    The mean length is treated as a constant when differentiating, so
    the gradient of each edge term only sees that edge's endpoints.
    """
    verts = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    edges = mesh.edges
    if len(edges) == 0:
        return 0.0, np.zeros_like(verts)
    vec = verts[edges[:, 1]] - verts[edges[:, 0]]
    length = np.linalg.norm(vec, axis=1)
    mean_len = length.mean()
    dev = length - mean_len
    value = float(np.mean(dev * dev))
    # d(value)/d(length_e) = 2 dev_e / E with the mean detached
    safe = np.maximum(length, 1e-12)
    coeff = (2.0 / len(edges)) * dev / safe
    grad = np.zeros_like(verts)
    np.add.at(grad, edges[:, 1], coeff[:, None] * vec)
    np.add.at(grad, edges[:, 0], -coeff[:, None] * vec)
    return value, grad


def laplacian_loss(mesh: TriangleMesh, vertices: np.ndarray | None = None):
    """Uniform Laplacian smoothness: mean squared offset of each vertex
    from the average of its neighbors.

    Differentiated exactly: a vertex appears in its own term and in each
    neighbor's mean, and both paths contribute to the gradient.
    """
    verts = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    indptr, indices = mesh.adjacency_csr
    nv = len(verts)
    deg = np.diff(indptr).astype(np.float64)
    has_nbrs = deg > 0
    nbr_sum = np.zeros_like(verts)
    np.add.at(nbr_sum, np.repeat(np.arange(nv), np.diff(indptr)), verts[indices])
    lap = np.zeros_like(verts)
    lap[has_nbrs] = verts[has_nbrs] - nbr_sum[has_nbrs] / deg[has_nbrs, None]
    value = float(np.mean(np.sum(lap * lap, axis=1)))
    # own term plus the appearances inside neighbor means
    grad = (2.0 / nv) * lap
    back = np.zeros_like(verts)
    scaled = np.where(has_nbrs[:, None], lap / np.maximum(deg, 1.0)[:, None], 0.0)
    np.add.at(back, indices, scaled[np.repeat(np.arange(nv), np.diff(indptr))])
    grad = grad - (2.0 / nv) * back
    return value, grad


def total_loss(
    mesh: TriangleMesh,
    cameras: Sequence[Camera],
    target_rgb: Sequence[np.ndarray],
    target_mask: Sequence[np.ndarray],
    weights: LossWeights = LossWeights(),
    background=(0.0, 0.0, 0.0),
    rescale: bool = True,
    dtype=np.float64,
):
    """Weighted objective over a batch of views.

    Image terms are averaged across the batch; the mesh regularizers are
    evaluated once. Returns ``(report, grad_vertices, grad_colors)``.
    """
    if not (len(cameras) == len(target_rgb) == len(target_mask)):
        raise ValueError("cameras and targets must have matching lengths")
    if len(cameras) == 0:
        raise ValueError("need at least one view")

    n = len(cameras)
    grad_v = np.zeros_like(mesh.vertices)
    grad_c = np.zeros_like(mesh.colors)
    color_val = 0.0
    sil_val = 0.0
    for cam, rgb_t, mask_t in zip(cameras, target_rgb, target_mask):
        out, ctx = render_mesh(mesh, cam, background=background,
                               rescale=rescale, dtype=dtype, return_ctx=True)
        cv, g_rgb = color_loss(out.rgb, rgb_t)
        sv, g_alpha = silhouette_loss(out.alpha, mask_t)
        color_val += cv
        sil_val += sv
        scale_rgb = weights.color / n
        scale_a = weights.silhouette / n
        gv, gc = render_backward(ctx, scale_rgb * g_rgb, scale_a * g_alpha)
        grad_v += gv
        grad_c += gc
    color_val /= n
    sil_val /= n

    edge_val, g_edge = edge_length_loss(mesh)
    lap_val, g_lap = laplacian_loss(mesh)
    grad_v += weights.edge * g_edge + weights.laplacian * g_lap

    total = (weights.color * color_val + weights.silhouette * sil_val
             + weights.edge * edge_val + weights.laplacian * lap_val)
    report = LossReport(color=color_val, silhouette=sil_val, edge=edge_val,
                        laplacian=lap_val, total=total, n_views=n)
    return report, grad_v, grad_c
