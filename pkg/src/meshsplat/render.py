"""Differentiable tile-based splatting renderer.

Forward: project 3D Gaussians through a perspective camera to screen-space
ellipses, bin them to 16x16 pixel tiles by their 3-sigma boxes, then
alpha-composite front to back per pixel. Backward: exact reverse of the
compositing equation, chained through the projection to Gaussian means and
covariances and through the mesh conversion to vertex gradients.

Compositing follows the common splatting conventions: alpha clamped at 0.99,
contributions below 1/255 skipped, accumulation stopped once transmittance
would drop under 1e-4, and a 0.3 px^2 isotropic low-pass added to every
projected covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import Camera
from .convert import GaussianCloud, FacetGaussian, convert_backward, convert_mesh
from .mesh import TriangleMesh

TILE = 16
ALPHA_CLAMP = 0.99
CONTRIB_FLOOR = 1.0 / 255.0
TRANSMITTANCE_STOP = 1e-4
DILATION = 0.3


@dataclass(frozen=True)
class Splat2D:
    """Screen-space footprint of one projected Gaussian."""

    mean2d: np.ndarray
    cov2d_screen: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source: int = -1


@dataclass(frozen=True)
class RenderOutput:
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) accumulated opacity (silhouette)
    background: np.ndarray


class SplatBatch:
    """Kept splats as flat arrays, sorted nowhere; the raster plan sorts."""

    def __init__(self, mean2d, cov2d, conic, depth, color, opacity, source, t_cam, radius):
        self.mean2d = mean2d
        self.cov2d = cov2d
        self.conic = conic      # (k, 3): inverse covariance packed (a, b, c)
        self.depth = depth
        self.color = color
        self.opacity = opacity
        self.source = source    # indices into the originating cloud
        self.t_cam = t_cam      # camera-space means, kept for the backward pass
        self.radius = radius

    def __len__(self):
        return len(self.depth)

    @classmethod
    def empty(cls, dtype=np.float64):
        z = lambda *shape: np.zeros(shape, dtype=dtype)
        return cls(z(0, 2), z(0, 2, 2), z(0, 3), z(0), z(0, 3), z(0),
                   np.zeros(0, dtype=np.int64), z(0, 3), z(0))


def _invert_cov2d(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def _max_eigenvalue_2x2(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    return 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)


def _perspective_jacobian(t, fx, fy):
    """J of (x, y, z) -> (fx x / z, fy y / z), shape (k, 2, 3)."""
    k = len(t)
    tz = t[:, 2]
    j = np.zeros((k, 2, 3), dtype=t.dtype)
    j[:, 0, 0] = fx / tz
    j[:, 0, 2] = -fx * t[:, 0] / (tz * tz)
    j[:, 1, 1] = fy / tz
    j[:, 1, 2] = -fy * t[:, 1] / (tz * tz)
    return j


def project_cloud(cloud: GaussianCloud, camera: Camera, dtype=np.float64) -> SplatBatch:
    """EWA-project all Gaussians; cull by depth window and 3-sigma screen box."""
    means = cloud.means.astype(dtype)
    rot = camera.rotation.astype(dtype)
    t_all = means @ rot.T + camera.translation.astype(dtype)
    keep = (t_all[:, 2] > camera.near) & (t_all[:, 2] < camera.far)
    idx = np.where(keep)[0]
    if len(idx) == 0:
        return SplatBatch.empty(dtype)
    t = t_all[idx]
    cov3d = cloud.cov3d[idx].astype(dtype)
    j = _perspective_jacobian(t, camera.fx, camera.fy)
    m2 = j @ rot
    cov2d = np.einsum("kpi,kij,kqj->kpq", m2, cov3d, m2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    tz = t[:, 2]
    mean2d = np.stack([
        camera.fx * t[:, 0] / tz + camera.cx,
        camera.fy * t[:, 1] / tz + camera.cy,
    ], axis=1)
    radius = 3.0 * np.sqrt(_max_eigenvalue_2x2(cov2d))
    on = (
        (mean2d[:, 0] + radius >= -0.5)
        & (mean2d[:, 0] - radius <= camera.width - 0.5)
        & (mean2d[:, 1] + radius >= -0.5)
        & (mean2d[:, 1] - radius <= camera.height - 0.5)
    )
    idx = idx[on]
    if len(idx) == 0:
        return SplatBatch.empty(dtype)
    sel = np.where(on)[0]
    return SplatBatch(
        mean2d=mean2d[sel],
        cov2d=cov2d[sel],
        conic=_invert_cov2d(cov2d[sel]),
        depth=tz[sel],
        color=cloud.colors[idx].astype(dtype),
        opacity=cloud.opacities[idx].astype(dtype),
        source=idx,
        t_cam=t[sel],
        radius=radius[sel],
    )


def project_gaussian(gaussian: FacetGaussian, camera: Camera) -> Optional[Splat2D]:
    """Single-Gaussian projection; None when depth- or screen-culled."""
    cloud = GaussianCloud(
        means=gaussian.mean[None], cov3d=gaussian.cov3d[None],
        colors=np.asarray(gaussian.color_dc, dtype=np.float64)[None],
        opacities=np.array([gaussian.opacity]),
        rotations=gaussian.rotation[None], scales=gaussian.scales[None],
        degenerate=np.array([gaussian.degenerate]), path="embed", rescale=True,
    )
    batch = project_cloud(cloud, camera)
    if len(batch) == 0:
        return None
    return Splat2D(
        mean2d=batch.mean2d[0], cov2d_screen=batch.cov2d[0],
        depth=float(batch.depth[0]), color=batch.color[0],
        opacity=float(batch.opacity[0]),
        source=gaussian.source_facet,
    )


def _batch_from_splats(splats, dtype):
    if isinstance(splats, SplatBatch):
        return splats
    if len(splats) == 0:
        return SplatBatch.empty(dtype)
    mean2d = np.stack([np.asarray(s.mean2d, dtype=dtype) for s in splats])
    cov2d = np.stack([np.asarray(s.cov2d_screen, dtype=dtype) for s in splats])
    source = np.array(
        [s.source if s.source >= 0 else i for i, s in enumerate(splats)], dtype=np.int64
    )
    return SplatBatch(
        mean2d=mean2d,
        cov2d=cov2d,
        conic=_invert_cov2d(cov2d),
        depth=np.array([s.depth for s in splats], dtype=dtype),
        color=np.stack([np.asarray(s.color, dtype=dtype) for s in splats]),
        opacity=np.array([s.opacity for s in splats], dtype=dtype),
        source=source,
        t_cam=np.zeros((len(splats), 3), dtype=dtype),
        radius=3.0 * np.sqrt(_max_eigenvalue_2x2(cov2d)),
    )


def _check_finite(batch):
    for name in ("mean2d", "cov2d", "conic", "depth", "color", "opacity"):
        arr = getattr(batch, name)
        bad = ~np.isfinite(arr)
        if bad.any():
            first = int(np.argwhere(bad)[0][0])
            raise ValueError(f"non-finite splat parameter {name!r} at splat {first}")


class _RasterPlan:
    """Tile binning: entry arrays sorted by (tile, depth, source)."""

    def __init__(self, batch: SplatBatch, width, height):
        self.tiles_x = (width + TILE - 1) // TILE
        self.tiles_y = (height + TILE - 1) // TILE
        n_tiles = self.tiles_x * self.tiles_y
        k = len(batch)
        if k == 0:
            self.entry_splat = np.zeros(0, dtype=np.int64)
            self.bounds = np.zeros(n_tiles + 1, dtype=np.int64)
            return
        mx, my = batch.mean2d[:, 0], batch.mean2d[:, 1]
        r = batch.radius
        tx0 = np.clip(np.floor((mx - r) / TILE).astype(np.int64), 0, self.tiles_x - 1)
        tx1 = np.clip(np.floor((mx + r) / TILE).astype(np.int64), 0, self.tiles_x - 1)
        ty0 = np.clip(np.floor((my - r) / TILE).astype(np.int64), 0, self.tiles_y - 1)
        ty1 = np.clip(np.floor((my + r) / TILE).astype(np.int64), 0, self.tiles_y - 1)
        nx = tx1 - tx0 + 1
        counts = nx * (ty1 - ty0 + 1)
        total = int(counts.sum())
        rep = np.repeat(np.arange(k), counts)
        offsets = np.cumsum(counts) - counts
        rank = np.arange(total) - offsets[rep]
        tile_x = tx0[rep] + rank % nx[rep]
        tile_y = ty0[rep] + rank // nx[rep]
        tile_id = tile_y * self.tiles_x + tile_x
        order = np.lexsort((batch.source[rep], batch.depth[rep], tile_id))
        self.entry_splat = rep[order]
        self.bounds = np.searchsorted(tile_id[order], np.arange(n_tiles + 1))

    def tile_slice(self, tid):
        return self.entry_splat[self.bounds[tid]:self.bounds[tid + 1]]


def _tile_pixels(tid, tiles_x, width, height, dtype):
    ty, tx = divmod(tid, tiles_x)
    u0, v0 = tx * TILE, ty * TILE
    us = np.arange(u0, min(u0 + TILE, width), dtype=dtype)
    vs = np.arange(v0, min(v0 + TILE, height), dtype=dtype)
    uu, vv = np.meshgrid(us, vs)
    return uu.ravel(), vv.ravel(), (v0, min(v0 + TILE, height), u0, min(u0 + TILE, width))


def _tile_forward(batch, ids, uu, vv):
    """Per-tile compositing quantities, all shaped (pixels, splats)."""
    mx = batch.mean2d[ids, 0]
    my = batch.mean2d[ids, 1]
    ca = batch.conic[ids, 0]
    cb = batch.conic[ids, 1]
    cc = batch.conic[ids, 2]
    dx = uu[:, None] - mx[None, :]
    dy = vv[:, None] - my[None, :]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    exp_power = np.exp(power)
    raw = batch.opacity[ids] * exp_power
    alpha = np.minimum(ALPHA_CLAMP, raw)
    visible = alpha >= CONTRIB_FLOOR
    # prefix products decide the termination cut: a splat is composited only
    # while transmittance after it would stay at or above the stop threshold
    p_incl = np.cumprod(1.0 - np.where(visible, alpha, 0.0), axis=1)
    included = visible & (p_incl >= TRANSMITTANCE_STOP)
    g = 1.0 - np.where(included, alpha, 0.0)
    pm = np.cumprod(g, axis=1)
    trans = np.empty_like(pm)
    trans[:, 0] = 1.0
    trans[:, 1:] = pm[:, :-1]
    weight = np.where(included, alpha * trans, 0.0)
    t_final = pm[:, -1]
    return dx, dy, exp_power, raw, alpha, included, trans, weight, t_final


def rasterize(splats, camera: Camera, background=(0.0, 0.0, 0.0), dtype=np.float64) -> RenderOutput:
    """Front-to-back alpha compositing of splats over a constant background."""
    batch = _batch_from_splats(splats, dtype)
    _check_finite(batch)
    w, h = camera.width, camera.height
    bg = np.asarray(background, dtype=dtype)
    rgb = np.empty((h, w, 3), dtype=dtype)
    rgb[:] = bg
    alpha_img = np.zeros((h, w), dtype=dtype)
    plan = _RasterPlan(batch, w, h)
    for tid in range(plan.tiles_x * plan.tiles_y):
        ids = plan.tile_slice(tid)
        uu, vv, (r0, r1, c0, c1) = _tile_pixels(tid, plan.tiles_x, w, h, dtype)
        if len(ids) == 0:
            continue
        *_, weight, t_final = _tile_forward(batch, ids, uu, vv)
        tile_rgb = weight @ batch.color[ids] + t_final[:, None] * bg[None, :]
        rgb[r0:r1, c0:c1] = tile_rgb.reshape(r1 - r0, c1 - c0, 3)
        alpha_img[r0:r1, c0:c1] = (1.0 - t_final).reshape(r1 - r0, c1 - c0)
    return RenderOutput(rgb=rgb, alpha=alpha_img, background=bg)


def rasterize_backward(splats, camera: Camera, output: RenderOutput,
                       grad_rgb, grad_alpha, dtype=np.float64):
    """Gradients of sum(grad_rgb * rgb) + sum(grad_alpha * alpha) w.r.t.
    per-splat (mean2d, cov2d_screen, color, opacity).

    Tiles are processed in tile-id order and each splat appears once per
    tile, so accumulation is deterministic.
    """
    batch = _batch_from_splats(splats, dtype)
    _check_finite(batch)
    w, h = camera.width, camera.height
    grad_rgb = np.asarray(grad_rgb, dtype=dtype)
    grad_alpha = np.asarray(grad_alpha, dtype=dtype)
    if grad_rgb.shape != (h, w, 3) or grad_alpha.shape != (h, w):
        raise ValueError("upstream gradient shapes do not match the image")
    bg = output.background.astype(dtype)
    k = len(batch)
    g_mean2d = np.zeros((k, 2), dtype=dtype)
    g_cov2d = np.zeros((k, 2, 2), dtype=dtype)
    g_color = np.zeros((k, 3), dtype=dtype)
    g_opacity = np.zeros(k, dtype=dtype)
    plan = _RasterPlan(batch, w, h)
    for tid in range(plan.tiles_x * plan.tiles_y):
        ids = plan.tile_slice(tid)
        if len(ids) == 0:
            continue
        uu, vv, (r0, r1, c0, c1) = _tile_pixels(tid, plan.tiles_x, w, h, dtype)
        dx, dy, exp_power, raw, alpha, included, trans, weight, t_final = _tile_forward(
            batch, ids, uu, vv
        )
        g_rgb_px = grad_rgb[r0:r1, c0:c1].reshape(-1, 3)
        g_a_px = grad_alpha[r0:r1, c0:c1].reshape(-1)

        gdotc = g_rgb_px @ batch.color[ids].T              # (P, K)
        contrib = gdotc * weight
        suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        b = (g_rgb_px @ bg - g_a_px) * t_final             # (P,)
        one_minus = 1.0 - np.where(included, alpha, 0.0)
        d_alpha = np.where(
            included, gdotc * trans - (suffix + b[:, None]) / one_minus, 0.0
        )
        # clamp gate: alpha = min(0.99, opacity * exp(power))
        unclamped = raw < ALPHA_CLAMP
        d_power = np.where(unclamped, d_alpha * alpha, 0.0)
        g_opacity[ids] += np.einsum("pk,pk->k", np.where(unclamped, d_alpha, 0.0), exp_power)
        g_color[ids] += weight.T @ g_rgb_px

        ca = batch.conic[ids, 0]
        cb = batch.conic[ids, 1]
        cc = batch.conic[ids, 2]
        g_mean2d[ids, 0] += np.einsum("pk,pk->k", d_power, ca * dx + cb * dy)
        g_mean2d[ids, 1] += np.einsum("pk,pk->k", d_power, cc * dy + cb * dx)
        gm00 = -0.5 * np.einsum("pk,pk->k", d_power, dx * dx)
        gm01 = -0.5 * np.einsum("pk,pk->k", d_power, dx * dy)
        gm11 = -0.5 * np.einsum("pk,pk->k", d_power, dy * dy)
        # conic -> covariance: dL/dSigma = -M Gm M with M the conic
        m_full = np.empty((len(ids), 2, 2), dtype=dtype)
        m_full[:, 0, 0] = ca
        m_full[:, 0, 1] = cb
        m_full[:, 1, 0] = cb
        m_full[:, 1, 1] = cc
        gm = np.empty_like(m_full)
        gm[:, 0, 0] = gm00
        gm[:, 0, 1] = gm01
        gm[:, 1, 0] = gm01
        gm[:, 1, 1] = gm11
        g_cov2d[ids] += -np.einsum("kab,kbc,kcd->kad", m_full, gm, m_full)
    return g_mean2d, g_cov2d, g_color, g_opacity


def project_cloud_backward(batch: SplatBatch, cloud: GaussianCloud, camera: Camera,
                           g_mean2d, g_cov2d):
    """Chain screen-space gradients through the EWA projection.

    Returns gradients on the kept Gaussians' (mean3d, cov3d), aligned with
    batch order; culled Gaussians receive zero upstream.
    """
    dtype = batch.mean2d.dtype
    rot = camera.rotation.astype(dtype)
    t = batch.t_cam
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)
    j = _perspective_jacobian(t, camera.fx, camera.fy)
    m2 = j @ rot
    cov3d = cloud.cov3d[batch.source].astype(dtype)

    g_cov2d = np.asarray(g_cov2d, dtype=dtype)
    g_mean2d = np.asarray(g_mean2d, dtype=dtype)
    g_cov3d = np.einsum("kpq,kpi,kqj->kij", g_cov2d, m2, m2)
    gsym = g_cov2d + g_cov2d.transpose(0, 2, 1)
    g_m2 = np.einsum("kpq,kqi,kij->kpj", gsym, m2, cov3d)
    g_j = np.einsum("kpi,ji->kpj", g_m2, rot)  # g_M2 @ R^T

    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    g_tx = -fx * inv_z2 * g_j[:, 0, 2]
    g_ty = -fy * inv_z2 * g_j[:, 1, 2]
    g_tz = (
        -fx * inv_z2 * g_j[:, 0, 0]
        - fy * inv_z2 * g_j[:, 1, 1]
        + 2.0 * fx * tx * inv_z2 * inv_z * g_j[:, 0, 2]
        + 2.0 * fy * ty * inv_z2 * inv_z * g_j[:, 1, 2]
    )
    g_tx += g_mean2d[:, 0] * fx * inv_z
    g_ty += g_mean2d[:, 1] * fy * inv_z
    g_tz += -g_mean2d[:, 0] * fx * tx * inv_z2 - g_mean2d[:, 1] * fy * ty * inv_z2
    g_t = np.stack([g_tx, g_ty, g_tz], axis=1)
    g_mean3d = g_t @ rot
    return g_mean3d, g_cov3d


def project_backward(gaussian: FacetGaussian, camera: Camera, grad_mean2d, grad_cov2d):
    """Scalar wrapper of project_cloud_backward for one Gaussian."""
    cloud = GaussianCloud(
        means=gaussian.mean[None], cov3d=gaussian.cov3d[None],
        colors=np.asarray(gaussian.color_dc, dtype=np.float64)[None],
        opacities=np.array([gaussian.opacity]),
        rotations=gaussian.rotation[None], scales=gaussian.scales[None],
        degenerate=np.array([gaussian.degenerate]), path="embed", rescale=True,
    )
    batch = project_cloud(cloud, camera)
    if len(batch) == 0:
        return np.zeros(3), np.zeros((3, 3))
    g_mean3d, g_cov3d = project_cloud_backward(
        batch, cloud, camera,
        np.asarray(grad_mean2d, dtype=np.float64)[None],
        np.asarray(grad_cov2d, dtype=np.float64)[None],
    )
    return g_mean3d[0], g_cov3d[0]


# ---------------------------------------------------------------------------
# Mesh-level entry points
# ---------------------------------------------------------------------------

@dataclass
class RenderContext:
    """Everything the backward pass needs from a forward render."""

    mesh: TriangleMesh
    camera: Camera
    cloud: GaussianCloud
    batch: SplatBatch
    output: RenderOutput
    dtype: type


def render_mesh(mesh: TriangleMesh, camera: Camera, background=(0.0, 0.0, 0.0),
                rescale: bool = True, dtype=np.float64, return_ctx: bool = False):
    """convert -> project -> rasterize; the optimizer's single entry point."""
    cloud = convert_mesh(mesh, path="embed", rescale=rescale)
    batch = project_cloud(cloud, camera, dtype=dtype)
    output = rasterize(batch, camera, background, dtype=dtype)
    if not return_ctx:
        return output
    return output, RenderContext(mesh=mesh, camera=camera, cloud=cloud,
                                 batch=batch, output=output, dtype=dtype)


def render_backward(ctx: RenderContext, grad_rgb, grad_alpha):
    """Chain pixel gradients all the way to vertex position/color gradients."""
    g_mean2d, g_cov2d, g_color, _ = rasterize_backward(
        ctx.batch, ctx.camera, ctx.output, grad_rgb, grad_alpha, dtype=ctx.dtype
    )
    m = len(ctx.cloud)
    g_means = np.zeros((m, 3))
    g_cov3d = np.zeros((m, 3, 3))
    g_colors = np.zeros((m, 3))
    if len(ctx.batch):
        gm3, gc3 = project_cloud_backward(ctx.batch, ctx.cloud, ctx.camera, g_mean2d, g_cov2d)
        g_means[ctx.batch.source] = gm3
        g_cov3d[ctx.batch.source] = gc3
        g_colors[ctx.batch.source] = g_color
    return convert_backward(ctx.mesh, ctx.cloud, g_means, g_cov3d, g_colors)
