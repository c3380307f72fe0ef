"""Per-facet mesh-to-Gaussian conversion, forward and backward.

Each triangle becomes one flat Gaussian: mean at the centroid, covariance
matching the second moments of a uniform distribution over the triangle,
optionally rescaled so the 1-sigma ellipse area equals the facet area,
plus a tiny out-of-plane thickness so the 3x3 covariance stays invertible.

Two equivalent covariance constructions are kept deliberately separate:

* ``lift_covariance_eigen``: eigendecompose the 2D covariance, lift the
  eigenvectors into 3D, build rotation x scale factors. Validation route;
  its gradient is singular when the two in-plane eigenvalues coincide.
* ``lift_covariance_embed``: embed the (rescaled) 2D covariance directly
  into the facet frame. This is the differentiable route used everywhere;
  ``convert_backward`` assumes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import DEGENERATE_AREA_EPS, TriangleMesh

S_Z = 1e-6
DET_EPS = 1e-14
SH_DC = 0.28209479177387814  # 1 / (2*sqrt(pi)), DC spherical-harmonic factor
OPACITY_CLAMP = 1e-6


@dataclass(frozen=True)
class FacetFrame:
    """Orthonormal local frame of a facet with 2D vertex coordinates.

    Origin at the first vertex; x along the first edge; y completed by
    Gram-Schmidt from the second edge; normal = x cross y (matches winding).
    """

    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    normal: np.ndarray
    v_j_2d: np.ndarray  # (x_j, 0)
    v_k_2d: np.ndarray  # (x_k, y_k)
    degenerate: bool = False


@dataclass(frozen=True)
class Moments2D:
    """Closed-form uniform-triangle moments in the facet frame."""

    mu: np.ndarray              # (mu_x, mu_y)
    second_moments: np.ndarray  # raw (E[x^2], E[xy], E[y^2]) about the frame origin
    cov2d: np.ndarray           # 2x2 central covariance
    area: float


@dataclass(frozen=True)
class FacetGaussian:
    mean: np.ndarray
    cov3d: np.ndarray
    rotation: np.ndarray  # frame rotation (embed) or eigen-lifted rotation (eigen)
    scales: np.ndarray    # (s_x, s_y, s_z), s_x >= s_y
    opacity: float
    color_dc: np.ndarray
    source_facet: int = -1
    degenerate: bool = False


def _any_perpendicular(v):
    axis = np.zeros(3)
    axis[np.argmin(np.abs(v))] = 1.0
    p = np.cross(v, axis)
    return p / np.linalg.norm(p)


def build_facet_frame(v_i, v_j, v_k) -> FacetFrame:
    """Gram-Schmidt frame of a triangle; degenerate inputs get an arbitrary
    orthonormal completion and the degenerate flag instead of an error."""
    v_i = np.asarray(v_i, dtype=np.float64)
    v_j = np.asarray(v_j, dtype=np.float64)
    v_k = np.asarray(v_k, dtype=np.float64)
    e1 = v_j - v_i
    e2 = v_k - v_i
    n1 = np.linalg.norm(e1)
    degenerate = False
    if n1 < 1e-12:
        degenerate = True
        x_axis = np.array([1.0, 0.0, 0.0])
    else:
        x_axis = e1 / n1
    resid = e2 - (e2 @ x_axis) * x_axis
    n2 = np.linalg.norm(resid)
    if n2 < 1e-12:
        degenerate = True
        y_axis = _any_perpendicular(x_axis)
    else:
        y_axis = resid / n2
    normal = np.cross(x_axis, y_axis)
    return FacetFrame(
        origin=v_i,
        x_axis=x_axis,
        y_axis=y_axis,
        normal=normal,
        v_j_2d=np.array([n1, 0.0]),
        v_k_2d=np.array([e2 @ x_axis, e2 @ y_axis]),
        degenerate=degenerate,
    )


def triangle_moments(frame: FacetFrame) -> Moments2D:
    """Mean and covariance of the uniform distribution over the facet.

    Closed form; the covariance reduces to the symmetric edge sum
    (1/36) * sum over vertex pairs of (v_p - v_q)(v_p - v_q)^T.
    """
    vi = np.zeros(2)
    vj = frame.v_j_2d
    vk = frame.v_k_2d
    mu = (vi + vj + vk) / 3.0
    d1 = vi - vj
    d2 = vi - vk
    d3 = vj - vk
    cov2d = (np.outer(d1, d1) + np.outer(d2, d2) + np.outer(d3, d3)) / 36.0
    raw = np.array([
        cov2d[0, 0] + mu[0] * mu[0],
        cov2d[0, 1] + mu[0] * mu[1],
        cov2d[1, 1] + mu[1] * mu[1],
    ])
    area = 0.5 * vj[0] * abs(vk[1])
    return Moments2D(mu=mu, second_moments=raw, cov2d=cov2d, area=float(area))


def _eig2x2_desc(cov):
    """Eigenvalues (descending) and first unit eigenvector of a symmetric 2x2."""
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    m = 0.5 * (a + c)
    h = np.hypot(0.5 * (a - c), b)
    lam1, lam2 = m + h, m - h
    if h < 0.5e-12:  # |lam1 - lam2| < 1e-12: tie, identity convention
        return lam1, lam2, np.array([1.0, 0.0])
    u = np.array([b, lam1 - a])
    if np.linalg.norm(u) < 1e-18 * max(abs(lam1), 1.0):
        u = np.array([lam1 - c, b])
    u = u / np.linalg.norm(u)
    # sign: non-negative dot with local x-axis, ties broken toward +y
    if u[0] < 0 or (abs(u[0]) < 1e-15 and u[1] < 0):
        u = -u
    return lam1, lam2, u


def _area_kappa(area, det2d):
    return area / (np.pi * np.sqrt(max(det2d, DET_EPS)))


def _degenerate_gaussian(frame: FacetFrame, moments: Moments2D) -> FacetGaussian:
    mean = frame.origin + moments.mu[0] * frame.x_axis + moments.mu[1] * frame.y_axis
    return FacetGaussian(
        mean=mean,
        cov3d=S_Z * S_Z * np.eye(3),
        rotation=np.eye(3),
        scales=np.array([S_Z, S_Z, S_Z]),
        opacity=1.0,
        color_dc=np.full(3, 0.5),
        degenerate=True,
    )


def lift_covariance_eigen(moments: Moments2D, frame: FacetFrame) -> FacetGaussian:
    """Rotation/scale construction: eigen-split the 2D covariance, lift the
    eigenvectors through the facet frame, area-match the scale factors.

    Validation route only; not differentiated (the eigen map is singular at
    repeated eigenvalues).
    """
    if frame.degenerate or moments.area < DEGENERATE_AREA_EPS:
        return _degenerate_gaussian(frame, moments)
    lam1, lam2, u1 = _eig2x2_desc(moments.cov2d)
    kappa = _area_kappa(moments.area, lam1 * lam2)
    scales = np.array([
        np.sqrt(max(kappa * lam1, 0.0)),
        np.sqrt(max(kappa * lam2, 0.0)),
        S_Z,
    ])
    u2 = np.array([-u1[1], u1[0]])
    frame_rot = np.column_stack([frame.x_axis, frame.y_axis, frame.normal])
    rotation = np.column_stack([
        frame_rot[:, :2] @ u1,
        frame_rot[:, :2] @ u2,
        frame.normal,
    ])
    cov3d = (rotation * scales**2) @ rotation.T
    mean = frame.origin + moments.mu[0] * frame.x_axis + moments.mu[1] * frame.y_axis
    return FacetGaussian(
        mean=mean, cov3d=cov3d, rotation=rotation, scales=scales,
        opacity=1.0, color_dc=np.full(3, 0.5),
    )


def lift_covariance_embed(moments: Moments2D, frame: FacetFrame, rescale: bool = True) -> FacetGaussian:
    """Direct construction: embed the (rescaled) 2D covariance into the facet
    frame with a tiny out-of-plane variance. Differentiable route; no
    eigen-decomposition is involved in the covariance itself."""
    if frame.degenerate or moments.area < DEGENERATE_AREA_EPS:
        return _degenerate_gaussian(frame, moments)
    lam1, lam2, _ = _eig2x2_desc(moments.cov2d)
    kappa = _area_kappa(moments.area, lam1 * lam2) if rescale else 1.0
    c = kappa * moments.cov2d
    frame_rot = np.column_stack([frame.x_axis, frame.y_axis, frame.normal])
    block = np.zeros((3, 3))
    block[:2, :2] = c
    block[2, 2] = S_Z * S_Z
    cov3d = frame_rot @ block @ frame_rot.T
    scales = np.array([
        np.sqrt(max(kappa * lam1, 0.0)),
        np.sqrt(max(kappa * lam2, 0.0)),
        S_Z,
    ])
    mean = frame.origin + moments.mu[0] * frame.x_axis + moments.mu[1] * frame.y_axis
    return FacetGaussian(
        mean=mean, cov3d=cov3d, rotation=frame_rot, scales=scales,
        opacity=1.0, color_dc=np.full(3, 0.5),
    )


def facet_color(c_i, c_j, c_k):
    """Component-wise mean of the three vertex colors."""
    return (np.asarray(c_i, dtype=np.float64)
            + np.asarray(c_j, dtype=np.float64)
            + np.asarray(c_k, dtype=np.float64)) / 3.0


# ---------------------------------------------------------------------------
# Vectorized conversion over a whole mesh
# ---------------------------------------------------------------------------

def _embed_geometry(vertices, facets, rescale):
    """Shared forward intermediates of the embed route, batched over facets.

    Uses the intrinsic identity: the frame-embedded 2D covariance equals
    C3 = (1/36) * sum of edge-difference outer products in world coordinates,
    and its in-plane determinant equals area^2 / 108 exactly. No frames are
    built on this path.
    """
    a = vertices[facets[:, 0]]
    b = vertices[facets[:, 1]]
    c = vertices[facets[:, 2]]
    e1 = b - a
    e2 = c - a
    e3 = c - b
    c3 = (
        np.einsum("mi,mj->mij", e1, e1)
        + np.einsum("mi,mj->mij", e2, e2)
        + np.einsum("mi,mj->mij", e3, e3)
    ) / 36.0
    u = np.cross(e1, e2)
    nu = np.linalg.norm(u, axis=1)
    area = 0.5 * nu
    degenerate = area < DEGENERATE_AREA_EPS
    safe_nu = np.where(degenerate, 1.0, nu)
    normal = u / safe_nu[:, None]
    det2d = area * area / 108.0
    clamped = det2d < DET_EPS
    if rescale:
        kappa = area / (np.pi * np.sqrt(np.maximum(det2d, DET_EPS)))
    else:
        kappa = np.ones_like(area)
    cov3d = kappa[:, None, None] * c3 + (S_Z * S_Z) * np.einsum("mi,mj->mij", normal, normal)
    cov3d[degenerate] = S_Z * S_Z * np.eye(3)
    return {
        "e1": e1, "e2": e2, "u": u, "nu": safe_nu, "normal": normal,
        "area": area, "det2d": det2d, "clamped": clamped, "kappa": kappa,
        "c3": c3, "cov3d": cov3d, "degenerate": degenerate,
    }


class GaussianCloud:
    """One Gaussian per facet, stored as batched arrays.

    Indexing returns a FacetGaussian view; the array attributes feed the
    renderer directly.
    """

    def __init__(self, means, cov3d, colors, opacities, rotations, scales,
                 degenerate, path, rescale):
        self.means = means
        self.cov3d = cov3d
        self.colors = colors
        self.opacities = opacities
        self.rotations = rotations
        self.scales = scales
        self.degenerate = degenerate
        self.path = path
        self.rescale = rescale

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> FacetGaussian:
        i = int(i)
        return FacetGaussian(
            mean=self.means[i], cov3d=self.cov3d[i], rotation=self.rotations[i],
            scales=self.scales[i], opacity=float(self.opacities[i]),
            color_dc=self.colors[i], source_facet=i, degenerate=bool(self.degenerate[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def convert_mesh(mesh: TriangleMesh, path: str = "embed", rescale: bool = True) -> GaussianCloud:
    """Convert every facet (degenerate ones included) to a Gaussian.

    path 'embed' is the batched differentiable route; path 'eigen' runs the
    per-facet eigen lift for validation and factored export.
    """
    if path not in ("embed", "eigen"):
        raise ValueError(f"unknown conversion path {path!r}")
    v = mesh.vertices
    f = mesh.facets
    col = mesh.colors
    colors = (col[f[:, 0]] + col[f[:, 1]] + col[f[:, 2]]) / 3.0
    means = (v[f[:, 0]] + v[f[:, 1]] + v[f[:, 2]]) / 3.0
    opacities = np.ones(len(f))

    if path == "eigen":
        cov3d = np.empty((len(f), 3, 3))
        rotations = np.empty((len(f), 3, 3))
        scales = np.empty((len(f), 3))
        degenerate = np.zeros(len(f), dtype=bool)
        for i, (ia, ib, ic) in enumerate(f):
            frame = build_facet_frame(v[ia], v[ib], v[ic])
            g = lift_covariance_eigen(triangle_moments(frame), frame)
            cov3d[i] = g.cov3d
            rotations[i] = g.rotation
            scales[i] = g.scales
            degenerate[i] = g.degenerate
        return GaussianCloud(means, cov3d, colors, opacities, rotations, scales,
                             degenerate, path, rescale)

    geo = _embed_geometry(v, f, rescale)
    m = len(f)
    # factored form for export/introspection: in-plane eigenvalues from the
    # trace / determinant pair (exact for the rank-2 edge-sum matrix)
    trace = np.einsum("mii->m", geo["c3"])
    disc = np.sqrt(np.maximum(trace * trace - 4.0 * geo["det2d"], 0.0))
    lam1 = 0.5 * (trace + disc)
    lam2 = 0.5 * (trace - disc)
    scales = np.stack([
        np.sqrt(np.maximum(geo["kappa"] * lam1, 0.0)),
        np.sqrt(np.maximum(geo["kappa"] * lam2, 0.0)),
        np.full(m, S_Z),
    ], axis=1)
    # frame rotation, batched Gram-Schmidt
    e1 = geo["e1"]
    n1 = np.linalg.norm(e1, axis=1)
    ok = n1 >= 1e-12
    x_axis = np.where(ok[:, None], e1 / np.where(ok, n1, 1.0)[:, None], [1.0, 0.0, 0.0])
    normal = geo["normal"]
    y_axis = np.cross(normal, x_axis)
    rotations = np.stack([x_axis, y_axis, normal], axis=2)
    degenerate = geo["degenerate"]
    rotations[degenerate] = np.eye(3)
    scales[degenerate] = S_Z
    return GaussianCloud(means, geo["cov3d"], colors, opacities, rotations, scales,
                         degenerate, path, rescale)


def convert_backward(mesh: TriangleMesh, cloud: GaussianCloud,
                     grad_means, grad_cov3ds, grad_colors):
    """Map upstream Gaussian-parameter gradients to vertex gradients.

    Assumes the embed route. Covariance gradients of degenerate facets are
    dropped (their forward covariance is a constant); mean and color
    gradients always flow, 1/3 to each source vertex. Accumulation runs in
    facet-index order, so results are bit-stable.
    """
    if cloud.path != "embed":
        raise ValueError("convert_backward differentiates the embed path only")
    f = mesh.facets
    m = len(f)
    grad_means = np.asarray(grad_means, dtype=np.float64)
    grad_cov3ds = np.asarray(grad_cov3ds, dtype=np.float64)
    grad_colors = np.asarray(grad_colors, dtype=np.float64)
    if grad_means.shape != (m, 3) or grad_cov3ds.shape != (m, 3, 3) or grad_colors.shape != (m, 3):
        raise ValueError(
            f"gradient shapes {grad_means.shape}, {grad_cov3ds.shape}, "
            f"{grad_colors.shape} do not match {m} facets"
        )

    geo = _embed_geometry(mesh.vertices, f, cloud.rescale)
    active = ~geo["degenerate"]
    g = grad_cov3ds
    gsym = g + g.transpose(0, 2, 1)

    d_kappa = np.einsum("mij,mij->m", g, geo["c3"])
    # kappa = area / (pi * sqrt(max(det2d, eps))) with det2d = area^2/108:
    # unclamped it is the constant sqrt(108)/pi, so only the clamped branch
    # propagates a gradient (through area alone)
    d_area = np.zeros(m)
    if cloud.rescale:
        clamped = geo["clamped"] & active
        d_area[clamped] = d_kappa[clamped] / (np.pi * np.sqrt(DET_EPS))

    s = geo["kappa"][:, None, None] * gsym / 36.0
    g_e1 = np.einsum("mij,mj->mi", s, geo["e1"])
    g_e2 = np.einsum("mij,mj->mi", s, geo["e2"])
    g_e3 = np.einsum("mij,mj->mi", s, geo["e2"] - geo["e1"])

    normal = geo["normal"]
    g_n = (S_Z * S_Z) * np.einsum("mij,mj->mi", gsym, normal)
    g_n_perp = g_n - normal * np.einsum("mi,mi->m", normal, g_n)[:, None]
    g_u = g_n_perp / geo["nu"][:, None] + 0.5 * d_area[:, None] * normal
    g_e1 += np.cross(geo["e2"], g_u)
    g_e2 += np.cross(g_u, geo["e1"])

    for arr in (g_e1, g_e2, g_e3):
        arr[~active] = 0.0

    third = grad_means / 3.0
    g_a = third - g_e1 - g_e2
    g_b = third + g_e1 - g_e3
    g_c = third + g_e2 + g_e3

    grad_vertices = np.zeros_like(mesh.vertices)
    np.add.at(grad_vertices, f[:, 0], g_a)
    np.add.at(grad_vertices, f[:, 1], g_b)
    np.add.at(grad_vertices, f[:, 2], g_c)

    grad_vertex_colors = np.zeros_like(mesh.colors)
    gcol = grad_colors / 3.0
    np.add.at(grad_vertex_colors, f[:, 0], gcol)
    np.add.at(grad_vertex_colors, f[:, 1], gcol)
    np.add.at(grad_vertex_colors, f[:, 2], gcol)
    return grad_vertices, grad_vertex_colors


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _rotation_to_quaternion(rot):
    """Batched rotation matrices -> unit quaternions (w, x, y, z), w >= 0."""
    m = rot
    t = np.einsum("mii->m", m)
    q = np.empty((len(m), 4))
    # branch per element on the largest diagonal term for stability
    c0 = t > 0
    c1 = (~c0) & (m[:, 0, 0] >= m[:, 1, 1]) & (m[:, 0, 0] >= m[:, 2, 2])
    c2 = (~c0) & (~c1) & (m[:, 1, 1] >= m[:, 2, 2])
    c3 = ~(c0 | c1 | c2)

    idx = np.where(c0)[0]
    if len(idx):
        r = np.sqrt(1.0 + t[idx]) * 2.0
        q[idx, 0] = 0.25 * r
        q[idx, 1] = (m[idx, 2, 1] - m[idx, 1, 2]) / r
        q[idx, 2] = (m[idx, 0, 2] - m[idx, 2, 0]) / r
        q[idx, 3] = (m[idx, 1, 0] - m[idx, 0, 1]) / r
    idx = np.where(c1)[0]
    if len(idx):
        r = np.sqrt(1.0 + m[idx, 0, 0] - m[idx, 1, 1] - m[idx, 2, 2]) * 2.0
        q[idx, 0] = (m[idx, 2, 1] - m[idx, 1, 2]) / r
        q[idx, 1] = 0.25 * r
        q[idx, 2] = (m[idx, 0, 1] + m[idx, 1, 0]) / r
        q[idx, 3] = (m[idx, 0, 2] + m[idx, 2, 0]) / r
    idx = np.where(c2)[0]
    if len(idx):
        r = np.sqrt(1.0 + m[idx, 1, 1] - m[idx, 0, 0] - m[idx, 2, 2]) * 2.0
        q[idx, 0] = (m[idx, 0, 2] - m[idx, 2, 0]) / r
        q[idx, 1] = (m[idx, 0, 1] + m[idx, 1, 0]) / r
        q[idx, 2] = 0.25 * r
        q[idx, 3] = (m[idx, 1, 2] + m[idx, 2, 1]) / r
    idx = np.where(c3)[0]
    if len(idx):
        r = np.sqrt(1.0 + m[idx, 2, 2] - m[idx, 0, 0] - m[idx, 1, 1]) * 2.0
        q[idx, 0] = (m[idx, 1, 0] - m[idx, 0, 1]) / r
        q[idx, 1] = (m[idx, 0, 2] + m[idx, 2, 0]) / r
        q[idx, 2] = (m[idx, 1, 2] + m[idx, 2, 1]) / r
        q[idx, 3] = 0.25 * r
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q


_EXPORT_PROPS = [
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
]


def export_gaussians(cloud: GaussianCloud, path) -> None:
    """Write the splat-viewer PLY point format (binary little-endian).

    Factorization is recomputed from cov3d by eigendecomposition so the
    stored rotation/scale pair reconstructs the covariance for either
    conversion path. Opacity is clamped away from 1 before the logit.
    """
    path = Path(path)
    lam, vecs = np.linalg.eigh(cloud.cov3d)  # ascending
    lam = lam[:, ::-1]
    vecs = vecs[:, :, ::-1]
    flip = np.linalg.det(vecs) < 0
    vecs[flip, :, 2] *= -1.0
    scales = np.sqrt(np.maximum(lam, S_Z * S_Z * 1e-2))
    quats = _rotation_to_quaternion(vecs)

    op = np.clip(cloud.opacities, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
    logit = np.log(op / (1.0 - op))
    f_dc = (cloud.colors - 0.5) / SH_DC

    rec = np.empty(len(cloud), dtype=np.dtype([(p, "<f4") for p in _EXPORT_PROPS]))
    rec["x"], rec["y"], rec["z"] = cloud.means.T.astype(np.float32)
    for i in range(3):
        rec[f"f_dc_{i}"] = f_dc[:, i]
    rec["opacity"] = logit
    for i in range(3):
        rec[f"scale_{i}"] = np.log(scales[:, i])
    for i in range(4):
        rec[f"rot_{i}"] = quats[:, i]

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in _EXPORT_PROPS]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
