"""Triangle mesh container, OBJ/PLY IO, normalization and sampling utilities."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

GRAY = 0.5
DEGENERATE_AREA_EPS = 1e-12


class MeshError(ValueError):
    """Invalid mesh data (bad indices, degenerate geometry, ...)."""


class MeshParseError(MeshError):
    """File could not be parsed; carries the offending location."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DegenerateGeometryError(MeshError):
    """Geometry has no usable extent (coincident vertices, zero area)."""


def _as_float_array(values, name, width=3):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise MeshError(f"{name} must have shape (n, {width}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MeshError(f"{name} contains non-finite values")
    return arr


class TriangleMesh:
    """Immutable triangle mesh: vertices, per-vertex RGB colors, facet index triples.

    Edges and vertex adjacency are derived lazily and deterministically:
    each undirected edge appears once, smaller index first, lexicographically
    sorted.
    """

    def __init__(self, vertices, facets, colors=None):
        vertices = _as_float_array(vertices, "vertices")
        facets = np.asarray(facets, dtype=np.int64)
        if facets.size == 0:
            facets = facets.reshape(0, 3)
        if facets.ndim != 2 or facets.shape[1] != 3:
            raise MeshError(f"facets must have shape (m, 3), got {facets.shape}")
        n = len(vertices)
        if facets.size and (facets.min() < 0 or facets.max() >= n):
            bad = int(np.argmax((facets < 0) | (facets >= n)).item() // 3)
            raise MeshError(f"facet {bad} references a vertex index outside [0, {n})")
        if facets.size:
            same = (
                (facets[:, 0] == facets[:, 1])
                | (facets[:, 1] == facets[:, 2])
                | (facets[:, 0] == facets[:, 2])
            )
            if same.any():
                raise MeshError(f"facet {int(np.argmax(same))} has repeated vertex indices")
        if colors is None:
            colors = np.full((n, 3), GRAY)
        colors = _as_float_array(colors, "colors")
        if len(colors) != n:
            raise MeshError(f"colors length {len(colors)} != vertex count {n}")
        if colors.size and (colors.min() < -1e-9 or colors.max() > 1 + 1e-9):
            raise MeshError("colors must lie in [0, 1]")
        colors = np.clip(colors, 0.0, 1.0)

        for arr in (vertices, facets, colors):
            arr.setflags(write=False)
        self.vertices = vertices
        self.facets = facets
        self.colors = colors

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_facets(self):
        return len(self.facets)

    @cached_property
    def edges(self):
        """Deduplicated undirected edges, smaller index first, lexsorted."""
        if self.num_facets == 0:
            e = np.zeros((0, 2), dtype=np.int64)
        else:
            pairs = self.facets[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
            pairs = np.sort(pairs, axis=1)
            e = np.unique(pairs, axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def vertex_adjacency(self):
        """Per-vertex sorted neighbor index arrays."""
        indptr, indices = self.adjacency_csr
        return [indices[indptr[v]:indptr[v + 1]] for v in range(self.num_vertices)]

    @cached_property
    def adjacency_csr(self):
        """Adjacency in CSR form (indptr, indices); used by vectorized losses."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]]) if len(e) else np.zeros((0, 2), np.int64)
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=self.num_vertices)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        indices = both[:, 1].copy()
        indptr.setflags(write=False)
        indices.setflags(write=False)
        return indptr, indices

    def with_vertices(self, vertices, colors=None):
        """New mesh sharing this topology, with replaced vertex data."""
        return TriangleMesh(vertices, self.facets, self.colors if colors is None else colors)


@dataclass(frozen=True)
class NormalizationTransform:
    """Shift-then-scale map ``v -> scale * (v - center)``."""

    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale


def mesh_summary(mesh: TriangleMesh) -> dict:
    """Counts plus manifoldness report for a freshly loaded mesh."""
    e = mesh.edges
    if mesh.num_facets:
        pairs = np.sort(mesh.facets[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(pairs, axis=0, return_counts=True)
    else:
        counts = np.zeros(0, dtype=np.int64)
    return {
        "vertices": mesh.num_vertices,
        "facets": mesh.num_facets,
        "edges": len(e),
        "boundary_edges": int((counts == 1).sum()),
        "nonmanifold_edges": int((counts > 2).sum()),
    }


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_mesh(path) -> TriangleMesh:
    """Load an OBJ or PLY mesh (triangles; larger polygons fan-triangulated).

    Vertex colors come from PLY red/green/blue properties or from extended
    OBJ ``v x y z r g b`` lines; meshes without colors get 0.5 gray.
    Non-manifold input is accepted; the summary is logged.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        mesh = _load_obj(path)
    elif suffix == ".ply":
        mesh = _load_ply(path)
    else:
        raise MeshParseError(path, 0, f"unsupported mesh extension {suffix!r}")
    summary = mesh_summary(mesh)
    log.info("loaded %s: %s", path.name, summary)
    if summary["nonmanifold_edges"]:
        log.warning(
            "%s is non-manifold: %d edges with >2 incident facets",
            path.name, summary["nonmanifold_edges"],
        )
    return mesh


def _fan_triangulate(indices, n_vertices, path, line):
    for idx in indices:
        if not (0 <= idx < n_vertices):
            raise MeshParseError(path, line, f"vertex index {idx} out of range [0, {n_vertices})")
    if len(indices) < 3:
        raise MeshParseError(path, line, "face with fewer than 3 vertices")
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def _load_obj(path) -> TriangleMesh:
    vertices, colors, faces = [], [], []
    any_color = False
    with open(path, "r", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                vals = parts[1:]
                try:
                    nums = [float(v) for v in vals]
                except ValueError:
                    raise MeshParseError(path, lineno, f"bad vertex line: {raw.strip()!r}")
                if len(nums) < 3:
                    raise MeshParseError(path, lineno, "vertex line needs at least 3 coordinates")
                vertices.append(nums[:3])
                if len(nums) >= 6:
                    colors.append(nums[-3:] if len(nums) == 6 else nums[3:6])
                    any_color = True
                else:
                    colors.append([GRAY, GRAY, GRAY])
            elif tag == "f":
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshParseError(path, lineno, f"bad face token {token!r}")
                    if i == 0:
                        raise MeshParseError(path, lineno, "OBJ face indices are 1-based; got 0")
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                faces.extend(_fan_triangulate(idx, len(vertices), path, lineno))
            # vn/vt/o/g/s/usemtl/mtllib/l are irrelevant here
    try:
        return TriangleMesh(
            np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
            faces,
            np.clip(colors, 0.0, 1.0) if any_color else None,
        )
    except MeshError as exc:
        raise MeshParseError(path, 0, str(exc))


def _load_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise MeshParseError(path, 1, "not a PLY file (missing 'ply' magic)")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype_or_list_tuple)])
        lineno = 1
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise MeshParseError(path, lineno, "unexpected EOF in header")
            parts = raw.decode("ascii", errors="replace").split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "format":
                fmt = parts[1]
                if fmt not in ("ascii", "binary_little_endian"):
                    raise MeshParseError(path, lineno, f"unsupported PLY format {fmt!r}")
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise MeshParseError(path, lineno, "property before any element")
                if parts[1] == "list":
                    count_t, item_t = parts[2], parts[3]
                    if count_t not in _PLY_SCALARS or item_t not in _PLY_SCALARS:
                        raise MeshParseError(path, lineno, f"unknown list types {count_t}/{item_t}")
                    elements[-1][2].append((parts[4], ("list", _PLY_SCALARS[count_t], _PLY_SCALARS[item_t])))
                else:
                    if parts[1] not in _PLY_SCALARS:
                        raise MeshParseError(path, lineno, f"unknown property type {parts[1]!r}")
                    elements[-1][2].append((parts[2], _PLY_SCALARS[parts[1]]))
            elif parts[0] == "end_header":
                break
            elif parts[0] == "obj_info":
                continue
            else:
                raise MeshParseError(path, lineno, f"unknown header keyword {parts[0]!r}")
        if fmt is None:
            raise MeshParseError(path, lineno, "missing 'format' line")
        reader = _read_ply_ascii if fmt == "ascii" else _read_ply_binary
        data = reader(fh, elements, path, lineno)

    vdata = data.get("vertex")
    if vdata is None:
        raise MeshParseError(path, 0, "PLY without a vertex element")
    props, rows = vdata
    names = [p[0] for p in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise MeshParseError(path, 0, f"vertex element lacks property {need!r}")
    vertices = np.stack([rows[names.index(c)] for c in "xyz"], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        cols = [rows[names.index(c)] for c in ("red", "green", "blue")]
        kinds = [props[names.index(c)][1] for c in ("red", "green", "blue")]
        cols = [c / 255.0 if k == "u1" else c for c, k in zip(cols, kinds)]
        colors = np.clip(np.stack(cols, axis=1), 0.0, 1.0)

    faces = []
    if "face" in data:
        props, rows = data["face"]
        names = [p[0] for p in props]
        key = next((n for n in ("vertex_indices", "vertex_index") if n in names), None)
        if key is None:
            raise MeshParseError(path, 0, "face element lacks vertex_indices")
        for fi, idx in enumerate(rows[names.index(key)]):
            faces.extend(_fan_triangulate(list(idx), len(vertices), path, f"face {fi}"))
    try:
        return TriangleMesh(vertices, faces, colors)
    except MeshError as exc:
        raise MeshParseError(path, 0, str(exc))


def _read_ply_ascii(fh, elements, path, lineno):
    data = {}
    for name, count, props in elements:
        columns = [[] for _ in props]
        for _ in range(count):
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise MeshParseError(path, lineno, f"unexpected EOF in element {name!r}")
            tokens = raw.split()
            pos = 0
            for ci, (_, kind) in enumerate(props):
                try:
                    if isinstance(kind, tuple):
                        n = int(tokens[pos]); pos += 1
                        vals = [float(t) for t in tokens[pos:pos + n]]
                        if len(vals) != n:
                            raise IndexError
                        pos += n
                        columns[ci].append(np.array(vals))
                    else:
                        columns[ci].append(float(tokens[pos])); pos += 1
                except (IndexError, ValueError):
                    raise MeshParseError(path, lineno, f"malformed {name!r} row")
        data[name] = (props, [
            c if isinstance(props[i][1], tuple) else np.asarray(c, dtype=np.float64)
            for i, c in enumerate(columns)
        ])
    return data


def _read_ply_binary(fh, elements, path, lineno):
    data = {}
    for name, count, props in elements:
        has_list = any(isinstance(p[1], tuple) for p in props)
        if not has_list:
            dt = np.dtype([(f"f{i}", "<" + kind) for i, (_, kind) in enumerate(props)])
            buf = fh.read(dt.itemsize * count)
            if len(buf) != dt.itemsize * count:
                raise MeshParseError(path, lineno, f"truncated binary element {name!r}")
            rec = np.frombuffer(buf, dtype=dt)
            data[name] = (props, [rec[f"f{i}"].astype(np.float64) for i in range(len(props))])
            continue
        if len(props) != 1:
            raise MeshParseError(path, lineno, f"mixed list/scalar element {name!r} unsupported")
        _, (_, count_kind, item_kind) = props[0]
        cdt = np.dtype("<" + count_kind)
        idt = np.dtype("<" + item_kind)
        lists = []
        for row in range(count):
            cbuf = fh.read(cdt.itemsize)
            if len(cbuf) != cdt.itemsize:
                raise MeshParseError(path, lineno, f"truncated {name!r} at row {row}")
            n = int(np.frombuffer(cbuf, dtype=cdt)[0])
            ibuf = fh.read(idt.itemsize * n)
            if len(ibuf) != idt.itemsize * n:
                raise MeshParseError(path, lineno, f"truncated {name!r} at row {row}")
            lists.append(np.frombuffer(ibuf, dtype=idt).astype(np.int64))
        data[name] = (props, [lists])
    return data


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Write an ASCII PLY with double positions and float colors.

    ``load_mesh(save_mesh(...))`` reproduces vertices, colors and facets
    exactly (values are printed with full float64 precision).
    """
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        "comment meshsplat",
        f"element vertex {mesh.num_vertices}",
        "property double x",
        "property double y",
        "property double z",
        "property double red",
        "property double green",
        "property double blue",
        f"element face {mesh.num_facets}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v, c in zip(mesh.vertices, mesh.colors):
        lines.append("%.17g %.17g %.17g %.17g %.17g %.17g" % (v[0], v[1], v[2], c[0], c[1], c[2]))
    for f in mesh.facets:
        lines.append("3 %d %d %d" % (f[0], f[1], f[2]))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _max_pairwise_distance(points) -> float:
    """Exact diameter of a point set; reduces to the convex hull when large."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) > 1024:
        try:
            from scipy.spatial import ConvexHull
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # degenerate (coplanar etc.) falls back to all points
            pass
    best = 0.0
    block = max(1, int(2**22 // max(len(pts), 1)))
    for start in range(0, len(pts), block):
        chunk = pts[start:start + block]
        d2 = ((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def normalize_mesh(mesh: TriangleMesh):
    """Center the mesh on its bounding-box center and scale the maximum
    pairwise vertex distance to 2.0. Returns (mesh, NormalizationTransform)."""
    if mesh.num_vertices < 2:
        raise DegenerateGeometryError("need at least 2 vertices to normalize")
    diameter = _max_pairwise_distance(mesh.vertices)
    if diameter < 1e-12:
        raise DegenerateGeometryError("all vertices coincide; cannot normalize")
    center = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    transform = NormalizationTransform(center=center, scale=2.0 / diameter)
    return mesh.with_vertices(transform.apply(mesh.vertices)), transform


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def make_icosphere(target_facets: int, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron subdivided to the smallest level with >= target_facets
    facets (level L has 20 * 4**L), vertices projected onto the sphere."""
    if target_facets < 20:
        raise MeshError("target_facets must be >= 20")
    level = 0
    while 20 * 4**level < target_facets:
        level += 1

    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]

    verts = list(verts)
    for _ in range(level):
        midpoint = {}

        def split(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = split(a, b), split(b, c), split(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces

    vertices = np.asarray(verts) * radius
    return TriangleMesh(vertices, faces)


def make_grid_cube(divisions: int = 8, half_extent: float = 1.0, position_colors: bool = False) -> TriangleMesh:
    """Axis-aligned cube with each face split into a divisions x divisions
    grid of quads (two triangles each); optionally colored by position."""
    if divisions < 1:
        raise MeshError("divisions must be >= 1")
    verts = []
    faces = []
    vert_index = {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in vert_index:
            vert_index[key] = len(verts)
            verts.append(np.asarray(p, dtype=np.float64))
        return vert_index[key]

    h = half_extent
    lin = np.linspace(-h, h, divisions + 1)
    # (normal axis, sign); (u, v) span the remaining two axes
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_axis, v_axis = [a for a in range(3) if a != axis]
            for i in range(divisions):
                for j in range(divisions):
                    corners = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign * h
                        p[u_axis] = lin[i + du]
                        p[v_axis] = lin[j + dv]
                        corners.append(vid(p))
                    a, b, c, d = corners
                    # outward winding flips with the face sign and axis parity
                    flip = (sign > 0) ^ (axis == 1)
                    if flip:
                        faces += [(a, b, c), (a, c, d)]
                    else:
                        faces += [(a, c, b), (a, d, c)]
    vertices = np.asarray(verts)
    colors = None
    if position_colors:
        colors = np.clip((vertices / h + 1.0) / 2.0, 0.0, 1.0)
    return TriangleMesh(vertices, faces, colors)


# ---------------------------------------------------------------------------
# Geometry queries
# ---------------------------------------------------------------------------

_FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


def mesh_area_and_normals(mesh: TriangleMesh):
    """Per-facet (area, unit normal, degenerate flag).

    Normal orientation follows the winding order. Facets with area below
    1e-12 are flagged and get a fixed placeholder normal.
    """
    v = mesh.vertices
    f = mesh.facets
    if len(f) == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=bool)
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    double_area = np.linalg.norm(cross, axis=1)
    areas = 0.5 * double_area
    degenerate = areas < DEGENERATE_AREA_EPS
    safe = np.where(degenerate, 1.0, double_area)
    normals = cross / safe[:, None]
    normals[degenerate] = _FALLBACK_NORMAL
    return areas, normals, degenerate


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0):
    """Area-uniform surface samples with facet normals.

    Deterministic for a fixed seed independent of evaluation chunking:
    samples are drawn in fixed-size chunks, each from its own counter-based
    stream keyed by (seed, chunk index).

    Sample positions map barycentric draws onto index-sorted facet
    corners, so they depend only on each facet's vertex set; reordering
    a facet's corners (e.g. a winding flip) reproduces the same points.
    Normals still follow the stored winding.

    Returns (points (n,3), normals (n,3)).
    """
    areas, normals, _ = mesh_area_and_normals(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise DegenerateGeometryError("mesh has zero surface area")
    cdf = np.cumsum(areas) / total
    v = mesh.vertices
    f = np.sort(mesh.facets, axis=1)

    chunk = 1 << 16
    points_out = np.empty((n, 3))
    normals_out = np.empty((n, 3))
    for ci, start in enumerate(range(0, n, chunk)):
        m = min(chunk, n - start)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, ci])))
        u = rng.random((m, 3))
        fi = np.searchsorted(cdf, u[:, 0], side="left")
        fi = np.minimum(fi, len(f) - 1)
        b1, b2 = u[:, 1], u[:, 2]
        over = b1 + b2 > 1.0
        b1 = np.where(over, 1.0 - b1, b1)
        b2 = np.where(over, 1.0 - b2, b2)
        a = v[f[fi, 0]]
        points_out[start:start + m] = (
            a
            + b1[:, None] * (v[f[fi, 1]] - a)
            + b2[:, None] * (v[f[fi, 2]] - a)
        )
        normals_out[start:start + m] = normals[fi]
    return points_out, normals_out
