"""
Signed distance fields of closed triangle meshes.

Robot geometry is a watertight, outward-oriented triangle mesh. Unsigned distances
come from a bounding-volume hierarchy of axis-aligned boxes; the inside/outside
decision comes from the generalized winding number, summed over the same hierarchy
with far-field expansions for distant nodes and exact solid angles close by.

Every query has a batch form working on ``(n, 3)`` arrays. The hierarchy is walked
breadth-first over (point, node) pairs so that a whole batch advances one level per
numpy call.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np

from swept_sdf.exceptions import InputError, MeshError

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())

DEGENERATE_AREA = 1e-12
WELD_TOLERANCE = 1e-8
SURFACE_EPS = 1e-6
GRADIENT_STEP = 1e-5
HESSIAN_STEP = 1e-4
WINDING_BETA = 2.0
WINDING_TOL = 5e-6
LEAF_SIZE = 8

_FOUR_PI = 4.0 * np.pi
_AXES = np.eye(3)

PathLike = Union[str, Path]


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"expected points of shape (n, 3), got {pts.shape}")
    return pts


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenate ``arange(s, s + c)`` for every (s, c) pair."""
    counts = np.asarray(counts, dtype=np.intp)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.intp)
    shift = np.asarray(starts, dtype=np.intp) - np.cumsum(counts) + counts
    return np.repeat(shift, counts) + np.arange(total, dtype=np.intp)


# ---- Mesh container ----


@dataclass(frozen=True)
class TriangleMesh:
    """Closed triangle mesh in meters.

    Attributes:
        vertices (numpy.ndarray): ``(V, 3)`` vertex positions.
        faces (numpy.ndarray): ``(F, 3)`` vertex indices, counter-clockwise seen from
            outside.

    Use :meth:`from_arrays` (or :func:`load_mesh`) to get welding, degenerate-face
    removal, watertightness checks and orientation normalization. The plain
    constructor only checks shapes and index ranges.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @classmethod
    def from_arrays(cls, vertices, faces, weld_tolerance: Optional[float] = None):
        """Clean and validate raw arrays into a closed, outward-oriented mesh."""
        vertices, faces = _clean(
            np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3),
            weld_tolerance,
        )
        return cls(vertices, faces)

    def __len__(self):
        return len(self.faces)

    @property
    def triangles(self) -> np.ndarray:
        """``(F, 3, 3)`` corner positions."""
        return self.vertices[self.faces]

    @property
    def vector_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    @property
    def face_areas(self) -> np.ndarray:
        return np.linalg.norm(self.vector_areas, axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        vec = self.vector_areas
        return vec / np.linalg.norm(vec, axis=1)[:, None]

    @property
    def bounds(self) -> np.ndarray:
        """``(2, 3)`` array of the min and max corner."""
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    @property
    def volume(self) -> float:
        tri = self.triangles
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    @property
    def circumscribed_radius(self) -> float:
        """Largest vertex distance from the body-frame origin."""
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def transformed(self, rotation, translation) -> "TriangleMesh":
        """Rigidly move the mesh: ``x -> R x + t``."""
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64)
        return TriangleMesh(self.vertices @ rotation.T + translation, self.faces)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(vertices={len(self.vertices)}, faces={len(self.faces)})"


def _weld(vertices: np.ndarray, faces: np.ndarray, tolerance: float):
    keys = np.round(vertices / tolerance).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    return vertices[first], inverse[faces]


def _edge_report(faces: np.ndarray):
    """Directed edges plus counts of their undirected keys."""
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    keys, counts = np.unique(undirected, axis=0, return_counts=True)
    return directed, keys, counts


def check_closed(faces: np.ndarray) -> None:
    """Raise :class:`MeshError` unless every edge is shared by exactly two faces with
    opposite winding."""
    faces = np.asarray(faces)
    directed, keys, counts = _edge_report(faces)
    boundary = int(np.count_nonzero(counts == 1))
    if boundary:
        raise MeshError(f"non-watertight: {boundary} boundary edges")
    shared = int(np.count_nonzero(counts > 2))
    if shared:
        raise MeshError(f"non-manifold: {shared} edges shared by more than two faces")
    if len(np.unique(directed, axis=0)) != len(directed):
        raise MeshError("inconsistent face orientation")


def _clean(vertices: np.ndarray, faces: np.ndarray, weld_tolerance: Optional[float]):
    if len(faces) == 0 or len(vertices) == 0:
        raise MeshError("empty mesh")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise MeshError("face index out of range")
    if not np.all(np.isfinite(vertices)):
        raise MeshError("non-finite vertex coordinates")
    if weld_tolerance:
        vertices, faces = _weld(vertices, faces, weld_tolerance)

    tri = vertices[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    keep = (areas >= DEGENERATE_AREA) & ~repeated
    dropped = len(faces) - int(keep.sum())
    if dropped:
        _logger.info("Removed %d degenerate triangles", dropped)
        faces = faces[keep]
    if len(faces) == 0:
        raise MeshError("empty mesh")

    used, compact = np.unique(faces, return_inverse=True)
    vertices = vertices[used]
    faces = compact.reshape(-1, 3)

    check_closed(faces)

    tri = vertices[faces]
    volume = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    if volume < 0:
        _logger.debug("Flipping inward-oriented mesh")
        faces = faces[:, [0, 2, 1]]
    return vertices, faces


# ---- File formats ----


def _read_obj(text: str):
    vertices, faces = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError("vertex record needs three coordinates")
                vertices.append([float(value) for value in parts[1:4]])
            elif parts[0] == "f":
                polygon = []
                for token in parts[1:]:
                    index = int(token.split("/")[0])
                    polygon.append(index - 1 if index > 0 else len(vertices) + index)
                if len(polygon) < 3:
                    raise ValueError("face record needs at least three vertices")
                for k in range(1, len(polygon) - 1):
                    faces.append([polygon[0], polygon[k], polygon[k + 1]])
        except ValueError as exc:
            raise MeshError(f"OBJ parse error on line {lineno}: {exc}") from exc
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_stl(raw: bytes) -> np.ndarray:
    # a binary file satisfies len == 84 + 50 * count even when its header starts with "solid"
    if len(raw) >= 84:
        count = struct.unpack_from("<I", raw, 80)[0]
        if len(raw) == 84 + 50 * count:
            record = np.dtype([("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")])
            return np.frombuffer(raw, dtype=record, count=count, offset=84)["vertices"].astype(np.float64)
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshError("STL is neither valid binary nor ASCII") from exc
    if not text.lstrip().startswith("solid"):
        raise MeshError("STL is neither valid binary nor ASCII")
    corners = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if parts and parts[0] == "vertex":
            try:
                corners.append([float(value) for value in parts[1:4]])
            except (ValueError, IndexError) as exc:
                raise MeshError(f"STL parse error on line {lineno}: {exc}") from exc
    if len(corners) % 3:
        raise MeshError("STL vertex count is not a multiple of three")
    return np.array(corners, dtype=np.float64).reshape(-1, 3, 3)


def _resolve_format(path: Path, fmt: Optional[str]) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "stl"):
        raise MeshError(f"unsupported mesh format: {fmt!r}")
    return fmt


def load_mesh(path: PathLike, fmt: Optional[str] = None) -> TriangleMesh:
    """Load a closed triangle mesh from an OBJ or STL file.

    Args:
        path: mesh file; coordinates are taken as meters.
        fmt: ``"obj"`` or ``"stl"``; inferred from the suffix when omitted.

    Returns:
        TriangleMesh: welded (STL), cleaned, validated and outward-oriented mesh.

    Raises:
        MeshError: unreadable file, empty or non-watertight mesh.
    """
    path = Path(path)
    fmt = _resolve_format(path, fmt)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MeshError(f"cannot read mesh {path}: {exc}") from exc
    if fmt == "obj":
        vertices, faces = _read_obj(raw.decode("utf-8", errors="replace"))
        mesh = TriangleMesh.from_arrays(vertices, faces)
    else:
        triangles = _read_stl(raw)
        faces = np.arange(3 * len(triangles), dtype=np.int64).reshape(-1, 3)
        mesh = TriangleMesh.from_arrays(triangles.reshape(-1, 3), faces, weld_tolerance=WELD_TOLERANCE)
    _logger.info("Loaded %s with %d vertices and %d faces", path, len(mesh.vertices), len(mesh.faces))
    return mesh


def save_mesh(mesh: TriangleMesh, path: PathLike, fmt: Optional[str] = None) -> None:
    """Write a mesh as ASCII OBJ (full precision) or binary STL."""
    path = Path(path)
    fmt = _resolve_format(path, fmt)
    if fmt == "obj":
        lines = ["v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
        lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
        path.write_text("\n".join(lines) + "\n")
        return
    record = np.dtype([("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")])
    data = np.zeros(len(mesh.faces), dtype=record)
    data["normal"] = mesh.face_normals
    data["vertices"] = mesh.triangles
    header = b"swept_sdf binary STL".ljust(80, b" ")
    path.write_bytes(header + struct.pack("<I", len(data)) + data.tobytes())


# ---- Primitive meshes ----


def make_box(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box with 8 vertices and 12 outward triangles."""
    half = 0.5 * np.asarray(extents, dtype=np.float64)
    bits = np.array([[(i >> k) & 1 for k in range(3)] for i in range(8)], dtype=np.float64)
    vertices = (2.0 * bits - 1.0) * half + np.asarray(center, dtype=np.float64)
    faces = [
        [0, 2, 3], [0, 3, 1],  # -z
        [4, 5, 7], [4, 7, 6],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 6, 7], [2, 7, 3],  # +y
        [0, 4, 6], [0, 6, 2],  # -x
        [1, 3, 7], [1, 7, 5],  # +x
    ]
    return TriangleMesh.from_arrays(vertices, faces)


def make_icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere with ``20 * 4**subdivisions`` faces and vertices on the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    vertices = [list(np.asarray(v, dtype=np.float64) / np.linalg.norm(v)) for v in vertices]
    for _ in range(subdivisions):
        midpoints = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoints:
                mid = np.add(vertices[i], vertices[j])
                vertices.append(list(mid / np.linalg.norm(mid)))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = refined
    points = radius * np.asarray(vertices) + np.asarray(center, dtype=np.float64)
    return TriangleMesh.from_arrays(points, faces)


# ---- Per-triangle kernels ----


def closest_points_on_triangles(points, a, b, c) -> np.ndarray:
    """Closest point on triangle ``(a, b, c)`` to each point, row by row.

    All inputs are ``(m, 3)``; the Voronoi region of the query decides between the
    three corners, the three edges and the face interior.
    """
    p = np.asarray(points, dtype=np.float64)
    ab = b - a
    ac = c - a
    ap = p - a
    bp = p - b
    cp = p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        on_ab = a + (d1 / (d1 - d3))[:, None] * ab
        on_ac = a + (d2 / (d2 - d6))[:, None] * ac
        on_bc = b + ((d4 - d3) / ((d4 - d3) + (d5 - d6)))[:, None] * (c - b)
        denom = 1.0 / (va + vb + vc)
        inside = a + (vb * denom)[:, None] * ab + (vc * denom)[:, None] * ac

    conditions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [a, b, on_ab, c, on_ac, on_bc]
    return np.select([cond[:, None] for cond in conditions], choices, default=inside)


def triangle_solid_angles(points, a, b, c) -> np.ndarray:
    """Signed solid angle subtended by each triangle at each point (row by row).

    Positive when the triangle's counter-clockwise normal faces away from the point.
    """
    ra = a - points
    rb = b - points
    rc = c - points
    la = np.linalg.norm(ra, axis=1)
    lb = np.linalg.norm(rb, axis=1)
    lc = np.linalg.norm(rc, axis=1)
    numerator = np.einsum("ij,ij->i", ra, np.cross(rb, rc))
    denominator = (
        la * lb * lc
        + np.einsum("ij,ij->i", ra, rb) * lc
        + np.einsum("ij,ij->i", ra, rc) * lb
        + np.einsum("ij,ij->i", rb, rc) * la
    )
    return 2.0 * np.arctan2(numerator, denominator)


def exact_winding_numbers(mesh: TriangleMesh, points, chunk: int = 256) -> np.ndarray:
    """Winding numbers by summing every triangle's solid angle (no hierarchy)."""
    pts = _as_points(points)
    tri = mesh.triangles
    out = np.zeros(len(pts))
    for lo in range(0, len(pts), chunk):
        block = pts[lo:lo + chunk]
        rows = np.repeat(block, len(tri), axis=0)
        a = np.tile(tri[:, 0], (len(block), 1))
        b = np.tile(tri[:, 1], (len(block), 1))
        c = np.tile(tri[:, 2], (len(block), 1))
        omega = triangle_solid_angles(rows, a, b, c).reshape(len(block), len(tri))
        out[lo:lo + chunk] = omega.sum(axis=1) / _FOUR_PI
    return out


# ---- Hierarchy ----


class ClosestPointResult(NamedTuple):
    """Batch closest-point answer."""

    distances: np.ndarray
    closest_points: np.ndarray
    face_ids: np.ndarray


class MeshDistanceIndex:
    """Axis-aligned bounding-box hierarchy over a mesh's triangles.

    Nodes are stored in preorder as flat arrays. Each node also carries the
    far-field data of its triangles for winding numbers: the summed vector area,
    the area-weighted centroid, the first and second area moments of the
    triangles about that centroid (weighted by vector area), the total area and
    the radius of the ball around the centroid that holds every corner.

    The index is immutable after construction, so concurrent read-only queries
    need no locking.

    Args:
        mesh: validated closed mesh.
        leaf_size: maximum triangles per leaf.
        beta: far-field acceptance ratio; a node is expanded analytically only when
            the query lies farther than ``beta`` times the node radius from its center.
        winding_tol: bound on the truncation remainder of one expanded node,
            ``area * radius^3 / (distance - radius)^5``; nodes above it are opened.
    """

    def __init__(
        self,
        mesh: TriangleMesh,
        leaf_size: int = LEAF_SIZE,
        beta: float = WINDING_BETA,
        winding_tol: float = WINDING_TOL,
    ):
        if len(mesh.faces) == 0:
            raise MeshError("empty mesh")
        if not beta > 1.0:
            raise InputError(f"beta must exceed 1, got {beta!r}")
        if not winding_tol > 0.0:
            raise InputError(f"winding_tol must be positive, got {winding_tol!r}")
        check_closed(mesh.faces)
        self.mesh = mesh
        self.leaf_size = int(leaf_size)
        self.beta = float(beta)
        self.winding_tol = float(winding_tol)

        tri = mesh.triangles
        centroids = tri.mean(axis=1)
        order = np.arange(len(tri))
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def build(first, stop):
            node = len(lo)
            members = order[first:stop]
            corners = tri[members].reshape(-1, 3)
            lo.append(corners.min(axis=0))
            hi.append(corners.max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(first)
            count.append(stop - first)
            spread = np.ptp(centroids[members], axis=0)
            if stop - first <= self.leaf_size or spread.max() <= 0.0:
                return node
            axis = int(np.argmax(spread))
            perm = np.argsort(centroids[members, axis], kind="stable")
            order[first:stop] = members[perm]
            mid = first + (stop - first) // 2
            left[node] = build(first, mid)
            right[node] = build(mid, stop)
            return node

        build(0, len(tri))

        self._lo = np.array(lo)
        self._hi = np.array(hi)
        self._left = np.array(left, dtype=np.intp)
        self._right = np.array(right, dtype=np.intp)
        self._start = np.array(start, dtype=np.intp)
        self._count = np.array(count, dtype=np.intp)
        self._is_leaf = self._left < 0
        self._face_ids = order.copy()
        ordered = tri[order]
        self._a = ordered[:, 0].copy()
        self._b = ordered[:, 1].copy()
        self._c = ordered[:, 2].copy()

        vector_areas = 0.5 * np.cross(self._b - self._a, self._c - self._a)
        areas = np.linalg.norm(vector_areas, axis=1)
        tri_centroids = (self._a + self._b + self._c) / 3.0
        # second area moment of each triangle about its own centroid
        edges = np.stack([self._a, self._b, self._c], axis=1) - tri_centroids[:, None, :]
        covariance = np.einsum("tvj,tvk->tjk", edges, edges) / 12.0
        n_nodes = len(lo)
        self._normal_sum = np.zeros((n_nodes, 3))
        self._center = np.zeros((n_nodes, 3))
        self._spread = np.zeros((n_nodes, 3, 3))
        self._moment = np.zeros((n_nodes, 3, 3, 3))
        self._area = np.zeros(n_nodes)
        self._radius = np.zeros(n_nodes)
        for node in range(n_nodes):
            sl = slice(self._start[node], self._start[node] + self._count[node])
            weight = areas[sl]
            center = (weight[:, None] * tri_centroids[sl]).sum(axis=0) / weight.sum()
            shift = tri_centroids[sl] - center
            self._normal_sum[node] = vector_areas[sl].sum(axis=0)
            self._center[node] = center
            self._spread[node] = np.einsum("ti,tj->ij", vector_areas[sl], shift)
            second = np.einsum("tj,tk->tjk", shift, shift) + covariance[sl]
            self._moment[node] = np.einsum("ti,tjk->ijk", vector_areas[sl], second)
            self._area[node] = weight.sum()
            corners = np.concatenate([self._a[sl], self._b[sl], self._c[sl]])
            self._radius[node] = np.linalg.norm(corners - center, axis=1).max()
        # contractions of the second moment used by the far-field kernel
        self._moment_u = np.einsum("niji->nj", self._moment)
        self._moment_v = np.einsum("nijj->ni", self._moment)

        for array in (
            self._lo, self._hi, self._left, self._right, self._start, self._count, self._is_leaf,
            self._face_ids, self._a, self._b, self._c, self._normal_sum, self._center,
            self._spread, self._moment, self._moment_u, self._moment_v, self._area, self._radius,
        ):
            array.setflags(write=False)
        _logger.debug("Built hierarchy with %d nodes over %d faces", n_nodes, len(tri))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(faces={len(self.mesh.faces)}, nodes={self.node_count}, depth={self.depth})"

    @property
    def node_count(self) -> int:
        return len(self._lo)

    @property
    def depth(self) -> int:
        """Edges on the longest root-to-leaf path."""
        depth = np.zeros(self.node_count, dtype=np.intp)
        for node in range(self.node_count):
            if not self._is_leaf[node]:
                depth[self._left[node]] = depth[node] + 1
                depth[self._right[node]] = depth[node] + 1
        return int(depth.max())

    @property
    def root_box(self) -> np.ndarray:
        return np.stack([self._lo[0], self._hi[0]])

    def node_boxes(self) -> np.ndarray:
        """``(nodes, 2, 3)`` boxes in preorder."""
        return np.stack([self._lo, self._hi], axis=1)

    def leaves(self):
        """List of ``(node, face_ids)`` for every leaf in preorder."""
        return [
            (int(node), self._face_ids[self._start[node]:self._start[node] + self._count[node]])
            for node in np.flatnonzero(self._is_leaf)
        ]

    def traversal_order(self) -> np.ndarray:
        """Face ids in the order leaves store them."""
        return self._face_ids

    # ---- queries ----

    def closest_points(self, points) -> ClosestPointResult:
        """Unsigned distance, closest surface point and face id for each point."""
        pts = _as_points(points)
        n = len(pts)
        best_d2 = np.full(n, np.inf)
        best_cp = np.zeros((n, 3))
        best_face = np.full(n, -1, dtype=np.intp)
        pair_pt = np.arange(n, dtype=np.intp)
        pair_node = np.zeros(n, dtype=np.intp)
        while pair_pt.size:
            p = pts[pair_pt]
            lo = self._lo[pair_node]
            hi = self._hi[pair_node]
            gap = np.maximum(lo - p, 0.0) + np.maximum(p - hi, 0.0)
            near2 = np.einsum("ij,ij->i", gap, gap)
            reach = np.maximum(np.abs(p - lo), np.abs(p - hi))
            far2 = np.einsum("ij,ij->i", reach, reach)
            bound = best_d2.copy()
            np.minimum.at(bound, pair_pt, far2)
            keep = near2 <= bound[pair_pt]
            pair_pt = pair_pt[keep]
            pair_node = pair_node[keep]

            leaf = self._is_leaf[pair_node]
            if leaf.any():
                leaf_pt = pair_pt[leaf]
                leaf_node = pair_node[leaf]
                counts = self._count[leaf_node]
                rows = np.repeat(leaf_pt, counts)
                tri = _ranges(self._start[leaf_node], counts)
                cp = closest_points_on_triangles(pts[rows], self._a[tri], self._b[tri], self._c[tri])
                diff = pts[rows] - cp
                d2 = np.einsum("ij,ij->i", diff, diff)
                faces = self._face_ids[tri]
                order = np.lexsort((faces, d2, rows))
                sorted_rows = rows[order]
                first = np.ones(len(order), dtype=bool)
                first[1:] = sorted_rows[1:] != sorted_rows[:-1]
                pick = order[first]
                cand = rows[pick]
                better = (d2[pick] < best_d2[cand]) | (
                    (d2[pick] == best_d2[cand]) & (faces[pick] < best_face[cand])
                )
                winners = pick[better]
                best_d2[rows[winners]] = d2[winners]
                best_cp[rows[winners]] = cp[winners]
                best_face[rows[winners]] = faces[winners]

            inner_pt = pair_pt[~leaf]
            inner_node = pair_node[~leaf]
            pair_pt = np.concatenate([inner_pt, inner_pt])
            pair_node = np.concatenate([self._left[inner_node], self._right[inner_node]])
        return ClosestPointResult(np.sqrt(best_d2), best_cp, best_face)

    def winding_numbers(self, points) -> np.ndarray:
        """Generalized winding number of each point: about 1 inside, 0 outside."""
        pts = _as_points(points)
        total = np.zeros(len(pts))
        pair_pt = np.arange(len(pts), dtype=np.intp)
        pair_node = np.zeros(len(pts), dtype=np.intp)
        while pair_pt.size:
            offset = self._center[pair_node] - pts[pair_pt]
            dist = np.linalg.norm(offset, axis=1)
            radius = self._radius[pair_node]
            gap = np.maximum(dist - radius, 0.0)
            far = (dist > self.beta * radius) & (self._area[pair_node] * radius ** 3 <= self.winding_tol * gap ** 5)
            if far.any():
                np.add.at(total, pair_pt[far], self._far_field(offset[far], dist[far], pair_node[far]))
            leaf = ~far & self._is_leaf[pair_node]
            if leaf.any():
                counts = self._count[pair_node[leaf]]
                rows = np.repeat(pair_pt[leaf], counts)
                tri = _ranges(self._start[pair_node[leaf]], counts)
                omega = triangle_solid_angles(pts[rows], self._a[tri], self._b[tri], self._c[tri])
                np.add.at(total, rows, omega)
            inner = ~far & ~self._is_leaf[pair_node]
            inner_pt = pair_pt[inner]
            inner_node = pair_node[inner]
            pair_pt = np.concatenate([inner_pt, inner_pt])
            pair_node = np.concatenate([self._left[inner_node], self._right[inner_node]])
        return total / _FOUR_PI

    def _far_field(self, offset, dist, nodes):
        # Taylor expansion of the solid-angle kernel about the node centroid up to
        # the second area moments; ``offset`` is centroid minus query
        inv3 = dist ** -3
        inv5 = dist ** -5
        dipole = np.einsum("ij,ij->i", self._normal_sum[nodes], offset) * inv3
        spread = self._spread[nodes]
        quadratic = np.einsum("ij,ijk,ik->i", offset, spread, offset)
        first = np.trace(spread, axis1=1, axis2=2) * inv3 - 3.0 * quadratic * inv5
        linear = 2.0 * np.einsum("ij,ij->i", offset, self._moment_u[nodes]) + np.einsum(
            "ij,ij->i", offset, self._moment_v[nodes]
        )
        cubic = np.einsum("nijk,ni,nj,nk->n", self._moment[nodes], offset, offset, offset)
        second = 0.5 * (-3.0 * linear * inv5 + 15.0 * cubic * dist ** -7)
        return dipole + first + second

    def signed_query(self, points):
        """Signed distances together with the closest-point data they came from.

        Returns:
            tuple: ``(signed, ClosestPointResult, sign)`` where ``sign`` is -1 inside.
        """
        pts = _as_points(points)
        result = self.closest_points(pts)
        sign = np.ones(len(pts))
        off_surface = result.distances > 0.0
        if off_surface.any():
            inside = self.winding_numbers(pts[off_surface]) > 0.5
            sign[np.flatnonzero(off_surface)[inside]] = -1.0
        return sign * result.distances, result, sign

    def signed_distances(self, points) -> np.ndarray:
        return self.signed_query(points)[0]

    def sdf_with_gradients(self, points, eps: float = SURFACE_EPS, step: float = GRADIENT_STEP):
        """Signed distances and unit gradients.

        Away from the surface the gradient is ``sign * (x - closest) / |x - closest|``;
        within ``eps`` of it central differences with ``step`` take over.
        """
        pts = _as_points(points)
        signed, result, sign = self.signed_query(pts)
        diff = pts - result.closest_points
        grads = np.zeros_like(pts)
        away = result.distances > eps
        grads[away] = sign[away, None] * diff[away] / result.distances[away, None]
        if not away.all():
            grads[~away] = self._difference_gradients(pts[~away], step)
        return signed, grads

    def sdf_gradients(self, points, eps: float = SURFACE_EPS, step: float = GRADIENT_STEP) -> np.ndarray:
        return self.sdf_with_gradients(points, eps, step)[1]

    def _difference_gradients(self, pts, step):
        shifted = np.concatenate([pts[:, None, :] + step * _AXES, pts[:, None, :] - step * _AXES], axis=1)
        values = self.signed_distances(shifted.reshape(-1, 3)).reshape(len(pts), 6)
        return (values[:, :3] - values[:, 3:]) / (2.0 * step)

    def sdf_hessians(self, points, step: float = HESSIAN_STEP) -> np.ndarray:
        """Symmetrized central-difference Hessians of the signed distance, ``(n, 3, 3)``."""
        pts = _as_points(points)
        shifted = np.concatenate([pts[:, None, :] + step * _AXES, pts[:, None, :] - step * _AXES], axis=1)
        grads = self.sdf_gradients(shifted.reshape(-1, 3)).reshape(len(pts), 6, 3)
        # column k holds the derivative of the gradient along axis k
        hess = np.transpose(grads[:, :3] - grads[:, 3:], (0, 2, 1)) / (2.0 * step)
        return 0.5 * (hess + np.transpose(hess, (0, 2, 1)))


# ---- Single-point API ----


def build_index(
    mesh: TriangleMesh, leaf_size: int = LEAF_SIZE, beta: float = WINDING_BETA, winding_tol: float = WINDING_TOL
) -> MeshDistanceIndex:
    """Build the distance/winding hierarchy of a mesh (deterministic)."""
    return MeshDistanceIndex(mesh, leaf_size=leaf_size, beta=beta, winding_tol=winding_tol)


def unsigned_distance(index: MeshDistanceIndex, x) -> Tuple[float, np.ndarray, int]:
    """Distance to the surface, the closest point and the face it lies on."""
    result = index.closest_points(x)
    return float(result.distances[0]), result.closest_points[0], int(result.face_ids[0])


def winding_number(index: MeshDistanceIndex, x) -> float:
    return float(index.winding_numbers(x)[0])


def signed_distance(index: MeshDistanceIndex, x) -> float:
    """Negative inside the mesh, positive outside, zero on the surface."""
    return float(index.signed_distances(x)[0])


def sdf_gradient(index: MeshDistanceIndex, x) -> np.ndarray:
    return index.sdf_gradients(x)[0]


def sdf_hessian(index: MeshDistanceIndex, x, h: float = HESSIAN_STEP) -> np.ndarray:
    return index.sdf_hessians(x, step=h)[0]
