"""Triangular meshes: Gmsh MSH I/O, boundary tags, zones, P1 geometry.

Physical-group naming convention understood by the parser:

* ``bnd:inlet``, ``bnd:outlet``, ``bnd:wall``, ``bnd:exit`` on line elements;
* ``zone:<name>`` on triangles.  ``zone:rural`` and ``zone:urban`` carry the
  rural/urban roles, every other zone is a selected zone inside the city.

Coordinates are in km.
"""
from __future__ import annotations

import hashlib
import io
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOUNDARY_TAGS = ("inlet", "outlet", "wall", "exit")
TAG_CODE = {name: code for code, name in enumerate(BOUNDARY_TAGS)}


class MeshError(ValueError):
    """Base class for mesh construction and parsing errors."""


class MalformedHeader(MeshError):
    pass


class UnsupportedVersion(MeshError):
    pass


class UnsupportedElement(MeshError):
    pass


class DanglingNodeReference(MeshError):
    pass


class OrphanNode(MeshError):
    pass


class UntaggedBoundaryEdge(MeshError):
    pass


class ConflictingBoundaryTag(MeshError):
    pass


class NonPositiveArea(MeshError):
    pass


class UnknownPhysicalGroup(MeshError):
    pass


class UnknownTag(MeshError):
    pass


class OpenPolygon(MeshError):
    pass


class ZoneOutsideDomain(MeshError):
    pass


class DegenerateGeometry(MeshError):
    pass


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CsrPattern:
    """Symbolic CSR layout shared by every operator assembled on a mesh."""

    indptr: np.ndarray
    indices: np.ndarray
    tri_slots: np.ndarray  # (n_t, 9): CSR position of local entry (a, b) at 3*a + b
    edge_slots: np.ndarray  # (n_e, 4): (a,a), (a,b), (b,a), (b,b) per boundary edge
    diag_slots: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable P1 triangulation.

    ``boundary_edges`` are oriented so the domain lies to their left, which
    makes ``(dy, -dx) / L`` the outward unit normal.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    triangle_zone: np.ndarray
    zone_names: tuple[str, ...] = ("domain",)

    def __post_init__(self):
        for name in ("nodes", "triangles", "boundary_edges", "edge_tags", "triangle_zone"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @cached_property
    def areas(self) -> np.ndarray:
        return _freeze(0.5 * _signed_double_area(self.nodes, self.triangles))

    @cached_property
    def grads(self) -> np.ndarray:
        """P1 basis gradients, shape (n_t, 3, 2)."""
        p = self.nodes[self.triangles]
        x, y = p[..., 0], p[..., 1]
        two_a = 2.0 * self.areas
        g = np.empty((self.n_triangles, 3, 2))
        g[:, 0, 0] = y[:, 1] - y[:, 2]
        g[:, 1, 0] = y[:, 2] - y[:, 0]
        g[:, 2, 0] = y[:, 0] - y[:, 1]
        g[:, 0, 1] = x[:, 2] - x[:, 1]
        g[:, 1, 1] = x[:, 0] - x[:, 2]
        g[:, 2, 1] = x[:, 1] - x[:, 0]
        g /= two_a[:, None, None]
        return _freeze(g)

    @cached_property
    def centroids(self) -> np.ndarray:
        return _freeze(self.nodes[self.triangles].mean(axis=1))

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.nodes[self.boundary_edges[:, 1]] - self.nodes[self.boundary_edges[:, 0]]
        return _freeze(np.hypot(d[:, 0], d[:, 1]))

    @cached_property
    def edge_normals(self) -> np.ndarray:
        d = self.nodes[self.boundary_edges[:, 1]] - self.nodes[self.boundary_edges[:, 0]]
        n = np.column_stack([d[:, 1], -d[:, 0]])
        return _freeze(n / self.edge_lengths[:, None])

    @cached_property
    def element_diameter(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return _freeze(np.hypot(e[..., 0], e[..., 1]).max(axis=1))

    @cached_property
    def h_min(self) -> float:
        """Smallest triangle altitude."""
        return float(np.min(2.0 * self.areas / self.element_diameter))

    @cached_property
    def node_zone(self) -> np.ndarray:
        return _freeze(majority_node_zone(self.n_nodes, self.triangles, self.triangle_zone,
                                          len(self.zone_names)))

    @cached_property
    def pattern(self) -> CsrPattern:
        return _build_pattern(self.n_nodes, self.triangles, self.boundary_edges)

    @cached_property
    def identity(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.boundary_edges, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.edge_tags, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def tag_edges(self, tag: str) -> np.ndarray:
        if tag not in TAG_CODE:
            raise UnknownTag(f"unknown boundary tag {tag!r}")
        return np.flatnonzero(self.edge_tags == TAG_CODE[tag])

    def tag_nodes(self, tag: str) -> np.ndarray:
        return np.unique(self.boundary_edges[self.tag_edges(tag)])

    def tag_counts(self) -> dict[str, int]:
        return {t: int(np.sum(self.edge_tags == c)) for t, c in TAG_CODE.items()}

    def node_normals(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        """Length-weighted average outward normals at the nodes of ``tag``.

        Returns ``(nodes, unit_normals)``.
        """
        idx = self.tag_edges(tag)
        nodes = np.unique(self.boundary_edges[idx])
        acc = np.zeros((self.n_nodes, 2))
        w = self.edge_normals[idx] * self.edge_lengths[idx, None]
        for k in range(2):
            np.add.at(acc, self.boundary_edges[idx, k], w)
        nn = acc[nodes]
        norm = np.hypot(nn[:, 0], nn[:, 1])
        ok = norm > 1e-14
        nn[ok] /= norm[ok, None]
        return nodes[ok], nn[ok]

    def with_zones(self, triangle_zone: np.ndarray, zone_names: Sequence[str]) -> "Mesh":
        return replace(self, triangle_zone=np.asarray(triangle_zone, dtype=np.int64),
                       zone_names=tuple(zone_names))


def _signed_double_area(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = nodes[triangles]
    return ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))


def majority_node_zone(n_nodes: int, triangles: np.ndarray, triangle_zone: np.ndarray,
                       n_zones: int) -> np.ndarray:
    """Zone of each node by majority of incident triangles, ties to the lower id."""
    counts = np.zeros((n_nodes, max(n_zones, 1)), dtype=np.int64)
    for k in range(3):
        np.add.at(counts, (triangles[:, k], triangle_zone), 1)
    return counts.argmax(axis=1)


def _build_pattern(n: int, triangles: np.ndarray, edges: np.ndarray) -> CsrPattern:
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    keys = rows * n + cols
    diag = np.arange(n, dtype=np.int64) * (n + 1)
    ukeys = np.unique(np.concatenate([keys, diag]))
    indices = (ukeys % n).astype(np.int64)
    counts = np.bincount(ukeys // n, minlength=n)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    tri_slots = np.searchsorted(ukeys, keys).reshape(-1, 9).astype(np.int64)
    a, b = edges[:, 0], edges[:, 1]
    ekeys = np.stack([a * n + a, a * n + b, b * n + a, b * n + b], axis=1)
    edge_slots = np.searchsorted(ukeys, ekeys).astype(np.int64)
    diag_slots = np.searchsorted(ukeys, diag).astype(np.int64)
    return CsrPattern(_freeze(indptr), _freeze(indices), _freeze(tri_slots),
                      _freeze(edge_slots), _freeze(diag_slots))


def topological_boundary(triangles: np.ndarray, n_nodes: int) -> np.ndarray:
    """Edges used by exactly one triangle, oriented counterclockwise."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
    keys = lo * n_nodes + hi
    _, inv, cnt = np.unique(keys, return_inverse=True, return_counts=True)
    once = cnt[inv] == 1
    out = e[once]
    order = np.argsort(np.minimum(out[:, 0], out[:, 1]) * n_nodes
                       + np.maximum(out[:, 0], out[:, 1]), kind="stable")
    return out[order]


def build_mesh(nodes, triangles, tagged_edges, tags, triangle_zone=None,
               zone_names: Sequence[str] = ("domain",)) -> Mesh:
    """Validate raw arrays and assemble a :class:`Mesh`.

    ``tagged_edges`` may be given in any orientation; clockwise triangles are
    flipped.  Every topological boundary edge must carry exactly one tag.
    """
    nodes = np.asarray(nodes, dtype=np.float64)[:, :2].copy()
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3).copy()
    n = nodes.shape[0]
    if triangles.size and (triangles.min() < 0 or triangles.max() >= n):
        raise DanglingNodeReference("triangle references a node that does not exist")
    used = np.zeros(n, dtype=bool)
    used[triangles.ravel()] = True
    if not used.all():
        raise OrphanNode(f"{int((~used).sum())} node(s) belong to no triangle, "
                         f"first index {int(np.flatnonzero(~used)[0])}")
    a2 = _signed_double_area(nodes, triangles)
    flip = a2 < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    a2 = np.abs(a2)
    scale = max(float(np.ptp(nodes[:, 0])), float(np.ptp(nodes[:, 1])), 1e-300) ** 2
    bad = a2 <= 1e-14 * scale
    if bad.any():
        raise NonPositiveArea(f"{int(bad.sum())} degenerate triangle(s), first index "
                              f"{int(np.flatnonzero(bad)[0])}")

    bnd = topological_boundary(triangles, n)
    tagged_edges = np.asarray(tagged_edges, dtype=np.int64).reshape(-1, 2)
    tags = np.asarray(tags, dtype=np.int64).reshape(-1)
    if tagged_edges.size and (tagged_edges.min() < 0 or tagged_edges.max() >= n):
        raise DanglingNodeReference("boundary edge references a node that does not exist")
    tkeys = np.minimum(tagged_edges[:, 0], tagged_edges[:, 1]) * n + np.maximum(
        tagged_edges[:, 0], tagged_edges[:, 1])
    tag_of: dict[int, int] = {}
    for k, t in zip(tkeys.tolist(), tags.tolist()):
        if tag_of.setdefault(k, t) != t:
            raise ConflictingBoundaryTag(f"edge {divmod(k, n)} carries two boundary tags")
    bkeys = np.minimum(bnd[:, 0], bnd[:, 1]) * n + np.maximum(bnd[:, 0], bnd[:, 1])
    edge_tags = np.empty(len(bnd), dtype=np.int64)
    for i, k in enumerate(bkeys.tolist()):
        t = tag_of.pop(k, None)
        if t is None:
            raise UntaggedBoundaryEdge(f"boundary edge {tuple(bnd[i])} has no bnd:* tag")
        edge_tags[i] = t
    if tag_of:
        k = next(iter(tag_of))
        raise MeshError(f"tagged edge {divmod(k, n)} is not on the domain boundary")
    # closed loops: every boundary node is entered as often as it is left
    if not np.array_equal(np.bincount(bnd[:, 0], minlength=n), np.bincount(bnd[:, 1], minlength=n)):
        raise MeshError("boundary edges do not form closed loops")

    if triangle_zone is None:
        triangle_zone = np.zeros(len(triangles), dtype=np.int64)
    return Mesh(nodes, triangles, bnd, edge_tags, np.asarray(triangle_zone, dtype=np.int64),
                tuple(zone_names))


# --------------------------------------------------------------------------- zones


@dataclass(frozen=True, eq=False)
class Zone:
    name: str
    nodes: np.ndarray
    triangles: np.ndarray
    area: float


@dataclass(frozen=True, eq=False)
class ZoneMap:
    """Disjoint named regions covering the mesh.

    ``urban`` plus every ``selected`` zone make up the city (the urban
    indicator); ``rural`` is the remainder.
    """

    zones: tuple[Zone, ...]
    triangle_zone: np.ndarray
    node_zone: np.ndarray
    rural: int
    urban: int
    selected: tuple[int, ...] = ()

    @property
    def names(self) -> list[str]:
        return [z.name for z in self.zones]

    def __getitem__(self, name: str) -> Zone:
        for z in self.zones:
            if z.name == name:
                return z
        raise KeyError(name)

    @property
    def city_ids(self) -> tuple[int, ...]:
        return (self.urban,) + tuple(self.selected)

    @cached_property
    def urban_nodes(self) -> np.ndarray:
        """Boolean nodal indicator of the city (urban or selected)."""
        return _freeze(np.isin(self.node_zone, self.city_ids))

    @cached_property
    def rural_nodes(self) -> np.ndarray:
        return _freeze(~self.urban_nodes)

    @cached_property
    def selected_nodes(self) -> np.ndarray:
        return _freeze(np.isin(self.node_zone, self.selected))

    @cached_property
    def urban_triangles(self) -> np.ndarray:
        return _freeze(np.isin(self.triangle_zone, self.city_ids))

    @cached_property
    def city(self) -> Zone:
        tris = np.flatnonzero(self.urban_triangles)
        area = float(sum(self.zones[i].area for i in self.city_ids))
        return Zone("city", np.flatnonzero(self.urban_nodes), tris, area)


def zone_map_from_assignment(mesh: Mesh, names: Sequence[str], triangle_zone: np.ndarray,
                             rural: int, urban: int, selected: Sequence[int]) -> ZoneMap:
    triangle_zone = np.asarray(triangle_zone, dtype=np.int64)
    node_zone = majority_node_zone(mesh.n_nodes, mesh.triangles, triangle_zone, len(names))
    zones = []
    for zid, name in enumerate(names):
        tris = np.flatnonzero(triangle_zone == zid)
        zones.append(Zone(name, _freeze(np.flatnonzero(node_zone == zid)), _freeze(tris),
                          float(mesh.areas[tris].sum())))
    return ZoneMap(tuple(zones), _freeze(triangle_zone), _freeze(node_zone), rural, urban,
                   tuple(selected))


def zone_map_from_mesh(mesh: Mesh) -> ZoneMap:
    """Zone roles from ``zone:`` physical groups stored on the mesh."""
    names = list(mesh.zone_names)
    if "urban" not in names:
        raise ZoneOutsideDomain("mesh has no zone:urban group")
    tz = np.asarray(mesh.triangle_zone)
    if "rural" not in names:
        names.append("rural")
    rural, urban = names.index("rural"), names.index("urban")
    selected = [i for i, nm in enumerate(names) if i not in (rural, urban)]
    return zone_map_from_assignment(mesh, names, tz, rural, urban, selected)


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd ray casting; ``polygon`` is an open vertex list."""
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    px, py = polygon[:, 0], polygon[:, 1]
    j = len(polygon) - 1
    for i in range(len(polygon)):
        xi, yi, xj, yj = px[i], py[i], px[j], py[j]
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= crosses & (x < xint)
        j = i
    return inside


def _closed_polygon(name: str, poly) -> np.ndarray:
    p = np.asarray(poly, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 4 or not np.allclose(p[0], p[-1]):
        raise OpenPolygon(f"polygon {name!r} must list at least 3 vertices and repeat the "
                          f"first vertex at the end")
    return p[:-1]


def build_zone_map(mesh: Mesh, zone_spec: Sequence[tuple[str, Sequence]]) -> ZoneMap:
    """Assign triangles to zones by centroid containment.

    ``zone_spec`` lists ``(name, closed_polygon)`` pairs; exactly one is named
    ``urban``, the rest are selected zones nested in it.  Zone ids: rural 0,
    urban 1, selected zones 2.. in the given order.
    """
    polys = {name: _closed_polygon(name, poly) for name, poly in zone_spec}
    if "urban" not in polys:
        raise ZoneOutsideDomain("zone_spec has no 'urban' polygon")
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    tol = 1e-9 * max(float(np.max(hi - lo)), 1.0)
    for name, p in polys.items():
        if np.any(p < lo - tol) or np.any(p > hi + tol):
            raise ZoneOutsideDomain(f"polygon {name!r} extends outside the mesh")
    urban_poly = polys["urban"]
    sel_names = [nm for nm, _ in zone_spec if nm != "urban"]
    for nm in sel_names:
        if not points_in_polygon(polys[nm], urban_poly).all():
            raise ZoneOutsideDomain(f"selected zone {nm!r} is not nested in the urban polygon")
    names = ["rural", "urban"] + sel_names
    c = mesh.centroids
    tz = np.zeros(mesh.n_triangles, dtype=np.int64)
    tz[points_in_polygon(c, urban_poly)] = 1
    for k, nm in enumerate(sel_names):
        mask = points_in_polygon(c, polys[nm]) & (tz == 1)
        if not mask.any():
            raise ZoneOutsideDomain(f"zone {nm!r} contains no triangle centroid")
        tz[mask] = 2 + k
    if not np.any(tz == 1) and not sel_names:
        raise ZoneOutsideDomain("urban polygon contains no triangle centroid")
    return zone_map_from_assignment(mesh, names, tz, 0, 1, range(2, 2 + len(sel_names)))


# --------------------------------------------------------------------------- synthetic city


@dataclass(frozen=True)
class CityGeometry:
    width: float = 40.0
    height: float = 30.0
    city_radius: float = 11.0
    center: tuple[float, float] | None = None
    obstacles: tuple[tuple[float, float, float], ...] = ()
    selected: tuple[tuple[str, float, float, float], ...] = ()
    h: float = 1.0
    side_tags: dict = field(default_factory=lambda: {
        "left": "inlet", "top": "inlet", "right": "outlet", "bottom": "outlet"})

    @property
    def city_center(self) -> tuple[float, float]:
        if self.center is None:
            return (0.5 * self.width, 0.5 * self.height)
        return tuple(self.center)


def circle_polygon(cx: float, cy: float, r: float, n: int = 64) -> np.ndarray:
    """Closed polygon (first vertex repeated) approximating a circle."""
    t = np.linspace(0.0, 2.0 * np.pi, n + 1)
    p = np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])
    p[-1] = p[0]
    return p


def _even_points(a: float, b: float, h: float) -> np.ndarray:
    n = max(1, int(math.ceil((b - a) / h - 1e-9)))
    return np.linspace(a, b, n + 1)


def synthetic_city_mesh(geom: CityGeometry) -> tuple[Mesh, ZoneMap]:
    """Delaunay mesh of a rectangle with disc holes and a circular city."""
    from scipy.spatial import Delaunay

    W, H, h = float(geom.width), float(geom.height), float(geom.h)
    if not (h > 0 and W > 0 and H > 0):
        raise DegenerateGeometry("rectangle size and edge length must be positive")
    for (x, y, r) in geom.obstacles:
        if r <= 0 or x - r <= 0.5 * h or x + r >= W - 0.5 * h or y - r <= 0.5 * h or y + r >= H - 0.5 * h:
            raise DegenerateGeometry(f"obstacle ({x}, {y}, {r}) is not strictly inside the rectangle")
        if r < 0.5 * h:
            raise DegenerateGeometry(f"obstacle radius {r} is below half the edge length")
    for i, a in enumerate(geom.obstacles):
        for b in geom.obstacles[i + 1:]:
            if math.hypot(a[0] - b[0], a[1] - b[1]) <= a[2] + b[2] + h:
                raise DegenerateGeometry("obstacles overlap or are closer than one edge length")

    xs, ys = _even_points(0.0, W, h), _even_points(0.0, H, h)
    pts = [np.column_stack([xs, np.zeros_like(xs)]), np.column_stack([xs, np.full_like(xs, H)]),
           np.column_stack([np.zeros(len(ys) - 2), ys[1:-1]]),
           np.column_stack([np.full(len(ys) - 2, W), ys[1:-1]])]
    for (x, y, r) in geom.obstacles:
        m = max(8, int(math.ceil(2 * math.pi * r / h)))
        t = 2 * math.pi * np.arange(m) / m
        pts.append(np.column_stack([x + r * np.cos(t), y + r * np.sin(t)]))
    dy = h * math.sqrt(3) / 2
    rows = []
    for j in range(1, int(H / dy) + 1):
        yy = j * dy
        off = 0.5 * h if j % 2 else 0.0
        xx = np.arange(off, W, h)
        rows.append(np.column_stack([xx, np.full_like(xx, yy)]))
    lat = np.concatenate(rows)
    keep = (lat[:, 0] > 0.5 * h) & (lat[:, 0] < W - 0.5 * h) & (lat[:, 1] > 0.5 * h) & (lat[:, 1] < H - 0.5 * h)
    for (x, y, r) in geom.obstacles:
        keep &= np.hypot(lat[:, 0] - x, lat[:, 1] - y) > r + 0.6 * h
    pts.append(lat[keep])
    P = np.concatenate(pts)

    tri = Delaunay(P).simplices.astype(np.int64)
    cen = P[tri].mean(axis=1)
    inside = np.zeros(len(tri), dtype=bool)
    for (x, y, r) in geom.obstacles:
        inside |= np.hypot(cen[:, 0] - x, cen[:, 1] - y) < r
    tri = tri[~inside]
    a2 = _signed_double_area(P, tri)
    tri = tri[np.abs(a2) > 1e-10 * h * h]
    used = np.unique(tri)
    if len(used) != len(P):
        remap = -np.ones(len(P), dtype=np.int64)
        remap[used] = np.arange(len(used))
        P, tri = P[used], remap[tri]

    bnd = topological_boundary(tri, len(P))
    mid = 0.5 * (P[bnd[:, 0]] + P[bnd[:, 1]])
    eps = 1e-9 * max(W, H)
    tags = np.full(len(bnd), TAG_CODE["wall"], dtype=np.int64)
    side = geom.side_tags
    on_left, on_right = np.abs(mid[:, 0]) < eps, np.abs(mid[:, 0] - W) < eps
    on_bottom, on_top = np.abs(mid[:, 1]) < eps, np.abs(mid[:, 1] - H) < eps
    for mask, name in ((on_left, "left"), (on_right, "right"), (on_bottom, "bottom"), (on_top, "top")):
        tags[mask] = TAG_CODE[side.get(name, "wall")]
    on_rect = on_left | on_right | on_bottom | on_top
    n_wall_expected = sum(max(8, int(math.ceil(2 * math.pi * r / h))) for (_, _, r) in geom.obstacles)
    if int((~on_rect).sum()) != n_wall_expected:
        raise DegenerateGeometry("obstacle boundaries were not recovered by the triangulation")

    mesh = build_mesh(P, tri, bnd, tags)
    cx, cy = geom.city_center
    spec = [("urban", circle_polygon(cx, cy, geom.city_radius))]
    for (name, x, y, r) in geom.selected:
        spec.append((name, circle_polygon(x, y, r, 32)))
    zones = build_zone_map(mesh, spec)
    order = np.argsort(zones.triangle_zone, kind="stable")
    mesh = build_mesh(mesh.nodes, mesh.triangles[order], mesh.boundary_edges, mesh.edge_tags,
                      zones.triangle_zone[order], zones.names)
    return mesh, zone_map_from_mesh(mesh)


def rectangle_mesh(width: float = 1.0, height: float = 1.0, nx: int = 8, ny: int | None = None,
                   side_tags: dict | None = None, origin=(0.0, 0.0)) -> Mesh:
    """Structured triangulation of a rectangle, each cell split along alternating diagonals.

    ``side_tags`` maps left/right/bottom/top to boundary tags (default: wall).
    """
    ny = nx if ny is None else ny
    side_tags = side_tags or {}
    xs = origin[0] + np.linspace(0.0, width, nx + 1)
    ys = origin[1] + np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx[j, i], idx[j, i + 1], idx[j + 1, i + 1], idx[j + 1, i]
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    edges, tags = [], []
    for name, row in (("bottom", idx[0, :]), ("top", idx[-1, :]), ("left", idx[:, 0]), ("right", idx[:, -1])):
        code = TAG_CODE[side_tags.get(name, "wall")]
        for a, b in zip(row[:-1], row[1:]):
            edges.append((a, b))
            tags.append(code)
    return build_mesh(nodes, np.array(tris), np.array(edges), np.array(tags))


# --------------------------------------------------------------------------- MSH I/O

_ELEM_NODES = {1: 2, 2: 3, 15: 1}


def _sections(text: str) -> dict[str, list[str]]:
    lines = text.splitlines()
    out: dict[str, list[str]] = {}
    i = 0
    while i < len(lines):
        s = lines[i].strip()
        if s.startswith("$") and not s.startswith("$End"):
            name = s[1:]
            j = i + 1
            while j < len(lines) and lines[j].strip() != f"$End{name}":
                j += 1
            if j == len(lines):
                raise MalformedHeader(f"section ${name} is not terminated")
            out.setdefault(name, lines[i + 1:j])
            i = j + 1
        else:
            i += 1
    return out


def _ints(line: str) -> list[int]:
    try:
        return [int(t) for t in line.split()]
    except ValueError as exc:
        raise MalformedHeader(f"expected integers, got {line!r}") from exc


def _physical_kind(name: str) -> tuple[str, str]:
    if name.startswith("bnd:"):
        tag = name[4:]
        if tag not in TAG_CODE:
            raise UnknownPhysicalGroup(f"unknown boundary group {name!r}")
        return "bnd", tag
    if name.startswith("zone:") and len(name) > 5:
        return "zone", name[5:]
    raise UnknownPhysicalGroup(f"physical group {name!r} does not follow bnd:*/zone:* naming")


def _physical_names(sec: dict[str, list[str]]) -> dict[tuple[int, int], str]:
    names: dict[tuple[int, int], str] = {}
    if "PhysicalNames" not in sec:
        return names
    body = sec["PhysicalNames"]
    if not body:
        raise MalformedHeader("empty $PhysicalNames")
    n = _ints(body[0])[0]
    if len(body) - 1 != n:
        raise MalformedHeader(f"$PhysicalNames declares {n} entries, found {len(body) - 1}")
    for line in body[1:]:
        m = re.match(r'\s*(\d+)\s+(\d+)\s+"(.*)"\s*$', line)
        if not m:
            raise MalformedHeader(f"bad physical name line {line!r}")
        names[(int(m.group(1)), int(m.group(2)))] = m.group(3)
    return names


def parse_msh(content: bytes | str) -> Mesh:
    """Parse an ASCII Gmsh MSH 2.2 or 4.1 file."""
    if isinstance(content, bytes):
        try:
            content = content.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise UnsupportedVersion("binary MSH files are not supported") from exc
    sec = _sections(content)
    if "MeshFormat" not in sec or not sec["MeshFormat"]:
        raise MalformedHeader("missing $MeshFormat")
    head = sec["MeshFormat"][0].split()
    if len(head) < 3:
        raise MalformedHeader(f"bad $MeshFormat line {sec['MeshFormat'][0]!r}")
    version, ftype = head[0], head[1]
    if ftype != "0":
        raise UnsupportedVersion("binary MSH files are not supported")
    for required in ("Nodes", "Elements"):
        if required not in sec:
            raise MalformedHeader(f"missing ${required}")
    names = _physical_names(sec)
    if version.startswith("2.2"):
        return _parse_v2(sec, names)
    if version.startswith("4.1"):
        return _parse_v4(sec, names)
    raise UnsupportedVersion(f"MSH version {version} (supported: 2.2, 4.1)")


def _assemble_parsed(tags_nodes, coords, lines, line_phys, tris, tri_phys, names) -> Mesh:
    tag_to_idx = {t: i for i, t in enumerate(tags_nodes)}
    if len(tag_to_idx) != len(tags_nodes):
        raise MalformedHeader("duplicate node tags")

    def remap(conn):
        try:
            return np.array([[tag_to_idx[t] for t in row] for row in conn], dtype=np.int64).reshape(-1, conn_width(conn))
        except KeyError as exc:
            raise DanglingNodeReference(f"element references undefined node {exc.args[0]}") from None

    def conn_width(conn):
        return len(conn[0]) if len(conn) else 0

    tri_idx = remap(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    line_idx = remap(lines) if lines else np.zeros((0, 2), dtype=np.int64)

    # zone ids follow the declaration order of the zone:* groups
    zone_names: list[str] = []
    zone_of_phys: dict[int, int] = {}
    for (dim, ph), nm in sorted(names.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        kind, zname = _physical_kind(nm)
        if kind == "zone":
            if dim != 2:
                raise UnknownPhysicalGroup(f"zone group {nm!r} must be two-dimensional")
            if zname not in zone_names:
                zone_names.append(zname)
            zone_of_phys[ph] = zone_names.index(zname)
    tri_zone = np.zeros(len(tris), dtype=np.int64)
    for k, ph in enumerate(tri_phys):
        if ph not in zone_of_phys:
            if ph != 0 and (2, ph) in names:
                raise UnknownPhysicalGroup(f"triangles tagged with boundary group {names[(2, ph)]!r}")
            if ph != 0:
                raise UnknownPhysicalGroup(f"triangle physical tag {ph} has no name")
            if "domain" not in zone_names:
                zone_names.append("domain")
            zone_of_phys[0] = zone_names.index("domain")
        tri_zone[k] = zone_of_phys[ph]
    if not zone_names:
        zone_names = ["domain"]

    bnd_edges, bnd_tags = [], []
    for k, ph in enumerate(line_phys):
        nm = names.get((1, ph))
        if nm is None:
            raise UnknownPhysicalGroup(f"line physical tag {ph} has no name")
        kind, tag = _physical_kind(nm)
        if kind == "bnd":
            bnd_edges.append(line_idx[k])
            bnd_tags.append(TAG_CODE[tag])
    for (dim, _), nm in names.items():
        _physical_kind(nm)
    return build_mesh(coords, tri_idx, np.array(bnd_edges, dtype=np.int64).reshape(-1, 2),
                      np.array(bnd_tags, dtype=np.int64), tri_zone, zone_names)


def _parse_v2(sec, names) -> Mesh:
    body = sec["Nodes"]
    if not body:
        raise MalformedHeader("empty $Nodes")
    n = _ints(body[0])[0]
    if len(body) - 1 != n:
        raise MalformedHeader(f"$Nodes declares {n} nodes, found {len(body) - 1}")
    tags_nodes, coords = [], np.empty((n, 2))
    for i, line in enumerate(body[1:]):
        t = line.split()
        if len(t) < 4:
            raise MalformedHeader(f"bad node line {line!r}")
        tags_nodes.append(int(t[0]))
        coords[i] = float(t[1]), float(t[2])
    body = sec["Elements"]
    if not body:
        raise MalformedHeader("empty $Elements")
    ne = _ints(body[0])[0]
    if len(body) - 1 != ne:
        raise MalformedHeader(f"$Elements declares {ne} elements, found {len(body) - 1}")
    lines, line_phys, tris, tri_phys = [], [], [], []
    for line in body[1:]:
        v = _ints(line)
        if len(v) < 3:
            raise MalformedHeader(f"bad element line {line!r}")
        etype, ntags = v[1], v[2]
        if etype not in _ELEM_NODES:
            raise UnsupportedElement(f"element type {etype} (only lines and triangles)")
        conn = v[3 + ntags:]
        if len(conn) != _ELEM_NODES[etype]:
            raise MalformedHeader(f"bad element line {line!r}")
        phys = v[3] if ntags > 0 else 0
        if etype == 1:
            lines.append(conn)
            line_phys.append(phys)
        elif etype == 2:
            tris.append(conn)
            tri_phys.append(phys)
    return _assemble_parsed(tags_nodes, coords, lines, line_phys, tris, tri_phys, names)


def _parse_v4(sec, names) -> Mesh:
    ent_phys: dict[tuple[int, int], list[int]] = {}
    if "Entities" in sec:
        body = sec["Entities"]
        counts = _ints(body[0])
        row = 1
        for dim in range(4):
            for _ in range(counts[dim] if dim < len(counts) else 0):
                t = body[row].split()
                row += 1
                tag = int(t[0])
                k = 4 if dim == 0 else 7
                nphys = int(t[k])
                ent_phys[(dim, tag)] = [int(x) for x in t[k + 1:k + 1 + nphys]]
    body = sec["Nodes"]
    if not body:
        raise MalformedHeader("empty $Nodes")
    nblocks, n = _ints(body[0])[:2]
    tags_nodes: list[int] = []
    coords = []
    row = 1
    try:
        for _ in range(nblocks):
            _, _, param, nb = _ints(body[row])
            row += 1
            tags_nodes.extend(int(body[row + i]) for i in range(nb))
            row += nb
            for i in range(nb):
                t = body[row + i].split()
                coords.append((float(t[0]), float(t[1])))
            row += nb
    except (IndexError, ValueError) as exc:
        raise MalformedHeader("truncated $Nodes block") from exc
    if len(tags_nodes) != n or row != len(body):
        raise MalformedHeader(f"$Nodes declares {n} nodes, found {len(tags_nodes)}")
    body = sec["Elements"]
    if not body:
        raise MalformedHeader("empty $Elements")
    nblocks, ne = _ints(body[0])[:2]
    lines, line_phys, tris, tri_phys = [], [], [], []
    row, seen = 1, 0
    try:
        for _ in range(nblocks):
            dim, etag, etype, nb = _ints(body[row])
            row += 1
            if etype not in _ELEM_NODES:
                raise UnsupportedElement(f"element type {etype} (only lines and triangles)")
            phys = ent_phys.get((dim, etag), [])
            if len(phys) > 1:
                raise UnknownPhysicalGroup(f"entity ({dim}, {etag}) belongs to several physical groups")
            ph = phys[0] if phys else 0
            for i in range(nb):
                v = _ints(body[row + i])
                conn = v[1:]
                if len(conn) != _ELEM_NODES[etype]:
                    raise MalformedHeader(f"bad element line {body[row + i]!r}")
                if etype == 1:
                    lines.append(conn)
                    line_phys.append(ph)
                elif etype == 2:
                    tris.append(conn)
                    tri_phys.append(ph)
            row += nb
            seen += nb
    except IndexError as exc:
        raise MalformedHeader("truncated $Elements block") from exc
    if seen != ne or row != len(body):
        raise MalformedHeader(f"$Elements declares {ne} elements, found {seen}")
    return _assemble_parsed(tags_nodes, np.array(coords).reshape(-1, 2), lines, line_phys,
                            tris, tri_phys, names)


def read_msh(path: str | Path) -> Mesh:
    return parse_msh(Path(path).read_bytes())


def _groups(mesh: Mesh):
    bnd_groups = [t for t in BOUNDARY_TAGS if np.any(mesh.edge_tags == TAG_CODE[t])]
    phys = {}
    k = 1
    for t in bnd_groups:
        phys[("bnd", t)] = k
        k += 1
    for z in mesh.zone_names:
        phys[("zone", z)] = k
        k += 1
    return bnd_groups, phys


def write_msh(mesh: Mesh, version: str = "2.2") -> str:
    """Serialize to ASCII MSH 2.2 or 4.1 (1-based node tags)."""
    buf = io.StringIO()
    w = buf.write
    bnd_groups, phys = _groups(mesh)
    w(f"$MeshFormat\n{version} 0 8\n$EndMeshFormat\n")
    w(f"$PhysicalNames\n{len(phys)}\n")
    for (kind, nm), tag in phys.items():
        w(f'{1 if kind == "bnd" else 2} {tag} "{kind}:{nm}"\n')
    w("$EndPhysicalNames\n")
    n, nt, ne = mesh.n_nodes, mesh.n_triangles, len(mesh.boundary_edges)
    if version == "2.2":
        w(f"$Nodes\n{n}\n")
        for i, (x, y) in enumerate(mesh.nodes.tolist()):
            w(f"{i + 1} {x!r} {y!r} 0\n")
        w(f"$EndNodes\n$Elements\n{ne + nt}\n")
        eid = 1
        for (a, b), t in zip(mesh.boundary_edges.tolist(), mesh.edge_tags.tolist()):
            ph = phys[("bnd", BOUNDARY_TAGS[t])]
            w(f"{eid} 1 2 {ph} {ph} {a + 1} {b + 1}\n")
            eid += 1
        for (a, b, c), z in zip(mesh.triangles.tolist(), mesh.triangle_zone.tolist()):
            ph = phys[("zone", mesh.zone_names[z])]
            w(f"{eid} 2 2 {ph} {ph} {a + 1} {b + 1} {c + 1}\n")
            eid += 1
        w("$EndElements\n")
    elif version == "4.1":
        # one curve entity per boundary tag, one surface entity per zone
        lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
        box = f"{lo[0]!r} {lo[1]!r} 0 {hi[0]!r} {hi[1]!r} 0"
        w(f"$Entities\n0 {len(bnd_groups)} {len(mesh.zone_names)} 0\n")
        for i, t in enumerate(bnd_groups):
            w(f"{i + 1} {box} 1 {phys[('bnd', t)]} 0\n")
        for i, z in enumerate(mesh.zone_names):
            w(f"{i + 1} {box} 1 {phys[('zone', z)]} 0\n")
        w("$EndEntities\n")
        w(f"$Nodes\n1 {n} 1 {n}\n2 1 0 {n}\n")
        for i in range(n):
            w(f"{i + 1}\n")
        for x, y in mesh.nodes.tolist():
            w(f"{x!r} {y!r} 0\n")
        w("$EndNodes\n")
        blocks = []
        for i, t in enumerate(bnd_groups):
            idx = np.flatnonzero(mesh.edge_tags == TAG_CODE[t])
            blocks.append((1, i + 1, 1, mesh.boundary_edges[idx]))
        # contiguous runs keep the triangle order intact on re-read
        tz = mesh.triangle_zone
        cuts = np.flatnonzero(np.diff(tz)) + 1
        for lo_, hi_ in zip(np.concatenate([[0], cuts]), np.concatenate([cuts, [len(tz)]])):
            if hi_ > lo_:
                blocks.append((2, int(tz[lo_]) + 1, 2, mesh.triangles[lo_:hi_]))
        w(f"$Elements\n{len(blocks)} {ne + nt} 1 {ne + nt}\n")
        eid = 1
        for dim, tag, etype, conn in blocks:
            w(f"{dim} {tag} {etype} {len(conn)}\n")
            for row in conn.tolist():
                w(f"{eid} " + " ".join(str(v + 1) for v in row) + "\n")
                eid += 1
        w("$EndElements\n")
    else:
        raise UnsupportedVersion(f"cannot write MSH version {version}")
    return buf.getvalue()


def turning_angle(mesh: Mesh, edge_idx: Iterable[int]) -> float:
    """Total signed turning angle along the closed loop(s) formed by ``edge_idx``."""
    idx = np.asarray(list(edge_idx))
    e = mesh.boundary_edges[idx]
    nxt = {a: k for k, (a, _) in enumerate(e.tolist())}
    total = 0.0
    for k, (a, b) in enumerate(e.tolist()):
        k2 = nxt[b]
        d1 = mesh.nodes[b] - mesh.nodes[a]
        d2 = mesh.nodes[e[k2, 1]] - mesh.nodes[b]
        total += math.atan2(d1[0] * d2[1] - d1[1] * d2[0], d1 @ d2)
    return total
