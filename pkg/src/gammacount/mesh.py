"""Planar triangulations for the SPDE field.

``build_mesh`` triangulates the observation sites plus a ring of synthetic
vertices on an inflated convex hull, then refines by Delaunay insertion
(circumcentres of oversized or skinny triangles, midpoints of encroached
boundary segments) until every edge fits the local length budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, Delaunay, cKDTree

EXTERIOR_EDGE_FACTOR = 2.0
MIN_ANGLE_DEG = 21.0
MAX_ROUNDS = 60


class MeshError(ValueError):
    pass


class PointOutsideMeshError(MeshError):
    def __init__(self, index: int, point):
        self.index = index
        super().__init__(f"location {index} at {tuple(np.round(point, 6))} lies outside the mesh")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_extension: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must be an (m, 2) array")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must be a (k, 3) array")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle references a missing vertex")
        # orient counter-clockwise
        area2 = _signed_area2(v, t)
        flip = area2 < 0
        if np.any(flip):
            t = t.copy()
            t[flip, 1], t[flip, 2] = t[flip, 2].copy(), t[flip, 1].copy()
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        return 0.5 * _signed_area2(self.vertices, self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        if "edges" not in self._cache:
            t = self.triangles
            e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            e.sort(axis=1)
            self._cache["edges"] = np.unique(e, axis=0)
        return self._cache["edges"]

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def angles(self) -> np.ndarray:
        """Interior angles in degrees, shape (k, 3)."""
        return _triangle_angles(self.vertices, self.triangles)

    def min_angle(self) -> float:
        return float(self.angles().min())

    def boundary_edges(self) -> np.ndarray:
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(e, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return e[counts[inv.ravel()] == 1]

    def area(self) -> float:
        return float(self.areas().sum())

    def check(self) -> None:
        a = self.areas()
        bad = np.flatnonzero(a <= 1e-14 * max(1.0, np.abs(a).max(initial=0.0)))
        if bad.size:
            raise MeshError(f"triangle {bad[0]} is degenerate (area {a[bad[0]]:.3g})")

    # -- point location ----------------------------------------------------

    def _locator(self):
        if "tree" not in self._cache:
            cent = self.vertices[self.triangles].mean(axis=1)
            self._cache["tree"] = cKDTree(cent)
            v = self.vertices[self.triangles]
            # affine map to barycentric coordinates per triangle
            t = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
            self._cache["tinv"] = np.linalg.inv(t)
            self._cache["origin"] = v[:, 0]
        return self._cache["tree"], self._cache["tinv"], self._cache["origin"]

    def barycentric(self, points, tri_idx) -> np.ndarray:
        _, tinv, origin = self._locator()
        rel = np.asarray(points, dtype=float) - origin[tri_idx]
        l12 = np.einsum("kij,kj->ki", tinv[tri_idx], rel)
        return np.column_stack([1.0 - l12.sum(axis=1), l12])

    def locate(self, points, tol: float = 1e-10, strict: bool = True):
        """Containing triangle and barycentric weights for each point.

        Candidates are the triangles with the nearest centroids; points not
        resolved there fall back to an exhaustive barycentric test. Points
        outside the mesh get index -1, or raise if ``strict``.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tree, _, _ = self._locator()
        n = len(points)
        tri = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        k = min(12, self.n_triangles)
        _, cand = tree.query(points, k=k)
        cand = cand.reshape(n, k)
        best = np.full(n, -np.inf)
        for j in range(k):
            lam = self.barycentric(points, cand[:, j])
            score = lam.min(axis=1)
            better = score > best
            best[better] = score[better]
            tri[better] = cand[better, j]
            bary[better] = lam[better]
        unresolved = np.flatnonzero(best < -tol)
        for i in unresolved:
            lam = self.barycentric(np.repeat(points[i : i + 1], self.n_triangles, axis=0), np.arange(self.n_triangles))
            score = lam.min(axis=1)
            j = int(np.argmax(score))
            best[i] = score[j]
            tri[i] = j
            bary[i] = lam[j]
        outside = best < -tol
        if np.any(outside):
            if strict:
                i = int(np.flatnonzero(outside)[0])
                raise PointOutsideMeshError(i, points[i])
            tri[outside] = -1
            bary[outside] = np.nan
        inside = ~outside
        b = np.clip(bary[inside], 0.0, None)
        bary[inside] = b / b.sum(axis=1, keepdims=True)
        return tri, bary

    def contains(self, points, tol: float = 1e-10) -> np.ndarray:
        tri, _ = self.locate(points, tol=tol, strict=False)
        return tri >= 0

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"# extension {self.boundary_extension!r}"]
        lines += [f"v {x!r} {y!r}" for x, y in self.vertices.tolist()]
        lines += [f"t {i} {j} {k}" for i, j, k in self.triangles.tolist()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Mesh":
        verts, tris, ext = [], [], 0.0
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "#":
                if len(parts) == 3 and parts[1] == "extension":
                    ext = float(parts[2])
                continue
            try:
                if parts[0] == "v" and len(parts) == 3:
                    verts.append((float(parts[1]), float(parts[2])))
                elif parts[0] == "t" and len(parts) == 4:
                    tris.append((int(parts[1]), int(parts[2]), int(parts[3])))
                else:
                    raise ValueError
            except ValueError:
                raise MeshError(f"line {lineno}: cannot parse {raw!r}") from None
        mesh = cls(np.array(verts, dtype=float).reshape(-1, 2), np.array(tris, dtype=np.int64).reshape(-1, 3), ext)
        mesh.check()
        return mesh

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Mesh":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def stats(self) -> dict:
        lengths = self.edge_lengths()
        return {
            "vertices": self.n_vertices,
            "triangles": self.n_triangles,
            "min_angle_deg": self.min_angle(),
            "max_edge": float(lengths.max()),
            "min_edge": float(lengths.min()),
            "area": self.area(),
        }


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def _signed_area2(v, t):
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _triangle_angles(v, t):
    p = v[t]
    out = np.empty((len(t), 3))
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        w = p[:, (i + 2) % 3] - p[:, i]
        cosang = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        out[:, i] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def circumcenters(v, t):
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    d = 2.0 * (a[:, 0] * (b[:, 1] - c[:, 1]) + b[:, 0] * (c[:, 1] - a[:, 1]) + c[:, 0] * (a[:, 1] - b[:, 1]))
    sa, sb, sc = (a**2).sum(1), (b**2).sum(1), (c**2).sum(1)
    ux = (sa * (b[:, 1] - c[:, 1]) + sb * (c[:, 1] - a[:, 1]) + sc * (a[:, 1] - b[:, 1])) / d
    uy = (sa * (c[:, 0] - b[:, 0]) + sb * (a[:, 0] - c[:, 0]) + sc * (b[:, 0] - a[:, 0])) / d
    return np.column_stack([ux, uy])


def _thin(points, cutoff, first=()):
    """Greedy thinning: keep a point only if no kept point lies within ``cutoff``.

    Indices in ``first`` are always kept and visited before the rest.
    """
    if cutoff <= 0 or len(points) < 2:
        return points
    tree = cKDTree(points)
    first = [int(i) for i in first]
    order = first + sorted(set(range(len(points))) - set(first))
    keep = np.ones(len(points), dtype=bool)
    done = np.zeros(len(points), dtype=bool)
    done[first] = True
    for i in order:
        done[i] = True
        if not keep[i]:
            continue
        for j in tree.query_ball_point(points[i], cutoff):
            if not done[j]:
                keep[j] = False
    return points[keep]


def _ring(hull_pts, offset, spacing):
    """Closed convex polygon at distance ~``offset`` outside ``hull_pts``, resampled."""
    if offset > 0:
        ang = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
        disk = offset * np.column_stack([np.cos(ang), np.sin(ang)]) / np.cos(np.pi / 16)
        cloud = (hull_pts[:, None, :] + disk[None, :, :]).reshape(-1, 2)
    else:
        cloud = hull_pts
    hull = ConvexHull(cloud)
    corners = cloud[hull.vertices]
    out = []
    for i in range(len(corners)):
        p, q = corners[i], corners[(i + 1) % len(corners)]
        k = max(1, int(math.ceil(np.linalg.norm(q - p) / spacing)))
        s = np.arange(k)[:, None] / k
        out.append(p + s * (q - p))
    return np.vstack(out)


class _HullTest:
    """Point-in-convex-polygon test against the data hull."""

    def __init__(self, pts):
        self.eq = ConvexHull(pts).equations

    def inside(self, q, tol=1e-12):
        return np.all(q @ self.eq[:, :2].T + self.eq[:, 2] <= tol, axis=1)


def build_mesh(
    locations,
    max_edge: float,
    extension: float = 0.0,
    cutoff: float | None = None,
    exterior_factor: float = EXTERIOR_EDGE_FACTOR,
    min_angle: float = MIN_ANGLE_DEG,
) -> Mesh:
    """Triangulate observation sites plus an inflated-hull ring.

    Parameters
    ----------
    locations : (n, 2) array
        Observation coordinates.
    max_edge : float
        Longest allowed edge inside the data hull; outside it the budget is
        ``exterior_factor * max_edge``.
    extension : float
        Ring offset as a fraction of the larger side of the data bounding box.
    cutoff : float, optional
        Sites closer than this to an already kept site are not made vertices
        (they are still inside the mesh). Defaults to ``max_edge / 5``.
    min_angle : float
        Triangles with a smaller angle (degrees) are refined.
    """
    pts = np.asarray(locations, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise MeshError("need at least three 2-D locations")
    if not np.all(np.isfinite(pts)):
        raise MeshError("non-finite coordinates")
    if not max_edge > 0:
        raise MeshError("max_edge must be positive")
    if extension < 0:
        raise MeshError("extension must be non-negative")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise MeshError("locations are collinear")

    cutoff = max_edge / 5.0 if cutoff is None else cutoff
    uniq = np.unique(pts, axis=0)
    hull_ids = ConvexHull(uniq).vertices
    # hull sites stay vertices so that every site remains inside the mesh
    sites = _thin(uniq, cutoff, first=hull_ids)
    span = float(np.max(uniq.max(axis=0) - uniq.min(axis=0)))
    hull_test = _HullTest(uniq)
    hull_pts = uniq[hull_ids]

    if extension > 0:
        ring = _ring(hull_pts, extension * span, exterior_factor * max_edge)
        verts = np.vstack([sites, ring])
    else:
        verts = sites
    verts = _refine(verts, max_edge, exterior_factor * max_edge, hull_test, min_angle)
    tri = _delaunay(verts)
    mesh = Mesh(verts, tri, float(extension))
    mesh.check()
    return mesh


def _delaunay(verts):
    """Delaunay simplices without the flat slivers qhull emits along collinear hull points."""
    t = Delaunay(verts).simplices
    a2 = np.abs(_signed_area2(verts, t))
    scale = np.max(np.ptp(verts, axis=0)) ** 2
    t = t[a2 > 1e-12 * scale]
    if len(np.unique(t)) != len(verts):
        raise MeshError("triangulation dropped a vertex (degenerate input)")
    return t


def _segments(t):
    e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return key[counts[inv.ravel()] == 1]


def _refine(verts, h_in, h_out, hull_test, min_angle):
    sin_min = math.sin(math.radians(min_angle))
    domain = _HullTest(verts)
    for _ in range(MAX_ROUNDS):
        t = _delaunay(verts)
        p = verts[t]
        cent = p.mean(axis=1)
        budget = np.where(hull_test.inside(cent), h_in, h_out)
        elen = np.stack([np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1) for i in range(3)], axis=1)
        area = 0.5 * np.abs(_signed_area2(verts, t))
        circ_r = elen.prod(axis=1) / (4.0 * area)
        too_long = elen.max(axis=1) > budget
        # smallest angle = asin(shortest edge / (2R))
        skinny = elen.min(axis=1) < 2.0 * circ_r * sin_min * (1.0 - 1e-9)
        bad = np.flatnonzero(too_long | skinny)

        # boundary segments: hull edges of the current triangulation
        seg = _segments(t)
        seg_mid = verts[seg].mean(axis=1)
        seg_r = 0.5 * np.linalg.norm(verts[seg[:, 0]] - verts[seg[:, 1]], axis=1)
        seg_budget = np.where(hull_test.inside(seg_mid, tol=1e-9), h_in, h_out)
        split = set(np.flatnonzero(2.0 * seg_r > seg_budget).tolist())
        # encroachment by existing vertices (opposite vertex inside diametral circle)
        tree_v = cKDTree(verts)
        for s, hits in enumerate(tree_v.query_ball_point(seg_mid, seg_r * (1.0 - 1e-9))):
            if any(h not in seg[s] for h in hits):
                split.add(s)

        if not bad.size and not split:
            return verts

        new_pts = []
        if bad.size:
            cc = circumcenters(verts, t[bad])
            # order by severity so the worst triangles get their points first
            order = np.argsort(-(circ_r[bad] / np.maximum(elen[bad].min(axis=1), 1e-300)))
            cc, bad = cc[order], bad[order]
            seg_tree = cKDTree(seg_mid)
            inside_domain = domain.inside(cc, tol=-1e-12)
            for c, ok, b in zip(cc, inside_domain, bad):
                hits = seg_tree.query_ball_point(c, float(seg_r.max()))
                enc = [s for s in hits if np.linalg.norm(c - seg_mid[s]) < seg_r[s]]
                if enc:
                    split.update(enc)
                elif ok:
                    new_pts.append((c, circ_r[b]))
                else:
                    # circumcentre outside but no segment encroached: split nearest segment
                    split.add(int(seg_tree.query(c)[1]))
        acc_pts = [seg_mid[s] for s in sorted(split)]
        if new_pts:
            cand = np.array([c for c, _ in new_pts])
            radius = np.array([r for _, r in new_pts])
            suppressed = np.zeros(len(cand), dtype=bool)
            if acc_pts:
                d, _ = cKDTree(np.asarray(acc_pts)).query(cand)
                suppressed |= d < 0.5 * radius
            cand_tree = cKDTree(cand)
            # keep batch insertions apart so they don't create new short edges
            for i in range(len(cand)):
                if suppressed[i]:
                    continue
                acc_pts.append(cand[i])
                for j in cand_tree.query_ball_point(cand[i], 0.5 * radius[i]):
                    if j != i:
                        suppressed[j] = True
        verts = np.vstack([verts, np.asarray(acc_pts)])
    return verts
