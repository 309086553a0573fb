"""Convex hulls of selected Gaussian centers, used by the scene editor.

Quickhull over 3D points with an extreme-point prefilter: points
strictly inside the polytope spanned by the six axis extremes can never
be hull vertices, so they are dropped before the main loop. Faces are
triangles indexed into the original point array, wound so their unit
normals point outward. The mesh is watertight: every edge is shared by
exactly two faces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHullError, InvalidParameterError, ShapeError

EPS_REL = 1e-9


@dataclass
class ConvexHull3D:
    points: np.ndarray  # (N, 3) input points that faces index into
    vertices: np.ndarray  # sorted unique indices of points on the hull
    faces: np.ndarray  # (F, 3) int indices, outward winding
    normals: np.ndarray  # (F, 3) unit outward normals
    offsets: np.ndarray  # (F,) plane offsets, n . x = d
    eps: float  # absolute tolerance the hull was built with


def _affine_rank(points: np.ndarray, eps: float) -> int:
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s.size == 0 or s[0] <= eps:
        return 0
    return int((s > max(eps, s[0] * 1e-12)).sum())


def _extreme_seed(points: np.ndarray, eps: float):
    """Initial tetrahedron as four indices, or a degeneracy report."""
    lo = np.argmin(points, axis=0)
    hi = np.argmax(points, axis=0)
    cand = np.unique(np.concatenate([lo, hi]))
    # widest pair among the axis extremes
    best = (-1.0, 0, 0)
    for a in range(len(cand)):
        for b in range(a + 1, len(cand)):
            d = float(np.linalg.norm(points[cand[a]] - points[cand[b]]))
            if d > best[0]:
                best = (d, int(cand[a]), int(cand[b]))
    if best[0] <= eps:
        raise DegenerateHullError(0, "all points coincide")
    i0, i1 = best[1], best[2]
    axis = points[i1] - points[i0]
    axis /= np.linalg.norm(axis)
    rel = points - points[i0]
    perp = rel - np.outer(rel @ axis, axis)
    dist_line = np.linalg.norm(perp, axis=1)
    i2 = int(np.argmax(dist_line))
    if dist_line[i2] <= eps:
        raise DegenerateHullError(1, "points are collinear")
    n = np.cross(points[i1] - points[i0], points[i2] - points[i0])
    n /= np.linalg.norm(n)
    dist_plane = np.abs(rel @ n)
    i3 = int(np.argmax(dist_plane))
    if dist_plane[i3] <= eps:
        raise DegenerateHullError(2, "points are coplanar")
    return i0, i1, i2, i3


class _Face:
    __slots__ = ("v", "n", "d", "outside")

    def __init__(self, v, n, d):
        self.v = v
        self.n = n
        self.d = d
        self.outside: list[int] = []


def _make_face(points, a, b, c, interior) -> _Face:
    n = np.cross(points[b] - points[a], points[c] - points[a])
    ln = np.linalg.norm(n)
    if ln < 1e-300:
        raise DegenerateHullError(2, "degenerate face encountered")
    n = n / ln
    if np.dot(n, interior - points[a]) > 0:
        b, c = c, b
        n = -n
    return _Face((a, b, c), n, float(np.dot(n, points[a])))


def _quickhull(points: np.ndarray, eps: float) -> list[_Face]:
    i0, i1, i2, i3 = _extreme_seed(points, eps)
    interior = points[[i0, i1, i2, i3]].mean(axis=0)
    faces = [
        _make_face(points, i0, i1, i2, interior),
        _make_face(points, i0, i1, i3, interior),
        _make_face(points, i0, i2, i3, interior),
        _make_face(points, i1, i2, i3, interior),
    ]
    seed = {i0, i1, i2, i3}
    unclaimed = [i for i in range(len(points)) if i not in seed]
    for face in faces:
        if not unclaimed:
            break
        pts = np.array(unclaimed)
        above = (points[pts] @ face.n - face.d) > eps
        face.outside = [int(i) for i in pts[above]]
        claimed = set(face.outside)
        unclaimed = [i for i in unclaimed if i not in claimed]

    pending = [f for f in faces if f.outside]
    while pending:
        face = pending.pop()
        if not face.outside or face not in faces:
            continue
        dists = points[face.outside] @ face.n - face.d
        apex = face.outside[int(np.argmax(dists))]
        p = points[apex]

        # visible region grown edge-connected from the seed face
        edge_map: dict[tuple[int, int], list[_Face]] = {}
        for f in faces:
            for k in range(3):
                e = tuple(sorted((f.v[k], f.v[(k + 1) % 3])))
                edge_map.setdefault(e, []).append(f)
        visible = {id(face): face}
        stack = [face]
        while stack:
            f = stack.pop()
            for k in range(3):
                e = tuple(sorted((f.v[k], f.v[(k + 1) % 3])))
                for g in edge_map[e]:
                    if id(g) not in visible and (np.dot(g.n, p) - g.d) > eps:
                        visible[id(g)] = g
                        stack.append(g)

        horizon = []
        for f in visible.values():
            for k in range(3):
                a, b = f.v[k], f.v[(k + 1) % 3]
                e = tuple(sorted((a, b)))
                mates = edge_map[e]
                if not all(id(g) in visible for g in mates):
                    horizon.append((a, b))

        orphans = []
        for f in visible.values():
            orphans.extend(f.outside)
        orphans = [i for i in set(orphans) if i != apex]

        faces = [f for f in faces if id(f) not in visible]
        new_faces = [_make_face(points, a, b, apex, interior) for a, b in horizon]
        for nf in new_faces:
            if not orphans:
                break
            pts = np.array(orphans)
            above = (points[pts] @ nf.n - nf.d) > eps
            nf.outside = [int(i) for i in pts[above]]
            claimed = set(nf.outside)
            orphans = [i for i in orphans if i not in claimed]
        faces.extend(new_faces)
        pending = [f for f in faces if f.outside]
    return faces


def _prefilter(points: np.ndarray, eps: float) -> np.ndarray:
    """Indices that survive the axis-extremes interior cut."""
    lo = np.argmin(points, axis=0)
    hi = np.argmax(points, axis=0)
    cand = np.unique(np.concatenate([lo, hi]))
    if len(cand) < 4:
        return np.arange(len(points))
    try:
        small = _quickhull(points[cand], eps)
    except DegenerateHullError:
        return np.arange(len(points))
    normals = np.array([f.n for f in small])
    offsets = np.array([f.d for f in small])
    signed = points @ normals.T - offsets
    keep = signed.max(axis=1) > -eps  # strict interior goes away
    keep[cand] = True
    return np.nonzero(keep)[0]


def convex_hull(points: np.ndarray, eps_rel: float = EPS_REL, prefilter: bool = True) -> ConvexHull3D:
    """Hull of a 3D point set; raises DegenerateHullError below full rank."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) points, got {points.shape}")
    if len(points) == 0:
        raise InvalidParameterError("hull of zero points")
    if not np.all(np.isfinite(points)):
        raise InvalidParameterError("points must be finite")
    span = points.max(axis=0) - points.min(axis=0) if len(points) else np.zeros(3)
    eps = max(float(np.linalg.norm(span)), 1.0) * eps_rel
    if len(points) < 4:
        raise DegenerateHullError(_affine_rank(points, eps), "fewer than four points")

    if prefilter:
        kept = _prefilter(points, eps)
    else:
        kept = np.arange(len(points))
    faces = _quickhull(points[kept], eps)

    tri = kept[np.array([f.v for f in faces], dtype=np.int64)]
    normals = np.array([f.n for f in faces])
    offsets = np.array([f.d for f in faces])
    vertices = np.unique(tri)
    return ConvexHull3D(
        points=points,
        vertices=vertices,
        faces=tri,
        normals=normals,
        offsets=offsets,
        eps=eps,
    )


def hull_contains(hull: ConvexHull3D, queries: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Boolean per query point; the boundary counts as inside."""
    queries = np.asarray(queries, dtype=np.float64)
    single = queries.ndim == 1
    queries = queries.reshape(-1, 3)
    if tol is None:
        tol = hull.eps
    signed = queries @ hull.normals.T - hull.offsets
    out = signed.max(axis=1) <= tol
    return bool(out[0]) if single else out
