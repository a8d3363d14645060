"""Simplex meshes of a hyperrectangular parameter box.

Covers construction (Delaunay of a DoE plus the box corners), point location
with barycentric coordinates, audits, and the plain-text / VTK formats.
"""

from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import Delaunay

from .metric import MetricField, local_edges, simplex_volumes

FORMAT_MAGIC = "metricuq-mesh"
FORMAT_VERSION = 1


@dataclass(eq=False)
class SimplexMesh:
    """Positively oriented simplices over ``vertices``; ``box`` has shape (d, 2)."""

    vertices: np.ndarray
    simplices: np.ndarray
    locked: np.ndarray
    box: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.simplices = np.ascontiguousarray(self.simplices, dtype=np.int64)
        self.locked = np.ascontiguousarray(self.locked, dtype=bool)
        self.box = np.asarray(self.box, dtype=float)
        d = self.vertices.shape[1]
        if self.simplices.ndim != 2 or self.simplices.shape[1] != d + 1:
            raise ValueError("simplices must have dim+1 vertices")
        if self.box.shape != (d, 2):
            raise ValueError("box must have shape (dim, 2)")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_simplices(self) -> int:
        return self.simplices.shape[0]

    @cached_property
    def volumes(self) -> np.ndarray:
        return simplex_volumes(self.vertices[self.simplices])

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.box[:, 1] - self.box[:, 0]))

    @property
    def box_diagonal(self) -> float:
        return float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))

    @cached_property
    def edges(self) -> np.ndarray:
        pairs = local_edges(self.dim)
        e = np.concatenate([self.simplices[:, [a, b]] for a, b in pairs])
        return np.unique(np.sort(e, axis=1), axis=0)

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        """(n, 2d) flags: vertex lies on the lower/upper face of each axis."""
        tol = 1e-12 * self.box_diagonal
        lo = np.abs(self.vertices - self.box[:, 0]) <= tol
        hi = np.abs(self.vertices - self.box[:, 1]) <= tol
        return np.concatenate([lo, hi], axis=1)

    @cached_property
    def on_boundary(self) -> np.ndarray:
        return self.boundary_faces.any(axis=1)

    @cached_property
    def vertex_simplex_counts(self) -> np.ndarray:
        return np.bincount(self.simplices.ravel(), minlength=self.n_vertices)

    @cached_property
    def _locator(self) -> "_Locator":
        return _Locator(self)

    def locate(self, points, strict=True):
        """Containing simplex id and barycentric coordinates of each point."""
        return locate(self, points, strict=strict)

    def copy(self) -> "SimplexMesh":
        return SimplexMesh(self.vertices.copy(), self.simplices.copy(), self.locked.copy(), self.box.copy())


def box_corners(box) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    return np.array(list(itertools.product(*box)), dtype=float)


def orient_positive(vertices, simplices):
    vol = simplex_volumes(vertices[simplices])
    simplices = simplices.copy()
    neg = vol < 0
    simplices[neg, 0], simplices[neg, 1] = simplices[neg, 1], simplices[neg, 0].copy()
    return simplices


def delaunay_triangulate(points, box) -> SimplexMesh:
    """Delaunay mesh of ``points`` plus the 2^d box corners, all vertices locked."""
    box = np.asarray(box, dtype=float)
    d = box.shape[0]
    pts = np.asarray(points, dtype=float).reshape(-1, d)
    diag = float(np.linalg.norm(box[:, 1] - box[:, 0]))
    if len(pts):
        if np.any(pts < box[:, 0]) or np.any(pts > box[:, 1]):
            raise ValueError("points outside the parameter box")
        if _min_separation(pts) < 1e-9 * diag:
            raise ValueError("duplicate points in DoE")
    corners = box_corners(box)
    if len(pts):
        keep = np.array([np.min(np.linalg.norm(pts - c, axis=1)) >= 1e-9 * diag for c in corners])
        corners = corners[keep]
    allpts = np.concatenate([corners, pts])
    # QJ joggles cospherical inputs (box corners) deterministically.
    tri = Delaunay(allpts, qhull_options="QJ Qbb")
    simp = orient_positive(allpts, tri.simplices.astype(np.int64))
    vol = simplex_volumes(allpts[simp])
    box_vol = float(np.prod(box[:, 1] - box[:, 0]))
    simp = simp[vol > 1e-13 * box_vol]
    mesh = SimplexMesh(allpts, simp, np.ones(len(allpts), bool), box)
    total = float(np.sum(mesh.volumes))
    if abs(total - box_vol) > 1e-9 * box_vol:
        raise RuntimeError(f"triangulation does not cover the box ({total} vs {box_vol})")
    return mesh


def _min_separation(pts):
    if len(pts) < 2:
        return math.inf
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(pts).query(pts, k=2)
    return float(dist[:, 1].min())


class _Locator:
    """Uniform bucket grid over element bounding boxes."""

    def __init__(self, mesh: SimplexMesh):
        d = mesh.dim
        P = mesh.vertices[mesh.simplices]
        self.origin = P[:, 0]
        T = np.swapaxes(P[:, 1:] - P[:, :1], 1, 2)
        self.Tinv = np.linalg.inv(T)
        m = len(P)
        self.lo = mesh.box[:, 0]
        extent = mesh.box[:, 1] - mesh.box[:, 0]
        self.n = max(1, int(round(m ** (1.0 / d))))
        self.cell = extent / self.n
        elo = self._cell_index(P.min(axis=1))
        ehi = self._cell_index(P.max(axis=1))
        span = ehi - elo + 1
        counts = np.prod(span, axis=1)
        eid = np.repeat(np.arange(m), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cells = np.zeros_like(offs)
        stride = 1
        sp = span[eid]
        base = elo[eid]
        for k in range(d - 1, -1, -1):
            idx = offs % sp[:, k] + base[:, k]
            offs //= sp[:, k]
            cells += idx * stride
            stride *= self.n
        order = np.lexsort((eid, cells))
        self.cand = eid[order]
        self.start = np.searchsorted(cells[order], np.arange(self.n ** d + 1))
        self.dim = d

    def _cell_index(self, x):
        idx = np.floor((x - self.lo) / self.cell).astype(np.int64)
        return np.clip(idx, 0, self.n - 1)

    def bary(self, elems, pts):
        lam = np.einsum("qij,qj->qi", self.Tinv[elems], pts - self.origin[elems])
        return np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)

    def find(self, pts, chunk=200_000):
        nq = len(pts)
        out_e = np.empty(nq, dtype=np.int64)
        out_b = np.empty((nq, self.dim + 1))
        for s in range(0, nq, chunk):
            e, b = self._find(pts[s : s + chunk])
            out_e[s : s + chunk] = e
            out_b[s : s + chunk] = b
        return out_e, out_b

    def _find(self, pts):
        nq = len(pts)
        ci = self._cell_index(pts)
        cell = np.zeros(nq, dtype=np.int64)
        for k in range(self.dim):
            cell = cell * self.n + ci[:, k]
        a, b = self.start[cell], self.start[cell + 1]
        cnt = b - a
        qid = np.repeat(np.arange(nq), cnt)
        pos = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt) + np.repeat(a, cnt)
        elems = self.cand[pos]
        bc = self.bary(elems, pts[qid])
        minb = bc.min(axis=1)
        valid = minb >= -1e-12
        big = np.iinfo(np.int64).max
        key = np.where(valid, elems, big)
        best = np.full(nq, big)
        np.minimum.at(best, qid, key)
        found = best < big
        res_e = np.where(found, best, -1)
        # fallback: element with largest minimum barycentric coordinate
        if not found.all():
            order = np.lexsort((-minb, qid))
            first = np.ones(len(order), bool)
            first[1:] = qid[order][1:] != qid[order][:-1]
            sel = order[first]
            fb = np.full(nq, -1)
            fb[qid[sel]] = elems[sel]
            res_e = np.where(found, res_e, fb)
        bc_out = self.bary(res_e, pts)
        bc_out = np.clip(bc_out, 0.0, None)
        bc_out /= bc_out.sum(axis=1, keepdims=True)
        return res_e, bc_out


def locate(mesh: SimplexMesh, points, strict=True):
    """Return (simplex ids, barycentric coords) for a point or an array of points.

    Ties on shared faces resolve to the lowest simplex id.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    tol = 1e-12 * mesh.box_diagonal
    if strict and (np.any(pts < mesh.box[:, 0] - tol) or np.any(pts > mesh.box[:, 1] + tol)):
        raise ValueError("point outside the parameter box")
    ids, bc = mesh._locator.find(pts)
    if single:
        return int(ids[0]), bc[0]
    return ids, bc


# -- audits -------------------------------------------------------------------


def check_conformity(mesh: SimplexMesh) -> bool:
    """Every interior facet is shared by exactly two simplices, boundary facets lie on the box."""
    d = mesh.dim
    facets = np.concatenate(
        [np.delete(mesh.simplices, i, axis=1) for i in range(d + 1)]
    )
    facets = np.sort(facets, axis=1)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    if np.any(counts > 2):
        return False
    bnd = uniq[counts == 1]
    faces = mesh.boundary_faces
    on_common_face = np.all(faces[bnd], axis=1).any(axis=1)
    return bool(np.all(on_common_face))


def audit(mesh: SimplexMesh) -> dict:
    vol = mesh.volumes
    total = float(vol.sum())
    return {
        "positive_volumes": bool(np.all(vol > 0)),
        "covers_box": abs(total - mesh.box_volume) <= 1e-9 * mesh.box_volume,
        "conforming": check_conformity(mesh),
    }


# -- text I/O -----------------------------------------------------------------


class MeshData(NamedTuple):
    mesh: SimplexMesh
    metric: MetricField | None
    fields: dict


def _fmt(x) -> str:
    return repr(float(x))


def dumps_mesh(mesh: SimplexMesh, metric=None, fields=None) -> str:
    """Serialize a mesh with optional metric and per-vertex fields."""
    d = mesh.dim
    out = io.StringIO()
    out.write(f"{FORMAT_MAGIC} {FORMAT_VERSION}\n")
    out.write(f"{d} {mesh.n_vertices} {mesh.n_simplices}\n")
    out.write("box " + " ".join(_fmt(x) for x in mesh.box.ravel()) + "\n")
    for x, lk in zip(mesh.vertices, mesh.locked):
        out.write(" ".join(_fmt(c) for c in x) + f" {int(lk)}\n")
    for s in mesh.simplices:
        out.write(" ".join(str(int(i)) for i in s) + "\n")
    blocks = dict(fields or {})
    if metric is not None:
        tensors = getattr(metric, "tensors", metric)
        iu = np.triu_indices(d)
        blocks["metric"] = np.asarray(tensors)[:, iu[0], iu[1]]
    for name, vals in blocks.items():
        vals = np.asarray(vals, dtype=float).reshape(mesh.n_vertices, -1)
        out.write(f"field {name} {vals.shape[1]}\n")
        for row in vals:
            out.write(" ".join(_fmt(v) for v in row) + "\n")
    return out.getvalue()


def loads_mesh(text: str) -> MeshData:
    lines = text.splitlines()
    try:
        magic, version = lines[0].split()
    except (IndexError, ValueError):
        raise ValueError("malformed mesh file: missing header") from None
    if magic != FORMAT_MAGIC:
        raise ValueError("malformed mesh file: bad magic")
    if int(version) != FORMAT_VERSION:
        raise ValueError(f"mesh format version {version} not supported")
    try:
        d, nv, ns = (int(t) for t in lines[1].split())
        btok = lines[2].split()
        if btok[0] != "box" or len(btok) != 2 * d + 1:
            raise ValueError
        box = np.array([float(t) for t in btok[1:]]).reshape(d, 2)
        vrows = [ln.split() for ln in lines[3 : 3 + nv]]
        if len(vrows) != nv or any(len(r) != d + 1 for r in vrows):
            raise ValueError
        verts = np.array([[float(t) for t in r[:d]] for r in vrows]).reshape(nv, d)
        locked = np.array([r[d] == "1" for r in vrows], dtype=bool)
        srows = [ln.split() for ln in lines[3 + nv : 3 + nv + ns]]
        if len(srows) != ns or any(len(r) != d + 1 for r in srows):
            raise ValueError
        simp = np.array([[int(t) for t in r] for r in srows], dtype=np.int64).reshape(ns, d + 1)
        fields = {}
        i = 3 + nv + ns
        while i < len(lines):
            if not lines[i].strip():
                i += 1
                continue
            tag, name, nc = lines[i].split()
            if tag != "field":
                raise ValueError
            nc = int(nc)
            rows = [ln.split() for ln in lines[i + 1 : i + 1 + nv]]
            if len(rows) != nv or any(len(r) != nc for r in rows):
                raise ValueError
            vals = np.array([[float(t) for t in r] for r in rows])
            fields[name] = vals[:, 0] if nc == 1 else vals
            i += 1 + nv
    except ValueError:
        raise ValueError("malformed mesh file") from None
    if simp.size and (simp.min() < 0 or simp.max() >= nv):
        raise ValueError("malformed mesh file: simplex index out of range")
    mesh = SimplexMesh(verts, simp, locked, box)
    metric = None
    if "metric" in fields:
        flat = np.atleast_2d(fields.pop("metric")).reshape(nv, -1)
        iu = np.triu_indices(d)
        T = np.zeros((nv, d, d))
        T[:, iu[0], iu[1]] = flat
        T[:, iu[1], iu[0]] = flat
        metric = MetricField(mesh, T)
    return MeshData(mesh, metric, fields)


def write_mesh(path, mesh, metric=None, fields=None):
    Path(path).write_text(dumps_mesh(mesh, metric, fields))


def read_mesh(path) -> MeshData:
    return loads_mesh(Path(path).read_text())


def write_vtk(path, mesh: SimplexMesh, metric=None, fields=None):
    """ASCII legacy VTK unstructured grid (write-only)."""
    d = mesh.dim
    cell_type = 5 if d == 2 else 10
    out = io.StringIO()
    out.write("# vtk DataFile Version 2.0\nmetricuq mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    out.write(f"POINTS {mesh.n_vertices} double\n")
    for x in mesh.vertices:
        xyz = list(x) + [0.0] * (3 - d)
        out.write(" ".join(_fmt(c) for c in xyz) + "\n")
    ns = mesh.n_simplices
    out.write(f"CELLS {ns} {ns * (d + 2)}\n")
    for s in mesh.simplices:
        out.write(f"{d + 1} " + " ".join(str(int(i)) for i in s) + "\n")
    out.write(f"CELL_TYPES {ns}\n")
    out.write(f"{cell_type}\n" * ns)
    out.write(f"POINT_DATA {mesh.n_vertices}\n")
    out.write("SCALARS locked int 1\nLOOKUP_TABLE default\n")
    out.write("".join(f"{int(v)}\n" for v in mesh.locked))
    for name, vals in (fields or {}).items():
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 1:
            out.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            out.write("".join(_fmt(v) + "\n" for v in vals))
    if metric is not None:
        T = np.asarray(getattr(metric, "tensors", metric))
        full = np.zeros((len(T), 3, 3))
        full[:, :d, :d] = T
        out.write("TENSORS metric double\n")
        for t in full:
            out.write(" ".join(_fmt(v) for v in t.ravel()) + "\n")
    Path(path).write_text(out.getvalue())
