"""Local-operation anisotropic remesher and metric gradation.

The remesher works on a private copy of the mesh and drives it towards a unit
mesh of a target metric field with four operations, repeated in outer passes:
metric-midpoint edge splits, edge collapses, flips (2D edge swaps, 3D 2-3 and
3-2 flips) and spring smoothing.  Locked vertices are never removed or moved.
The target metric at new or moved points is interpolated linearly on the
background (input) mesh.  The returned mesh is the pass with the largest
fraction of unit-length edges.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .mesh import SimplexMesh
from .metric import (
    SQRT2,
    QUALITY_TOLERANCE,
    MetricField,
    edge_lengths,
    intersect,
    local_edges,
    qualities,
    simplex_volumes,
)

logger = logging.getLogger(__name__)

LMIN, LMAX = 1.0 / SQRT2, SQRT2


@dataclass(frozen=True)
class MesherOptions:
    max_passes: int = 10
    change_tol: float = 0.01
    smooth_iterations: int = 3
    smooth_relax: float = 0.5
    flip_rounds: int = 8
    flip_quality: float = 0.95
    collapse_quality: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class MeshReport:
    unit_edge_fraction: float
    quality_fraction: float
    n_vertices: int
    n_simplices: int
    passes: int
    converged: bool


@dataclass
class AdaptResult:
    mesh: SimplexMesh
    metric: MetricField
    report: MeshReport


# -- helpers ------------------------------------------------------------------


def _unique_keys(keys):
    """Unique rows of a sorted-row integer key array with inverse map."""
    base = int(keys.max()) + 1 if keys.size else 1
    code = np.zeros(len(keys), dtype=np.int64)
    for k in range(keys.shape[1]):
        code = code * base + keys[:, k]
    _, first, inv = np.unique(code, return_index=True, return_inverse=True)
    return keys[first], inv.reshape(-1)


def _fix_orientation(P, elems):
    """Swap the first two vertices of negatively oriented simplices."""
    vol = simplex_volumes(P[elems])
    neg = vol < 0
    out = elems.copy()
    out[neg, 0], out[neg, 1] = elems[neg, 1], elems[neg, 0]
    return out, np.abs(vol)


def _independent(n_items, priority, groups, n_groups):
    """Items whose priority is the maximum in every group they belong to.

    ``groups`` is (k, 2) of (item, group) memberships; priorities must be unique.
    """
    best = np.full(n_groups, -np.inf)
    np.maximum.at(best, groups[:, 1], priority[groups[:, 0]])
    ok = np.ones(n_items, bool)
    lose = priority[groups[:, 0]] < best[groups[:, 1]]
    ok[groups[lose, 0]] = False
    return ok


def _rank_priority(score):
    """Unique float priorities ordered by score, ties broken by index."""
    order = np.lexsort((-np.arange(len(score)), score))
    pr = np.empty(len(score))
    pr[order] = np.arange(len(score), dtype=float)
    return pr


class _Background:
    """Target metric interpolated from the input mesh."""

    def __init__(self, mesh: SimplexMesh, tensors):
        self.mesh = mesh
        self.tensors = tensors

    def __call__(self, pts):
        ids, bc = self.mesh.locate(pts, strict=False)
        M = self.tensors[self.mesh.simplices[ids]]
        return np.einsum("qk,qkij->qij", bc, M)


# -- working mesh -------------------------------------------------------------


class _Work:
    def __init__(self, mesh: SimplexMesh, tensors, opts: MesherOptions):
        self.d = mesh.dim
        self.box = mesh.box
        self.pts = mesh.vertices.copy()
        self.mets = np.array(tensors, dtype=float)
        self.locked = mesh.locked.copy()
        self.faces = mesh.boundary_faces.copy()
        self.elems = mesh.simplices.copy()
        self.bg = _Background(mesh, np.asarray(tensors, dtype=float))
        self.opts = opts
        self.eps_vol = 1e-14 * mesh.box_volume
        self.pairs = local_edges(self.d)
        self.changes = 0

    # geometry --------------------------------------------------------------
    def edge_table(self):
        pairs = self.pairs
        keys = np.sort(
            np.stack([self.elems[:, [a, b]] for a, b in pairs], axis=1), axis=2
        ).reshape(-1, 2)
        edges, inv = _unique_keys(keys)
        return edges, inv.reshape(len(self.elems), len(pairs))

    def lengths(self, edges):
        a, b = edges[:, 0], edges[:, 1]
        return edge_lengths(self.mets[a], self.mets[b], self.pts[b] - self.pts[a])

    def quality(self, elems=None, pts=None, mets=None):
        elems = self.elems if elems is None else elems
        pts = self.pts if pts is None else pts
        mets = self.mets if mets is None else mets
        return qualities(pts[elems], mets[elems])

    def snap(self, P, faces):
        """Put points exactly on the box faces they belong to."""
        d = self.d
        for k in range(d):
            P[faces[:, k], k] = self.box[k, 0]
            P[faces[:, d + k], k] = self.box[k, 1]
        return P

    # split -----------------------------------------------------------------
    def split_pass(self, max_rounds=60):
        total = 0
        for _ in range(max_rounds):
            edges, elem_edge = self.edge_table()
            L = self.lengths(edges)
            cand = np.flatnonzero(L > LMAX)
            if cand.size == 0:
                break
            pr = np.full(len(edges), -np.inf)
            pr[cand] = _rank_priority(L[cand])
            m, ne = elem_edge.shape
            memb = np.stack([np.repeat(np.arange(m), ne), elem_edge.ravel()], axis=1)
            memb = memb[np.isfinite(pr[memb[:, 1]])][:, ::-1]
            best = np.full(m, -np.inf)
            np.maximum.at(best, memb[:, 1], pr[memb[:, 0]])
            ok = np.zeros(len(edges), bool)
            ok[cand] = True
            lose = pr[memb[:, 0]] < best[memb[:, 1]]
            ok[memb[lose, 0]] = False
            sel = np.flatnonzero(ok)
            total += self._split_edges(edges, elem_edge, sel)
            # flipping between rounds keeps splits from cascading across stretched elements
            self.flip_pass(rounds=2)
        self.changes += total
        return total

    def _split_edges(self, edges, elem_edge, sel):
        a, b = edges[sel, 0], edges[sel, 1]
        la = np.sqrt(np.einsum("ni,nij,nj->n", self.pts[b] - self.pts[a], self.mets[a], self.pts[b] - self.pts[a]))
        lb = np.sqrt(np.einsum("ni,nij,nj->n", self.pts[b] - self.pts[a], self.mets[b], self.pts[b] - self.pts[a]))
        r = lb / la
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(r - 1.0) < 1e-8, 0.5, np.log((1.0 + r) / 2.0) / np.log(r))
        s = np.clip(s, 0.05, 0.95)
        P = self.pts[a] + s[:, None] * (self.pts[b] - self.pts[a])
        F = self.faces[a] & self.faces[b]
        P = self.snap(P, F)
        n0 = len(self.pts)
        new_id = np.full(len(edges), -1)
        new_id[sel] = n0 + np.arange(len(sel))
        self.pts = np.concatenate([self.pts, P])
        self.mets = np.concatenate([self.mets, self.bg(P)])
        self.locked = np.concatenate([self.locked, np.zeros(len(sel), bool)])
        self.faces = np.concatenate([self.faces, F])
        hit = new_id[elem_edge] >= 0  # (m, ne)
        rows, loc = np.nonzero(hit)
        ids = new_id[elem_edge[rows, loc]]
        ia = np.array([p[0] for p in self.pairs])[loc]
        ib = np.array([p[1] for p in self.pairs])[loc]
        c1 = self.elems[rows].copy()
        c2 = self.elems[rows].copy()
        c1[np.arange(len(rows)), ib] = ids
        c2[np.arange(len(rows)), ia] = ids
        self.elems[rows] = c1
        self.elems = np.concatenate([self.elems, c2])
        return len(sel)

    # collapse --------------------------------------------------------------
    def collapse_pass(self):
        edges, _ = self.edge_table()
        L = self.lengths(edges)
        cand = np.flatnonzero(L < LMIN)
        if cand.size == 0:
            return 0
        cand = cand[np.lexsort((cand, L[cand]))]
        n = len(self.pts)
        elems = self.elems
        ball = [set() for _ in range(n)]
        for k, el in enumerate(elems.tolist()):
            for v in el:
                ball[v].add(k)
        alive = np.ones(len(elems), bool)
        vdead = np.zeros(n, bool)
        touched = np.zeros(n, bool)
        qmin_floor = self.opts.collapse_quality
        done = 0
        for e in cand:
            a, b = int(edges[e, 0]), int(edges[e, 1])
            if touched[a] or touched[b]:
                continue
            for v, w in ((a, b), (b, a)):
                if self.locked[v] or np.any(self.faces[v] & ~self.faces[w]):
                    continue
                if self._try_collapse(v, w, elems, ball, alive, qmin_floor):
                    vdead[v] = True
                    for k in ball[w]:
                        touched[elems[k]] = True
                    done += 1
                    break
        if done:
            self._compact(elems[alive], vdead)
            self.changes += done
        return done

    def _try_collapse(self, v, w, elems, ball, alive, qfloor):
        shell = ball[v] & ball[w]
        if not shell:
            return False
        others = sorted(ball[v] - shell)
        if not others:
            return False
        nv = {u for k in ball[v] for u in elems[k]} - {v}
        nw = {u for k in ball[w] for u in elems[k]} - {w}
        link = {u for k in shell for u in elems[k]} - {v, w}
        if (nv & nw) != link:
            return False
        old = elems[others]
        new = old.copy()
        new[new == v] = w
        vol = simplex_volumes(self.pts[new])
        if np.any(vol <= self.eps_vol):
            return False
        qold = self.quality(elems[sorted(ball[v])]).min()
        qnew = self.quality(new).min()
        if qnew < min(qfloor, qold):
            return False
        far = np.array(sorted(nv - nw - {w}), dtype=np.int64)
        if far.size:
            e = self.pts[far] - self.pts[w]
            Lnew = edge_lengths(self.mets[np.full(far.size, w)], self.mets[far], e)
            if np.any(Lnew > LMAX):
                return False
        # apply
        elems[others] = new
        for k in shell:
            alive[k] = False
            for u in elems[k]:
                if u != v:
                    ball[u].discard(k)
        ball[w].update(others)
        ball[v] = set()
        return True

    def _compact(self, elems, vdead):
        keep = ~vdead
        remap = np.cumsum(keep) - 1
        self.pts = self.pts[keep]
        self.mets = self.mets[keep]
        self.locked = self.locked[keep]
        self.faces = self.faces[keep]
        self.elems = remap[elems]

    # flips -----------------------------------------------------------------
    def flip_pass(self, rounds=None):
        total = 0
        for _ in range(self.opts.flip_rounds if rounds is None else rounds):
            if self.d == 2:
                n = self._swap2d()
            else:
                n = self._flip32() + self._flip23()
            total += n
            if n == 0:
                break
        self.changes += total
        return total

    def _apply_replacements(self, old_groups, new_elems, gain):
        """Replace element groups (k, g) by new elements (k, h, d+1) for an independent subset."""
        k = len(gain)
        if k == 0:
            return 0
        pr = _rank_priority(gain)
        g = old_groups.shape[1]
        memb = np.stack([np.repeat(np.arange(k), g), old_groups.ravel()], axis=1)
        ok = _independent(k, pr, memb, len(self.elems))
        if not ok.any():
            return 0
        old = old_groups[ok]
        new = new_elems[ok]
        h = new.shape[1]
        dead = np.zeros(len(self.elems), bool)
        dead[old.ravel()] = True
        keep = self.elems[~dead]
        self.elems = np.concatenate([keep, new.reshape(-1, self.d + 1)])
        return int(ok.sum())

    def _candidates(self, old_groups, new_elems):
        """Validity and min-quality gain of candidate replacements."""
        qe = self.quality()
        qo = qe[old_groups].min(axis=1)
        poor = qo < self.opts.flip_quality
        old_groups, new_elems, qo = old_groups[poor], new_elems[poor], qo[poor]
        k, h, _ = new_elems.shape
        if k == 0:
            return new_elems, old_groups, qo
        flat, absvol = _fix_orientation(self.pts, new_elems.reshape(-1, self.d + 1))
        new_elems = flat.reshape(k, h, self.d + 1)
        absvol = absvol.reshape(k, h)
        oldvol = np.abs(simplex_volumes(self.pts[self.elems[old_groups.ravel()]])).reshape(old_groups.shape)
        osum = oldvol.sum(axis=1)
        valid = (np.abs(absvol.sum(axis=1) - osum) <= 1e-10 * osum) & (absvol.min(axis=1) > self.eps_vol)
        qn = self.quality(flat).reshape(k, h).min(axis=1)
        gain = qn - qo
        good = valid & (gain > 1e-6 * np.maximum(qo, 1e-3))
        return new_elems[good], old_groups[good], gain[good]

    def _facet_pairs(self):
        """Interior facets with their two simplices and opposite vertices."""
        d = self.d
        m = len(self.elems)
        fac = np.concatenate([np.delete(self.elems, i, axis=1) for i in range(d + 1)])
        owner = np.tile(np.arange(m), d + 1)
        opp = np.concatenate([self.elems[:, i] for i in range(d + 1)])
        keys = np.sort(fac, axis=1)
        uniq, inv = _unique_keys(keys)
        order = np.argsort(inv, kind="stable")
        inv_s = inv[order]
        cnt = np.bincount(inv_s, minlength=len(uniq))
        start = np.cumsum(cnt) - cnt
        two = np.flatnonzero(cnt == 2)
        i1 = order[start[two]]
        i2 = order[start[two] + 1]
        return uniq[two], owner[i1], owner[i2], opp[i1], opp[i2]

    def _swap2d(self):
        fac, t1, t2, c, dd = self._facet_pairs()
        if len(fac) == 0:
            return 0
        a, b = fac[:, 0], fac[:, 1]
        new = np.stack([np.stack([c, dd, a], 1), np.stack([dd, c, b], 1)], axis=1)
        old = np.stack([t1, t2], axis=1)
        new, old, gain = self._candidates(old, new)
        return self._apply_replacements(old, new, gain)

    def _flip23(self):
        fac, t1, t2, dv, ev = self._facet_pairs()
        if len(fac) == 0:
            return 0
        a, b, c = fac[:, 0], fac[:, 1], fac[:, 2]
        new = np.stack(
            [np.stack([dv, ev, a, b], 1), np.stack([dv, ev, b, c], 1), np.stack([dv, ev, c, a], 1)],
            axis=1,
        )
        old = np.stack([t1, t2], axis=1)
        new, old, gain = self._candidates(old, new)
        return self._apply_replacements(old, new, gain)

    def _flip32(self):
        edges, elem_edge = self.edge_table()
        m, ne = elem_edge.shape
        flat = elem_edge.ravel()
        order = np.argsort(flat, kind="stable")
        cnt = np.bincount(flat, minlength=len(edges))
        start = np.cumsum(cnt) - cnt
        three = np.flatnonzero(cnt == 3)
        if three.size == 0:
            return 0
        tets = np.stack([order[start[three] + i] // ne for i in range(3)], axis=1)
        verts = self.elems[tets].reshape(len(three), -1)
        verts = np.sort(verts, axis=1)
        distinct = 1 + np.count_nonzero(np.diff(verts, axis=1), axis=1)
        ok = distinct == 5
        if not ok.any():
            return 0
        three, tets, verts = three[ok], tets[ok], verts[ok]
        ev = edges[three]
        ring = np.empty((len(three), 3), np.int64)
        for r in range(len(three)):
            u = np.unique(verts[r])
            ring[r] = u[(u != ev[r, 0]) & (u != ev[r, 1])]
        new = np.stack(
            [np.column_stack([ring, ev[:, 0]]), np.column_stack([ring, ev[:, 1]])], axis=1
        )
        new, old, gain = self._candidates(tets, new)
        return self._apply_replacements(old, new, gain)

    # smoothing -------------------------------------------------------------
    def smooth_pass(self, rng):
        moved = 0
        for _ in range(self.opts.smooth_iterations):
            moved += self._smooth_once(rng)
        self.changes += moved
        return moved

    def _smooth_once(self, rng):
        d = self.d
        edges, _ = self.edge_table()
        n = len(self.pts)
        a, b = edges[:, 0], edges[:, 1]
        L = self.lengths(edges)
        vec = self.pts[b] - self.pts[a]
        f = (1.0 - 1.0 / np.maximum(L, 1e-12))[:, None] * vec
        disp = np.zeros((n, d))
        np.add.at(disp, a, f)
        np.add.at(disp, b, -f)
        deg = np.bincount(edges.ravel(), minlength=n)
        disp = self.opts.smooth_relax * disp / np.maximum(deg, 1)[:, None]
        fixed_axis = self.faces[:, :d] | self.faces[:, d:]
        disp[fixed_axis] = 0.0
        movable = ~self.locked & np.any(disp != 0.0, axis=1)
        if not movable.any():
            return 0
        # independent set of movable vertices
        pr = np.where(movable, rng.random(n), -np.inf)
        best = np.full(n, -np.inf)
        np.maximum.at(best, a, np.where(movable[b], pr[b], -np.inf))
        np.maximum.at(best, b, np.where(movable[a], pr[a], -np.inf))
        mv = np.flatnonzero(movable & (pr > best))
        newp = self.pts[mv] + disp[mv]
        newp = np.clip(newp, self.box[:, 0], self.box[:, 1])
        newp = self.snap(newp, self.faces[mv])
        newm = self.bg(newp)
        pts2 = self.pts.copy()
        mets2 = self.mets.copy()
        pts2[mv] = newp
        mets2[mv] = newm
        is_mv = np.zeros(n, bool)
        is_mv[mv] = True
        touch = np.any(is_mv[self.elems], axis=1)
        te = np.flatnonzero(touch)
        E = self.elems[te]
        qo = self.quality(E)
        qn = self.quality(E, pts2, mets2)
        vn = simplex_volumes(pts2[E])
        owner = E[is_mv[E]]  # exactly one moved vertex per touched element
        bad = np.zeros(n, bool)
        np.logical_or.at(bad, owner, vn <= self.eps_vol)
        mino = np.full(n, np.inf)
        minn = np.full(n, np.inf)
        np.minimum.at(mino, owner, qo)
        np.minimum.at(minn, owner, qn)
        accept = mv[~bad[mv] & (minn[mv] >= mino[mv])]
        self.pts[accept] = pts2[accept]
        self.mets[accept] = mets2[accept]
        return len(accept)

    # summary ---------------------------------------------------------------
    def unit_fraction(self):
        edges, _ = self.edge_table()
        L = self.lengths(edges)
        return float(np.mean((L >= LMIN) & (L <= LMAX))), len(edges)

    def quality_fraction(self):
        return float(np.mean(self.quality() >= QUALITY_TOLERANCE))

    def snapshot(self):
        return (self.pts.copy(), self.mets.copy(), self.locked.copy(), self.faces.copy(), self.elems.copy())

    def restore(self, snap):
        self.pts, self.mets, self.locked, self.faces, self.elems = (x.copy() for x in snap)


# -- public API ---------------------------------------------------------------


def adapt_mesh(mesh: SimplexMesh, target, opts: MesherOptions | None = None) -> AdaptResult:
    """Remesh ``mesh`` towards a unit mesh of ``target`` (MetricField or (n, d, d) array)."""
    opts = MesherOptions() if opts is None else opts
    tensors = getattr(target, "tensors", target)
    tensors = np.asarray(tensors, dtype=float)
    if tensors.shape != (mesh.n_vertices, mesh.dim, mesh.dim):
        raise ValueError("target metric does not match the mesh")
    w = _Work(mesh, tensors, opts)
    rng = np.random.default_rng(opts.seed)
    best_frac, _ = w.unit_fraction()
    best = w.snapshot()
    converged = False
    passes = 0
    for passes in range(1, opts.max_passes + 1):
        w.changes = 0
        w.split_pass()
        w.collapse_pass()
        w.flip_pass()
        w.smooth_pass(rng)
        w.flip_pass()
        frac, n_edges = w.unit_fraction()
        logger.debug("pass %d: unit edges %.3f, changes %d", passes, frac, w.changes)
        # a pass may lower the unit-edge fraction on the way out of a plateau;
        # the loop keeps going and the best pass is returned
        if frac >= best_frac:
            best_frac, best = frac, w.snapshot()
        if w.changes < opts.change_tol * n_edges:
            converged = True
            break
    w.restore(best)
    out = SimplexMesh(w.pts, w.elems, w.locked, mesh.box)
    frac, _ = w.unit_fraction()
    report = MeshReport(frac, w.quality_fraction(), out.n_vertices, out.n_simplices, passes, converged)
    return AdaptResult(out, MetricField(out, w.mets), report)


def unit_edge_fraction(mesh: SimplexMesh, tensors) -> float:
    e = mesh.edges
    L = edge_lengths(tensors[e[:, 0]], tensors[e[:, 1]], mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]])
    return float(np.mean((L >= LMIN) & (L <= LMAX)))


def quality_fraction(mesh: SimplexMesh, tensors, alpha=QUALITY_TOLERANCE) -> float:
    q = qualities(mesh.vertices[mesh.simplices], tensors[mesh.simplices])
    return float(np.mean(q >= alpha))


def metric_gradation(field: MetricField, beta=1.5, max_sweeps=100, tol=1e-9) -> MetricField:
    """Bound the size growth along edges: h_j <= h_i (1 + l_ij ln beta) in every direction.

    Only ever shrinks sizes (metric intersection).
    """
    if not 1.0 < beta <= 3.0:
        raise ValueError("beta must lie in (1, 3]")
    mesh = field.mesh
    M = field.tensors.copy()
    e = mesh.edges
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    cnt = np.bincount(dst, minlength=mesh.n_vertices)
    rank = np.arange(len(dst)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    lnb = math.log(beta)
    for _ in range(max_sweeps):
        changed = 0.0
        for r in range(int(rank.max()) + 1 if len(rank) else 0):
            k = rank == r
            i, j = src[k], dst[k]
            ell = edge_lengths(M[i], M[j], mesh.vertices[j] - mesh.vertices[i])
            Mi = M[i] / ((1.0 + ell * lnb) ** 2)[:, None, None]
            Mj = intersect(M[j], Mi)
            rel = np.abs(Mj - M[j]).max(axis=(1, 2)) / np.abs(M[j]).max(axis=(1, 2))
            changed = max(changed, float(rel.max(initial=0.0)))
            M[j] = 0.5 * (Mj + np.swapaxes(Mj, 1, 2))
        if changed <= tol:
            break
    return MetricField(mesh, M, degenerate=field.degenerate)


def gradation_violation(field: MetricField, beta) -> float:
    """Largest factor by which any directional size ratio exceeds beta^length (1 = satisfied)."""
    mesh = field.mesh
    M = field.tensors
    e = mesh.edges
    worst = 0.0
    for i, j in ((e[:, 0], e[:, 1]), (e[:, 1], e[:, 0])):
        ell = edge_lengths(M[i], M[j], mesh.vertices[j] - mesh.vertices[i])
        # max over directions of h_j/h_i = sqrt(max eig of M_i M_j^-1)
        lam = np.linalg.eigvals(np.linalg.solve(M[j], M[i])).real.max(axis=1)
        ratio = np.sqrt(lam)
        worst = max(worst, float((ratio / beta**ell).max(initial=0.0)))
    return worst
