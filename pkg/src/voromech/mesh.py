"""Dual Voronoi/Delaunay discretization of planar domains.

Generator points become rigid-particle sites (three kinematic freedoms
each).  The duals of kept Delaunay triangles become transport pressure
nodes.  Every Delaunay edge whose dual Voronoi segment survives clipping
against the domain produces one mechanical contact facet, and the very
same clipped segment doubles as the transport conduit between the two
pressure nodes at its ends.  The facet/conduit correspondence is the
identity by construction and is relied on everywhere downstream.

Boundary rule: generator points are placed ON the domain boundary
(polygon corners, evenly walked edge subdivisions, hole circles realized
as inscribed polygons through on-circle points).  Duals of hull edges
then exit the domain exactly through boundary-segment midpoints, which
become boundary pressure nodes with a perpendicular conduit stub.  This
makes two-point flux approximation exact for affine pressure fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import Delaunay, QhullError
from shapely.geometry import LinearRing, LineString, Point, Polygon

# Coordinates are quantized to this resolution (meters) when used as
# dictionary keys; two entities closer than this merge into one.
QUANT = 1e-9

_INTERIOR = -1


class MeshError(Exception):
    """Raised for degenerate or inconsistent mesh input."""


def _quant_key(xy):
    return (int(round(float(xy[0]) / QUANT)), int(round(float(xy[1]) / QUANT)))


def contact_key(xa, xb):
    """Order-free quantized key identifying a facet by its endpoint sites."""
    ka, kb = _quant_key(xa), _quant_key(xb)
    return (ka, kb) if ka <= kb else (kb, ka)


# ---------------------------------------------------------------------------
# geometry description


@dataclass(frozen=True)
class CircleHole:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Geometry:
    """Outer CCW polygon, optional circular holes, out-of-plane thickness.

    `armor` lists (center, radius) disks around load-introduction
    hardware (support pins, loading platens); contacts touching a site
    inside a disk stay elastic so the specimen cannot shear off its
    supports.
    """

    outer: np.ndarray
    holes: tuple = ()
    thickness: float = 1.0
    armor: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "outer", np.asarray(self.outer, float))
        if self.outer.ndim != 2 or self.outer.shape[0] < 3:
            raise MeshError("outer boundary needs at least 3 vertices")
        if _ring_area(self.outer) <= 0.0:
            raise MeshError("outer boundary must be counter-clockwise")
        if self.thickness <= 0.0:
            raise MeshError("thickness must be positive")
        if any(r <= 0.0 for _, r in self.armor):
            raise MeshError("armor radii must be positive")

    @property
    def n_outer_edges(self):
        return self.outer.shape[0]

    def curve_count(self):
        return self.n_outer_edges + len(self.holes)

    def curve_length(self, cid):
        ne = self.n_outer_edges
        if cid < ne:
            a = self.outer[cid]
            b = self.outer[(cid + 1) % ne]
            return float(np.hypot(*(b - a)))
        return 2.0 * math.pi * self.holes[cid - ne].radius

    def curve_point(self, cid, s):
        """Position on boundary curve `cid` at arclength parameter `s`."""
        ne = self.n_outer_edges
        if cid < ne:
            a = self.outer[cid]
            b = self.outer[(cid + 1) % ne]
            L = np.hypot(*(b - a))
            return a + (s / L) * (b - a)
        hole = self.holes[cid - ne]
        ang = s / hole.radius
        return np.array(
            [
                hole.center[0] + hole.radius * math.cos(ang),
                hole.center[1] + hole.radius * math.sin(ang),
            ]
        )

    def is_closed_curve(self, cid):
        return cid >= self.n_outer_edges


def _ring_area(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# ---------------------------------------------------------------------------
# density field


@dataclass
class GradedZone:
    center: np.ndarray
    fine_lmin: float
    r_full: float
    r_taper: float


@dataclass
class DensityField:
    """Target minimum point spacing, possibly locally overridden.

    Each zone forces spacing `fine_lmin` within `r_full` of its center
    and blends linearly back to the base value at `r_taper`.  The local
    value is the minimum over the base and every zone.
    """

    base_lmin: float
    zones: list = field(default_factory=list)

    def add_zone(self, center, fine_lmin, r_full, r_taper):
        if not (0.0 < fine_lmin <= self.base_lmin) or r_taper <= r_full:
            raise MeshError("invalid density override")
        self.zones.append(GradedZone(np.asarray(center, float), fine_lmin, r_full, r_taper))

    def local(self, pts):
        pts = np.atleast_2d(np.asarray(pts, float))
        val = np.full(pts.shape[0], self.base_lmin)
        for z in self.zones:
            d = np.hypot(pts[:, 0] - z.center[0], pts[:, 1] - z.center[1])
            t = np.clip((d - z.r_full) / (z.r_taper - z.r_full), 0.0, 1.0)
            val = np.minimum(val, z.fine_lmin + t * (self.base_lmin - z.fine_lmin))
        return val

    def local_at(self, xy):
        return float(self.local(np.asarray(xy, float)[None, :])[0])


# ---------------------------------------------------------------------------
# point sets


@dataclass
class PointSet:
    """Generator sites with boundary-curve bookkeeping.

    curve == -1 marks interior sites; otherwise the site lies on that
    boundary curve at arclength `s`.  `physical` marks sites whose local
    resolution is already final (never evicted by refinement).
    """

    x: np.ndarray
    curve: np.ndarray
    s: np.ndarray
    physical: np.ndarray

    @classmethod
    def from_arrays(cls, x, curve=None, s=None, physical=None):
        x = np.asarray(x, float)
        n = x.shape[0]
        if curve is None:
            curve = np.full(n, _INTERIOR, dtype=int)
        if s is None:
            s = np.zeros(n)
        if physical is None:
            physical = np.zeros(n, dtype=bool)
        return cls(x, np.asarray(curve, int), np.asarray(s, float), np.asarray(physical, bool))

    def __len__(self):
        return self.x.shape[0]

    def subset(self, mask):
        return PointSet(self.x[mask], self.curve[mask], self.s[mask], self.physical[mask])

    def concat(self, other):
        return PointSet(
            np.vstack([self.x, other.x]),
            np.concatenate([self.curve, other.curve]),
            np.concatenate([self.s, other.s]),
            np.concatenate([self.physical, other.physical]),
        )


def _walk_interval(a, b, loc, out):
    # recursive midpoint split until every sub-interval fits the local
    # spacing target; samples five stations to ride out graded fields
    L = b - a
    st = a + L * np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    if L <= 0.9 * min(loc(si) for si in st):
        return
    m = 0.5 * (a + b)
    _walk_interval(a, m, loc, out)
    out.append(m)
    _walk_interval(m, b, loc, out)


def subdivide_curve(geometry, cid, density, anchors):
    """Arclength stations to insert between consecutive anchor stations.

    `anchors` must be sorted.  For closed curves the gap wrapping past
    the period is filled too.  Returns a sorted float array (new
    stations only, anchors excluded).
    """
    L = geometry.curve_length(cid)

    def loc(s):
        return density.local_at(geometry.curve_point(cid, s % L))

    anchors = np.sort(np.asarray(anchors, float))
    out = []
    if geometry.is_closed_curve(cid):
        if anchors.size == 0:
            anchors = np.array([0.0])
            out.append(0.0)
        for i in range(anchors.size):
            a = anchors[i]
            b = anchors[i + 1] if i + 1 < anchors.size else anchors[0] + L
            if b - a > QUANT:
                _walk_interval(a, b, loc, out)
    else:
        bounds = np.concatenate([[0.0], anchors, [L]])
        # endpoint corners are implicit anchors owned by adjacent curves
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b - a > QUANT:
                _walk_interval(a, b, loc, out)
    return np.array(sorted(sx % L for sx in out))


def boundary_points(geometry, density):
    """Initial boundary sites: corners plus walked subdivisions."""
    xs, cs, ss = [], [], []
    ne = geometry.n_outer_edges
    for cid in range(geometry.curve_count()):
        if cid < ne:
            stations = np.concatenate([[0.0], subdivide_curve(geometry, cid, density, [])])
        else:
            stations = subdivide_curve(geometry, cid, density, [])
            if stations.size < 3:
                L = geometry.curve_length(cid)
                stations = np.arange(12) * (L / 12.0)
        for s in stations:
            xs.append(geometry.curve_point(cid, s))
            cs.append(cid)
            ss.append(s)
    return PointSet.from_arrays(np.array(xs), np.array(cs), np.array(ss))


def thin_points(geometry, points, density):
    """Deterministic coarse subsample of a finer generator set.

    Walks each boundary chain in arclength order keeping stations whose
    gap to everything already kept meets the local target (corners and
    closed-curve phase origins always survive), then sweeps the interior
    in array order with the same greedy keep-if-clear rule.  Every
    member of the result is a member of `points`, so re-inserting the
    dropped ones during refinement reproduces the original set exactly.
    """
    keep = np.zeros(len(points.x), bool)
    for cid in np.unique(points.curve[points.curve >= 0]):
        idx = np.flatnonzero(points.curve == cid)
        idx = idx[np.argsort(points.s[idx])]
        L = geometry.curve_length(cid)
        closed = geometry.is_closed_curve(cid)
        kept = []
        for i in idx:
            si = points.s[i]
            target = 0.45 * density.local_at(points.x[i])
            if kept:
                gaps = np.abs(np.asarray(kept) - si)
                if closed:
                    gaps = np.minimum(gaps, L - gaps)
                if gaps.min() < target:
                    continue
            kept.append(si)
            keep[i] = True
    grid = _HashGrid(density.base_lmin)
    for xy in points.x[keep]:
        grid.insert(xy)
    for i in np.flatnonzero(points.curve < 0):
        xy = points.x[i]
        if not grid.too_close(xy, density.local_at(xy)):
            grid.insert(xy)
            keep[i] = True
    return points.subset(keep)


class _HashGrid:
    """Uniform grid for nearest-neighbor rejection at spacing <= cell."""

    def __init__(self, cell):
        self.cell = cell
        self.bins = {}
        self.pts = []

    def _ij(self, xy):
        return (int(math.floor(xy[0] / self.cell)), int(math.floor(xy[1] / self.cell)))

    def insert(self, xy):
        self.bins.setdefault(self._ij(xy), []).append(len(self.pts))
        self.pts.append((float(xy[0]), float(xy[1])))

    def too_close(self, xy, r):
        ci, cj = self._ij(xy)
        reach = int(math.ceil(r / self.cell))
        r2 = r * r
        for i in range(ci - reach, ci + reach + 1):
            for j in range(cj - reach, cj + reach + 1):
                for k in self.bins.get((i, j), ()):
                    px, py = self.pts[k]
                    if (px - xy[0]) ** 2 + (py - xy[1]) ** 2 < r2:
                        return True
        return False


def throw_darts(region, density, seed, fixed=None, max_rejects=500):
    """Maximal-ish Poisson-disk fill of a shapely region.

    Uniform candidates over the region bounding box; a candidate is
    accepted when it falls inside the region and clears the local
    spacing against all fixed and previously accepted sites.  Stops
    after `max_rejects` consecutive rejections.
    """
    rng = np.random.default_rng(seed)
    minx, miny, maxx, maxy = region.bounds
    grid = _HashGrid(density.base_lmin)
    if fixed is not None and len(fixed):
        for xy in np.asarray(fixed, float):
            grid.insert(xy)
    shapely.prepare(region)
    accepted = []
    rejects = 0
    while rejects < max_rejects:
        cand = rng.uniform((minx, miny), (maxx, maxy), size=(128, 2))
        inside = shapely.contains_xy(region, cand[:, 0], cand[:, 1])
        for xy, ok in zip(cand, inside):
            if not ok:
                rejects += 1
            elif grid.too_close(xy, density.local_at(xy)):
                rejects += 1
            else:
                grid.insert(xy)
                accepted.append(xy.copy())
                rejects = 0
            if rejects >= max_rejects:
                break
    return np.array(accepted) if accepted else np.zeros((0, 2))


def domain_polygon(geometry, points=None):
    """Shapely polygon: outer ring minus inscribed hole polygons.

    Holes are realized through the current on-circle sites so that the
    discrete domain and the point set always agree.  Without a point
    set, holes are realized at a default 24-gon (preview only).
    """
    poly = Polygon(geometry.outer)
    ne = geometry.n_outer_edges
    for k, hole in enumerate(geometry.holes):
        cid = ne + k
        if points is not None:
            mask = points.curve == cid
            if np.count_nonzero(mask) < 3:
                raise MeshError(f"hole curve {cid} has fewer than 3 sites")
            order = np.argsort(points.s[mask])
            ring = points.x[mask][order]
        else:
            ang = np.linspace(0.0, 2.0 * math.pi, 24, endpoint=False)
            ring = np.c_[
                hole.center[0] + hole.radius * np.cos(ang),
                hole.center[1] + hole.radius * np.sin(ang),
            ]
        poly = poly.difference(Polygon(ring))
    if not poly.is_valid or poly.geom_type != "Polygon":
        raise MeshError("domain polygon is invalid or disconnected")
    return poly


def generate_points(geometry, density, seed):
    """Boundary walk plus interior Poisson-disk fill."""
    bnd = boundary_points(geometry, density)
    region = domain_polygon(geometry, bnd)
    inner = throw_darts(region, density, seed, fixed=bnd.x)
    return bnd.concat(PointSet.from_arrays(inner))


# ---------------------------------------------------------------------------
# dual mesh


@dataclass
class DualMesh:
    """As-built coupled discretization.

    Facet f sits between sites I[f], J[f]; its transport conduit runs
    between pressure nodes P[f], Q[f] along the same clipped Voronoi
    segment.  All per-facet arrays are aligned: the mechanics facet and
    the transport conduit with the same index are the same object.
    """

    geometry: Geometry
    domain: Polygon
    points: PointSet
    # facets
    I: np.ndarray
    J: np.ndarray
    length: np.ndarray      # site-to-site distance
    area: np.ndarray        # facet area (clip length x thickness)
    center: np.ndarray      # facet centroid (clip midpoint)
    normal: np.ndarray      # unit I -> J
    tangent: np.ndarray     # normal rotated +90deg
    P: np.ndarray
    Q: np.ndarray
    conduit_len: np.ndarray  # pressure-node distance along the dual
    conduit_area: np.ndarray  # flow cross-section (site distance x thickness)
    # pressure nodes
    node_xy: np.ndarray
    node_vol: np.ndarray
    node_curve: np.ndarray  # boundary curve id, -1 interior
    # cells
    cell_vol: np.ndarray
    cell_centroid: np.ndarray
    cell_poly: list

    @property
    def n_sites(self):
        return self.points.x.shape[0]

    @property
    def n_facets(self):
        return self.I.shape[0]

    @property
    def n_nodes(self):
        return self.node_xy.shape[0]

    @property
    def thickness(self):
        return self.geometry.thickness

    def facet_keys(self):
        x = self.points.x
        return [contact_key(x[i], x[j]) for i, j in zip(self.I, self.J)]

    def site_facets(self):
        """List of (facet index, +1 if site is I else -1) per site."""
        out = [[] for _ in range(self.n_sites)]
        for f in range(self.n_facets):
            out[self.I[f]].append((f, 1))
            out[self.J[f]].append((f, -1))
        return out


def _circumcenters(pts, tri):
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    ab, ac = b - a, c - a
    d = 2.0 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ac2 = np.einsum("ij,ij->i", ac, ac)
    ux = (ac[:, 1] * ab2 - ab[:, 1] * ac2) / d
    uy = (ab[:, 0] * ac2 - ac[:, 0] * ab2) / d
    return a + np.c_[ux, uy]


def _tri_areas(pts, tri):
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    return 0.5 * np.abs(
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )


def _clip_convex_halfplane(poly, p0, nrm):
    # keep {x : (x - p0).nrm <= 0}; poly (M,2) CCW convex
    d = (poly - p0) @ nrm
    keep = d <= 1e-14
    out = []
    M = poly.shape[0]
    for i in range(M):
        j = (i + 1) % M
        if keep[i]:
            out.append(poly[i])
        if keep[i] != keep[j]:
            t = d[i] / (d[i] - d[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.array(out) if out else np.zeros((0, 2))


def _dedupe_ring(v, tol):
    # collapse consecutive near-coincident vertices; prevents invalid
    # self-touching rings from clip roundoff
    keep = [0]
    for k in range(1, v.shape[0]):
        if math.hypot(*(v[k] - v[keep[-1]])) > tol:
            keep.append(k)
    while len(keep) > 1 and math.hypot(*(v[keep[-1]] - v[keep[0]])) <= tol:
        keep.pop()
    return v[keep]


def _shapely_poly_area_centroid(geom):
    if geom.is_empty:
        return 0.0, None
    c = geom.centroid
    return geom.area, np.array([c.x, c.y])


def build_dual_mesh(points, geometry):
    """Delaunay to clipped-dual construction; see module docstring.

    `points` may be a PointSet or a raw (N,2) array (then all sites are
    treated as interior).  Raises MeshError on degenerate input.
    """
    if not isinstance(points, PointSet):
        points = PointSet.from_arrays(points)
    x = points.x
    n = x.shape[0]
    if n < 3:
        raise MeshError("need at least 3 sites")
    dia = max(np.ptp(x[:, 0]), np.ptp(x[:, 1]))
    if dia <= 0:
        raise MeshError("sites are coincident")

    domain = domain_polygon(geometry, points if np.any(points.curve >= 0) else None)
    shapely.prepare(domain)
    t = geometry.thickness

    try:
        dt = Delaunay(x)
    except QhullError as exc:
        raise MeshError(f"degenerate site configuration: {exc}") from None
    if dt.coplanar.size:
        raise MeshError("duplicate or unusable sites rejected by triangulation")

    tri = dt.simplices
    cen = _circumcenters(x, tri)
    tcent = (x[tri[:, 0]] + x[tri[:, 1]] + x[tri[:, 2]]) / 3.0
    keep = shapely.contains_xy(domain, tcent[:, 0], tcent[:, 1])
    if not np.any(keep):
        raise MeshError("no triangle lies inside the domain")
    areas = _tri_areas(x, tri)

    # one record per Delaunay edge bordering a kept triangle
    nt = tri.shape[0]
    tid = np.repeat(np.arange(nt), 3)
    side = np.tile(np.arange(3), nt)
    nb = dt.neighbors.ravel()
    ea = tri[tid, (side + 1) % 3]
    eb = tri[tid, (side + 2) % 3]
    nb_kept = np.where(nb >= 0, keep[np.clip(nb, 0, None)], False)
    own = keep[tid] & (~nb_kept | (nb > tid))
    tid, side, nb, ea, eb = tid[own], side[own], nb[own], ea[own], eb[own]
    nb_kept = nb_kept[own]

    # dual segment endpoints before clipping; hull/exposed edges get a
    # far virtual endpoint along the outward edge normal
    e1 = cen[tid]
    mid = 0.5 * (x[ea] + x[eb])
    ed = x[eb] - x[ea]
    enrm = np.c_[ed[:, 1], -ed[:, 0]]
    enrm /= np.hypot(enrm[:, 0], enrm[:, 1])[:, None]
    opp = x[tri[tid, side]]
    flip = np.einsum("ij,ij->i", mid - opp, enrm) < 0.0
    enrm[flip] *= -1.0
    far = mid + (4.0 * dia) * enrm
    e2 = np.where(nb_kept[:, None], cen[np.clip(nb, 0, None)], far)

    segs = shapely.linestrings(np.stack([e1, e2], axis=1))
    fully_in = shapely.contains_properly(domain, segs)

    m = e1.shape[0]
    c1 = np.empty_like(e1)
    c2 = np.empty_like(e2)
    c1[fully_in] = e1[fully_in]
    c2[fully_in] = e2[fully_in]
    drop = np.zeros(m, dtype=bool)
    tol = 1e-12 * dia
    for k in np.flatnonzero(~fully_in):
        clip = domain.intersection(segs[k])
        if clip.geom_type == "MultiLineString":
            clip = max(clip.geoms, key=lambda g: g.length)
        if clip.is_empty or clip.geom_type != "LineString" or clip.length < tol:
            drop[k] = True
            continue
        cc = np.asarray(clip.coords)
        # orient so the first endpoint sits on the owning triangle's side
        if np.hypot(*(cc[-1] - e1[k])) < np.hypot(*(cc[0] - e1[k])):
            cc = cc[::-1]
        c1[k], c2[k] = cc[0], cc[-1]
    keep_f = ~drop
    tid, nb, ea, eb = tid[keep_f], nb[keep_f], ea[keep_f], eb[keep_f]
    nb_kept = nb_kept[keep_f]
    c1, c2 = c1[keep_f], c2[keep_f]

    # pressure-node registry keyed by quantized coordinates so that
    # coincident circumcenters (cocircular clusters) merge
    node_key_to_id = {}
    node_pos = []

    def node_id(xy):
        key = _quant_key(xy)
        idx = node_key_to_id.get(key)
        if idx is None:
            idx = len(node_pos)
            node_key_to_id[key] = idx
            node_pos.append((float(xy[0]), float(xy[1])))
        return idx

    P = np.fromiter((node_id(p) for p in c1), dtype=int, count=c1.shape[0])
    Q = np.fromiter((node_id(p) for p in c2), dtype=int, count=c2.shape[0])
    zero = P == Q
    if np.any(zero):  # fully collapsed duals carry neither force nor flux
        keep2 = ~zero
        tid, nb, ea, eb, nb_kept = tid[keep2], nb[keep2], ea[keep2], eb[keep2], nb_kept[keep2]
        c1, c2, P, Q = c1[keep2], c2[keep2], P[keep2], Q[keep2]

    pair = np.stack([np.minimum(ea, eb), np.maximum(ea, eb)], axis=1)
    if np.unique(pair, axis=0).shape[0] != pair.shape[0]:
        raise MeshError("duplicate facet between one site pair")

    node_xy = np.array(node_pos)
    nn = node_xy.shape[0]

    hvec = c2 - c1
    h = np.hypot(hvec[:, 0], hvec[:, 1])
    lvec = x[eb] - x[ea]
    l = np.hypot(lvec[:, 0], lvec[:, 1])
    nrm = lvec / l[:, None]
    tan = np.c_[-nrm[:, 1], nrm[:, 0]]
    ctr = 0.5 * (c1 + c2)

    mesh_I, mesh_J = ea, eb
    A = h * t
    S = l * t

    # node volumes: triangle area goes to the triangle's own pressure
    # node when the circumcenter node exists, else to the boundary node
    # nearest along its clipped duals
    node_vol = np.zeros(nn)
    tri_node = np.full(nt, -1, dtype=int)
    cen_keys = [_quant_key(cen[k]) for k in range(nt)]
    for k in np.flatnonzero(keep):
        idx = node_key_to_id.get(cen_keys[k])
        if idx is not None:
            tri_node[k] = idx
    homeless = []
    for k in np.flatnonzero(keep):
        if tri_node[k] >= 0:
            node_vol[tri_node[k]] += areas[k] * t
        else:
            homeless.append(int(k))
    if homeless:
        owner = {}
        for f in range(tid.shape[0]):
            owner.setdefault(int(tid[f]), (f, True))
            if nb_kept[f]:
                owner.setdefault(int(nb[f]), (f, False))
        for k in homeless:
            got = owner.get(k)
            if got is None:
                raise MeshError("kept triangle lost all dual segments")
            f, at_p = got
            node_vol[P[f] if at_p else Q[f]] += areas[k] * t

    # tag boundary nodes with their curve
    node_curve = np.full(nn, _INTERIOR, dtype=int)
    curves = _curve_linestrings(geometry, points)
    bdist = shapely.distance(shapely.points(node_xy), domain.boundary)
    is_cen = np.zeros(nn, dtype=bool)
    is_cen[tri_node[tri_node >= 0]] = True
    btol = 1e-7 * dia
    for i in np.flatnonzero(bdist < btol):
        pt = Point(node_xy[i])
        best, bestd = _INTERIOR, btol
        for cid, ls in curves:
            d = ls.distance(pt)
            if d < bestd:
                best, bestd = cid, d
        node_curve[i] = best
    if np.any((bdist >= btol) & ~is_cen):
        raise MeshError("boundary pressure node not on any boundary curve")

    # particle cells: bounding box clipped by neighbor half-planes, then
    # by the domain when the convex candidate is not strictly interior
    minx, miny, maxx, maxy = domain.bounds
    pad = 0.1 * dia + QUANT
    box = np.array(
        [[minx - pad, miny - pad], [maxx + pad, miny - pad], [maxx + pad, maxy + pad], [minx - pad, maxy + pad]]
    )
    indptr, indices = dt.vertex_neighbor_vertices
    cell_vol = np.zeros(n)
    cell_centroid = np.zeros((n, 2))
    cell_poly = []
    for i in range(n):
        poly = box
        for j in indices[indptr[i] : indptr[i + 1]]:
            d = x[j] - x[i]
            poly = _clip_convex_halfplane(poly, 0.5 * (x[i] + x[j]), d)
            if poly.shape[0] < 3:
                break
        poly = _dedupe_ring(poly, 1e-9 * dia)
        if poly.shape[0] < 3:
            raise MeshError(f"site {i} has an empty cell")
        sp = Polygon(poly)
        if not sp.is_valid:
            raise MeshError(f"site {i} produced an invalid cell ring")
        if not shapely.contains_properly(domain, sp):
            sp = sp.intersection(domain)
            if sp.geom_type == "MultiPolygon":
                sp = max(sp.geoms, key=lambda g: g.area)
            if sp.is_empty or sp.area <= 0.0:
                raise MeshError(f"site {i} has an empty clipped cell")
        a, c = _shapely_poly_area_centroid(sp)
        cell_vol[i] = a * t
        cell_centroid[i] = c
        cell_poly.append(np.asarray(sp.exterior.coords)[:-1])

    return DualMesh(
        geometry=geometry,
        domain=domain,
        points=points,
        I=mesh_I,
        J=mesh_J,
        length=l,
        area=A,
        center=ctr,
        normal=nrm,
        tangent=tan,
        P=P,
        Q=Q,
        conduit_len=h,
        conduit_area=S,
        node_xy=node_xy,
        node_vol=node_vol,
        node_curve=node_curve,
        cell_vol=cell_vol,
        cell_centroid=cell_centroid,
        cell_poly=cell_poly,
    )


def _curve_linestrings(geometry, points):
    out = []
    ne = geometry.n_outer_edges
    for cid in range(ne):
        a = geometry.outer[cid]
        b = geometry.outer[(cid + 1) % ne]
        out.append((cid, LineString([a, b])))
    if isinstance(points, PointSet) and np.any(points.curve >= 0):
        for k in range(len(geometry.holes)):
            cid = ne + k
            mask = points.curve == cid
            if np.any(mask):
                order = np.argsort(points.s[mask])
                out.append((cid, LinearRing(points.x[mask][order])))
    return out


def interface_chord_weights(mesh, cid):
    """Per-site load apportionment along a closed boundary curve.

    Returns (site ids on the curve, tributary boundary length of each,
    outward-from-curve unit direction).  Used to convert an interface
    pressure into site forces: each site takes half of each adjacent
    chord.  Direction points from the curve's center outward into the
    solid, i.e. radially away from the hole center.
    """
    geometry = mesh.geometry
    hole = geometry.holes[cid - geometry.n_outer_edges]
    mask = mesh.points.curve == cid
    ids = np.flatnonzero(mask)
    if ids.size < 3:
        raise MeshError("interface needs at least 3 sites")
    order = np.argsort(mesh.points.s[ids])
    ids = ids[order]
    ring = mesh.points.x[ids]
    nxt = np.roll(ring, -1, axis=0)
    chord = np.hypot(nxt[:, 0] - ring[:, 0], nxt[:, 1] - ring[:, 1])
    trib = 0.5 * (chord + np.roll(chord, 1))
    outw = ring - np.asarray(hole.center)[None, :]
    outw /= np.hypot(outw[:, 0], outw[:, 1])[:, None]
    return ids, trib, outw


def boundary_nodes_on(mesh, cid):
    return np.flatnonzero(mesh.node_curve == cid)


def boundary_facets_on(mesh, cid):
    """Facets whose conduit ends in a boundary node on curve `cid`."""
    on = mesh.node_curve == cid
    return np.flatnonzero(on[mesh.P] | on[mesh.Q])
