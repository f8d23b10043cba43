"""Stress-triggered coarse-to-fine remeshing and the adaptive run loop.

A run starts on a coarse provisional discretization.  After every trial
step the volume-average stress of each coarse particle is recovered
from the solid facet tractions; wherever its largest principal value
crosses a fraction of the tensile strength, the trial is rejected, the
surrounding coarse generators are evicted, the neighborhood is refilled
at the fine spacing (graded back to coarse across a transition
annulus), contact histories of the already-fine region are carried over
by position-derived keys, and the step is retried on the new mesh.
Fine-region points are flagged `physical` and are never evicted, which
is what makes the history keys stable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import shapely

from . import materials as mt
from . import mesh as ms
from . import physics as ph
from . import solver as sv


class AdaptError(RuntimeError):
    pass


@dataclass
class RefinementConfig:
    lmin_fine: float
    lmin_coarse: float
    threshold_ratio: float = 0.7
    r_f: float = None
    r_t: float = None
    max_events_per_step: int = 10

    def __post_init__(self):
        if self.r_f is None:
            self.r_f = 5.0 * self.lmin_fine
        if self.r_t is None:
            self.r_t = 8.0 * self.lmin_fine
        if not (0.0 < self.threshold_ratio < 1.0):
            raise AdaptError("threshold ratio must sit strictly inside (0, 1)")
        if not (0.0 < self.r_f < self.r_t):
            raise AdaptError("need 0 < full-refinement radius < transition radius")
        if not (0.0 < self.lmin_fine < self.lmin_coarse):
            raise AdaptError("fine spacing must be below coarse spacing")


@dataclass
class RefinementPlan:
    critical_particles: np.ndarray
    centers: np.ndarray
    evicted_points: np.ndarray
    inserted_points: np.ndarray
    preserved: dict
    dropped_pristine: int = 0


# ---------------------------------------------------------------------------
# stress recovery and trigger


def particle_stresses_from_tractions(mesh, sN, sM):
    """Volume-average stress per particle from per-facet solid tractions.

    Each facet applies force A*(sN n + sM m) to site I and its negative
    to J; the dyad with the lever arm from the site's generator point,
    summed and symmetrized, over the cell volume, is the average stress.
    """
    t = sN[:, None] * mesh.normal + sM[:, None] * mesh.tangent
    F = mesh.area[:, None] * t
    rI = mesh.center - mesh.points.x[mesh.I]
    rJ = mesh.center - mesh.points.x[mesh.J]
    sig = np.zeros((mesh.n_sites, 2, 2))
    np.add.at(sig, mesh.I, rI[:, :, None] * F[:, None, :])
    np.add.at(sig, mesh.J, -rJ[:, :, None] * F[:, None, :])
    sig = 0.5 * (sig + np.transpose(sig, (0, 2, 1)))
    return sig / mesh.cell_vol[:, None, None]


def particle_stress(mesh, state, mats, site, op=None):
    """Average stress tensor of one particle at the given state."""
    if op is None:
        op = ph.FacetOperator(mesh)
    _, _, sN, sM, *_ = ph.evaluate_tractions(mesh, op, mats, state)
    return particle_stresses_from_tractions(mesh, sN, sM)[site]


def max_principal(sig):
    a, b, c = sig[:, 0, 0], sig[:, 1, 1], sig[:, 0, 1]
    return 0.5 * (a + b) + np.sqrt(0.25 * (a - b) ** 2 + c * c)


def find_critical(mesh, state, mats, cfg, op=None):
    """Non-physical particles whose largest principal average stress
    exceeds threshold_ratio * ft.  Physical particles never trigger."""
    if op is None:
        op = ph.FacetOperator(mesh)
    _, _, sN, sM, *_ = ph.evaluate_tractions(mesh, op, mats, state)
    sig = particle_stresses_from_tractions(mesh, sN, sM)
    hot = max_principal(sig) > cfg.threshold_ratio * mats.mech.ft
    hot &= ~ph.armored_sites(mesh)
    return np.flatnonzero(hot & ~mesh.points.physical)


# ---------------------------------------------------------------------------
# remeshing


def _min_center_dist(xy, centers):
    d = np.full(xy.shape[0], np.inf)
    for c in centers:
        d = np.minimum(d, np.hypot(xy[:, 0] - c[0], xy[:, 1] - c[1]))
    return d


def save_physical_history(mesh, contact):
    """Contact key -> (d, max_eN, max_eT) for both-endpoint-physical facets."""
    phys = mesh.points.physical
    keep = np.flatnonzero(phys[mesh.I] & phys[mesh.J])
    x = mesh.points.x
    out = {}
    for f in keep:
        key = ms.contact_key(x[mesh.I[f]], x[mesh.J[f]])
        out[key] = (contact.d[f], contact.max_eN[f], contact.max_eT[f])
    return out


def refine(mesh, geometry, density, contact, critical, cfg, seed,
           insert_pool=None):
    """Rebuild the mesh with the neighborhoods of `critical` refined.

    Evicts non-physical generators within r_t of each critical cell
    centroid, grows matching graded zones on `density` (mutated), fills
    boundary gaps by the walking subdivision and the interior by pool
    points (if given) then Poisson darts, and flags inserts inside r_f
    as physical.  Returns (new mesh, RefinementPlan).
    """
    critical = np.asarray(critical, int)
    if critical.size == 0:
        raise AdaptError("refine called with no critical particles")
    pts = mesh.points
    centers = mesh.cell_centroid[critical]
    preserved = save_physical_history(mesh, contact)
    # an insert inside the diametral circle of a damaged contact could
    # flip its Delaunay edge and orphan the history; keep them all out
    # (empty Gabriel circle => the edge survives any insertion)
    dmg = np.flatnonzero((contact.d > 0.0)
                         & pts.physical[mesh.I] & pts.physical[mesh.J])
    guard_c = 0.5 * (pts.x[mesh.I[dmg]] + pts.x[mesh.J[dmg]])
    guard_r = 0.5 * mesh.length[dmg]

    def clears_guards(cand):
        if not dmg.size:
            return True
        return not np.any(np.hypot(guard_c[:, 0] - cand[0],
                                   guard_c[:, 1] - cand[1]) < guard_r)

    for c in centers:
        density.add_zone(c, cfg.lmin_fine, cfg.r_f, cfg.r_t)

    dist = _min_center_dist(pts.x, centers)
    evict = (~pts.physical) & (dist <= cfg.r_t)
    # outer-polygon corners are structural anchors, never removed
    ne = geometry.n_outer_edges
    corner = (pts.curve >= 0) & (pts.curve < ne) & (np.abs(pts.s) < ms.QUANT)
    evict &= ~corner
    survivors = pts.subset(~evict)
    # a survivor inside r_f now sits at final resolution; only protected
    # corners can be non-physical here, and without the flag a critical
    # corner would re-trigger forever
    survivors.physical |= _min_center_dist(survivors.x, centers) <= cfg.r_f

    held_x = [survivors.x]
    held = [survivors]

    def spacing_ok(cand):
        target = density.local_at(cand)
        for block in held_x:
            if block.size and np.min(np.hypot(*(block - cand).T)) < target:
                return False
        return True

    # boundary refill: re-insert pool stations that now fit, then walk
    # any remaining oversized gaps (pool stations rebuild the reference
    # fine chains exactly wherever the scaffold was fully evicted)
    pool_bnd = (insert_pool.subset(insert_pool.curve >= 0)
                if insert_pool is not None else None)
    for cid in range(geometry.curve_count()):
        on = survivors.curve == cid
        kept = sorted(survivors.s[on])
        new_s, new_xy = [], []
        if pool_bnd is not None:
            cand = pool_bnd.subset(pool_bnd.curve == cid)
            Lc = geometry.curve_length(cid)
            closed = geometry.is_closed_curve(cid)
            for k in np.argsort(cand.s):
                si, xi = cand.s[k], cand.x[k]
                target = 0.45 * density.local_at(xi)
                if not clears_guards(xi):
                    continue
                if kept:
                    gaps = np.abs(np.asarray(kept) - si)
                    if closed:
                        gaps = np.minimum(gaps, Lc - gaps)
                    if gaps.min() < target:
                        continue
                kept.append(si)
                new_s.append(si)
                new_xy.append(xi)
        stations = ms.subdivide_curve(geometry, cid, density, np.sort(kept))
        new_s += list(stations)
        new_xy += [geometry.curve_point(cid, s) for s in stations]
        if not new_s:
            continue
        new_s = np.asarray(new_s)
        add = ms.PointSet(np.asarray(new_xy), np.full(new_s.size, cid, int),
                          new_s, np.zeros(new_s.size, bool))
        held.append(add)
        held_x.append(add.x)

    bnd_now = ms.PointSet(
        np.vstack([h.x for h in held]),
        np.concatenate([h.curve for h in held]),
        np.concatenate([h.s for h in held]),
        np.concatenate([h.physical for h in held]))
    domain = ms.domain_polygon(geometry, bnd_now)
    disks = shapely.union_all(
        [shapely.Point(c).buffer(cfg.r_t, quad_segs=32) for c in centers])
    region = domain.intersection(disks)

    inserted = []
    if insert_pool is not None and len(insert_pool.x):
        inner = insert_pool.subset(insert_pool.curve < 0)
        if len(inner.x):
            inside = shapely.contains_xy(region, inner.x[:, 0], inner.x[:, 1])
            for xy in inner.x[inside]:
                if spacing_ok(xy):
                    inserted.append(xy)
                    held_x.append(xy[None, :])
    fixed = np.vstack(held_x)
    darts = (np.zeros((0, 2)) if region.is_empty
             else ms.throw_darts(region, density, seed, fixed=fixed))
    new_xy = (np.vstack([inserted, darts]) if inserted else darts)

    ins_phys = _min_center_dist(new_xy, centers) <= cfg.r_f if new_xy.size else \
        np.zeros(0, bool)
    interior_new = ms.PointSet.from_arrays(new_xy, physical=ins_phys)
    # boundary inserts become physical inside r_f too
    for h in held[1:]:
        h.physical[:] = _min_center_dist(h.x, centers) <= cfg.r_f
    new_pts = survivors
    for h in held[1:]:
        new_pts = new_pts.concat(h)
    new_pts = new_pts.concat(interior_new)

    new_mesh = ms.build_dual_mesh(new_pts, geometry)
    plan = RefinementPlan(
        critical_particles=critical,
        centers=centers,
        evicted_points=np.flatnonzero(evict),
        inserted_points=new_xy,
        preserved=preserved,
    )
    return new_mesh, plan


def transfer_history(plan, new_mesh):
    """Re-key saved contact states onto the rebuilt mesh.

    Every saved contact carrying history must reappear (physical points
    never move, so its endpoints still exist); losing one would silently
    erase dissipated energy, hence the hard error.  A saved contact that
    is still pristine may legitimately vanish when re-filling next to
    the fine zone flips a Delaunay edge between fine sites; those are
    only counted.  All other contacts start pristine.
    """
    st = mt.ContactState.zeros(new_mesh.n_facets)
    x = new_mesh.points.x
    seen = set()
    I, J = new_mesh.I, new_mesh.J
    for f in range(new_mesh.n_facets):
        key = ms.contact_key(x[I[f]], x[J[f]])
        rec = plan.preserved.get(key)
        if rec is not None:
            st.d[f], st.max_eN[f], st.max_eT[f] = rec
            seen.add(key)
    lost_hist = [k for k, rec in plan.preserved.items()
                 if k not in seen and rec[0] > 0.0]
    if lost_hist:
        raise AdaptError(
            f"{len(lost_hist)} contact(s) with damage history missing "
            f"from the rebuilt mesh")
    plan.dropped_pristine = len(plan.preserved) - len(seen)
    return st


# ---------------------------------------------------------------------------
# run driver


@dataclass
class Problem:
    """Everything a run needs, with mesh-independent boundary conditions.

    `points` is the starting discretization; selectors inside `loadcase`
    are re-evaluated after every rebuild.  `measure` may add scenario
    observables (a "flux" key lands in the series output).
    """

    geometry: ms.Geometry
    density: ms.DensityField
    points: ms.PointSet
    mats: mt.MaterialSet
    loadcase: ph.LoadCase
    controller: sv.StepController
    refine_cfg: RefinementConfig = None
    insert_pool: ms.PointSet = None
    measure: object = None
    prestep: bool = False
    seed: int = 0


@dataclass
class RefineEvent:
    step: int
    load_level: float
    n_critical: int
    n_evicted: int
    n_inserted: int
    dofs: int


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    mesh: ms.DualMesh = None
    state: ph.SystemState = None
    solver: sv.CoupledSolver = None
    aborted: str = ""


def _control_value(ctrl, state, mesh, cum):
    if ctrl.mode == "indirect_cod":
        return float(ctrl.gauge_builder(mesh) @ state.mech_vec())
    if ctrl.mode == "corrosion":
        return cum
    return state.load_factor


def adaptive_driver(problem, adaptive=True, on_step=None, on_refine=None):
    """Run the full stepping loop; refinement only when `adaptive`.

    Returns a RunTrace with one row per committed step and one entry
    per refinement event.  `on_step(k, mesh, state)` and
    `on_refine(idx, mesh)` are optional observers.
    """
    geo, dens = problem.geometry, problem.density
    mesh = ms.build_dual_mesh(problem.points, geo)
    ctrl = problem.controller
    solver = sv.CoupledSolver(mesh, problem.mats, problem.loadcase, ctrl)
    state = ph.SystemState.zeros(mesh)
    trace = RunTrace()
    cum = 0.0
    ev_total = 0

    if problem.prestep:
        rep = solver.equilibrate(state, load_factor=state.load_factor)
        state.contact = rep.trial_contact

    for step in range(ctrl.max_steps):
        t0 = time.perf_counter()
        base = state.copy()
        events = 0
        while True:
            try:
                rep = sv.solve_step(solver, state)
            except sv.StepFailure as exc:
                trace.aborted = f"step {step}: {exc}"
                trace.mesh, trace.state, trace.solver = mesh, state, solver
                return trace
            crit = (find_critical(mesh, state, problem.mats,
                                  problem.refine_cfg, solver.op)
                    if adaptive and problem.refine_cfg is not None
                    else np.zeros(0, int))
            if crit.size == 0:
                break
            # reject the trial outright, refine, re-equilibrate at the
            # committed level, and keep refining until the check is clean
            base_cod = (float(ctrl.gauge_builder(mesh) @ base.mech_vec())
                        if ctrl.mode == "indirect_cod" else None)
            state = base.copy()
            while crit.size:
                events += 1
                ev_total += 1
                if events > problem.refine_cfg.max_events_per_step:
                    raise AdaptError(
                        f"step {step}: refinement did not settle within "
                        f"{problem.refine_cfg.max_events_per_step} events")
                mesh, plan = refine(mesh, geo, dens, state.contact, crit,
                                    problem.refine_cfg,
                                    seed=problem.seed + 7919 * ev_total,
                                    insert_pool=problem.insert_pool)
                contact = transfer_history(plan, mesh)
                solver = sv.CoupledSolver(mesh, problem.mats, problem.loadcase, ctrl)
                state = ph.SystemState.zeros(mesh)
                state.contact = contact
                state.load_factor = base.load_factor
                if ctrl.mode == "indirect_cod":
                    g = ctrl.gauge_builder(mesh)
                    rep = solver.equilibrate(state, indirect_target=(g, base_cod))
                else:
                    rep = solver.equilibrate(state, load_factor=base.load_factor)
                state.contact = rep.trial_contact
                base = state.copy()
                trace.events.append(RefineEvent(
                    step, base.load_factor, int(crit.size),
                    int(plan.evicted_points.size),
                    int(plan.inserted_points.shape[0]), 3 * mesh.n_sites))
                if on_refine is not None:
                    on_refine(len(trace.events) - 1, mesh)
                crit = find_critical(mesh, state, problem.mats,
                                     problem.refine_cfg, solver.op)
            # loop back and retry the trial step on the refined mesh

        cum += _step_advance(ctrl, rep)
        row = {
            "step": step,
            "control_value": _control_value(ctrl, state, mesh, cum),
            "load_or_pressure": state.load_factor,
            "flux": 0.0,
            "dof_count": 3 * mesh.n_sites + mesh.n_nodes,
            "wall_time_s": time.perf_counter() - t0,
            "refinement_events": events,
        }
        if problem.measure is not None:
            row.update(problem.measure(mesh, state, solver))
        trace.rows.append(row)
        if on_step is not None:
            on_step(step, mesh, state)

    trace.mesh, trace.state, trace.solver = mesh, state, solver
    return trace


def _step_advance(ctrl, rep):
    if ctrl.mode == "corrosion":
        return ctrl.corrosion.dx_cor * 0.5 ** rep.bisections
    return 0.0
