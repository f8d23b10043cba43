"""Desk-scale specimen builders, loading programs, and observables.

Four specimen kinds:

- pressurized_block: unit square with a pressure drop left to right and
  sealed horizontal faces; the transport patch test.
- bend2d_with_pressure: plane analog of a three-point bending beam
  whose bottom face carries water pressure feeding cracks as they open;
  crack-mouth-opening controlled.
- single_rebar: square concrete block around one corroding bar; the
  bar is a pressurized hole driven by the corrosion volume balance.
- four_rebar: wide block with a row of four corroding bars sharing one
  interface pressure.

All boundary conditions are expressed as geometric selectors so a
rebuilt mesh re-acquires them unchanged.  Builders return an
`adapt.Problem`; `adapt.adaptive_driver` runs it in any mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapt as ad
from . import materials as mt
from . import mesh as ms
from . import physics as ph
from . import solver as sv


class ScenarioError(ValueError):
    pass


# default parameter sets for the two concrete families used by the
# verification scenarios (bending-grade and corrosion-grade)
BENDING_CONCRETE = dict(E0=60e9, alpha=0.29, ft=2.2e6, Gt=35.0,
                        kappa=5e-18, xi=1.0, mu=8.9e-4, rho=1000.0)
CORROSION_CONCRETE = dict(E0=37e9, alpha=1.0, ft=3.2e6, Gt=143.0,
                          kappa=1e-16, xi=0.001, mu=1.9e4, rho=3925.0)

KINDS = ("pressurized_block", "bend2d_with_pressure", "single_rebar",
         "four_rebar")


@dataclass
class ScenarioSpec:
    kind: str
    mode: str = "fine"
    seed: int = 0
    biot: float = None
    material: dict = field(default_factory=dict)
    lmin_fine: float = None
    lmin_coarse: float = None
    increment: float = None
    max_steps: int = None
    tol_rel: float = 1e-6
    # bending beam
    span: float = 0.3
    depth: float = 0.09
    bottom_pressure: float = 0.3e6
    # rebar blocks
    block: tuple = None
    rebar_radius: float = 0.008
    rebar_centers: tuple = None
    i_cor: float = 100.0
    alpha_e: float = 2.0
    dt_days: float = 1.0
    # pressurized block
    p_in: float = 1.0
    p_out: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if self.mode not in ("fine", "coarse", "adaptive"):
            raise ScenarioError(f"unknown mode {self.mode!r}")


def spec_materials(spec):
    base = (BENDING_CONCRETE if spec.kind in
            ("pressurized_block", "bend2d_with_pressure")
            else CORROSION_CONCRETE)
    vals = {**base, **(spec.material or {})}
    biot = spec.biot
    if biot is None:
        biot = 0.0 if spec.kind == "pressurized_block" else 1.0
    mech = mt.MechMaterial(E0=vals["E0"], alpha=vals["alpha"],
                           ft=vals["ft"], Gt=vals["Gt"])
    tran = mt.TransportMaterial(kappa=vals["kappa"], xi=vals["xi"],
                                mu=vals["mu"], rho_fluid=vals["rho"])
    return mt.MaterialSet(mech, tran, biot=biot)


# ---------------------------------------------------------------------------
# selector helpers (mesh-independent, safe across refinement)


def site_nearest(xy):
    xy = np.asarray(xy, float)

    def sel(mesh):
        d = np.hypot(mesh.points.x[:, 0] - xy[0], mesh.points.x[:, 1] - xy[1])
        return np.array([int(np.argmin(d))])
    return sel


def nodes_on_curves(*cids):
    def sel(mesh):
        return np.flatnonzero(np.isin(mesh.node_curve, cids))
    return sel


def _edge_stations(mesh, geometry, cid):
    """Sites along one outer edge, including the closing corner of the
    next edge, with positions mapped to this edge's arclength."""
    ne = geometry.n_outer_edges
    pts = mesh.points
    on = pts.curve == cid
    ids = np.flatnonzero(on)
    pos = pts.s[on]
    nxt = (cid + 1) % ne
    closing = np.flatnonzero((pts.curve == nxt) & (np.abs(pts.s) < ms.QUANT))
    L = geometry.curve_length(cid)
    ids = np.concatenate([ids, closing])
    pos = np.concatenate([pos, np.full(closing.size, L)])
    order = np.argsort(pos)
    return ids[order], pos[order], L


def edge_pressure_load(geometry, cid, pressure, direction):
    """Uniform surface pressure on an outer edge as tributary site forces."""
    direction = np.asarray(direction, float)

    def fn(mesh):
        ids, pos, L = _edge_stations(mesh, geometry, cid)
        if ids.size < 2:
            raise ScenarioError(f"edge {cid} carries fewer than 2 sites")
        trib = np.empty(pos.size)
        trib[1:-1] = 0.5 * (pos[2:] - pos[:-2])
        trib[0] = 0.5 * (pos[1] - pos[0])
        trib[-1] = 0.5 * (pos[-1] - pos[-2])
        f = pressure * mesh.thickness * trib[:, None] * direction[None, :]
        return ids, f
    return fn


def interface_pressure_load(cid):
    """Unit pressure on a hole interface, radially outward into the
    solid; scale with the load factor to drive the actual pressure."""

    def fn(mesh):
        ids, trib, outward = ms.interface_chord_weights(mesh, cid)
        f = mesh.thickness * trib[:, None] * outward
        return ids, f
    return fn


def cod_gauge(anchor_a, anchor_b, direction):
    """Relative displacement between the sites nearest the two anchors,
    projected on `direction` (a to b positive when separating)."""
    a = np.asarray(anchor_a, float)
    b = np.asarray(anchor_b, float)
    direction = np.asarray(direction, float)

    def build(mesh):
        x = mesh.points.x
        ia = int(np.argmin(np.hypot(x[:, 0] - a[0], x[:, 1] - a[1])))
        ib = int(np.argmin(np.hypot(x[:, 0] - b[0], x[:, 1] - b[1])))
        if ia == ib:
            raise ScenarioError("opening gauge anchors collapse to one site")
        w = np.zeros(3 * mesh.n_sites)
        w[3 * ib:3 * ib + 2] += direction
        w[3 * ia:3 * ia + 2] -= direction
        return w
    return build


def radial_expansion_gauge(centers, radius):
    """Mean radial widening of the hole interfaces as a weight vector.

    Two perpendicular diameter gauges per hole, averaged over holes;
    dotting the weights with the displacement state gives the mean
    radial displacement (positive when the holes widen).
    """
    centers = [np.asarray(c, float) for c in centers]
    probes = ((np.array([1.0, 0.0]), 0, 1.0), (np.array([-1.0, 0.0]), 0, -1.0),
              (np.array([0.0, 1.0]), 1, 1.0), (np.array([0.0, -1.0]), 1, -1.0))

    def build(mesh):
        x = mesh.points.x
        w = np.zeros(3 * mesh.n_sites)
        for c in centers:
            for v, comp, sign in probes:
                p = c + radius * v
                i = int(np.argmin(np.hypot(x[:, 0] - p[0], x[:, 1] - p[1])))
                w[3 * i + comp] += sign * 0.25 / len(centers)
        return w
    return build


# ---------------------------------------------------------------------------
# flux bookkeeping


def node_net_outflow(mesh, state, mats, node_ids, op=None):
    """Net mass rate (kg/s) entering the domain through the given
    transport nodes (positive when they feed the interior)."""
    if op is None:
        op = ph.FacetOperator(mesh)
    eN, _ = op.strains(state.mech_vec())
    lam = ph.conduit_permeabilities(mesh, mats.transport, state.contact, eN)
    C = mesh.conduit_area * lam / mesh.conduit_len
    dp = state.p[mesh.P] - state.p[mesh.Q]
    on = np.zeros(mesh.n_nodes, bool)
    on[node_ids] = True
    out = float(np.sum(C[on[mesh.P]] * dp[on[mesh.P]]))
    out -= float(np.sum(C[on[mesh.Q]] * dp[on[mesh.Q]]))
    return out


def crack_list(mesh, state, op=None):
    """(facet id, opening) pairs for every damaged facet."""
    if op is None:
        op = ph.FacetOperator(mesh)
    eN, _ = op.strains(state.mech_vec())
    w = mt.crack_opening(state.contact, eN, mesh.length)
    ids = np.flatnonzero(state.contact.d > 0.0)
    return ids, w[ids]


# ---------------------------------------------------------------------------
# builders


def _mode_points(spec, geometry, lmin_fine, lmin_coarse):
    if spec.mode == "fine":
        density = ms.DensityField(lmin_fine)
        pts = ms.generate_points(geometry, density, spec.seed)
        pts.physical[:] = True
        return density, pts, None, None
    density = ms.DensityField(lmin_coarse)
    if spec.mode == "coarse":
        # a standalone coarse run is a legitimate (under-resolved)
        # discretization, not a refinement scaffold: everything may crack
        pts = ms.generate_points(geometry, density, spec.seed)
        pts.physical[:] = True
        return density, pts, None, None
    # the scaffold is a coarse subsample of the matching fine run's
    # generators, so refined patches rebuild that run's mesh exactly
    cfg = ad.RefinementConfig(lmin_fine=lmin_fine, lmin_coarse=lmin_coarse)
    pool = ms.generate_points(geometry, ms.DensityField(lmin_fine), spec.seed)
    pts = ms.thin_points(geometry, pool, density)
    return density, pts, cfg, pool


def _rect(w, h):
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def build_scenario(spec):
    mats = spec_materials(spec)
    if spec.kind == "pressurized_block":
        return _build_block(spec, mats)
    if spec.kind == "bend2d_with_pressure":
        return _build_bend(spec, mats)
    return _build_rebar(spec, mats)


def _build_block(spec, mats):
    lf = spec.lmin_fine or 0.1
    lc = spec.lmin_coarse or 0.2
    geo = ms.Geometry(_rect(1.0, 1.0), (), 1.0)
    density, pts, cfg, pool = _mode_points(spec, geo, lf, lc)
    lc_case = ph.LoadCase(
        dirichlet_mech=[(site_nearest((0, 0)), 0, 0.0, False),
                        (site_nearest((0, 0)), 1, 0.0, False),
                        (site_nearest((1, 0)), 1, 0.0, False)],
        dirichlet_p=[(nodes_on_curves(3), spec.p_in, False),
                     (nodes_on_curves(1), spec.p_out, False)],
    )
    ctrl = sv.StepController(mode="direct", increment=0.0,
                             max_steps=spec.max_steps or 1,
                             tol_rel=spec.tol_rel)
    prob = ad.Problem(geometry=geo, density=density, points=pts, mats=mats,
                      loadcase=lc_case, controller=ctrl, refine_cfg=cfg,
                      insert_pool=pool, seed=spec.seed)
    prob.measure = _block_measure(spec, prob)
    return prob


def _block_measure(spec, prob):
    def measure(mesh, state, solver):
        inflow = node_net_outflow(mesh, state, prob.mats,
                                  ms.boundary_nodes_on(mesh, 3), solver.op)
        outflow = -node_net_outflow(mesh, state, prob.mats,
                                    ms.boundary_nodes_on(mesh, 1), solver.op)
        sealed = (node_net_outflow(mesh, state, prob.mats,
                                   ms.boundary_nodes_on(mesh, 0), solver.op)
                  + node_net_outflow(mesh, state, prob.mats,
                                     ms.boundary_nodes_on(mesh, 2), solver.op))
        return {"flux": inflow, "outflow": outflow, "sealed_flux": sealed}
    return measure


def _build_bend(spec, mats):
    span, depth = spec.span, spec.depth
    lf = spec.lmin_fine or 0.006
    lc = spec.lmin_coarse or 0.02
    # elastic platen disks at the supports and under the load point keep
    # the reaction from shearing single particles off the specimen
    r_arm = 2.2 * max(lf, lc if spec.mode != "fine" else lf)
    armor = (((0.0, 0.0), r_arm), ((span, 0.0), r_arm),
             ((0.5 * span, depth), r_arm))
    geo = ms.Geometry(_rect(span, depth), (), 1.0, armor)
    density, pts, cfg, pool = _mode_points(spec, geo, lf, lc)

    def top_point_load(mesh):
        ids = site_nearest((0.5 * span, depth))(mesh)
        return ids, np.array([[0.0, -1.0]])

    # the bottom-face water acts through the pore pressure alone, so the
    # b = 0 run degenerates to the uncoupled mechanical problem
    lc_case = ph.LoadCase(
        dirichlet_mech=[(site_nearest((0, 0)), 0, 0.0, False),
                        (site_nearest((0, 0)), 1, 0.0, False),
                        (site_nearest((span, 0)), 1, 0.0, False)],
        dirichlet_p=[(nodes_on_curves(0), spec.bottom_pressure, False),
                     (nodes_on_curves(2), 0.0, False)],
        forces=[(top_point_load, True)],
    )
    half_gap = max(lf, span / 40.0)
    gauge = cod_gauge((0.5 * span - half_gap, 0.0),
                      (0.5 * span + half_gap, 0.0), (1.0, 0.0))
    ctrl = sv.StepController(mode="indirect_cod",
                             increment=spec.increment or 2.0e-6,
                             max_steps=spec.max_steps or 25,
                             tol_rel=spec.tol_rel, gauge_builder=gauge)
    prob = ad.Problem(geometry=geo, density=density, points=pts, mats=mats,
                      loadcase=lc_case, controller=ctrl, refine_cfg=cfg,
                      insert_pool=pool, prestep=True, seed=spec.seed)
    prob.measure = _bend_measure(spec, prob, gauge)
    return prob


def _bend_measure(spec, prob, gauge):
    def measure(mesh, state, solver):
        inflow = node_net_outflow(mesh, state, prob.mats,
                                  ms.boundary_nodes_on(mesh, 0), solver.op)
        ids, w = crack_list(mesh, state, solver.op)
        return {"flux": inflow, "cod": float(gauge(mesh) @ state.mech_vec()),
                "n_cracked": int(ids.size),
                "max_opening": float(w.max()) if w.size else 0.0}
    return measure


def _build_rebar(spec, mats):
    if spec.kind == "single_rebar":
        W, H = spec.block or (0.075, 0.075)
        centers = spec.rebar_centers or ((0.5 * W, 0.5 * H),)
        lf = spec.lmin_fine or 0.003
        lc = spec.lmin_coarse or 0.010
    else:
        W, H = spec.block or (0.25, 0.125)
        centers = spec.rebar_centers or tuple(
            (0.05 * (1 + k), 0.04) for k in range(4))
        lf = spec.lmin_fine or 0.004
        lc = spec.lmin_coarse or 0.014
    R = spec.rebar_radius
    for cx, cy in centers:
        if not (R + lf < cx < W - R - lf and R + lf < cy < H - R - lf):
            raise ScenarioError(
                f"rebar at ({cx:g}, {cy:g}) not strictly inside the block")
    holes = tuple(ms.CircleHole(np.array(c, float), R) for c in centers)
    geo = ms.Geometry(_rect(W, H), holes, 1.0)
    density, pts, cfg, pool = _mode_points(spec, geo, lf, lc)
    if cfg is not None:
        # a cover-cracking corridor is a narrow feature; the stock radii
        # are sized for structural spans and would swallow a small block
        cfg = replace(cfg, r_f=2.0 * lf, r_t=4.0 * lf)
    ifc = tuple(4 + k for k in range(len(centers)))

    lc_case = ph.LoadCase(
        dirichlet_mech=[(site_nearest((0, 0)), 0, 0.0, False),
                        (site_nearest((0, 0)), 1, 0.0, False),
                        (site_nearest((W, 0)), 1, 0.0, False)],
        dirichlet_p=([(nodes_on_curves(0, 1, 2, 3), 0.0, False)]
                     + [(nodes_on_curves(c), 1.0, True) for c in ifc]),
        forces=[(interface_pressure_load(c), True) for c in ifc],
    )
    cc = sv.CorrosionControl(i_cor=spec.i_cor, alpha_e=spec.alpha_e,
                             dt_days=spec.dt_days, interface_curves=ifc)
    ctrl = sv.StepController(mode="corrosion", increment=1.0,
                             max_steps=spec.max_steps or 10,
                             tol_rel=spec.tol_rel, corrosion=cc,
                             gauge_builder=radial_expansion_gauge(centers, R))
    prob = ad.Problem(geometry=geo, density=density, points=pts, mats=mats,
                      loadcase=lc_case, controller=ctrl, refine_cfg=cfg,
                      insert_pool=pool, seed=spec.seed)
    prob.measure = _rebar_measure(spec, prob, ifc)
    return prob


def _rebar_measure(spec, prob, ifc):
    def measure(mesh, state, solver):
        ifc_nodes = np.flatnonzero(np.isin(mesh.node_curve, ifc))
        inflow = node_net_outflow(mesh, state, prob.mats, ifc_nodes, solver.op)
        outer = np.flatnonzero(np.isin(mesh.node_curve, (0, 1, 2, 3)))
        outflow = -node_net_outflow(mesh, state, prob.mats, outer, solver.op)
        ids, w = crack_list(mesh, state, solver.op)
        return {
            "flux": outflow,
            "interface_flux": inflow,
            "mean_interface_pressure": (float(np.mean(state.p[ifc_nodes]))
                                        if ifc_nodes.size else 0.0),
            "n_cracked": int(ids.size),
            "max_opening": float(w.max()) if w.size else 0.0,
        }
    return measure


def measure_outputs(mesh, state, problem, solver=None):
    """Scenario observables at a committed state, plus support reactions."""
    if solver is None:
        solver = sv.CoupledSolver(mesh, problem.mats, problem.loadcase,
                                  problem.controller)
    out = dict(problem.measure(mesh, state, solver)) if problem.measure else {}
    dofs, r = ph.reaction_forces(mesh, state, problem.mats, problem.loadcase,
                                 solver.op)
    out["reaction_x"] = float(np.sum(r[dofs % 3 == 0]))
    out["reaction_y"] = float(np.sum(r[dofs % 3 == 1]))
    out["dof_count"] = 3 * mesh.n_sites + mesh.n_nodes
    return out
