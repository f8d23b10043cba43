"""Kinematics, poromechanical coupling, and residual assembly.

Mechanical DoF layout: three per site, interleaved (ux, uy, theta), so
site i owns vector entries 3i..3i+2.  Transport DoF layout: one
pressure per dual node.

Strains follow from rigid-body kinematics of the two particles sharing
a facet, evaluated at the facet centroid under small rotations.  The
facet operator G maps the six DoFs of a facet's site pair to its local
strain pair (normal, tangential); its transpose scatters tractions back
as nodal forces and moments, which keeps the stiffness symmetric and
the moment balance exactly consistent with the force balance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import materials as mt


class PhysicsError(RuntimeError):
    pass


def perp(r):
    """90-degree counterclockwise rotation; action of a unit spin at lever r."""
    r = np.asarray(r, float)
    return np.stack([-r[..., 1], r[..., 0]], axis=-1)


def displacement_jump(u_I, th_I, x_I, u_J, th_J, x_J, c):
    """Relative displacement of particle J past particle I at point c."""
    c = np.asarray(c, float)
    side_J = np.asarray(u_J, float) + th_J * perp(c - np.asarray(x_J, float))
    side_I = np.asarray(u_I, float) + th_I * perp(c - np.asarray(x_I, float))
    return side_J - side_I


def facet_strain(jump, l, basis):
    n, m = basis
    return np.dot(jump, n) / l, np.dot(jump, m) / l


def pressure_gradient(p_P, p_Q, h):
    return (p_Q - p_P) / h


def facet_pressure(p_P, p_Q):
    return 0.5 * (p_P + p_Q)


def total_traction(s_N, s_M, p_facet, biot):
    return s_N - biot * p_facet, s_M


@dataclass
class SystemState:
    u: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    contact: mt.ContactState
    load_factor: float = 0.0

    @classmethod
    def zeros(cls, mesh):
        return cls(
            u=np.zeros((mesh.n_sites, 2)),
            theta=np.zeros(mesh.n_sites),
            p=np.zeros(mesh.n_nodes),
            contact=mt.ContactState.zeros(mesh.n_facets),
        )

    def copy(self):
        return SystemState(self.u.copy(), self.theta.copy(), self.p.copy(),
                           self.contact.copy(), self.load_factor)

    def mech_vec(self):
        out = np.empty(3 * self.u.shape[0])
        out[0::3] = self.u[:, 0]
        out[1::3] = self.u[:, 1]
        out[2::3] = self.theta
        return out

    def set_mech_vec(self, v):
        self.u[:, 0] = v[0::3]
        self.u[:, 1] = v[1::3]
        self.theta[:] = v[2::3]


@dataclass
class LoadCase:
    """Boundary conditions and loads, all selector-based so they can be
    re-evaluated on a different mesh after refinement.

    dirichlet_mech: (site_selector(mesh) -> ids, component 0|1|2, value, scaled)
    dirichlet_p:    (node_selector(mesh) -> ids, value, scaled)
    forces:         callable(mesh) -> (site ids, (k,2) force vectors), with flag
    sources:        (node_selector(mesh) -> ids, volumetric rate, scaled)
    Entries with scaled=True multiply by the state's load factor.
    """

    dirichlet_mech: list = field(default_factory=list)
    dirichlet_p: list = field(default_factory=list)
    forces: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    body_force: tuple = (0.0, 0.0)
    body_couple: float = 0.0

    def mech_constraints(self, mesh, load_factor):
        dofs, vals = [], []
        for sel, comp, value, scaled in self.dirichlet_mech:
            ids = np.asarray(sel(mesh), int)
            dofs.append(3 * ids + comp)
            vals.append(np.full(ids.shape, value * (load_factor if scaled else 1.0)))
        if not dofs:
            return np.zeros(0, int), np.zeros(0)
        return np.concatenate(dofs), np.concatenate(vals)

    def p_constraints(self, mesh, load_factor):
        nodes, vals = [], []
        for sel, value, scaled in self.dirichlet_p:
            ids = np.asarray(sel(mesh), int)
            nodes.append(ids)
            vals.append(np.full(ids.shape, value * (load_factor if scaled else 1.0)))
        if not nodes:
            return np.zeros(0, int), np.zeros(0)
        return np.concatenate(nodes), np.concatenate(vals)

    def force_vector(self, mesh, load_factor, scaled_only=None):
        """Assembled external mechanical load vector (3N,).

        scaled_only=True builds only the unit pattern of scaled entries
        (at unit load factor); False only the fixed part; None the total.
        """
        f = np.zeros(3 * mesh.n_sites)
        for entry in self.forces:
            fn, scaled = entry
            if scaled_only is True and not scaled:
                continue
            if scaled_only is False and scaled:
                continue
            ids, vecs = fn(mesh)
            ids = np.asarray(ids, int)
            vecs = np.asarray(vecs, float)
            fac = 1.0 if scaled_only is True or not scaled else load_factor
            np.add.at(f, 3 * ids, fac * vecs[:, 0])
            np.add.at(f, 3 * ids + 1, fac * vecs[:, 1])
        if scaled_only is not True:
            bx, by = self.body_force
            if bx or by or self.body_couple:
                V = mesh.cell_vol
                f[0::3] += V * bx
                f[1::3] += V * by
                arm = mesh.cell_centroid - mesh.points.x
                f[2::3] += V * (arm[:, 0] * by - arm[:, 1] * bx) + V * self.body_couple
        return f

    def source_vector(self, mesh, load_factor):
        q = np.zeros(mesh.n_nodes)
        for sel, value, scaled in self.sources:
            ids = np.asarray(sel(mesh), int)
            q[ids] += value * (load_factor if scaled else 1.0)
        return q


class FacetOperator:
    """Per-mesh kinematic operator: e = G . dofs, f_int = (A l) G^T . t."""

    def __init__(self, mesh):
        F = mesh.n_facets
        x = mesh.points.x
        rI = mesh.center - x[mesh.I]
        rJ = mesh.center - x[mesh.J]
        B = np.zeros((F, 2, 6))
        B[:, 0, 0] = -1.0
        B[:, 1, 1] = -1.0
        B[:, 0, 2] = rI[:, 1]
        B[:, 1, 2] = -rI[:, 0]
        B[:, 0, 3] = 1.0
        B[:, 1, 4] = 1.0
        B[:, 0, 5] = -rJ[:, 1]
        B[:, 1, 5] = rJ[:, 0]
        R = np.stack([mesh.normal, mesh.tangent], axis=1)
        self.G = np.einsum("fab,fbc->fac", R, B) / mesh.length[:, None, None]
        d = np.stack([3 * mesh.I, 3 * mesh.I + 1, 3 * mesh.I + 2,
                      3 * mesh.J, 3 * mesh.J + 1, 3 * mesh.J + 2], axis=1)
        self.dofs = d
        self.weight = mesh.area * mesh.length
        self.rows = np.repeat(d, 6, axis=1).ravel()
        self.cols = np.tile(d, (1, 6)).ravel()
        self.ndof = 3 * mesh.n_sites

    def strains(self, mech_vec):
        dv = mech_vec[self.dofs]
        e = np.einsum("fij,fj->fi", self.G, dv)
        return e[:, 0], e[:, 1]

    def scatter_tractions(self, tN, tM):
        t = np.stack([tN, tM], axis=1)
        fe = self.weight[:, None] * np.einsum("fji,fj->fi", self.G, t)
        return np.bincount(self.dofs.ravel(), weights=fe.ravel(), minlength=self.ndof)

    def stiffness(self, mat, damage):
        # damage is capped below 1, so the secant matrix stays invertible
        # and matches the scattered tractions exactly
        intact = 1.0 - damage
        kN = intact * mat.E0
        kM = intact * mat.E0 * mat.alpha
        D = np.zeros((damage.shape[0], 2, 2))
        D[:, 0, 0] = kN
        D[:, 1, 1] = kM
        Ke = self.weight[:, None, None] * np.einsum("fji,fjk,fkl->fil", self.G, D, self.G)
        K = sp.coo_matrix((Ke.ravel(), (self.rows, self.cols)),
                          shape=(self.ndof, self.ndof))
        return K.tocsr()


def transport_matrix(mesh, lam):
    """Two-point flux Laplacian from conduit conductances."""
    C = mesh.conduit_area * lam / mesh.conduit_len
    T = mesh.n_nodes
    i, j = mesh.P, mesh.Q
    K = sp.coo_matrix(
        (np.concatenate([C, C, -C, -C]),
         (np.concatenate([i, j, i, j]), np.concatenate([i, j, j, i]))),
        shape=(T, T))
    return K.tocsr()


def conduit_permeabilities(mesh, tmat, contact, eN):
    w = mt.crack_opening(contact, eN, mesh.length)
    return mt.conduit_permeability(tmat, w, mesh.conduit_area)


def armored_sites(mesh):
    """Sites inside a load-hardware disk of the geometry (kept elastic)."""
    x = mesh.points.x
    near = np.zeros(x.shape[0], dtype=bool)
    for ctr, r in mesh.geometry.armor:
        near |= np.hypot(x[:, 0] - ctr[0], x[:, 1] - ctr[1]) <= r
    return near


def damage_capable(mesh):
    """Facets allowed to damage: both end sites carry final resolution.

    Facets touching the provisional coarse discretization stay elastic;
    refinement is expected to replace them before they go inelastic.
    Contacts touching load-introduction hardware never damage at all.
    """
    phys = mesh.points.physical
    cap = phys[mesh.I] & phys[mesh.J]
    if mesh.geometry.armor:
        near = armored_sites(mesh)
        cap &= ~(near[mesh.I] | near[mesh.J])
    return cap


def evaluate_tractions(mesh, op, mats, state, Kt=None, nt=None):
    """Constitutive sweep at the current kinematics.

    Returns (tN, tM, sN, sM, eN, eM, trial contact state).  Histories in
    `state.contact` are the committed ones; the trial state is returned
    for the caller to commit or discard.  The damage law runs only on
    damage-capable facets; the rest evaluate elastically at committed
    damage.  `Kt`/`nt` may be precomputed for the capable subset.
    """
    eN, eM = op.strains(state.mech_vec())
    cap = damage_capable(mesh)
    sN = (1.0 - state.contact.d) * mats.mech.E0 * eN
    sM = (1.0 - state.contact.d) * mats.mech.E0 * mats.mech.alpha * eM
    trial = state.contact.copy()
    if np.any(cap):
        sub = mt.ContactState(state.contact.d[cap], state.contact.max_eN[cap],
                              state.contact.max_eT[cap])
        sN_c, sM_c, tr = mt.update_contact(mats.mech, sub, eN[cap], eM[cap],
                                           mesh.length[cap], Kt, nt)
        sN[cap] = sN_c
        sM[cap] = sM_c
        trial.d[cap] = tr.d
        trial.max_eN[cap] = tr.max_eN
        trial.max_eT[cap] = tr.max_eT
    pf = facet_pressure(state.p[mesh.P], state.p[mesh.Q])
    tN, tM = total_traction(sN, sM, pf, mats.biot)
    return tN, tM, sN, sM, eN, eM, trial


def assemble_residuals(mesh, state, mats, loadcase, op=None):
    """Out-of-balance force/moment and mass-rate vectors.

    Mechanical rows follow f_int - f_ext per DoF (moments about each
    site).  Transport rows are net outward mass rate minus sources.
    Dirichlet rows are replaced by constraint violation.
    """
    if np.any(np.isnan(state.u)) or np.any(np.isnan(state.theta)) or np.any(np.isnan(state.p)):
        raise PhysicsError("state contains NaN")
    if op is None:
        op = FacetOperator(mesh)
    tN, tM, sN, sM, eN, eM, trial = evaluate_tractions(mesh, op, mats, state)

    r_mech = op.scatter_tractions(tN, tM)
    r_mech -= loadcase.force_vector(mesh, state.load_factor)

    lam = conduit_permeabilities(mesh, mats.transport, trial, eN)
    C = mesh.conduit_area * lam / mesh.conduit_len
    dp = state.p[mesh.P] - state.p[mesh.Q]
    r_mass = np.bincount(mesh.P, weights=C * dp, minlength=mesh.n_nodes)
    r_mass -= np.bincount(mesh.Q, weights=C * dp, minlength=mesh.n_nodes)
    r_mass -= mesh.node_vol * loadcase.source_vector(mesh, state.load_factor)

    mdofs, mvals = loadcase.mech_constraints(mesh, state.load_factor)
    r_mech[mdofs] = state.mech_vec()[mdofs] - mvals
    pnodes, pvals = loadcase.p_constraints(mesh, state.load_factor)
    r_mass[pnodes] = state.p[pnodes] - pvals
    return r_mech, r_mass


def reaction_forces(mesh, state, mats, loadcase, op=None):
    """Unconstrained residual at constrained DoFs: the support reactions."""
    if op is None:
        op = FacetOperator(mesh)
    tN, tM, *_ = evaluate_tractions(mesh, op, mats, state)
    r = op.scatter_tractions(tN, tM) - loadcase.force_vector(mesh, state.load_factor)
    mdofs, _ = loadcase.mech_constraints(mesh, state.load_factor)
    return mdofs, r[mdofs]
