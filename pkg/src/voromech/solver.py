"""Staggered solution of the coupled steady-state system.

One CoupledSolver instance owns one mesh.  The outer (stagger) loop
alternates a linear transport solve with permeabilities frozen at the
current crack openings and a mechanical equilibrium solve with facet
pressures frozen; it stops when the permeability array reproduces
itself exactly (provable fixed point, the usual elastic case) or when
the combined DoF vector settles below tol_rel.

The mechanical solve iterates the secant (damaged) stiffness: damage is
re-evaluated from the committed history at every iterate, so the result
is path-independent within the step and safe to discard on rejection.
Load control is direct (prescribed load factor), indirect through a
crack-opening gauge (two right-hand sides, the factor becomes the
solved unknown), or the corrosion volume balance (scalar root-find on
the interface pressure).
"""

from __future__ import annotations

import dataclasses
import hashlib
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import materials as mt
from . import mesh as ms
from . import physics as ph


class SolverError(RuntimeError):
    pass


class StepFailure(SolverError):
    """Equilibrium not reached; the caller may bisect the increment."""


@dataclass
class CorrosionControl:
    """Interface-pressure control by the corrosion volume balance.

    i_cor in microamps per square centimeter, dt in days.  The lost
    steel layer per step is 0.0315 micrometers per unit current density
    per day.  alpha_e is the solid-to-product volume expansion ratio.
    All listed interface curves share one driven pressure.
    """

    i_cor: float
    alpha_e: float
    dt_days: float
    interface_curves: tuple
    res_tol: float = 1e-4

    def __post_init__(self):
        if self.alpha_e <= 1.0:
            raise SolverError("expansion factor must exceed 1")
        if isinstance(self.interface_curves, int):
            self.interface_curves = (self.interface_curves,)
        self.interface_curves = tuple(self.interface_curves)

    @property
    def dx_cor(self):
        return 0.0315e-6 * self.i_cor * self.dt_days

    @property
    def dt_seconds(self):
        return self.dt_days * 86400.0


@dataclass
class StepController:
    mode: str = "direct"
    increment: float = 1.0
    max_steps: int = 1
    tol_rel: float = 1e-6
    max_stagger: int = 40
    max_inner: int = 4000
    max_bisect: int = 5
    anderson_depth: int = 4
    anderson_budget: int = 60
    gauge_builder: object = None
    corrosion: CorrosionControl = None

    def __post_init__(self):
        if self.mode not in ("direct", "indirect_cod", "corrosion"):
            raise SolverError(f"unknown control mode {self.mode!r}")
        if self.tol_rel <= 0.0:
            raise SolverError("tol_rel must be positive")


@dataclass
class StepReport:
    converged: bool = False
    staggers: int = 0
    inner_total: int = 0
    bisections: int = 0
    residual_mech: float = 0.0
    residual_mass: float = 0.0
    wall_time: float = 0.0
    trial_contact: mt.ContactState = None
    root_iters: int = 0


def state_hash(state):
    """Bit-exact digest of all DoFs, history, and the control variable."""
    h = hashlib.sha256()
    for a in (state.u, state.theta, state.p,
              state.contact.d, state.contact.max_eN, state.contact.max_eT):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(np.float64(state.load_factor).tobytes())
    return h.hexdigest()


def _reduced_solve(K, rhs_cols, fixed, fixed_vals):
    """Direct solve with Dirichlet rows eliminated symmetrically."""
    if fixed.size:
        fixed, first = np.unique(fixed, return_index=True)
        fixed_vals = fixed_vals[first]
    n = K.shape[0]
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    Kff = K[free][:, free].tocsc()
    lift = K[free][:, fixed] @ fixed_vals if fixed.size else 0.0
    lu = spla.splu(Kff)
    outs = []
    for rhs, use_lift in rhs_cols:
        x = np.empty(n)
        x[fixed] = fixed_vals if use_lift else 0.0
        b = rhs[free] - (lift if use_lift else 0.0)
        x[free] = lu.solve(b)
        outs.append(x)
    return outs


class CoupledSolver:
    def __init__(self, mesh, mats, loadcase, ctrl):
        self.mesh = mesh
        self.mats = mats
        self.lc = loadcase
        self.ctrl = ctrl
        self.op = ph.FacetOperator(mesh)
        cap = ph.damage_capable(mesh)
        self.cap = cap
        if np.any(cap):
            Kt, _, nt = mt.derive_contact_params(mats.mech, mesh.length[cap])
            self.Kt, self.nt = Kt, nt
        else:
            self.Kt = self.nt = None
        # selectors and load patterns are mesh-fixed; evaluate them once
        self._f_fixed = loadcase.force_vector(mesh, 1.0, scaled_only=False)
        self._f_unit = loadcase.force_vector(mesh, 1.0, scaled_only=True)
        dofs, fix0 = loadcase.mech_constraints(mesh, 0.0)
        _, fix1 = loadcase.mech_constraints(mesh, 1.0)
        if dofs.size:
            dofs, first = np.unique(dofs, return_index=True)
            fix0, fix1 = fix0[first], fix1[first]
        self._mc_dofs = dofs
        self._mc_fix = fix0
        self._mc_unit = fix1 - fix0
        self._mech_prep = None      # (trial_d bytes, lu, Kfc, free)
        self._du_hint = None

    # -- single-field solves -------------------------------------------------

    def _transport_solve(self, lam, load_factor):
        mesh = self.mesh
        nodes, vals = self.lc.p_constraints(mesh, load_factor)
        q = self.lc.source_vector(mesh, load_factor) * mesh.node_vol
        if nodes.size == 0 and not np.any(q):
            return np.zeros(mesh.n_nodes)
        K = ph.transport_matrix(mesh, lam)
        (p,) = _reduced_solve(K, [(q, True)], nodes, vals)
        return p

    def _transport_basis(self, lam):
        """Superposition pair at frozen conductances: the pressure field
        at zero load factor and the increment per unit load factor, so
        p(mu) = p_fix + mu * p_unit while lam holds."""
        mesh = self.mesh
        n0, v0 = self.lc.p_constraints(mesh, 0.0)
        q0 = self.lc.source_vector(mesh, 0.0) * mesh.node_vol
        q1 = self.lc.source_vector(mesh, 1.0) * mesh.node_vol
        if n0.size == 0 and not np.any(q0) and not np.any(q1):
            return np.zeros(mesh.n_nodes), np.zeros(mesh.n_nodes)
        _, v1 = self.lc.p_constraints(mesh, 1.0)
        K = ph.transport_matrix(mesh, lam)
        (p0,) = _reduced_solve(K, [(q0, True)], n0, v0)
        if np.array_equal(v0, v1) and np.array_equal(q0, q1):
            return p0, np.zeros(mesh.n_nodes)
        (p1,) = _reduced_solve(K, [(q1, True)], n0, v1)
        return p0, p1 - p0

    def _mech_prepared(self):
        """Factorization of the reduced secant matrix, reused while the
        relaxed damage vector does not move."""
        key = self._trial_d.tobytes()
        if self._mech_prep is None or self._mech_prep[0] != key:
            K = self.op.stiffness(self.mats.mech, self._trial_d)
            fixed = self._mc_dofs
            free = np.ones(K.shape[0], dtype=bool)
            free[fixed] = False
            lu = spla.splu(K[free][:, free].tocsc())
            Kfc = K[free][:, fixed] if fixed.size else None
            self._mech_prep = (key, lu, Kfc, free)
        return self._mech_prep

    def _mech_solve(self, rhs_cols, fixed_vals):
        _, lu, Kfc, free = self._mech_prepared()
        fixed = self._mc_dofs
        lift = Kfc @ fixed_vals if fixed.size else 0.0
        outs = []
        for rhs, use_lift in rhs_cols:
            x = np.empty(free.shape[0])
            x[fixed] = fixed_vals if use_lift else 0.0
            x[free] = lu.solve(rhs[free] - (lift if use_lift else 0.0))
            outs.append(x)
        return outs

    def _mech_iterate(self, state, p_fix, p_unit, load_factor, indirect_target=None):
        """One secant-stiffness pass; returns (mech vector, load factor).

        Under indirect control the load-scaled pore-pressure field sits
        in the mu-proportional column, so the factor that satisfies the
        gauge already carries its own pore feedback.
        """
        mesh, op, mats = self.mesh, self.op, self.mats
        zeros = np.zeros(mesh.n_facets)
        fixed_vals = self._mc_fix + load_factor * self._mc_unit
        if indirect_target is None:
            p = p_fix + load_factor * p_unit
            pf = ph.facet_pressure(p[mesh.P], p[mesh.Q])
            rhs = (self._f_fixed + load_factor * self._f_unit
                   + op.scatter_tractions(mats.biot * pf, zeros))
            (v,) = self._mech_solve([(rhs, True)], fixed_vals)
            mu = load_factor
        else:
            g, target = indirect_target
            pf_fix = ph.facet_pressure(p_fix[mesh.P], p_fix[mesh.Q])
            pf_unit = ph.facet_pressure(p_unit[mesh.P], p_unit[mesh.Q])
            rhs_fix = (self._f_fixed
                       + op.scatter_tractions(mats.biot * pf_fix, zeros))
            rhs_unit = (self._f_unit
                        + op.scatter_tractions(mats.biot * pf_unit, zeros))
            v_fix, v_unit = self._mech_solve(
                [(rhs_fix, True), (rhs_unit, False)], fixed_vals)
            denom = g @ v_unit
            if abs(denom) < 1e-300:
                raise SolverError("control gauge insensitive to the unit load")
            mu = (target - g @ v_fix) / denom
            v = v_fix + mu * v_unit
        return v, mu

    def _update_damage(self, state, v):
        eN, eM = self.op.strains(v)
        cap = self.cap
        trial = state.contact.copy()
        if np.any(cap):
            sub = mt.ContactState(state.contact.d[cap], state.contact.max_eN[cap],
                                  state.contact.max_eT[cap])
            _, _, tr = mt.update_contact(self.mats.mech, sub, eN[cap], eM[cap],
                                         self.mesh.length[cap], self.Kt, self.nt)
            trial.d[cap] = tr.d
            trial.max_eN[cap] = tr.max_eN
            trial.max_eT[cap] = tr.max_eT
        return trial, eN

    # -- coupled equilibrate ---------------------------------------------------

    def equilibrate(self, state, load_factor=None, indirect_target=None):
        """Drive `state` to coupled equilibrium; mutates u, theta, p and
        load_factor, leaves committed histories in state.contact untouched.

        Returns a StepReport carrying the trial contact state to commit.
        """
        t0 = time.perf_counter()
        ctrl, mesh = self.ctrl, self.mesh
        if load_factor is None:
            load_factor = state.load_factor
        prev = getattr(self, "_trial_d", None)
        if prev is not None and prev.shape == state.contact.d.shape:
            # nearby re-solves (outer root-find probes) reuse the settled
            # damage pattern; the fixpoint does not depend on this start
            self._trial_d = np.maximum(prev, state.contact.d)
        else:
            self._trial_d = state.contact.d.copy()
        trial = state.contact.copy()
        v = state.mech_vec()
        p = state.p.copy()
        eN, _ = self.op.strains(v)
        rep = StepReport()

        lam = ph.conduit_permeabilities(mesh, self.mats.transport, trial, eN)
        p_fix, p_unit = self._transport_basis(lam)
        converged = False
        for stag in range(ctrl.max_stagger):
            rep.staggers = stag + 1

            hist_v, hist_r = [], []
            for inner in range(ctrl.max_inner):
                rep.inner_total += 1
                v_hat, mu = self._mech_iterate(state, p_fix, p_unit,
                                               load_factor, indirect_target)
                r = v_hat - v
                if inner >= ctrl.anderson_budget:
                    # a crack-pattern bifurcation defeats extrapolation;
                    # heavily damped substitution grinds through it
                    v_new = v + 0.5 * r
                    theta = 0.5
                elif inner == 0:
                    hist_v.append(v.copy())
                    hist_r.append(r.copy())
                    v_new = v + r
                    theta = 1.0
                else:
                    # Anderson mixing; plain substitution converges only
                    # linearly once facets soften
                    hist_v.append(v.copy())
                    hist_r.append(r.copy())
                    if len(hist_v) > ctrl.anderson_depth + 1:
                        hist_v.pop(0)
                        hist_r.pop(0)
                    dR = np.stack([hist_r[i + 1] - hist_r[i]
                                   for i in range(len(hist_r) - 1)], axis=1)
                    dV = np.stack([hist_v[i + 1] - hist_v[i]
                                   for i in range(len(hist_v) - 1)], axis=1)
                    gam, *_ = np.linalg.lstsq(dR, r, rcond=None)
                    v_new = v + r - (dV + dR) @ gam
                    wild = (np.linalg.norm(v_new - v)
                            > 5.0 * np.linalg.norm(r) + 1e-300)
                    if wild or not np.all(np.isfinite(v_new)):
                        hist_v, hist_r = [hist_v[-1]], [hist_r[-1]]
                        v_new = v + r
                    theta = 1.0
                trial, eN = self._update_damage(state, v_new)
                d_shift = np.max(np.abs(trial.d - self._trial_d)) if trial.d.size else 0.0
                self._trial_d += theta * (trial.d - self._trial_d)
                scale = np.max(np.abs(v_new)) + 1e-300
                u_shift = np.max(np.abs(v_new - v)) / scale
                v = v_new
                load_factor = mu
                if getattr(self, "_trace", None) is not None:
                    self._trace.append((d_shift, u_shift,
                                        float(trial.d.max()),
                                        int((trial.d > 0).sum())))
                if d_shift < 1e-8 and u_shift < ctrl.tol_rel:
                    break
            else:
                raise StepFailure("mechanical iteration did not settle")

            p = p_fix + load_factor * p_unit
            lam_new = ph.conduit_permeabilities(mesh, self.mats.transport, trial, eN)
            if np.array_equal(lam_new, lam):
                # p was built from exactly these inputs; nothing to redo
                converged = True
                break
            lam = lam_new
            p_fix, p_unit = self._transport_basis(lam_new)
            p_next = p_fix + load_factor * p_unit
            p_scale = np.max(np.abs(p_next)) + 1e-300
            drift = np.max(np.abs(p_next - p)) / p_scale
            p = p_next
            if drift < ctrl.tol_rel:
                converged = True
                break
        if not converged:
            raise StepFailure("stagger loop did not converge")

        state.set_mech_vec(v)
        state.p = p
        state.load_factor = load_factor
        rep.converged = True
        rep.trial_contact = trial
        r_m, r_q = ph.assemble_residuals(mesh,
            _trial_view(state, trial), self.mats, self.lc, self.op)
        rep.residual_mech = float(np.max(np.abs(r_m)))
        rep.residual_mass = float(np.max(np.abs(r_q)))
        rep.wall_time = time.perf_counter() - t0
        return rep

    # -- corrosion root-find ---------------------------------------------------

    def corrosion_residual(self, base, state, cc, g, du0, du):
        """Volume balance misfit at trial mean radial expansion du.

        The coupled solve runs under expansion control (the interface
        pressure is the resulting load factor), which stays well posed
        through the cracking peak where pressure control snaps.  The
        mech vector warm-starts from the previous probe; the trial
        damage is a pure function of kinematics and committed history,
        so the probe result does not depend on the starting vector.
        """
        rep = self.equilibrate(state, indirect_target=(g, du0 + du))
        q_len = self.interface_outflow(state, rep.trial_contact, cc) / (
            self.mats.transport.rho_fluid)
        dx = cc.dx_cor
        R = cc.alpha_e * dx - dx - du - q_len * cc.dt_seconds
        return R, rep

    def interface_outflow(self, state, contact, cc):
        """Mass rate leaving the interface nodes into the domain, per
        unit interface area (kg/s/m^2 divided later by fluid density)."""
        mesh = self.mesh
        eN, _ = self.op.strains(state.mech_vec())
        lam = ph.conduit_permeabilities(mesh, self.mats.transport, contact, eN)
        C = mesh.conduit_area * lam / mesh.conduit_len
        dp = state.p[mesh.P] - state.p[mesh.Q]
        on = np.isin(mesh.node_curve, cc.interface_curves)
        out = np.sum(C[on[mesh.P]] * dp[on[mesh.P]])
        out -= np.sum(C[on[mesh.Q]] * dp[on[mesh.Q]])
        area = 0.0
        for cid in cc.interface_curves:
            _, trib, _ = ms.interface_chord_weights(mesh, cid)
            area += trib.sum() * mesh.thickness
        return out / area

    @staticmethod
    def restore_dofs(state, snap):
        state.u[:] = snap.u
        state.theta[:] = snap.theta
        state.p[:] = snap.p
        state.load_factor = snap.load_factor

    def corrosion_step(self, state, cc, gauge_builder):
        """Advance one corrosion increment; returns (report, p_interface).

        Finds the mean interface expansion whose converged coupled
        solution balances the produced corrosion volume: expansion =
        produced volume - product volume transported away.  The root in
        du always lies in [lo, produced] since transport only removes
        volume; within the bracket secant steps, bisection as fallback.
        """
        base = state.copy()
        g = gauge_builder(self.mesh)
        du0 = float(g @ base.mech_vec())
        prod = (cc.alpha_e - 1.0) * cc.dx_cor
        tol = cc.res_tol * prod
        box = {"it": 0, "cur": None, "rep": None}

        def evalat(du):
            R, rep = self.corrosion_residual(base, state, cc, g, du0, du)
            box["it"] += 1
            box["cur"] = du
            box["rep"] = rep
            return R

        def settle(du, R):
            if box["cur"] != du:
                R = evalat(du)
            box["rep"].root_iters = box["it"]
            self._du_hint = du
            return box["rep"], state.load_factor

        du_a = 0.0
        if self._du_hint is not None:
            # the balance point drifts slowly between steps
            du_a = float(np.clip(self._du_hint, -4.0 * prod, 0.95 * prod))
        R_a = evalat(du_a)
        if abs(R_a) < tol:
            return settle(du_a, R_a)
        du_b, R_b = prod, None
        while R_a < 0.0:
            # outflow already beats production at frozen expansion; the
            # interface contracts this step
            du_b, R_b = du_a, R_a
            du_a -= prod
            if du_a < -8.0 * prod:
                raise StepFailure("corrosion volume balance lost its bracket")
            R_a = evalat(du_a)
        if R_b is None:
            R_b = evalat(du_b)
        # R_a > 0; R(prod) = -q*dt <= 0 so R_b <= 0 unless flow reversed
        if R_b > 0.0:
            raise StepFailure("corrosion volume balance not bracketed")
        du1, R1 = du_b, R_b
        du_p, R_p = du_a, R_a
        for _ in range(60):
            if abs(R1) < tol:
                return settle(du1, R1)
            du2 = (du1 - R1 * (du1 - du_p) / (R1 - R_p)
                   if R1 != R_p else 0.5 * (du_a + du_b))
            if not (min(du_a, du_b) < du2 < max(du_a, du_b)):
                du2 = 0.5 * (du_a + du_b)
            du_p, R_p = du1, R1
            du1 = du2
            R1 = evalat(du1)
            if R1 > 0:
                du_a, R_a = du1, R1
            else:
                du_b, R_b = du1, R1
        raise StepFailure(
            f"corrosion volume root-find stalled, bracket ({du_a:g}, {du_b:g})")


def _trial_view(state, trial_contact):
    view = ph.SystemState(state.u, state.theta, state.p, trial_contact,
                          state.load_factor)
    return view


def solve_step(solver, state, target_increment=None, gauge_target=None):
    """One controlled step with increment bisection on failure.

    `state` holds the committed configuration and is mutated to the new
    converged configuration on success (histories committed).  Returns
    the final StepReport.
    """
    ctrl = solver.ctrl
    base = state.copy()
    # warm iterates must derive from the committed state alone so that a
    # re-solve from a rolled-back snapshot retraces the identical path
    solver._trial_d = state.contact.d.copy()
    solver._du_hint = None
    inc = ctrl.increment if target_increment is None else target_increment
    rep = None
    for attempt in range(ctrl.max_bisect + 1):
        try:
            if ctrl.mode == "direct":
                rep = solver.equilibrate(state, load_factor=base.load_factor + inc)
            elif ctrl.mode == "indirect_cod":
                g = ctrl.gauge_builder(solver.mesh)
                target = (gauge_target if gauge_target is not None
                          else (g @ base.mech_vec()) + inc)
                rep = solver.equilibrate(state, indirect_target=(g, target))
            elif ctrl.mode == "corrosion":
                cc = ctrl.corrosion
                if inc != ctrl.increment:
                    # bisected step shortens the exposure window
                    cc = dataclasses.replace(
                        cc, dt_days=cc.dt_days * inc / ctrl.increment)
                rep, _ = solver.corrosion_step(state, cc, ctrl.gauge_builder)
            rep.bisections = attempt
            state.contact = rep.trial_contact
            return rep
        except StepFailure:
            if attempt == ctrl.max_bisect:
                raise
            solver.restore_dofs(state, base)
            state.contact = base.contact.copy()
            inc *= 0.5
    raise StepFailure("unreachable")
