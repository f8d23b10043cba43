"""Contact damage law and crack-dependent conduit permeability.

The mechanical law is a vectorial damage formulation for the normal and
tangential tractions carried by a facet between two rigid particles.
Strength and softening depend on the straining direction angle, which
sweeps from pure compression (-pi/2) through shear (0) to pure tension
(+pi/2).  Damage is non-decreasing; unloading is secant, straight back
to the origin.

The transport law adds a cubic-law crack term to the intact
permeability of each conduit, using the opening of the facet that the
conduit crosses.

All operations are pure and vectorize over element arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MaterialError(ValueError):
    pass


def _strength_branch_low(ft, alpha, omega):
    # shear/compression regime strength
    s, c = np.sin(omega), np.cos(omega)
    return 16.0 * ft / np.sqrt(s * s + alpha * c * c)


def _strength_branch_high(ft, alpha, omega):
    # shear/tension regime strength, rationalized form of
    # ft*(4.52 sin - sqrt(20.0704 sin^2 + 9 a cos^2))/(0.04 sin^2 - a cos^2)
    # which avoids the 0/0 of the raw quotient near its pole
    s, c = np.sin(omega), np.cos(omega)
    den = 4.52 * s + np.sqrt(20.0704 * s * s + 9.0 * alpha * c * c)
    with np.errstate(divide="ignore"):
        return 9.0 * ft / den


def _find_omega0(ft, alpha):
    # crossover angle where the two strength branches meet; the high
    # branch blows up at tan^2(w) = 25a, so bracket just inside that
    lo = -math.atan(5.0 * math.sqrt(alpha)) + 1e-9
    hi = -1e-9
    f = lambda w: _strength_branch_low(ft, alpha, w) - _strength_branch_high(ft, alpha, w)
    flo, fhi = f(lo), f(hi)
    if not (flo < 0.0 < fhi):
        raise MaterialError("strength branches do not cross; check alpha")
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class MechMaterial:
    """Mechanical contact parameters; the crossover angle is derived."""

    E0: float
    alpha: float
    ft: float
    Gt: float
    omega0: float = field(default=None, repr=False)

    def __post_init__(self):
        if min(self.E0, self.alpha, self.ft, self.Gt) <= 0.0:
            raise MaterialError("E0, alpha, ft, Gt must all be positive")
        if self.omega0 is None:
            object.__setattr__(self, "omega0", _find_omega0(self.ft, self.alpha))
        w0 = self.omega0
        if not (-math.pi / 2 < w0 < 0.0):
            raise MaterialError("crossover angle out of range")
        gap = abs(
            _strength_branch_low(self.ft, self.alpha, w0)
            - _strength_branch_high(self.ft, self.alpha, w0)
        )
        if gap >= 1e-9 * self.ft:
            raise MaterialError("strength branches disagree at the crossover angle")


@dataclass(frozen=True)
class TransportMaterial:
    kappa: float
    xi: float
    mu: float
    rho_fluid: float

    def __post_init__(self):
        if min(self.kappa, self.mu, self.rho_fluid) <= 0.0:
            raise MaterialError("kappa, mu, rho_fluid must be positive")
        if not (0.0 <= self.xi <= 1.0):
            raise MaterialError("tortuosity xi must lie in [0, 1]")


@dataclass(frozen=True)
class MaterialSet:
    """Everything constitutive for one coupled run."""

    mech: MechMaterial
    transport: TransportMaterial
    biot: float

    def __post_init__(self):
        if not (0.0 <= self.biot <= 1.0):
            raise MaterialError("biot coefficient must lie in [0, 1]")


@dataclass
class ContactState:
    """Per-facet history: damage and strain extremes, arrays of equal shape."""

    d: np.ndarray
    max_eN: np.ndarray
    max_eT: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self):
        return ContactState(self.d.copy(), self.max_eN.copy(), self.max_eT.copy())


def derive_contact_params(mat, l):
    """Softening slopes for pure tension and pure shear plus the blend power.

    `l` is the site-to-site element length (scalar or array).  Elements
    long enough to snap back under the given fracture energy are
    rejected.
    """
    l = np.asarray(l, float)
    den_t = 2.0 * mat.E0 * mat.Gt - mat.ft**2 * l
    den_s = 32.0 * mat.alpha * mat.E0 * mat.Gt - 9.0 * mat.ft**2 * l
    bad = (den_t <= 0.0) | (den_s <= 0.0)
    if np.any(bad):
        lmax = float(np.max(l[bad])) if l.ndim else float(l)
        raise MaterialError(
            f"element length {lmax:g} m too long for the given fracture energy (snap-back)"
        )
    Kt = 2.0 * mat.E0 * mat.ft**2 * l / den_t
    Ks = 18.0 * mat.alpha * mat.E0 * mat.ft**2 * l / den_s
    if np.any(Kt <= Ks):
        raise MaterialError("tension slope must exceed shear slope for a real blend power")
    nt = np.log(Kt / (Kt - Ks)) / math.log(1.0 - 2.0 * mat.omega0 / math.pi)
    return Kt, Ks, nt


def effective_strength(mat, omega):
    omega = np.asarray(omega, float)
    return np.where(
        omega < mat.omega0,
        _strength_branch_low(mat.ft, mat.alpha, omega),
        _strength_branch_high(mat.ft, mat.alpha, omega),
    )


def softening_slope(mat, Kt, nt, omega):
    omega = np.asarray(omega, float)
    w0 = mat.omega0
    low = 0.26 * mat.E0 * (1.0 - ((omega + math.pi / 2) / (w0 + math.pi / 2)) ** 2)
    base = np.clip((omega - math.pi / 2) / (w0 - math.pi / 2), 0.0, None)
    high = -Kt * (1.0 - base**nt)
    return np.where(omega < w0, low, high)


def loading_history_chi(mat, state, e_eff, eN, eT, omega):
    """History strain measure; maxima include the current strains."""
    mx_n = np.maximum(state.max_eN, eN)
    mx_t = np.maximum(state.max_eT, np.abs(eT))
    mx = np.sqrt(mx_n**2 + mat.alpha * mx_t**2)
    w0 = mat.omega0
    frac = np.clip(omega / w0, 0.0, 1.0)
    mid = e_eff * frac + mx * (1.0 - frac)
    return np.where(omega < w0, e_eff, np.where(omega < 0.0, mid, mx))


def update_contact(mat, state, eN, eM, l, Kt=None, nt=None):
    """Evaluate tractions and the would-be new history for given strains.

    Pure speculation: nothing is committed here.  Returns
    (s_N, s_M, new_state).  `Kt`/`nt` may be passed precomputed for the
    element lengths `l` to avoid rederivation in hot loops.
    """
    eN = np.asarray(eN, float)
    eM = np.asarray(eM, float)
    if Kt is None or nt is None:
        Kt, _, nt = derive_contact_params(mat, l)
    eT = np.abs(eM)
    e_eff = np.sqrt(eN**2 + mat.alpha * eT**2)
    omega = np.arctan2(eN, math.sqrt(mat.alpha) * eT)

    f = effective_strength(mat, omega)
    K = softening_slope(mat, Kt, nt, omega)
    chi = loading_history_chi(mat, state, e_eff, eN, eT, omega)
    with np.errstate(over="ignore"):
        # transient iterates can push the exponent past float range; the
        # clamp keeps the candidate finite and the cap below absorbs it
        s_eff = f * np.exp(np.minimum(K / f * np.maximum(chi - f / mat.E0, 0.0),
                                      700.0))

    live = e_eff > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        d_cand = 1.0 - s_eff / (mat.E0 * e_eff)
    d_cand = np.where(live, d_cand, 0.0)
    # cap keeps a vanishing residual stiffness on dead facets; the
    # exponential law only reaches d = 1 by floating-point underflow
    d_new = np.maximum(state.d, np.clip(d_cand, 0.0, 1.0 - 1e-6))

    s_N = (1.0 - d_new) * mat.E0 * eN
    s_M = (1.0 - d_new) * mat.E0 * mat.alpha * eM
    new_state = ContactState(
        d=np.where(live, d_new, state.d),
        max_eN=np.where(live, np.maximum(state.max_eN, eN), state.max_eN),
        max_eT=np.where(live, np.maximum(state.max_eT, eT), state.max_eT),
    )
    return s_N, s_M, new_state


def crack_opening(state, eN, l):
    """Conductive opening of the facet crack, floored at zero."""
    return np.maximum(np.asarray(eN, float) * l * state.d, 0.0)


def conduit_permeability(tmat, w_N, S):
    """Intact permeability plus the cubic-law crack contribution."""
    w_N = np.asarray(w_N, float)
    base = tmat.rho_fluid * tmat.kappa / tmat.mu
    return base + tmat.xi * tmat.rho_fluid * w_N**3 / (12.0 * tmat.mu * S)
