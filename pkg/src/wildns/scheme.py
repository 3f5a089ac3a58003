"""Convex-integration drivers for both schemes.

A level-q state carries trajectories of v_q, its time derivative and the
Reynolds stress on a uniform time grid.  One iteration builds, at every
sample time of the new window,

* the causally mollified fields v_l, d_t v_l, R_l, z_l and the mollified
  nonlinearity,
* the energy density rho and the amplitudes a_xi,
* the principal, incompressibility and temporal perturbations,
* the new velocity v_{q+1} = v_l + w_{q+1} and its time derivative,
* the stress bundle and the new Reynolds stress.

Time derivatives of slow quantities are exact derivatives of the causal
mollifications (see ``field.onesided_derivative_weights``) pushed through
the chain rule, and time derivatives of the jets are analytic.  With these
choices the level equation holds to round-off once every term, including
the discretisation defect ``R_disc``, is kept; ``R_disc`` collects what the
continuum argument sends to zero (pairwise disjointness of the jets, exact
cancellation of the amplitudes, clamping) and is reported separately so
that the residual of the remaining terms measures the discretisation error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import field as F
from . import jets as J
from .geometry import DirectionSet, default_direction_set, sym_to_frobenius_vec

log = logging.getLogger(__name__)

__all__ = [
    "SchemeError",
    "EnergyConstraintViolated",
    "DatumTooLarge",
    "NegativePumping",
    "ParameterViolation",
    "SeamMismatch",
    "ParamSet",
    "EnergyProfile",
    "VariantB",
    "NoiseData",
    "IterationState",
    "validate_params",
    "init_state",
    "build_rho_gamma",
    "build_amplitudes",
    "cutoff",
    "cutoff_dot",
    "step_sample",
    "iterate",
    "residual",
    "energy_gap",
    "extend_solution",
    "leray",
    "Amplitudes",
    "Perturbation",
    "build_perturbation",
    "corrector_formula",
    "assemble_stress",
    "calibrate_M0",
    "c_lambda",
    "gamma_level",
]

BUNDLE_KEYS = ("R_lin", "R_cor", "R_osc_x", "R_osc_t", "R_com", "R_com1", "R_cut", "R_disc")
PAPER_KEYS = BUNDLE_KEYS[:-1]


class SchemeError(ValueError):
    pass


class EnergyConstraintViolated(SchemeError):
    pass


class DatumTooLarge(SchemeError):
    pass


class NegativePumping(SchemeError):
    pass


class ParameterViolation(SchemeError):
    pass


class SeamMismatch(SchemeError):
    pass


# ----------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParamSet:
    """Parameter ladder lambda_q = a^(b^q) and the derived scales.

    Attributes
    ----------
    a, b : int
    alpha, beta : float
    M0 : float
        Universal constant slot of the increment bounds.
    regime : {"paper", "desk"}
    ell_override : float, optional
        Desk replacement of the mollification scale.
    desk_jets : tuple of (m, r_perp, r_par, mu)
        Desk jet scales for levels 1, 2, ...; empty means the paper scales
        r_par = lambda^(-4/7), r_perp = lambda^(-6/7), mu = lambda^(9/7).
    """

    a: float
    b: int
    alpha: float
    beta: float
    M0: float = 1.0
    regime: str = "desk"
    ell_override: float | None = None
    desk_jets: tuple = ()
    normalize_jets: bool = True

    def __post_init__(self) -> None:
        if self.regime not in ("paper", "desk"):
            raise SchemeError("regime must be 'paper' or 'desk'")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise SchemeError("alpha and beta must lie in (0, 1)")
        if self.a < 2 or self.b < 1:
            raise SchemeError("need a >= 2 and b >= 1")

    def log_lam(self, q: int) -> float:
        return float(self.b) ** q * math.log(self.a)

    def lam(self, q: int) -> float:
        x = self.log_lam(q)
        return math.exp(x) if x < 700 else math.inf

    def delta(self, q: int) -> float:
        """delta_q = lambda_1^{2 beta} lambda_q^{-2 beta} (so delta_1 = 1)."""
        return math.exp(2.0 * self.beta * (self.log_lam(1) - self.log_lam(q)))

    def log_ell(self, q: int) -> float:
        """log of ``ell(q)``, finite even when ell underflows."""
        if self.ell_override is not None:
            return math.log(self.ell_override)
        return -1.5 * self.alpha * self.log_lam(q + 1) - 2.0 * self.log_lam(q)

    def ell(self, q: int) -> float:
        """Mollification scale of the step q -> q+1."""
        return math.exp(self.log_ell(q))

    def t_q(self, q: int) -> float:
        return -2.0 + sum(math.sqrt(self.delta(r)) for r in range(1, q + 1))

    def f_cut(self, q: int) -> float:
        """Frequency cut of z_q: lambda_{q+1}^{alpha/8}."""
        x = self.alpha / 8.0 * self.log_lam(q + 1)
        return math.exp(x) if x < 700 else math.inf

    def jets(self, level: int) -> J.JetParams:
        """Jet scales used to build level ``level`` (>= 1)."""
        if self.desk_jets:
            if level - 1 >= len(self.desk_jets):
                raise SchemeError(f"no desk jet scales configured for level {level}")
            m, rp, rq, mu = self.desk_jets[level - 1]
            return J.desk_jet_params(int(m), float(rp), float(rq), float(mu))
        return J.jet_params(self.lam(level))

    @property
    def c_lambda(self) -> float:
        return c_lambda(default_direction_set())

    def to_json(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "alpha": self.alpha,
            "beta": self.beta,
            "M0": self.M0,
            "regime": self.regime,
            "ell_override": self.ell_override,
            "desk_jets": [list(x) for x in self.desk_jets],
        }


def c_lambda(ds: DirectionSet) -> float:
    """Leading constant of rho that keeps R_l / rho inside the certified ball."""
    return max(2.0, 1.0 / ds.radius_eff)


@dataclass(frozen=True)
class EnergyProfile:
    """Prescribed energy e(t), extended by e(0) to negative times.

    ``kind="affine"`` uses c0 + c1 t; ``kind="table"`` a C^2 cubic spline
    through (times, values).
    """

    kind: str = "affine"
    c0: float = 4.0
    c1: float = 0.0
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in ("affine", "table"):
            raise SchemeError("energy kind must be 'affine' or 'table'")
        if self.kind == "table" and len(self.times) < 2:
            raise SchemeError("tabulated energy needs at least two points")

    def _spline(self) -> CubicSpline:
        return CubicSpline(np.asarray(self.times, float), np.asarray(self.values, float))

    def __call__(self, t) -> np.ndarray:
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        if self.kind == "affine":
            return self.c0 + self.c1 * t
        return self._spline()(t)

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "affine":
            return np.where(t > 0, self.c1, 0.0) + 0.0 * t
        return np.where(t > 0, self._spline()(np.maximum(t, 0.0), 1), 0.0)

    def bounds(self, t_hi: float, n: int = 2001) -> dict:
        ts = np.linspace(0.0, max(t_hi, 0.0), n)
        e = self(ts)
        de = self.derivative(ts)
        return {"e_bar": float(e.max()), "e_lower": float(e.min()), "e_tilde": float(np.abs(de).max())}


@dataclass(frozen=True)
class VariantB:
    """Constants of the prescribed-datum scheme.

    M_L defaults to (L + N)^2; A = 4 M_L; sigma_q = 2^-q; gamma_q = 2^-q
    except gamma_3 = K.
    """

    L: float = 3.0
    N: float = 1.0
    K: float = 1.0
    M_L: float | None = None

    def __post_init__(self) -> None:
        if self.L < 1 or self.N < 1 or self.K < 1:
            raise SchemeError("need L, N, K >= 1")
        if self.M_L is not None and self.M_L < (self.L + self.N) ** 2:
            raise SchemeError("M_L must be at least (L + N)^2")

    @property
    def ML(self) -> float:
        return float(self.M_L) if self.M_L is not None else float((self.L + self.N) ** 2)

    @property
    def A(self) -> float:
        return 4.0 * self.ML

    @staticmethod
    def sigma(q: int) -> float:
        return 2.0 ** (-q)

    def gamma(self, q: int) -> float:
        return float(self.K) if q == 3 else 2.0 ** (-q)


# ----------------------------------------------------------------------------
# parameter ledger


def validate_params(p: ParamSet, profile: EnergyProfile | None = None, *, t_hi: float = 1.0) -> list[dict]:
    """Evaluate every parameter inequality of both schemes.

    Returns
    -------
    list of dict with keys ``group``, ``name``, ``lhs``, ``rhs``, ``passed``.

    Raises
    ------
    ParameterViolation
        In the paper regime, if any line of the prescribed-energy group fails.
    """
    a, b, al, be = p.a, p.b, p.alpha, p.beta
    la = math.log(a)
    rows: list[dict] = []

    def add(group, name, lhs, rhs, ok):
        rows.append({"group": group, "name": name, "lhs": float(lhs), "rhs": float(rhs), "passed": bool(ok)})

    add("energy", "alpha > 18 beta b^2", al, 18 * be * b * b, al > 18 * be * b * b)
    add("energy", "1/7 - 50 alpha > 2 beta b^2", 1 / 7 - 50 * al, 2 * be * b * b, 1 / 7 - 50 * al > 2 * be * b * b)
    add("energy", "1/7 - 160 alpha > 2 beta b", 1 / 7 - 160 * al, 2 * be * b, 1 / 7 - 160 * al > 2 * be * b)
    add("energy", "b in 56 N", b, 56, b % 56 == 0)
    ab = al * b
    add("energy", "alpha b in 8 N", ab, 8, abs(ab / 8 - round(ab / 8)) < 1e-9 and round(ab / 8) >= 1)
    add("energy", "a^(beta b) >= 2", be * b * la, math.log(2.0), be * b * la >= math.log(2.0))
    add("energy", "alpha b > 4", ab, 4, ab > 4)
    if profile is not None:
        bd = profile.bounds(t_hi)
        ebar, elow = bd["e_bar"], bd["e_lower"]
        add("energy", "4 <= e_lower", 4.0, elow, elow >= 4.0)
        add("energy", "e_bar <= a^(3/2 b alpha + 2)", math.log(ebar), (1.5 * b * al + 2) * la, math.log(ebar) <= (1.5 * b * al + 2) * la)
        lhs = math.log(10 * p.M0 * ebar)
        rhs = (11.0 / 96.0 * al - 2 * b * b * be) * p.log_lam(1)
        add("energy", "10 M0 e_bar <= lambda_1^(11 alpha/96 - 2 b^2 beta)", lhs, rhs, lhs <= rhs)
    # mollification scale, q = 0 representative (the conditions are q independent)
    lell = p.log_ell(0)
    add("energy", "ell lambda_q^4 <= lambda_{q+1}^-alpha", lell + 4 * p.log_lam(0), -al * p.log_lam(1), lell + 4 * p.log_lam(0) <= -al * p.log_lam(1) + 1e-12)
    add("energy", "1/ell <= lambda_{q+1}^(2 alpha)", -lell, 2 * al * p.log_lam(1), -lell <= 2 * al * p.log_lam(1) + 1e-12)
    add("datum", "b (3 alpha - 4 beta) > 12", b * (3 * al - 4 * be), 12, b * (3 * al - 4 * be) > 12)
    add("datum", "3 alpha > 16 beta b", 3 * al, 16 * be * b, 3 * al > 16 * be * b)
    add("datum", "alpha > 18 beta b", al, 18 * be * b, al > 18 * be * b)
    add("datum", "161 alpha < 1/7", 161 * al, 1 / 7, 161 * al < 1 / 7)
    add("common", "delta_1 = 1", p.delta(1), 1.0, abs(p.delta(1) - 1.0) < 1e-15)
    if p.regime == "paper":
        bad = [r["name"] for r in rows if r["group"] in ("energy", "common") and not r["passed"]]
        if bad:
            raise ParameterViolation("paper regime parameters violate: " + "; ".join(bad))
    return rows


# ----------------------------------------------------------------------------
# noise bookkeeping


@dataclass(frozen=True)
class NoiseData:
    """The stochastic convolution split as z = exp(t Laplace) u0 + Z.

    ``Z`` starts at t = 0 with Z(0) = 0 (on the noise grid).  For negative
    times z is frozen at z(0).  ``u0`` is absent for the prescribed-energy
    scheme, where z(0) = 0.
    """

    Z: F.TimeTrajectory
    u0: F.SpectralField | None = None

    def _Z_at(self, t: float, grid: F.Grid3) -> F.SpectralField:
        s = max(t, 0.0)
        return self.Z.at_time(s).resize(grid)

    def z_in(self, t: float, grid: F.Grid3) -> F.SpectralField:
        if self.u0 is None:
            return F.zeros(grid)
        return F.heat_semigroup(self.u0.resize(grid), max(t, 0.0))

    def z_q(self, t: float, grid: F.Grid3, fcut: float) -> F.SpectralField:
        Zs = self._Z_at(t, grid)
        if math.isfinite(fcut):
            Zs = F.spectral_filter(Zs, "leq", fcut)
        return self.z_in(t, grid) + Zs

    def z_full(self, t: float, grid: F.Grid3) -> F.SpectralField:
        return self.z_in(t, grid) + self._Z_at(t, grid)


# ----------------------------------------------------------------------------
# state


@dataclass
class IterationState:
    """Level-q iterate on the sample times ``t_lo + i dt``.

    ``R`` is the full Reynolds stress (the bundle including ``R_disc``), so
    that the level equation holds exactly and the next step can rely on it.
    """

    q: int
    variant: str
    params: ParamSet
    noise: NoiseData
    v: F.TimeTrajectory
    dv: F.TimeTrajectory
    R: F.TimeTrajectory
    profile: EnergyProfile | None = None
    vb: VariantB | None = None
    t_stop: float = 1.0
    reports: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self) -> F.Grid3:
        return self.v.grid

    @property
    def times(self) -> np.ndarray:
        return self.v.times

    def z_q(self, i: int, grid: F.Grid3 | None = None) -> F.SpectralField:
        return self.noise.z_q(float(self.times[i]), grid or self.grid, self.params.f_cut(self.q))

    def u(self, i: int) -> F.SpectralField:
        """v_q + z (full stochastic convolution) at sample i."""
        return self.v.at(i) + self.noise.z_full(float(self.times[i]), self.grid)


def init_state(
    variant: str,
    noise: NoiseData,
    params: ParamSet,
    *,
    grid: F.Grid3,
    dt: float,
    t_stop: float,
    t_lo: float | None = None,
    profile: EnergyProfile | None = None,
    vb: VariantB | None = None,
) -> IterationState:
    """Level 0: v_0 = 0 and R_0 = z_0 (x)o z_0 on the scheme window.

    The prescribed-energy window is [-2, t_stop] (or [t_lo, t_stop] for a
    shorter history); the prescribed-datum window is [0, t_stop].

    Raises
    ------
    EnergyConstraintViolated
        If the energy drops below 4 on [0, t_stop].
    DatumTooLarge
        If ||u0||_{L^2} > N.
    """
    variant = variant.upper()
    if variant == "A":
        if profile is None:
            raise SchemeError("the prescribed-energy scheme needs an energy profile")
        if profile.bounds(t_stop)["e_lower"] < 4.0:
            raise EnergyConstraintViolated("e(t) must stay above 4")
        lo = -2.0 if t_lo is None else float(t_lo)
    elif variant == "B":
        if vb is None:
            raise SchemeError("the prescribed-datum scheme needs VariantB constants")
        if noise.u0 is None:
            raise SchemeError("the prescribed-datum scheme needs an initial datum")
        nrm = F.norm(noise.u0, "L", 2)
        if nrm > vb.N * (1 + 1e-12):
            raise DatumTooLarge(f"||u0|| = {nrm:.4g} exceeds N = {vb.N}")
        lo = 0.0
    else:
        raise SchemeError("variant must be A or B")
    steps = (t_stop - lo) / dt
    nst = int(round(steps))
    if abs(steps - nst) > 1e-6 * max(1.0, steps):
        raise SchemeError("window length must be a whole number of steps")
    times = lo + dt * np.arange(nst + 1)
    fc = params.f_cut(0)
    Rs = []
    for t in times:
        z0 = noise.z_q(float(t), grid, fc)
        Rs.append(F.traceless_tensor_product(z0, z0).coeffs)
    zeros = np.zeros((nst + 1, 3, *grid.spec_shape), dtype=complex)
    v = F.TimeTrajectory(grid, lo, dt, zeros)
    st = IterationState(
        q=0,
        variant=variant,
        params=params,
        noise=noise,
        v=v,
        dv=v,
        R=F.TimeTrajectory(grid, lo, dt, np.stack(Rs), "sym", True),
        profile=profile,
        vb=vb,
        t_stop=float(t_stop),
    )
    st.diagnostics["level0"] = {"R_L1": [F.norm(st.R.at(i), "L", 1) for i in range(st.R.nt)]}
    return st


# ----------------------------------------------------------------------------
# pointwise building blocks


def _slots_to_frob(R: np.ndarray) -> np.ndarray:
    """(6, ...) stored slots -> Frobenius coordinates (xx, yy, zz, r2 xy, r2 xz, r2 yz)."""
    r2 = math.sqrt(2.0)
    return np.stack([R[0], R[3], R[5], r2 * R[1], r2 * R[2], r2 * R[4]])


def _frob_norm(R: np.ndarray) -> np.ndarray:
    return np.sqrt(np.tensordot(F.SYM_MULT, R**2, axes=(0, 0)))


def build_rho_gamma(
    R_ell: np.ndarray | F.SpectralField,
    gamma_ell: float | np.ndarray,
    ell: float,
    *,
    c_lam: float | None = None,
) -> np.ndarray:
    """Energy density rho = c_L sqrt(ell^2 + |R_l|^2) + gamma_l on grid points.

    ``R_ell`` is either a symmetric tensor field or its physical values
    (6, n, n, n).  ``c_lam`` defaults to the direction-set constant.
    """
    vals = R_ell.physical() if isinstance(R_ell, F.SpectralField) else np.asarray(R_ell)
    c = c_lambda(default_direction_set()) if c_lam is None else c_lam
    return c * np.sqrt(ell**2 + _frob_norm(vals) ** 2) + gamma_ell


def gamma_level(profile: EnergyProfile, p: ParamSet, q: int, t: float, energy: float, *, strict: bool = False, tol: float = 1e-12) -> float:
    """gamma_q(t) = [e(t)(1 - delta_{q+2}) - ||v_q + z_q||^2] / (3 (2pi)^3), clamped at 0."""
    g = (float(profile(t)) * (1.0 - p.delta(q + 2)) - energy) / (3.0 * F.VOLUME)
    if g < 0:
        if strict and g < -tol:
            raise NegativePumping(f"gamma_{q}({t:.4g}) = {g:.3e} < 0")
        log.warning("gamma_%d(%.4g) = %.3e < 0 clamped to 0", q, t, g)
        return 0.0
    return g


def build_amplitudes(
    rho: np.ndarray,
    R_ell: np.ndarray,
    ds: DirectionSet | None = None,
    *,
    normalization: str = "mean",
    squared: bool = False,
    check: bool = True,
) -> np.ndarray:
    """Amplitudes a_xi = rho^{1/2} gamma_xi(Id - R_l/rho) c_norm on grid points.

    Parameters
    ----------
    rho : ndarray (n, n, n)
    R_ell : ndarray (6, n, n, n)
        Physical values of the mollified stress.
    normalization : {"mean", "unitary"}
        ``"unitary"`` uses c_norm = (2pi)^{-3/4}, for which
        (2pi)^{-3/2} sum a^2 int W (x) W = rho Id - R_l.  ``"mean"`` uses
        c_norm = 1, for which sum a^2 (mean of W (x) W) = rho Id - R_l, the
        form the oscillation and energy balances rely on.
    squared : bool
        Return a_xi^2 instead of a_xi.

    Returns
    -------
    ndarray (6 directions, n, n, n)

    Raises
    ------
    OutOfBall
        If some R_l/rho leaves the certified ball (when ``check``).
    """
    ds = ds or default_direction_set()
    rho = np.asarray(rho, dtype=float)
    R_ell = np.asarray(R_ell, dtype=float)
    if check:
        ratio = _frob_norm(R_ell) / np.maximum(rho, 1e-300)
        if float(ratio.max(initial=0.0)) > ds.radius_eff * (1 + 1e-12):
            from .geometry import OutOfBall

            raise OutOfBall(f"|R_l/rho| reaches {float(ratio.max()):.4f} > {ds.radius_eff:.4f}")
    g2id = np.array([float(g) for g in ds.gamma2_id])
    frob = _slots_to_frob(R_ell)
    asq = rho[None] * g2id[:, None, None, None] - np.tensordot(ds.linear_map, frob, axes=(1, 0))
    if normalization == "unitary":
        asq = asq * (2 * np.pi) ** -1.5
    elif normalization != "mean":
        raise SchemeError("normalization must be 'mean' or 'unitary'")
    asq = np.maximum(asq, 0.0)
    return asq if squared else np.sqrt(asq)


def cutoff(t, sigma: float):
    """Smooth chi with chi = 0 for t <= sigma/2 and chi = 1 for t >= sigma."""
    s = (np.asarray(t, dtype=float) - 0.5 * sigma) / (0.5 * sigma)
    return _smoothstep(s)


def cutoff_dot(t, sigma: float):
    s = (np.asarray(t, dtype=float) - 0.5 * sigma) / (0.5 * sigma)
    return _smoothstep_dot(s) / (0.5 * sigma)


def _f(s):
    s = np.asarray(s, dtype=float)
    return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)


def _fd(s):
    s = np.asarray(s, dtype=float)
    sp = np.where(s > 0, s, 1.0)
    return np.where(s > 0, np.exp(-1.0 / sp) / sp**2, 0.0)


def _smoothstep(s):
    a, b = _f(s), _f(1.0 - np.asarray(s, dtype=float))
    return a / (a + b)


def _smoothstep_dot(s):
    s = np.asarray(s, dtype=float)
    a, b = _f(s), _f(1.0 - s)
    da, db = _fd(s), -_fd(1.0 - s)
    return (da * (a + b) - a * (da + db)) / (a + b) ** 2


def leray(v: F.SpectralField) -> F.SpectralField:
    """Projection onto divergence-free mean-zero fields."""
    return F.spectral_filter(F.leray_project(v), "neq0")


def _R(v: F.SpectralField) -> F.SpectralField:
    """Inverse divergence after removing the mean (which P annihilates anyway)."""
    return F.inv_divergence(F.spectral_filter(v, "neq0"))


def residual(dv: F.SpectralField, v: F.SpectralField, z: F.SpectralField, R: F.SpectralField) -> dict:
    """Leray-projected residual of d_t v - Lap v + div((v+z)(x)(v+z)) = div R.

    Returns the L^2 norm of the residual, the norms of the four terms and
    the relative residual (residual / largest term).
    """
    u = v + z
    terms = {
        "dt_v": leray(dv),
        "lap_v": leray(F.laplacian(v)),
        "div_uu": leray(F.div_tensor(F.tensor_product(u, u))),
        "div_R": leray(F.div_tensor(R)),
    }
    res = terms["dt_v"] - terms["lap_v"] + terms["div_uu"] - terms["div_R"]
    norms = {k: F.norm(t, "L", 2) for k, t in terms.items()}
    rn = F.norm(res, "L", 2)
    scale = max(max(norms.values()), 1e-300)
    return {"abs": rn, "rel": rn / scale, "terms": norms, "field": res}


# ----------------------------------------------------------------------------
# one step


@dataclass
class _StepContext:
    state: IterationState
    grid: F.Grid3
    ell: float
    w: np.ndarray
    d: np.ndarray
    mult: np.ndarray  # spatial mollifier on the state grid
    bank: J.JetBank
    jp: J.JetParams
    gam: np.ndarray  # gamma_q per state sample (variant A)
    uu: np.ndarray  # (nt, 6, ...) mollification input, on the state grid
    zq: np.ndarray  # (nt, 3, ...) z_q on the state grid
    ds: DirectionSet
    c_lam: float
    short_history: bool


def _context(state: IterationState, grid: F.Grid3 | None, strict: bool) -> _StepContext:
    p = state.params
    q = state.q
    G = grid or state.grid
    ell = p.ell(q)
    dt = state.v.dt
    ell_t = ell
    if ell < dt:
        log.warning("mollification scale %.3g is below dt = %.3g; the time kernel uses one step", ell, dt)
        ell_t = dt
    w = F.onesided_weights(ell_t, dt)
    d = F.onesided_derivative_weights(ell_t, dt)
    sg = state.grid
    k2i = np.rint(sg.k2).astype(np.int64)
    uniq, inv = np.unique(k2i, return_inverse=True)
    mult = F.mollifier_multiplier(ell * np.sqrt(uniq))[inv].reshape(k2i.shape)
    jp = p.jets(q + 1)
    bank = J.JetBank(jp, G, normalize=p.normalize_jets, strict=strict or p.regime == "paper")
    nt = state.v.nt
    zq = np.stack([state.z_q(i).coeffs for i in range(nt)])
    uu = np.empty((nt, 6, *sg.spec_shape), dtype=complex)
    gam = np.zeros(nt)
    for i in range(nt):
        u = state.v.at(i) + F.SpectralField(sg, zq[i])
        uu[i] = F.traceless_tensor_product(u, u).coeffs
        if state.variant == "A":
            gam[i] = gamma_level(state.profile, p, q, float(state.times[i]), F.norm(u, "L", 2) ** 2, strict=p.regime == "paper")
    return _StepContext(
        state, G, ell, w, d, mult, bank, jp, gam, uu, zq, default_direction_set(), c_lambda(default_direction_set()), False
    )


def _combo(data: np.ndarray, i: int, weights: np.ndarray) -> np.ndarray:
    """sum_j weights[j] data[i - j] with backward-constant extension."""
    idx = np.clip(i - np.arange(len(weights)), 0, None)
    return np.tensordot(weights, data[idx], axes=(0, 0))


def _scal(G: F.Grid3, c: np.ndarray) -> F.SpectralField:
    return F.SpectralField(G, c[None] if c.ndim == 3 else c, "scalar")


def _prod(G: F.Grid3, *phys: np.ndarray) -> F.SpectralField:
    """Product of padded physical scalars, truncated to the grid."""
    out = phys[0]
    for x in phys[1:]:
        out = out * x
    return F.from_physical(out[None], G, "scalar")


def _vec_times(xi: np.ndarray, s: F.SpectralField) -> F.SpectralField:
    return F.SpectralField(s.grid, xi[:, None, None, None] * s.coeffs[0][None], "vector")


@dataclass
class Amplitudes:
    """Physical values of a_xi, a_xi^2 and their time derivatives, shape (6, n, n, n)."""

    a: np.ndarray
    asq: np.ndarray
    da: np.ndarray
    dasq: np.ndarray

    @staticmethod
    def from_squares(asq: np.ndarray, dasq: np.ndarray | None = None) -> "Amplitudes":
        dasq = np.zeros_like(asq) if dasq is None else dasq
        a = np.sqrt(asq)
        da = np.where(a > 0, dasq / (2.0 * np.where(a > 0, a, 1.0)), 0.0)
        return Amplitudes(a, asq, da, dasq)


@dataclass
class Perturbation:
    """Parts of w_{q+1} at one time (cut-off already applied) plus the raw sums the stress needs."""

    wp: F.SpectralField
    wc: F.SpectralField
    wt: F.SpectralField
    w: F.SpectralField
    dw: F.SpectralField
    wpc_raw: F.SpectralField
    dwpc_raw: F.SpectralField
    wp_raw: F.SpectralField
    wt_raw: F.SpectralField
    osc_x: F.SpectralField
    osc_t: F.SpectralField
    ww_fluct: F.SpectralField
    chi: float
    chid: float
    mu: float


def build_perturbation(
    bank: J.JetBank,
    t: float,
    amps: Amplitudes,
    *,
    chi: float = 1.0,
    chid: float = 0.0,
) -> Perturbation:
    """Principal part, incompressibility and temporal correctors at time ``t``.

    w^p = sum a W, w^p + w^c = sum curl curl(a V) and
    w^t = -(1/mu) P sum a^2 P_{!=0}(g^2) xi with W = xi g; the cut-off
    multiplies w^p, w^c by chi and w^t by chi^2.  Time derivatives combine
    the supplied d_t a with the analytic d_t of the jets.
    """
    G = bank.grid
    m = G.padded_n
    mu = bank.params.mu
    zero = F.zeros(G)
    wp = wpc_s = dwpc_s = wt_pre = dwt_pre = osc_x = osc_t = zero
    ww = F.zeros(G, "sym")
    for k in range(len(bank.tables)):
        xi = bank.xi(k)
        asq_f = F.from_physical(amps.asq[k][None], G, "scalar")
        a_p, da_p, asq_p, dasq_p = (
            F.to_physical(F.from_physical(x[k][None], G, "scalar"), m)[0] for x in (amps.a, amps.da, amps.asq, amps.dasq)
        )
        g_p, dg_p, hV_p, dhV_p = (
            F.to_physical(f, m)[0]
            for f in (bank.scalar_g(k, t), bank.scalar_g(k, t, 1), bank.scalar_v(k, t), bank.scalar_v(k, t, 1))
        )
        wp = wp + _vec_times(xi, _prod(G, a_p, g_p))
        wpc_s = wpc_s + _vec_times(xi, _prod(G, a_p, hV_p))
        dwpc_s = dwpc_s + _vec_times(xi, _prod(G, da_p * hV_p + a_p * dhV_p))
        g2 = _prod(G, g_p, g_p)
        g2n = F.spectral_filter(g2, "neq0")
        g2_p = F.to_physical(g2n, m)[0]
        dg2_p = F.to_physical(_prod(G, 2.0 * g_p * dg_p), m)[0]
        wt_pre = wt_pre + _vec_times(xi, _prod(G, asq_p, g2_p))
        dwt_pre = dwt_pre + _vec_times(xi, _prod(G, dasq_p * g2_p + asq_p * dg2_p))
        grad_asq = F.grad(asq_f).coeffs
        xg_p = F.to_physical(_scal(G, sum(xi[c] * grad_asq[c] for c in range(3))), m)[0]
        osc_x = osc_x + _vec_times(xi, _prod(G, xg_p, g2_p))
        osc_t = osc_t + _vec_times(xi, _prod(G, dasq_p, g2_p))
        ag2n = _prod(G, asq_p, g2_p).coeffs[0]
        xx = np.outer(xi, xi) - np.eye(3) / 3.0
        ww = ww + F.SpectralField(G, np.stack([xx[a, b] * ag2n for a, b in F.SYM_PAIRS]), "sym", True)
    wpc = F.curl(F.curl(wpc_s))
    dwpc = F.curl(F.curl(dwpc_s))
    wt = leray(wt_pre) * (-1.0 / mu)
    dwt = leray(dwt_pre) * (-1.0 / mu)
    wp_t = wp * chi
    wc_t = (wpc - wp) * chi
    wt_t = wt * (chi * chi)
    w = wp_t + wc_t + wt_t
    dw = wpc * chid + dwpc * chi + wt * (2 * chi * chid) + dwt * (chi * chi)
    return Perturbation(wp_t, wc_t, wt_t, w, dw, wpc, dwpc, wp, wt, osc_x, osc_t, ww, chi, chid, mu)


def corrector_formula(bank: J.JetBank, t: float, a_vals: np.ndarray) -> F.SpectralField:
    """w^c from its explicit form.

    w^c = sum curl(grad a x V) + grad a x curl V + a W^c, evaluated with
    dealiased products; used to check w^p + w^c = sum curl curl(a V).
    """
    G = bank.grid
    out = F.zeros(G)
    for k in range(len(bank.tables)):
        a = F.from_physical(a_vals[k][None], G, "scalar")
        ga = F.grad(a)
        W, Wc, V = bank.fields(k, t)
        cV = F.curl(V)
        cross = lambda x, y: F.pointwise(lambda p, q: np.cross(p, q, axis=0), x, y, rank="vector")  # noqa: E731
        aWc = F.pointwise(lambda s, u: s * u, a, Wc, rank="vector")
        out = out + F.curl(cross(ga, V)) + cross(ga, cV) + aWc
    return out


def assemble_stress(
    pert: Perturbation,
    *,
    v_l: F.SpectralField,
    z_l: F.SpectralField,
    z_next: F.SpectralField,
    UU_l: F.SpectralField,
    R_l: F.SpectralField,
    variant: str = "A",
) -> tuple[dict, F.SpectralField]:
    """Stress bundle and R_{q+1} at one time.

    Returns
    -------
    bundle : dict
        ``R_lin, R_cor, R_osc_x, R_osc_t, R_com, R_com1, R_cut, R_disc``.
        ``R_cut`` also carries (1 - chi^2) R_l; ``R_disc`` is the
        discretisation defect chi^2 [w^p (x)o w^p + R_l - sum a^2 P_{!=0}(g^2)(xi (x) xi)^o],
        which vanishes for exact jets.
    R_next : SpectralField
        Sum of the bundle.
    """
    G = pert.w.grid
    chi, chid, mu = pert.chi, pert.chid, pert.mu
    w = pert.w
    tl = F.traceless_tensor_product
    vz_l = v_l + z_l
    v1 = v_l + w
    b: dict[str, F.SpectralField] = {}
    b["R_lin"] = _R(F.laplacian(w) * -1.0 + pert.dwpc_raw * chi) + tl(vz_l, w) * 2.0
    b["R_cor"] = tl(pert.wc + pert.wt, w) + tl(pert.wp, pert.wc + pert.wt)
    b["R_osc_x"] = _R(pert.osc_x) * (chi * chi)
    b["R_osc_t"] = _R(pert.osc_t) * (-(chi * chi) / mu)
    b["R_com"] = tl(vz_l, vz_l) - UU_l
    u1 = v1 + z_next
    ul = v1 + z_l
    b["R_com1"] = tl(u1, u1) - tl(ul, ul)
    if variant == "B":
        b["R_cut"] = _R(pert.wpc_raw * chid + pert.wt_raw * (2 * chi * chid)) + R_l * (1.0 - chi * chi)
    else:
        b["R_cut"] = F.zeros(G, "sym")
    b["R_disc"] = (tl(pert.wp_raw, pert.wp_raw) + R_l - pert.ww_fluct) * (chi * chi)
    R1 = b["R_lin"]
    for key in BUNDLE_KEYS[1:]:
        R1 = R1 + b[key]
    return b, F.remove_trace(R1)


def step_sample(ctx: _StepContext, i: int, *, with_residual: bool = True) -> dict:
    """Build level q+1 at state sample ``i``.

    Returns a dict with the new ``v``, ``dv``, ``R`` (full), the bundle,
    the perturbation parts and the residual report.
    """
    st = ctx.state
    p = st.params
    q = st.q
    G = ctx.grid
    sg = st.grid
    t = float(st.times[i])
    variant = st.variant
    if i - (len(ctx.w) - 1) < 0:
        ctx.short_history = True

    def moll(data, weights, rank, traceless=False):
        c = _combo(data, i, weights) * ctx.mult[None]
        return F.SpectralField(sg, c, rank, traceless).resize(G)

    v_l = moll(st.v.data, ctx.w, "vector")
    dv_l = moll(st.dv.data, ctx.w, "vector")
    R_l = moll(st.R.data, ctx.w, "sym", True)
    dR_l = moll(st.R.data, ctx.d, "sym", True)
    UU_l = moll(ctx.uu, ctx.w, "sym", True)
    z_l = moll(ctx.zq, ctx.w, "vector")
    if variant == "A":
        gam_l = float(_combo(ctx.gam, i, ctx.w))
        dgam_l = float(_combo(ctx.gam, i, ctx.d))
    else:
        gam_l = st.vb.gamma(q + 1) / F.VOLUME
        dgam_l = 0.0

    Rv = R_l.physical()
    dRv = dR_l.physical()
    root = np.sqrt(ctx.ell**2 + _frob_norm(Rv) ** 2)
    rho = ctx.c_lam * root + gam_l
    drho = ctx.c_lam * np.tensordot(F.SYM_MULT, Rv * dRv, axes=(0, 0)) / root + dgam_l
    asq = build_amplitudes(rho, Rv, ctx.ds, squared=True, check=True)
    g2id = np.array([float(g) for g in ctx.ds.gamma2_id])
    dasq = drho[None] * g2id[:, None, None, None] - np.tensordot(ctx.ds.linear_map, _slots_to_frob(dRv), axes=(1, 0))
    amps = Amplitudes.from_squares(asq, dasq)

    if variant == "B":
        sig = st.vb.sigma(q)
        chi, chid = float(cutoff(t, sig)), float(cutoff_dot(t, sig))
    else:
        chi, chid = 1.0, 0.0
    pert = build_perturbation(ctx.bank, t, amps, chi=chi, chid=chid)
    v1 = v_l + pert.w
    dv1 = dv_l + pert.dw
    z1 = st.noise.z_q(t, G, p.f_cut(q + 1))
    bundle, R1 = assemble_stress(pert, v_l=v_l, z_l=z_l, z_next=z1, UU_l=UU_l, R_l=R_l, variant=variant)
    wp_t, wc_t, wt_t, w = pert.wp, pert.wc, pert.wt, pert.w

    out = {
        "t": t,
        "v": v1,
        "dv": dv1,
        "R": R1,
        "z": z1,
        "bundle": bundle,
        "parts": {"wp": wp_t, "wc": wc_t, "wt": wt_t, "w": w, "v_l": v_l, "z_l": z_l, "R_l": R_l},
        "rho_mean": float(rho.mean()),
        "chi": chi,
        "gamma_l": gam_l,
        "captured": ctx.bank.captured_fraction(0),
    }
    if with_residual:
        full = residual(dv1, v1, z1, R1)
        paper = residual(dv1, v1, z1, F.remove_trace(R1 - bundle["R_disc"]))
        out["residual_full"] = {k: v for k, v in full.items() if k != "field"}
        out["residual_paper"] = {k: v for k, v in paper.items() if k != "field"}
    return out


def _new_window(state: IterationState) -> np.ndarray:
    times = state.times
    if state.variant == "A":
        t0 = state.params.t_q(state.q + 1)
        return np.nonzero(times >= t0 - 1e-9 * max(1.0, abs(t0)))[0]
    return np.arange(len(times))


def iterate(
    state: IterationState,
    *,
    grid: F.Grid3 | None = None,
    indices: Sequence[int] | None = None,
    with_residual: bool = True,
    strict: bool = False,
    progress: Callable[[int, int], None] | None = None,
) -> IterationState:
    """Level q -> q+1 on every sample of the new window (or on ``indices``).

    When ``indices`` is given the returned state holds only those samples,
    which must then be uniformly spaced.
    """
    ctx = _context(state, grid, strict)
    G = ctx.grid
    win = np.asarray(_new_window(state) if indices is None else indices, dtype=int)
    if len(win) == 0:
        raise SchemeError("the new window is empty")
    if len(win) > 1:
        steps = np.diff(win)
        if np.any(steps != steps[0]):
            raise SchemeError("indices must be uniformly spaced")
        stride = int(steps[0])
    else:
        stride = 1
    vs, dvs, Rs = [], [], []
    rows = []
    for n_done, i in enumerate(win):
        s = step_sample(ctx, int(i), with_residual=with_residual)
        vs.append(s["v"].coeffs)
        dvs.append(s["dv"].coeffs)
        Rs.append(s["R"].coeffs)
        rows.append(_sample_row(state, s, int(i)))
        if progress is not None:
            progress(n_done + 1, len(win))
    dt = state.v.dt * stride
    t_lo = float(state.times[win[0]])
    new = IterationState(
        q=state.q + 1,
        variant=state.variant,
        params=state.params,
        noise=state.noise,
        v=F.TimeTrajectory(G, t_lo, dt, np.stack(vs)),
        dv=F.TimeTrajectory(G, t_lo, dt, np.stack(dvs)),
        R=F.TimeTrajectory(G, t_lo, dt, np.stack(Rs), "sym", True),
        profile=state.profile,
        vb=state.vb,
        t_stop=state.t_stop,
        reports=list(state.reports),
        diagnostics={"samples": rows, "short_history": ctx.short_history, "jets": ctx.jp.to_json(), "ell": ctx.ell},
    )
    new.reports.append(level_report(state, new))
    return new


def _sample_row(state: IterationState, s: dict, i: int) -> dict:
    G = s["v"].grid
    vq = state.v.at(i).resize(G)
    row = {
        "t": s["t"],
        "chi": s["chi"],
        "gamma_l": s["gamma_l"],
        "rho_mean": s["rho_mean"],
        "v_L2": F.norm(s["v"], "L", 2),
        "vz_L2sq": F.norm(s["v"] + s["z"], "L", 2) ** 2,
        "inc_L2": F.norm(s["v"] - vq, "L", 2),
        "vq_L2sq": F.norm(vq, "L", 2) ** 2,
        "R_L1": F.norm(s["R"], "L", 1),
        "R_paper_L1": F.norm(F.remove_trace(s["R"] - s["bundle"]["R_disc"]), "L", 1),
        "wp_L2": F.norm(s["parts"]["wp"], "L", 2),
        "wc_L2": F.norm(s["parts"]["wc"], "L", 2),
        "wt_L2": F.norm(s["parts"]["wt"], "L", 2),
        "captured": s["captured"],
    }
    for k, b in s["bundle"].items():
        row[k + "_L1"] = F.norm(b, "L", 1)
    if state.variant == "A":
        row["C1"] = F.norm(s["v"], "C", 1) + F.norm(s["dv"], "L", np.inf)
    else:
        row["inc_W"] = F.norm(s["v"] - vq, "W", 0.5, 31.0 / 30.0)
    if "residual_full" in s:
        row["res_full_rel"] = s["residual_full"]["rel"]
        row["res_paper_rel"] = s["residual_paper"]["rel"]
    return row


# ----------------------------------------------------------------------------
# inductive ledger


def _row(name: str, value: float, bound: float, zone: str = "all", le: bool = True) -> dict:
    ok = value <= bound * (1 + 1e-12) if le else value >= bound * (1 - 1e-12)
    return {"name": name, "value": float(value), "bound": float(bound), "zone": zone, "passed": bool(ok)}


def level_report(old: IterationState, new: IterationState) -> dict:
    """Inductive quantities of the new level against their bounds."""
    p = new.params
    q = old.q  # step q -> q+1
    rows = new.diagnostics["samples"]
    ts = np.array([r["t"] for r in rows])
    out = {"level": q + 1, "variant": new.variant, "rows": []}
    R = out["rows"]
    if new.variant == "A":
        prof = new.profile
        bd = prof.bounds(new.t_stop)
        ebar = bd["e_bar"]
        e = prof(ts)
        dsum = sum(math.sqrt(p.delta(r)) for r in range(1, q + 2))
        R.append(_row("v C_t L2", max(r["v_L2"] for r in rows), p.M0 * (1 + dsum) * math.sqrt(ebar)))
        R.append(_row("v C1_tx", max(r["C1"] for r in rows), p.lam(q + 1) ** 4 * math.sqrt(ebar)))
        ratio = max(r["R_L1"] / (p.delta(q + 3) * ei / 48.0) for r, ei in zip(rows, e))
        R.append(_row("R C_t L1 / (delta_{q+3} e / 48)", ratio, 1.0))
        gaps = np.array([ei - r["vz_L2sq"] for r, ei in zip(rows, e)])
        d = p.delta(q + 2)
        R.append(_row("energy window lower: min (e - |v+z|^2)/(delta e)", float(np.min(gaps / (d * e))), 0.75, le=False))
        R.append(_row("energy window upper: max (e - |v+z|^2)/(delta e)", float(np.max(gaps / (d * e))), 1.25))
        R.append(_row("increment L2", max(r["inc_L2"] for r in rows), p.M0 * math.sqrt(ebar) * math.sqrt(p.delta(q + 1))))
        dE = np.abs(e * (1 - p.delta(q + 2)) - np.array([r["vz_L2sq"] for r in rows]))
        R.append(_row("energy gap / (delta_{q+2} e / 4)", float(np.max(dE / (0.25 * d * e))), 1.0))
    else:
        vb = new.vb
        sig = vb.sigma(q)
        T = new.t_stop
        ML = vb.ML
        z3 = ts > min(4 * sig, T)
        z2 = (ts > min(sig / 2, T)) & ~z3
        z1 = ts <= min(sig / 2, T)
        inc = np.array([r["inc_L2"] for r in rows])
        g1 = vb.gamma(q + 1)
        if z3.any():
            R.append(_row("increment L2 (late)", inc[z3].max(), p.M0 * (math.sqrt(ML * p.delta(q + 1)) + math.sqrt(g1)), "late"))
        if z2.any():
            R.append(_row("increment L2 (middle)", inc[z2].max(), p.M0 * (math.sqrt(ML + q * vb.A) + math.sqrt(g1)), "middle"))
        if z1.any():
            R.append(_row("increment L2 (early)", inc[z1].max(), 0.0, "early"))
        RL1 = np.array([r["R_L1"] for r in rows])
        zr3 = ts > min(sig, T)
        if zr3.any():
            R.append(_row("R L1 (late)", RL1[zr3].max(), ML * p.delta(q + 2), "late"))
        winc = max(r["inc_W"] for r in rows)
        R.append(_row("increment W^(1/2,31/30)", winc, p.M0 * math.sqrt(ML) * math.sqrt(p.delta(q + 1))))
        if z3.any():
            dg = np.array([abs(r["v_L2"] ** 2 - r["vq_L2sq"] - 3 * g1) for r in rows])[z3]
            R.append(_row("energy increment | |v1|^2 - |v|^2 - 3 gamma |", dg.max(), 7 * ML * p.delta(q + 1), "late"))
    if rows and "res_paper_rel" in rows[0]:
        R.append(_row("residual (paper terms), relative", max(r["res_paper_rel"] for r in rows), 1e-6))
        R.append(_row("residual (all terms), relative", max(r["res_full_rel"] for r in rows), 1e-6))
    return out


# ----------------------------------------------------------------------------
# energy and gluing


def energy_gap(state: IterationState, profile: EnergyProfile | None = None, *, target: str = "paper") -> np.ndarray:
    """Energy gap of the level-q iterate at every sample.

    ``target="paper"`` gives |e(t)(1 - delta_{q+1}) - ||v_q + z_q||^2|, the
    quantity bounded by delta_{q+1} e / 4; ``target="plain"`` gives
    |e(t) - ||v_q + z_q||^2|.
    """
    prof = profile or state.profile
    if prof is None:
        raise SchemeError("energy gap needs an energy profile")
    p = state.params
    e = prof(state.times)
    fac = (1.0 - p.delta(state.q + 1)) if target == "paper" else 1.0
    en = np.array([F.norm(state.v.at(i) + state.z_q(i), "L", 2) ** 2 for i in range(state.v.nt)])
    return np.abs(e * fac - en)


def extend_solution(runs: Sequence[tuple[F.TimeTrajectory, float]], *, tol: float = 1e-9) -> F.TimeTrajectory:
    """Glue segments u_k on [0, T_k] into one trajectory.

    Each segment is cut at its T_L and the next starts at the seam.

    Raises
    ------
    SeamMismatch
        If a terminal value differs from the next initial value by more than
        ``tol`` in L^2.
    """
    if not runs:
        raise SchemeError("nothing to glue")
    dt = runs[0][0].dt
    pieces = []
    t0 = runs[0][0].t_lo
    for k, (seg, T) in enumerate(runs):
        if abs(seg.dt - dt) > 1e-12:
            raise SchemeError("segments must share the time step")
        iT = seg.index(seg.t_lo + T) if k < len(runs) - 1 else seg.nt - 1
        if k < len(runs) - 1:
            nxt = runs[k + 1][0]
            jump = F.norm(seg.at(iT) - nxt.at(0).resize(seg.grid), "L", 2)
            if jump > tol:
                raise SeamMismatch(f"seam {k}: L2 jump {jump:.3e} > {tol:.1e}")
            pieces.append(seg.data[:iT])
        else:
            pieces.append(seg.data[: iT + 1])
    return F.TimeTrajectory(runs[0][0].grid, t0, dt, np.concatenate(pieces), runs[0][0].rank, runs[0][0].traceless)


def calibrate_M0(new: IterationState) -> float:
    """Measured ratio of the L^2 increment to its scale on a run.

    The scale is e_bar^{1/2} delta_{q+1}^{1/2} (prescribed energy) or
    M_L^{1/2} delta_{q+1}^{1/2} + gamma_{q+1}^{1/2} (prescribed datum), with
    q + 1 the level of ``new``.
    """
    p = new.params
    q1 = new.q
    inc = max(r["inc_L2"] for r in new.diagnostics["samples"])
    if new.variant == "A":
        scale = math.sqrt(new.profile.bounds(new.t_stop)["e_bar"] * p.delta(q1))
    else:
        scale = math.sqrt(new.vb.ML * p.delta(q1)) + math.sqrt(new.vb.gamma(q1))
    return inc / scale
