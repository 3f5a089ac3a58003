"""Intermittent jets: profiles, parameters and spectral evaluation.

Each jet is a function of three integer combinations of x, namely
m'(x.xi + mu t), m'(x - alpha).A and m'(x - alpha).(xi x A) with
m' = n_star * r_perp * lambda.  Its Fourier series therefore factorises
into a 1-d series for psi and a 2-d (radial) series for Phi, both of which
are available from the continuous Fourier transforms of the profiles.  The
jets are evaluated by placing those exact coefficients on the grid modes
they occupy; modes outside the grid band are dropped.  When the grid is
too coarse this truncation is the only approximation, and
``captured_fraction`` reports how much of the jet survived.

Means over T^3 of functions of the jet variables equal means over the
profile torus because the frame map is an integer matrix of nonzero
determinant.  ``slab_mean_outer`` and ``jet_lp_norms`` use that to get
integrals at any lambda from 1-d and 2-d quadrature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special

from . import field as F
from .geometry import DirectionSet, default_direction_set

__all__ = [
    "JetError",
    "UnderResolved",
    "NonIntegerPeriod",
    "Profiles",
    "build_profiles",
    "JetParams",
    "jet_params",
    "desk_jet_params",
    "DEFAULT_SHIFTS",
    "tube_separation",
    "JetBank",
    "eval_jet",
    "jet_coordinates",
    "jet_pointwise",
    "support_overlap",
    "slab_mean_outer",
    "jet_lp_norms",
    "check_jet_bounds",
]


class JetError(ValueError):
    pass


class UnderResolved(JetError):
    """The grid cannot carry the jet at the requested fidelity."""


class NonIntegerPeriod(JetError):
    """lambda * r_perp is not an integer."""


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    out[m] = np.exp(-1.0 / (1.0 - s[m] ** 2))
    return out


def _bump_d1(s):
    """Derivative of exp(-1/(1-s^2))."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    u = 1.0 - s[m] ** 2
    out[m] = -2.0 * s[m] * np.exp(-1.0 / u) / u**2
    return out


def _bump_d2(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    x = s[m]
    u = 1.0 - x**2
    B = np.exp(-1.0 / u)
    out[m] = B * (-2.0 / u**2 + 4.0 * x**2 / u**4 - 8.0 * x**2 / u**3)
    return out


def _bump_d3(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    x = s[m]
    u = 1.0 - x**2
    B = np.exp(-1.0 / u)
    # d/ds of B*(-2/u^2 + 4x^2/u^4 - 8x^2/u^3) with u' = -2x
    P = -2.0 / u**2 + 4.0 * x**2 / u**4 - 8.0 * x**2 / u**3
    dP = -8.0 * x / u**3 + 8.0 * x / u**4 + 32.0 * x**3 / u**5 - 16.0 * x / u**3 - 48.0 * x**3 / u**4
    dB = -2.0 * x * B / u**2
    out[m] = dB * P + B * dP
    return out


def _laplace2d_bump(r):
    """Planar Laplacian of exp(-1/(1-r^2)) as a function of the radius."""
    return _bump_d2(r) + np.divide(_bump_d1(r), r, out=np.zeros_like(np.asarray(r, float)), where=np.asarray(r) > 0) + (
        np.asarray(r) == 0
    ) * _bump_d2(np.zeros_like(np.asarray(r, float)))


def _quad(fn, a, b) -> float:
    # the requested tolerance sits at roundoff level, where quad reports a
    # warning although the value is accurate to a few ulps
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(fn, a, b, epsabs=0.0, epsrel=1e-12, limit=400)
    return val


@dataclass(frozen=True)
class Profiles:
    """Normalised profile functions built from the template bump.

    ``Phi(r) = c_Phi * B(r)`` (planar, radial), ``phi = -Laplace Phi`` and
    ``psi(s) = c_psi * B'(s)`` with ``B(s) = exp(-1/(1-s^2))``.  The
    constants enforce (1/4pi^2) int phi^2 = 1 and (1/2pi) int psi^2 = 1.
    """

    c_Phi: float
    c_psi: float
    n_gl: int = 1200

    def Phi(self, r):
        return self.c_Phi * _bump(r)

    def phi(self, r):
        return -self.c_Phi * _laplace2d_bump(np.asarray(r, dtype=float))

    def dphi_dr(self, r):
        """Radial derivative of phi."""
        r = np.asarray(r, dtype=float)
        # d/dr (B'' + B'/r) = B''' + B''/r - B'/r^2
        with np.errstate(divide="ignore", invalid="ignore"):
            val = _bump_d3(r) + np.where(r > 0, _bump_d2(r) / r - _bump_d1(r) / r**2, 0.0)
        return -self.c_Phi * val

    def psi(self, s):
        return self.c_psi * _bump_d1(s)

    def dpsi(self, s):
        return self.c_psi * _bump_d2(s)

    @cached_property
    def _gl(self):
        x, w = np.polynomial.legendre.leggauss(self.n_gl)
        r = 0.5 * (x + 1.0)
        return r, 0.5 * w

    def psi_transform(self, kappa) -> np.ndarray:
        """int psi(s) exp(-i kappa s) ds (purely imaginary, psi is odd)."""
        r, w = self._gl
        kap = np.atleast_1d(np.asarray(kappa, dtype=float))
        vals = np.sin(np.outer(kap, r)) @ (w * self.psi(r))
        return -2j * vals

    def Phi_transform(self, kappa) -> np.ndarray:
        """Planar transform int Phi(x) exp(-i kappa.x) dx for |kappa| = kappa."""
        r, w = self._gl
        kap = np.atleast_1d(np.asarray(kappa, dtype=float))
        vals = special.j0(np.outer(kap, r)) @ (w * self.Phi(r) * r)
        return 2.0 * np.pi * vals

    def phi_transform(self, kappa) -> np.ndarray:
        kap = np.atleast_1d(np.asarray(kappa, dtype=float))
        return kap**2 * self.Phi_transform(kap)

    # quadrature oracles used by the normalisation tests
    def phi_sq_integral(self) -> float:
        return 2.0 * np.pi * _quad(lambda r: float(self.phi(r)) ** 2 * r, 0.0, 1.0)

    def psi_sq_integral(self) -> float:
        return _quad(lambda s: float(self.psi(s)) ** 2, -1.0, 1.0)

    def phi_integral(self) -> float:
        return 2.0 * np.pi * _quad(lambda r: float(self.phi(r)) * r, 0.0, 1.0)

    def psi_integral(self) -> float:
        return _quad(lambda s: float(self.psi(s)), -1.0, 1.0)


def build_profiles(n_gl: int = 1200) -> Profiles:
    """Normalise the template bump so that both profile identities hold."""
    lap_sq = 2.0 * np.pi * _quad(lambda r: float(_laplace2d_bump(np.array(r))) ** 2 * r, 0.0, 1.0)
    c_Phi = math.sqrt(4.0 * np.pi**2 / lap_sq)
    d1_sq = _quad(lambda s: float(_bump_d1(np.array(s))) ** 2, -1.0, 1.0)
    c_psi = math.sqrt(2.0 * np.pi / d1_sq)
    return Profiles(c_Phi=c_Phi, c_psi=c_psi, n_gl=n_gl)


# Shifts alpha_xi in units of the jet cell 2pi/m'.  Found by a search that
# maximises the smallest tube separation; with these the six tube families
# stay disjoint for every r_perp below ``MAX_DISJOINT_R_PERP``.
DEFAULT_SHIFTS = np.array(
    [[0, 0, 0], [137, 980, 754], [786, 917, 775], [237, 129, 203], [976, 744, 152], [330, 810, 177]],
    dtype=float,
) / 1000.0


def _rational_gcd(vals) -> float:
    from fractions import Fraction

    vals = [Fraction(v) for v in vals if v != 0]
    den = 1
    for v in vals:
        den = den * v.denominator // math.gcd(den, v.denominator)
    g = 0
    for v in vals:
        g = math.gcd(g, abs(int(v * den)))
    return g / den


def tube_separation(shifts: np.ndarray = DEFAULT_SHIFTS, ds: DirectionSet | None = None) -> float:
    """Largest r_perp for which the six tube families are pairwise disjoint.

    Tubes of family xi are the r_perp/m' neighbourhoods of the lines
    alpha + (2pi/m')(p A + q xi x A) + s xi.  For two families the line
    distances form the set |(alpha'-alpha).N + (2pi/m') g Z| / |N| with
    N = xi x xi' and g the gcd of the rational numbers A.N, (xi x A).N,
    A'.N, (xi' x A').N.  In units of the cell this gives a threshold
    independent of lambda.
    """
    ds = ds or default_direction_set()
    fr = ds.frames
    best = math.inf
    for a in range(6):
        for b in range(a + 1, 6):
            xa, Aa, Ba = fr[a]
            xb, Ab, Bb = fr[b]
            N = (xa[1] * xb[2] - xa[2] * xb[1], xa[2] * xb[0] - xa[0] * xb[2], xa[0] * xb[1] - xa[1] * xb[0])
            dot = lambda u, v: sum(p * q for p, q in zip(u, v))  # noqa: E731
            g0 = _rational_gcd([dot(Aa, N), dot(Ba, N), dot(Ab, N), dot(Bb, N)])
            Nf = np.array([float(c) for c in N])
            v = float((shifts[b] - shifts[a]) @ Nf)
            d = abs(v - g0 * round(v / g0))
            best = min(best, math.pi * d / float(np.linalg.norm(Nf)))
    return best


MAX_DISJOINT_R_PERP = tube_separation()


@dataclass(frozen=True)
class JetParams:
    """Jet scales.

    Attributes
    ----------
    lam : float
        Frequency parameter lambda.
    r_perp, r_par : float
        Concentration parameters (r_perp < r_par < 1).
    mu : float
        Temporal oscillation.
    m : int
        lambda * r_perp (an integer).
    n_star : int
    shifts : ndarray (6, 3)
        alpha_xi in units of the cell 2pi/m'.
    regime : str
        ``"paper"`` when the exponents of the construction are used,
        ``"desk"`` for explicitly chosen scales.
    """

    lam: float
    r_perp: float
    r_par: float
    mu: float
    m: int
    n_star: int = 5
    shifts: np.ndarray = field(default_factory=lambda: DEFAULT_SHIFTS.copy())
    regime: str = "paper"

    def __post_init__(self) -> None:
        if not (0 < self.r_perp < self.r_par < 1):
            raise JetError("need 0 < r_perp < r_par < 1")
        if self.r_perp > MAX_DISJOINT_R_PERP:
            raise JetError(
                f"r_perp = {self.r_perp} exceeds {MAX_DISJOINT_R_PERP:.4f}; tube supports would overlap"
            )
        if abs(self.lam * self.r_perp - self.m) > 1e-9 * max(1.0, self.m):
            raise NonIntegerPeriod("lambda * r_perp must equal the integer m")

    @property
    def mprime(self) -> int:
        """n_star * lambda * r_perp, the integer frequency unit of the jets."""
        return self.n_star * self.m

    def alpha(self, idx: int) -> np.ndarray:
        return 2.0 * np.pi * self.shifts[idx] / self.mprime

    def to_json(self) -> dict:
        return {
            "lam": self.lam,
            "r_perp": self.r_perp,
            "r_par": self.r_par,
            "mu": self.mu,
            "m": self.m,
            "n_star": self.n_star,
            "regime": self.regime,
        }


def jet_params(lam: float, n_star: int = 5) -> JetParams:
    """Paper scales r_par = lam^(-4/7), r_perp = lam^(-6/7), mu = lam^(9/7).

    Raises
    ------
    NonIntegerPeriod
        Unless lam^(1/7) is an integer (within 1e-9).
    """
    root = lam ** (1.0 / 7.0)
    m = int(round(root))
    if m < 1 or abs(root - m) > 1e-9 * max(1.0, root):
        raise NonIntegerPeriod(f"lambda * r_perp = {root:.12g} is not an integer")
    # exact dyadic-friendly forms in terms of m = lam^(1/7)
    return JetParams(
        lam=float(m**7),
        r_perp=float(m) ** -6,
        r_par=float(m) ** -4,
        mu=float(m) ** 9,
        m=m,
        n_star=n_star,
        regime="paper",
    )


def desk_jet_params(m: int, r_perp: float, r_par: float, mu: float, n_star: int = 5) -> JetParams:
    """Explicit scales for resolvable desk runs; lambda = m / r_perp."""
    return JetParams(lam=m / r_perp, r_perp=r_perp, r_par=r_par, mu=mu, m=int(m), n_star=n_star, regime="desk")


# ----------------------------------------------------------------------------
# spectral jets on a grid


@dataclass
class _DirTable:
    flat_idx: np.ndarray  # index into the flattened (n, n, nh) spectral array
    kvec: np.ndarray  # (nmodes, 3) integer wavevectors
    j1: np.ndarray  # psi index, drives the time phase
    base: np.ndarray  # psi_hat * Phi_hat * spatial shift phase
    xi: np.ndarray
    kdotxi: np.ndarray
    kperp: np.ndarray  # (nmodes, 3)
    kperp2: np.ndarray
    g_scale: float  # 1/sqrt(captured mean square) if normalised


class JetBank:
    """All six jets of one parameter set on one grid.

    Parameters
    ----------
    params : JetParams
    grid : Grid3
    profiles : Profiles, optional
    normalize : bool
        Rescale each truncated jet so that its discrete mean of W (x) W is
        exactly xi (x) xi.  The continuum jets already satisfy this; the
        rescaling compensates the energy lost to truncation.
    strict : bool
        Raise ``UnderResolved`` when n < resolution_factor * n_star * lambda.
    """

    def __init__(
        self,
        params: JetParams,
        grid: F.Grid3,
        profiles: Profiles | None = None,
        *,
        normalize: bool = False,
        strict: bool = False,
        resolution_factor: float = 4.0,
        ds: DirectionSet | None = None,
    ) -> None:
        self.params = params
        self.grid = grid
        self.profiles = profiles or build_profiles()
        self.ds = ds or default_direction_set()
        self.normalize = normalize
        if params.n_star != self.ds.n_star:
            raise JetError("n_star of the parameters does not match the direction set")
        if strict and grid.n < resolution_factor * params.n_star * params.lam:
            raise UnderResolved(
                f"grid n = {grid.n} < {resolution_factor} * n_star * lambda = {resolution_factor * params.n_star * params.lam:g}"
            )
        if grid.kmax < params.mprime:
            raise UnderResolved(
                f"grid band kmax = {grid.kmax} cannot hold the jet lattice spacing m' = {params.mprime}"
            )
        self.tables = [self._table(i) for i in range(len(self.ds.dirs))]

    def _table(self, idx: int) -> _DirTable:
        p, g, prof = self.params, self.grid, self.profiles
        xi_e, A_e, B_e = self.ds.frames[idx]
        ns = p.n_star
        # integer lattice generators: m * (n_star * frame vector)
        gens = np.array([[int(c * ns) for c in v] for v in (xi_e, A_e, B_e)], dtype=np.int64) * p.m
        kmax = g.kmax
        J = int(math.ceil(math.sqrt(3.0) * kmax / p.mprime)) + 1
        rng = np.arange(-J, J + 1)
        j1, j2, j3 = np.meshgrid(rng, rng, rng, indexing="ij")
        j1, j2, j3 = j1.ravel(), j2.ravel(), j3.ravel()
        k = j1[:, None] * gens[0] + j2[:, None] * gens[1] + j3[:, None] * gens[2]
        keep = (np.abs(k) <= kmax).all(axis=1) & (k[:, 2] >= 0)
        j1, j2, j3, k = j1[keep], j2[keep], j3[keep], k[keep]
        # 1-d and 2-d profile coefficients on the 2pi-periodic profile torus
        psi_hat = np.sqrt(p.r_par) / (2 * np.pi) * prof.psi_transform(j1 * p.r_par)
        rho = np.sqrt(j2.astype(float) ** 2 + j3.astype(float) ** 2)
        Phi_hat = p.r_perp / (4 * np.pi**2) * prof.Phi_transform(rho * p.r_perp)
        alpha = p.alpha(idx)
        A = np.array([float(c) for c in A_e])
        B = np.array([float(c) for c in B_e])
        shift_phase = np.exp(-1j * p.mprime * (j2 * (A @ alpha) + j3 * (B @ alpha)))
        base = psi_hat * Phi_hat * shift_phase
        flat = (k[:, 0] % g.n) * (g.n * g.nh) + (k[:, 1] % g.n) * g.nh + k[:, 2]
        xi = np.array([float(c) for c in xi_e])
        kf = k.astype(float)
        kdotxi = kf @ xi
        kperp = kf - kdotxi[:, None] * xi[None, :]
        kperp2 = np.sum(kperp**2, axis=1)
        # scalar g = psi*phi has coefficients |k_perp|^2/(n_star lam)^2 * h
        gcoef = kperp2 / (p.n_star * p.lam) ** 2 * base
        weight = np.where(k[:, 2] == 0, 1.0, 2.0)
        captured = float(np.sum(weight * np.abs(gcoef) ** 2))
        scale = 1.0 / math.sqrt(captured) if (self.normalize and captured > 0) else 1.0
        return _DirTable(flat, k, j1, base, xi, kdotxi, kperp, kperp2, scale)

    def captured_fraction(self, idx: int = 0) -> float:
        """Discrete mean of |W|^2 before normalisation (1 for a resolved jet)."""
        t = self.tables[idx]
        p = self.params
        gcoef = t.kperp2 / (p.n_star * p.lam) ** 2 * t.base
        weight = np.where(t.kvec[:, 2] == 0, 1.0, 2.0)
        return float(np.sum(weight * np.abs(gcoef) ** 2))

    def _scatter(self, values: np.ndarray) -> np.ndarray:
        g = self.grid
        out = np.zeros(g.n * g.n * g.nh, dtype=complex)
        out[values[0]] = values[1]
        return out.reshape(g.spec_shape)

    def _h_coeffs(self, idx: int, t: float, time_derivative: int = 0) -> np.ndarray:
        """Modes of h = psi_(xi) Phi_(xi) (unscaled), optionally d/dt applied."""
        tb = self.tables[idx]
        p = self.params
        theta = math.fmod(p.mprime * p.mu * t, 2.0 * np.pi)
        vals = tb.base * np.exp(1j * tb.j1 * theta) * tb.g_scale
        if time_derivative:
            vals = vals * (1j * tb.j1 * p.mprime * p.mu) ** time_derivative
        return vals

    def _to_grid(self, idx: int, vals: np.ndarray) -> np.ndarray:
        g = self.grid
        out = np.zeros(g.n * g.n * g.nh, dtype=complex)
        tb = self.tables[idx]
        out[tb.flat_idx] = vals
        out = out.reshape(g.spec_shape)
        # kz = 0 plane: both k and -k were enumerated, so it is already Hermitian
        return out * g.mask

    def scalar_g(self, idx: int, t: float, time_derivative: int = 0) -> F.SpectralField:
        """g = psi_(xi) phi_(xi), so that W = xi g."""
        tb = self.tables[idx]
        p = self.params
        h = self._h_coeffs(idx, t, time_derivative)
        c = self._to_grid(idx, tb.kperp2 / (p.n_star * p.lam) ** 2 * h)
        return F.SpectralField(self.grid, c[None], "scalar")

    def fields(self, idx: int, t: float, time_derivative: int = 0) -> tuple[F.SpectralField, F.SpectralField, F.SpectralField]:
        """(W, W^c, V) of direction ``idx`` at time ``t`` (or their time derivatives)."""
        tb = self.tables[idx]
        p = self.params
        h = self._h_coeffs(idx, t, time_derivative) / (p.n_star * p.lam) ** 2
        W = np.stack([self._to_grid(idx, tb.xi[i] * tb.kperp2 * h) for i in range(3)])
        Wc = np.stack([self._to_grid(idx, -tb.kperp[:, i] * tb.kdotxi * h) for i in range(3)])
        V = np.stack([self._to_grid(idx, tb.xi[i] * h) for i in range(3)])
        mk = lambda c: F.SpectralField(self.grid, c, "vector")  # noqa: E731
        return mk(W), mk(Wc), mk(V)

    def scalar_v(self, idx: int, t: float, time_derivative: int = 0) -> F.SpectralField:
        """h / (n_star lambda)^2, so that V = xi h / (n_star lambda)^2 and W + W^c = curl curl V."""
        p = self.params
        h = self._h_coeffs(idx, t, time_derivative) / (p.n_star * p.lam) ** 2
        return F.SpectralField(self.grid, self._to_grid(idx, h)[None], "scalar")

    def xi(self, idx: int) -> np.ndarray:
        return self.tables[idx].xi


def _wrap(s: np.ndarray) -> np.ndarray:
    return np.mod(s + np.pi, 2.0 * np.pi) - np.pi


def jet_coordinates(idx: int, params: JetParams, t: float, points: np.ndarray, ds: DirectionSet | None = None):
    """Wrapped jet variables (s, y2, y3) in (-pi, pi] at ``points`` (N, 3)."""
    ds = ds or default_direction_set()
    xi, A, B = (np.array([float(c) for c in v]) for v in ds.frames[idx])
    x = np.asarray(points, dtype=float)
    mp = params.mprime
    xa = x - params.alpha(idx)[None, :]
    s = _wrap(mp * (x @ xi + params.mu * t))
    return s, _wrap(mp * (xa @ A)), _wrap(mp * (xa @ B))


def jet_pointwise(
    idx: int,
    params: JetParams,
    t: float,
    points: np.ndarray,
    profiles: Profiles | None = None,
    ds: DirectionSet | None = None,
) -> np.ndarray:
    """Exact (untruncated) scalar g with W = xi g at ``points`` (N, 3).

    g = psi_{r_par}(s) r_perp^{-1} phi(|y| / r_perp) with
    psi_{r}(s) = r^{-1/2} psi(s / r), in the wrapped jet variables.
    """
    prof = profiles or build_profiles()
    s, y2, y3 = jet_coordinates(idx, params, t, points, ds)
    rq, rp = params.r_par, params.r_perp
    psi = prof.psi(s / rq) / math.sqrt(rq)
    r = np.hypot(y2, y3) / rp
    return psi * prof.phi(r) / rp


def support_overlap(params: JetParams, n_samples: int = 20_000, seed: int = 0, ds: DirectionSet | None = None) -> dict:
    """Sampled check that the six tube supports are pairwise disjoint.

    Points are drawn inside tube i ({|y| < r_perp} in its own variables,
    at random positions along the axis and random periodic copies) and the
    distance |y_j| / r_perp to every other tube axis is recorded.

    Returns
    -------
    dict with ``overlap`` (max over pairs of the product of the two tube
    indicators, 0 for disjoint supports) and ``min_ratio`` (smallest
    |y_j| / r_perp found, above 1 for disjoint supports).
    """
    ds = ds or default_direction_set()
    rng = np.random.default_rng(seed)
    mp = params.mprime
    ndir = len(ds.dirs)
    overlap, min_ratio = 0.0, math.inf
    for i in range(ndir):
        xi, A, B = (np.array([float(c) for c in v]) for v in ds.frames[i])
        rad = params.r_perp * np.sqrt(rng.uniform(0, 1, n_samples))
        ang = rng.uniform(0, 2 * np.pi, n_samples)
        cells = rng.integers(0, params.n_star * mp, size=(n_samples, 2))
        sig = rng.uniform(0, 2 * np.pi * params.n_star * mp, n_samples)
        y2 = rad * np.cos(ang) + 2 * np.pi * cells[:, 0]
        y3 = rad * np.sin(ang) + 2 * np.pi * cells[:, 1]
        pts = params.alpha(i)[None, :] + (y2[:, None] * A + y3[:, None] * B + sig[:, None] * xi) / mp
        pts = np.mod(pts, 2 * np.pi)
        for j in range(ndir):
            if j == i:
                continue
            _, z2, z3 = jet_coordinates(j, params, 0.0, pts, ds)
            r = np.hypot(z2, z3) / params.r_perp
            min_ratio = min(min_ratio, float(r.min()))
            overlap = max(overlap, float(np.any(r < 1.0)))
    return {"overlap": overlap, "min_ratio": min_ratio}


def eval_jet(xi, params: JetParams, t: float, grid: F.Grid3, profiles: Profiles | None = None, **kw):
    """(W, W^c, V) for direction ``xi`` on ``grid`` at time ``t``."""
    ds = kw.pop("ds", None) or default_direction_set()
    bank = JetBank(params, grid, profiles, ds=ds, **kw)
    return bank.fields(ds.index(xi), t)


# ----------------------------------------------------------------------------
# slab quadrature


def _window_rule(radius: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoid nodes on [-radius, radius]; exact-order for bump integrands."""
    x = np.linspace(-radius, radius, n + 1)
    w = np.full(n + 1, 2.0 * radius / n)
    w[0] = w[-1] = 0.5 * w[0]
    return x, w


def slab_mean_outer(idx: int, params: JetParams, profiles: Profiles | None = None, n_slab: int = 512, ds=None) -> np.ndarray:
    """(2pi)^-3 int_T3 W (x) W dx via the profile-torus factorisation.

    The mean equals xi (x) xi times (1/2pi) int psi_r^2 times
    (1/4pi^2) int phi_r^2; both factors are computed by trapezoid rules on
    the support windows with ``n_slab`` panels per axis.
    """
    prof = profiles or build_profiles()
    ds = ds or default_direction_set()
    xs, ws = _window_rule(params.r_par, n_slab)
    psi_r = params.r_par**-0.5 * prof.psi(xs / params.r_par)
    f1 = float(np.sum(ws * psi_r**2)) / (2 * np.pi)
    ys, wy = _window_rule(params.r_perp, n_slab)
    Y2, Y3 = np.meshgrid(ys, ys, indexing="ij")
    phi_r = prof.phi(np.sqrt(Y2**2 + Y3**2) / params.r_perp) / params.r_perp
    f2 = float(np.einsum("i,j,ij->", wy, wy, phi_r**2)) / (4 * np.pi**2)
    xi = ds.dirs_float[idx]
    return np.outer(xi, xi) * f1 * f2


def jet_lp_norms(params: JetParams, p: float, profiles: Profiles | None = None, n_slab: int = 1024) -> dict[str, float]:
    """L^p norms over T^3 of psi_(xi), phi_(xi), W_(xi) and their first derivatives.

    Uses the change of variables to the profile torus: for any G,
    int_T3 G(m'(x.xi + mu t), m'(x-a).A, m'(x-a).(xi x A)) dx
    = (2pi)^3 mean_{profile torus} G.
    """
    prof = profiles or build_profiles()
    mp = params.n_star * params.m
    rpar, rperp = params.r_par, params.r_perp
    s, ws = _window_rule(rpar, n_slab)
    psi_r = rpar**-0.5 * prof.psi(s / rpar)
    dpsi_r = rpar**-1.5 * prof.dpsi(s / rpar)
    rr = np.linspace(0.0, rperp, n_slab + 1)
    wr = np.full(n_slab + 1, rperp / n_slab)
    wr[0] = wr[-1] = 0.5 * wr[0]
    phi_r = prof.phi(rr / rperp) / rperp
    dphi_r = prof.dphi_dr(rr / rperp) / rperp**2
    vol = (2 * np.pi) ** 3

    def mean1(f):
        return float(np.sum(ws * f)) / (2 * np.pi)

    def mean2(f):  # radial functions on the 2-d profile torus
        return float(np.sum(wr * f * 2 * np.pi * rr)) / (4 * np.pi**2)

    def mean3(f):  # functions of (s, r)
        return float(np.einsum("i,j,ij->", ws, wr * 2 * np.pi * rr, f)) / (8 * np.pi**3)

    def lp(mean_abs_p, sup):
        if np.isinf(p):
            return sup
        return (vol * mean_abs_p) ** (1.0 / p)

    P = p
    out = {}
    ap = lambda x: np.abs(x) ** P if not np.isinf(P) else np.abs(x)  # noqa: E731
    out["psi"] = lp(mean1(ap(psi_r)), float(np.abs(psi_r).max()))
    out["grad_psi"] = mp * lp(mean1(ap(dpsi_r)), float(np.abs(dpsi_r).max()))
    out["dt_psi"] = params.mu * out["grad_psi"]
    out["phi"] = lp(mean2(ap(phi_r)), float(np.abs(phi_r).max()))
    out["grad_phi"] = mp * lp(mean2(ap(dphi_r)), float(np.abs(dphi_r).max()))
    prod = np.abs(psi_r)[:, None] * np.abs(phi_r)[None, :]
    out["W"] = lp(mean3(ap(prod)), float(prod.max()))
    gradW = mp * np.sqrt((dpsi_r[:, None] * phi_r[None, :]) ** 2 + (psi_r[:, None] * dphi_r[None, :]) ** 2)
    out["grad_W"] = lp(mean3(ap(gradW)), float(gradW.max()))
    dtW = mp * params.mu * np.abs(dpsi_r)[:, None] * np.abs(phi_r)[None, :]
    out["dt_W"] = lp(mean3(ap(dtW)), float(dtW.max()))
    return out


def predicted_scalings(params: JetParams, p: float) -> dict[str, float]:
    """Right-hand sides of the jet bounds for N, M in {0, 1}."""
    rp, rq, lam, mu = params.r_perp, params.r_par, params.lam, params.mu
    ip = 0.0 if np.isinf(p) else 1.0 / p
    psi0 = rq ** (ip - 0.5)
    phi0 = rp ** (2 * ip - 1)
    return {
        "psi": psi0,
        "grad_psi": psi0 * rp * lam / rq,
        "dt_psi": psi0 * rp * lam * mu / rq,
        "phi": phi0,
        "grad_phi": phi0 * lam,
        "W": phi0 * psi0,
        "grad_W": phi0 * psi0 * lam,
        "dt_W": phi0 * psi0 * rp * lam * mu / rq,
    }


def check_jet_bounds(params_list, ps=(1.0, 2.0, np.inf), profiles: Profiles | None = None, n_slab: int = 1024) -> dict:
    """Ratios measured / predicted for every quantity, p and parameter set.

    Returns a JSON-ready dict with per-(p, quantity) ratio lists and the
    spread max/min across the parameter sets.
    """
    if len(params_list) < 2:
        raise JetError("need at least two parameter sets")
    prof = profiles or build_profiles()
    table = {}
    for p in ps:
        key = "inf" if np.isinf(p) else f"{p:g}"
        rows = {}
        for prm in params_list:
            meas = jet_lp_norms(prm, p, prof, n_slab)
            pred = predicted_scalings(prm, p)
            for q, v in meas.items():
                rows.setdefault(q, []).append(v / pred[q])
        table[key] = {q: {"ratios": r, "spread": max(r) / min(r)} for q, r in rows.items()}
    return {"params": [prm.to_json() for prm in params_list], "table": table}
