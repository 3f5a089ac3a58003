"""Pseudo-spectral fields on the periodic box T^3 = [0, 2pi)^3.

A field is stored through its Fourier coefficients in the ``rfftn`` half
layout, normalised so that

    u(x) = sum_k u_hat[k] exp(i k.x),    u_hat[k] = n^{-3} sum_x u(x) exp(-i k.x).

Nyquist modes (any |k_i| = n/2) are always zero, which keeps real fields
exactly Hermitian and makes spectral derivatives unambiguous.  Three ranks
are supported: scalars (1 component), vectors (3 components) and symmetric
3x3 tensors stored as the six entries ``xx, xy, xz, yy, yz, zz``.

Pointwise products are evaluated on a zero-padded grid (3/2 rule) and then
truncated, so products of two grid fields are alias free on the retained
modes.  Everything here is a pure function of immutable inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "FieldError",
    "NonZeroMean",
    "NegativeTime",
    "WindowTooShort",
    "UnsupportedKind",
    "GridMismatch",
    "Grid3",
    "SpectralField",
    "TimeTrajectory",
    "SYM_INDEX",
    "SYM_PAIRS",
    "zeros",
    "from_physical",
    "to_physical",
    "random_field",
    "pointwise",
    "grad",
    "div",
    "curl",
    "laplacian",
    "leray_project",
    "spectral_filter",
    "inv_divergence",
    "div_tensor",
    "heat_semigroup",
    "mollify_space",
    "mollifier_multiplier",
    "onesided_weights",
    "onesided_derivative_weights",
    "mollify_onesided",
    "norm",
    "inner",
    "traceless_tensor_product",
    "tensor_product",
    "trace",
    "write_snapshot",
    "read_snapshot",
]

TWO_PI = 2.0 * np.pi
VOLUME = TWO_PI**3

# (i, j) -> storage slot of a symmetric tensor, and the inverse list.
SYM_PAIRS: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
SYM_INDEX: dict[tuple[int, int], int] = {}
for _slot, (_i, _j) in enumerate(SYM_PAIRS):
    SYM_INDEX[(_i, _j)] = _slot
    SYM_INDEX[(_j, _i)] = _slot
# Multiplicity of each stored slot inside the full 3x3 matrix.
SYM_MULT = np.array([1.0, 2.0, 2.0, 1.0, 2.0, 1.0])
_DIAG_SLOTS = (0, 3, 5)

_NCOMP = {"scalar": 1, "vector": 3, "sym": 6}


class FieldError(ValueError):
    """Base class for field-level failures."""


class NonZeroMean(FieldError):
    """The zero Fourier mode of an input that must be mean-free is not zero."""


class NegativeTime(FieldError):
    """A semigroup was asked to run backwards."""


class WindowTooShort(FieldError):
    """A causal kernel needs history that the trajectory does not contain."""


class UnsupportedKind(FieldError):
    """Unknown norm, filter or rank."""


class GridMismatch(FieldError):
    """Operands live on different grids or have incompatible ranks."""


def _workers() -> int | None:
    return None


@dataclass(frozen=True)
class Grid3:
    """Uniform n^3 grid on T^3 together with its wavenumber tables.

    Parameters
    ----------
    n : int
        Points (and modes) per axis. Must be even and at least 4.
    dealias_fraction : Fraction
        Fraction of the Nyquist band kept after every product. ``1`` keeps
        all non-Nyquist modes, ``Fraction(2, 3)`` is the classical 2/3 rule.
    """

    n: int
    dealias_fraction: Fraction = Fraction(1)

    def __post_init__(self) -> None:
        if self.n < 4 or self.n % 2:
            raise FieldError(f"grid size must be even and >= 4, got {self.n}")
        frac = Fraction(self.dealias_fraction)
        if not (0 < frac <= 1):
            raise FieldError("dealias_fraction must lie in (0, 1]")
        object.__setattr__(self, "dealias_fraction", frac)

    @property
    def dx(self) -> float:
        return TWO_PI / self.n

    @property
    def nh(self) -> int:
        return self.n // 2 + 1

    @property
    def spec_shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.nh)

    @property
    def padded_n(self) -> int:
        m = -(-3 * self.n // 2)
        return m + (m % 2)

    @property
    def kmax(self) -> int:
        """Largest retained |k_i|."""
        cut = math.floor(self.dealias_fraction * self.n / 2)
        return min(cut, self.n // 2 - 1)

    @cached_property
    def k_axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        k1 = np.fft.fftfreq(n, 1.0 / n)
        k3 = np.arange(self.nh, dtype=float)
        return (k1[:, None, None], k1[None, :, None], k3[None, None, :])

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky, kz = self.k_axes
        return kx**2 + ky**2 + kz**2

    @cached_property
    def kmag(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @cached_property
    def mask(self) -> np.ndarray:
        kx, ky, kz = self.k_axes
        c = self.kmax
        return (np.abs(kx) <= c) & (np.abs(ky) <= c) & (np.abs(kz) <= c)

    @cached_property
    def half_weight(self) -> np.ndarray:
        """Multiplicity of each stored coefficient in the full spectrum."""
        w = np.full(self.spec_shape, 2.0)
        w[:, :, 0] = 1.0
        return w * self.mask

    @cached_property
    def inv_k2(self) -> np.ndarray:
        out = np.zeros(self.spec_shape)
        nz = self.k2 > 0
        out[nz] = 1.0 / self.k2[nz]
        return out

    def k_vec(self) -> list[np.ndarray]:
        return list(self.k_axes)

    def points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.arange(self.n) * self.dx
        return np.meshgrid(x, x, x, indexing="ij", sparse=True)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Truncated Fourier representation of a real field on T^3.

    Attributes
    ----------
    grid : Grid3
    coeffs : ndarray, complex, shape (ncomp, n, n, n//2+1)
    rank : {"scalar", "vector", "sym"}
    traceless : bool
        Only meaningful for ``rank == "sym"``.
    """

    grid: Grid3
    coeffs: np.ndarray
    rank: str = "vector"
    traceless: bool = False

    def __post_init__(self) -> None:
        if self.rank not in _NCOMP:
            raise UnsupportedKind(f"unknown rank {self.rank!r}")
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (_NCOMP[self.rank], *self.grid.spec_shape):
            raise GridMismatch(f"coefficient shape {c.shape} does not match rank/grid")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def ncomp(self) -> int:
        return _NCOMP[self.rank]

    def with_coeffs(self, coeffs: np.ndarray, rank: str | None = None, traceless: bool | None = None) -> "SpectralField":
        return SpectralField(
            self.grid,
            coeffs,
            self.rank if rank is None else rank,
            self.traceless if traceless is None else traceless,
        )

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return self.with_coeffs(self.coeffs + other.coeffs, traceless=self.traceless and other.traceless)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return self.with_coeffs(self.coeffs - other.coeffs, traceless=self.traceless and other.traceless)

    def __neg__(self) -> "SpectralField":
        return self.with_coeffs(-self.coeffs)

    def __mul__(self, s: float) -> "SpectralField":
        return self.with_coeffs(self.coeffs * s)

    __rmul__ = __mul__

    def mean(self) -> np.ndarray:
        """Spatial average of each component."""
        return self.coeffs[:, 0, 0, 0].real.copy()

    def physical(self, n_out: int | None = None) -> np.ndarray:
        return to_physical(self, n_out)

    def resize(self, grid: Grid3) -> "SpectralField":
        """Zero-pad or truncate to another grid."""
        c = _resample(self.coeffs, self.grid.n, grid.n) * grid.mask
        return SpectralField(grid, c, self.rank, self.traceless)

    def component(self, i: int) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs[i : i + 1], "scalar")

    def is_divergence_free(self, tol: float = 1e-12) -> bool:
        d = div(self)
        scale = max(_coeff_norm(self.coeffs) * max(self.grid.kmax, 1), 1e-300)
        return _coeff_norm(d.coeffs) <= tol * scale

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        plane = self.coeffs[:, :, :, 0]
        flipped = np.conj(plane[:, (-np.arange(self.grid.n)) % self.grid.n][:, :, (-np.arange(self.grid.n)) % self.grid.n])
        scale = max(np.abs(plane).max(initial=0.0), 1e-300)
        return float(np.abs(plane - flipped).max(initial=0.0)) <= tol * scale


def _check_same(a: SpectralField, b: SpectralField) -> None:
    if a.grid != b.grid or a.rank != b.rank:
        raise GridMismatch("operands differ in grid or rank")


def _coeff_norm(c: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.abs(c) ** 2)))


# ----------------------------------------------------------------------------
# transforms


def _resample(c: np.ndarray, n: int, m: int) -> np.ndarray:
    """Copy rfft-layout coefficients from an n-grid onto an m-grid."""
    if n == m:
        return c.copy()
    lead = c.shape[:-3]
    out = np.zeros((*lead, m, m, m // 2 + 1), dtype=complex)
    h = min(n, m) // 2  # modes 0..h-1 and -(h-1)..-1 are transferred
    pos = slice(0, h)
    src_neg = slice(n - h + 1, n)
    dst_neg = slice(m - h + 1, m)
    for si, di in ((pos, pos), (src_neg, dst_neg)):
        for sj, dj in ((pos, pos), (src_neg, dst_neg)):
            out[..., di, dj, :h] = c[..., si, sj, :h]
    return out


def to_physical(f: SpectralField, n_out: int | None = None) -> np.ndarray:
    """Values on the (optionally refined) physical grid, shape (ncomp, m, m, m)."""
    m = f.grid.n if n_out is None else n_out
    c = _resample(f.coeffs, f.grid.n, m) if m != f.grid.n else f.coeffs
    return sfft.irfftn(c, s=(m, m, m), axes=(-3, -2, -1), workers=_workers()) * m**3


def from_physical(values: np.ndarray, grid: Grid3, rank: str = "vector", traceless: bool = False) -> SpectralField:
    """Project physical samples on an m-grid (m >= n) onto ``grid``.

    ``values`` has shape (ncomp, m, m, m); a 3-d array is read as a scalar.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim == 3:
        v = v[None]
    m = v.shape[-1]
    c = sfft.rfftn(v, axes=(-3, -2, -1), workers=_workers()) / m**3
    c = _resample(c, m, grid.n) * grid.mask
    return SpectralField(grid, c, rank, traceless)


def zeros(grid: Grid3, rank: str = "vector") -> SpectralField:
    return SpectralField(grid, np.zeros((_NCOMP[rank], *grid.spec_shape), dtype=complex), rank)


def random_field(
    grid: Grid3,
    rng: np.random.Generator,
    rank: str = "vector",
    *,
    mean_zero: bool = True,
    solenoidal: bool = False,
    kcut: float | None = None,
    slope: float = 0.0,
) -> SpectralField:
    """Random smooth-ish real field used by tests and demonstrations.

    Parameters
    ----------
    kcut : float, optional
        Keep only modes with |k| <= kcut.
    slope : float
        Multiply coefficients by (1 + |k|^2)^(-slope/2).
    """
    vals = rng.standard_normal((_NCOMP[rank], grid.n, grid.n, grid.n))
    f = from_physical(vals, grid, rank)
    c = np.array(f.coeffs)
    if slope:
        c *= (1.0 + grid.k2) ** (-slope / 2)
    if kcut is not None:
        c *= grid.kmag <= kcut
    if mean_zero:
        c[:, 0, 0, 0] = 0.0
    out = f.with_coeffs(c)
    if solenoidal:
        out = leray_project(out)
    return out


def pointwise(
    func: Callable[..., np.ndarray],
    *fields: SpectralField,
    rank: str = "vector",
    traceless: bool = False,
    grid: Grid3 | None = None,
    padded: bool = True,
) -> SpectralField:
    """Apply ``func`` to physical values and project back.

    With ``padded=True`` the evaluation happens on the 3/2 grid, which makes
    bilinear ``func`` alias free on the retained modes.
    """
    g = grid or fields[0].grid
    for f in fields:
        if f.grid != g:
            raise GridMismatch("pointwise operands live on different grids")
    m = g.padded_n if padded else g.n
    phys = [to_physical(f, m) for f in fields]
    out = np.asarray(func(*phys))
    return from_physical(out, g, rank, traceless)


# ----------------------------------------------------------------------------
# differential operators


def _ik(grid: Grid3) -> list[np.ndarray]:
    return [1j * k for k in grid.k_axes]


def grad(f: SpectralField) -> SpectralField:
    """Gradient of a scalar field."""
    if f.rank != "scalar":
        raise GridMismatch("grad expects a scalar field")
    ik = _ik(f.grid)
    c = np.stack([ik[i] * f.coeffs[0] for i in range(3)])
    return SpectralField(f.grid, c, "vector")


def div(f: SpectralField) -> SpectralField:
    """Divergence of a vector field (scalar result)."""
    if f.rank != "vector":
        raise GridMismatch("div expects a vector field")
    ik = _ik(f.grid)
    c = sum(ik[i] * f.coeffs[i] for i in range(3))
    return SpectralField(f.grid, np.asarray(c)[None], "scalar")


def div_tensor(t: SpectralField) -> SpectralField:
    """Row divergence (div T)_i = d_j T_ij of a symmetric tensor."""
    if t.rank != "sym":
        raise GridMismatch("div_tensor expects a symmetric tensor")
    ik = _ik(t.grid)
    c = np.stack([sum(ik[j] * t.coeffs[SYM_INDEX[(i, j)]] for j in range(3)) for i in range(3)])
    return SpectralField(t.grid, c, "vector")


def curl(f: SpectralField) -> SpectralField:
    if f.rank != "vector":
        raise GridMismatch("curl expects a vector field")
    ik = _ik(f.grid)
    u = f.coeffs
    c = np.stack(
        [
            ik[1] * u[2] - ik[2] * u[1],
            ik[2] * u[0] - ik[0] * u[2],
            ik[0] * u[1] - ik[1] * u[0],
        ]
    )
    return SpectralField(f.grid, c, "vector")


def laplacian(f: SpectralField) -> SpectralField:
    return f.with_coeffs(-f.grid.k2 * f.coeffs)


def leray_project(v: SpectralField) -> SpectralField:
    """Helmholtz projection onto divergence-free fields (k = 0 untouched)."""
    if v.rank != "vector":
        raise GridMismatch("leray_project expects a vector field")
    g = v.grid
    k = g.k_axes
    kdotv = sum(k[i] * v.coeffs[i] for i in range(3))
    c = np.stack([v.coeffs[i] - k[i] * kdotv * g.inv_k2 for i in range(3)])
    return v.with_coeffs(c)


def spectral_filter(v: SpectralField, kind: str, value: float | None = None) -> SpectralField:
    """Fourier cut-offs.

    ``kind`` is one of ``"leq"`` (keep |k| <= value), ``"lt"`` (keep |k| < value),
    ``"geq"`` (keep |k| >= value) or ``"neq0"`` (drop the mean).
    """
    g = v.grid
    if kind == "neq0":
        c = np.array(v.coeffs)
        c[:, 0, 0, 0] = 0.0
        return v.with_coeffs(c)
    if value is None or value <= 0:
        raise FieldError(f"filter {kind!r} needs a positive threshold")
    if kind == "leq":
        keep = g.kmag <= value
    elif kind == "lt":
        keep = g.kmag < value
    elif kind == "geq":
        keep = g.kmag >= value
    else:
        raise UnsupportedKind(f"unknown filter {kind!r}")
    return v.with_coeffs(v.coeffs * keep)


def inv_divergence(v: SpectralField, *, mean_tol: float = 1e-12) -> SpectralField:
    """Symmetric trace-free right inverse of the divergence.

    Per mode k != 0 the symbol is

        R_kl = -i (k_k v_l + k_l v_k)/|k|^2 + (i/2)(delta_kl + k_k k_l/|k|^2)(k.v)/|k|^2,

    so that ``div_tensor(inv_divergence(v)) == v`` for every mean-free ``v``.

    Raises
    ------
    NonZeroMean
        If the k = 0 coefficient exceeds ``mean_tol`` relative to the field.
    """
    if v.rank != "vector":
        raise GridMismatch("inv_divergence expects a vector field")
    mean = np.abs(v.coeffs[:, 0, 0, 0]).max()
    scale = _coeff_norm(v.coeffs)
    if mean > mean_tol * max(scale, 1e-300) and mean > 0:
        raise NonZeroMean(f"mean {mean:.3e} vs field size {scale:.3e}")
    g = v.grid
    k = g.k_axes
    ik2 = g.inv_k2
    kv = sum(k[i] * v.coeffs[i] for i in range(3)) * ik2
    out = np.empty((6, *g.spec_shape), dtype=complex)
    for slot, (a, b) in enumerate(SYM_PAIRS):
        term = -1j * (k[a] * v.coeffs[b] + k[b] * v.coeffs[a]) * ik2
        extra = k[a] * k[b] * ik2
        if a == b:
            extra = extra + (g.k2 > 0)
        out[slot] = term + 0.5j * extra * kv
    out[:, 0, 0, 0] = 0.0
    return SpectralField(g, out, "sym", traceless=True)


def trace(t: SpectralField) -> SpectralField:
    if t.rank != "sym":
        raise GridMismatch("trace expects a symmetric tensor")
    c = t.coeffs[0] + t.coeffs[3] + t.coeffs[5]
    return SpectralField(t.grid, c[None], "scalar")


def heat_semigroup(u0: SpectralField, t: float) -> SpectralField:
    """Apply exp(t Laplacian) mode by mode."""
    if t < 0:
        raise NegativeTime(f"t = {t} < 0")
    return u0.with_coeffs(u0.coeffs * np.exp(-u0.grid.k2 * t))


# ----------------------------------------------------------------------------
# mollifiers


def _bump(s: np.ndarray) -> np.ndarray:
    """exp(-1/(1-s^2)) on |s| < 1, zero elsewhere."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(400)


def mollifier_multiplier(kappa: np.ndarray) -> np.ndarray:
    """Fourier transform of the unit-mass radial bump of radius 1 in R^3.

    ``kappa`` is |k| times the mollifier radius.
    """
    r = 0.5 * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS
    prof = _bump(r) * r**2 * w
    kap = np.atleast_1d(np.asarray(kappa, dtype=float))
    sinc = np.sinc(np.outer(kap, r) / np.pi)  # sin(kr)/(kr)
    vals = sinc @ prof
    return vals / prof.sum()


def mollify_space(f: SpectralField, ell: float) -> SpectralField:
    """Convolution with the radial bump of radius ``ell`` (periodised)."""
    if ell <= 0:
        return f
    g = f.grid
    k2i = np.rint(g.k2).astype(np.int64)
    uniq, inv = np.unique(k2i, return_inverse=True)
    mult = mollifier_multiplier(ell * np.sqrt(uniq))[inv].reshape(k2i.shape)
    return f.with_coeffs(f.coeffs * mult)


def onesided_weights(ell: float, dt: float) -> np.ndarray:
    """Discrete causal kernel supported on lags 0..N with N = ceil(ell/dt).

    Weight ``w[j]`` multiplies the sample at time ``t - j*dt``.  The weights
    are the exact integrals of the bump (supported in (0, N*dt)) against the
    piecewise-linear hat functions of the time grid, so the discrete
    convolution is the exact convolution of the kernel with the linear
    interpolant of the samples.  They sum to one.
    """
    if dt <= 0:
        raise FieldError("dt must be positive")
    if ell < dt * (1 - 1e-9):
        raise WindowTooShort(f"mollifier width {ell} is below one step {dt}")
    N = max(1, int(math.ceil(ell / dt - 1e-9)))
    L = N * dt
    nodes, weights = np.polynomial.legendre.leggauss(64)
    w = np.zeros(N + 1)
    for j in range(N):
        s = j * dt + 0.5 * dt * (nodes + 1.0)
        ws = 0.5 * dt * weights
        ker = _bump(2.0 * s / L - 1.0)
        frac = (s - j * dt) / dt
        w[j] += np.sum(ws * ker * (1.0 - frac))
        w[j + 1] += np.sum(ws * ker * frac)
    return w / w.sum()


def onesided_derivative_weights(ell: float, dt: float) -> np.ndarray:
    """Weights giving the exact time derivative of the causal mollification.

    With ``w = onesided_weights(ell, dt)`` the mollified signal is
    t -> int phi(s) f(t - s) ds for the linear interpolant f of the samples.
    Its derivative at a grid time is int phi'(s) f(t - s) ds, which is the
    combination ``sum_j d[j] f(t - j dt)`` returned here.  The weights sum
    to zero and share the support of ``w``, so the derivative stays causal.
    """
    if ell < dt * (1 - 1e-9):
        raise WindowTooShort(f"mollifier width {ell} is below one step {dt}")
    N = max(1, int(math.ceil(ell / dt - 1e-9)))
    L = N * dt
    nodes, weights = np.polynomial.legendre.leggauss(64)
    mass = 0.0
    d = np.zeros(N + 1)
    for j in range(N):
        s = j * dt + 0.5 * dt * (nodes + 1.0)
        ws = 0.5 * dt * weights
        u = 2.0 * s / L - 1.0
        ker = _bump(u)
        dker = -2.0 * u / (1.0 - u**2) ** 2 * ker * (2.0 / L)
        frac = (s - j * dt) / dt
        mass += np.sum(ws * ker)
        d[j] += np.sum(ws * dker * (1.0 - frac))
        d[j + 1] += np.sum(ws * dker * frac)
    return d / mass


# ----------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class TimeTrajectory:
    """Uniformly sampled fields ``data[i]`` at times ``t_lo + i*dt``.

    Attributes
    ----------
    grid : Grid3
    t_lo, dt : float
    data : ndarray, shape (nt, ncomp, n, n, n//2+1)
    rank : str
    traceless : bool
    """

    grid: Grid3
    t_lo: float
    dt: float
    data: np.ndarray
    rank: str = "vector"
    traceless: bool = False
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        d = np.asarray(self.data)
        if d.ndim != 5 or d.shape[1:] != (_NCOMP[self.rank], *self.grid.spec_shape):
            raise GridMismatch(f"trajectory data shape {d.shape} is inconsistent")
        if self.dt <= 0:
            raise FieldError("dt must be positive")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def nt(self) -> int:
        return self.data.shape[0]

    @property
    def steps(self) -> int:
        return self.nt - 1

    @property
    def t_hi(self) -> float:
        return self.t_lo + self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t_lo + self.dt * np.arange(self.nt)

    def index(self, t: float, tol: float = 1e-9) -> int:
        x = (t - self.t_lo) / self.dt
        i = int(round(x))
        if abs(x - i) > tol * max(1.0, abs(x)) or not (0 <= i < self.nt):
            raise FieldError(f"time {t} is not a sample of the trajectory")
        return i

    def at(self, i: int) -> SpectralField:
        return SpectralField(self.grid, self.data[i], self.rank, self.traceless)

    def at_time(self, t: float) -> SpectralField:
        return self.at(self.index(t))

    def window(self, i0: int, i1: int) -> "TimeTrajectory":
        """Samples i0..i1 inclusive."""
        return TimeTrajectory(self.grid, self.t_lo + i0 * self.dt, self.dt, self.data[i0 : i1 + 1], self.rank, self.traceless)

    def with_data(self, data: np.ndarray, rank: str | None = None, traceless: bool | None = None, t_lo: float | None = None) -> "TimeTrajectory":
        return TimeTrajectory(
            self.grid,
            self.t_lo if t_lo is None else t_lo,
            self.dt,
            data,
            self.rank if rank is None else rank,
            self.traceless if traceless is None else traceless,
        )

    def map(self, fn: Callable[[SpectralField], SpectralField]) -> "TimeTrajectory":
        out = [fn(self.at(i)) for i in range(self.nt)]
        return TimeTrajectory(self.grid, self.t_lo, self.dt, np.stack([o.coeffs for o in out]), out[0].rank, out[0].traceless)

    @staticmethod
    def from_fields(fields: Sequence[SpectralField], t_lo: float, dt: float) -> "TimeTrajectory":
        f0 = fields[0]
        return TimeTrajectory(f0.grid, t_lo, dt, np.stack([f.coeffs for f in fields]), f0.rank, f0.traceless)

    @staticmethod
    def constant(f: SpectralField, t_lo: float, dt: float, nt: int) -> "TimeTrajectory":
        data = np.broadcast_to(f.coeffs, (nt, *f.coeffs.shape)).copy()
        return TimeTrajectory(f.grid, t_lo, dt, data, f.rank, f.traceless)

    def check_uniform(self, t_lo: float, t_hi: float, tol: float = 1e-9) -> None:
        steps = (t_hi - t_lo) / self.dt
        if abs(steps - round(steps)) > tol * max(1.0, steps):
            raise FieldError("window length is not an integer number of steps")


def mollify_onesided(
    traj: TimeTrajectory,
    ell: float,
    *,
    t_out_lo: float | None = None,
    space: bool = True,
    space_ell: float | None = None,
) -> TimeTrajectory:
    """Space mollification plus causal time mollification.

    The output at time t is a combination of input samples in [t - N dt, t]
    with N = ceil(ell/dt); ``ell`` is therefore rounded up to a whole number
    of steps.  The output starts at ``t_out_lo`` (default: the first time
    with a full history) and ends at the last input sample.

    Raises
    ------
    WindowTooShort
        If ``t_out_lo`` has less than N steps of history.
    """
    w = onesided_weights(ell, traj.dt)
    N = len(w) - 1
    if t_out_lo is None:
        i0 = N
    else:
        x = (t_out_lo - traj.t_lo) / traj.dt
        i0 = int(round(x))
        if abs(x - i0) > 1e-9 * max(1.0, abs(x)):
            raise FieldError("t_out_lo is not on the trajectory grid")
    if i0 < N:
        raise WindowTooShort(f"output start needs {N} steps of history, only {i0} available")
    if i0 >= traj.nt:
        raise WindowTooShort("output window is empty")
    data = traj.data
    nt_out = traj.nt - i0
    out = np.zeros((nt_out, *data.shape[1:]), dtype=complex)
    for j, wj in enumerate(w):
        if wj != 0.0:
            out += wj * data[i0 - j : i0 - j + nt_out]
    if space:
        g = traj.grid
        k2i = np.rint(g.k2).astype(np.int64)
        uniq, inv = np.unique(k2i, return_inverse=True)
        mult = mollifier_multiplier((space_ell or ell) * np.sqrt(uniq))[inv].reshape(k2i.shape)
        out *= mult
    return TimeTrajectory(traj.grid, traj.t_lo + i0 * traj.dt, traj.dt, out, traj.rank, traj.traceless)


# ----------------------------------------------------------------------------
# norms and products


def _pointwise_abs(vals: np.ndarray, rank: str) -> np.ndarray:
    if rank == "sym":
        return np.sqrt(np.tensordot(SYM_MULT, vals**2, axes=(0, 0)))
    return np.sqrt(np.sum(vals**2, axis=0))


def _sobolev_weight(grid: Grid3, s: float) -> np.ndarray:
    """Symbol of the rescaled Bessel potential ((1 + |k|^2)/2)^(s/2)."""
    return ((1.0 + grid.k2) / 2.0) ** (s / 2.0)


def _l2_spectral(c: np.ndarray, grid: Grid3, rank: str) -> float:
    mult = SYM_MULT if rank == "sym" else np.ones(c.shape[0])
    tot = 0.0
    for i in range(c.shape[0]):
        tot += mult[i] * float(np.sum(grid.half_weight * np.abs(c[i]) ** 2))
    return math.sqrt(VOLUME * tot)


def inner(f: SpectralField, g: SpectralField) -> float:
    """L^2(T^3) pairing of two fields of equal rank."""
    _check_same(f, g)
    mult = SYM_MULT if f.rank == "sym" else np.ones(f.ncomp)
    tot = 0.0
    for i in range(f.ncomp):
        tot += mult[i] * float(np.sum(f.grid.half_weight * (f.coeffs[i] * np.conj(g.coeffs[i])).real))
    return VOLUME * tot


def norm(x, kind: str, *args, n_quad: int | None = None, base: tuple | None = None) -> float:
    """Function-space norms.

    Parameters
    ----------
    x : SpectralField or TimeTrajectory
    kind : str
        ``"L"`` with p (``norm(f, "L", 2)``; p may be ``np.inf``),
        ``"H"`` with s, ``"W"`` with s and p, ``"C"`` with N,
        ``"CtX"`` (sup over time of a base norm) or ``"Holder"`` with alpha.
        For ``"CtX"`` and ``"Holder"`` the spatial norm is given by ``base``,
        e.g. ``base=("L", 2)``.
    n_quad : int, optional
        Physical quadrature grid for L^p type norms (defaults to the field grid).

    Notes
    -----
    H^s uses the multiplier ((1+|k|^2)/2)^(s/2), which keeps
    ``norm(f, "H", s) <= norm(grad f, "L", 2)`` for mean-free f and s <= 1.
    The C^N norm is the sum over multi-indices |a| <= N of the grid maximum
    of |D^a f|, so it is a grid maximum and not the continuum supremum.
    """
    if isinstance(x, TimeTrajectory):
        return _traj_norm(x, kind, args, base or ("L", 2), n_quad)
    f: SpectralField = x
    if kind == "L":
        (p,) = args
        if p == 2 and n_quad is None:
            return _l2_spectral(f.coeffs, f.grid, f.rank)
        vals = _pointwise_abs(to_physical(f, n_quad), f.rank)
        if np.isinf(p):
            return float(vals.max())
        m = vals.shape[-1]
        return float((np.sum(vals**p) * (TWO_PI / m) ** 3) ** (1.0 / p))
    if kind == "H":
        (s,) = args
        return _l2_spectral(f.coeffs * _sobolev_weight(f.grid, s), f.grid, f.rank)
    if kind == "W":
        s, p = args
        return norm(f.with_coeffs(f.coeffs * _sobolev_weight(f.grid, s)), "L", p, n_quad=n_quad)
    if kind == "C":
        (N,) = args
        total = 0.0
        ik = _ik(f.grid)
        for order in range(int(N) + 1):
            for a in range(order + 1):
                for b in range(order - a + 1):
                    c = order - a - b
                    sym = ik[0] ** a * ik[1] ** b * ik[2] ** c
                    vals = _pointwise_abs(to_physical(f.with_coeffs(f.coeffs * sym), n_quad), f.rank)
                    total += float(vals.max())
        return total
    raise UnsupportedKind(f"unknown norm kind {kind!r}")


def _hilbert_weights(traj: TimeTrajectory, base: tuple) -> np.ndarray | None:
    if base[0] == "L" and base[1] == 2:
        w = traj.grid.half_weight
    elif base[0] == "H":
        w = traj.grid.half_weight * _sobolev_weight(traj.grid, base[1]) ** 2
    else:
        return None
    return w


def _traj_norm(traj: TimeTrajectory, kind: str, args, base: tuple, n_quad) -> float:
    if kind == "CtX":
        return float(np.max(traj_pointwise_norms(traj, base, n_quad)))
    if kind == "Holder":
        (alpha,) = args
        return holder_profile(traj, alpha, base, n_quad)[-1]
    raise UnsupportedKind(f"unknown trajectory norm {kind!r}")


def traj_pointwise_norms(traj: TimeTrajectory, base: tuple = ("L", 2), n_quad: int | None = None) -> np.ndarray:
    """Base norm of every sample."""
    w = _hilbert_weights(traj, base)
    if w is not None:
        mult = SYM_MULT if traj.rank == "sym" else np.ones(traj.data.shape[1])
        sq = np.einsum("c,tcxyz,xyz->t", mult, np.abs(traj.data) ** 2, w)
        return np.sqrt(VOLUME * sq)
    return np.array([norm(traj.at(i), base[0], *base[1:], n_quad=n_quad) for i in range(traj.nt)])


def holder_profile(traj: TimeTrajectory, alpha: float, base: tuple = ("L", 2), n_quad: int | None = None) -> np.ndarray:
    """Running value of the time-Hoelder norm on [t_lo, t_i] for every i.

    Entry i equals sup_{s != t <= t_i} ||f(s)-f(t)|| / |s-t|^alpha plus
    sup_{t <= t_i} ||f(t)||, evaluated over all pairs of samples.
    """
    nt = traj.nt
    pn = traj_pointwise_norms(traj, base, n_quad)
    w = _hilbert_weights(traj, base)
    if w is not None:
        mult = SYM_MULT if traj.rank == "sym" else np.ones(traj.data.shape[1])
        flat = (traj.data * np.sqrt(w)[None, None]).reshape(nt, traj.data.shape[1], -1)
        flat = flat * np.sqrt(mult)[None, :, None]
        flat = flat.reshape(nt, -1)
        gram = VOLUME * (flat @ flat.conj().T).real
        d = np.diag(gram)
        dist2 = np.maximum(d[:, None] + d[None, :] - 2.0 * gram, 0.0)
        dist = np.sqrt(dist2)
    else:
        dist = np.zeros((nt, nt))
        for i in range(nt):
            for j in range(i):
                dist[i, j] = dist[j, i] = norm(traj.at(i) - traj.at(j), base[0], *base[1:], n_quad=n_quad)
    lag = np.abs(np.subtract.outer(np.arange(nt), np.arange(nt))) * traj.dt
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lag > 0, dist / np.where(lag > 0, lag, 1.0) ** alpha, 0.0)
    # running sup over pairs with both indices <= i
    semi = np.maximum.accumulate(np.array([ratio[i, : i + 1].max() for i in range(nt)]))
    return semi + np.maximum.accumulate(pn)


def tensor_product(f: SpectralField, g: SpectralField) -> SpectralField:
    """Symmetrised dealiased product 1/2 (f_i g_j + f_j g_i)."""
    if f.rank != "vector" or g.rank != "vector" or f.grid != g.grid:
        raise GridMismatch("tensor product needs two vector fields on one grid")

    def _sym(a, b):
        return np.stack([0.5 * (a[i] * b[j] + a[j] * b[i]) for (i, j) in SYM_PAIRS])

    return pointwise(_sym, f, g, rank="sym")


def traceless_tensor_product(f: SpectralField, g: SpectralField) -> SpectralField:
    """(f o g)_ij = 1/2 (f_i g_j + f_j g_i) - 1/3 delta_ij f.g, dealiased."""
    if f.rank != "vector" or g.rank != "vector":
        raise GridMismatch("traceless product needs vector fields")
    if f.grid != g.grid:
        raise GridMismatch("operands live on different grids")

    def _tl(a, b):
        dot = np.sum(a * b, axis=0) / 3.0
        out = []
        for i, j in SYM_PAIRS:
            v = 0.5 * (a[i] * b[j] + a[j] * b[i])
            if i == j:
                v = v - dot
            out.append(v)
        return np.stack(out)

    return pointwise(_tl, f, g, rank="sym", traceless=True)


def remove_trace(t: SpectralField) -> SpectralField:
    c = np.array(t.coeffs)
    tr = (c[0] + c[3] + c[5]) / 3.0
    for s in _DIAG_SLOTS:
        c[s] -= tr
    return t.with_coeffs(c, traceless=True)


def sym_frobenius_pointwise(vals: np.ndarray) -> np.ndarray:
    """Pointwise Frobenius norm of symmetric-tensor samples (6, ...)."""
    return _pointwise_abs(vals, "sym")


# ----------------------------------------------------------------------------
# snapshot files

_MAGIC = b"WNS1"
_HEADER = struct.Struct("<4sIIIIdd")
FLAG_MEAN_ZERO = 1
FLAG_DIV_FREE = 2
FLAG_TRACELESS = 4
_RANK_CODE = {"scalar": 0, "vector": 1, "sym": 2}
_CODE_RANK = {v: k for k, v in _RANK_CODE.items()}


def write_snapshot(path: str | Path, x: SpectralField | TimeTrajectory) -> None:
    """Write a field or trajectory in the ``WNS1`` binary format.

    Layout (little endian): 4-byte magic ``WNS1``; uint32 grid n; uint32
    flags (bit 0 mean-free, bit 1 divergence-free, bit 2 traceless,
    bits 8-9 rank code 0/1/2 for scalar/vector/symmetric); uint32 ncomp;
    uint32 nt (1 for a snapshot); float64 t_lo; float64 dt; then
    nt*ncomp*n*n*(n//2+1) complex coefficients as interleaved float64
    (real, imag) pairs in C order over (t, comp, kx, ky, kz).
    """
    if isinstance(x, TimeTrajectory):
        data, grid, rank, tl, t_lo, dt = x.data, x.grid, x.rank, x.traceless, x.t_lo, x.dt
    else:
        data, grid, rank, tl, t_lo, dt = x.coeffs[None], x.grid, x.rank, x.traceless, 0.0, 0.0
    flags = _RANK_CODE[rank] << 8
    if np.all(np.abs(data[:, :, 0, 0, 0]) <= 1e-14 * max(np.abs(data).max(initial=0.0), 1e-300)):
        flags |= FLAG_MEAN_ZERO
    if rank == "vector":
        sample = SpectralField(grid, data[0], "vector")
        if sample.is_divergence_free():
            flags |= FLAG_DIV_FREE
    if tl:
        flags |= FLAG_TRACELESS
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, grid.n, flags, data.shape[1], data.shape[0], float(t_lo), float(dt)))
        fh.write(np.ascontiguousarray(data, dtype="<c16").view("<f8").tobytes())


def read_snapshot(path: str | Path) -> SpectralField | TimeTrajectory:
    raw = Path(path).read_bytes()
    magic, n, flags, ncomp, nt, t_lo, dt = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FieldError("not a WNS1 file")
    grid = Grid3(n)
    rank = _CODE_RANK[(flags >> 8) & 3]
    arr = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).view("<c16")
    data = arr.reshape(nt, ncomp, *grid.spec_shape).astype(complex)
    tl = bool(flags & FLAG_TRACELESS)
    if nt == 1 and dt == 0.0:
        return SpectralField(grid, data[0], rank, tl)
    return TimeTrajectory(grid, t_lo, dt, data, rank, tl)
