"""Rational direction set and the coefficient functions of the geometric lemma.

Symmetric matrices near the identity are written as positive combinations
of the rank-one matrices xi (x) xi over six rational unit directions.  For
this set the map R -> (gamma_xi(R)^2)_xi is linear (a 6x6 solve), so every
gamma_xi is the square root of an affine function and all derivatives are
available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np
import sympy

__all__ = [
    "GeometryError",
    "OutOfBall",
    "UnknownDirection",
    "DirectionSet",
    "build_direction_set",
    "gamma_coeffs",
    "gamma_squared",
    "frame",
    "sym_to_frobenius_vec",
]

Vec = tuple[Fraction, Fraction, Fraction]

# Pythagorean directions arranged in +/- pairs, with a fixed orthogonal partner.
_DIRS_INT = ((3, 4, 0), (3, -4, 0), (0, 3, 4), (0, 3, -4), (4, 0, 3), (-4, 0, 3))
_PARTNERS_INT = ((-4, 3, 0), (4, 3, 0), (0, -4, 3), (0, 4, 3), (3, 0, -4), (3, 0, 4))

# Frobenius-orthonormal coordinates of a symmetric matrix.
_SQ2 = math.sqrt(2.0)
_VEC_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


class GeometryError(ValueError):
    pass


class OutOfBall(GeometryError):
    """Argument of gamma lies outside the certified ball around Id."""


class UnknownDirection(GeometryError):
    pass


def _frac_vec(v: Sequence[int], den: int = 5) -> Vec:
    return tuple(Fraction(c, den) for c in v)  # type: ignore[return-value]


def _cross(a: Vec, b: Vec) -> Vec:
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _dot(a: Vec, b: Vec) -> Fraction:
    return sum((x * y for x, y in zip(a, b)), Fraction(0))


def sym_to_frobenius_vec(R: np.ndarray) -> np.ndarray:
    """Coordinates (xx, yy, zz, sqrt2 xy, sqrt2 xz, sqrt2 yz); Euclidean = Frobenius."""
    R = np.asarray(R, dtype=float)
    scale = np.array([1.0, 1.0, 1.0, _SQ2, _SQ2, _SQ2])
    return np.stack([R[..., i, j] for i, j in _VEC_PAIRS], axis=-1) * scale


def _outer_vec_exact(xi: Vec) -> list[Fraction]:
    """xi (x) xi in plain (xx, yy, zz, xy, xz, yz) coordinates."""
    return [xi[i] * xi[j] for i, j in _VEC_PAIRS]


@dataclass(frozen=True)
class DirectionSet:
    """The six directions, their frames and the derived constants.

    Attributes
    ----------
    dirs : tuple of exact rational unit vectors
    frames : tuple of (xi, A_xi, xi x A_xi) triples, exact
    n_star : int
        Smallest positive integer clearing every denominator in the frames.
    linear_map : ndarray (6, 6)
        Sends Frobenius coordinates of R to (gamma_xi(R)^2)_xi.
    linear_map_exact : tuple
        Same map in plain coordinates, as exact fractions.
    gamma2_id : tuple of Fraction
        gamma_xi(Id)^2 for each direction.
    op_norm : float
        Spectral norm of ``linear_map``.
    radius_eff : float
        Radius of the Frobenius ball on which every gamma^2 stays above ``margin``.
    margin : float
    M_const : float
        The bound constant built from C^N norms of gamma on the certified ball.
    N_deriv : int
        Highest derivative order entering ``M_const``.
    """

    dirs: tuple[Vec, ...]
    frames: tuple[tuple[Vec, Vec, Vec], ...]
    n_star: int
    linear_map: np.ndarray
    linear_map_exact: tuple[tuple[Fraction, ...], ...]
    gamma2_id: tuple[Fraction, ...]
    op_norm: float
    radius_eff: float
    margin: float
    M_const: float
    N_deriv: int
    det_exact: Fraction = field(default=Fraction(0))

    @property
    def dirs_float(self) -> np.ndarray:
        return np.array([[float(c) for c in xi] for xi in self.dirs])

    def frame_float(self, idx: int) -> np.ndarray:
        return np.array([[float(c) for c in v] for v in self.frames[idx]])

    def index(self, xi: Sequence) -> int:
        key = tuple(Fraction(c).limit_denominator(1000) for c in xi)
        for i, d in enumerate(self.dirs):
            if d == key:
                return i
        raise UnknownDirection(f"{xi} is not in the direction set")

    def to_json(self) -> dict:
        return {
            "dirs": [[str(c) for c in d] for d in self.dirs],
            "partners": [[str(c) for c in f[1]] for f in self.frames],
            "n_star": self.n_star,
            "gamma2_id": [str(g) for g in self.gamma2_id],
            "op_norm": self.op_norm,
            "radius_eff": self.radius_eff,
            "margin": self.margin,
            "M_const": self.M_const,
            "N_deriv": self.N_deriv,
            "det": str(self.det_exact),
        }


def _n_star(frames) -> int:
    dens = [c.denominator for fr in frames for v in fr for c in v]
    return reduce(lambda a, b: a * b // math.gcd(a, b), dens, 1)


def _h_poly(values: np.ndarray, m: int) -> float:
    """Complete homogeneous symmetric polynomial h_m(values)."""
    if m == 0:
        return 1.0
    total = 0.0
    for combo in combinations_with_replacement(range(len(values)), m):
        total += float(np.prod(values[list(combo)]))
    return total


def _m_constant(linear_map: np.ndarray, g2_id: np.ndarray, radius: float, N: int, n_dirs: int) -> float:
    """C_Lambda * max_xi ( |gamma|_C0 + sum_{1<=|j|<=N} |D^j gamma|_C0 ) on the ball.

    gamma = sqrt(l(R)) with l affine and gradient g, so
    D^j gamma = c_m l^{1/2-m} g^j with c_m = prod_{i<m} (1/2 - i).
    """
    c_lambda = 8 * n_dirs * math.sqrt(1.0 + 8.0 * math.pi**3)
    best = 0.0
    for row, l0 in zip(linear_map, g2_id):
        gn = float(np.linalg.norm(row))
        lmin = l0 - radius * gn
        lmax = l0 + radius * gn
        total = math.sqrt(lmax)
        absg = np.abs(row)
        for m in range(1, N + 1):
            cm = abs(math.prod(0.5 - i for i in range(m)))
            total += cm * lmin ** (0.5 - m) * _h_poly(absg, m)
        best = max(best, total)
    return c_lambda * best


def build_direction_set(margin: float = 1e-3, N_deriv: int = 4) -> DirectionSet:
    """Construct the fixed direction set with exact frames and constants."""
    dirs = tuple(_frac_vec(d) for d in _DIRS_INT)
    frames = []
    for xi, a_int in zip(dirs, _PARTNERS_INT):
        A = _frac_vec(a_int)
        frames.append((xi, A, _cross(xi, A)))
    frames_t = tuple(frames)
    n_star = _n_star(frames_t)

    cols = [_outer_vec_exact(xi) for xi in dirs]
    B = sympy.Matrix(6, 6, lambda r, c: sympy.Rational(cols[c][r].numerator, cols[c][r].denominator))
    det = B.det()
    Binv = B.inv()
    exact = tuple(tuple(Fraction(int(sympy.fraction(Binv[r, c])[0]), int(sympy.fraction(Binv[r, c])[1])) for c in range(6)) for r in range(6))
    # gamma^2 = Binv @ plain(R); plain = diag(1,1,1,1/sqrt2,...) @ frob(R)
    conv = np.diag([1.0, 1.0, 1.0, 1 / _SQ2, 1 / _SQ2, 1 / _SQ2])
    lin = np.array([[float(x) for x in row] for row in exact]) @ conv
    id_plain = [Fraction(1), Fraction(1), Fraction(1), Fraction(0), Fraction(0), Fraction(0)]
    g2_id = tuple(sum((row[c] * id_plain[c] for c in range(6)), Fraction(0)) for row in exact)
    op = float(np.linalg.norm(lin, 2))
    g_min = float(min(g2_id))
    radius = min(0.5, (g_min - margin) / op)
    M = _m_constant(lin, np.array([float(g) for g in g2_id]), radius, N_deriv, len(dirs))
    return DirectionSet(
        dirs=dirs,
        frames=frames_t,
        n_star=n_star,
        linear_map=lin,
        linear_map_exact=exact,
        gamma2_id=g2_id,
        op_norm=op,
        radius_eff=radius,
        margin=margin,
        M_const=M,
        N_deriv=N_deriv,
        det_exact=Fraction(int(sympy.fraction(det)[0]), int(sympy.fraction(det)[1])),
    )


_DEFAULT: DirectionSet | None = None


def default_direction_set() -> DirectionSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = build_direction_set()
    return _DEFAULT


def gamma_squared(R: np.ndarray, ds: DirectionSet | None = None, *, check: bool = True) -> np.ndarray:
    """gamma_xi(R)^2 for a stack of symmetric matrices, shape (..., 6).

    Raises
    ------
    OutOfBall
        If some ``R`` is farther than ``radius_eff`` from Id (Frobenius).
    """
    ds = ds or default_direction_set()
    R = np.asarray(R, dtype=float)
    dev = R - np.eye(3)
    if check:
        dist = np.sqrt(np.sum(dev**2, axis=(-2, -1)))
        worst = float(np.max(dist)) if dist.size else 0.0
        if worst > ds.radius_eff * (1 + 1e-12):
            raise OutOfBall(f"|R - Id|_F = {worst:.4f} exceeds radius {ds.radius_eff:.4f}")
    g2id = np.array([float(g) for g in ds.gamma2_id])
    return g2id + sym_to_frobenius_vec(dev) @ ds.linear_map.T


def gamma_coeffs(R: np.ndarray, ds: DirectionSet | None = None, *, check: bool = True) -> np.ndarray:
    """The six coefficients gamma_xi(R) (square roots of ``gamma_squared``)."""
    g2 = gamma_squared(R, ds, check=check)
    return np.sqrt(np.maximum(g2, 0.0))


def reconstruct(g2: np.ndarray, ds: DirectionSet | None = None) -> np.ndarray:
    """sum_xi g2[..., xi] xi (x) xi."""
    ds = ds or default_direction_set()
    X = ds.dirs_float
    outer = np.einsum("ai,aj->aij", X, X)
    return np.einsum("...a,aij->...ij", g2, outer)


def frame(xi: Sequence, ds: DirectionSet | None = None) -> tuple[Vec, Vec, Vec]:
    """Exact orthonormal frame (xi, A_xi, xi x A_xi)."""
    ds = ds or default_direction_set()
    return ds.frames[ds.index(xi)]
