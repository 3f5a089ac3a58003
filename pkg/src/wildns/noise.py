"""Trace-class noise, the stochastic Stokes convolution and stopping times.

The noise is diagonal in the real orthonormal basis of divergence-free
fields on T^3: for every wavevector pair +-k and each of two polarisations
e_a(k) there are the two basis functions e_a cos(k.x) / (2 pi^{3/2}) and
e_a sin(k.x) / (2 pi^{3/2}).  The operator G multiplies each by g_|k|, so
``C_G = sum over basis functions of g^2 = sum_{k != 0} 2 g_k^2``.

Every basis coordinate is an Ornstein-Uhlenbeck process and is advanced by
its exact transition law.  Normal draws come from a Philox generator keyed
by (seed, step) and are consumed in a fixed mode order, so a trajectory is a
deterministic function of the seed and a change of the noise after some
step leaves all earlier samples bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import field as F

__all__ = [
    "NoiseError",
    "NotDivergenceFree",
    "OutOfRange",
    "NoiseSpec",
    "sobolev_constant",
    "StoppingParams",
    "StoppingRecord",
    "stopping_params_A",
    "stopping_params_B",
    "simulate_stokes",
    "stopping_time",
    "restart_shift",
    "expected_energy",
    "mode_coordinates",
    "ou_recursion_residual",
]

_BASIS_NORM = 4.0 * math.pi**1.5  # u_hat_k = e (beta_c - i beta_s) / _BASIS_NORM


class NoiseError(ValueError):
    pass


class NotDivergenceFree(NoiseError):
    pass


class OutOfRange(NoiseError):
    pass


def _polarisations(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal pair spanning the plane orthogonal to k."""
    kh = k / np.linalg.norm(k)
    ref = np.array([1.0, 0.0, 0.0]) if abs(kh[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(kh, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(kh, e1)
    return e1, e2


@dataclass(frozen=True)
class NoiseSpec:
    """Noise amplitudes on a grid.

    Parameters
    ----------
    grid : Grid3
        Grid carrying the noise; its retained modes are the noise modes.
    amplitude : float
        Overall factor.
    decay : float
        g_k = amplitude * |k|^(-decay) on every retained mode k != 0.
    kcut : float, optional
        Drop modes with |k| > kcut.
    """

    grid: F.Grid3
    amplitude: float = 1.0
    decay: float = 3.0
    kcut: float | None = None
    modes: tuple | None = None  # explicit list of integer wavevectors (half space)

    def __post_init__(self) -> None:
        if self.amplitude < 0:
            raise NoiseError("amplitude must be non-negative")

    @cached_property
    def table(self) -> dict:
        """Half-space mode list with flat indices, mirrors and polarisations."""
        g = self.grid
        kmax = g.kmax
        ks = []
        if self.modes is not None:
            cand = [tuple(int(c) for c in m) for m in self.modes]
        else:
            r = range(-kmax, kmax + 1)
            cand = [(a, b, c) for c in range(0, kmax + 1) for b in r for a in r]
        for a, b, c in cand:
            if (c > 0) or (c == 0 and b > 0) or (c == 0 and b == 0 and a > 0):
                if max(abs(a), abs(b), abs(c)) > kmax:
                    raise NoiseError(f"mode {(a, b, c)} is outside the grid band")
                kk = math.sqrt(a * a + b * b + c * c)
                if self.kcut is not None and kk > self.kcut:
                    continue
                ks.append((a, b, c))
        ks.sort(key=lambda v: (v[0] ** 2 + v[1] ** 2 + v[2] ** 2, v))
        kv = np.array(ks, dtype=float).reshape(-1, 3)
        n = g.n
        idx = np.array([(a % n) * n * g.nh + (b % n) * g.nh + c for a, b, c in ks], dtype=np.int64)
        mirror = np.array(
            [((-a) % n) * n * g.nh + ((-b) % n) * g.nh + 0 if c == 0 else -1 for a, b, c in ks], dtype=np.int64
        )
        pol = np.array([np.stack(_polarisations(k)) for k in kv]).reshape(-1, 2, 3)
        k2 = np.sum(kv**2, axis=1)
        gk = self.amplitude * k2 ** (-0.5 * self.decay) if len(ks) else np.zeros(0)
        return {"k": kv, "k2": k2, "idx": idx, "mirror": mirror, "pol": pol, "g": gk}

    @property
    def n_modes(self) -> int:
        return len(self.table["k"])

    @property
    def C_G(self) -> float:
        """sum_k over all k != 0 of 2 g_k^2 (both half spaces, two polarisations)."""
        return float(4.0 * np.sum(self.table["g"] ** 2))

    def g_grid(self) -> np.ndarray:
        """g_k placed on the half spectrum (zero on unused modes)."""
        out = np.zeros(self.grid.n * self.grid.n * self.grid.nh)
        t = self.table
        out[t["idx"]] = t["g"]
        m = t["mirror"] >= 0
        out[t["mirror"][m]] = t["g"][m]
        return out.reshape(self.grid.spec_shape)


def sobolev_constant(grid: F.Grid3, sigma: float = 0.01) -> float:
    """Constant of ||f||_inf <= C_S ||f||_{H^{(3+sigma)/2}} on the grid modes.

    By Cauchy-Schwarz ||f||_inf <= sum |f_hat_k| <= (sum w_k |f_hat_k|^2)^{1/2}
    (sum 1/w_k)^{1/2} with w_k = ((1+|k|^2)/2)^{(3+sigma)/2} and
    ||f||_{H^s}^2 = (2 pi)^3 sum w_k |f_hat_k|^2.  The result is floored at 1.
    """
    w = ((1.0 + grid.k2) / 2.0) ** ((3.0 + sigma) / 2.0)
    full = np.where(grid.mask, 1.0, 0.0) * np.where(grid.k2 > 0, 1.0, 0.0)
    mult = np.where(np.arange(grid.nh)[None, None, :] == 0, 1.0, 2.0)
    s = float(np.sum(full * mult / w)) / F.VOLUME
    return max(1.0, math.sqrt(s))


def _normals(seed: int, step: int, size: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(step)]))
    return gen.standard_normal(size)


def simulate_stokes(
    spec: NoiseSpec,
    z0: F.SpectralField | None,
    dt: float,
    T: float,
    seed: int,
    *,
    reseed_after: tuple[float, int] | None = None,
    keep_from: float = 0.0,
    div_tol: float = 1e-10,
) -> F.TimeTrajectory:
    """Stochastic Stokes convolution with exact OU steps.

    Parameters
    ----------
    spec : NoiseSpec
    z0 : SpectralField or None
        Initial value on ``spec.grid`` (None means zero).  Modes outside the
        noise set evolve by the heat flow alone.
    dt, T : float
        Step and horizon; samples at 0, dt, ..., T.
    seed : int
    reseed_after : (t_star, seed2), optional
        Draw the noise of every step that ends after ``t_star`` from
        ``seed2`` instead; earlier samples are unaffected.
    keep_from : float
        Only samples with t >= keep_from are stored.

    Raises
    ------
    NotDivergenceFree
        If ``z0`` has a non-solenoidal part.
    """
    g = spec.grid
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9 * max(1.0, T):
        raise NoiseError("T must be a whole number of steps")
    if z0 is None:
        cur = np.zeros((3, *g.spec_shape), dtype=complex)
    else:
        if z0.grid != g:
            raise F.GridMismatch("z0 must live on the noise grid")
        if np.max(np.abs(F.div(z0).coeffs)) > div_tol * max(1.0, float(np.max(np.abs(z0.coeffs)))):
            raise NotDivergenceFree("initial value is not divergence free")
        cur = np.array(z0.coeffs)
    tab = spec.table
    decay = np.exp(-g.k2 * dt)
    k2m = tab["k2"]
    sig = np.sqrt((1.0 - np.exp(-2.0 * k2m * dt)) / (2.0 * k2m)) if len(k2m) else np.zeros(0)
    amp = tab["g"] * sig / _BASIS_NORM
    pol = tab["pol"]
    nm = len(k2m)
    i_keep = int(math.ceil((keep_from - 1e-12) / dt)) if keep_from > 0 else 0
    out = []
    if i_keep == 0:
        out.append(cur.copy())
    flat_idx = tab["idx"]
    mir = tab["mirror"]
    has_m = mir >= 0
    for step in range(1, nsteps + 1):
        cur = cur * decay[None]
        if nm:
            s = seed
            if reseed_after is not None and step * dt > reseed_after[0] + 1e-12:
                s = reseed_after[1]
            eta = _normals(s, step, 4 * nm).reshape(nm, 2, 2)  # (mode, pol, cos/sin)
            coef = (eta[:, :, 0] - 1j * eta[:, :, 1]) * amp[:, None]
            inc = np.einsum("ma,mac->cm", coef, pol)
            flat = cur.reshape(3, -1)
            flat[:, flat_idx] += inc
            flat[:, mir[has_m]] += np.conj(inc[:, has_m])
        if step >= i_keep:
            out.append(cur.copy())
    t_lo = i_keep * dt
    return F.TimeTrajectory(g, t_lo, dt, np.stack(out), "vector", False, {"seed": seed})


def mode_coordinates(z: F.SpectralField, spec: NoiseSpec, mode: int = 0) -> np.ndarray:
    """The four real basis coordinates (cos/sin x two polarisations) of one noise mode."""
    tab = spec.table
    c = z.coeffs.reshape(3, -1)[:, tab["idx"][mode]] * _BASIS_NORM
    proj = tab["pol"][mode] @ c
    return np.array([proj[0].real, -proj[0].imag, proj[1].real, -proj[1].imag])


def expected_energy(spec: NoiseSpec, t: float) -> float:
    """E ||z(t)||_{L^2}^2 for z(0) = 0: sum_k 2 g_k^2 (1 - exp(-2|k|^2 t)) / (2|k|^2) over all k != 0."""
    tab = spec.table
    k2 = tab["k2"]
    return float(2.0 * np.sum(2.0 * tab["g"] ** 2 * (1.0 - np.exp(-2.0 * k2 * t)) / (2.0 * k2)))


# ----------------------------------------------------------------------------
# stopping times


@dataclass(frozen=True)
class StoppingParams:
    """Thresholds of a stopping time.

    Attributes
    ----------
    C_S : float
        Sobolev constant.
    delta : float
        Regularity loss, 0 < delta < 1/12.
    h_threshold : float
        Level for ||z(t)||_{H^{1-delta}}.
    holder_threshold : float
        Level for the running C_t^{1/2 - 2 delta} L^2 norm.
    l2_threshold : float or None
        Level for ||z(t)||_{L^2} (variant A only).
    cap : float
    """

    C_S: float
    delta: float
    h_threshold: float
    holder_threshold: float
    l2_threshold: float | None
    cap: float

    def __post_init__(self) -> None:
        if not (0 < self.delta < 1.0 / 12.0):
            raise NoiseError("delta must lie in (0, 1/12)")
        for v in (self.h_threshold, self.holder_threshold, self.cap):
            if v <= 0:
                raise NoiseError("thresholds must be positive")
        if self.l2_threshold is not None and self.l2_threshold <= 0:
            raise NoiseError("thresholds must be positive")


def stopping_params_A(a: float, b: float, beta: float, C_S: float, delta: float = 0.05) -> StoppingParams:
    """Thresholds 1/C_S, 1/C_S, a^{beta b - b^2 beta}/sqrt(12) and cap 1."""
    return StoppingParams(C_S, delta, 1.0 / C_S, 1.0 / C_S, a ** (beta * b - b * b * beta) / math.sqrt(12.0), 1.0)


def stopping_params_B(L: float, C_S: float, delta: float = 0.05) -> StoppingParams:
    """Thresholds L/C_S on both norms and cap L."""
    return StoppingParams(C_S, delta, L / C_S, L / C_S, None, float(L))


@dataclass(frozen=True)
class StoppingRecord:
    """Outcome of a stopping-time search.

    ``fired`` is one of ``"H"``, ``"Holder"``, ``"L2"``, ``"cap"`` or
    ``"horizon"`` (trajectory ended before the cap without a crossing).
    """

    time: float
    fired: str
    index: int
    norms: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"time": self.time, "fired": self.fired, "index": self.index, "norms": self.norms}


def stopping_time(traj: F.TimeTrajectory, params: StoppingParams, variant: str = "A") -> StoppingRecord:
    """First sample time at which a threshold is reached, else the cap.

    The trajectory must start at t = 0.  All three norms are evaluated on
    every sample; the Hoelder norm is the running norm over all pairs of
    samples up to the current one.
    """
    if abs(traj.t_lo) > 1e-12:
        raise NoiseError("stopping times need a trajectory starting at t = 0")
    variant = variant.upper()
    if variant not in ("A", "B"):
        raise NoiseError("variant must be A or B")
    times = traj.times
    hn = F.traj_pointwise_norms(traj, ("H", 1.0 - params.delta))
    hol = F.holder_profile(traj, 0.5 - 2.0 * params.delta, ("L", 2))
    l2 = F.traj_pointwise_norms(traj, ("L", 2))
    conds = [("H", hn >= params.h_threshold), ("Holder", hol >= params.holder_threshold)]
    if variant == "A" and params.l2_threshold is not None:
        conds.append(("L2", l2 >= params.l2_threshold))
    best_i, best_name = None, None
    for name, hit in conds:
        w = np.nonzero(hit & (times <= params.cap + 1e-12))[0]
        if len(w) and (best_i is None or w[0] < best_i):
            best_i, best_name = int(w[0]), name
    if best_i is not None:
        i = best_i
        name = best_name
        t = float(times[i])
    else:
        capped = np.nonzero(times <= params.cap + 1e-12)[0]
        i = int(capped[-1])
        t = float(min(params.cap, times[i]))
        name = "cap" if times[i] >= params.cap - 1e-12 else "horizon"
    norms = {"H": float(hn[i]), "Holder": float(hol[i]), "L2": float(l2[i])}
    return StoppingRecord(t, name, i, norms)


# ----------------------------------------------------------------------------
# restart


def restart_shift(Z: F.TimeTrajectory, T_L: float) -> F.TimeTrajectory:
    """Z_hat(t) = Z(t + T_L) - exp(t Laplace) Z(T_L) on [0, Z.t_hi - T_L].

    Raises
    ------
    OutOfRange
        If ``T_L`` is not a sample time of ``Z``.
    """
    try:
        i0 = Z.index(T_L)
    except F.FieldError as exc:
        raise OutOfRange(str(exc)) from exc
    g = Z.grid
    zT = Z.data[i0]
    n_out = Z.nt - i0
    tt = np.arange(n_out) * Z.dt
    heat = np.exp(-g.k2[None] * tt[:, None, None, None])[:, None]
    data = Z.data[i0:] - heat * zT[None]
    data[0] = 0.0
    return F.TimeTrajectory(g, 0.0, Z.dt, data, Z.rank, Z.traceless, dict(Z.meta, shift=T_L))


def ou_recursion_residual(Z: F.TimeTrajectory, Zref: F.TimeTrajectory, i_ref0: int = 0) -> float:
    """Largest difference of the noise increments of two trajectories.

    The increment of a sample path is Z(t + dt) - exp(-|k|^2 dt) Z(t).  A
    shifted path reproduces the increments of ``Zref`` starting at sample
    ``i_ref0``.
    """
    decay = np.exp(-Z.grid.k2 * Z.dt)[None, None]
    inc = Z.data[1:] - decay[0] * Z.data[:-1]
    ref = Zref.data[i_ref0 + 1 : i_ref0 + Z.nt] - decay[0] * Zref.data[i_ref0 : i_ref0 + Z.nt - 1]
    m = min(len(inc), len(ref))
    return float(np.max(np.abs(inc[:m] - ref[:m]))) if m else 0.0
