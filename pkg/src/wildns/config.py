"""Run configuration: TOML loading, validation and the scheme pipelines it drives."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on the interpreter
    import tomli as _toml

from . import field as F
from . import noise as N
from . import scheme as S

log = logging.getLogger(__name__)

__all__ = ["ConfigError", "RunConfig", "load_config", "config_from_dict", "RunResult", "run_scheme", "simulate_noise", "compare_K", "glue_runs"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyConfig:
    c0: float = 4.0
    c1: float = 0.0
    times: tuple = ()
    values: tuple = ()

    def profile(self) -> S.EnergyProfile:
        if self.times:
            return S.EnergyProfile("table", times=tuple(self.times), values=tuple(self.values))
        return S.EnergyProfile("affine", c0=self.c0, c1=self.c1)


@dataclass(frozen=True)
class DeskConfig:
    """Desk overrides: mollification scale and per-level jet scales (m, r_perp, r_par, mu)."""

    ell: float | None = None
    jets: tuple = ()


@dataclass(frozen=True)
class NoiseConfig:
    amplitude: float = 1.0
    decay: float = 3.0
    kcut: float | None = None
    u0_norm: float = 0.5
    u0_seed: int = 0
    u0_kcut: float = 3.0


@dataclass(frozen=True)
class StoppingConfig:
    use: bool = True
    delta: float = 0.05
    sigma: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    """All keys of a run.

    ``grid_n`` is the level grid of the perturbations, ``noise_n`` the grid
    of the noise and of level 0.  ``t_stop`` caps the stopping time; the
    prescribed-energy history starts at ``t_lo``.
    """

    command: str = "run-scheme"
    variant: str = "A"
    a: float = 2.0
    b: int = 7
    alpha: float = 0.35
    beta: float = 0.03
    M0: float = 1.0
    regime: str = "desk"
    grid_n: int = 16
    noise_n: int = 8
    dt: float = 0.01
    Q_levels: int = 1
    seed: int = 0
    L: float = 3.0
    N: float = 1.0
    K: float = 1.0
    K2: float = 2.0
    t_lo: float = -2.0
    t_stop: float = 1.0
    deterministic: bool = True
    output: str = "out"
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    desk: DeskConfig = field(default_factory=DeskConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    stopping: StoppingConfig = field(default_factory=StoppingConfig)

    def params(self) -> S.ParamSet:
        return S.ParamSet(
            a=self.a,
            b=int(self.b),
            alpha=self.alpha,
            beta=self.beta,
            M0=self.M0,
            regime=self.regime,
            ell_override=self.desk.ell,
            desk_jets=tuple(tuple(j) for j in self.desk.jets),
        )

    def variant_b(self, K: float | None = None) -> S.VariantB:
        return S.VariantB(L=self.L, N=self.N, K=self.K if K is None else K)

    def noise_spec(self) -> N.NoiseSpec:
        return N.NoiseSpec(F.Grid3(self.noise_n), amplitude=self.noise.amplitude, decay=self.noise.decay, kcut=self.noise.kcut)

    def to_json(self) -> dict:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {g.name: _plain(getattr(v, g.name)) for g in fields(v)} if hasattr(v, "__dataclass_fields__") else v
        return out


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


_SECTIONS = {"energy": EnergyConfig, "desk": DeskConfig, "noise": NoiseConfig, "stopping": StoppingConfig}


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:  # pragma: no cover - guarded by the key check
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict) -> RunConfig:
    """Validate a nested dict (as read from TOML) into a RunConfig.

    Raises
    ------
    ConfigError
        On unknown keys, wrong types or inadmissible values.
    """
    top = {}
    sections = {}
    for k, v in data.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"[{k}] must be a table")
            sections[k] = _build(_SECTIONS[k], v, f"[{k}]")
        else:
            top[k] = v
    cfg = _build(RunConfig, top, "top level")
    cfg = replace(cfg, **sections)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.variant not in ("A", "B"):
        raise ConfigError("variant must be 'A' or 'B'")
    if cfg.regime not in ("paper", "desk"):
        raise ConfigError("regime must be 'paper' or 'desk'")
    if cfg.dt <= 0 or not math.isfinite(cfg.dt):
        raise ConfigError("dt must be positive")
    if cfg.grid_n < 4 or cfg.noise_n < 4 or cfg.grid_n % 2 or cfg.noise_n % 2:
        raise ConfigError("grid sizes must be even and at least 4")
    if cfg.noise_n > cfg.grid_n:
        raise ConfigError("noise_n may not exceed grid_n")
    if cfg.Q_levels < 0:
        raise ConfigError("Q_levels must be non-negative")
    if cfg.desk.jets and any(len(j) != 4 for j in cfg.desk.jets):
        raise ConfigError("[desk] jets entries are [m, r_perp, r_par, mu]")
    if cfg.energy.times and len(cfg.energy.times) != len(cfg.energy.values):
        raise ConfigError("[energy] times and values must have equal length")
    if not (0 < cfg.stopping.delta < 1.0 / 12.0):
        raise ConfigError("[stopping] delta must lie in (0, 1/12)")


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Read a TOML run config; ``overrides`` (flat top-level keys) win."""
    p = Path(path)
    try:
        data = _toml.loads(p.read_text())
    except (OSError, _toml.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(data)


# ----------------------------------------------------------------------------
# pipelines


@dataclass
class RunResult:
    """States per level plus the noise and stopping information of a run."""

    states: list
    noise: S.NoiseData
    stopping: N.StoppingRecord | None
    t_stop: float
    validation: list

    @property
    def final(self) -> S.IterationState:
        return self.states[-1]


def simulate_noise(cfg: RunConfig, *, horizon: float | None = None, reseed_after: float | None = None, seed: int | None = None):
    """Z on [0, horizon] with the configured spectrum and step."""
    spec = cfg.noise_spec()
    T = horizon if horizon is not None else (1.0 if cfg.variant == "A" else cfg.L)
    return N.simulate_stokes(spec, F.zeros(spec.grid), cfg.dt, T, cfg.seed if seed is None else seed, reseed_after=reseed_after)


def initial_datum(cfg: RunConfig) -> F.SpectralField:
    g = F.Grid3(cfg.noise_n)
    u0 = F.random_field(g, np.random.default_rng(cfg.noise.u0_seed), solenoidal=True, kcut=cfg.noise.u0_kcut)
    nrm = F.norm(u0, "L", 2)
    return u0 * (cfg.noise.u0_norm / nrm) if nrm > 0 else u0


def _floor_to_grid(t: float, t0: float, dt: float) -> float:
    return t0 + math.floor((t - t0) / dt + 1e-9) * dt


def run_scheme(
    cfg: RunConfig,
    *,
    Z: F.TimeTrajectory | None = None,
    u0: F.SpectralField | None = None,
    K: float | None = None,
    N_datum: float | None = None,
    state_n: int | None = None,
    progress=None,
) -> RunResult:
    """Level 0 and ``Q_levels`` iterations of the configured variant."""
    params = cfg.params()
    profile = cfg.energy.profile() if cfg.variant == "A" else None
    validation = S.validate_params(params, profile, t_hi=cfg.t_stop)
    if Z is None:
        Z = simulate_noise(cfg)
    stop = None
    t_stop = min(cfg.t_stop, Z.t_hi)
    if cfg.stopping.use:
        C_S = N.sobolev_constant(Z.grid, cfg.stopping.sigma)
        if cfg.variant == "A":
            sp = N.stopping_params_A(cfg.a, cfg.b, cfg.beta, C_S, cfg.stopping.delta)
        else:
            sp = N.stopping_params_B(cfg.L, C_S, cfg.stopping.delta)
        stop = N.stopping_time(Z, sp, cfg.variant)
        t_stop = min(t_stop, stop.time)
    if cfg.variant == "A":
        t_lo = cfg.t_lo
        t_stop = _floor_to_grid(t_stop, t_lo, cfg.dt)
        nd = S.NoiseData(Z)
        st = S.init_state("A", nd, params, grid=F.Grid3(state_n or cfg.noise_n), dt=cfg.dt, t_stop=t_stop, t_lo=t_lo, profile=profile)
    else:
        t_stop = _floor_to_grid(t_stop, 0.0, cfg.dt)
        if t_stop <= 0:
            raise S.SchemeError("the stopping time leaves no window")
        nd = S.NoiseData(Z, u0 if u0 is not None else initial_datum(cfg))
        vb = cfg.variant_b(K)
        if N_datum is not None:
            vb = S.VariantB(L=vb.L, N=N_datum, K=vb.K)
        st = S.init_state("B", nd, params, grid=F.Grid3(state_n or cfg.noise_n), dt=cfg.dt, t_stop=t_stop, vb=vb)
    states = [st]
    G = F.Grid3(cfg.grid_n)
    for q in range(cfg.Q_levels):
        log.info("level %d -> %d", q, q + 1)
        st = S.iterate(st, grid=G, progress=progress)
        states.append(st)
    return RunResult(states, nd, stop, t_stop, validation)


def final_energy(res: RunResult) -> float:
    """||v_Q(t_stop)||^2 of the last level."""
    st = res.final
    return F.norm(st.v.at(st.v.nt - 1), "L", 2) ** 2


def compare_K(cfg: RunConfig, K1: float, K2: float, *, progress=None) -> dict:
    """Two prescribed-datum runs sharing the noise and datum, differing only in K."""
    if cfg.variant != "B":
        raise ConfigError("compare-K needs variant B")
    Z = simulate_noise(cfg)
    u0 = initial_datum(cfg)
    r1 = run_scheme(cfg, Z=Z, u0=u0, K=K1, progress=progress)
    r2 = run_scheme(cfg, Z=Z, u0=u0, K=K2, progress=progress)
    e1, e2 = final_energy(r1), final_energy(r2)
    return {
        "K": K1,
        "K2": K2,
        "t_final": r1.t_stop,
        "energy_K": e1,
        "energy_K2": e2,
        "difference": e1 - e2,
        "predicted_difference": 3.0 * (K1 - K2),
        "levels": cfg.Q_levels,
        "runs": (r1, r2),
    }


def glue_runs(cfg: RunConfig, *, progress=None) -> dict:
    """Two prescribed-datum segments joined at the first stopping time.

    Segment 2 starts from u(T_L) = v_Q(T_L) + z(T_L) and is driven by the
    restarted noise Z(t + T_L) - exp(t Laplace) Z(T_L).  Its datum bound N
    is raised to the norm of that state when needed.
    """
    if cfg.variant != "B":
        raise ConfigError("glue needs variant B")
    horizon = 2.0 * cfg.L
    Z = simulate_noise(cfg, horizon=horizon)
    u0 = initial_datum(cfg)
    Z1 = Z.window(0, Z.index(min(cfg.L, Z.t_hi)) + 1)
    r1 = run_scheme(cfg, Z=Z1, u0=u0, progress=progress)
    T1 = r1.t_stop
    st1 = r1.final
    G = st1.grid
    i_end = st1.v.nt - 1
    z_T = r1.noise.z_full(T1, G)
    u_T = st1.v.at(i_end) + z_T
    Zhat = N.restart_shift(Z, T1)
    N2 = max(cfg.N, math.ceil(F.norm(u_T, "L", 2) * (1 + 1e-9)))
    r2 = run_scheme(cfg, Z=Zhat, u0=u_T, N_datum=N2, state_n=G.n, progress=progress)
    st2 = r2.final
    u2_0 = st2.v.at(0).resize(G) + r2.noise.z_full(0.0, G)
    seam = F.norm(u_T - u2_0, "L", 2)
    u1 = F.TimeTrajectory(G, 0.0, cfg.dt, np.stack([(st1.v.at(i) + r1.noise.z_full(float(t), G)).coeffs for i, t in enumerate(st1.times)]))
    u2 = F.TimeTrajectory(G, 0.0, cfg.dt, np.stack([(st2.v.at(i).resize(G) + r2.noise.z_full(float(t), G)).coeffs for i, t in enumerate(st2.times)]))
    glued = S.extend_solution([(u1, T1), (u2, r2.t_stop)])
    s1 = st1.diagnostics["samples"]
    s2 = st2.diagnostics["samples"]
    return {
        "T_L": T1,
        "T_2": r2.t_stop,
        "N_segment2": N2,
        "seam_L2": seam,
        "residual_paper_end1": s1[-1].get("res_paper_rel"),
        "residual_full_end1": s1[-1].get("res_full_rel"),
        "residual_paper_start2": s2[0].get("res_paper_rel"),
        "residual_full_start2": s2[0].get("res_full_rel"),
        "glued_samples": glued.nt,
        "glued_max_L2": float(max(F.norm(glued.at(i), "L", 2) for i in range(glued.nt))),
        "runs": (r1, r2),
    }
