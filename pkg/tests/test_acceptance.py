"""Acceptance suite: twelve end-to-end criteria.

Every test records one line ``PASS criterion N ...`` or ``FAIL criterion N ...``
before asserting; the conftest prints all recorded lines in the terminal
summary, so the outcome of each criterion is visible even under capture.  Running this file as a script prints the
same twelve lines without pytest.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from wildns import config as C
from wildns import field as F
from wildns import geometry as Geo
from wildns import jets as J
from wildns import ledger as L
from wildns import noise as N
from wildns import scheme as S

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
logging.getLogger("wildns").setLevel(logging.ERROR)


RESULT_LINES: dict[int, str] = {}


def _announce(n: int, title: str, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d} ({title}): {detail}"
    RESULT_LINES[n] = line
    print(line)
    return line


def _gl(fn, a, b, n=800):
    x, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (b - a) * x + 0.5 * (a + b)
    return 0.5 * (b - a) * float(np.sum(w * fn(s)))


# ----------------------------------------------------------------------------
# criteria


def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    A = rng.standard_normal((10_000, 3, 3))
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    A /= np.linalg.norm(A, axis=(1, 2))[:, None, None]
    R = np.eye(3) + 0.3 * rng.uniform(0, 1, (10_000, 1, 1)) ** (1 / 6) * A
    err = float(np.max(np.abs(Geo.reconstruct(Geo.gamma_squared(R)) - R)))
    g2 = np.array([float(g) for g in Geo.default_direction_set().gamma2_id])
    elapsed = time.perf_counter() - t0
    ok_rec = err <= 1e-10
    ok_id = bool(np.all(np.abs(g2 - 0.25) <= 1e-12))
    ok = ok_rec and ok_id and elapsed < 5
    return ok, f"reconstruction error {err:.1e} (<= 1e-10: {ok_rec}); gamma^2(Id) = {g2.tolist()} (target 1/4: {ok_id}); {elapsed:.2f} s"


def criterion_2():
    t0 = time.perf_counter()
    prof = J.build_profiles()
    p = J.jet_params(128)
    ds = Geo.default_direction_set()
    slab = max(float(np.max(np.abs(J.slab_mean_outer(k, p, prof, 512) - np.outer(ds.dirs_float[k], ds.dirs_float[k])))) for k in range(6))
    bank = J.JetBank(p, F.Grid3(64), prof)
    div = 0.0
    for k in range(6):
        W, Wc, _ = bank.fields(k, 0.013)
        s = W + Wc
        div = max(div, F.norm(F.div(s), "L", np.inf, n_quad=64) / F.norm(s, "L", np.inf, n_quad=64))
    ov = J.support_overlap(p, n_samples=20_000)
    nphi = abs(2 * math.pi * _gl(lambda r: prof.phi(r) ** 2 * r, 0.0, 1.0) / (4 * math.pi**2) - 1)
    npsi = abs(_gl(lambda s: prof.psi(s) ** 2, -1.0, 1.0) / (2 * math.pi) - 1)
    elapsed = time.perf_counter() - t0
    ok = slab <= 1e-6 and div <= 1e-8 and ov["overlap"] == 0 and nphi <= 1e-8 and npsi <= 1e-8 and elapsed < 300
    return ok, (
        f"slab mean error {slab:.1e}; |div(W+W^c)|/|W+W^c| {div:.1e}; overlap {ov['overlap']:g} "
        f"(min distance ratio {ov['min_ratio']:.3f}); profile normalisation errors {nphi:.1e}, {npsi:.1e}; {elapsed:.1f} s"
    )


def criterion_3():
    res = J.check_jet_bounds([J.jet_params(128), J.jet_params(2**14)], ps=(1.0, 2.0))
    spreads = {p: res["table"][p]["W"]["spread"] for p in ("1", "2")}
    ok = all(s <= 2.0 for s in spreads.values())
    return ok, "spread of |W|_p / (r_perp^(2/p-1) r_par^(1/p-1/2)) across lambda = 128, 16384: " + ", ".join(
        f"p={p}: {s:.4f}" for p, s in spreads.items()
    )


def criterion_4():
    rng = np.random.default_rng(4)
    worst, worst_tr = 0.0, 0.0
    for i in range(100):
        g = F.Grid3((8, 16, 32)[i % 3])
        v = F.random_field(g, rng)
        R = F.inv_divergence(v)
        worst = max(worst, F.norm(F.div_tensor(R) - v, "L", 2) / F.norm(v, "L", 2))
        vals = R.physical()
        tr = np.abs(vals[0] + vals[3] + vals[5]).max() / np.abs(vals).max()
        worst_tr = max(worst_tr, float(tr))
    ok = worst <= 1e-12 and worst_tr <= 1e-12
    return ok, f"max |div R v - v|/|v| {worst:.1e}; max pointwise trace ratio {worst_tr:.1e} (symmetric by storage)"


def criterion_5():
    t0 = time.perf_counter()
    p = S.ParamSet(a=2, b=7, alpha=1 / 8, beta=0.01)
    jp = p.jets(1)
    dt = 0.1 / jp.mu
    g8 = F.Grid3(8)
    Z = N.simulate_stokes(N.NoiseSpec(g8, amplitude=0.03), None, dt, 4 * dt, seed=1)
    t_lo = -math.ceil(p.ell(0) / dt) * dt
    st0 = S.init_state("A", S.NoiseData(Z), p, grid=g8, dt=dt, t_stop=4 * dt, t_lo=t_lo, profile=S.EnergyProfile(c0=200.0, c1=1.0))
    i0 = st0.v.index(0.0)
    st1 = S.iterate(st0, grid=F.Grid3(128), indices=[i0 + 1, i0 + 2])
    rows = st1.diagnostics["samples"]
    paper = max(r["res_paper_rel"] for r in rows)
    full = max(r["res_full_rel"] for r in rows)
    elapsed = time.perf_counter() - t0
    ok = paper <= 1e-6 and elapsed < 1800
    return ok, (
        f"lambda_1 = {jp.lam:g}, grid 128^3, mu dt = {jp.mu * dt:.2f}: relative residual with the constructed stress terms {paper:.2e} "
        f"(bound 1e-6); with the truncation defect included {full:.1e}; captured jet energy {rows[0]['captured']:.3f}; {elapsed:.0f} s"
    )


def criterion_6():
    cfg = C.load_config(CONFIGS / "desk_A.toml")
    res = C.run_scheme(cfg)
    st0, st1 = res.states[0], res.states[1]
    late0 = st0.times >= -1e-12
    late1 = st1.times >= -1e-12
    R0 = max(F.norm(st0.R.at(i), "L", 1) for i in np.nonzero(late0)[0])
    R1 = max(F.norm(st1.R.at(i), "L", 1) for i in np.nonzero(late1)[0])
    gap0 = float(np.max(S.energy_gap(st0, target="plain")[late0]))
    gap1 = float(np.max(S.energy_gap(st1, target="plain")[late1]))
    ok_R = R1 < R0
    ok_E = gap1 <= gap0 / 2
    return ok_R and ok_E, (
        f"|R_1|_(C_t L1) {R1:.3e} vs |R_0|_(C_t L1) {R0:.3e} on [0, {res.t_stop:.2f}] (decay: {ok_R}); "
        f"energy gap {gap0:.3g} -> {gap1:.3g} (factor {gap0 / max(gap1, 1e-300):.2f} >= 2: {ok_E})"
    )


def criterion_7():
    cfg = C.load_config(CONFIGS / "desk_B.toml")
    res = C.compare_K(cfg, cfg.K, cfg.K2)
    diff = res["difference"]
    ok = abs(diff) >= 1.0
    return ok, f"|v_K|^2 = {res['energy_K']:.4g} (K = {cfg.K:g}), |v_K'|^2 = {res['energy_K2']:.4g} (K' = {cfg.K2:g}), difference {diff:.4g}"


def criterion_8():
    spec = N.NoiseSpec(F.Grid3(8), amplitude=1.0, decay=3.0)
    t, dt, n_seeds = 0.5, 0.25, 10_000
    coords = np.empty((n_seeds, 4))
    energy = np.empty(n_seeds)
    for s in range(n_seeds):
        z = N.simulate_stokes(spec, None, dt, t, s).at(-1)
        coords[s] = N.mode_coordinates(z, spec, 0)
        energy[s] = F.norm(z, "L", 2) ** 2
    k2 = spec.table["k2"][0]
    var_want = spec.table["g"][0] ** 2 * (1 - math.exp(-2 * k2 * t)) / (2 * k2)
    var_err = float(np.max(np.abs(np.mean(coords**2, axis=0) / var_want - 1)))
    e_want = N.expected_energy(spec, t)
    e_err = abs(energy.mean() / e_want - 1)
    ok = var_err <= 0.05 and e_err <= 0.05
    return ok, f"single-mode variance relative error {var_err:.3%}; E|z|^2 relative error {e_err:.3%} over {spec.n_modes} modes, {n_seeds} seeds"


def criterion_9():
    worst = {}
    ok = True
    for name in ("A", "B"):
        cfg = C.load_config(CONFIGS / f"desk_{name}.toml")
        C_S = N.sobolev_constant(F.Grid3(cfg.noise_n), cfg.stopping.sigma)
        if name == "A":
            sp = N.stopping_params_A(cfg.a, cfg.b, cfg.beta, C_S, cfg.stopping.delta)
        else:
            sp = N.stopping_params_B(cfg.L, C_S, cfg.stopping.delta)
        times = []
        for seed in range(100):
            Z = C.simulate_noise(cfg, seed=seed)
            times.append(N.stopping_time(Z, sp, name).time)
        times = np.array(times)
        ok &= bool(np.all(times > 0) and np.all(times <= sp.cap))
        worst[name] = (times.min(), times.max(), sp.cap)
    return ok, "; ".join(f"{k}: min {v[0]:.3g}, max {v[1]:.3g}, cap {v[2]:g}" for k, v in worst.items())


def criterion_10():
    cfg = C.load_config(CONFIGS / "desk_A.toml", {"grid_n": 16})
    cfg = dataclasses.replace(cfg, energy=C.EnergyConfig(c0=4.0, c1=1.0), desk=dataclasses.replace(cfg.desk, ell=0.001))
    res = C.run_scheme(cfg)
    st = res.final
    idx = [i for i, t in enumerate(st.times) if t >= -1e-12]
    ts = st.times[idx] - st.times[idx[0]]
    gamma = cfg.beta / (2 * (4 + cfg.beta))
    u = [st.u(i) for i in idx]
    l2 = np.array([F.norm(x, "L", 2) ** 2 for x in u])
    hs = np.array([F.norm(x, "H", gamma) ** 2 for x in u])
    c = L.trajectory_constants(ts, l2, hs)
    CG = cfg.noise_spec().C_G
    verdicts = {}
    for p in (1, 2, 3):
        Cp = L.minimal_C_p(p, c["c0"], c["c1"], c["c2"], CG)
        verdicts[p] = L.supermartingale_check(L.energy_process_from_norms(ts, l2, hs, p, Cp, CG))
    control = L.supermartingale_check(L.energy_process_from_norms(ts, l2, hs, 1, 0.0, CG))
    ok = all(v.passed for v in verdicts.values()) and not control.passed
    return ok, (
        "tuned C_p: " + ", ".join(f"p={p} {'non-increasing' if v.passed else 'increases'}" for p, v in verdicts.items())
        + f"; C_1 = 0 control {'fails as expected' if not control.passed else 'unexpectedly passes'} "
        f"(max increase {control.max_increase:.3g}); |u|^2 in [{l2.min():.3g}, {l2.max():.3g}] up to t = {res.t_stop:.2f}"
    )


def criterion_11():
    cfg = C.load_config(CONFIGS / "desk_A.toml", {"grid_n": 16})
    cfg = dataclasses.replace(cfg, stopping=dataclasses.replace(cfg.stopping, use=False))
    t_star = 0.05
    base = C.run_scheme(cfg, Z=C.simulate_noise(cfg))
    pert = C.run_scheme(cfg, Z=C.simulate_noise(cfg, reseed_after=(t_star, 12345)))
    other = C.run_scheme(cfg, Z=C.simulate_noise(cfg, seed=cfg.seed + 1))
    causal = True
    for a, b in zip(base.states, pert.states):
        keep = a.times <= t_star + 1e-12
        causal &= bool(np.array_equal(a.v.data[keep], b.v.data[keep]) and np.array_equal(a.R.data[keep], b.R.data[keep]))
    changed = not np.array_equal(base.final.v.data, pert.final.v.data)
    st_a, st_b = base.final, other.final
    t1 = cfg.params().t_q(1)
    neg = (st_a.times >= t1 - 1e-12) & (st_a.times <= 1e-12)
    indep = bool(np.array_equal(st_a.v.data[neg], st_b.v.data[neg]) and np.array_equal(st_a.R.data[neg], st_b.R.data[neg]))
    ok = causal and changed and indep
    return ok, (
        f"outputs before t* = {t_star} bitwise unchanged under a noise change after t*: {causal} (later outputs change: {changed}); "
        f"level-1 outputs on [{max(t1, cfg.t_lo):.2f}, 0] identical for seeds {cfg.seed}, {cfg.seed + 1}: {indep}"
    )


def criterion_12():
    cfg = C.load_config(CONFIGS / "desk_B.toml")
    res = C.glue_runs(cfg)
    seam = res["seam_L2"]
    adj = max(res["residual_paper_end1"], res["residual_paper_start2"])
    ok = seam <= 1e-9 and adj <= 1e-6
    return ok, (
        f"T_L = {res['T_L']:.2f}, seam L2 mismatch {seam:.1e} (<= 1e-9: {seam <= 1e-9}); relative residual with the constructed stress "
        f"terms at the seam {res['residual_paper_end1']:.2e} (end of segment 1), {res['residual_paper_start2']:.1e} (start of segment 2), "
        f"bound 1e-6; with the truncation defect included {res['residual_full_end1']:.1e}, {res['residual_full_start2']:.1e}"
    )


CRITERIA = {
    1: ("geometric lemma", criterion_1),
    2: ("jets", criterion_2),
    3: ("jet scaling", criterion_3),
    4: ("inverse divergence", criterion_4),
    5: ("residual contract", criterion_5),
    6: ("stress decay and energy gap", criterion_6),
    7: ("two-K separation", criterion_7),
    8: ("OU oracle", criterion_8),
    9: ("stopping times", criterion_9),
    10: ("energy-process monotonicity", criterion_10),
    11: ("causality", criterion_11),
    12: ("restart gluing", criterion_12),
}

SLOW = {5, 6, 7, 12}


@pytest.mark.parametrize(
    "n", [pytest.param(n, marks=pytest.mark.slow) if n in SLOW else n for n in CRITERIA], ids=[f"criterion_{n:02d}" for n in CRITERIA]
)
def test_criterion(n):
    title, fn = CRITERIA[n]
    ok, detail = fn()
    line = _announce(n, title, ok, detail)
    assert ok, line


if __name__ == "__main__":
    results = []
    for n, (title, fn) in CRITERIA.items():
        ok, detail = fn()
        _announce(n, title, ok, detail)
        results.append(ok)
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
