"""Convex-integration step: parameters, amplitudes, perturbation, stress and residual."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wildns import field as F
from wildns import jets as J
from wildns import noise as N
from wildns import scheme as S
from wildns.geometry import OutOfBall, default_direction_set

DS = default_direction_set()
G8 = F.Grid3(8)
G16 = F.Grid3(16)
DESK_JET = (1, 0.05, 0.9, 20.0)
DESK = S.ParamSet(a=2, b=7, alpha=0.35, beta=0.03, ell_override=0.02, desk_jets=(DESK_JET,) * 3)
PROFILE = S.EnergyProfile(c0=200.0, c1=1.0)
DT, T_LO, T_STOP = 0.02, -0.04, 0.04


def noise_path(seed, amplitude=0.03, reseed_after=None):
    spec = N.NoiseSpec(G8, amplitude, 3.0)
    return N.simulate_stokes(spec, None, DT, T_STOP, seed, reseed_after=reseed_after)


def run_A(Z, **kw):
    st0 = S.init_state("A", S.NoiseData(Z), DESK, grid=G8, dt=DT, t_stop=T_STOP, t_lo=T_LO, profile=PROFILE)
    return st0, S.iterate(st0, grid=G16, **kw)


@pytest.fixture(scope="module")
def run():
    return run_A(noise_path(1))


def sym_full(vals):
    out = np.empty((3, 3, *vals.shape[1:]))
    for s, (a, b) in enumerate(F.SYM_PAIRS):
        out[a, b] = out[b, a] = vals[s]
    return out


def small_stress(rng, shape=(4, 4, 4), scale=0.05):
    R = scale * rng.standard_normal((6, *shape))
    R[5] = -R[0] - R[3]
    return R


# ----------------------------------------------------------------------------
# parameters


def test_parameter_ladder():
    assert DESK.lam(0) == 2 and DESK.lam(1) == pytest.approx(2**7, rel=1e-14)
    assert DESK.delta(1) == 1.0
    assert DESK.delta(2) == pytest.approx(2.0 ** (-2 * 0.03 * (49 - 7)), rel=1e-12)
    assert DESK.t_q(0) == -2.0 and DESK.t_q(1) == -1.0
    assert DESK.f_cut(0) == pytest.approx(2 ** (7 * 0.35 / 8), rel=1e-12)
    assert DESK.ell(3) == pytest.approx(0.02, rel=1e-15)
    plain = S.ParamSet(a=2, b=7, alpha=0.35, beta=0.03)
    assert plain.ell(0) == pytest.approx(2 ** (-1.5 * 0.35 * 7 - 2), rel=1e-12)
    assert DESK.c_lambda == pytest.approx(max(2.0, 1 / DS.radius_eff))


def test_parameter_errors():
    with pytest.raises(S.SchemeError):
        S.ParamSet(a=1, b=7, alpha=0.3, beta=0.01)
    with pytest.raises(S.SchemeError):
        S.ParamSet(a=2, b=7, alpha=1.3, beta=0.01)
    with pytest.raises(S.SchemeError):
        S.ParamSet(a=2, b=7, alpha=0.3, beta=0.01, regime="lab")


def test_admissible_parameters_pass_every_line():
    alpha = 1.0 / 1400.0
    b = 11200  # a multiple of 56 with alpha b = 8
    beta = alpha / (19 * b * b)
    a = 2 ** (4 * 10**8)  # a^(beta b) >= 2 needs log a >= 19 b log 2 / alpha
    p = S.ParamSet(a=a, b=b, alpha=alpha, beta=beta, regime="paper")
    rows = S.validate_params(p, S.EnergyProfile(c0=4.0, c1=1.0))
    failed = [r["name"] for r in rows if not r["passed"]]
    assert failed == []
    assert {r["group"] for r in rows} == {"energy", "datum", "common"}


def test_desk_parameters_are_flagged():
    rows = S.validate_params(DESK, PROFILE)
    failed = {r["name"] for r in rows if not r["passed"]}
    assert "b in 56 N" in failed and "alpha b in 8 N" in failed
    assert "delta_1 = 1" not in failed
    paper = S.ParamSet(a=2, b=7, alpha=0.35, beta=0.03, regime="paper")
    with pytest.raises(S.ParameterViolation):
        S.validate_params(paper, PROFILE)


def test_energy_profile():
    e = S.EnergyProfile(c0=4.0, c1=2.0)
    assert e(-1.0) == 4.0 and e(0.5) == 5.0
    assert e.bounds(1.0) == {"e_bar": 6.0, "e_lower": 4.0, "e_tilde": 2.0}
    tab = S.EnergyProfile(kind="table", times=(0.0, 0.5, 1.0), values=(4.0, 5.0, 7.0))
    assert float(tab(0.5)) == pytest.approx(5.0) and float(tab(-3.0)) == pytest.approx(4.0)
    with pytest.raises(S.SchemeError):
        S.EnergyProfile(kind="table", times=(0.0,), values=(4.0,))


def test_variant_b_constants():
    vb = S.VariantB(L=3, N=1, K=10)
    assert (vb.ML, vb.A) == (16.0, 64.0)
    assert vb.gamma(3) == 10.0 and vb.gamma(2) == 0.25
    assert vb.sigma(2) == 0.25
    with pytest.raises(S.SchemeError):
        S.VariantB(L=3, N=1, K=1, M_L=10.0)


# ----------------------------------------------------------------------------
# level 0


def test_level0_without_noise_has_no_stress():
    Z = noise_path(1, amplitude=0.0)
    st0 = S.init_state("A", S.NoiseData(Z), DESK, grid=G8, dt=DT, t_stop=T_STOP, t_lo=T_LO, profile=PROFILE)
    assert np.all(st0.R.data == 0) and np.all(st0.v.data == 0)
    assert st0.times[0] == T_LO and st0.diagnostics["level0"]["R_L1"] == [0.0] * st0.R.nt


def test_level0_stress_is_noise_product():
    Z = noise_path(2, amplitude=1.0)
    st0 = S.init_state("A", S.NoiseData(Z), DESK, grid=G8, dt=DT, t_stop=T_STOP, t_lo=T_LO, profile=PROFILE)
    i = st0.R.nt - 1
    z = F.spectral_filter(Z.at(-1), "leq", DESK.f_cut(0))
    assert np.allclose(st0.R.data[i], F.traceless_tensor_product(z, z).coeffs, atol=1e-15)


def test_init_state_errors():
    Z = noise_path(1)
    with pytest.raises(S.EnergyConstraintViolated):
        S.init_state("A", S.NoiseData(Z), DESK, grid=G8, dt=DT, t_stop=T_STOP, profile=S.EnergyProfile(c0=3.0))
    u0 = F.leray_project(F.random_field(G8, np.random.default_rng(0)))
    with pytest.raises(S.DatumTooLarge):
        S.init_state("B", S.NoiseData(Z, u0), DESK, grid=G8, dt=DT, t_stop=T_STOP, vb=S.VariantB(N=1))
    with pytest.raises(S.SchemeError):
        S.init_state("B", S.NoiseData(Z), DESK, grid=G8, dt=DT, t_stop=T_STOP, vb=S.VariantB())
    with pytest.raises(S.SchemeError):
        S.init_state("A", S.NoiseData(Z), DESK, grid=G8, dt=0.03, t_stop=T_STOP, t_lo=T_LO, profile=PROFILE)


# ----------------------------------------------------------------------------
# energy density and amplitudes


def test_rho_of_zero_stress():
    rho = S.build_rho_gamma(np.zeros((6, 4, 4, 4)), 0.0, 0.01, c_lam=2.0)
    assert np.allclose(rho, 0.02, rtol=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0), st.floats(0.0, 1.0))
def test_stress_over_rho_stays_in_ball(seed, ell, gam):
    R = small_stress(np.random.default_rng(seed), scale=10.0)
    c = S.c_lambda(DS)
    rho = S.build_rho_gamma(R, gam, ell)
    frob = np.sqrt(np.tensordot(F.SYM_MULT, R**2, axes=(0, 0)))
    assert np.all(frob / rho <= 1.0 / c + 1e-15)
    assert 1.0 / c <= DS.radius_eff * (1 + 1e-12)


def test_gamma_level():
    p, e = DESK, S.EnergyProfile(c0=10.0)
    want = (10.0 * (1 - p.delta(2)) - 3.0) / (3 * F.VOLUME)
    assert S.gamma_level(e, p, 0, 0.1, 3.0) == pytest.approx(want, rel=1e-14)
    assert S.gamma_level(e, p, 0, 0.1, 50.0) == 0.0
    with pytest.raises(S.NegativePumping):
        S.gamma_level(e, p, 0, 0.1, 50.0, strict=True)


def test_amplitudes_of_isotropic_density():
    rho = np.full((4, 4, 4), 3.0)
    a = S.build_amplitudes(rho, np.zeros((6, 4, 4, 4)))
    assert np.allclose(a, math.sqrt(3.0 * 0.5), rtol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_amplitudes_cancel_the_stress(seed):
    R = small_stress(np.random.default_rng(seed), scale=1.0)
    rho = S.build_rho_gamma(R, 0.1, 0.01)
    asq = S.build_amplitudes(rho, R, squared=True)
    X = DS.dirs_float
    recon = np.einsum("x...,xa,xb->ab...", asq, X, X)
    target = rho[None, None] * np.eye(3)[:, :, None, None, None] - sym_full(R)
    assert np.max(np.abs(recon - target)) <= 1e-12 * np.max(np.abs(target))


def test_unitary_normalisation_against_slab_integral():
    rng = np.random.default_rng(1)
    R = small_stress(rng, shape=(2, 2, 2))
    rho = S.build_rho_gamma(R, 0.1, 0.01)
    asq = S.build_amplitudes(rho, R, squared=True, normalization="unitary")
    p = J.jet_params(128)
    integrals = np.stack([F.VOLUME * J.slab_mean_outer(k, p, n_slab=512) for k in range(6)])
    recon = (2 * math.pi) ** -1.5 * np.einsum("x...,xab->ab...", asq, integrals)
    target = rho[None, None] * np.eye(3)[:, :, None, None, None] - sym_full(R)
    assert np.max(np.abs(recon - target)) <= 1e-6 * np.max(np.abs(target))


def test_amplitude_bound():
    R = small_stress(np.random.default_rng(2), scale=1.0)
    rho = S.build_rho_gamma(R, 0.0, 0.01)
    a = S.build_amplitudes(rho, R)
    g2max = max(float(g) for g in DS.gamma2_id) + DS.radius_eff * DS.op_norm
    assert np.all(a <= np.sqrt(rho * g2max) + 1e-14)


def test_amplitudes_out_of_ball():
    R = small_stress(np.random.default_rng(3), scale=1.0)
    with pytest.raises(OutOfBall):
        S.build_amplitudes(np.full(R.shape[1:], 1e-3), R)
    with pytest.raises(S.SchemeError):
        S.build_amplitudes(np.ones(R.shape[1:]), 0 * R, normalization="other")


# ----------------------------------------------------------------------------
# perturbation


@pytest.fixture(scope="module")
def bank():
    return J.JetBank(J.desk_jet_params(*DESK_JET), G16, normalize=True)


def smooth_amplitudes(seed, n=16):
    rng = np.random.default_rng(seed)
    base = F.to_physical(F.random_field(F.Grid3(n), rng, "scalar", kcut=2), n)[0]
    asq = np.stack([1.0 + 0.2 * np.roll(base, k, axis=0) / np.abs(base).max() for k in range(6)])
    return S.Amplitudes.from_squares(asq)


def test_constant_amplitudes_give_plain_corrector(bank):
    amps = S.Amplitudes.from_squares(np.stack([np.full((16,) * 3, c) for c in (1.0, 2.0, 0.5, 1.5, 3.0, 0.7)]))
    pert = S.build_perturbation(bank, 0.2, amps)
    want = F.zeros(G16)
    for k in range(6):
        want = want + bank.fields(k, 0.2)[1] * float(amps.a[k, 0, 0, 0])
    assert F.norm(pert.wc - want, "L", 2) <= 1e-12 * F.norm(want, "L", 2)


def test_perturbation_divergence_free(bank):
    pert = S.build_perturbation(bank, 0.1, smooth_amplitudes(0))
    for part in (pert.wp + pert.wc, pert.wt, pert.w):
        assert F.norm(F.div(part), "L", 2) <= 1e-12 * F.norm(pert.w, "L", 2)


def test_corrector_matches_explicit_formula(bank):
    amps = smooth_amplitudes(1)
    pert = S.build_perturbation(bank, 0.3, amps)
    explicit = S.corrector_formula(bank, 0.3, amps.a)
    assert F.norm(pert.wc - explicit, "L", 2) <= 1e-10 * F.norm(pert.wc, "L", 2)


def test_cutoff_switches_perturbation_off(bank):
    pert = S.build_perturbation(bank, 0.1, smooth_amplitudes(2), chi=float(S.cutoff(0.1, 0.25)), chid=0.0)
    assert np.all(pert.w.coeffs == 0) and np.all(pert.dw.coeffs == 0)


@given(st.floats(0.01, 1.0))
def test_cutoff_profile(sigma):
    t = np.linspace(-1, 2, 301)
    chi = S.cutoff(t, sigma)
    assert np.all(chi[t <= sigma / 2] == 0) and np.all(chi[t >= sigma] == 1)
    assert np.all(np.diff(chi) >= 0)
    h = 1e-6 * sigma
    tm = 0.75 * sigma
    fd = (S.cutoff(tm + h, sigma) - S.cutoff(tm - h, sigma)) / (2 * h)
    assert float(S.cutoff_dot(tm, sigma)) == pytest.approx(float(fd), rel=1e-6)


def test_zero_perturbation_stress(bank):
    amps = S.Amplitudes.from_squares(np.zeros((6, 16, 16, 16)))
    pert = S.build_perturbation(bank, 0.0, amps)
    rng = np.random.default_rng(4)
    v = F.leray_project(F.random_field(G16, rng))
    z = F.leray_project(F.random_field(G16, rng, kcut=3))
    z1 = F.leray_project(F.random_field(G16, rng, kcut=3))
    R_l = F.inv_divergence(F.random_field(G16, rng))
    UU = F.traceless_tensor_product(v + z, v + z)
    bundle, R1 = S.assemble_stress(pert, v_l=v, z_l=z, z_next=z1, UU_l=UU, R_l=R_l)
    for key in ("R_lin", "R_cor", "R_osc_x", "R_osc_t", "R_com", "R_cut"):
        assert F.norm(bundle[key], "L", 2) <= 1e-13 * F.norm(R_l, "L", 2), key
    assert F.norm(bundle["R_disc"] - R_l, "L", 2) <= 1e-14 * F.norm(R_l, "L", 2)
    want = F.traceless_tensor_product(v + z1, v + z1) - F.traceless_tensor_product(v + z, v + z)
    assert F.norm(bundle["R_com1"] - want, "L", 2) <= 1e-13 * F.norm(want, "L", 2)


# ----------------------------------------------------------------------------
# one full step


def test_full_step_closes_the_equation(run):
    _, st1 = run
    rows = st1.diagnostics["samples"]
    assert len(rows) == st1.v.nt == 5
    assert max(r["res_full_rel"] for r in rows) <= 1e-10
    # the paper-term residual is recorded but is limited by truncation of the jets
    assert all(np.isfinite(r["res_paper_rel"]) for r in rows)
    for i in range(st1.v.nt):
        assert st1.v.at(i).is_divergence_free(1e-12)
        R = st1.R.at(i)
        assert F.norm(F.trace(R), "L", 2) <= 1e-13 * F.norm(R, "L", 2)


def test_level_report_rows(run):
    _, st1 = run
    names = [r["name"] for r in st1.reports[-1]["rows"]]
    assert "residual (all terms), relative" in names
    assert "energy gap / (delta_{q+2} e / 4)" in names
    full = next(r for r in st1.reports[-1]["rows"] if r["name"] == "residual (all terms), relative")
    assert full["passed"]


def test_outputs_before_a_noise_change_are_bitwise_equal(run):
    _, st1 = run
    t_star = 0.02
    _, st2 = run_A(noise_path(1, reseed_after=(t_star, 77)))
    keep = st1.times <= t_star + 1e-12
    assert np.array_equal(st1.v.data[keep], st2.v.data[keep])
    assert np.array_equal(st1.R.data[keep], st2.R.data[keep])
    assert not np.array_equal(st1.v.data[~keep], st2.v.data[~keep])


def test_negative_times_do_not_see_the_seed(run):
    _, st1 = run
    _, st2 = run_A(noise_path(99))
    keep = st1.times <= 1e-12
    assert np.array_equal(st1.v.data[keep], st2.v.data[keep])
    assert not np.array_equal(st1.v.data[~keep], st2.v.data[~keep])


def test_iterate_rejects_uneven_indices(run):
    st0, _ = run
    with pytest.raises(S.SchemeError):
        S.iterate(st0, grid=G16, indices=[2, 3, 5])


def test_energy_gap_of_level0(run):
    st0, _ = run
    e = PROFILE(st0.times)
    en = np.array([F.norm(st0.z_q(i), "L", 2) ** 2 for i in range(st0.v.nt)])
    assert np.allclose(S.energy_gap(st0, target="plain"), np.abs(e - en), rtol=1e-14)
    assert np.allclose(S.energy_gap(st0), np.abs(e * (1 - DESK.delta(1)) - en), rtol=1e-14)


def test_calibrate_M0_is_positive(run):
    _, st1 = run
    assert S.calibrate_M0(st1) > 0


# ----------------------------------------------------------------------------
# gluing


def test_extend_solution():
    rng = np.random.default_rng(5)
    f = [F.random_field(G8, rng) for _ in range(6)]
    a = F.TimeTrajectory.from_fields(f[:4], 0.0, 0.1)
    assert np.array_equal(S.extend_solution([(a, 0.3)]).data, a.data)
    b = F.TimeTrajectory.from_fields([f[2]] + f[4:], 0.0, 0.1)
    glued = S.extend_solution([(a, 0.2), (b, 0.2)])
    assert glued.nt == 5
    assert np.array_equal(glued.data[2], f[2].coeffs) and np.array_equal(glued.data[-1], f[5].coeffs)
    with pytest.raises(S.SeamMismatch):
        S.extend_solution([(a, 0.3), (b, 0.2)])
