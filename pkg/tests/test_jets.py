"""Intermittent jets: profiles, scales, spectral evaluation and supports."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wildns import field as F
from wildns import jets as J
from wildns.geometry import default_direction_set

PROF = J.build_profiles()
DS = default_direction_set()
DESK = J.desk_jet_params(1, 0.05, 0.9, 10.0)


def gl_integral(fn, a, b, n=800):
    x, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (b - a) * x + 0.5 * (a + b)
    return 0.5 * (b - a) * float(np.sum(w * fn(s)))


@pytest.fixture(scope="module")
def desk_bank():
    return J.JetBank(DESK, F.Grid3(16), PROF, normalize=True)


def test_profile_normalisations():
    # independent Gauss-Legendre quadrature on the support windows
    phi_sq = 2 * math.pi * gl_integral(lambda r: PROF.phi(r) ** 2 * r, 0.0, 1.0)
    psi_sq = gl_integral(lambda s: PROF.psi(s) ** 2, -1.0, 1.0)
    assert phi_sq / (4 * math.pi**2) == pytest.approx(1.0, abs=1e-8)
    assert psi_sq / (2 * math.pi) == pytest.approx(1.0, abs=1e-8)
    assert abs(2 * math.pi * gl_integral(lambda r: PROF.phi(r) * r, 0.0, 1.0)) <= 1e-8
    assert abs(gl_integral(PROF.psi, -1.0, 1.0)) <= 1e-12
    assert PROF.phi(1.0) == 0.0 and PROF.psi(1.0) == 0.0


def test_paper_scales():
    p = J.jet_params(128)
    assert (p.m, p.r_perp, p.r_par, p.mu) == (2, 2.0**-6, 2.0**-4, 2.0**9)
    assert p.mu * p.r_perp / p.r_par == pytest.approx(p.lam, rel=1e-15)
    assert p.mprime == 10
    q = J.jet_params(2**14)
    assert (q.m, q.r_perp, q.mu) == (4, 4.0**-6, 4.0**9)
    with pytest.raises(J.NonIntegerPeriod):
        J.jet_params(32)


def test_invalid_scales():
    with pytest.raises(J.JetError):
        J.desk_jet_params(1, 0.5, 0.4, 1.0)
    with pytest.raises(J.JetError):
        J.desk_jet_params(1, 0.2, 0.9, 1.0)  # tubes would overlap


def test_jet_identities_spectral(desk_bank):
    for k in range(6):
        for t in (0.0, 0.37):
            W, Wc, V = desk_bank.fields(k, t)
            s = W + Wc
            size = F.norm(s, "L", 2)
            assert F.norm(F.div(s), "L", 2) <= 1e-12 * size
            assert F.norm(F.curl(F.curl(V)) - s, "L", 2) <= 1e-12 * size
            assert np.max(np.abs(W.mean())) <= 1e-15


def test_normalised_mean_outer_product(desk_bank):
    for k in range(6):
        W, _, _ = desk_bank.fields(k, 0.1)
        xi = desk_bank.xi(k)
        want = [xi[a] * xi[b] for a, b in F.SYM_PAIRS]
        assert np.allclose(F.tensor_product(W, W).mean(), want, atol=1e-12)


def test_time_derivative_matches_difference(desk_bank):
    h = 1e-6
    W1, _, _ = desk_bank.fields(2, 0.2 + h)
    W0, _, _ = desk_bank.fields(2, 0.2 - h)
    dW, _, _ = desk_bank.fields(2, 0.2, time_derivative=1)
    fd = (W1 - W0) * (0.5 / h)
    assert F.norm(fd - dW, "L", 2) <= 1e-6 * F.norm(dW, "L", 2)


def test_slab_mean_at_lambda_128():
    p = J.jet_params(128)
    for k in range(6):
        xi = DS.dirs_float[k]
        assert np.max(np.abs(J.slab_mean_outer(k, p, PROF, 512) - np.outer(xi, xi))) <= 1e-6


@pytest.mark.parametrize("params", [DESK, J.jet_params(128), J.jet_params(2**14)], ids=["desk", "128", "16384"])
def test_supports_disjoint(params):
    res = J.support_overlap(params, n_samples=5000)
    assert res["overlap"] == 0.0 and res["min_ratio"] > 1.0


def test_pointwise_products_vanish():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 2 * math.pi, (200_000, 3))
    vals = np.stack([J.jet_pointwise(k, DESK, 0.3, pts, PROF) for k in range(6)])
    assert all(np.count_nonzero(v) > 0 for v in vals)
    for i in range(6):
        for j in range(i + 1, 6):
            assert np.all(vals[i] * vals[j] == 0.0)


def test_oscillating_part_lives_at_high_frequency(desk_bank):
    W, _, _ = desk_bank.fields(0, 0.0)
    WW = F.spectral_filter(F.tensor_product(W, W), "neq0")
    active = np.max(np.abs(WW.coeffs), axis=0) > 1e-14
    g = desk_bank.grid
    assert active.any()
    assert g.kmag[active].min() >= DESK.mprime - 1e-9
    assert DESK.mprime >= DESK.r_perp * DESK.lam / 2


@given(st.floats(0.1, 0.9), st.integers(0, 40))
def test_psi_series_matches_fft(r, j):
    # Fourier coefficient of the periodised psi_r against the scaled transform
    n = 8192
    s = np.linspace(-math.pi, math.pi, n, endpoint=False)
    f = PROF.psi(s / r) / math.sqrt(r)
    c = np.sum(f * np.exp(-1j * j * s)) / n
    want = math.sqrt(r) / (2 * math.pi) * PROF.psi_transform(j * r)[0]
    assert abs(c - want) <= 1e-9


@given(st.floats(0.2, 0.9), st.integers(0, 6), st.integers(0, 6))
def test_Phi_series_matches_fft(r, j2, j3):
    n = 512
    y = np.linspace(-math.pi, math.pi, n, endpoint=False)
    Y2, Y3 = np.meshgrid(y, y, indexing="ij")
    f = PROF.Phi(np.hypot(Y2, Y3) / r)
    c = np.sum(f * np.exp(-1j * (j2 * Y2 + j3 * Y3))) / n**2
    want = r**2 / (4 * math.pi**2) * PROF.Phi_transform(math.hypot(j2, j3) * r)[0]
    assert abs(c - want) <= 1e-8


def test_scaling_ratios_stable_across_lambda():
    res = J.check_jet_bounds([J.jet_params(128), J.jet_params(2**14)], ps=(1.0, 2.0), profiles=PROF)
    for p in ("1", "2"):
        for q, row in res["table"][p].items():
            assert row["spread"] <= 2.0, (p, q)


def test_under_resolved():
    with pytest.raises(J.UnderResolved):
        J.JetBank(J.jet_params(128), F.Grid3(16))
    with pytest.raises(J.UnderResolved):
        J.JetBank(DESK, F.Grid3(16), strict=True)


def test_captured_fraction_grows_with_resolution():
    fr = [J.JetBank(DESK, F.Grid3(n), PROF).captured_fraction(0) for n in (16, 32, 64)]
    assert fr[0] < fr[1] < fr[2] <= 1.0 + 1e-12
