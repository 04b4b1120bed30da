import math

import numpy as np
import pytest

from hicontrast.bloch import (QuasiperiodicProblem, UnsupportedDepthError, band_eigenvalues_eps,
                              band_eigenvalues_limit, expansion_terms, l2_rho_norm, solve_finite_eps_resolvent,
                              solve_limit_resolvent, triple_inner, triple_norm)
from hicontrast.fundsys import propagate
from hicontrast.spectrum import band_function, compute_bands

from conftest import DYADIC, slope

THETAS = (0.0, math.pi / 2, math.pi)
LOADS = [
    lambda x: np.cos(2 * np.pi * x) + x,
    lambda x: np.exp(-x) * np.sin(5 * x),
    lambda x: np.where(x < 0.3, 1.0, -0.5),
]


@pytest.fixture(scope="module")
def unit_bands(constant_unit):
    return compute_bands(constant_unit)


def test_zero_load_gives_zero(constant_unit):
    p = QuasiperiodicProblem(constant_unit, 0.4, 64, 64)
    zero = lambda x: np.zeros_like(x)
    assert np.all(solve_finite_eps_resolvent(p, zero) == 0)
    assert np.all(solve_limit_resolvent(p, f=zero) == 0)


def test_hermitian_assembly(constant_unit):
    p = QuasiperiodicProblem(constant_unit, 1.1, 64, 64)
    for mat in p.matrices:
        d = mat - mat.conj().T
        assert abs(d).max() == 0


def test_quasiperiodic_trace(constant_unit):
    th = 0.9
    p = QuasiperiodicProblem(constant_unit, th, 64, 64)
    u = solve_finite_eps_resolvent(p, LOADS[1])
    assert u[-1] == pytest.approx(np.exp(1j * th) * u[0], abs=1e-14)


def test_limit_is_constant_on_stiff_part(constant_unit):
    p = QuasiperiodicProblem(constant_unit, 0.7, 64, 64)
    u = solve_limit_resolvent(p, f=LOADS[0])
    stiff = u[p.h_index:-1]
    assert np.max(np.abs(stiff - stiff[0])) < 1e-13


def test_limit_resolvent_unit_load(constant_unit):
    # f = 1 at theta = 0: the constant 1 solves the soft equation and balances the stiff mass
    p = QuasiperiodicProblem(constant_unit, 0.0, 256, 64)
    u = solve_limit_resolvent(p, f=lambda x: np.ones_like(x))
    assert np.max(np.abs(u - 1.0)) < 1e-8


def test_limit_resolvent_against_shooting():
    # load supported on the soft part; closed-form solution of the coupled limit problem
    from conftest import unit_medium
    spec = unit_medium(h=0.5, eps=0.1)
    h = 0.5
    f = lambda x: np.where(x < h, np.sin(np.pi * x / h), 0.0)
    p = QuasiperiodicProblem(spec, 0.0, 2048, 64)
    u = solve_limit_resolvent(p, f=f)
    # exact: -u'' + u = sin(pi x/h) on (0,h), u(0) = u(h) = c, and the stiff mass balances the flux:
    # u'(0) - u'(h) = (1-h) c
    k = np.pi / h
    part = lambda x: np.sin(k * x) / (1 + k * k)
    dpart0, dparth = k / (1 + k * k), -k / (1 + k * k)
    # homogeneous part c cosh(x - h/2)/cosh(h/2)
    dh0 = -math.tanh(h / 2)
    dhh = math.tanh(h / 2)
    c = (dpart0 - dparth) / ((1 - h) - (dh0 - dhh))
    x = p.nodes
    exact = np.where(x <= h, part(x) + c * np.cosh(x - h / 2) / math.cosh(h / 2), c)
    assert np.max(np.abs(u - exact)) < 1e-6
    # shooting: the homogeneous soft solution from the fundsys propagator at lambda = -1
    t = propagate(spec.a0, spec.rho0, -1.0, (0.0, h)).entries
    assert t[0, 0] == pytest.approx(math.cosh(h), rel=1e-10)
    assert (t[0, 0] - 1) / t[0, 1] == pytest.approx(dhh, rel=1e-10)


def test_resolvent_is_contraction(constant_unit):
    for th in THETAS:
        p = QuasiperiodicProblem(constant_unit, th, 128, 128)
        for f in LOADS:
            fv = f(p.nodes).astype(complex)
            fv[-1] = np.exp(1j * th) * fv[0]
            u = solve_limit_resolvent(p, f=f)
            assert l2_rho_norm(p, u) <= l2_rho_norm(p, fv) * (1 + 1e-12) + 1e-12


def test_near_constant_for_unit_load():
    from conftest import unit_medium
    errs = []
    for eps in (0.1, 0.05, 0.025):
        spec = unit_medium(eps=eps)
        p = QuasiperiodicProblem(spec, 0.0, 128, 128)
        f = lambda x: np.ones_like(x)
        u = solve_finite_eps_resolvent(p, f)
        c = solve_limit_resolvent(p, f=f)
        errs.append(np.max(np.abs(u - c)))
    assert max(errs) < 1e-10


def test_mesh_self_convergence(constant_unit):
    spec = constant_unit.with_epsilon(0.1)
    diffs = []
    for n in (32, 64, 128):
        p, q = QuasiperiodicProblem(spec, 0.5, n, n), QuasiperiodicProblem(spec, 0.5, 2 * n, 2 * n)
        u, v = solve_finite_eps_resolvent(p, LOADS[1]), solve_finite_eps_resolvent(q, LOADS[1])
        diffs.append(l2_rho_norm(p, u - v[::2]))
    rates = np.log2(np.array(diffs[:-1]) / diffs[1:])
    assert np.all(rates > 1.8)


def test_depth_zero_matches_limit(constant_unit):
    p = QuasiperiodicProblem(constant_unit, 0.3, 64, 64)
    t = expansion_terms(p, 0.3, LOADS[0], N=0)
    assert t.correctors == []
    assert np.array_equal(t.u0, solve_limit_resolvent(p, f=LOADS[0]))


def test_unsupported_depth(constant_unit):
    with pytest.raises(UnsupportedDepthError):
        expansion_terms(constant_unit, 0.0, LOADS[0], N=2)


def test_corrector_orthogonal_to_limit_space(constant_unit):
    rng = np.random.default_rng(4)
    th = 1.3
    p = QuasiperiodicProblem(constant_unit, th, 128, 128)
    u2 = expansion_terms(p, th, LOADS[2], N=1).correctors[0]
    basis = p.limit_basis
    scale = triple_norm(p, u2)
    for _ in range(5):
        v = p.expand(basis @ (rng.normal(size=basis.shape[1]) + 1j * rng.normal(size=basis.shape[1])))
        assert abs(triple_inner(p, u2, v)) < 1e-8 * scale * triple_norm(p, v)


def test_resolvent_rates(constant_unit):
    for th in THETAS:
        for f in LOADS:
            e0, e2 = [], []
            for eps in DYADIC:
                p = QuasiperiodicProblem(constant_unit.with_epsilon(eps), th)
                u = solve_finite_eps_resolvent(p, f)
                t = expansion_terms(p, th, f, N=1)
                e0.append(l2_rho_norm(p, u - t.u0))
                e2.append(triple_norm(p, u - t.u0 - eps * eps * t.correctors[0]))
            assert slope(DYADIC, e0) >= 1.7
            assert abs(slope(DYADIC, e2) - 4.0) <= 0.3


def test_eigenvalues_ordered_and_simple(constant_unit):
    for th in (0.3, math.pi / 2):
        v = band_eigenvalues_eps(QuasiperiodicProblem(constant_unit.with_epsilon(0.05), th), 4)
        assert v[0] > -1e-9 and np.all(np.diff(v) > 0)


def test_limit_eigenvalues_match_band_functions(constant_unit, unit_bands):
    th = 0.8
    v = band_eigenvalues_limit(QuasiperiodicProblem(constant_unit, th), 3, extrapolate=True)
    ref = [band_function(constant_unit, n, [th], unit_bands).values[0] for n in (1, 2, 3)]
    assert np.allclose(v, ref, rtol=1e-7)


def test_eigenvalue_close_at_small_eps(constant_unit, unit_bands):
    eps = 0.05
    v = band_eigenvalues_eps(QuasiperiodicProblem(constant_unit.with_epsilon(eps), math.pi), 1, extrapolate=True)
    ref = band_function(constant_unit, 1, [math.pi], unit_bands).values[0]
    assert abs(v[0] - ref) <= 5.0 * eps ** 2


def test_eigenvalue_rates(constant_unit, unit_bands):
    for th in THETAS:
        for n in (1, 2):
            ref = band_function(constant_unit, n, [th], unit_bands).values[0]
            errs = np.array([band_eigenvalues_eps(QuasiperiodicProblem(constant_unit.with_epsilon(e), th), 2,
                                                  extrapolate=True)[n - 1] - ref for e in DYADIC])
            if ref == 0.0:
                # lambda_1(0) = 0 is exact for every eps (constants); only round-off remains
                assert np.max(np.abs(errs)) < 1e-8
                continue
            assert abs(slope(DYADIC, errs) - 2.0) <= 0.3
