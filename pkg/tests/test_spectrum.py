import math

import numpy as np
import pytest

from hicontrast.fundsys import limit_discriminant_many, transfer_matrix
from hicontrast.spectrum import (InconsistencyError, PoleProximityError, band_function, compute_bands,
                                 series_band_test, spectral_series_criterion)

from conftest import unit_medium


def closed_form(lam, h):
    k = np.sqrt(lam)
    return 2 * np.cos(k * h) - k * np.sin(k * h) * (1 - h)


@pytest.fixture(scope="module")
def unit_bands(constant_unit):
    return compute_bands(constant_unit)


def test_first_band_starts_at_zero(unit_bands):
    assert unit_bands.bands[0][0] == 0.0
    assert unit_bands.locate(0.0) == ("band", 1)


def test_endpoints_satisfy_closed_form(unit_bands):
    for lo, hi in unit_bands.bands:
        for e in (lo, hi):
            if e < unit_bands.lambda_range[1]:
                assert abs(abs(closed_form(e, 0.5)) - 2) < 1e-9


def test_bands_and_gaps_sorted_and_disjoint(unit_bands):
    edges = [e for b in unit_bands.bands for e in b]
    assert edges == sorted(edges)
    for (lo, hi), (glo, ghi) in zip(unit_bands.bands, unit_bands.gaps):
        assert hi == glo and lo <= hi
    mid_gap = [0.5 * (a + b) for a, b in unit_bands.gaps]
    assert np.all(np.abs(closed_form(np.array(mid_gap), 0.5)) > 2)


def test_gap_equivalence_with_transfer_roots(constant_unit, unit_bands):
    spec = constant_unit.with_epsilon(1e-3)
    for lo, hi in unit_bands.gaps[:3]:
        assert transfer_matrix(spec, 0.5 * (lo + hi)).in_gap
    for lo, hi in unit_bands.bands[1:3]:
        assert not transfer_matrix(spec, 0.5 * (lo + hi)).in_gap


def dense_bands(spec, lmax, n):
    lams = np.linspace(0, lmax, n)
    inside = np.abs(limit_discriminant_many(spec, lams)) <= 2
    edges = np.flatnonzero(np.diff(inside.astype(int)))
    starts = [0] + list(edges[1::2] + 1)
    stops = list(edges[::2])
    return [(lams[a], lams[b]) for a, b in zip(starts, stops)]


def test_band_widths_against_dense_scan(constant_unit):
    # absolute widths grow towards 32 (the edge expansion near (2 n pi)**2 gives 32 - O(1/n));
    # the relative width, width over distance to the next band, shrinks
    b = compute_bands(constant_unit, lambda_max=500.0, grid_n=50_000)
    ref = dense_bands(constant_unit, 500.0, 1_000_000)
    resolved = [x for x in b.bands if x[1] < 500.0]
    assert len(resolved) >= 4
    for (lo, hi), (rlo, rhi) in zip(resolved, ref):
        assert abs(lo - rlo) < 1e-3 and abs(hi - rhi) < 1e-3
    widths = np.array([hi - lo for lo, hi in resolved])
    assert np.all(widths[1:] < 32.0) and np.all(np.diff(widths[1:]) > 0)
    rel = widths[:-1] / np.diff([lo for lo, _ in resolved])
    assert np.all(np.diff(rel) < 0)


def test_band_function_endpoints_and_evenness(constant_unit, unit_bands):
    for n in (1, 2, 3):
        lo, hi = unit_bands.bands[n - 1]
        bf = band_function(constant_unit, n, [0.0, math.pi], unit_bands)
        assert sorted(bf.values) == pytest.approx([lo, hi], abs=1e-10)
        th = np.linspace(0.1, 3.0, 7)
        a = band_function(constant_unit, n, th, unit_bands).values
        b = band_function(constant_unit, n, 2 * math.pi - th, unit_bands).values
        assert np.max(np.abs(a - b)) <= 10 * 1e-12 * max(1.0, hi)


def test_band_function_values_solve_discriminant(constant_unit, unit_bands):
    th = np.linspace(0, math.pi, 9)
    bf = band_function(constant_unit, 2, th, unit_bands)
    assert np.allclose(closed_form(bf.values, 0.5), 2 * np.cos(th), atol=1e-8)


def test_spectrum_reconstruction(constant_unit, unit_bands):
    th = np.linspace(0, math.pi, 65)
    for n in (1, 2, 3):
        v = band_function(constant_unit, n, th, unit_bands).values
        lo, hi = unit_bands.bands[n - 1]
        assert v.min() == pytest.approx(lo, abs=1e-9)
        assert v.max() == pytest.approx(hi, abs=1e-9)


def test_band_function_missing_band(constant_unit, unit_bands):
    with pytest.raises(ValueError):
        band_function(constant_unit, 50, [0.0], unit_bands)


def test_band_function_inconsistent_bracket(constant_unit, unit_bands):
    from hicontrast.spectrum import BandStructure
    lo, hi = unit_bands.gaps[0]
    fake = BandStructure(unit_bands.lambda_range, [(lo + 1, hi - 1)], [], unit_bands.samples)
    with pytest.raises(InconsistencyError):
        band_function(constant_unit, 1, [1.0], fake)


def test_series_at_zero(constant_unit):
    v = spectral_series_criterion(constant_unit, 0.0, 0.7)
    assert v == pytest.approx(-1.0 / constant_unit.stiff_mass, abs=1e-14)


def test_series_truncation_tail(constant_unit):
    a = spectral_series_criterion(constant_unit, 6.0, 0.3, 200, n_elem=512)
    b = spectral_series_criterion(constant_unit, 6.0, 0.3, 400, n_elem=512)
    assert abs(a - b) < 1e-6


def test_series_rejects_few_terms(constant_unit):
    with pytest.raises(ValueError):
        spectral_series_criterion(constant_unit, 1.0, 0.3, 5)


def test_series_pole_proximity():
    spec = unit_medium()
    from hicontrast.spectrum import _soft_eigs
    mu = _soft_eigs(spec, 0.4, 256)[0]
    with pytest.raises(PoleProximityError):
        spectral_series_criterion(spec, float(mu[3]), 0.4)


def test_series_root_in_band_and_none_in_gap(constant_unit, unit_bands):
    lo, hi = unit_bands.bands[0]
    lam = lo + 0.4 * (hi - lo)
    found, theta = series_band_test(constant_unit, lam, refine=True)
    assert found
    assert abs(spectral_series_criterion(constant_unit, lam, theta)) < 1e-6
    glo, ghi = unit_bands.gaps[0]
    assert series_band_test(constant_unit, 0.5 * (glo + ghi))[0] is False


def test_series_root_matches_band_function(constant_unit, unit_bands):
    # the root in theta sits where D(lam) = 2 cos(theta), up to soft-part discretisation error
    lo, hi = unit_bands.bands[1]
    lam = lo + 0.3 * (hi - lo)
    found, theta = series_band_test(constant_unit, lam, refine=True, n_elem=512)
    assert found
    assert 2 * math.cos(theta) == pytest.approx(closed_form(lam, 0.5), abs=1e-3)
