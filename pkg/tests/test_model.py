import math

import numpy as np
import pytest

from hicontrast.model import (ConfigError, ValidationError, CoefficientProfile, DefectSpec, dump_medium,
                              evaluate_eps_coefficients, parse_medium)

from conftest import preset, unit_medium

UNIT = """
geometry: {h: 0.5}
coefficients:
  a0: {kind: constant, value: 1}
  a1: {kind: constant, value: 1}
  rho0: {kind: constant, value: 1}
  rho1: {kind: constant, value: 1}
epsilon: 0.01
"""


def test_parse_constant_unit():
    spec = parse_medium(UNIT)
    assert spec.epsilon == 0.01 and spec.h == 0.5
    for name in ("a0", "a1", "rho0", "rho1"):
        assert getattr(spec, name).kind == "constant"
    assert spec.defect is None


def test_h_outside_unit_interval_rejected():
    with pytest.raises(ValidationError):
        parse_medium(UNIT.replace("h: 0.5", "h: 1.5"))


def test_missing_field_names_it():
    text = UNIT.replace("  rho1: {kind: constant, value: 1}\n", "")
    with pytest.raises(ConfigError, match="rho1"):
        parse_medium(text)


def test_nonpositive_coefficient_rejected():
    with pytest.raises(ValidationError):
        parse_medium(UNIT.replace("a1: {kind: constant, value: 1}", "a1: {kind: constant, value: -2}"))


def test_reversed_defect_rejected():
    text = UNIT + "defect:\n  d_minus: 1.0\n  d_plus: 0.5\n  a_D: {kind: constant, value: 1}\n" \
                  "  rho_D: {kind: constant, value: 1}\n"
    with pytest.raises(ValidationError):
        parse_medium(text)


def test_soft_point_scaled_by_eps_squared():
    # x / eps = 0.5 sits inside the soft part when h = 0.6
    spec = unit_medium(h=0.6, eps=0.1)
    a, rho = evaluate_eps_coefficients(spec, 0.05)
    assert a == pytest.approx(0.01, rel=1e-14) and rho == 1.0


def test_interface_point_takes_right_limit():
    # x / eps = h exactly: the stiff value applies
    spec = unit_medium(h=0.5, eps=0.1)
    a, _ = evaluate_eps_coefficients(spec, 0.05)
    assert a == 1.0


def test_stiff_point():
    a, rho = evaluate_eps_coefficients(unit_medium(h=0.5, eps=0.1), 0.07)
    assert (a, rho) == (1.0, 1.0)


def test_defect_overrides_coefficients():
    d = DefectSpec(0.0, 1.0, CoefficientProfile.constant(2.0, (0, 1)), CoefficientProfile.constant(3.0, (0, 1)))
    a, rho = evaluate_eps_coefficients(unit_medium(defect=d), 0.5)
    assert (a, rho) == (2.0, 3.0)


def test_periodicity_away_from_defect():
    spec = preset("layered")
    x = np.linspace(-3, 3, 997)
    a0, r0 = evaluate_eps_coefficients(spec, x)
    a1, r1 = evaluate_eps_coefficients(spec, x + spec.epsilon)
    # skip points that sit within rounding of an interface
    y = (x / spec.epsilon) % 1.0
    knots = np.unique(np.concatenate([spec.a0.nodes(), spec.a1.nodes(), spec.rho0.nodes(), [1.0]]))
    clear = np.min(np.abs(y[:, None] - knots[None, :]), axis=1) > 1e-9
    assert np.allclose(a0[clear], a1[clear], rtol=1e-14) and np.allclose(r0[clear], r1[clear], rtol=1e-14)


@pytest.mark.parametrize("name", ["constant_unit", "gap_tuned", "layered", "graded"])
def test_round_trip(name):
    spec = preset(name)
    assert parse_medium(dump_medium(spec)) == spec


def test_sampled_profile_interpolates_linearly():
    p = CoefficientProfile.sampled([1.0, 3.0, 2.0], (0.0, 1.0))
    assert p(0.25) == pytest.approx(2.0) and p(0.75) == pytest.approx(2.5)
    assert p.integral() == pytest.approx(0.5 * (1 + 3) / 2 + 0.5 * (3 + 2) / 2)
