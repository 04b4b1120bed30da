"""Problem description for a 1D high-contrast periodic medium with a defect.

The periodic cell is ``Y = (0, 1)`` split into a soft part ``Y0 = (0, h)`` and a
stiff part ``Y1 = (h, 1)``.  At period ``eps`` the coefficients are

    a_eps(x) = eps**2 * a0(x/eps)   on soft cells,   a1(x/eps) on stiff cells,
    rho_eps(x) = rho0(x/eps)        on soft cells,   rho1(x/eps) on stiff cells,

and on the defect interval ``D = (d_minus, d_plus)`` both are replaced by
``a_D(x)``, ``rho_D(x)`` (given in physical coordinates).

Points lying exactly on an interface take the value from the right.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import yaml

__all__ = [
    "ConfigError",
    "ValidationError",
    "CoefficientProfile",
    "CellGeometry",
    "DefectSpec",
    "MediumSpec",
    "parse_medium",
    "load_medium",
    "medium_to_dict",
    "dump_medium",
    "apply_overrides",
    "evaluate_eps_coefficients",
]

KINDS = ("constant", "piecewise-constant", "sampled-grid")
_SUPPORT_TOL = 1e-12


class ConfigError(ValueError):
    """Malformed configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ValidationError(ValueError):
    """A well-formed configuration that violates a model invariant."""


@dataclass(frozen=True)
class CoefficientProfile:
    """Positive, bounded coefficient on ``support = (l, r)``.

    ``constant`` uses ``value``; ``piecewise-constant`` uses ``breakpoints``
    (including both support ends) and one entry of ``values`` per piece;
    ``sampled-grid`` linearly interpolates ``samples`` taken on a uniform grid
    spanning the support.
    """

    kind: str
    support: tuple[float, float]
    value: float | None = None
    breakpoints: tuple[float, ...] = ()
    values: tuple[float, ...] = ()
    samples: tuple[float, ...] = ()

    def __post_init__(self):
        l, r = self.support
        if not (math.isfinite(l) and math.isfinite(r) and l < r):
            raise ValidationError(f"profile support must satisfy l < r, got {self.support}")
        if self.kind == "constant":
            if self.value is None:
                raise ValidationError("constant profile needs a value")
            data = [self.value]
        elif self.kind == "piecewise-constant":
            bp = self.breakpoints
            if len(bp) < 2 or len(self.values) != len(bp) - 1:
                raise ValidationError("piecewise-constant profile needs len(values) == len(breakpoints) - 1 >= 1")
            if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
                raise ValidationError("breakpoints must be strictly increasing")
            if abs(bp[0] - l) > _SUPPORT_TOL or abs(bp[-1] - r) > _SUPPORT_TOL:
                raise ValidationError(f"breakpoints {bp[0]}..{bp[-1]} do not span the support {self.support}")
            data = list(self.values)
        elif self.kind == "sampled-grid":
            if len(self.samples) < 2:
                raise ValidationError("sampled-grid profile needs at least two samples")
            data = list(self.samples)
        else:
            raise ValidationError(f"unknown profile kind {self.kind!r}; expected one of {KINDS}")
        for v in data:
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"coefficient values must be finite and strictly positive, got {v}")

    @classmethod
    def constant(cls, value: float, support: tuple[float, float]) -> "CoefficientProfile":
        return cls("constant", (float(support[0]), float(support[1])), value=float(value))

    @classmethod
    def piecewise(cls, breakpoints, values) -> "CoefficientProfile":
        bp = tuple(float(b) for b in breakpoints)
        return cls("piecewise-constant", (bp[0], bp[-1]), breakpoints=bp,
                   values=tuple(float(v) for v in values))

    @classmethod
    def sampled(cls, samples, support: tuple[float, float]) -> "CoefficientProfile":
        return cls("sampled-grid", (float(support[0]), float(support[1])),
                   samples=tuple(float(s) for s in samples))

    @property
    def is_piecewise_constant(self) -> bool:
        return self.kind != "sampled-grid"

    def nodes(self) -> np.ndarray:
        """Points where the profile may fail to be smooth, support ends included."""
        l, r = self.support
        if self.kind == "constant":
            return np.array([l, r])
        if self.kind == "piecewise-constant":
            return np.array(self.breakpoints)
        return np.linspace(l, r, len(self.samples))

    def pieces(self) -> list[tuple[float, float, float]]:
        """``(left, right, value)`` triples; only for piecewise-constant kinds."""
        if self.kind == "constant":
            return [(self.support[0], self.support[1], self.value)]
        if self.kind == "piecewise-constant":
            bp = self.breakpoints
            return [(bp[i], bp[i + 1], self.values[i]) for i in range(len(self.values))]
        raise TypeError("sampled-grid profiles have no constant pieces")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        l, r = self.support
        if self.kind == "constant":
            out = np.full(x.shape, self.value)
        elif self.kind == "piecewise-constant":
            bp = np.array(self.breakpoints)
            idx = np.clip(np.searchsorted(bp, x, side="right") - 1, 0, len(self.values) - 1)
            out = np.array(self.values)[idx]
        else:
            out = np.interp(x, np.linspace(l, r, len(self.samples)), self.samples)
        return out if out.ndim else float(out)

    def bounds(self) -> tuple[float, float]:
        if self.kind == "constant":
            return self.value, self.value
        data = self.values if self.kind == "piecewise-constant" else self.samples
        return min(data), max(data)

    def integral(self, l: float | None = None, r: float | None = None, power: int = 1) -> float:
        """Exact integral of ``profile**power`` (power is 1 or -1) over ``[l, r]``."""
        sl, sr = self.support
        l = sl if l is None else max(l, sl)
        r = sr if r is None else min(r, sr)
        if r <= l:
            return 0.0
        if self.is_piecewise_constant:
            total = 0.0
            for pl, pr, v in self.pieces():
                lo, hi = max(pl, l), min(pr, r)
                if hi > lo:
                    total += (hi - lo) * v ** power
            return total
        grid = self.nodes()
        knots = np.unique(np.concatenate([[l, r], grid[(grid > l) & (grid < r)]]))
        vals = self(knots)
        total = 0.0
        for x0, x1, f0, f1 in zip(knots, knots[1:], vals, vals[1:]):
            if power == 1:
                total += 0.5 * (f0 + f1) * (x1 - x0)
            elif abs(f1 - f0) <= 1e-14 * f0:
                total += (x1 - x0) / f0
            else:
                total += (x1 - x0) * math.log(f1 / f0) / (f1 - f0)
        return total

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "piecewise-constant":
            return {"kind": self.kind, "breakpoints": list(self.breakpoints), "values": list(self.values)}
        return {"kind": self.kind, "samples": list(self.samples)}


@dataclass(frozen=True)
class CellGeometry:
    h: float

    def __post_init__(self):
        if not (0.0 < self.h < 1.0):
            raise ValidationError(f"geometry.h must lie in (0, 1), got {self.h}")

    @property
    def soft(self) -> tuple[float, float]:
        return (0.0, self.h)

    @property
    def stiff(self) -> tuple[float, float]:
        return (self.h, 1.0)


@dataclass(frozen=True)
class DefectSpec:
    d_minus: float
    d_plus: float
    a_D: CoefficientProfile
    rho_D: CoefficientProfile

    def __post_init__(self):
        if not self.d_minus < self.d_plus:
            raise ValidationError(f"defect needs d_minus < d_plus, got ({self.d_minus}, {self.d_plus})")
        for name, prof in (("a_D", self.a_D), ("rho_D", self.rho_D)):
            if (abs(prof.support[0] - self.d_minus) > _SUPPORT_TOL
                    or abs(prof.support[1] - self.d_plus) > _SUPPORT_TOL):
                raise ValidationError(f"defect.{name} support {prof.support} does not match D")

    @property
    def length(self) -> float:
        return self.d_plus - self.d_minus


@dataclass(frozen=True)
class MediumSpec:
    geometry: CellGeometry
    a0: CoefficientProfile
    a1: CoefficientProfile
    rho0: CoefficientProfile
    rho1: CoefficientProfile
    epsilon: float
    defect: DefectSpec | None = None

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValidationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        g = self.geometry
        for name, prof, supp in (("a0", self.a0, g.soft), ("rho0", self.rho0, g.soft),
                                 ("a1", self.a1, g.stiff), ("rho1", self.rho1, g.stiff)):
            if abs(prof.support[0] - supp[0]) > _SUPPORT_TOL or abs(prof.support[1] - supp[1]) > _SUPPORT_TOL:
                raise ValidationError(f"coefficients.{name} support {prof.support} does not match {supp}")

    @property
    def h(self) -> float:
        return self.geometry.h

    @property
    def stiff_mass(self) -> float:
        """Integral of rho1 over the stiff part of the cell."""
        return self.rho1.integral()

    def with_epsilon(self, epsilon: float) -> "MediumSpec":
        return MediumSpec(self.geometry, self.a0, self.a1, self.rho0, self.rho1, float(epsilon), self.defect)

    def without_defect(self) -> "MediumSpec":
        return MediumSpec(self.geometry, self.a0, self.a1, self.rho0, self.rho1, self.epsilon, None)


def _number(raw: Mapping, key: str, path: str) -> float:
    if key not in raw:
        raise ConfigError(f"{path}{key}", "missing")
    val = raw[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}{key}", f"expected a number, got {val!r}")
    return float(val)


def _profile(raw: Any, path: str, support: tuple[float, float]) -> CoefficientProfile:
    if not isinstance(raw, Mapping):
        raise ConfigError(path, "expected a mapping with a 'kind' key")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"{path}.kind", f"expected one of {KINDS}, got {kind!r}")
    if kind == "constant":
        return CoefficientProfile.constant(_number(raw, "value", path + "."), support)
    if kind == "piecewise-constant":
        for key in ("breakpoints", "values"):
            if not isinstance(raw.get(key), list):
                raise ConfigError(f"{path}.{key}", "expected a list of numbers")
        bp, vals = raw["breakpoints"], raw["values"]
        if len(bp) != len(vals) + 1:
            raise ConfigError(f"{path}.breakpoints", "need exactly one more breakpoint than values")
        return CoefficientProfile("piecewise-constant", support,
                                  breakpoints=tuple(float(b) for b in bp),
                                  values=tuple(float(v) for v in vals))
    if not isinstance(raw.get("samples"), list):
        raise ConfigError(f"{path}.samples", "expected a list of numbers")
    return CoefficientProfile.sampled(raw["samples"], support)


def medium_from_dict(raw: Mapping) -> MediumSpec:
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>", "expected a mapping")
    geo = raw.get("geometry")
    if not isinstance(geo, Mapping):
        raise ConfigError("geometry", "missing or not a mapping")
    geometry = CellGeometry(_number(geo, "h", "geometry."))
    coeffs = raw.get("coefficients")
    if not isinstance(coeffs, Mapping):
        raise ConfigError("coefficients", "missing or not a mapping")
    profs = {}
    for name, supp in (("a0", geometry.soft), ("a1", geometry.stiff),
                       ("rho0", geometry.soft), ("rho1", geometry.stiff)):
        if name not in coeffs:
            raise ConfigError(f"coefficients.{name}", "missing")
        profs[name] = _profile(coeffs[name], f"coefficients.{name}", supp)
    defect = None
    if raw.get("defect") is not None:
        d = raw["defect"]
        if not isinstance(d, Mapping):
            raise ConfigError("defect", "expected a mapping")
        dm, dp = _number(d, "d_minus", "defect."), _number(d, "d_plus", "defect.")
        if not dm < dp:
            raise ValidationError(f"defect needs d_minus < d_plus, got ({dm}, {dp})")
        for key in ("a_D", "rho_D"):
            if key not in d:
                raise ConfigError(f"defect.{key}", "missing")
        defect = DefectSpec(dm, dp, _profile(d["a_D"], "defect.a_D", (dm, dp)),
                            _profile(d["rho_D"], "defect.rho_D", (dm, dp)))
    return MediumSpec(geometry, profs["a0"], profs["a1"], profs["rho0"], profs["rho1"],
                      _number(raw, "epsilon", ""), defect)


def parse_medium(config_text: str) -> MediumSpec:
    """Parse a YAML (or JSON) medium description and validate it."""
    try:
        raw = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"not valid YAML: {exc}") from exc
    return medium_from_dict(raw)


def load_medium(path, overrides: Mapping[str, str] | None = None) -> MediumSpec:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return medium_from_dict(raw)


def apply_overrides(raw: Mapping, overrides: Mapping[str, str]) -> dict:
    """Set dotted leaves, e.g. ``{"defect.d_plus": "0.8"}``; values parse as YAML scalars."""
    out = copy.deepcopy(dict(raw))
    for key, text in overrides.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(text) if isinstance(text, str) else text
    return out


def medium_to_dict(spec: MediumSpec) -> dict[str, Any]:
    out: dict[str, Any] = {
        "geometry": {"h": spec.h},
        "epsilon": spec.epsilon,
        "coefficients": {name: getattr(spec, name).to_dict() for name in ("a0", "a1", "rho0", "rho1")},
    }
    if spec.defect is not None:
        d = spec.defect
        out["defect"] = {"d_minus": d.d_minus, "d_plus": d.d_plus,
                         "a_D": d.a_D.to_dict(), "rho_D": d.rho_D.to_dict()}
    return out


def dump_medium(spec: MediumSpec) -> str:
    return yaml.safe_dump(medium_to_dict(spec), sort_keys=False)


def evaluate_eps_coefficients(spec: MediumSpec, x):
    """Return ``(a_eps(x), rho_eps(x))``; vectorised over ``x``."""
    x = np.asarray(x, dtype=float)
    eps, h = spec.epsilon, spec.h
    y = x / eps
    y = y - np.floor(y)
    soft = y < h
    a = np.where(soft, eps ** 2 * spec.a0(np.minimum(y, h)), spec.a1(np.maximum(y, h)))
    rho = np.where(soft, spec.rho0(np.minimum(y, h)), spec.rho1(np.maximum(y, h)))
    if spec.defect is not None:
        d = spec.defect
        inside = (x >= d.d_minus) & (x < d.d_plus)
        xc = np.clip(x, d.d_minus, d.d_plus)
        a = np.where(inside, d.a_D(xc), a)
        rho = np.where(inside, d.rho_D(xc), rho)
    if a.ndim == 0:
        return float(a), float(rho)
    return a, rho
