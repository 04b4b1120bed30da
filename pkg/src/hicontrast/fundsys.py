"""Fundamental systems and transfer matrices for -(a u')' = lam * rho * u.

States are pairs ``(u, a u')``; the co-derivative ``a u'`` is continuous across
coefficient jumps, so propagators over adjacent intervals simply multiply.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .model import CoefficientProfile, MediumSpec

__all__ = [
    "IntegrationError",
    "PropagatorMatrix",
    "TransferMatrix",
    "DEFAULT_TOL",
    "constant_piece",
    "propagate",
    "propagate_many",
    "fundamental_states",
    "transfer_matrix",
    "physical_cell_matrix",
    "floquet_roots",
    "limit_discriminant",
    "limit_discriminant_many",
    "limit_cell_matrix",
]

DEFAULT_TOL = 1e-10


class IntegrationError(RuntimeError):
    def __init__(self, location: float, message: str):
        super().__init__(f"integration failed near y={location:.17g}: {message}")
        self.location = location


@dataclass(frozen=True)
class PropagatorMatrix:
    """Columns are ``(v_j, a v_j')`` at ``interval[1]`` for identity data at ``interval[0]``."""

    entries: np.ndarray
    interval: tuple[float, float]
    lam: float
    weight_pair: tuple[str, str] = ("a", "rho")

    @property
    def det(self) -> float:
        m = self.entries
        return m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]


@dataclass(frozen=True)
class TransferMatrix:
    """One-period map of the fundamental-system coefficients at finite period."""

    entries: np.ndarray
    h_eps: float
    mu1: complex | float
    mu2: complex | float
    epsilon: float
    lam: float

    @property
    def det(self) -> float:
        m = self.entries
        return m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]

    @property
    def in_gap(self) -> bool:
        return abs(self.h_eps) > 2.0


def constant_piece(a: float, rho: float, lam, length):
    """Exact propagator of a constant-coefficient piece; broadcasts over lam/length.

    Returns an array of shape ``broadcast(lam, length).shape + (2, 2)``.
    """
    lam = np.asarray(lam, dtype=float)
    length = np.asarray(length, dtype=float)
    k2 = lam * rho / a
    k = np.sqrt(np.abs(k2))
    kl = k * length
    pos = k2 >= 0
    with np.errstate(over="ignore", invalid="ignore"):
        c = np.where(pos, np.cos(kl), np.cosh(kl))
        # s = sin(kL)/k (or sinh(kL)/k), well defined as k -> 0
        s_trig = length * np.sinc(kl / np.pi)
        s_hyp = np.where(kl > 1e-8, np.sinh(kl) / np.where(k > 0, k, 1.0), length)
    s = np.where(pos, s_trig, s_hyp)
    out = np.empty(np.broadcast(lam, length).shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = s / a
    out[..., 1, 0] = -lam * rho * s
    out[..., 1, 1] = c
    return out


def _breaks(a: CoefficientProfile, rho: CoefficientProfile, l: float, r: float) -> np.ndarray:
    pts = np.concatenate([a.nodes(), rho.nodes()])
    inner = pts[(pts > l) & (pts < r)]
    return np.unique(np.concatenate([[l, r], inner]))


def _rk_segment(a, rho, lam, l, r, tol, dense=False):
    """Integrate the 2x2 fundamental matrix across ``[l, r]``, a segment on which both profiles are linear."""
    a_l, a_r, r_l, r_r = a(l), a(r), rho(l), rho(r)
    width = r - l

    def rhs(x, s):
        t = (x - l) / width
        inv_a = 1.0 / (a_l + t * (a_r - a_l))
        q = -lam * (r_l + t * (r_r - r_l))
        return np.array([s[2] * inv_a, s[3] * inv_a, q * s[0], q * s[1]])

    # local error control one decade tighter so the accumulated error stays within tol
    sol = solve_ivp(rhs, (l, r), np.eye(2).ravel(), method="RK45", rtol=tol / 10, atol=tol / 10,
                    dense_output=dense)
    if not sol.success:
        where = float(sol.t[-1]) if len(sol.t) else l
        raise IntegrationError(where, sol.message)
    return sol


def _matrix(a, rho, lam: float, l: float, r: float, tol: float) -> np.ndarray:
    m = np.eye(2)
    if r <= l:
        return m
    knots = _breaks(a, rho, l, r)
    if a.is_piecewise_constant and rho.is_piecewise_constant:
        for x0, x1 in zip(knots, knots[1:]):
            mid = 0.5 * (x0 + x1)
            m = constant_piece(a(mid), rho(mid), lam, x1 - x0) @ m
        return m
    for x0, x1 in zip(knots, knots[1:]):
        m = _rk_segment(a, rho, lam, x0, x1, tol).y[:, -1].reshape(2, 2) @ m
    return m


def propagate(a: CoefficientProfile, rho: CoefficientProfile, lam: float,
              interval: tuple[float, float] | None = None, tol: float = DEFAULT_TOL) -> PropagatorMatrix:
    """Propagator of ``(u, a u')`` across ``interval`` (defaults to the support of ``a``)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    l, r = interval if interval is not None else a.support
    return PropagatorMatrix(_matrix(a, rho, float(lam), float(l), float(r), tol), (float(l), float(r)), float(lam))


def propagate_many(a: CoefficientProfile, rho: CoefficientProfile, lams,
                   interval: tuple[float, float] | None = None, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Propagators for an array of spectral parameters, shape ``(n, 2, 2)``."""
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    l, r = interval if interval is not None else a.support
    if not (a.is_piecewise_constant and rho.is_piecewise_constant):
        return np.array([_matrix(a, rho, lam, l, r, tol) for lam in lams])
    out = np.broadcast_to(np.eye(2), lams.shape + (2, 2)).copy()
    knots = _breaks(a, rho, l, r)
    for x0, x1 in zip(knots, knots[1:]):
        mid = 0.5 * (x0 + x1)
        out = constant_piece(a(mid), rho(mid), lams, x1 - x0) @ out
    return out


def fundamental_states(a: CoefficientProfile, rho: CoefficientProfile, lam: float, start: float,
                       points, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Fundamental matrices at each of ``points`` (all >= start), shape ``(n, 2, 2)``."""
    points = np.asarray(points, dtype=float)
    order = np.argsort(points)
    pts = points[order]
    if len(pts) and pts[0] < start - 1e-14:
        raise ValueError("points must not precede the start of propagation")
    out = np.empty((len(pts), 2, 2))
    if len(pts) == 0:
        return out
    knots = _breaks(a, rho, start, max(pts[-1], start))
    base = np.eye(2)
    pc = a.is_piecewise_constant and rho.is_piecewise_constant
    for x0, x1 in zip(knots, knots[1:]):
        sel = (pts >= x0) & ((pts < x1) | (x1 == knots[-1]))
        if pc:
            mid = 0.5 * (x0 + x1)
            av, rv = a(mid), rho(mid)
            if sel.any():
                out[sel] = constant_piece(av, rv, lam, pts[sel] - x0) @ base
            base = constant_piece(av, rv, lam, x1 - x0) @ base
        else:
            sol = _rk_segment(a, rho, lam, x0, x1, tol, dense=True)
            if sel.any():
                out[sel] = sol.sol(pts[sel]).T.reshape(-1, 2, 2) @ base
            base = sol.y[:, -1].reshape(2, 2) @ base
    # points exactly at start
    out[pts <= knots[0]] = np.eye(2)
    result = np.empty_like(out)
    result[order] = out
    return result


def floquet_roots(trace: float) -> tuple[complex | float, complex | float]:
    """Roots of mu**2 - trace*mu + 1, small-modulus root first when real."""
    if abs(trace) > 2.0:
        # the large root has no cancellation; the small one follows from mu1 * mu2 = 1
        large = (trace + math.copysign(math.sqrt(trace * trace - 4.0), trace)) / 2.0
        return 1.0 / large, large
    im = math.sqrt(max(4.0 - trace * trace, 0.0))
    return complex(trace / 2.0, -im / 2.0), complex(trace / 2.0, im / 2.0)


def _cell_pieces(spec: MediumSpec, lam, tol):
    p0 = propagate_many(spec.a0, spec.rho0, lam, spec.geometry.soft, tol)
    p1 = propagate_many(spec.a1, spec.rho1, np.asarray(lam) * spec.epsilon ** 2, spec.geometry.stiff, tol)
    return p0, p1


def _assemble_m(p0, p1, eps):
    """Entries of M_eps built from v_j (soft) and w_j (stiff) exactly as the one-period recurrence."""
    v1, v2 = p0[..., 0, 0], p0[..., 0, 1]
    av1, av2 = p0[..., 1, 0], p0[..., 1, 1]
    w1, w2 = p1[..., 0, 0], p1[..., 0, 1]
    aw1, aw2 = p1[..., 1, 0], p1[..., 1, 1]
    e2 = eps * eps
    m = np.empty(np.shape(v1) + (2, 2))
    m[..., 0, 0] = v1 * w1 + e2 * av1 * w2
    m[..., 0, 1] = v2 * w1 + e2 * av2 * w2
    m[..., 1, 0] = v1 * aw1 / e2 + av1 * aw2
    m[..., 1, 1] = v2 * aw1 / e2 + av2 * aw2
    return m


def transfer_matrix(spec: MediumSpec, lam: float, tol: float = DEFAULT_TOL) -> TransferMatrix:
    """One-period transfer matrix at period ``spec.epsilon`` in cell-scaled variables."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    p0, p1 = _cell_pieces(spec, np.array([lam]), tol)
    m = _assemble_m(p0, p1, spec.epsilon)[0]
    h_eps = float(m[0, 0] + m[1, 1])
    mu1, mu2 = floquet_roots(h_eps)
    return TransferMatrix(m, h_eps, mu1, mu2, spec.epsilon, float(lam))


def transfer_trace_many(spec: MediumSpec, lams, tol: float = DEFAULT_TOL) -> np.ndarray:
    p0, p1 = _cell_pieces(spec, np.atleast_1d(lams), tol)
    m = _assemble_m(p0, p1, spec.epsilon)
    return m[..., 0, 0] + m[..., 1, 1]


def physical_cell_matrix(spec: MediumSpec, lam: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """One-period map of ``(u, a_eps u_x)`` in physical coordinates, from eps*z to eps*(z+1)."""
    m = transfer_matrix(spec, lam, tol).entries
    eps = spec.epsilon
    return np.diag([1.0, eps]) @ m @ np.diag([1.0, 1.0 / eps])


def limit_discriminant(spec: MediumSpec, lam: float, tol: float = DEFAULT_TOL) -> float:
    """D(lam) = v1(h) + (a0 v2')(h) - lam v2(h) * int_{Y1} rho1."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    p = propagate(spec.a0, spec.rho0, lam, spec.geometry.soft, tol).entries
    return float(p[0, 0] + p[1, 1] - lam * p[0, 1] * spec.stiff_mass)


def limit_discriminant_many(spec: MediumSpec, lams, tol: float = DEFAULT_TOL) -> np.ndarray:
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    p = propagate_many(spec.a0, spec.rho0, lams, spec.geometry.soft, tol)
    return p[:, 0, 0] + p[:, 1, 1] - lams * p[:, 0, 1] * spec.stiff_mass


def limit_cell_matrix(spec: MediumSpec, lam: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Recurrence matrix for the coefficients (l_z, m_z) of the limit exterior solution."""
    p = propagate(spec.a0, spec.rho0, lam, spec.geometry.soft, tol).entries
    jump = np.array([[1.0, 0.0], [-lam * spec.stiff_mass, 1.0]])
    return jump @ p
