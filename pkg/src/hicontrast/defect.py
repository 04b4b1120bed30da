"""Defect modes of the high-contrast medium.

Physical coordinates ``x`` are used throughout.  A state is the pair
``(u, a_eps u')``; it is continuous across every interface, so propagation over
a window is a product of per-piece propagators.  Soft and stiff pieces are
propagated in the cell variable ``y = x / eps`` and converted back.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fundsys import (
    DEFAULT_TOL,
    floquet_roots,
    fundamental_states,
    limit_cell_matrix,
    limit_discriminant,
    physical_cell_matrix,
    propagate,
    transfer_trace_many,
)
from .model import DefectSpec, MediumSpec, evaluate_eps_coefficients
from .spectrum import BandStructure, bands_from_discriminant, bisect

__all__ = [
    "NotInGapError",
    "RangeError",
    "NeumannMode",
    "DefectModeResult",
    "DecompositionDiagnostic",
    "ApproximateEigenfunction",
    "lattice_floor",
    "lattice_ceil",
    "eps_propagator",
    "eps_states",
    "finite_eps_bands",
    "neumann_modes",
    "gap_filter",
    "matching_determinant",
    "defect_eigenvalues",
    "decay_exponent",
    "approximate_eigenfunction",
    "decomposition_diagnostic",
    "quadrature",
    "l2_norm",
]

log = logging.getLogger(__name__)

_SNAP = 1e-9
_GAUSS_N = 16
_GX, _GW = np.polynomial.legendre.leggauss(_GAUSS_N)


class NotInGapError(ValueError):
    pass


class RangeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# lattice bookkeeping and propagation in physical coordinates


def lattice_floor(c: float, eps: float) -> int:
    """Largest integer ``z`` with ``eps * z <= c`` (lattice points within 1e-9 cells snap)."""
    q = c / eps
    r = round(q)
    return int(r) if abs(q - r) < _SNAP else math.floor(q)


def lattice_ceil(c: float, eps: float) -> int:
    """Smallest integer ``z`` with ``c <= eps * z``."""
    q = c / eps
    r = round(q)
    return int(r) if abs(q - r) < _SNAP else math.ceil(q)


def _snap_local(t: float) -> float:
    r = round(t)
    return float(r) if abs(t - r) < _SNAP else t


@dataclass(frozen=True)
class _Piece:
    left: float
    right: float
    kind: str  # "D", "soft" or "stiff"
    cell: int


def _pieces(spec: MediumSpec, x0: float, x1: float) -> list[_Piece]:
    """Partition of ``[x0, x1]`` into intervals of a single coefficient regime."""
    eps, h = spec.epsilon, spec.h
    if x1 <= x0:
        return []
    z0, z1 = lattice_floor(x0, eps) - 1, lattice_ceil(x1, eps) + 1
    zs = np.arange(z0, z1 + 1)
    soft_knots = np.unique(np.concatenate([spec.a0.nodes(), spec.rho0.nodes()]))
    stiff_knots = np.unique(np.concatenate([spec.a1.nodes(), spec.rho1.nodes()]))
    local = np.unique(np.concatenate([soft_knots, stiff_knots, [0.0, h, 1.0]]))
    breaks = [(eps * (zs[:, None] + local[None, :])).ravel()]
    d = spec.defect
    if d is not None:
        dk = np.unique(np.concatenate([d.a_D.nodes(), d.rho_D.nodes()]))
        breaks.append(dk)
    pts = np.concatenate(breaks)
    if d is not None:
        # lattice points inside D are irrelevant; drop them but keep the defect knots
        inside = (pts > d.d_minus) & (pts < d.d_plus)
        keep = ~inside | np.isin(pts, breaks[-1])
        pts = pts[keep]
    pts = pts[(pts > x0) & (pts < x1)]
    pts = np.unique(np.concatenate([[x0, x1], pts]))
    # merge points closer than rounding noise
    span = max(abs(x0), abs(x1), 1.0)
    keep = np.r_[True, np.diff(pts) > 1e-13 * span]
    pts = pts[keep]
    pts[-1] = x1
    out = []
    for l, r in zip(pts, pts[1:]):
        mid = 0.5 * (l + r)
        if d is not None and d.d_minus <= mid < d.d_plus:
            out.append(_Piece(l, r, "D", 0))
            continue
        y = mid / eps
        z = math.floor(y)
        out.append(_Piece(l, r, "soft" if y - z < h else "stiff", z))
    return out


def _piece_states(spec: MediumSpec, lam: float, piece: _Piece, pts, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Propagators from ``piece.left`` to each of ``pts`` inside the piece, shape ``(n, 2, 2)``."""
    pts = np.asarray(pts, dtype=float)
    if piece.kind == "D":
        d = spec.defect
        return fundamental_states(d.a_D, d.rho_D, lam, piece.left, np.clip(pts, piece.left, piece.right), tol)
    eps, h = spec.epsilon, spec.h
    z = piece.cell
    if piece.kind == "soft":
        lo, hi = 0.0, h
        a, rho, lam_y = spec.a0, spec.rho0, lam
        scale = eps
    else:
        lo, hi = h, 1.0
        a, rho, lam_y = spec.a1, spec.rho1, eps * eps * lam
        scale = 1.0 / eps
    y0 = min(max(piece.left / eps - z, lo), hi)
    ys = np.clip(pts / eps - z, y0, hi)
    m = fundamental_states(a, rho, lam_y, y0, ys, tol)
    # (u, F_x) = diag(1, scale) (u, F_y)
    m[:, 0, 1] /= scale
    m[:, 1, 0] *= scale
    return m


def eps_propagator(spec: MediumSpec, lam: float, x0: float, x1: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Propagator of ``(u, a_eps u')`` from ``x0`` to ``x1 >= x0`` in the finite-period medium."""
    m = np.eye(2)
    for p in _pieces(spec, x0, x1):
        m = _piece_states(spec, lam, p, [p.right], tol)[0] @ m
    return m


def eps_states(spec: MediumSpec, lam: float, x0: float, state0, pts) -> np.ndarray:
    """States ``(u, a_eps u')`` at ``pts`` (all ``>= x0``) of the solution with data ``state0`` at ``x0``."""
    pts = np.asarray(pts, dtype=float)
    order = np.argsort(pts)
    sp_ = pts[order]
    out = np.empty((len(pts), 2), dtype=np.result_type(np.asarray(state0), float))
    if len(pts) == 0:
        return out
    s = np.asarray(state0)
    filled = np.zeros(len(pts), dtype=bool)
    for p in _pieces(spec, x0, max(sp_[-1], x0)):
        sel = (sp_ >= p.left) & (sp_ <= p.right) & ~filled
        if sel.any():
            out[order[sel]] = _piece_states(spec, lam, p, sp_[sel]) @ s
            filled |= sel
        s = _piece_states(spec, lam, p, [p.right])[0] @ s
    out[order[~filled]] = np.asarray(state0)
    return out


def quadrature(spec: MediumSpec, x0: float, x1: float):
    """Composite Gauss-Legendre nodes and weights on ``[x0, x1]``, exact piece boundaries."""
    xs, ws = [], []
    for p in _pieces(spec, x0, x1):
        half = 0.5 * (p.right - p.left)
        xs.append(p.left + half * (_GX + 1.0))
        ws.append(half * _GW)
    if not xs:
        return np.empty(0), np.empty(0)
    return np.concatenate(xs), np.concatenate(ws)


def l2_norm(values, weights, rho=None) -> float:
    w = weights if rho is None else weights * rho
    return float(np.sqrt(np.sum(w * np.abs(values) ** 2)))


# ---------------------------------------------------------------------------
# limit Neumann problem on the defect


@dataclass(frozen=True)
class NeumannMode:
    lambda0: float
    index: int
    defect: DefectSpec = field(repr=False)
    scale: float = field(default=1.0, repr=False)
    gap_index: int | None = None
    edge_distance: float | None = None

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """``(u0, a_D u0')`` at points of ``[d_minus, d_plus]``."""
        d = self.defect
        x = np.clip(np.asarray(x, dtype=float), d.d_minus, d.d_plus)
        st = fundamental_states(d.a_D, d.rho_D, self.lambda0, d.d_minus, x)
        return self.scale * st[:, 0, 0], self.scale * st[:, 1, 0]

    def sample(self, n: int = 201) -> tuple[np.ndarray, np.ndarray]:
        d = self.defect
        x = np.linspace(d.d_minus, d.d_plus, n)
        return x, self.evaluate(x)[0]

    @property
    def boundary_flux(self) -> tuple[float, float]:
        _, f = self.evaluate([self.defect.d_minus, self.defect.d_plus])
        return float(f[0]), float(f[1])


def _defect_quadrature(d: DefectSpec, n_sub: int = 8):
    knots = np.unique(np.concatenate([d.a_D.nodes(), d.rho_D.nodes()]))
    xs, ws = [], []
    for l, r in zip(knots, knots[1:]):
        edges = np.linspace(l, r, n_sub + 1)
        for a, b in zip(edges, edges[1:]):
            half = 0.5 * (b - a)
            xs.append(a + half * (_GX + 1.0))
            ws.append(half * _GW)
    return np.concatenate(xs), np.concatenate(ws)


def _sign_changes(u) -> int:
    s = np.sign(u[np.abs(u) > 1e-12 * np.max(np.abs(u))])
    return int(np.sum(s[1:] != s[:-1]))


def neumann_modes(defect: DefectSpec, n_max: int, shoot_tol: float = 1e-12,
                  tol: float = DEFAULT_TOL) -> list[NeumannMode]:
    """Lowest ``n_max`` eigenpairs of the weighted Neumann problem on the defect.

    Eigenvalues are the roots of ``F(lam) = (a_D u')(d_plus)`` for the solution with
    ``(u, a_D u')(d_minus) = (1, 0)``.  The k-th mode (0-based) must have exactly k sign
    changes; a violation means two roots shared a grid cell and triggers refinement.
    """
    if n_max < 1:
        return []
    lo, hi = defect.d_minus, defect.d_plus
    travel = defect.a_D.integral(lo, hi, power=-1) ** 0.5 * defect.rho_D.integral(lo, hi) ** 0.5
    lam_hi = ((n_max + 1) * math.pi / travel) ** 2 * max(defect.rho_D.bounds()[1] / defect.rho_D.bounds()[0], 1.0) \
        * max(defect.a_D.bounds()[1] / defect.a_D.bounds()[0], 1.0)
    flux = lambda lam: propagate(defect.a_D, defect.rho_D, lam, (lo, hi), tol).entries[1, 0]
    xq, wq = _defect_quadrature(defect)
    rq = defect.rho_D(xq)
    n_grid = 64 * (n_max + 1)
    for attempt in range(6):
        grid = np.linspace(0.0, lam_hi, n_grid + 1)[1:]
        vals = np.array([flux(l) for l in grid])
        roots = [0.0]
        for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
            roots.append(bisect(flux, grid[i], grid[i + 1], shoot_tol, flo=vals[i]))
        roots = roots[:n_max]
        ok = len(roots) == n_max
        modes = []
        for k, lam in enumerate(roots):
            st = fundamental_states(defect.a_D, defect.rho_D, lam, lo, xq)
            u = st[:, 0, 0]
            if _sign_changes(u) != k:
                ok = False
                break
            norm = math.sqrt(float(np.sum(wq * rq * u * u)))
            modes.append(NeumannMode(float(lam), k, defect, 1.0 / norm))
        if ok:
            return modes
        log.warning("Neumann root scan missed a root (attempt %d); refining grid and range", attempt + 1)
        n_grid *= 4
        lam_hi *= 2.0
    raise RuntimeError(f"could not resolve {n_max} Neumann modes up to lambda={lam_hi:.6g}")


def gap_filter(modes, bands: BandStructure) -> list[NeumannMode]:
    """Modes with eigenvalue in an open gap of ``bands``, annotated with gap index and edge distance."""
    out = []
    for mode in modes:
        if not 0.0 <= mode.lambda0 <= bands.lambda_range[1]:
            raise RangeError(f"mode lambda0={mode.lambda0} outside the computed range {bands.lambda_range}")
        kind, idx = bands.locate(mode.lambda0)
        if kind == "gap" and idx <= len(bands.gaps) and bands.gaps[idx - 1][1] < bands.lambda_range[1]:
            out.append(replace(mode, gap_index=idx, edge_distance=bands.edge_distance(mode.lambda0)))
        elif kind == "gap":
            # last gap reaches lambda_max: its upper edge is unknown, still a gap point
            out.append(replace(mode, gap_index=idx, edge_distance=mode.lambda0 - bands.gaps[idx - 1][0]))
    return out


# ---------------------------------------------------------------------------
# finite-eps defect eigenvalues by matching decaying Floquet solutions


def finite_eps_bands(spec: MediumSpec, lambda_max: float = 200.0, grid_n: int = 20_000,
                     root_tol: float = 1e-12) -> BandStructure:
    """Bands of the periodic medium at period ``spec.epsilon`` from the transfer-matrix trace."""
    return bands_from_discriminant(lambda x: transfer_trace_many(spec, x),
                                   lambda x: float(transfer_trace_many(spec, [x])[0]),
                                   lambda_max, grid_n, root_tol)


def _eigvec(t: np.ndarray, mu: float) -> np.ndarray:
    a, b, c, d = t[0, 0], t[0, 1], t[1, 0], t[1, 1]
    v1 = np.array([b, mu - a])
    v2 = np.array([mu - d, c])
    v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class _Matching:
    lam: float
    x_left: float
    x_right: float
    cell: np.ndarray
    window: np.ndarray
    mu1: float
    mu2: float
    kappa1: np.ndarray
    kappa2: np.ndarray


def _matching(spec: MediumSpec, lam: float, tol: float = DEFAULT_TOL) -> _Matching:
    if spec.defect is None:
        raise ValueError("medium has no defect")
    eps = spec.epsilon
    cell = physical_cell_matrix(spec, lam, tol)
    tr = float(np.trace(cell))
    if abs(tr) <= 2.0:
        raise NotInGapError(f"lambda={lam} is not in a gap at eps={eps} (trace {tr:.12g})")
    if abs(tr) - 2.0 < tol:
        log.warning("lambda=%g within %.2e of a band edge; Floquet eigenvectors are ill-conditioned",
                    lam, abs(tr) - 2.0)
    mu1, mu2 = floquet_roots(tr)
    d = spec.defect
    x_left = eps * lattice_floor(d.d_minus, eps)
    x_right = eps * lattice_ceil(d.d_plus, eps)
    window = eps_propagator(spec, lam, x_left, x_right, tol)
    return _Matching(lam, x_left, x_right, cell, window, mu1, mu2, _eigvec(cell, mu1), _eigvec(cell, mu2))


def matching_determinant(spec: MediumSpec, lam: float, tol: float = DEFAULT_TOL,
                         kappa_scale: tuple[float, float] = (1.0, 1.0)) -> float:
    """Wronskian-type determinant whose zeros in a gap are the defect eigenvalues.

    ``det[T_D xi_minus | xi_plus]`` where ``xi_plus`` / ``xi_minus`` are the boundary
    states at ``d_plus`` / ``d_minus`` of the right- / left-decaying Floquet solutions and
    ``T_D`` transports across the defect.  The eigenvectors are unit vectors times
    ``kappa_scale``; the value is divided by ``det[kappa2 | kappa1]`` so that it does not
    depend on how the eigenvectors are oriented.
    """
    m = _matching(spec, lam, tol)
    d = spec.defect
    k1 = kappa_scale[0] * m.kappa1
    k2 = kappa_scale[1] * m.kappa2
    to_dm = eps_propagator(spec, lam, m.x_left, d.d_minus, tol)
    across = eps_propagator(spec, lam, d.d_minus, d.d_plus, tol)
    to_right = eps_propagator(spec, lam, d.d_plus, m.x_right, tol)
    xi_minus = to_dm @ k2
    xi_plus = np.linalg.solve(to_right, k1)
    left = across @ xi_minus
    det = left[0] * xi_plus[1] - left[1] * xi_plus[0]
    ref = m.kappa2[0] * m.kappa1[1] - m.kappa2[1] * m.kappa1[0]
    return float(det / ref)


@dataclass
class DefectModeResult:
    lambda_eps: float
    x: np.ndarray = field(repr=False)
    u_eps: np.ndarray = field(repr=False)
    mu1_eps: float = 0.0
    period_ratios: list = field(default_factory=list)
    nu_max: float = 0.0
    gap_index: int = 0
    spec: MediumSpec | None = field(default=None, repr=False)
    left_ratios: list = field(default_factory=list)
    x_left: float = 0.0
    x_right: float = 0.0
    state_left: np.ndarray = field(default=None, repr=False)
    state_right: np.ndarray = field(default=None, repr=False)

    def evaluate(self, pts) -> np.ndarray:
        """States ``(u, a_eps u')`` of the normalised eigenfunction at arbitrary points."""
        spec, eps = self.spec, self.spec.epsilon
        pts = np.asarray(pts, dtype=float)
        out = np.empty((len(pts), 2))
        mid = (pts >= self.x_left) & (pts <= self.x_right)
        if mid.any():
            out[mid] = eps_states(spec, self.lambda_eps, self.x_left, self.state_left, pts[mid])
        right = pts > self.x_right
        if right.any():
            n = np.floor((pts[right] - self.x_right) / eps).astype(int)
            vals = np.empty((right.sum(), 2))
            for k in np.unique(n):
                sel = n == k
                start = self.x_right + k * eps
                vals[sel] = eps_states(spec, self.lambda_eps, start, self.mu1_eps ** k * self.state_right,
                                       pts[right][sel])
            out[right] = vals
        left = pts < self.x_left
        if left.any():
            n = np.ceil((self.x_left - pts[left]) / eps).astype(int)
            vals = np.empty((left.sum(), 2))
            for k in np.unique(n):
                sel = n == k
                start = self.x_left - k * eps
                vals[sel] = eps_states(spec, self.lambda_eps, start, self.mu1_eps ** k * self.state_left,
                                       pts[left][sel])
            out[left] = vals
        return out

    def cell_masses(self, side: str, n: int) -> np.ndarray:
        """Unweighted L2 mass of ``u`` on the first ``n`` periods beyond the matching window."""
        eps = self.spec.epsilon
        out = np.empty(n)
        for k in range(n):
            if side == "right":
                a = self.x_right + k * eps
            else:
                a = self.x_left - (k + 1) * eps
            xq, wq = quadrature(self.spec, a, a + eps)
            out[k] = np.sum(wq * self.evaluate(xq)[:, 0] ** 2)
        return out

    def tail_cells(self, decay: float = 1e-13) -> int:
        """Number of periods after which the amplitude has dropped by ``decay``."""
        return max(8, int(math.ceil(math.log(decay) / math.log(abs(self.mu1_eps)))) + 1)

    def mass_beyond(self, distance: float) -> float:
        """Unweighted L2 mass of ``u`` at distance greater than ``distance`` from the defect."""
        d = self.spec.defect
        eps = self.spec.epsilon
        n = self.tail_cells()
        total = 0.0
        q = self.mu1_eps ** 2
        for a, b, end_state in ((d.d_plus + distance, self.x_right + n * eps, "right"),
                                (self.x_left - n * eps, d.d_minus - distance, "left")):
            if b > a:
                xq, wq = quadrature(self.spec, a, b)
                total += float(np.sum(wq * self.evaluate(xq)[:, 0] ** 2))
            # exact geometric remainder beyond the explicit window
            last = self.cell_masses(end_state, n)[-1]
            total += last * q / (1.0 - q)
        return total


def _assemble(spec: MediumSpec, lam: float, gap_index: int, n_periods: int = 8,
              samples_per_piece: int = 6) -> DefectModeResult:
    m = _matching(spec, lam)
    eps = spec.epsilon
    s_left = m.kappa2.copy()
    s_mid = m.window @ s_left
    # decaying component at the right lattice point
    p1 = (m.cell - m.mu2 * np.eye(2)) / (m.mu1 - m.mu2)
    s_right = p1 @ s_mid
    res = DefectModeResult(lam, np.empty(0), np.empty(0), m.mu1, [], 0.0, gap_index, spec,
                           x_left=m.x_left, x_right=m.x_right, state_left=s_left, state_right=s_right)
    n_tail = res.tail_cells()
    # total mass: window + explicit cells + geometric remainders
    xq, wq = quadrature(spec, m.x_left, m.x_right)
    mass = float(np.sum(wq * res.evaluate(xq)[:, 0] ** 2))
    q = m.mu1 ** 2
    for side in ("right", "left"):
        cm = res.cell_masses(side, n_tail)
        mass += float(cm.sum()) + cm[-1] * q / (1.0 - q)
    scale = 1.0 / math.sqrt(mass)
    # fix the sign so that the eigenfunction is positive where it is largest on D
    d = spec.defect
    xd = np.linspace(d.d_minus, d.d_plus, 201)
    ud = res.evaluate(xd)[:, 0]
    if ud[np.argmax(np.abs(ud))] < 0:
        scale = -scale
    res.state_left = scale * s_left
    res.state_right = scale * s_right
    right = res.cell_masses("right", n_periods + 1)
    left = res.cell_masses("left", n_periods + 1)
    res.period_ratios = list(np.sqrt(right[1:] / right[:-1]))
    res.left_ratios = list(np.sqrt(left[1:] / left[:-1]))
    res.nu_max = float(-np.mean(np.log(res.period_ratios + res.left_ratios)))
    # plot-ready samples over the window and n_periods on each side
    xs = []
    for p in _pieces(spec, m.x_left - n_periods * eps, m.x_right + n_periods * eps):
        xs.append(np.linspace(p.left, p.right, samples_per_piece, endpoint=False))
    x = np.r_[np.concatenate(xs), m.x_right + n_periods * eps]
    res.x = x
    res.u_eps = res.evaluate(x)[:, 0]
    return res


def defect_eigenvalues(spec: MediumSpec, gap_index: int = 1, tol: float = 1e-12, n_scan: int = 2000,
                       lambda_max: float = 200.0) -> list[DefectModeResult]:
    """Eigenvalues of the defect operator inside gap ``gap_index`` (1-based) at period ``spec.epsilon``."""
    bands = finite_eps_bands(spec, lambda_max)
    while len(bands.gaps) < gap_index or bands.gaps[gap_index - 1][1] >= bands.lambda_range[1]:
        lambda_max *= 2
        if lambda_max > 1e6:
            raise RangeError(f"gap {gap_index} not found below lambda={lambda_max / 2:g}")
        bands = finite_eps_bands(spec, lambda_max, grid_n=int(100 * lambda_max))
    lo, hi = bands.gaps[gap_index - 1]
    pad = 1e-7 * (hi - lo)
    grid = np.linspace(lo + pad, hi - pad, n_scan)
    vals = np.array([matching_determinant(spec, l) for l in grid])
    f = lambda l: matching_determinant(spec, l)
    out = []
    for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]:
        if vals[i] == 0 and i > 0 and vals[i - 1] == 0:
            continue
        lam = bisect(f, grid[i], grid[i + 1], tol, flo=vals[i])
        out.append(_assemble(spec, lam, gap_index))
    return out


def decay_exponent(result: DefectModeResult | None, spec: MediumSpec, lambda0: float):
    """``(nu_star, mu1)`` from the limit discriminant at ``lambda0``.

    ``mu1`` is the small root of ``mu**2 - D(lambda0) mu + 1`` and ``nu_star = |ln|mu1||``.
    """
    disc = limit_discriminant(spec, lambda0)
    return decay_from_discriminant(disc)


def decay_from_discriminant(disc: float):
    if abs(disc) <= 2.0:
        raise NotInGapError(f"|D| = {abs(disc):.12g} <= 2: not in a gap of the limit spectrum")
    mu1, _ = floquet_roots(disc)
    return abs(math.log(abs(mu1))), mu1


# ---------------------------------------------------------------------------
# approximate eigenfunction from the limit Neumann mode


class _Antiderivative:
    """``F(x) = int_{x0}^x g`` for ``g`` smooth between ``knots``; exact to quadrature precision."""

    def __init__(self, g, knots, n_cells: int = 256):
        knots = np.unique(np.asarray(knots, dtype=float))
        grid = np.unique(np.concatenate([np.linspace(l, r, max(2, int(n_cells * (r - l) / (knots[-1] - knots[0])) + 1))
                                         for l, r in zip(knots, knots[1:])]))
        self.g = g
        self.grid = grid
        half = 0.5 * np.diff(grid)
        mids = grid[:-1] + half
        pts = mids[:, None] + half[:, None] * _GX[None, :]
        inc = (half[:, None] * _GW[None, :] * g(pts)).sum(axis=1)
        self.values = np.r_[0.0, np.cumsum(inc)]

    def __call__(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.grid[0], self.grid[-1])
        k = np.clip(np.searchsorted(self.grid, x, side="right") - 1, 0, len(self.grid) - 2)
        a = self.grid[k]
        half = 0.5 * (x - a)
        pts = (a + half)[..., None] + half[..., None] * _GX
        return self.values[k] + (half[..., None] * _GW * self.g(pts)).sum(axis=-1)


def _quartic_bump(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < 1)
    s = 2.0 * t - 1.0
    return np.where(inside, (1.0 - s * s) ** 2, 0.0)


def _quartic_bump_slope(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < 1)
    s = 2.0 * t - 1.0
    return np.where(inside, -8.0 * s * (1.0 - s * s), 0.0)


@dataclass
class ApproximateEigenfunction:
    """Two-scale approximation of a defect mode built from a Neumann mode in a gap."""

    spec: MediumSpec
    mode: NeumannMode
    mu1: float
    residual_norm: float = 0.0
    x: np.ndarray = field(default=None, repr=False)
    u: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        spec, eps, h = self.spec, self.spec.epsilon, self.spec.h
        d = spec.defect
        lam = self.mode.lambda0
        self.lam = lam
        self.z_right = lattice_ceil(d.d_plus, eps)
        self.z_left = lattice_floor(d.d_minus, eps)
        self.t_plus = _snap_local(d.d_plus / eps - (self.z_right - 1))
        self.t_minus = _snap_local(d.d_minus / eps - self.z_left)
        rec = limit_cell_matrix(spec, lam)
        self.mu2 = 1.0 / self.mu1
        self.k1 = _eigvec(rec, self.mu1)
        self.k2 = _eigvec(rec, self.mu2)
        self.stiff_mass = spec.stiff_mass
        self.soft_end = fundamental_states(spec.a0, spec.rho0, lam, 0.0, [h])[0]
        # tables on the cell
        fsupp = (0.05 * h, 0.95 * h)
        self._f = lambda y: _quartic_bump((np.asarray(y) - fsupp[0]) / (fsupp[1] - fsupp[0]))
        self._fp = lambda y: _quartic_bump_slope((np.asarray(y) - fsupp[0]) / (fsupp[1] - fsupp[0])) / (fsupp[1] - fsupp[0])
        soft_knots = np.unique(np.concatenate([[0.0, fsupp[0], fsupp[1], h], spec.a0.nodes()]))
        self._F = _Antiderivative(lambda y: self._f(y) / spec.a0(y), soft_knots)
        self._Fh = float(self._F(h))
        stiff_knots = np.unique(np.concatenate([[h, 1.0], spec.a1.nodes(), spec.rho1.nodes()]))
        self._R = _Antiderivative(lambda y: spec.rho1(y), stiff_knots)
        self._G1 = _Antiderivative(lambda y: 1.0 / spec.a1(y), stiff_knots)
        self._G2 = _Antiderivative(lambda y: self._R(y) / spec.a1(y), stiff_knots)
        # normalise kappa so that w0 matches u0 at the ends of the defect
        u_dm, u_dp = self.mode.evaluate([d.d_minus, d.d_plus])[0]
        self.k1 = self.k1 * (u_dp / self._w0_at(self.z_right - 1, self.t_plus, "right")[0])
        self.k2 = self.k2 * (u_dm / self._w0_at(self.z_left, self.t_minus, "left")[0])
        self._setup_u1()

    # --- outer leading term -------------------------------------------------
    def _coeffs(self, z: int, side: str) -> np.ndarray:
        if side == "right":
            return self.mu1 ** (z - self.z_right) * self.k1
        return self.mu2 ** (z - (self.z_left - 1)) * self.k2

    def _w0_at(self, z: int, t, side: str):
        """``(w0, a0 w0')`` on cell ``z`` at local coordinates ``t`` (flux zero on the stiff part)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c = self._coeffs(z, side)
        soft = t < self.spec.h
        u = np.empty_like(t)
        flux = np.zeros_like(t)
        if soft.any():
            st = fundamental_states(self.spec.a0, self.spec.rho0, self.lam, 0.0, t[soft])
            u[soft] = st[:, 0, :] @ c
            flux[soft] = st[:, 1, :] @ c
        u[~soft] = self.soft_end[0] @ c
        return (u[0], flux[0]) if u.size == 1 else (u, flux)

    # --- stiff corrector ----------------------------------------------------
    def _stiff_constant(self, z: int, side: str) -> float:
        """Additive constant ``A_z`` of the stiff corrector on cell ``z``."""
        c = self._coeffs(z, side)
        q = float(self.soft_end[1] @ c)
        w = float(self.soft_end[0] @ c)
        h = self.spec.h
        if side == "right":
            anchor = self.t_plus if (z == self.z_right - 1 and self.t_plus > h) else h
        else:
            anchor = self.t_minus if (z == self.z_left and self.t_minus > h) else 1.0
        return -(q * float(self._G1(anchor)) - self.lam * w * float(self._G2(anchor)))

    def _w2_stiff(self, z: int, t, side: str):
        c = self._coeffs(z, side)
        q = float(self.soft_end[1] @ c)
        w = float(self.soft_end[0] @ c)
        a = self._stiff_constant(z, side)
        val = a + q * self._G1(t) - self.lam * w * self._G2(t)
        flux = q - self.lam * w * self._R(t)
        return val, flux

    def _stiff_outside(self, z: int, side: str) -> bool:
        """True when the stiff interval of cell ``z`` is (at least partly) outside D."""
        eps, h = self.spec.epsilon, self.spec.h
        d = self.spec.defect
        if side == "right":
            return eps * (z + 1) > d.d_plus + _SNAP * eps
        return eps * (z + h) < d.d_minus - _SNAP * eps

    def _soft_bump_coeff(self, z: int, side: str):
        """``(w2(z), c_z)`` for a full soft interval outside D."""
        h = self.spec.h
        if side == "right":
            start = float(self._w2_stiff(z - 1, 1.0, side)[0]) if self._stiff_outside(z - 1, side) else 0.0
            end = 0.0
        else:
            start = 0.0
            end = float(self._w2_stiff(z, h, side)[0]) if self._stiff_outside(z, side) else 0.0
        return start, (end - start) / self._Fh

    # --- inner corrector ----------------------------------------------------
    def _setup_u1(self):
        spec, h = self.spec, self.spec.h
        d = spec.defect
        # fluxes from outside at d_plus / d_minus (cell units)
        zr = self.z_right - 1
        if self.t_plus >= 1.0 - 1e-15:
            self.J1 = float(self._w0_at(self.z_right, 0.0, "right")[1])
        elif self.t_plus < h:
            self.J1 = float(self._w0_at(zr, self.t_plus, "right")[1])
        else:
            self.J1 = float(self._w2_stiff(zr, self.t_plus, "right")[1])
        zl = self.z_left
        if self.t_minus <= 1e-15:
            self.J2 = float(self._w2_stiff(zl - 1, 1.0, "left")[1])
        elif self.t_minus <= h:
            self.J2 = float(self._w0_at(zl, self.t_minus, "left")[1])
        else:
            self.J2 = float(self._w2_stiff(zl, self.t_minus, "left")[1])
        delta = d.length / 10.0
        self._b0, self._b1 = d.d_minus + delta, d.d_plus - delta
        width = self._b1 - self._b0
        self._phi = lambda x: _quartic_bump((np.asarray(x) - self._b0) / width)
        self._phip = lambda x: _quartic_bump_slope((np.asarray(x) - self._b0) / width) / width
        knots = np.unique(np.concatenate([[d.d_minus, self._b0, self._b1, d.d_plus], d.a_D.nodes()]))
        self._Phi = _Antiderivative(lambda x: self._phi(x) / d.a_D(x), knots)
        self._Phi_total = float(self._Phi(d.d_plus))
        self._Iminus = _Antiderivative(lambda x: 1.0 / d.a_D(x), knots)
        self._I_total = float(self._Iminus(d.d_plus))

    def _u1(self, x):
        d = self.spec.defect
        chi = self._Phi(x) / self._Phi_total
        im = self._Iminus(x)
        ip = im - self._I_total
        aD = d.a_D(x)
        phi = self._phi(x) / self._Phi_total
        phip = self._phip(x) / self._Phi_total
        u1 = self.J1 * chi * ip + self.J2 * (1.0 - chi) * im
        flux = self.J1 * (phi * ip + chi) + self.J2 * (-phi * im + 1.0 - chi)
        dflux = self.J1 * (phip * ip + 2.0 * phi / aD) - self.J2 * (phip * im + 2.0 * phi / aD)
        return u1, flux, dflux

    # --- evaluation ---------------------------------------------------------
    def evaluate(self, x):
        """``(u, a_eps u', r)`` where ``r = (A - lambda0) u`` in the operator (rho-divided) form."""
        spec, eps, h = self.spec, self.spec.epsilon, self.spec.h
        d = spec.defect
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.zeros_like(x)
        flux = np.zeros_like(x)
        res = np.zeros_like(x)
        inside = (x >= d.d_minus) & (x <= d.d_plus)
        if inside.any():
            xi = x[inside]
            u0, f0 = self.mode.evaluate(xi)
            u1, f1, df1 = self._u1(xi)
            u[inside] = u0 + eps * u1
            flux[inside] = f0 + eps * f1
            res[inside] = -eps * (df1 / d.rho_D(xi) + self.lam * u1)
        outside = np.nonzero(~inside)[0]
        if len(outside):
            y = x[outside] / eps
            z = np.floor(y + _SNAP).astype(int)
            t = y - z
            t = np.where(t < 0, 0.0, t)
            for zz in np.unique(z):
                sel = outside[z == zz]
                tt = t[z == zz]
                side = "right" if x[sel[0]] > d.d_plus else "left"
                self._fill_cell(int(zz), side, tt, sel, u, flux, res)
        return u, flux, res

    def _fill_cell(self, z, side, t, sel, u, flux, res):
        spec, eps, h = self.spec, self.spec.epsilon, self.spec.h
        w0, f0 = self._w0_at(z, t, side)
        w0, f0 = np.atleast_1d(w0), np.atleast_1d(f0)
        soft = t < h
        w2 = np.zeros_like(t)
        f2 = np.zeros_like(t)
        r = np.zeros_like(t)
        if (~soft).any():
            v, fl = self._w2_stiff(z, t[~soft], side)
            w2[~soft] = v
            f2[~soft] = fl
            r[~soft] = -eps * eps * self.lam * v
        if soft.any():
            ts = t[soft]
            partial = (side == "right" and z == self.z_right - 1) or (side == "left" and z == self.z_left
                                                                      and self.t_minus <= h)
            if not partial:
                start, c = self._soft_bump_coeff(z, side)
                w2[soft] = start + c * self._F(ts)
                # a0 w2' = c f, which vanishes at both ends of the soft interval
                r[soft] = -eps * eps * (c * self._fp(ts) / spec.rho0(ts) + self.lam * w2[soft])
        stiff = ~soft
        u[sel] = w0 + eps * eps * w2
        # physical flux: eps * (a0 w0') on soft, eps * (a1 w2') on stiff
        flux[sel] = np.where(stiff, eps * f2, eps * f0)
        res[sel] = r

    def norms(self, n_cells: int | None = None):
        """``(||u||_rho, ||(A - lambda0) u||_rho)`` over the line, tails summed explicitly."""
        eps = self.spec.epsilon
        if n_cells is None:
            n_cells = max(8, int(math.ceil(math.log(1e-13) / math.log(abs(self.mu1)))) + 2)
        d = self.spec.defect
        a = eps * (self.z_left - n_cells)
        b = eps * (self.z_right + n_cells)
        xq, wq = quadrature(self.spec, a, b)
        u, _, r = self.evaluate(xq)
        rho = evaluate_eps_coefficients(self.spec, xq)[1]
        return l2_norm(u, wq, rho), l2_norm(r, wq, rho)


def approximate_eigenfunction(spec: MediumSpec, mode: NeumannMode, n_samples: int = 6):
    """Approximate eigenfunction and the L2_rho norm of its residual ``(A - lambda0) u``."""
    if spec.defect is None:
        raise ValueError("medium has no defect")
    disc = limit_discriminant(spec, mode.lambda0)
    _, mu1 = decay_from_discriminant(disc)
    ap = ApproximateEigenfunction(spec, mode, mu1)
    _, ap.residual_norm = ap.norms()
    eps = spec.epsilon
    xs = [np.linspace(p.left, p.right, n_samples, endpoint=False)
          for p in _pieces(spec, eps * (ap.z_left - 8), eps * (ap.z_right + 8))]
    ap.x = np.concatenate(xs)
    ap.u = ap.evaluate(ap.x)[0]
    return ap


def approximation_error(ap: ApproximateEigenfunction, result: DefectModeResult) -> float:
    """``min_c ||u_ap - c u_eps||`` in L2_rho: distance from the approximation to the eigenline."""
    eps = ap.spec.epsilon
    n = max(result.tail_cells(), 8)
    a = min(eps * (ap.z_left - n), result.x_left - n * eps)
    b = max(eps * (ap.z_right + n), result.x_right + n * eps)
    xq, wq = quadrature(ap.spec, a, b)
    rho = evaluate_eps_coefficients(ap.spec, xq)[1]
    ua = ap.evaluate(xq)[0]
    ue = result.evaluate(xq)[:, 0]
    w = wq * rho
    c = np.sum(w * ua * ue) / np.sum(w * ue * ue)
    return float(np.sqrt(np.sum(w * (ua - c * ue) ** 2)))


# ---------------------------------------------------------------------------
# decomposition u = v + w outside the defect


@dataclass(frozen=True)
class DecompositionDiagnostic:
    norm_w: float
    norm_w_prime: float
    norm_v_tail: float
    alpha: float


def _harmonic_interpolant(spec: MediumSpec, l: float, r: float, wl: float, wr: float, pts):
    """Solution of ``(a_eps w')' = 0`` on a soft interval ``[l, r]`` with end values ``wl``, ``wr``."""
    eps = spec.epsilon
    z = math.floor(l / eps + _SNAP)
    knots = eps * (z + spec.a0.nodes())
    knots = np.unique(np.r_[l, r, knots[(knots > l) & (knots < r)]])
    inv = _Antiderivative(lambda x: 1.0 / evaluate_eps_coefficients(spec, x)[0], knots, n_cells=16)
    total = float(inv(r))
    a_eps = evaluate_eps_coefficients(spec, pts)[0]
    return wl + (wr - wl) * inv(pts) / total, (wr - wl) / (a_eps * total)


def decomposition_diagnostic(spec: MediumSpec, result: DefectModeResult, alpha: float = 0.5,
                             n_cells: int | None = None) -> DecompositionDiagnostic:
    """Split ``u_eps = v + w`` with ``v`` piecewise constant on the stiff part outside D.

    ``v`` is the cell average of ``u_eps`` on stiff intervals of complete cells, continued
    by ``u_eps(d_pm)`` on stiff intervals cut by D; ``w = u_eps - v`` there, ``w = 0`` on D,
    and on soft intervals ``w`` is the interpolant with ``(a0(x/eps) w')' = 0``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    eps, h = spec.epsilon, spec.h
    d = spec.defect
    z_right = lattice_ceil(d.d_plus, eps)
    z_left = lattice_floor(d.d_minus, eps)
    if n_cells is None:
        n_cells = result.tail_cells()
    u_dm, u_dp = result.evaluate([d.d_minus, d.d_plus])[:, 0]
    lam = result.lambda_eps

    # stiff intervals outside D: (left, right, v value)
    stiff = []
    for z in range(z_left - n_cells, z_right + n_cells):
        l, r = eps * (z + h), eps * (z + 1)
        if r <= d.d_minus + _SNAP * eps or l >= d.d_plus - _SNAP * eps:
            cut = False
        elif l < d.d_minus < r:
            l, r, cut = l, d.d_minus, True
        elif l < d.d_plus < r:
            l, r, cut = d.d_plus, r, True
        else:
            continue  # inside D
        xq, wq = quadrature(spec, l, r)
        if cut:
            v = u_dm if r <= d.d_minus + _SNAP * eps else u_dp
        else:
            v = float(np.sum(wq * result.evaluate(xq)[:, 0]) / (r - l))
        stiff.append((l, r, v))

    sq_w = sq_wp = 0.0
    for l, r, v in stiff:
        xq, wq = quadrature(spec, l, r)
        st = result.evaluate(xq)
        a_eps = evaluate_eps_coefficients(spec, xq)[0]
        sq_w += float(np.sum(wq * (st[:, 0] - v) ** 2))
        sq_wp += float(np.sum(wq * (st[:, 1] / a_eps) ** 2))

    # w at stiff interval ends, then harmonic interpolation across the soft gaps between them
    ends = {}
    for l, r, v in stiff:
        wl, wr = result.evaluate([l, r])[:, 0] - v
        ends[round(l / eps, 6)] = wl
        ends[round(r / eps, 6)] = wr
    ends[round(d.d_minus / eps, 6)] = 0.0
    ends[round(d.d_plus / eps, 6)] = 0.0
    soft = []
    for z in range(z_left - n_cells, z_right + n_cells):
        l, r = eps * z, eps * (z + h)
        if r <= d.d_minus + _SNAP * eps or l >= d.d_plus - _SNAP * eps:
            pass  # complete soft interval outside D
        elif l < d.d_minus < r:
            r = d.d_minus
        elif l < d.d_plus < r:
            l = d.d_plus
        else:
            continue
        soft.append((l, r))

    def end_value(x):
        return ends.get(round(x / eps, 6), 0.0)

    for l, r in soft:
        xq, wq = quadrature(spec, l, r)
        w, wp = _harmonic_interpolant(spec, l, r, end_value(l), end_value(r), xq)
        sq_w += float(np.sum(wq * w * w))
        sq_wp += float(np.sum(wq * wp * wp))

    # v outside an eps**alpha neighbourhood of D
    reach = eps ** alpha
    sq_v = 0.0
    for l, r, v in stiff:
        lo, hi = max(l, d.d_plus + reach), r
        if hi > lo:
            sq_v += v * v * (hi - lo)
        lo, hi = l, min(r, d.d_minus - reach)
        if hi > lo:
            sq_v += v * v * (hi - lo)
    for l, r in soft:
        for lo, hi in ((max(l, d.d_plus + reach), r), (l, min(r, d.d_minus - reach))):
            if hi <= lo:
                continue
            xq, wq = quadrature(spec, lo, hi)
            w, _ = _harmonic_interpolant(spec, l, r, end_value(l), end_value(r), xq)
            v = result.evaluate(xq)[:, 0] - w
            sq_v += float(np.sum(wq * v * v))
    return DecompositionDiagnostic(math.sqrt(sq_w), math.sqrt(sq_wp), math.sqrt(sq_v), alpha)
