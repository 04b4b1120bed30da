"""Brute-force reference solver: conservative finite differences on a truncated line.

The operator ``-(a u')' = lam rho u`` is discretised on a node set containing every
coefficient interface, with harmonic-mean flux coefficients per element and a lumped
mass.  The pencil is tridiagonal, so the gap eigenpairs come from a symmetric
tridiagonal eigensolver restricted to the gap interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, eigh_tridiagonal, solve_banded

from .defect import decay_from_discriminant, lattice_ceil, lattice_floor
from .fundsys import limit_discriminant
from .model import CoefficientProfile, MediumSpec, evaluate_eps_coefficients

__all__ = [
    "MeshingError",
    "Pencil",
    "TruncatedProblem",
    "OracleMode",
    "discretize",
    "pencil_from_nodes",
    "gap_eigenpairs",
    "richardson_gap_eigenvalues",
    "neumann_eigenvalues",
    "dirichlet_eigenvalues",
    "default_half_width",
    "CrossCheck",
    "cross_check",
]

_GX, _GW = np.polynomial.legendre.leggauss(6)


class MeshingError(ValueError):
    pass


@dataclass(frozen=True)
class Pencil:
    """Tridiagonal stiffness ``(diag, off)`` and lumped mass on the interior nodes."""

    nodes: np.ndarray
    diag: np.ndarray
    off: np.ndarray
    mass: np.ndarray

    def symmetric_form(self):
        """Diagonal and off-diagonal of ``M^{-1/2} K M^{-1/2}``."""
        s = 1.0 / np.sqrt(self.mass)
        return self.diag * s * s, self.off * s[:-1] * s[1:]

    def dense(self):
        k = np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)
        return k, np.diag(self.mass)

    def energy(self, u) -> float:
        """``u^T K u`` summed per element, free of the cancellation in ``K u``."""
        e = float(np.sum(-self.off * np.diff(u) ** 2))
        return e + (self.diag[0] + self.off[0]) * u[0] ** 2 + (self.diag[-1] + self.off[-1]) * u[-1] ** 2

    def apply(self, u):
        ku = self.diag * u
        ku[:-1] += self.off * u[1:]
        ku[1:] += self.off * u[:-1]
        return ku


def _element_means(coef, nodes):
    """Per-element arithmetic mean of ``coef`` and harmonic mean of ``coef`` (Gauss, interior points)."""
    left, right = nodes[:-1], nodes[1:]
    half = 0.5 * (right - left)
    pts = (left + half)[:, None] + half[:, None] * _GX[None, :]
    vals = coef(pts.ravel()).reshape(pts.shape)
    mean = (vals * _GW).sum(axis=1) / 2.0
    harm = 2.0 / ((_GW / vals).sum(axis=1))
    return mean, harm


def pencil_from_nodes(nodes, a, rho, boundary: str = "dirichlet", interfaces=None) -> Pencil:
    """Assemble the three-point scheme on ``nodes`` for coefficient callables ``a`` and ``rho``.

    ``boundary`` is ``"dirichlet"`` (end nodes removed) or ``"neumann"`` (natural condition).
    Every point of ``interfaces`` inside the mesh must coincide with a node.
    """
    nodes = np.asarray(nodes, dtype=float)
    if np.any(np.diff(nodes) <= 0):
        raise MeshingError("nodes must be strictly increasing")
    if interfaces is not None:
        pts = np.asarray(interfaces, dtype=float)
        pts = pts[(pts > nodes[0]) & (pts < nodes[-1])]
        idx = np.clip(np.searchsorted(nodes, pts), 1, len(nodes) - 1)
        gap = np.minimum(np.abs(nodes[idx] - pts), np.abs(nodes[idx - 1] - pts))
        tol = 1e-12 * max(1.0, abs(nodes[0]), abs(nodes[-1]))
        if np.any(gap > tol):
            bad = pts[np.argmax(gap)]
            raise MeshingError(f"coefficient interface at x={bad:.15g} is not a mesh node")
    h = np.diff(nodes)
    _, a_h = _element_means(a, nodes)
    rho_m, _ = _element_means(rho, nodes)
    k = a_h / h
    m_el = rho_m * h
    diag = np.zeros(len(nodes))
    diag[:-1] += k
    diag[1:] += k
    mass = np.zeros(len(nodes))
    mass[:-1] += 0.5 * m_el
    mass[1:] += 0.5 * m_el
    off = -k
    if boundary == "dirichlet":
        return Pencil(nodes[1:-1], diag[1:-1], off[1:-1], mass[1:-1])
    if boundary == "neumann":
        return Pencil(nodes, diag, off, mass)
    raise ValueError(f"unknown boundary {boundary!r}")


@dataclass(frozen=True)
class TruncatedProblem:
    spec: MediumSpec
    half_width_L: float | None = None
    nodes_per_cell: int = 128
    centre: float | None = None
    boundary: str = "dirichlet"

    def __post_init__(self):
        if self.nodes_per_cell < 32:
            raise MeshingError("nodes_per_cell must be at least 32")
        if self.boundary != "dirichlet":
            raise MeshingError("only Dirichlet truncation is supported")

    @property
    def domain(self) -> tuple[float, float]:
        d = self.spec.defect
        c = self.centre if self.centre is not None else (0.5 * (d.d_minus + d.d_plus) if d else 0.0)
        if self.half_width_L is not None:
            big = self.half_width_L
        else:
            big = (0.5 * d.length if d else 0.0) + 20.0 * self.spec.epsilon + 2.0
        return c - big, c + big

    def interfaces(self) -> np.ndarray:
        """Coefficient interfaces inside the domain, with the domain ends."""
        spec, eps, h = self.spec, self.spec.epsilon, self.spec.h
        lo, hi = self.domain
        d = spec.defect
        local = np.unique(np.concatenate([[0.0, h, 1.0], spec.a0.nodes(), spec.rho0.nodes(),
                                          spec.a1.nodes(), spec.rho1.nodes()]))
        zs = np.arange(lattice_floor(lo, eps) - 1, lattice_ceil(hi, eps) + 2)
        brk = (eps * (zs[:, None] + local[None, :])).ravel()
        if d is not None:
            brk = brk[(brk <= d.d_minus) | (brk >= d.d_plus)]
            brk = np.concatenate([brk, d.a_D.nodes(), d.rho_D.nodes()])
        brk = np.unique(np.concatenate([brk[(brk > lo) & (brk < hi)], [lo, hi]]))
        keep = np.r_[True, np.diff(brk) > 1e-12 * max(1.0, abs(lo), abs(hi))]
        return brk[keep]

    def nodes(self) -> np.ndarray:
        brk = self.interfaces()
        step = self.spec.epsilon / self.nodes_per_cell
        out = [brk[:1]]
        for l, r in zip(brk, brk[1:]):
            n = max(1, int(math.ceil((r - l) / step - 1e-9)))
            out.append(np.linspace(l, r, n + 1)[1:])
        return np.concatenate(out)

    def refined(self, factor: int = 2) -> "TruncatedProblem":
        return TruncatedProblem(self.spec, self.half_width_L, self.nodes_per_cell * factor, self.centre,
                                self.boundary)

    def widened(self, factor: float = 2.0) -> "TruncatedProblem":
        lo, hi = self.domain
        return TruncatedProblem(self.spec, factor * 0.5 * (hi - lo), self.nodes_per_cell,
                                0.5 * (lo + hi), self.boundary)


def default_half_width(spec: MediumSpec, lambda0: float) -> float:
    """``|D|/2 + 20 eps / nu_star + 2`` with ``nu_star`` from the limit discriminant at ``lambda0``."""
    nu, _ = decay_from_discriminant(limit_discriminant(spec, lambda0))
    d = spec.defect
    return 0.5 * d.length + 20.0 * spec.epsilon / nu + 2.0


def discretize(prob: TruncatedProblem, nodes=None) -> Pencil:
    """Pencil on ``prob.nodes()``, or on a caller-supplied node set that must contain every interface."""
    nodes = prob.nodes() if nodes is None else nodes
    spec = prob.spec
    a = lambda x: evaluate_eps_coefficients(spec, x)[0]
    rho = lambda x: evaluate_eps_coefficients(spec, x)[1]
    return pencil_from_nodes(nodes, a, rho, "dirichlet", prob.interfaces())


@dataclass
class OracleMode:
    lam: float
    x: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    boundary_mass: float = 0.0
    residual: float = 0.0
    flagged: bool = False


def gap_eigenpairs(prob: TruncatedProblem, gap, flag_threshold: float = 1e-6,
                   pencil: Pencil | None = None) -> list[OracleMode]:
    """Eigenpairs of the truncated pencil with eigenvalue inside the open interval ``gap``.

    Eigenvectors are mass-normalised.  Modes with more than ``flag_threshold`` of their mass
    in the outer quarter of the domain are flagged as truncation artefacts.
    """
    pen = discretize(prob) if pencil is None else pencil
    d, e = pen.symmetric_form()
    lo, hi = gap
    vals, vecs = eigh_tridiagonal(d, e, select="v", select_range=(lo, hi))
    out = []
    s = 1.0 / np.sqrt(pen.mass)
    a, b = prob.domain
    centre, half = 0.5 * (a + b), 0.5 * (b - a)
    outer = np.abs(pen.nodes - centre) > 0.75 * half
    for lam, y in zip(vals, vecs.T):
        if not lo < lam < hi:
            continue
        lam, u = _refine(pen, lam, s * y)
        mu = pen.mass * u * u
        frac = float(mu[outer].sum() / mu.sum())
        mu_vec = pen.mass * u
        res = float(np.linalg.norm(pen.apply(u) - lam * mu_vec) / np.linalg.norm(mu_vec))
        k = np.argmax(np.abs(u))
        if u[k] < 0:
            u = -u
        out.append(OracleMode(float(lam), pen.nodes, u, frac, res, frac > flag_threshold))
    return out


def _refine(pen: Pencil, lam: float, u):
    """One inverse-iteration step, then the energy Rayleigh quotient.

    The tridiagonal eigensolver is accurate to round-off relative to the largest
    eigenvalue of the pencil, which grows like the inverse square mesh width; the
    refined pair is accurate relative to ``lam`` itself.
    """
    ab = np.zeros((3, len(u)))
    ab[0, 1:] = pen.off
    ab[1] = pen.diag - lam * pen.mass
    ab[2, :-1] = pen.off
    try:
        v = solve_banded((1, 1), ab, pen.mass * u)
    except LinAlgError:
        v = u  # shift is an eigenvalue to working precision
    if not np.all(np.isfinite(v)):
        v = u
    v = v / math.sqrt(float(np.sum(pen.mass * v * v)))
    return pen.energy(v), v


def richardson_gap_eigenvalues(prob: TruncatedProblem, gap, levels: int = 4, flag_threshold: float = 1e-6):
    """Unflagged gap eigenvalues extrapolated over ``levels`` successive mesh doublings.

    The scheme has an error expansion in even powers of the mesh width, so a Romberg
    table removes the ``h**2``, ``h**4``, ... terms.  Returns ``(extrapolated, table)`` where
    ``table[j]`` holds the raw eigenvalues on the j-th mesh.
    """
    if levels < 2:
        raise ValueError("need at least two mesh levels")
    table = []
    p = prob
    for _ in range(levels):
        vals = [m.lam for m in gap_eigenpairs(p, gap, flag_threshold) if not m.flagged]
        if table and len(vals) != len(table[-1]):
            raise MeshingError(f"eigenvalue count changed under refinement: {len(table[-1])} vs {len(vals)}")
        table.append(np.array(vals))
        p = p.refined()
    col = list(table)
    for k in range(1, levels):
        f = 4.0 ** k
        col = [(f * fine - coarse) / (f - 1.0) for coarse, fine in zip(col, col[1:])]
    return col[0], table


def _profile_callable(p: CoefficientProfile):
    return lambda x: p(x)


def neumann_eigenvalues(a: CoefficientProfile, rho: CoefficientProfile, n: int, n_nodes: int = 10_000):
    """Lowest ``n`` eigenvalues of the Neumann problem on the profiles' common support."""
    lo, hi = a.support
    knots = np.unique(np.concatenate([a.nodes(), rho.nodes()]))
    nodes = _mesh_with_knots(knots, n_nodes)
    pen = pencil_from_nodes(nodes, _profile_callable(a), _profile_callable(rho), "neumann")
    d, e = pen.symmetric_form()
    return eigh_tridiagonal(d, e, eigvals_only=True, select="i", select_range=(0, n - 1))


def dirichlet_eigenvalues(a: CoefficientProfile, rho: CoefficientProfile, n: int, n_nodes: int = 1000):
    """Lowest ``n`` eigenvalues of the Dirichlet problem on the profiles' common support."""
    knots = np.unique(np.concatenate([a.nodes(), rho.nodes()]))
    nodes = _mesh_with_knots(knots, n_nodes)
    pen = pencil_from_nodes(nodes, _profile_callable(a), _profile_callable(rho), "dirichlet")
    d, e = pen.symmetric_form()
    return eigh_tridiagonal(d, e, eigvals_only=True, select="i", select_range=(0, n - 1))


def _mesh_with_knots(knots, n_nodes):
    lo, hi = knots[0], knots[-1]
    step = (hi - lo) / (n_nodes - 1)
    out = [knots[:1]]
    for l, r in zip(knots, knots[1:]):
        m = max(1, int(round((r - l) / step)))
        out.append(np.linspace(l, r, m + 1)[1:])
    return np.concatenate(out)


@dataclass(frozen=True)
class CrossCheck:
    epsilon: float
    matching: np.ndarray
    oracle: np.ndarray
    unresolved: np.ndarray
    max_abs_disagreement: float
    one_to_one: bool


def cross_check(spec: MediumSpec, gap_index: int = 1, lambda0: float | None = None,
                nodes_per_cell: int = 128, levels: int = 4, flag_threshold: float = 1e-6) -> CrossCheck:
    """Compare matching-determinant eigenvalues in a gap with the truncated-line oracle.

    Matching eigenvalues whose eigenfunction puts more than ``flag_threshold / 10`` of its
    mass in the outer quarter of the oracle domain cannot be represented there (they hug a
    band edge); they are reported as ``unresolved`` and excluded from the pairing.
    """
    from .defect import defect_eigenvalues, finite_eps_bands

    gap = finite_eps_bands(spec).gaps[gap_index - 1]
    results = defect_eigenvalues(spec, gap_index)
    lam_ref = lambda0 if lambda0 is not None else 0.5 * (gap[0] + gap[1])
    try:
        half = default_half_width(spec, lam_ref)
    except ValueError:
        half = None
    prob = TruncatedProblem(spec, half, nodes_per_cell)
    lo, hi = prob.domain
    d = spec.defect
    reach = 0.75 * 0.5 * (hi - lo) - 0.5 * d.length
    resolved, unresolved = [], []
    for r in results:
        (resolved if r.mass_beyond(reach) < flag_threshold / 10 else unresolved).append(r.lambda_eps)
    ext, _ = richardson_gap_eigenvalues(prob, gap, levels, flag_threshold)
    ours = np.array(sorted(resolved))
    theirs = np.sort(ext)
    ok = len(ours) == len(theirs)
    dis = float(np.max(np.abs(ours - theirs))) if ok and len(ours) else (0.0 if ok else math.inf)
    return CrossCheck(spec.epsilon, ours, theirs, np.array(unresolved), dis, ok)
