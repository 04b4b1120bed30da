"""Quasiperiodic cell problems on Y = (0, 1) with piecewise-linear elements.

Trial functions satisfy ``u(1) = exp(i theta) u(0)``.  The finite-period operator
has stiffness coefficient ``a0`` on the soft part and ``a1 / eps**2`` on the stiff
part; the limit operator lives on the subspace of functions that are constant on
the stiff part (``V_theta``) and only sees ``a0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import CoefficientProfile, MediumSpec

__all__ = [
    "AssemblyError",
    "EigenSolverError",
    "UnsupportedDepthError",
    "QuasiperiodicProblem",
    "ExpansionTerms",
    "cell_mesh",
    "element_averages",
    "solve_finite_eps_resolvent",
    "solve_limit_resolvent",
    "expansion_terms",
    "band_eigenvalues_eps",
    "band_eigenvalues_limit",
    "l2_rho_norm",
    "triple_norm",
    "triple_inner",
]

DEFAULT_MESH = 512


class AssemblyError(RuntimeError):
    pass


class EigenSolverError(RuntimeError):
    pass


class UnsupportedDepthError(ValueError):
    pass


def _subdivide(knots, n_elem, total):
    nodes = [knots[0]]
    for x0, x1 in zip(knots, knots[1:]):
        k = max(1, int(round(n_elem * (x1 - x0) / total)))
        nodes.extend(np.linspace(x0, x1, k + 1)[1:])
    return nodes


def cell_mesh(spec: MediumSpec, n_soft: int = DEFAULT_MESH, n_stiff: int = DEFAULT_MESH):
    """Nodes on ``[0, 1]`` with every coefficient breakpoint as a node; returns ``(nodes, index_of_h)``."""
    h = spec.h
    soft = np.unique(np.concatenate([[0.0, h], spec.a0.nodes(), spec.rho0.nodes()]))
    stiff = np.unique(np.concatenate([[h, 1.0], spec.a1.nodes(), spec.rho1.nodes()]))
    left = _subdivide(soft[(soft >= 0) & (soft <= h)], n_soft, h)
    right = _subdivide(stiff[(stiff >= h) & (stiff <= 1)], n_stiff, 1.0 - h)
    nodes = np.array(left + right[1:])
    return nodes, len(left) - 1


def _cumulative(profile: CoefficientProfile, x):
    """Exact antiderivative of ``profile`` from the left end of its support."""
    knots = profile.nodes()
    vals = profile(knots) if not profile.is_piecewise_constant else None
    x = np.clip(np.asarray(x, dtype=float), knots[0], knots[-1])
    if profile.is_piecewise_constant:
        pieces = profile.pieces()
        bp = np.array([p[0] for p in pieces] + [pieces[-1][1]])
        f = np.array([p[2] for p in pieces])
        fbp = np.concatenate([[0.0], np.cumsum(f * np.diff(bp))])
        return np.interp(x, bp, fbp)
    dx = np.diff(knots)
    fk = np.concatenate([[0.0], np.cumsum(0.5 * (vals[:-1] + vals[1:]) * dx)])
    k = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, len(dx) - 1)
    t = x - knots[k]
    slope = (vals[k + 1] - vals[k]) / dx[k]
    return fk[k] + vals[k] * t + 0.5 * slope * t * t


def element_averages(profile: CoefficientProfile, nodes) -> np.ndarray:
    """Mean value of ``profile`` over each element ``[nodes[i], nodes[i+1]]``."""
    nodes = np.asarray(nodes, dtype=float)
    f = _cumulative(profile, nodes)
    return np.diff(f) / np.diff(nodes)


def _p1(nodes, coef, mass_coef):
    hs = np.diff(nodes)
    n = len(nodes)
    c = coef / hs
    m = mass_coef * hs
    k = sp.diags([np.r_[c, 0] + np.r_[0, c], -c, -c], [0, 1, -1], shape=(n, n), format="csr")
    mm = sp.diags([np.r_[m / 3, 0] + np.r_[0, m / 3], m / 6, m / 6], [0, 1, -1], shape=(n, n), format="csr")
    return k, mm


def _hermitian(a):
    return ((a + a.conj().T) * 0.5).tocsr()


@dataclass(frozen=True)
class QuasiperiodicProblem:
    spec: MediumSpec
    theta: float
    n_soft: int = DEFAULT_MESH
    n_stiff: int = DEFAULT_MESH

    @cached_property
    def _mesh(self):
        return cell_mesh(self.spec, self.n_soft, self.n_stiff)

    @property
    def nodes(self) -> np.ndarray:
        return self._mesh[0]

    @property
    def h_index(self) -> int:
        return self._mesh[1]

    @cached_property
    def _full(self):
        """Non-periodic matrices on all nodes: soft stiffness, stiff stiffness, mass."""
        nodes, ih = self._mesh
        spec = self.spec
        soft_nodes, stiff_nodes = nodes[: ih + 1], nodes[ih:]
        a0 = np.r_[element_averages(spec.a0, soft_nodes), np.zeros(len(stiff_nodes) - 1)]
        a1 = np.r_[np.zeros(len(soft_nodes) - 1), element_averages(spec.a1, stiff_nodes)]
        rho = np.r_[element_averages(spec.rho0, soft_nodes), element_averages(spec.rho1, stiff_nodes)]
        k0, m = _p1(nodes, a0, rho)
        k1, _ = _p1(nodes, a1, rho)
        return k0, k1, m

    @cached_property
    def prolongation(self) -> sp.csr_matrix:
        """Map from the quasiperiodic dofs (nodes 0..N-1) to values on all N+1 nodes."""
        n = len(self.nodes) - 1
        rows = np.r_[np.arange(n), n]
        cols = np.r_[np.arange(n), 0]
        vals = np.r_[np.ones(n, dtype=complex), np.exp(1j * self.theta)]
        return sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))

    @cached_property
    def limit_basis(self) -> sp.csr_matrix:
        """Columns span V_theta inside the quasiperiodic dofs; the stiff part copies exp(i theta) u(0)."""
        n = len(self.nodes) - 1
        ih = self.h_index
        rows = np.r_[np.arange(ih), np.arange(ih, n)]
        cols = np.r_[np.arange(ih), np.zeros(n - ih, dtype=int)]
        vals = np.r_[np.ones(ih, dtype=complex), np.full(n - ih, np.exp(1j * self.theta))]
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, ih))

    @cached_property
    def matrices(self):
        """Hermitian ``(K0, K1, M)`` on the quasiperiodic space."""
        p = self.prolongation
        ph = p.conj().T
        return tuple(_hermitian(ph @ x @ p) for x in self._full)

    @cached_property
    def split_basis(self) -> sp.csr_matrix:
        """``[limit_basis | E]`` where ``E`` injects fluctuations on stiff nodes h..1 (exclusive)."""
        n = len(self.nodes) - 1
        ih = self.h_index
        e = sp.csr_matrix((np.ones(n - ih, dtype=complex), (np.arange(ih, n), np.arange(n - ih))),
                          shape=(n, n - ih))
        return sp.hstack([self.limit_basis, e]).tocsr()

    @cached_property
    def split_matrices(self):
        """``(K0, M, B)`` in the split basis; ``B`` is the stiff-part stiffness on the fluctuations.

        The stiff energy of a field ``[v, w]`` in this basis is exactly ``w^H B w``.
        """
        k0, k1, m = self.matrices
        t = self.split_basis
        th = t.conj().T
        ih = self.h_index
        n = len(self.nodes) - 1
        b = self._full[1][ih:n, ih:n].tocsr()
        return _hermitian(th @ k0 @ t), _hermitian(th @ m @ t), b

    def load(self, f) -> np.ndarray:
        """Galerkin load ``int rho f conj(phi)`` for ``f`` given as a callable or as values on all nodes."""
        fv = f(self.nodes) if callable(f) else np.asarray(f)
        if fv.shape != self.nodes.shape:
            raise ValueError(f"f must be sampled on the {len(self.nodes)} mesh nodes")
        return self.prolongation.conj().T @ (self._full[2] @ fv.astype(complex))

    def expand(self, dofs) -> np.ndarray:
        """Nodal values on all mesh nodes from quasiperiodic dofs."""
        return self.prolongation @ dofs

    def reduce(self, values) -> np.ndarray:
        return np.asarray(values)[:-1]

    def with_theta(self, theta: float) -> "QuasiperiodicProblem":
        return QuasiperiodicProblem(self.spec, theta, self.n_soft, self.n_stiff)


@dataclass(frozen=True)
class ExpansionTerms:
    u0: np.ndarray
    correctors: list = field(default_factory=list)
    nodes: np.ndarray | None = None


def _lu(a):
    try:
        return spla.splu(sp.csc_matrix(a))
    except RuntimeError as exc:  # exactly singular factor
        raise AssemblyError(f"singular stiffness assembly: {exc}") from exc


class _SplitSystem:
    """Solver for ``(K0 + s K1 + c M)`` in the basis ``[limit_basis | stiff fluctuations]``.

    Fluctuations ``w`` live on the stiff nodes and vanish at ``y = 1``; ``K1`` acts on them
    only.  Eliminating ``w`` first keeps the large factor ``s = eps**-2`` out of the
    small-eigenvalue directions, so no cancellation between large terms occurs.
    """

    def __init__(self, prob: "QuasiperiodicProblem", s: float, c: float = 1.0):
        k0, m, b = prob.split_matrices
        nv = prob.h_index
        a = (k0 + c * m).tocsr()
        self.nv = nv
        self.basis = prob.split_basis
        avv = a[:nv, :nv]
        avw = a[:nv, nv:]
        self.awv = a[nv:, :nv].tocsc()
        self.avw = avw.tocsr()
        self.sw = _lu(a[nv:, nv:] + s * b.astype(complex))
        cols = np.unique(self.awv.nonzero()[1])
        y = self.sw.solve(self.awv[:, cols].toarray()) if len(cols) else np.zeros((a.shape[0] - nv, 0))
        self.cols, self.y = cols, y
        corr = sp.lil_matrix((nv, nv), dtype=complex)
        if len(cols):
            block = self.avw @ y
            for j, col in enumerate(cols):
                corr[:, col] = block[:, j].reshape(-1, 1)
        self.sv = _lu(avv - corr.tocsr())

    def solve_split(self, bz):
        nv = self.nv
        w0 = self.sw.solve(bz[nv:])
        v = self.sv.solve(bz[:nv] - self.avw @ w0)
        w = w0 - self.y @ v[self.cols]
        out = np.concatenate([v, w])
        if not np.all(np.isfinite(out)):
            raise AssemblyError("non-finite solution; stiffness assembly singular")
        return out

    def solve(self, b):
        """Solve for quasiperiodic nodal dofs given a nodal right-hand side."""
        return self.basis @ self.solve_split(self.basis.conj().T @ b)


def _problem(spec_or_prob, theta, n_soft, n_stiff) -> QuasiperiodicProblem:
    if isinstance(spec_or_prob, QuasiperiodicProblem):
        return spec_or_prob
    return QuasiperiodicProblem(spec_or_prob, float(theta), n_soft, n_stiff)


def _limit_dofs(prob: QuasiperiodicProblem, f) -> np.ndarray:
    k0, m, _ = prob.split_matrices
    nv = prob.h_index
    rhs = prob.limit_basis.conj().T @ prob.load(f)
    return prob.limit_basis @ _lu((k0 + m)[:nv, :nv]).solve(rhs)


def solve_finite_eps_resolvent(prob: QuasiperiodicProblem, f) -> np.ndarray:
    """``(A_theta^eps + 1)^{-1} f`` on the cell; nodal values on all mesh nodes."""
    system = _SplitSystem(prob, prob.spec.epsilon ** -2)
    return prob.expand(system.solve(prob.load(f)))


def solve_limit_resolvent(spec: MediumSpec | QuasiperiodicProblem, theta: float = 0.0, f=None,
                          n_soft: int = DEFAULT_MESH, n_stiff: int = DEFAULT_MESH) -> np.ndarray:
    """``(A_theta + 1)^{-1} f`` computed in V_theta; nodal values on all mesh nodes."""
    prob = _problem(spec, theta, n_soft, n_stiff)
    return prob.expand(_limit_dofs(prob, f))


def expansion_terms(spec: MediumSpec | QuasiperiodicProblem, theta: float = 0.0, f=None, N: int = 1,
                    n_soft: int = DEFAULT_MESH, n_stiff: int = DEFAULT_MESH) -> ExpansionTerms:
    """Leading term and first ``N`` correctors of the resolvent expansion in powers of eps**2.

    The corrector ``u2`` solves ``K1 u2 = rho f - (K0 + M) u0``; of the solutions of that
    singular system it is the one orthogonal to V_theta in the |||.||| inner product.
    """
    if N not in (0, 1):
        raise UnsupportedDepthError(f"expansion depth N={N} not implemented (0 or 1)")
    prob = _problem(spec, theta, n_soft, n_stiff)
    u0 = _limit_dofs(prob, f)
    correctors = []
    if N >= 1:
        k0, k1, m = prob.matrices
        k0z, mz, b = prob.split_matrices
        nv = prob.h_index
        t = prob.split_basis
        r = t.conj().T @ (prob.load(f) - (k0 + m) @ u0)
        w = _lu(b.astype(complex)).solve(r[nv:])
        g = (k0z + mz).tocsr()
        c = -_lu(g[:nv, :nv]).solve(g[:nv, nv:] @ w)
        correctors.append(prob.expand(t @ np.concatenate([c, w])))
    return ExpansionTerms(prob.expand(u0), correctors, prob.nodes)


def l2_rho_norm(prob: QuasiperiodicProblem, u) -> float:
    d = prob.reduce(u)
    return float(np.sqrt(abs(np.vdot(d, prob.matrices[2] @ d))))


def triple_inner(prob: QuasiperiodicProblem, u, v) -> complex:
    k0, k1, m = prob.matrices
    return complex(np.vdot(prob.reduce(v), (k0 + k1 + m) @ prob.reduce(u)))


def triple_norm(prob: QuasiperiodicProblem, u) -> float:
    return float(np.sqrt(abs(triple_inner(prob, u, u))))


def _eigs(k, solve, mz, n_max, describe):
    n = mz.shape[0]
    if n_max >= n - 1:
        raise EigenSolverError(f"requested {n_max} eigenvalues from a pencil of size {n}")
    opinv = spla.LinearOperator((n, n), matvec=solve, dtype=complex)
    try:
        vals = spla.eigsh(k, k=n_max, M=mz, sigma=-1.0, OPinv=opinv, which="LM",
                          return_eigenvectors=False, tol=1e-14, ncv=max(2 * n_max + 1, 20))
    except (spla.ArpackNoConvergence, spla.ArpackError) as exc:
        raise EigenSolverError(f"{exc}; {describe()}") from exc
    return np.sort(vals.real)


def _describe(prob, s):
    k0, m, b = prob.split_matrices
    kd, md, bd = abs(k0.diagonal()), abs(m.diagonal()), abs(b.diagonal())
    return (f"diag(K0) in [{kd.min():.3g}, {kd.max():.3g}], diag(eps^-2 K1) in [{s * bd.min():.3g}, "
            f"{s * bd.max():.3g}], diag(M) in [{md.min():.3g}, {md.max():.3g}]")


def band_eigenvalues_eps(prob: QuasiperiodicProblem, n_max: int, extrapolate: bool = False) -> np.ndarray:
    """Lowest ``n_max`` eigenvalues of A_theta^eps, ascending.

    With ``extrapolate`` the values on the given mesh and on the doubled mesh are combined
    by Richardson extrapolation, removing the O(mesh**2) discretisation error.
    """
    s = prob.spec.epsilon ** -2
    system = _SplitSystem(prob, s)
    k0, mz, b = prob.split_matrices
    nv = prob.h_index
    k = k0 + s * sp.block_diag([sp.csr_matrix((nv, nv)), b])
    vals = _eigs(k, system.solve_split, mz, n_max, lambda: _describe(prob, s))
    if not extrapolate:
        return vals
    fine = QuasiperiodicProblem(prob.spec, prob.theta, 2 * prob.n_soft, 2 * prob.n_stiff)
    return (4.0 * band_eigenvalues_eps(fine, n_max) - vals) / 3.0


def band_eigenvalues_limit(prob: QuasiperiodicProblem, n_max: int, extrapolate: bool = False) -> np.ndarray:
    """Lowest ``n_max`` eigenvalues of the limit cell operator A_theta on the same mesh."""
    k0, mz, _ = prob.split_matrices
    nv = prob.h_index
    lu = _lu((k0 + mz)[:nv, :nv])
    mv = mz[:nv, :nv].tocsr()
    vals = _eigs(k0[:nv, :nv], lu.solve, mv, n_max, lambda: _describe(prob, 0.0))
    if not extrapolate:
        return vals
    fine = QuasiperiodicProblem(prob.spec, prob.theta, 2 * prob.n_soft, 2 * prob.n_stiff)
    return (4.0 * band_eigenvalues_limit(fine, n_max) - vals) / 3.0
