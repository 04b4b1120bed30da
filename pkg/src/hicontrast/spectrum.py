"""Limit band-gap spectrum from the discriminant, band functions, and the
spectral-series cross-check on the soft part of the cell."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .bloch import element_averages
from .fundsys import DEFAULT_TOL, limit_discriminant, limit_discriminant_many
from .model import MediumSpec

__all__ = [
    "BandStructure",
    "BandFunction",
    "GridResolutionError",
    "InconsistencyError",
    "PoleProximityError",
    "bisect",
    "bands_from_discriminant",
    "compute_bands",
    "band_function",
    "spectral_series_criterion",
    "series_band_test",
]

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_MAX = 200.0
DEFAULT_GRID_N = 20_000
DEFAULT_ROOT_TOL = 1e-12


class GridResolutionError(RuntimeError):
    pass


class InconsistencyError(RuntimeError):
    pass


class PoleProximityError(ValueError):
    pass


@dataclass(frozen=True)
class BandStructure:
    lambda_range: tuple[float, float]
    bands: list[tuple[float, float]]
    gaps: list[tuple[float, float]]
    samples: np.ndarray = field(repr=False)

    def locate(self, lam: float) -> tuple[str, int]:
        """``("band", n)`` or ``("gap", n)`` with 1-based indices; gap n follows band n."""
        for i, (lo, hi) in enumerate(self.bands, 1):
            if lo <= lam <= hi:
                return "band", i
        for i, (lo, hi) in enumerate(self.gaps, 1):
            if lo < lam < hi:
                return "gap", i
        raise ValueError(f"lambda={lam} outside the computed range {self.lambda_range}")

    def in_gap(self, lam: float) -> bool:
        return self.locate(lam)[0] == "gap"

    def edge_distance(self, lam: float) -> float:
        edges = [e for b in self.bands for e in b]
        return min(abs(lam - e) for e in edges)


@dataclass(frozen=True)
class BandFunction:
    n: int
    theta_grid: np.ndarray
    values: np.ndarray


def bisect(f, lo: float, hi: float, tol: float, flo: float | None = None, max_iter: int = 200) -> float:
    """Plain bisection on a sign change of ``f`` over ``[lo, hi]``."""
    flo = f(lo) if flo is None else flo
    fhi = f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise ValueError(f"no sign change on [{lo}, {hi}]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol or mid in (lo, hi):
            break
        fm = f(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _cell_crossings(lams, vals, disc, level, root_tol):
    g = vals - level
    out = []
    idx = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]
    for i in idx:
        out.append(bisect(lambda x: disc(x) - level, lams[i], lams[i + 1], root_tol, flo=g[i]))
    exact = np.nonzero(g == 0)[0]
    out.extend(lams[exact])
    return out


def bands_from_discriminant(disc_many, disc, lambda_max: float, grid_n: int, root_tol: float,
                            max_refine: int = 3) -> BandStructure:
    """Band/gap decomposition of ``{lam in [0, lambda_max]: |disc(lam)| <= 2}``."""
    if lambda_max <= 0:
        raise ValueError("lambda_max must be positive")
    if grid_n < 100:
        raise ValueError("grid_n must be at least 100")
    lams = np.linspace(0.0, lambda_max, grid_n + 1)
    vals = np.asarray(disc_many(lams), dtype=float)
    crossings: list[float] = []
    for i in range(grid_n):
        xs, fs = lams[i:i + 2], vals[i:i + 2]
        attempt = 0
        while True:
            up = np.sign(fs[:-1] - 2) * np.sign(fs[1:] - 2) < 0
            dn = np.sign(fs[:-1] + 2) * np.sign(fs[1:] + 2) < 0
            if not (up & dn).any():
                break
            attempt += 1
            if attempt > max_refine:
                raise GridResolutionError(
                    f"cannot separate +2 and -2 crossings near lambda={lams[i]:.6g} after {max_refine} refinements")
            log.warning("grid cell [%g, %g] holds both a +2 and a -2 crossing; refining 10x", xs[0], xs[-1])
            xs = np.linspace(xs[0], xs[-1], 10 * (len(xs) - 1) + 1)
            fs = np.asarray(disc_many(xs), dtype=float)
        for level in (2.0, -2.0):
            g = fs - level
            for j in np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]:
                crossings.append(bisect(lambda x: disc(x) - level, xs[j], xs[j + 1], root_tol, flo=g[j]))
    for level in (2.0, -2.0):
        crossings.extend(lams[vals == level].tolist())
    pts = sorted(set([0.0, lambda_max] + [c for c in crossings if 0.0 <= c <= lambda_max]))
    # merge near-duplicates produced by exact grid hits
    merged = [pts[0]]
    for p in pts[1:]:
        if p - merged[-1] > 2 * root_tol:
            merged.append(p)
        else:
            merged[-1] = max(merged[-1], p)
    pts = merged
    intervals = []
    for lo, hi in zip(pts, pts[1:]):
        mid = 0.5 * (lo + hi)
        is_band = abs(disc(mid)) <= 2.0
        if intervals and intervals[-1][2] == is_band:
            intervals[-1][1] = hi
        else:
            intervals.append([lo, hi, is_band])
    bands = [(lo, hi) for lo, hi, b in intervals if b]
    gaps = [(lo, hi) for lo, hi, b in intervals if not b]
    if intervals and not intervals[0][2]:
        # lambda = 0 is a degenerate band {0} when the discriminant leaves [-2, 2] immediately
        bands.insert(0, (0.0, 0.0))
    return BandStructure((0.0, float(lambda_max)), bands, gaps, np.column_stack([lams, vals]))


def compute_bands(spec: MediumSpec, lambda_max: float = DEFAULT_LAMBDA_MAX, grid_n: int = DEFAULT_GRID_N,
                  root_tol: float = DEFAULT_ROOT_TOL) -> BandStructure:
    """Limit spectrum bands on ``[0, lambda_max]`` from the discriminant."""
    return bands_from_discriminant(lambda x: limit_discriminant_many(spec, x),
                                   lambda x: limit_discriminant(spec, x),
                                   lambda_max, grid_n, root_tol)


def band_function(spec: MediumSpec, n: int, theta_grid, bands: BandStructure | None = None,
                  root_tol: float = DEFAULT_ROOT_TOL) -> BandFunction:
    """lam_n(theta): the root of D(lam) = 2 cos(theta) inside band ``n`` (1-based)."""
    theta_grid = np.asarray(theta_grid, dtype=float)
    if bands is None:
        lmax = DEFAULT_LAMBDA_MAX
        bands = compute_bands(spec, lmax, root_tol=root_tol)
        while len(bands.bands) < n and lmax < 1e6:
            lmax *= 2
            bands = compute_bands(spec, lmax, grid_n=int(DEFAULT_GRID_N * lmax / DEFAULT_LAMBDA_MAX),
                                  root_tol=root_tol)
    if not 1 <= n <= len(bands.bands):
        raise ValueError(f"band {n} not resolved (have {len(bands.bands)} bands)")
    lo, hi = bands.bands[n - 1]
    if hi == bands.lambda_range[1]:
        raise ValueError(f"band {n} is truncated by lambda_max")
    disc = lambda x: limit_discriminant(spec, x)
    dlo, dhi = disc(lo), disc(hi)
    values = np.empty_like(theta_grid)
    for i, th in enumerate(theta_grid):
        target = 2.0 * math.cos(th)
        f = lambda x: disc(x) - target
        flo, fhi = dlo - target, dhi - target
        if abs(flo) <= 1e-12:
            values[i] = lo
            continue
        if abs(fhi) <= 1e-12:
            values[i] = hi
            continue
        if np.sign(flo) == np.sign(fhi):
            probe = np.linspace(lo, hi, 9)
            raise InconsistencyError(
                f"no root of D = 2cos({th:.6g}) in band {n} = [{lo:.12g}, {hi:.12g}]; "
                f"D samples {[round(disc(p), 6) for p in probe]}")
        values[i] = bisect(f, lo, hi, root_tol, flo=flo)
    return BandFunction(n, theta_grid, values)


# ---------------------------------------------------------------------------
# spectral-series criterion on the soft part Y0 with quasiperiodic coupling
# u(h) = e^{i theta} u(0), (a0 u')(h) = e^{i theta} (a0 u')(0)


def _soft_mesh(spec: MediumSpec, n_elem: int) -> np.ndarray:
    h = spec.h
    knots = np.unique(np.concatenate([spec.a0.nodes(), spec.rho0.nodes()]))
    knots = knots[(knots >= 0) & (knots <= h)]
    nodes = [0.0]
    for x0, x1 in zip(knots, knots[1:]):
        k = max(1, int(round(n_elem * (x1 - x0) / h)))
        nodes.extend(np.linspace(x0, x1, k + 1)[1:])
    return np.array(nodes)


def _p1_matrices(a, rho, nodes):
    """Full (non-periodic) P1 stiffness and consistent mass, exact for piecewise-constant data."""
    hs = np.diff(nodes)
    abar, rbar = element_averages(a, nodes), element_averages(rho, nodes)
    n = len(nodes)
    k = sp.diags([np.r_[abar / hs, 0] + np.r_[0, abar / hs], -abar / hs, -abar / hs], [0, 1, -1], shape=(n, n))
    m = sp.diags([np.r_[rbar * hs / 3, 0] + np.r_[0, rbar * hs / 3], rbar * hs / 6, rbar * hs / 6],
                 [0, 1, -1], shape=(n, n))
    return k.tocsr(), m.tocsr()


@lru_cache(maxsize=4096)
def _soft_eigs(spec: MediumSpec, theta: float, n_elem: int):
    nodes = _soft_mesh(spec, n_elem)
    k_full, m_full = _p1_matrices(spec.a0, spec.rho0, nodes)
    n = len(nodes) - 1
    phase = np.exp(1j * theta)
    p = sp.lil_matrix((n + 1, n), dtype=complex)
    for j in range(n):
        p[j, j] = 1.0
    p[n, 0] = phase
    p = p.tocsr()
    k = (p.conj().T @ k_full @ p).toarray()
    m = (p.conj().T @ m_full @ p).toarray()
    mu, phi = sla.eigh(k, m)
    g00 = np.linalg.solve(k + m, np.eye(n, 1)[:, 0])[0].real
    return mu, np.abs(phi[0, :]) ** 2, g00


def spectral_series_criterion(spec: MediumSpec, lam: float, theta: float, n_terms: int = 200,
                              n_elem: int = 256) -> float:
    """Truncated ``sum_n lam/(mu_n - lam) |Phi_n(0)|^2 - 1/int(rho1)``.

    ``(mu_n, Phi_n)`` are eigenpairs of the quasiperiodic Neumann-type problem on
    the soft part, computed with P1 elements (``n_elem`` elements).  The sum is
    evaluated as ``lam * G(0,0) + sum_n lam (lam+1) / ((mu_n+1)(mu_n-lam)) |Phi_n(0)|^2``
    with ``G = (K + M)^{-1}`` summing all discrete modes, which leaves an O(n**-3) tail.
    """
    if n_terms < 10:
        raise ValueError("n_terms must be at least 10")
    theta = float(np.mod(theta, 2 * np.pi))
    mu, phi0, g00 = _soft_eigs(spec, theta, n_elem)
    if n_terms > len(mu):
        raise ValueError(f"n_terms={n_terms} exceeds the {len(mu)} discrete modes; raise n_elem")
    mu, phi0 = mu[:n_terms], phi0[:n_terms]
    gap = np.min(np.abs(mu - lam))
    if gap < 1e-8:
        raise PoleProximityError(f"lambda={lam} within {gap:.3g} of a soft-part eigenvalue at theta={theta}")
    series = lam * g00 + np.sum(lam * (lam + 1.0) / ((mu + 1.0) * (mu - lam)) * phi0)
    return float(series - 1.0 / spec.stiff_mass)


def _below(spec, theta, lam, n_elem):
    mu = _soft_eigs(spec, float(theta), n_elem)[0]
    return int(np.sum(mu < lam))


def series_band_test(spec: MediumSpec, lam: float, n_theta: int = 64, n_terms: int = 200,
                     n_elem: int = 256, max_depth: int = 6, refine: bool = False):
    """Decide whether ``lam`` belongs to the limit spectrum using only the series criterion.

    Scans ``theta`` over ``[0, pi]`` (the criterion is even in theta) and looks for a sign change
    on a sub-interval that contains no pole, i.e. no soft-part eigenvalue crossing ``lam``.
    Returns ``(in_band, theta_root)``; ``theta_root`` is refined to a root only when ``refine``.
    """
    crit = lambda th: spectral_series_criterion(spec, lam, th, n_terms, n_elem)

    def search(t0, t1, f0, f1, depth):
        pole = _below(spec, t0, lam, n_elem) != _below(spec, t1, lam, n_elem)
        if not pole:
            if f0 == 0 or np.sign(f0) != np.sign(f1):
                return (t0, t1, f0)
            return None
        if depth >= max_depth:
            return None
        tm = 0.5 * (t0 + t1)
        try:
            fm = crit(tm)
        except PoleProximityError:
            tm += 1e-6 * (t1 - t0)
            fm = crit(tm)
        return search(t0, tm, f0, fm, depth + 1) or search(tm, t1, fm, f1, depth + 1)

    thetas = np.linspace(0.0, np.pi, n_theta)
    vals = []
    for th in thetas:
        try:
            vals.append(crit(th))
        except PoleProximityError:
            vals.append(crit(th + 1e-7))
    for i in range(n_theta - 1):
        hit = search(thetas[i], thetas[i + 1], vals[i], vals[i + 1], 0)
        if hit is not None:
            t0, t1, f0 = hit
            if not refine:
                return True, 0.5 * (t0 + t1)
            return True, bisect(crit, t0, t1, 1e-13, flo=f0)
    return False, None
