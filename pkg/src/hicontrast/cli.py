"""Command-line studies: bands, dispersion, defect modes, decay and convergence rates.

Every command writes ``manifest.json`` (inputs and tool version), one or more CSV
files and ``summary.json`` into ``--out``.  Floats are written with 17 significant
digits so that reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .model import ConfigError, MediumSpec, ValidationError, load_medium

log = logging.getLogger("hicontrast")

COMMANDS = ("bands", "dispersion", "defect-limit", "defect-eps", "decay", "rates", "resolvent-rate",
            "oracle-check")
QUANTITIES = ("lambda_eps", "outer_norm", "residual", "approx_error", "decomposition")
PRESETS = ("constant_unit", "gap_tuned", "layered", "graded")


# ---------------------------------------------------------------------------
# helpers


def loglog_slope(eps, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(eps)``."""
    eps, values = np.asarray(eps, dtype=float), np.abs(np.asarray(values, dtype=float))
    return float(np.polyfit(np.log(eps), np.log(values), 1)[0])


_DYADIC = re.compile(r"^\s*2\^(-?\d+)\s*\.\.\s*2\^(-?\d+)\s*$")


def parse_eps_list(text: str) -> list[float]:
    """``"2^-3..2^-8"`` (inclusive dyadic range) or a comma-separated list of numbers."""
    m = _DYADIC.match(text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        step = 1 if b >= a else -1
        return [2.0 ** k for k in range(a, b + step, step)]
    try:
        out = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError("--eps-list", f"cannot parse {text!r}") from exc
    if not out:
        raise ConfigError("--eps-list", "empty list")
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(path: str) -> Path:
    """A file path, or the name of a bundled preset."""
    p = Path(path)
    if p.exists():
        return p
    name = path[:-5] if path.endswith(".yaml") else path
    if name in PRESETS:
        return Path(str(resources.files("hicontrast") / "presets" / f"{name}.yaml"))
    raise ConfigError("--config", f"no such file or preset: {path}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path: Path, data):
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _gap_mode(spec: MediumSpec, gap: int, lambda_max: float):
    """The lowest Neumann mode of the defect lying in limit gap ``gap``."""
    from .defect import gap_filter, neumann_modes
    from .spectrum import compute_bands

    if spec.defect is None:
        raise ValueError("this command needs a medium with a defect")
    bands = compute_bands(spec, lambda_max)
    n = 2
    while True:
        modes = neumann_modes(spec.defect, n)
        if modes[-1].lambda0 > lambda_max:
            break
        n *= 2
    modes = [m for m in modes if m.lambda0 <= lambda_max]
    kept = [m for m in gap_filter(modes, bands) if m.gap_index == gap]
    if not kept:
        raise ValueError(f"no Neumann mode of the defect lies in gap {gap} below lambda={lambda_max:g}")
    return kept[0], bands


def _closest(results, lam0):
    if not results:
        raise ValueError("no defect eigenvalue found in the gap")
    return min(results, key=lambda r: abs(r.lambda_eps - lam0))


# ---------------------------------------------------------------------------
# commands; each returns ({csv name: (header, rows)}, summary)


def cmd_bands(spec, args):
    from .spectrum import compute_bands

    bands = compute_bands(spec, args.lambda_max)
    rows = [(float(l), float(d)) for l, d in bands.samples[:: max(1, len(bands.samples) // 2000)]]
    return ({"bands.csv": (("lambda", "discriminant"), rows)},
            {"bands": bands.bands, "gaps": bands.gaps, "lambda_max": args.lambda_max})


def cmd_dispersion(spec, args):
    from .bloch import QuasiperiodicProblem, band_eigenvalues_eps
    from .spectrum import band_function, compute_bands

    bands = compute_bands(spec, args.lambda_max)
    thetas = np.linspace(0.0, math.pi, args.n_theta)
    n_bands = min(args.n_bands, sum(1 for b in bands.bands if b[1] < args.lambda_max))
    limit = [band_function(spec, n, thetas, bands).values for n in range(1, n_bands + 1)]
    rows = []
    for i, th in enumerate(thetas):
        eps_vals = band_eigenvalues_eps(QuasiperiodicProblem(spec, float(th), args.mesh, args.mesh), n_bands)
        for n in range(n_bands):
            rows.append((float(th), n + 1, float(limit[n][i]), float(eps_vals[n])))
    gap = max(abs(r[2] - r[3]) for r in rows)
    return ({"dispersion.csv": (("theta", "band", "lambda_limit", "lambda_eps"), rows)},
            {"epsilon": spec.epsilon, "n_bands": n_bands, "max_abs_difference": gap})


def cmd_defect_limit(spec, args):
    from .defect import decay_exponent, gap_filter, neumann_modes
    from .spectrum import compute_bands

    if spec.defect is None:
        raise ValueError("defect-limit needs a medium with a defect")
    bands = compute_bands(spec, args.lambda_max)
    modes = [m for m in neumann_modes(spec.defect, args.n_modes) if m.lambda0 <= args.lambda_max]
    kept = gap_filter(modes, bands)
    rows = []
    for m in modes:
        k = next((g for g in kept if g.index == m.index), None)
        nu = decay_exponent(None, spec, m.lambda0)[0] if k else float("nan")
        rows.append((m.index, m.lambda0, k.gap_index if k else 0, k.edge_distance if k else float("nan"), nu))
    return ({"modes.csv": (("index", "lambda0", "gap_index", "edge_distance", "nu_star"), rows)},
            {"gap_modes": [{"index": g.index, "lambda0": g.lambda0, "gap_index": g.gap_index,
                            "edge_distance": g.edge_distance} for g in kept],
             "gaps": bands.gaps})


def cmd_defect_eps(spec, args):
    from .defect import defect_eigenvalues

    mode, _ = _gap_mode(spec, args.gap, args.lambda_max)
    results = defect_eigenvalues(spec, args.gap, args.tol)
    best = _closest(results, mode.lambda0)
    eig_rows = [(spec.epsilon, r.lambda_eps, mode.lambda0, r.lambda_eps - mode.lambda0) for r in results]
    ratio_rows = [(i, r) for i, r in enumerate(best.period_ratios, 1)]
    return ({"eigenvalues.csv": (("epsilon", "lambda_eps", "lambda0", "error"), eig_rows),
             "eigenfunction.csv": (("x", "u_eps"), list(zip(best.x, best.u_eps))),
             "ratios.csv": (("period_index", "ratio"), ratio_rows)},
            {"epsilon": spec.epsilon, "lambda0": mode.lambda0, "lambda_eps": [r.lambda_eps for r in results],
             "closest": best.lambda_eps, "mu1_eps": best.mu1_eps})


def cmd_decay(spec, args):
    from .defect import decay_exponent, defect_eigenvalues

    mode, _ = _gap_mode(spec, args.gap, args.lambda_max)
    nu, mu1 = decay_exponent(None, spec, mode.lambda0)
    rows = []
    for eps in args.eps_list:
        s = spec.with_epsilon(eps)
        best = _closest(defect_eigenvalues(s, args.gap, args.tol), mode.lambda0)
        measured = -float(np.mean(np.log(best.period_ratios)))
        mass = best.mass_beyond(5.0 * eps / nu)
        rows.append((eps, best.lambda_eps, best.mu1_eps, measured, nu, abs(measured - nu), mass))
    return ({"decay.csv": (("epsilon", "lambda_eps", "mu1_eps", "measured_exponent", "nu_star",
                            "exponent_error", "mass_beyond_5_decay_lengths"), rows)},
            {"lambda0": mode.lambda0, "nu_star": nu, "mu1": mu1})


def cmd_rates(spec, args):
    from .defect import (approximate_eigenfunction, approximation_error, decomposition_diagnostic,
                         defect_eigenvalues, quadrature)

    mode, _ = _gap_mode(spec, args.gap, args.lambda_max)
    q = args.quantity
    rows, series = [], {}
    for eps in args.eps_list:
        s = spec.with_epsilon(eps)
        best = _closest(defect_eigenvalues(s, args.gap, args.tol), mode.lambda0)
        if q == "lambda_eps":
            rows.append((eps, best.lambda_eps, mode.lambda0, abs(best.lambda_eps - mode.lambda0)))
            series.setdefault("error", []).append(rows[-1][-1])
        elif q == "outer_norm":
            xq, wq = quadrature(s, s.defect.d_minus, s.defect.d_plus)
            inner = float(np.sum(wq * best.evaluate(xq)[:, 0] ** 2))
            rows.append((eps, math.sqrt(max(1.0 - inner, 0.0))))
            series.setdefault("outer_norm", []).append(rows[-1][-1])
        elif q in ("residual", "approx_error"):
            ap = approximate_eigenfunction(s, mode)
            val = ap.residual_norm if q == "residual" else approximation_error(ap, best)
            rows.append((eps, val))
            series.setdefault(q, []).append(val)
        else:
            dd = decomposition_diagnostic(s, best, args.alpha)
            rows.append((eps, dd.norm_w, dd.norm_w_prime, dd.norm_v_tail))
            for k, v in (("norm_w", dd.norm_w), ("norm_w_prime", dd.norm_w_prime), ("norm_v_tail", dd.norm_v_tail)):
                series.setdefault(k, []).append(v)
    headers = {"lambda_eps": ("epsilon", "lambda_eps", "lambda0", "error"),
               "outer_norm": ("epsilon", "outer_norm"),
               "residual": ("epsilon", "residual"),
               "approx_error": ("epsilon", "approx_error"),
               "decomposition": ("epsilon", "norm_w", "norm_w_prime", "norm_v_tail")}
    slopes = {k: loglog_slope(args.eps_list, v) for k, v in series.items() if len(v) >= 2}
    return ({"rates.csv": (headers[q], rows)},
            {"quantity": q, "lambda0": mode.lambda0, "slopes": slopes, "epsilon": args.eps_list})


# constants are exact at theta = 0 and would carry no rate
_LOADS = (lambda y: np.where(y < 0.3, 1.0, -0.5),
          lambda y: np.cos(2.0 * np.pi * y) + y,
          lambda y: np.exp(-20.0 * (y - 0.3) ** 2))


def cmd_resolvent_rate(spec, args):
    from .bloch import QuasiperiodicProblem, expansion_terms, l2_rho_norm, solve_finite_eps_resolvent

    thetas = (0.0, 0.5 * math.pi, math.pi)
    rows, series = [], {}
    for eps in args.eps_list:
        s = spec.without_defect().with_epsilon(eps) if spec.defect is not None else spec.with_epsilon(eps)
        for th in thetas:
            prob = QuasiperiodicProblem(s, th, args.mesh, args.mesh)
            for i, f in enumerate(_LOADS):
                ue = solve_finite_eps_resolvent(prob, f)
                terms = expansion_terms(prob, f=f, N=1)
                e0 = l2_rho_norm(prob, ue - terms.u0)
                e2 = l2_rho_norm(prob, ue - terms.u0 - eps ** 2 * terms.correctors[0])
                rows.append((eps, th, i, e0, e2))
                series.setdefault((th, i), []).append((e0, e2))
    slopes = [{"theta": th, "load": i,
               "slope": loglog_slope(args.eps_list, [v[0] for v in vals]),
               "slope_corrected": loglog_slope(args.eps_list, [v[1] for v in vals])}
              for (th, i), vals in series.items()]
    return ({"resolvent.csv": (("epsilon", "theta", "load", "error", "error_corrected"), rows)},
            {"slopes": slopes, "min_slope": min(s["slope"] for s in slopes),
             "min_slope_corrected": min(s["slope_corrected"] for s in slopes)})


def cmd_oracle_check(spec, args):
    from .oracle import cross_check

    mode, _ = _gap_mode(spec, args.gap, args.lambda_max)
    eps_list = args.eps_list if args.eps_list_given else [spec.epsilon]
    rows, worst, paired = [], 0.0, True
    for eps in eps_list:
        cc = cross_check(spec.with_epsilon(eps), args.gap, mode.lambda0)
        paired &= cc.one_to_one
        worst = max(worst, cc.max_abs_disagreement)
        for a, b in zip(cc.matching, cc.oracle):
            rows.append((eps, a, b, abs(a - b)))
    return ({"oracle_check.csv": (("epsilon", "lambda_matching", "lambda_oracle", "abs_difference"), rows)},
            {"max_abs_disagreement": worst, "one_to_one": paired, "lambda0": mode.lambda0})


HANDLERS = {"bands": cmd_bands, "dispersion": cmd_dispersion, "defect-limit": cmd_defect_limit,
            "defect-eps": cmd_defect_eps, "decay": cmd_decay, "rates": cmd_rates,
            "resolvent-rate": cmd_resolvent_rate, "oracle-check": cmd_oracle_check}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hicontrast", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="medium YAML file or preset name " + str(PRESETS))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config leaf, e.g. epsilon=0.02 or defect.d_plus=0.7")
    p.add_argument("--eps-list", default=None, help="e.g. 2^-3..2^-8 or 0.05,0.025")
    p.add_argument("--lambda-max", type=float, default=200.0)
    p.add_argument("--gap", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--quantity", choices=QUANTITIES, default="lambda_eps")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--n-theta", type=int, default=17)
    p.add_argument("--n-bands", type=int, default=3)
    p.add_argument("--n-modes", type=int, default=6)
    p.add_argument("--mesh", type=int, default=256, help="elements per phase for cell problems")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.set)
        config = resolve_config(args.config)
        spec = load_medium(config, overrides)
        args.eps_list_given = args.eps_list is not None
        args.eps_list = parse_eps_list(args.eps_list or "2^-3..2^-8")
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"config error: cannot create {out}: {exc}", file=sys.stderr)
        return 2
    manifest = {"command": args.command, "medium_path": str(args.config), "output_dir": str(out),
                "overrides": overrides, "deterministic": True, "version": __version__,
                "options": {"eps_list": args.eps_list, "lambda_max": args.lambda_max, "gap": args.gap,
                            "tol": args.tol, "quantity": args.quantity, "alpha": args.alpha}}
    try:
        tables, summary = HANDLERS[args.command](spec, args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any failure inside a study is reported, not raised
        log.debug("study failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    write_json(out / "manifest.json", manifest)
    for name, (header, rows) in tables.items():
        write_csv(out / name, header, rows)
    write_json(out / "summary.json", summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
