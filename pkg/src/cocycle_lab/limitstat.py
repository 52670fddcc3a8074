"""Distribution distances, rate fits, and deviation checks for S_n.

Everything here is a pure function of stored sample arrays: sort,
evaluate, reduce.  No randomness is drawn, so every report is
reproducible from the TrajectoryStats alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sc
from scipy import stats as sps

from .mclab import TrajectoryStats, log_linear_fit, variance_profile

__all__ = [
    "DistanceReport",
    "RateFit",
    "DeviationReport",
    "standardize",
    "weighted_kolmogorov",
    "lq_distance",
    "wasserstein_p",
    "moment_gap",
    "distance_report",
    "rate_fit",
    "concentration_check",
    "mdp_check",
    "distance_csv_rows",
    "deviation_csv_rows",
    "distances_json",
    "ratefit_json",
    "deviation_json",
]

# weighted sup at s > 0 is evaluated only on |t| <= this window; beyond
# it the weight amplifies pure empirical-tail noise at desk sample sizes
WEIGHTED_SUP_WINDOW = 10.0

# L^q integration window; the remainder beyond is the analytic Gaussian
# tail integral, added so the reported value covers the whole line
LQ_DOMAIN = 12.0

MAX_MOMENT_ORDER = 8
_NORMAL_EVEN_MOMENT = {2: 1.0, 4: 3.0, 6: 15.0, 8: 105.0}

MIN_SAMPLES = 100

_GL8 = np.polynomial.legendre.leggauss(8)
_GL16 = np.polynomial.legendre.leggauss(16)
_GL64 = np.polynomial.legendre.leggauss(64)


def _checked(samples, *, min_size: int = MIN_SAMPLES) -> np.ndarray:
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size < min_size:
        raise ValueError(f"need at least {min_size} samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    return arr


def standardize(samples) -> np.ndarray:
    """(x - mean) / sd with the population sd; rejects sd = 0."""
    arr = _checked(samples, min_size=2)
    sd = float(arr.std())
    if not (math.isfinite(sd) and sd > 0.0):
        raise ValueError("degenerate sample: sd = 0")
    return (arr - float(arr.mean())) / sd


def _scalar(value, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a real number") from None
    if not math.isfinite(out):
        raise ValueError(f"{name} must be finite")
    return out


# -------------------------------------------------------------- distances


def weighted_kolmogorov(samples, s: float = 0.0) -> float:
    """sup of w_s(t) |F_hat(t) - Phi(t)| over sample points and a fixed grid.

    Both one-sided limits of the empirical CDF are evaluated at every
    sample point, so the sup over the jumps is exact.  At s = 0 the
    weight is 1 (classical Kolmogorov distance); for s > 0 the weight is
    1 + |t|^s and the sup is restricted to |t| <= WEIGHTED_SUP_WINDOW.
    """
    s = _scalar(s, "s")
    if s < 0:
        raise ValueError("s must be nonnegative")
    xs = np.sort(_checked(samples))
    m = xs.size
    phi = sc.ndtr(xs)
    hi = np.arange(1, m + 1, dtype=float) / m
    lo = np.arange(0, m, dtype=float) / m
    gap = np.maximum(np.abs(hi - phi), np.abs(lo - phi))
    grid = np.linspace(-WEIGHTED_SUP_WINDOW, WEIGHTED_SUP_WINDOW, 2001)
    grid_gap = np.abs(np.searchsorted(xs, grid, side="right") / m - sc.ndtr(grid))
    if s == 0.0:
        return float(max(gap.max(), grid_gap.max()))
    best = float(np.max(grid_gap * (1.0 + np.abs(grid) ** s)))
    inside = np.abs(xs) <= WEIGHTED_SUP_WINDOW
    if inside.any():
        best = max(best, float(np.max(gap[inside] * (1.0 + np.abs(xs[inside]) ** s))))
    return best


def _piece_quad(a: np.ndarray, b: np.ndarray, f: np.ndarray, q: float,
                rule) -> np.ndarray:
    nodes, weights = rule
    half = 0.5 * (b - a)
    pts = 0.5 * (a + b)[:, None] + half[:, None] * nodes[None, :]
    vals = np.abs(f[:, None] - sc.ndtr(pts)) ** q
    return half * (vals @ weights)


def _integrate_pieces(a: np.ndarray, b: np.ndarray, f: np.ndarray, q: float,
                      tol: float = 1e-12, max_depth: int = 60) -> float:
    """Adaptive |f - Phi|^q integration over constant-f pieces.

    Each piece is accepted when an 8- and a 16-node Gauss rule agree to
    tol; otherwise it is bisected.  Pieces where f crosses Phi must be
    pre-split at the crossing, so the integrand is one-signed per piece.
    """
    total = 0.0
    for _ in range(max_depth):
        if a.size == 0:
            return total
        coarse = _piece_quad(a, b, f, q, _GL8)
        fine = _piece_quad(a, b, f, q, _GL16)
        ok = np.abs(fine - coarse) <= tol
        total += float(fine[ok].sum())
        a, b, f = a[~ok], b[~ok], f[~ok]
        mid = 0.5 * (a + b)
        a = np.concatenate([a, mid])
        b = np.concatenate([mid, b])
        f = np.concatenate([f, f])
    return total + float(_piece_quad(a, b, f, q, _GL16).sum())


def _gaussian_tail_lq(q: float) -> float:
    """2 * integral over [LQ_DOMAIN, inf) of (1 - Phi)^q dx, via log_ndtr."""
    nodes, weights = _GL64
    a, b = LQ_DOMAIN, 50.0
    pts = 0.5 * (a + b) + 0.5 * (b - a) * nodes
    vals = np.exp(q * sc.log_ndtr(-pts))
    return float(2.0 * 0.5 * (b - a) * (vals @ weights))


def lq_distance(samples, q: float) -> float:
    """(integral of |F_hat - Phi|^q dx)^(1/q) over the whole line.

    Exact piecewise treatment: between consecutive order statistics
    F_hat is constant and Phi smooth, so each piece is integrated by an
    adaptive Gauss rule after splitting at the sign change of
    F_hat - Phi.  Outside [-LQ_DOMAIN, LQ_DOMAIN] samples are clamped
    and the analytic Gaussian tail integral is added, so the reported
    value bounds the full-line distance.
    """
    q = _scalar(q, "q")
    if q <= 0:
        raise ValueError("q must be positive")
    xs = np.sort(_checked(samples))
    m = xs.size
    inner = np.clip(xs, -LQ_DOMAIN, LQ_DOMAIN)
    a = np.concatenate([[-LQ_DOMAIN], inner])
    b = np.concatenate([inner, [LQ_DOMAIN]])
    f = np.arange(0, m + 1, dtype=float) / m
    wide = b > a
    a, b, f = a[wide], b[wide], f[wide]
    # split pieces where F_hat - Phi changes sign, so |.|^q stays smooth
    cross = (f > sc.ndtr(a)) & (f < sc.ndtr(b))
    parts_a, parts_b, parts_f = [a[~cross]], [b[~cross]], [f[~cross]]
    if cross.any():
        star = sc.ndtri(f[cross])
        parts_a += [a[cross], star]
        parts_b += [star, b[cross]]
        parts_f += [f[cross], f[cross]]
    total = _integrate_pieces(np.concatenate(parts_a), np.concatenate(parts_b),
                              np.concatenate(parts_f), q)
    return float((total + _gaussian_tail_lq(q)) ** (1.0 / q))


def wasserstein_p(samples, p: float) -> float:
    """Quantile-coupling W_p against the standard normal.

    Couples the i-th order statistic with ndtri((i - 1/2) / m), the
    optimal coupling on the line; monotone in p by power-mean ordering.
    """
    p = _scalar(p, "p")
    if p < 1:
        raise ValueError("p must be >= 1")
    xs = np.sort(_checked(samples))
    m = xs.size
    ref = sc.ndtri((np.arange(m, dtype=float) + 0.5) / m)
    return float(np.mean(np.abs(xs - ref) ** p) ** (1.0 / p))


def moment_gap(samples, a) -> float:
    """|sample a-th moment - standard normal a-th moment|, a <= 8.

    Orders above 8 are refused: the moment estimator's variance grows
    too fast for desk-scale sample counts to say anything.
    """
    arr = _checked(samples, min_size=1)
    if isinstance(a, bool) or not float(a).is_integer() or float(a) < 1:
        raise ValueError("a must be a positive integer")
    order = int(a)
    if order > MAX_MOMENT_ORDER:
        raise ValueError(f"moment order {order} refused: estimator variance "
                         f"explodes beyond {MAX_MOMENT_ORDER}")
    target = _NORMAL_EVEN_MOMENT.get(order, 0.0)
    return abs(float(np.mean(arr ** order)) - target)


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class DistanceReport:
    """Distances between standardized S_n samples and the standard normal.

    Standardization divides by the per-n Monte Carlo mean and sd; the
    substitution error against the exact moments is second order.
    """

    n: int
    sigma_n: float
    kolmogorov_s: dict
    lq: dict
    wasserstein_p: dict
    moment_gaps: dict
    m: int


DEFAULT_S_VALUES = (0.0, 1.0, 2.0)
DEFAULT_Q_VALUES = (1.0, 2.0)
DEFAULT_P_VALUES = (1.0, 2.0)
DEFAULT_A_VALUES = (2, 3, 4)


def distance_report(stats: TrajectoryStats, n: int,
                    s_values=DEFAULT_S_VALUES, q_values=DEFAULT_Q_VALUES,
                    p_values=DEFAULT_P_VALUES, a_values=DEFAULT_A_VALUES,
                    ) -> DistanceReport:
    row = stats.sample_row(int(n))
    sigma_n = float(np.std(row))
    z = standardize(row)
    return DistanceReport(
        n=int(n), sigma_n=sigma_n,
        kolmogorov_s={float(s): weighted_kolmogorov(z, s) for s in s_values},
        lq={float(q): lq_distance(z, q) for q in q_values},
        wasserstein_p={float(p): wasserstein_p(z, p) for p in p_values},
        moment_gaps={int(a): moment_gap(z, a) for a in a_values},
        m=int(row.size))


@dataclass(frozen=True)
class RateFit:
    """OLS of ln distance on ln sigma_n; slope near -1 is the rate claim."""

    pairs: tuple
    slope: float
    slope_ci: tuple
    intercept: float
    r2: float
    filtered_nonpositive: int


def rate_fit(series) -> RateFit:
    pts = [(_scalar(s, "sigma_n"), float(d)) for s, d in series]
    if len(pts) < 4:
        raise ValueError("need at least four (sigma_n, distance) points")
    sig = [s for s, _ in pts]
    if any(s <= 0 for s in sig):
        raise ValueError("sigma_n must be positive")
    if any(b <= a for a, b in zip(sig, sig[1:])):
        raise ValueError("sigma_n must be strictly increasing")
    kept = [(s, d) for s, d in pts if math.isfinite(d) and d > 0]
    filtered = len(pts) - len(kept)
    if len(kept) < 4:
        raise ValueError(f"need at least four positive distances "
                         f"({filtered} filtered as nonpositive)")
    x = np.log([s for s, _ in kept])
    y = np.log([d for _, d in kept])
    slope, intercept, se, r2 = log_linear_fit(x, y)
    half = float(sps.t.ppf(0.975, max(len(kept) - 2, 1))) * se
    return RateFit(pairs=tuple(zip(x.tolist(), y.tolist())), slope=slope,
                   slope_ci=(slope - half, slope + half), intercept=intercept,
                   r2=r2, filtered_nonpositive=filtered)


# ------------------------------------------------------------- deviations


@dataclass(frozen=True)
class DeviationReport:
    """Concentration and moderate-deviation check results.

    Either side may be None when only one check ran.  A pass verdict on
    the concentration side requires a strictly positive fitted c.
    """

    concentration: dict | None = None
    mdp: dict | None = None


def _clopper_pearson(count: int, total: int, alpha: float) -> tuple[float, float]:
    lo = 0.0 if count == 0 else float(sps.beta.ppf(alpha / 2, count, total - count + 1))
    hi = 1.0 if count == total else float(sps.beta.ppf(1 - alpha / 2, count + 1, total - count))
    return lo, hi


def concentration_check(stats: TrajectoryStats, t_grid, c_grid,
                        alpha: float = 0.05) -> DeviationReport:
    """Fit the largest c with P(|S_n| >= t n + C) <= 2 exp(-c t^2 n).

    c_grid supplies the candidate offsets C >= 0.  For each candidate,
    every (t, n) cell constrains c by ln(2 / p_lo) / (t^2 n), where
    p_lo is the Bonferroni Clopper-Pearson lower bound, so the fitted c
    is the largest value the data cannot refute.  Cells with p_lo = 0
    impose no constraint; if nothing constrains, c is unbounded and
    reported as inf.
    """
    ts = [_scalar(t, "t") for t in t_grid]
    cs = [_scalar(c, "C") for c in c_grid]
    if not ts or not cs:
        raise ValueError("t_grid and c_grid must be nonempty")
    if any(t <= 0 for t in ts):
        raise ValueError("t values must be positive")
    if any(c < 0 for c in cs):
        raise ValueError("C offsets must be nonnegative")
    if not (0 < alpha < 1):
        raise ValueError("alpha must be in (0, 1)")
    grid = stats.n_grid
    if not grid:
        raise ValueError("stats has no n grid")
    abs_rows = {n: np.abs(stats.sample_row(n)) for n in grid}
    cells = len(ts) * len(grid)
    alpha_cell = alpha / cells

    def fit_for(offset: float):
        c_star = math.inf
        table = []
        for t in ts:
            for n in grid:
                row = abs_rows[n]
                count = int(np.count_nonzero(row >= t * n + offset))
                p_lo, p_hi = _clopper_pearson(count, row.size, alpha_cell)
                if p_lo > 0.0:
                    c_star = min(c_star, math.log(2.0 / p_lo) / (t * t * n))
                table.append({"t": t, "n": int(n), "count": count,
                              "phat": count / row.size,
                              "ci": [p_lo, p_hi]})
        return c_star, table

    best_c, best_offset, best_table = -math.inf, cs[0], []
    for offset in sorted(cs):
        c_star, table = fit_for(offset)
        if c_star > best_c:
            best_c, best_offset, best_table = c_star, offset, table
    for cell in best_table:
        bound = 0.0 if math.isinf(best_c) else \
            2.0 * math.exp(-best_c * cell["t"] ** 2 * cell["n"])
        cell["bound"] = bound
        cell["holds"] = cell["ci"][0] <= bound + 1e-15
    return DeviationReport(concentration={
        "c": best_c, "C": best_offset, "passed": bool(best_c > 0),
        "alpha": alpha, "t_grid": ts, "c_grid_offsets": sorted(cs),
        "cells": best_table})


MDP_STATISTIC = "(S_n - mean(S_n)) / (a_n * sd(S_n) / sqrt(n))"


def mdp_check(stats: TrajectoryStats, a_schedule, gammas,
              alpha: float = 0.05, trend_factor: float = 0.9) -> DeviationReport:
    """Empirical (1/s_n) ln P(S_n/a_n in Gamma) against -u^2/2.

    The statistic is the centered sum over a_n in estimated per-step sd
    units (sd(S_n)/sqrt(n)); the report names it because the source
    formulation is ambiguous.  Acceptance is trend-based: the gap to
    the target must shrink from the first to the last n by at least
    trend_factor, for every interval.  Zero-count cells report the
    Clopper-Pearson upper value flagged censored and stay out of the
    trend.  The linear-variance prerequisite is checked first via
    variance_profile; a Bounded classification fails the verdict.
    """
    if not (0 < alpha < 1):
        raise ValueError("alpha must be in (0, 1)")
    if not (0 < trend_factor <= 1):
        raise ValueError("trend_factor must be in (0, 1]")
    grid = stats.n_grid
    if len(grid) < 2:
        raise ValueError("need at least two n values for a trend")
    pairs = []
    for g in gammas:
        u, v = (_scalar(g[0], "gamma lower"), _scalar(g[1], "gamma upper"))
        if not (0 < u < v):
            raise ValueError(f"gamma must satisfy 0 < u < v, got [{u}, {v}]")
        pairs.append((u, v))
    if not pairs:
        raise ValueError("gammas must be nonempty")
    a_vals = [_scalar(a_schedule(n), f"a_n at n={n}") for n in grid]
    if any(a <= 0 for a in a_vals):
        raise ValueError("a_n must be positive")
    rt = [a / math.sqrt(n) for a, n in zip(a_vals, grid)]
    if any(b <= a for a, b in zip(rt, rt[1:])):
        raise ValueError("a_n / sqrt(n) must increase on the grid")
    lin = [a / n for a, n in zip(a_vals, grid)]
    if any(b >= a for a, b in zip(lin, lin[1:])):
        raise ValueError("a_n / n must decrease on the grid")

    profile = variance_profile(stats)
    prerequisite_ok = profile.classification != "Bounded"

    cells = len(pairs) * len(grid)
    alpha_cell = alpha / cells
    z = float(sc.ndtri(1 - alpha_cell / 2))
    rows = []
    trend = {}
    for u, v in pairs:
        gaps, trend_ns = [], []
        target = -0.5 * u * u
        for n, a_n in zip(grid, a_vals):
            row = stats.sample_row(n)
            sd = float(row.std())
            if not sd > 0:
                raise ValueError(f"degenerate sample at n={n}")
            s_n = a_n * a_n / n
            stat = (row - float(row.mean())) / (a_n * sd / math.sqrt(n))
            count = int(np.count_nonzero((stat >= u) & (stat <= v)))
            entry = {"gamma": [u, v], "n": int(n), "a_n": a_n, "s_n": s_n,
                     "count": count, "phat": count / row.size,
                     "target": target}
            if count == 0:
                p_up = _clopper_pearson(0, row.size, alpha_cell)[1]
                entry.update(value=math.log(p_up) / s_n, censored=True,
                             ci=[-math.inf, math.log(p_up) / s_n], gap=None)
            else:
                phat = count / row.size
                value = math.log(phat) / s_n
                se = math.sqrt((1.0 - phat) / count)
                entry.update(value=value, censored=False,
                             ci=[(math.log(phat) - z * se) / s_n,
                                 (math.log(phat) + z * se) / s_n],
                             gap=abs(value - target))
                gaps.append(abs(value - target))
                trend_ns.append(int(n))
            rows.append(entry)
        shrinking = len(gaps) >= 2 and gaps[-1] <= trend_factor * gaps[0]
        trend[f"[{u},{v}]"] = {"n": trend_ns, "gaps": gaps,
                               "shrinking": shrinking}
    passed = prerequisite_ok and all(t["shrinking"] for t in trend.values())
    return DeviationReport(mdp={
        "statistic": MDP_STATISTIC,
        "statistic_note": "normalized sum read as centered S_n / a_n",
        "alpha": alpha, "trend_factor": trend_factor,
        "variance_classification": profile.classification,
        "prerequisite_ok": prerequisite_ok,
        "rows": rows, "trend": trend, "passed": bool(passed)})


# ------------------------------------------------------------ serialization


def distance_csv_rows(reports) -> list[tuple]:
    """(n, metric, parameter, value) rows, one per map entry."""
    rows = []
    for rep in sorted(reports, key=lambda r: r.n):
        rows.append((rep.n, "sigma", "", rep.sigma_n))
        rows.append((rep.n, "m", "", float(rep.m)))
        for s in sorted(rep.kolmogorov_s):
            rows.append((rep.n, "kolmogorov", s, rep.kolmogorov_s[s]))
        for q in sorted(rep.lq):
            rows.append((rep.n, "lq", q, rep.lq[q]))
        for p in sorted(rep.wasserstein_p):
            rows.append((rep.n, "wasserstein", p, rep.wasserstein_p[p]))
        for a in sorted(rep.moment_gaps):
            rows.append((rep.n, "moment", a, rep.moment_gaps[a]))
    return rows


def _str_keys(mapping: dict) -> dict:
    return {format(k, "g"): v for k, v in mapping.items()}


def distances_json(reports) -> dict:
    return {
        "schema": 1,
        "standardization": "per-n Monte Carlo mean and sd",
        "weighted_sup_window": WEIGHTED_SUP_WINDOW,
        "lq_domain": LQ_DOMAIN,
        "reports": [{
            "n": rep.n, "sigma_n": rep.sigma_n, "m": rep.m,
            "kolmogorov_s": _str_keys(rep.kolmogorov_s),
            "lq": _str_keys(rep.lq),
            "wasserstein_p": _str_keys(rep.wasserstein_p),
            "moment_gaps": _str_keys(rep.moment_gaps),
        } for rep in sorted(reports, key=lambda r: r.n)],
    }


def ratefit_json(fit: RateFit) -> dict:
    return {
        "schema": 1,
        "slope": fit.slope,
        "slope_ci": list(fit.slope_ci),
        "intercept": fit.intercept,
        "r2": fit.r2,
        "pairs": [list(p) for p in fit.pairs],
        "filtered_nonpositive": fit.filtered_nonpositive,
    }


def deviation_csv_rows(report: DeviationReport) -> list[tuple]:
    """(kind, param1, param2, n, value, ci_low, ci_high, flag) rows."""
    rows = []
    if report.concentration is not None:
        con = report.concentration
        for cell in con["cells"]:
            rows.append(("concentration", cell["t"], con["C"], cell["n"],
                         cell["phat"], cell["ci"][0], cell["ci"][1],
                         "holds" if cell["holds"] else "violated"))
    if report.mdp is not None:
        for cell in report.mdp["rows"]:
            rows.append(("mdp", cell["gamma"][0], cell["gamma"][1], cell["n"],
                         cell["value"], cell["ci"][0], cell["ci"][1],
                         "censored" if cell["censored"] else ""))
    return rows


def deviation_json(report: DeviationReport) -> dict:
    return {"schema": 1, "concentration": report.concentration,
            "mdp": report.mdp}
