"""Monte Carlo laboratory for the norm cocycle S_n = ln ||g_n ... g_1 x0||.

Trajectories evolve incrementally as (unit direction, accumulated log
norm) pairs, so no matrix product is ever formed and no overflow can
occur.  Because every matrix draw is a pure function of (seed, traj, j),
any worker count or chunking produces bit-identical output arrays.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .ensembles import EnsembleSpec, _markov_initial, _markov_step_batch, _sample_batch
from .matcore import Direction, SquareMatrix, unit_rows, wedge_unit
from .seeding import (
    STREAM_APPROX,
    STREAM_RESERVOIR,
    STREAM_TAIL,
    SeedPath,
    derive_key,
    substream,
)

__all__ = [
    "TrajectoryStats",
    "TailCurve",
    "ApproxCurve",
    "VarianceProfile",
    "simulate",
    "increments",
    "contraction_tail",
    "approx_coefficients",
    "variance_profile",
    "resolve_workers",
    "write_stats_csv",
    "write_samples_csv",
    "log_linear_fit",
]

SAMPLE_CAP = 1_000_000


def _as_path(seed) -> SeedPath:
    return seed if isinstance(seed, SeedPath) else SeedPath(int(seed))


def resolve_workers(workers: int | None) -> int:
    """Explicit argument wins, then COCYCLE_LAB_WORKERS, then 1.

    Worker count affects wall time only; results are identical by
    construction.
    """
    if workers is None:
        env = os.environ.get("COCYCLE_LAB_WORKERS", "").strip()
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return workers


@dataclass(frozen=True)
class TrajectoryStats:
    """Samples of S_n on a grid of n values, plus streamed moments.

    samples has shape (len(n_grid), stored) where stored = min(m, cap);
    mean/var are streamed over all m trajectories regardless of the cap.
    """

    n_grid: tuple[int, ...]
    samples: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    m: int
    master_seed: int
    spec_digest: str
    x0: tuple[float, ...]
    traj_ids: np.ndarray
    capped: bool = False

    def sample_row(self, n: int) -> np.ndarray:
        return self.samples[self.n_grid.index(n)]


@dataclass(frozen=True)
class TailCurve:
    """max-over-pairs estimates of P(ln d(g_{j,k} x, g_{j,k} y) >= -ell k)."""

    k_grid: tuple[int, ...]
    probs: np.ndarray
    per_pair: np.ndarray
    counts: np.ndarray
    censored: np.ndarray
    mc: int
    ell: float
    gamma: float
    gamma_ci: tuple[float, float]
    rate_constant: float
    r2: float
    fitted_points: int


@dataclass(frozen=True)
class ApproxCurve:
    """Decay of the L1 approximation surrogate against block length r."""

    r_grid: tuple[int, ...]
    coefs: np.ndarray
    per_pair: np.ndarray
    mc: int
    k: int
    rho: float
    rho_ci: tuple[float, float]
    r2: float


@dataclass(frozen=True)
class VarianceProfile:
    n_grid: tuple[int, ...]
    var: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    classification: str  # Divergent | Bounded | Undecided
    linear_growth_min: float
    growth_factor: float


# ------------------------------------------------------------------ simulate


def _evolve_chunk(spec: EnsembleSpec, x0: np.ndarray, grid: tuple[int, ...],
                  lo: int, hi: int, path: SeedPath, out: np.ndarray) -> None:
    m = hi - lo
    trajs = np.arange(lo, hi, dtype=np.uint64)
    x = np.broadcast_to(x0, (m, x0.shape[0])).copy()
    logn = np.zeros(m)
    states = _markov_initial(spec, m) if spec.is_markov else None
    gi = 0
    for j in range(1, grid[-1] + 1):
        if spec.is_markov:
            states = _markov_step_batch(spec, states, j, trajs, path)
            g = states
        else:
            g = _sample_batch(spec, j, trajs, path)
        x = np.einsum("mij,mj->mi", g, x)
        nrm = np.sqrt(np.sum(x * x, axis=1))
        logn += np.log(nrm)
        x /= nrm[:, None]
        if j == grid[gi]:
            out[gi, lo:hi] = logn
            gi += 1


def simulate(spec: EnsembleSpec, x0, n_grid, m: int, seed, workers: int | None = None,
             sample_cap: int = SAMPLE_CAP) -> TrajectoryStats:
    """Draw m independent trajectories and record S_n on the grid.

    x0 of None uses the spec's start direction.  Matrix draws share
    labels with sample_matrix / product_range, so per-trajectory
    increments can be cross-checked against explicit products.
    """
    from .ensembles import spec_digest as _digest

    path = _as_path(seed)
    grid = tuple(int(n) for n in n_grid)
    if len(grid) == 0 or any(n < 1 for n in grid) or list(grid) != sorted(set(grid)):
        raise ValueError("n_grid must be strictly increasing positive integers")
    if m < 2:
        raise ValueError("need at least 2 trajectories")
    if x0 is None:
        x0_vec = spec.x0.rep
    else:
        x0_vec = x0.rep if isinstance(x0, Direction) else Direction.from_vector(np.asarray(x0, float)).rep
    if x0_vec.shape[0] != spec.dim:
        raise ValueError("x0 dimension does not match the spec")

    workers = resolve_workers(workers)
    out = np.empty((len(grid), m))
    bounds = np.linspace(0, m, workers + 1).astype(int)
    jobs = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(jobs) <= 1:
        _evolve_chunk(spec, x0_vec, grid, 0, m, path, out)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_evolve_chunk, spec, x0_vec, grid, lo, hi, path, out)
                    for lo, hi in jobs]
            for f in futs:
                f.result()

    mean = out.mean(axis=1)
    var = out.var(axis=1, ddof=1)

    capped = m > sample_cap
    if capped:
        # Order-independent uniform subsample: keep the sample_cap
        # smallest trajectory hashes.
        keys = derive_key(path.master_seed, path.experiment, STREAM_RESERVOIR,
                          np.arange(m, dtype=np.uint64), 0)
        keep = np.sort(np.argpartition(keys, sample_cap)[:sample_cap])
        stored = out[:, keep]
    else:
        keep = np.arange(m)
        stored = out
    return TrajectoryStats(
        n_grid=grid, samples=stored, mean=mean, var=var, m=m,
        master_seed=path.master_seed, spec_digest=_digest(spec),
        x0=tuple(float(v) for v in x0_vec), traj_ids=keep, capped=capped,
    )


def increments(spec: EnsembleSpec, x0, n: int, seed, traj: int = 0) -> np.ndarray:
    """The cocycle increments X_1 .. X_n of a single trajectory.

    X_k = sigma(g_k, g_{k-1} ... g_1 x0); their prefix sums telescope to
    S_n exactly.
    """
    path = _as_path(seed)
    if x0 is None:
        x = spec.x0.rep.copy()
    else:
        x = (x0.rep if isinstance(x0, Direction) else Direction.from_vector(np.asarray(x0, float)).rep).copy()
    trajs = np.asarray([traj], dtype=np.uint64)
    states = _markov_initial(spec, 1) if spec.is_markov else None
    xs = np.empty(n)
    xvec = x[None, :]
    for j in range(1, n + 1):
        if spec.is_markov:
            states = _markov_step_batch(spec, states, j, trajs, path)
            g = states
        else:
            g = _sample_batch(spec, j, trajs, path)
        xvec = np.einsum("mij,mj->mi", g, xvec)
        nrm = float(np.linalg.norm(xvec[0]))
        xs[j - 1] = math.log(nrm)
        xvec = xvec / nrm
    return xs


# ------------------------------------------------------------ tail estimates


def log_linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    """OLS of y on x: (slope, intercept, slope_se, r2)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two points to fit")
    xb, yb = x.mean(), y.mean()
    sxx = float(np.sum((x - xb) ** 2))
    if sxx == 0.0:
        raise ValueError("degenerate abscissa in fit")
    slope = float(np.sum((x - xb) * (y - yb)) / sxx)
    intercept = yb - slope * xb
    resid = y - (intercept + slope * x)
    rss = float(np.sum(resid ** 2))
    tss = float(np.sum((y - yb) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    se = math.sqrt(rss / max(n - 2, 1) / sxx)
    return slope, intercept, se, r2


def contraction_tail(spec: EnsembleSpec, j: int, pairs, ell: float, k_grid, mc: int,
                     seed) -> TailCurve:
    """Estimate the worst-pair contraction tail P(ln d_k >= -ell k).

    All pairs ride the same sampled matrix stream; each sample is one
    block g_{j+k-1} ... g_j applied to every pair.
    """
    if ell <= 0:
        raise ValueError("ell must be positive")
    grid = tuple(int(k) for k in k_grid)
    if list(grid) != sorted(set(grid)) or grid[0] < 1:
        raise ValueError("k_grid must be strictly increasing positive integers")
    path = substream(_as_path(seed), STREAM_TAIL)
    reps = []
    for x, y in pairs:
        xd = x if isinstance(x, Direction) else Direction.from_vector(np.asarray(x, float))
        yd = y if isinstance(y, Direction) else Direction.from_vector(np.asarray(y, float))
        if float(wedge_unit(xd.rep, yd.rep)) <= 0.0:
            raise ValueError("tail pairs must be distinct directions")
        reps.append((xd.rep, yd.rep))
    n_pairs = len(reps)
    trajs = np.arange(mc, dtype=np.uint64)
    X = np.stack([np.broadcast_to(r[0], (mc, spec.dim)).copy() for r in reps])
    Y = np.stack([np.broadcast_to(r[1], (mc, spec.dim)).copy() for r in reps])
    states = _markov_initial(spec, mc) if spec.is_markov else None
    per_pair = np.empty((n_pairs, len(grid)))
    gi = 0
    for step in range(1, grid[-1] + 1):
        idx = j + step - 1
        if spec.is_markov:
            states = _markov_step_batch(spec, states, idx, trajs, path)
            g = states
        else:
            g = _sample_batch(spec, idx, trajs, path)
        for p in range(n_pairs):
            X[p] = unit_rows(np.einsum("mij,mj->mi", g, X[p]))
            Y[p] = unit_rows(np.einsum("mij,mj->mi", g, Y[p]))
        if step == grid[gi]:
            thr = math.exp(-ell * step)
            for p in range(n_pairs):
                w = wedge_unit(X[p], Y[p])
                per_pair[p, gi] = np.mean(w >= thr)
            gi += 1
    probs = per_pair.max(axis=0)
    counts = np.round(probs * mc).astype(int)
    censored = counts == 0
    usable = ~censored
    ks = np.asarray(grid, float)[usable]
    if usable.sum() >= 2:
        slope, intercept, se, r2 = log_linear_fit(ks, np.log(probs[usable]))
        gamma = math.exp(slope)
        gamma_ci = (math.exp(slope - 1.96 * se), math.exp(slope + 1.96 * se))
        const = math.exp(intercept)
    else:
        gamma, gamma_ci, const, r2 = 1.0, (0.0, 1.0), 1.0, 0.0
    return TailCurve(k_grid=grid, probs=probs, per_pair=per_pair, counts=counts,
                     censored=censored, mc=mc, ell=ell, gamma=min(gamma, 1.0),
                     gamma_ci=gamma_ci, rate_constant=const, r2=r2,
                     fitted_points=int(usable.sum()))


def _default_pair_grid(dim: int, n_angles: int = 6, offset: float = 1e-3):
    """Small deterministic direction-pair net used by approx_coefficients."""
    if dim == 2:
        thetas = np.pi * np.arange(n_angles) / n_angles
        dirs = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    else:
        # deterministic pseudo-net from fixed hash draws
        from scipy.special import ndtri

        from .seeding import uniform_slots

        raw = ndtri(uniform_slots(derive_key(0xD1DE, dim), n_angles * dim)).reshape(n_angles, dim)
        dirs = unit_rows(raw)
    pairs = [(dirs[i], dirs[k]) for i in range(len(dirs)) for k in range(i + 1, len(dirs))]
    # near-coincident companions probe the small-separation regime
    for i in range(len(dirs)):
        v = dirs[i].copy()
        w = v.copy()
        w[(i + 1) % dim] += offset
        pairs.append((v, w / np.linalg.norm(w)))
    return pairs


def approx_coefficients(spec: EnsembleSpec, k: int, r_grid, mc: int, seed,
                        boundary: SquareMatrix | None = None) -> ApproxCurve:
    """Worst-pair decay of E|sigma(g_k, P_r x) - sigma(g_k, P_r y)|.

    P_r = g_{k-1} ... g_{k-r} is the depth-r block ending just before
    step k; indices below 1 fall back to the boundary matrix (identity
    unless the spec or caller overrides it), so r may exceed k - 1.
    """
    grid = tuple(int(r) for r in r_grid)
    if list(grid) != sorted(set(grid)) or grid[0] < 0:
        raise ValueError("r_grid must be strictly increasing with r >= 0")
    if spec.is_markov:
        raise ValueError("approximation coefficients assume an independent spec")
    path = substream(_as_path(seed), STREAM_APPROX)
    bmat = (boundary or spec.boundary_matrix).entries
    pairs = _default_pair_grid(spec.dim)
    trajs = np.arange(mc, dtype=np.uint64)
    g_last = _sample_batch(spec, k, trajs, path)
    per_pair = np.empty((len(pairs), len(grid)))
    for ri, r in enumerate(grid):
        X = np.stack([np.broadcast_to(p[0], (mc, spec.dim)) for p in pairs]).copy()
        Y = np.stack([np.broadcast_to(p[1], (mc, spec.dim)) for p in pairs]).copy()
        for idx in range(k - r, k):
            g = _sample_batch(spec, idx, trajs, path) if idx >= 1 \
                else np.broadcast_to(bmat, (mc, spec.dim, spec.dim))
            for p in range(len(pairs)):
                X[p] = unit_rows(np.einsum("mij,mj->mi", g, X[p]))
                Y[p] = unit_rows(np.einsum("mij,mj->mi", g, Y[p]))
        for p in range(len(pairs)):
            sx = np.log(np.linalg.norm(np.einsum("mij,mj->mi", g_last, X[p]), axis=1))
            sy = np.log(np.linalg.norm(np.einsum("mij,mj->mi", g_last, Y[p]), axis=1))
            per_pair[p, ri] = np.mean(np.abs(sx - sy))
    coefs = per_pair.max(axis=0)
    usable = coefs > 0
    if int(usable.sum()) >= 2:
        slope, _, se, r2 = log_linear_fit(np.asarray(grid, float)[usable],
                                          np.log(coefs[usable]))
        rho = math.exp(slope)
        rho_ci = (math.exp(slope - 1.96 * se), math.exp(slope + 1.96 * se))
    else:
        rho, rho_ci, r2 = 1.0, (0.0, 1.0), 0.0
    return ApproxCurve(r_grid=grid, coefs=coefs, per_pair=per_pair, mc=mc, k=k,
                       rho=rho, rho_ci=rho_ci, r2=r2)


# --------------------------------------------------------------- variance


def variance_profile(stats: TrajectoryStats, growth_factor: float = 2.0,
                     quartile: float = 0.25) -> VarianceProfile:
    """Classify Var(S_n) growth as Divergent, Bounded, or Undecided.

    Divergent: top-quartile n's average variance exceeds growth_factor
    times the bottom quartile's, with the groups' chi-square CIs
    disjoint.  Bounded: one value is inside every per-n CI.  Anything
    else is Undecided.
    """
    n = len(stats.n_grid)
    dof = stats.m - 1
    lo_q = sps.chi2.ppf(0.975, dof)
    hi_q = sps.chi2.ppf(0.025, dof)
    ci_low = dof * stats.var / lo_q
    ci_high = dof * stats.var / hi_q
    k = max(1, int(math.floor(n * quartile)))
    bottom = slice(0, k)
    top = slice(n - k, n)
    divergent = (
        stats.var[top].mean() > growth_factor * max(stats.var[bottom].mean(), 1e-300)
        and float(ci_low[top].min()) > float(ci_high[bottom].max())
    )
    if divergent:
        cls = "Divergent"
    elif float(ci_low.max()) <= float(ci_high.min()) + 1e-12:
        cls = "Bounded"
    else:
        cls = "Undecided"
    top_half = stats.var[n // 2:] / np.asarray(stats.n_grid[n // 2:], float)
    return VarianceProfile(
        n_grid=stats.n_grid, var=stats.var, ci_low=ci_low, ci_high=ci_high,
        classification=cls, linear_growth_min=float(top_half.min()),
        growth_factor=growth_factor,
    )


# --------------------------------------------------------------- interchange


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_stats_csv(stats: TrajectoryStats, path: str) -> None:
    """Columns n, mean, var, m; floats carry 17 significant digits."""
    lines = ["n,mean,var,m"]
    for i, n in enumerate(stats.n_grid):
        lines.append(f"{n},{_fmt(stats.mean[i])},{_fmt(stats.var[i])},{stats.m}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_samples_csv(stats: TrajectoryStats, path: str, cap: int | None = None) -> None:
    """Per-sample rows (n, traj, value); deterministic subsample beyond cap.

    traj is the original trajectory index, stable under any cap, so rows
    can be matched against targeted re-simulation.
    """
    stored = stats.samples
    m = stored.shape[1]
    if cap is not None and cap < m:
        keys = derive_key(stats.master_seed, 0, STREAM_RESERVOIR,
                          stats.traj_ids.astype(np.uint64), 1)
        keep = np.sort(np.argpartition(keys, cap)[:cap])
    else:
        keep = np.arange(m)
    with open(path, "w") as fh:
        fh.write("n,traj,value\n")
        for i, n in enumerate(stats.n_grid):
            rows = "\n".join(
                f"{n},{stats.traj_ids[t]},{_fmt(stored[i, t])}" for t in keep
            )
            fh.write(rows + "\n")
