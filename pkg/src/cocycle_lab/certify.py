"""Checkers for sufficient contraction conditions on matrix products.

Each checker returns a CertificateReport.  Statistical checkers estimate
a supremum by a deterministic direction-pair net plus local refinement,
with Bonferroni-widened confidence intervals so that Certified is
conservative: even the refined worst cell clears the threshold.  The
lemma checkers are pure arithmetic and bit-for-bit reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .ensembles import (
    EnsembleSpec,
    _markov_initial,
    _markov_step_batch,
    _sample_batch,
    _sample_coupled_batch,
    spec_digest,
)
from .matcore import SquareMatrix, svd, unit_rows, wedge_unit
from .seeding import (
    STREAM_DECAY,
    STREAM_MARKOV_STATE,
    STREAM_MOMENT,
    STREAM_PAIR_SEARCH,
    STREAM_REFINE,
    STREAM_SVD_GAP,
    STREAM_THETA,
    STREAM_U1,
    SeedPath,
    derive_key,
    normal_slots,
    substream,
)

__all__ = [
    "CertificateReport",
    "PairSearchConfig",
    "c_bound",
    "c_tilde",
    "estimate_log_contraction",
    "estimate_holder_contraction",
    "check_decay_condition",
    "check_sl2_moment",
    "solve_eps0",
    "check_lemma_bounded",
    "check_lemma_unbounded",
    "r_bound",
    "check_svd_condition",
    "check_u1_regularity",
    "perturbation_theta",
    "check_markov_contraction",
    "svd_probability_vectors",
    "report_to_json_dict",
    "report_from_json_dict",
]

MIN_PAIR_DISTANCE = 1e-6
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class CertificateReport:
    """Outcome of one condition check.

    margin = threshold - ci_high; Certified iff margin > 0, Refuted iff
    ci_low already sits at or past the threshold, else Inconclusive.
    """

    condition: str
    estimate: float
    ci_low: float
    ci_high: float
    threshold: float
    margin: float
    verdict: str
    samples_used: int
    seed: int
    spec_digest: str | None = None
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PairSearchConfig:
    """Budget for the sup-over-directions search."""

    grid_size: int = 8
    refine_rounds: int = 2
    mc_per_pair: int = 4000

    def __post_init__(self):
        for name in ("grid_size", "mc_per_pair"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.refine_rounds < 0:
            raise ValueError("refine_rounds must be nonnegative")


def _as_path(seed) -> SeedPath:
    return seed if isinstance(seed, SeedPath) else SeedPath(int(seed))


def _verdict(ci_low: float, ci_high: float, threshold: float) -> tuple[float, str]:
    margin = threshold - ci_high
    if math.isnan(margin) or math.isnan(ci_low):
        return margin, "Inconclusive"
    if margin > 0:
        return margin, "Certified"
    if ci_low >= threshold:
        return margin, "Refuted"
    return margin, "Inconclusive"


def _report(condition: str, estimate: float, ci_low: float, ci_high: float,
            threshold: float, samples: int, seed, digest: str | None,
            extras: dict | None = None) -> CertificateReport:
    margin, verdict = _verdict(ci_low, ci_high, threshold)
    path = _as_path(seed)
    return CertificateReport(
        condition=condition, estimate=float(estimate), ci_low=float(ci_low),
        ci_high=float(ci_high), threshold=float(threshold), margin=float(margin),
        verdict=verdict, samples_used=int(samples), seed=path.master_seed,
        spec_digest=digest, extras=extras or {},
    )


def bonferroni_z(cells: int) -> float:
    """Two-sided 95% normal quantile split across `cells` comparisons."""
    return float(ndtri(1.0 - 0.025 / max(cells, 1)))


def report_to_json_dict(rep: CertificateReport) -> dict:
    return {
        "condition": rep.condition,
        "estimate": rep.estimate,
        "ci": [rep.ci_low, rep.ci_high],
        "threshold": rep.threshold,
        "margin": rep.margin,
        "verdict": rep.verdict,
        "samples": rep.samples_used,
        "seed": rep.seed,
        "spec_digest": rep.spec_digest,
        "extras": rep.extras,
    }


def report_from_json_dict(d: dict) -> CertificateReport:
    return CertificateReport(
        condition=d["condition"], estimate=float(d["estimate"]),
        ci_low=float(d["ci"][0]), ci_high=float(d["ci"][1]),
        threshold=float(d["threshold"]), margin=float(d["margin"]),
        verdict=d["verdict"], samples_used=int(d["samples"]),
        seed=int(d["seed"]), spec_digest=d.get("spec_digest"),
        extras=d.get("extras", {}),
    )


# ----------------------------------------------------- pure arithmetic


def _pair_norms(A: SquareMatrix, B: SquareMatrix) -> float:
    if A.dim != B.dim:
        raise ValueError("matrices must share dimension")
    return float(np.linalg.svd(A.entries - B.entries, compute_uv=False)[0])


def c_bound(A: SquareMatrix, B: SquareMatrix) -> float:
    """(||A||+||B||) ||A-B|| (1/s_min(A)^2 + ||B||^2/(s_min(A)^2 s_min(B)^2))."""
    diff = _pair_norms(A, B)
    sa2 = A.sigma_min ** 2
    sb2 = B.sigma_min ** 2
    return (A.norm + B.norm) * diff * (1.0 / sa2 + B.norm ** 2 / (sa2 * sb2))


def c_tilde(A: SquareMatrix, B: SquareMatrix) -> float:
    """(||A||+||B||) ||A-B|| (||A^-1||^2 + ||B||^2 ||A^-1||^2 ||B^-1||^2)."""
    diff = _pair_norms(A, B)
    ia2 = A.inv_norm ** 2
    ib2 = B.inv_norm ** 2
    return (A.norm + B.norm) * diff * (ia2 + B.norm ** 2 * ia2 * ib2)


def _eps0_excess(eps: float) -> float:
    # the strict inequality 1 - 2 e ln(3/2) + 4 e^2 2^(2e) ln^2 2 < 1 - e/2
    # factors as e * (this expression) < 0 for e > 0
    return 0.5 - 2.0 * math.log(1.5) + 4.0 * eps * 2.0 ** (2.0 * eps) * math.log(2.0) ** 2


def solve_eps0() -> float:
    """Largest eps0 in (0, 1) satisfying the quadratic moment inequality."""
    lo, hi = 0.0, 1.0
    if _eps0_excess(hi) < 0:
        return hi
    while hi - lo > 1e-8:
        mid = 0.5 * (lo + hi)
        if _eps0_excess(mid) < 0:
            lo = mid
        else:
            hi = mid
    return lo


def check_lemma_bounded(A: float, B: float, C: float, alpha: float,
                        eps0: float) -> CertificateReport:
    """Arithmetic test of A^alpha >= C 2^alpha B^(2 eps0) / eps0.

    Applies to a random matrix G with A <= ||G|| <= B almost surely and
    alignment tail P(|<u1,x>| <= delta) <= C delta^alpha; on Certified
    the recorded claim is sup_x E||Gx||^(-2 eps0) <= 1 - eps0/4.
    """
    if not (2.0 < A < B):
        raise ValueError("need 2 < A < B")
    if C <= 0 or alpha <= 0:
        raise ValueError("C and alpha must be positive")
    star = solve_eps0()
    if not (0.0 < eps0 <= star + 1e-12):
        raise ValueError(f"eps0 must lie in (0, {star:.10f}]")
    rhs = C * 2.0 ** alpha * B ** (2.0 * eps0) / eps0
    lhs = A ** alpha
    est = rhs / lhs
    return _report(
        "lemma_bounded_norm", est, est, est, 1.0, 0, 0, None,
        extras={"lhs": lhs, "rhs": rhs, "eps0": eps0,
                "claim": "sup_x E||Gx||^(-2*eps0) <= 1 - eps0/4"},
    )


def check_lemma_unbounded(A: float, B: float, C: float, D: float, alpha: float,
                          q: float, eps0: float) -> CertificateReport:
    """Arithmetic test of A^(alpha/q) > 4 B^(2 eps0) (D^(1/q) + 2^(alpha/q) C^(1/q)) / eps0.

    Covers unbounded ||G|| with P(||G|| < A) <= D A^(-alpha) and an
    L^(2 eps0 p) norm bound B, 1/p + 1/q = 1; q = 1 means p = infinity,
    which is the bounded regime up to the constant 4.
    """
    if A <= 2.0:
        raise ValueError("need A > 2")
    if D < 0:
        raise ValueError("D must be nonnegative")
    if q < 1.0:
        raise ValueError("q must be >= 1")
    if C <= 0 or alpha <= 0:
        raise ValueError("C and alpha must be positive")
    star = solve_eps0()
    if not (0.0 < eps0 <= star + 1e-12):
        raise ValueError(f"eps0 must lie in (0, {star:.10f}]")
    rhs = 4.0 * B ** (2.0 * eps0) * (D ** (1.0 / q) + 2.0 ** (alpha / q) * C ** (1.0 / q)) / eps0
    lhs = A ** (alpha / q)
    est = rhs / lhs
    p = math.inf if q == 1.0 else q / (q - 1.0)
    return _report(
        "lemma_unbounded_norm", est, est, est, 1.0, 0, 0, None,
        extras={"lhs": lhs, "rhs": rhs, "eps0": eps0, "p": p,
                "claim": "sup_x E||Gx||^(-2*eps0) <= 1 - eps0/4"},
    )


def r_bound(C: float, alpha: float) -> float:
    """1 + C/alpha bounds E|ln X| when P(X <= e) <= C |ln e|^(-1-alpha)."""
    if C <= 0 or alpha <= 0:
        raise ValueError("C and alpha must be positive")
    return 1.0 + C / alpha


# ------------------------------------------------- direction-pair nets


def _direction_net(dim: int, size: int) -> np.ndarray:
    """Deterministic unit-direction net of `size` points."""
    if dim == 2:
        th = np.pi * np.arange(size) / size
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if dim == 3:
        # Fibonacci hemisphere (projective points)
        i = np.arange(size) + 0.5
        z = i / size
        phi = i * math.pi * (3.0 - math.sqrt(5.0))
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    raw = normal_slots(derive_key(0xA11CE, dim, size), size * dim).reshape(size, dim)
    return unit_rows(raw)


def _transverse_companion(v: np.ndarray, offset: float = 1e-3) -> np.ndarray:
    """A direction at projective distance ~offset from v.

    The perturbation is orthogonalized against v (via the least-aligned
    coordinate axis) so the companion never degenerates to v itself.
    """
    m = int(np.argmin(np.abs(v)))
    e = np.zeros_like(v)
    e[m] = 1.0
    perp = e - float(e @ v) * v
    perp /= np.linalg.norm(perp)
    w = v + offset * perp
    return w / np.linalg.norm(w)


def _pair_net(dim: int, grid_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """All net pairs plus a near-coincident companion per net point."""
    dirs = _direction_net(dim, grid_size)
    pairs = []
    for i in range(grid_size):
        for k in range(i + 1, grid_size):
            if float(wedge_unit(dirs[i], dirs[k])) >= MIN_PAIR_DISTANCE:
                pairs.append((dirs[i], dirs[k]))
    for i in range(grid_size):
        v = dirs[i]
        w = _transverse_companion(v)
        if float(wedge_unit(v, w)) >= MIN_PAIR_DISTANCE:
            pairs.append((v, w))
    return pairs


def _propose_pairs(x: np.ndarray, y: np.ndarray, rnd: int, scale: float,
                   path: SeedPath, count: int = 4) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random local perturbations of the worst pair, deterministic in (path, rnd)."""
    d = x.shape[0]
    key = derive_key(path.master_seed, path.experiment, STREAM_REFINE, rnd)
    noise = normal_slots(key, count * 2 * d).reshape(count, 2, d)
    out = []
    for c in range(count):
        xv = x + scale * noise[c, 0]
        yv = y + scale * noise[c, 1]
        nx, ny = np.linalg.norm(xv), np.linalg.norm(yv)
        if nx == 0 or ny == 0:
            continue
        xv, yv = xv / nx, yv / ny
        if float(wedge_unit(xv, yv)) >= MIN_PAIR_DISTANCE:
            out.append((xv, yv))
    return out


def _evolve_pair_block(spec: EnsembleSpec, pairs, j: int, n0: int, mc: int,
                       path: SeedPath, states: np.ndarray | None = None,
                       trajs: np.ndarray | None = None) -> np.ndarray:
    """(n_pairs, mc) per-sample log distance ratios over the block g_{j,n0}.

    All pairs share one matrix stream (common random numbers).  For a
    Markov spec with states=None the chain is evolved from its initial
    state through step j-1 first, so the block law is the unconditional
    one.
    """
    n_pairs = len(pairs)
    dim = spec.dim
    if trajs is None:
        trajs = np.arange(mc, dtype=np.uint64)
    X = np.stack([np.broadcast_to(p[0], (mc, dim)) for p in pairs]).copy()
    Y = np.stack([np.broadcast_to(p[1], (mc, dim)) for p in pairs]).copy()
    w0 = np.array([float(wedge_unit(p[0], p[1])) for p in pairs])
    if spec.is_markov and states is None:
        states = _markov_initial(spec, mc)
        for idx in range(1, j):
            states = _markov_step_batch(spec, states, idx, trajs, path)
    for step in range(n0):
        idx = j + step
        if spec.is_markov:
            states = _markov_step_batch(spec, states, idx, trajs, path)
            g = states
        else:
            g = _sample_batch(spec, idx, trajs, path)
        for p in range(n_pairs):
            X[p] = unit_rows(np.einsum("mij,mj->mi", g, X[p]))
            Y[p] = unit_rows(np.einsum("mij,mj->mi", g, Y[p]))
    out = np.empty((n_pairs, mc))
    for p in range(n_pairs):
        w = np.maximum(wedge_unit(X[p], Y[p]), _LOG_FLOOR)
        out[p] = np.log(w) - math.log(w0[p])
    return out


def _sup_search(spec: EnsembleSpec, j: int, n0: int, search: PairSearchConfig,
                path: SeedPath, transform) -> dict:
    """Grid + refinement maximization of mean(transform(log ratios)) over pairs."""
    pairs = _pair_net(spec.dim, search.grid_size)
    lr = _evolve_pair_block(spec, pairs, j, n0, search.mc_per_pair, path)
    vals = transform(lr)
    means = vals.mean(axis=1)
    ses = vals.std(axis=1, ddof=1) / math.sqrt(search.mc_per_pair)
    cells = len(pairs)
    wi = int(np.argmax(means))
    worst = (pairs[wi][0], pairs[wi][1], float(means[wi]), float(ses[wi]))
    grid_means = means.copy()
    for rnd in range(1, search.refine_rounds + 1):
        cands = _propose_pairs(worst[0], worst[1], rnd, 0.3 * 0.5 ** rnd, path)
        if not cands:
            continue
        lr_c = _evolve_pair_block(spec, cands, j, n0, search.mc_per_pair, path)
        vals_c = transform(lr_c)
        m_c = vals_c.mean(axis=1)
        s_c = vals_c.std(axis=1, ddof=1) / math.sqrt(search.mc_per_pair)
        cells += len(cands)
        ci = int(np.argmax(m_c))
        if m_c[ci] > worst[2]:
            worst = (cands[ci][0], cands[ci][1], float(m_c[ci]), float(s_c[ci]))
    z = bonferroni_z(cells)
    return {
        "estimate": worst[2],
        "ci_low": worst[2] - z * worst[3],
        "ci_high": worst[2] + z * worst[3],
        "cells": cells,
        "z": z,
        "worst_pair": (worst[0].tolist(), worst[1].tolist()),
        "grid_means": grid_means.tolist(),
        "samples": search.mc_per_pair * cells,
    }


def estimate_log_contraction(spec: EnsembleSpec, j: int, n0: int,
                             search: PairSearchConfig, seed) -> CertificateReport:
    """Estimate sup over direction pairs of E[ln(d(Gx, Gy)/d(x, y))], G = g_{j,n0}.

    Certified iff the Bonferroni-adjusted upper CI of the worst cell is
    negative; the certified contraction rate delta = -ci_high is stored
    in extras.  The search lower-bounds the true sup, so Refuted and
    Inconclusive are trustworthy while Certified additionally relies on
    the net resolution (recorded for the caller).
    """
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    if j < 1:
        raise ValueError("j must be >= 1")
    path = substream(_as_path(seed), STREAM_PAIR_SEARCH)
    res = _sup_search(spec, j, n0, search, path, lambda lr: lr)
    extras = {
        "j": j, "n0": n0, "cells": res["cells"], "worst_pair": res["worst_pair"],
        "grid_means": res["grid_means"], "sup_lower_bound_caveat": True,
    }
    if res["ci_high"] < 0:
        extras["delta"] = -res["ci_high"]
    return _report("average_log_contraction", res["estimate"], res["ci_low"],
                   res["ci_high"], 0.0, res["samples"], seed, spec_digest(spec), extras)


def estimate_holder_contraction(spec: EnsembleSpec, j: int, n0: int, alpha: float,
                                search: PairSearchConfig, seed) -> CertificateReport:
    """Estimate sup over pairs of E[(d(Gx, Gy)/d(x, y))^alpha]; Certified iff < 1.

    Shares matrix streams with estimate_log_contraction so the Jensen
    relation alpha * E[ln R] <= ln E[R^alpha] can be audited on
    identical samples; both sides for the worst cell land in extras.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    if n0 < 1 or j < 1:
        raise ValueError("j and n0 must be >= 1")
    path = substream(_as_path(seed), STREAM_PAIR_SEARCH)

    def to_ratio(lr):
        return np.exp(alpha * lr)

    res = _sup_search(spec, j, n0, search, path, to_ratio)
    log_res = _sup_search(spec, j, n0, search, path, lambda lr: lr)
    extras = {
        "j": j, "n0": n0, "alpha": alpha, "cells": res["cells"],
        "worst_pair": res["worst_pair"], "grid_means": res["grid_means"],
        "jensen_lhs": alpha * log_res["estimate"],
        "jensen_rhs": math.log(res["estimate"]) if res["estimate"] > 0 else -math.inf,
        "log_grid_means": log_res["grid_means"],
    }
    return _report("holder_contraction", res["estimate"], res["ci_low"],
                   res["ci_high"], 1.0, res["samples"], seed, spec_digest(spec), extras)


# ----------------------------------------------------- norm-sum decay


def check_decay_condition(spec: EnsembleSpec, j_range, mc: int, seed) -> CertificateReport:
    """sup_j of E[ln ||g_j||] + E[ln ||g_j^-1||], certified below 1/2.

    The two expectations collapse to E[ln(sigma_1/sigma_d)] sample by
    sample.  On Certified the report records the claimed consequence:
    one-step average logarithmic contraction.
    """
    if mc < 100:
        raise ValueError("mc must be >= 100")
    js = [int(j) for j in j_range]
    if not js or any(j < 1 for j in js):
        raise ValueError("j_range must hold indices >= 1")
    path = substream(_as_path(seed), STREAM_DECAY)
    trajs = np.arange(mc, dtype=np.uint64)
    means, ses = [], []
    if spec.is_markov:
        states = _markov_initial(spec, mc)
        top = max(js)
        per_j = {}
        for idx in range(1, top + 1):
            states = _markov_step_batch(spec, states, idx, trajs, path)
            if idx in js:
                per_j[idx] = states.copy()
        samples_by_j = [per_j[j] for j in js]
    else:
        samples_by_j = [_sample_batch(spec, j, trajs, path) for j in js]
    for g in samples_by_j:
        sv = np.linalg.svd(g, compute_uv=False)
        y = np.log(sv[:, 0] / sv[:, -1])
        means.append(float(y.mean()))
        ses.append(float(y.std(ddof=1) / math.sqrt(mc)))
    z = bonferroni_z(len(js))
    wi = int(np.argmax(means))
    est = means[wi]
    extras = {"per_j": {str(j): m for j, m in zip(js, means)}, "worst_j": js[wi]}
    rep = _report("norm_decay_sum", est, est - z * ses[wi], est + z * ses[wi],
                  0.5, mc * len(js), seed, spec_digest(spec), extras)
    if rep.verdict == "Certified":
        rep.extras["implied"] = "average_log_contraction(n0=1)"
    return rep


# ------------------------------------------------- negative sl2 moment


def _block_products(spec: EnsembleSpec, j: int, n0: int, mc: int,
                    path: SeedPath) -> np.ndarray:
    trajs = np.arange(mc, dtype=np.uint64)
    P = np.broadcast_to(np.eye(spec.dim), (mc, spec.dim, spec.dim)).copy()
    for step in range(n0):
        g = _sample_batch(spec, j + step, trajs, path)
        P = np.einsum("mij,mjk->mik", g, P)
    return P


def check_sl2_moment(spec: EnsembleSpec, n0: int, epsilon: float,
                     search: PairSearchConfig, seed) -> CertificateReport:
    """sup over unit x of E[||h_{1,n0} x||^(-2 epsilon)], certified below 1.

    Requires a 2x2 family emitting |det| = 1; blocks are renormalized to
    unit determinant to remove floating-point drift before the moment.
    """
    if spec.dim != 2:
        raise ValueError("negative-moment check is stated for dimension 2")
    if spec.is_markov:
        raise ValueError("negative-moment check needs an independent family")
    if not spec.is_unimodular:
        raise ValueError("family must emit |det g| = 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    path = substream(_as_path(seed), STREAM_MOMENT)
    P = _block_products(spec, 1, n0, search.mc_per_pair, path)
    det = P[:, 0, 0] * P[:, 1, 1] - P[:, 0, 1] * P[:, 1, 0]
    P = P / np.sqrt(np.abs(det))[:, None, None]

    def moment(xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        img = np.einsum("mij,pj->pmi", P, xs)
        nrm = np.linalg.norm(img, axis=2)
        vals = nrm ** (-2.0 * epsilon)
        return vals.mean(axis=1), vals.std(axis=1, ddof=1) / math.sqrt(P.shape[0])

    xs = _direction_net(2, search.grid_size)
    means, ses = moment(xs)
    cells = len(xs)
    wi = int(np.argmax(means))
    worst = (xs[wi], float(means[wi]), float(ses[wi]))
    grid_means = means.tolist()
    for rnd in range(1, search.refine_rounds + 1):
        key = derive_key(path.master_seed, path.experiment, STREAM_REFINE, rnd)
        noise = normal_slots(key, 4 * 2).reshape(4, 2)
        cand = unit_rows(worst[0][None, :] + 0.3 * 0.5 ** rnd * noise)
        m_c, s_c = moment(cand)
        cells += len(cand)
        ci = int(np.argmax(m_c))
        if m_c[ci] > worst[1]:
            worst = (cand[ci], float(m_c[ci]), float(s_c[ci]))
    z = bonferroni_z(cells)
    extras = {"epsilon": epsilon, "n0": n0, "worst_x": worst[0].tolist(),
              "grid_means": grid_means, "cells": cells}
    return _report("sl2_negative_moment", worst[1], worst[1] - z * worst[2],
                   worst[1] + z * worst[2], 1.0, search.mc_per_pair * cells,
                   seed, spec_digest(spec), extras)


# ------------------------------------------------------ svd alignment


def svd_probability_vectors(g: SquareMatrix, x: np.ndarray, y: np.ndarray
                            ) -> tuple[np.ndarray, np.ndarray]:
    """The two weight systems in the wedge-ratio expansion over the left
    singular basis u_i: normalized pair weights A (i < j, flattened) and
    plain products a[i, j] = <u_i,x>^2 <u_j,y>^2.  Both sum to 1 for
    unit x, y.
    """
    t = svd(g)
    u = t.U.T  # rows are u_i
    px = u @ np.asarray(x, float)
    py = u @ np.asarray(y, float)
    d = len(px)
    cross = np.outer(px, py) - np.outer(py, px)  # cross[i, j] = <u_i,x><u_j,y> - <u_i,y><u_j,x>
    iu = np.triu_indices(d, k=1)
    a_upper = cross[iu] ** 2
    total = a_upper.sum()
    if total <= 0:
        raise ValueError("x and y must be distinct directions")
    return a_upper / total, np.outer(px ** 2, py ** 2)


def _divergence_guard(spec: EnsembleSpec, x: np.ndarray, path: SeedPath,
                      guard_samples: int) -> tuple[bool, list, int]:
    """Running-mean watch of |ln|<u1, x>|| across doubling sample sizes.

    Returns (divergent, checkpoints, samples_used).  Divergent means the
    mean went non-finite or still grew more than 20% over the last
    doubling, the signature of an infinite integral hiding behind any
    finite estimate.
    """
    ratios = []
    running_sum, running_n = 0.0, 0
    checkpoints = []
    prev_mean = None
    total = 0
    while total < guard_samples:
        # small chunks early so every doubling checkpoint is hit
        chunk = (1 << 10) if total < (1 << 14) else (1 << 14)
        take = min(chunk, guard_samples - total)
        tr = np.arange(total, total + take, dtype=np.uint64)
        gg = _sample_batch(spec, 1, tr, path)
        uu = np.linalg.svd(gg)[0][:, :, 0]
        ip = np.abs(uu @ x)
        with np.errstate(divide="ignore"):
            vals = np.abs(np.log(ip))
        running_sum += float(vals.sum())
        running_n += take
        total += take
        if total >= (1 << 10) and (total & (total - 1)) == 0:
            mean_here = running_sum / running_n
            checkpoints.append((total, mean_here))
            if prev_mean is not None and math.isfinite(prev_mean) and prev_mean > 0:
                ratios.append(mean_here / prev_mean)
            prev_mean = mean_here
    final_mean = running_sum / running_n if running_n else 0.0
    divergent = not math.isfinite(final_mean) or bool(ratios and ratios[-1] > 1.2)
    return divergent, checkpoints, running_n


def check_svd_condition(spec: EnsembleSpec, delta: float, mc: int,
                        search: PairSearchConfig, seed,
                        guard_samples: int = 1 << 20) -> CertificateReport:
    """sup over unit x of 2 E|ln|<u1, x>|| against E[ln(sigma1/sigma2)] - delta.

    u1 is the top left-singular direction of each sample.  Certified
    implies (recorded claim) that the expected log wedge ratio is at
    most -delta for every direction pair.  A divergence guard watches
    the running mean of |ln|<u1, x>|| at the worst x across doubling
    sample sizes; growth beyond 20% per doubling, or a non-finite mean,
    yields Inconclusive instead of a finite lie.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if spec.is_markov:
        raise ValueError("svd alignment check needs an independent family")
    path = substream(_as_path(seed), STREAM_SVD_GAP)
    trajs = np.arange(mc + 1, dtype=np.uint64)
    g = _sample_batch(spec, 1, trajs, path)
    U, S, _ = np.linalg.svd(g)
    u1 = U[:, :, 0]
    gap = np.log(S[1:, 0] / S[1:, 1])
    rhs_mean = float(gap.mean())
    rhs_se = float(gap.std(ddof=1) / math.sqrt(mc))
    # sample 0 only seeds the adaptive probe below and is excluded from
    # every estimate, so the probe stays honest for continuous laws
    u1_eval = u1[1:]

    def lhs(xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ip = np.abs(u1_eval @ xs.T)  # (mc, n_x)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = 2.0 * np.abs(np.log(ip))
            return vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(mc)

    xs = _direction_net(spec.dim, search.grid_size)
    # adaptive probe orthogonal to the held-out u1: an atomic alignment
    # law then produces exactly-zero inner products and trips the guard
    probe = np.zeros(spec.dim)
    probe[0], probe[1] = -u1[0, 1], u1[0, 0]
    if np.linalg.norm(probe) > 0:
        xs = np.vstack([xs, probe / np.linalg.norm(probe)])
    means, ses = lhs(xs)
    cells = len(xs)
    wi = int(np.argmax(means))
    worst = (xs[wi], float(means[wi]), float(ses[wi]))
    grid_means = means.tolist()
    for rnd in range(1, search.refine_rounds + 1):
        key = derive_key(path.master_seed, path.experiment, STREAM_REFINE, rnd)
        noise = normal_slots(key, 4 * spec.dim).reshape(4, spec.dim)
        cand = unit_rows(worst[0][None, :] + 0.3 * 0.5 ** rnd * noise)
        m_c, s_c = lhs(cand)
        cells += len(cand)
        ci = int(np.argmax(m_c))
        if m_c[ci] > worst[1]:  # an infinite worst stays put and trips the guard
            worst = (cand[ci], float(m_c[ci]), float(s_c[ci]))

    # divergence guard at the worst direction
    if math.isfinite(worst[1]):
        divergent, checkpoints, running_n = _divergence_guard(
            spec, worst[0], substream(path, STREAM_REFINE), guard_samples)
    else:
        divergent, checkpoints, running_n = True, [], 0

    z = bonferroni_z(cells)
    threshold = rhs_mean - 1.96 * rhs_se - delta
    extras = {
        "delta": delta, "rhs_estimate": rhs_mean,
        "rhs_ci": [rhs_mean - 1.96 * rhs_se, rhs_mean + 1.96 * rhs_se],
        "worst_x": worst[0].tolist(), "grid_means": grid_means,
        "guard_checkpoints": checkpoints[-3:], "cells": cells,
        "claim": "sup pairs E[ln(||Gx^Gy|| / (||x^y|| ||Gx|| ||Gy||))] <= -delta",
    }
    if divergent:
        extras["divergent"] = True
        return CertificateReport(
            condition="svd_gap_alignment", estimate=worst[1], ci_low=worst[1],
            ci_high=math.inf, threshold=threshold, margin=-math.inf,
            verdict="Inconclusive", samples_used=mc + running_n,
            seed=_as_path(seed).master_seed, spec_digest=spec_digest(spec),
            extras=extras)
    return _report("svd_gap_alignment", worst[1], worst[1] - z * worst[2],
                   worst[1] + z * worst[2], threshold, mc + running_n, seed,
                   spec_digest(spec), extras)


# ------------------------------------------------------ u1 regularity


def check_u1_regularity(spec: EnsembleSpec, C: float, alpha: float, mode: str,
                        mc: int, seed) -> CertificateReport:
    """Empirical tail of |<u1, x>| against C d^alpha or C |ln d|^(-1-alpha).

    Certified iff the empirical tail stays within three binomial
    standard errors of the bound at every (x, d) grid point; a robust
    violation anywhere refutes.  The estimate is the worst noise-adjusted
    excess, so the verdict is never Inconclusive.
    """
    if C <= 0 or alpha <= 0:
        raise ValueError("C and alpha must be positive")
    if mode not in ("PowerLaw", "LogLaw"):
        raise ValueError("mode must be PowerLaw or LogLaw")
    if mode == "PowerLaw" and spec.dim != 2:
        raise ValueError("the power-law bound is stated for dimension 2")
    if spec.is_markov:
        raise ValueError("alignment regularity needs an independent family")
    path = substream(_as_path(seed), STREAM_U1)
    trajs = np.arange(mc + 1, dtype=np.uint64)
    g = _sample_batch(spec, 1, trajs, path)
    u1 = np.linalg.svd(g)[0][:, :, 0]

    xs = _direction_net(spec.dim, 8)
    # adaptive probe: a direction orthogonal to a held-out u1 sample
    # catches atomic alignment laws exactly without biasing estimates
    probe = np.zeros(spec.dim)
    probe[0], probe[1] = -u1[0, 1], u1[0, 0]
    if np.linalg.norm(probe) > 0:
        xs = np.vstack([xs, probe / np.linalg.norm(probe)])
    u1 = u1[1:]

    deltas = np.geomspace(1e-6, 0.5, 25)
    if mode == "PowerLaw":
        bound = C * deltas ** alpha
    else:
        bound = C * np.abs(np.log(deltas)) ** (-1.0 - alpha)
    ip = np.abs(u1 @ xs.T)  # (mc, n_x)
    phat = (ip[:, :, None] <= deltas[None, None, :]).mean(axis=0)  # (n_x, n_d)
    se = np.sqrt(phat * (1.0 - phat) / mc)
    excess = phat - bound[None, :] - 3.0 * se
    wi = np.unravel_index(int(np.argmax(excess)), excess.shape)
    est = float(excess[wi])
    extras = {
        "mode": mode, "C": C, "alpha": alpha,
        "worst_x": xs[wi[0]].tolist(), "worst_delta": float(deltas[wi[1]]),
        "worst_phat": float(phat[wi]), "worst_bound": float(bound[wi[1]]),
        "grid_points": int(phat.size),
    }
    cond = "u1_power_law" if mode == "PowerLaw" else "u1_log_law"
    return _report(cond, est, est, est, 0.0, mc, seed, spec_digest(spec), extras)


# ------------------------------------------------- coupled perturbation


def perturbation_theta(spec: EnsembleSpec, n0: int, mc: int, seed,
                       j_range=(1, 9, 33), threshold: float = math.inf
                       ) -> CertificateReport:
    """sup_j E[c_tilde(g_{j,n0}, h_{j,n0})] for a coupled perturbed family.

    The default threshold is infinity: Certified then means the
    perturbation size theta is finite and measured; pass a finite
    threshold to test smallness against a chosen budget.
    """
    if spec.family != "perturbed_base":
        raise ValueError("perturbation_theta requires a perturbed_base spec")
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    js = [int(j) for j in j_range]
    if not js or any(j < 1 for j in js):
        raise ValueError("j_range must hold indices >= 1")
    path = substream(_as_path(seed), STREAM_THETA)
    trajs = np.arange(mc, dtype=np.uint64)
    d = spec.dim
    means, ses = [], []
    for j in js:
        H = np.broadcast_to(np.eye(d), (mc, d, d)).copy()
        G = H.copy()
        for step in range(n0):
            h, g = _sample_coupled_batch(spec, j + step, trajs, path)
            H = np.einsum("mij,mjk->mik", h, H)
            G = np.einsum("mij,mjk->mik", g, G)
        sg = np.linalg.svd(G, compute_uv=False)
        sh = np.linalg.svd(H, compute_uv=False)
        sdiff = np.linalg.svd(G - H, compute_uv=False)
        na, nb = sg[:, 0], sh[:, 0]
        ia, ib = 1.0 / sg[:, -1], 1.0 / sh[:, -1]
        vals = (na + nb) * sdiff[:, 0] * (ia ** 2 + nb ** 2 * ia ** 2 * ib ** 2)
        means.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(mc)))
    z = bonferroni_z(len(js))
    wi = int(np.argmax(means))
    extras = {"per_j": {str(j): m for j, m in zip(js, means)}, "n0": n0,
              "epsilon": float(spec.params["epsilon"]), "worst_j": js[wi]}
    return _report("perturbation_theta", means[wi], max(means[wi] - z * ses[wi], 0.0),
                   means[wi] + z * ses[wi], threshold, mc * len(js), seed,
                   spec_digest(spec), extras)


# ------------------------------------------------- markov conditional


def check_markov_contraction(spec: EnsembleSpec, n0: int, search: PairSearchConfig,
                             mc_outer: int, mc_inner: int, seed,
                             j: int = 12) -> CertificateReport:
    """Worst conditional pair contraction given the previous chain state.

    Draws mc_outer states from the chain marginal at j-1, then estimates
    E[ln(d(Gx, Gy)/d(x, y)) | state] per state with mc_inner continuations
    of the block G = g_{j,n0}.  Certified only when every sampled state
    contracts every net pair; a single robustly expanding state refutes,
    which separates conditional from unconditional (averaged) contraction.
    """
    if spec.family != "markov_chain":
        raise ValueError("markov contraction check requires a markov_chain spec")
    if n0 < 1 or j < 1:
        raise ValueError("n0 and j must be >= 1")
    path = substream(_as_path(seed), STREAM_MARKOV_STATE)
    outer_trajs = np.arange(mc_outer, dtype=np.uint64)
    states = _markov_initial(spec, mc_outer)
    for idx in range(1, j):
        states = _markov_step_batch(spec, states, idx, outer_trajs, path)

    total = mc_outer * mc_inner
    tiled = np.repeat(states, mc_inner, axis=0)
    trajs = np.arange(total, dtype=np.uint64)
    pairs = _pair_net(spec.dim, search.grid_size)
    lr = _evolve_pair_block(spec, pairs, j, n0, total, path,
                            states=tiled, trajs=trajs)
    per_cell = lr.reshape(len(pairs), mc_outer, mc_inner)
    means = per_cell.mean(axis=2)  # (n_pairs, mc_outer)
    ses = per_cell.std(axis=2, ddof=1) / math.sqrt(mc_inner)
    cells = means.size
    pi, oi = np.unravel_index(int(np.argmax(means)), means.shape)
    worst = (pairs[pi][0], pairs[pi][1], int(oi), float(means[pi, oi]), float(ses[pi, oi]))
    for rnd in range(1, search.refine_rounds + 1):
        cands = _propose_pairs(worst[0], worst[1], rnd, 0.3 * 0.5 ** rnd, path)
        if not cands:
            continue
        state_rep = np.repeat(states[worst[2]][None], mc_inner, axis=0)
        sub_trajs = trajs[worst[2] * mc_inner:(worst[2] + 1) * mc_inner]
        lr_c = _evolve_pair_block(spec, cands, j, n0, mc_inner, path,
                                  states=state_rep.copy(), trajs=sub_trajs)
        m_c = lr_c.mean(axis=1)
        s_c = lr_c.std(axis=1, ddof=1) / math.sqrt(mc_inner)
        cells += len(cands)
        ci = int(np.argmax(m_c))
        if m_c[ci] > worst[3]:
            worst = (cands[ci][0], cands[ci][1], worst[2], float(m_c[ci]), float(s_c[ci]))
    z = bonferroni_z(cells)
    state_norms = np.linalg.svd(states, compute_uv=False)[:, 0]
    extras = {
        "j": j, "n0": n0, "cells": int(cells),
        "worst_state_norm": float(state_norms[worst[2]]),
        "per_state_worst": means.max(axis=0).tolist(),
        "unconditional_estimate": float(lr.mean()),
        "unconditional_worst_pair": float(lr.mean(axis=1).max()),
        "state_norm_quantiles": np.quantile(state_norms, [0.0, 0.5, 1.0]).tolist(),
    }
    return _report("markov_conditional_contraction", worst[3], worst[3] - z * worst[4],
                   worst[3] + z * worst[4], 0.0, total * len(pairs), seed,
                   spec_digest(spec), extras)
