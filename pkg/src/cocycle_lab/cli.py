"""Batch front end: config-driven certify / simulate / analyze pipelines.

One JSON config is the single source of truth; command-line flags only
pick the command and the config path, so a manifest digest of the
config pins the whole run.  Exit codes: 0 success (certify: all
Certified), 1 config or io error, 2 any Refuted, 3 Inconclusive
without Refuted, 4 stats digest mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .certify import (
    PairSearchConfig,
    check_decay_condition,
    check_lemma_bounded,
    check_lemma_unbounded,
    check_markov_contraction,
    check_sl2_moment,
    check_svd_condition,
    check_u1_regularity,
    estimate_holder_contraction,
    estimate_log_contraction,
    perturbation_theta,
    report_to_json_dict,
    solve_eps0,
)
from .ensembles import EnsembleSpec, spec_digest
from .limitstat import (
    DeviationReport,
    concentration_check,
    deviation_csv_rows,
    deviation_json,
    distance_csv_rows,
    distance_report,
    distances_json,
    lq_distance,
    mdp_check,
    moment_gap,
    rate_fit,
    ratefit_json,
    standardize,
    wasserstein_p,
    weighted_kolmogorov,
)
from .matcore import Direction
from .mclab import (
    SAMPLE_CAP,
    TrajectoryStats,
    approx_coefficients,
    contraction_tail,
    simulate,
    write_samples_csv,
    write_stats_csv,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_REFUTED = 2
EXIT_INCONCLUSIVE = 3
EXIT_DIGEST = 4

SCHEMA = 1


class ConfigError(ValueError):
    """Invalid config content; the message names the offending field."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")


class DigestError(RuntimeError):
    """An input file does not match the manifest digest."""


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


# ----------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    spec: EnsembleSpec
    x0: tuple | None
    n_grid: tuple
    m: int
    seed: int
    workers: int | None
    sample_cap: int
    samples_csv_cap: int | None
    output_dir: str
    certifications: list
    analyses: list
    raw: dict


def _field_int(raw: dict, key: str, field: str, minimum: int | None = None,
               default=...) -> int:
    if key not in raw:
        if default is not ...:
            return default
        raise ConfigError(field, "required field is missing")
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(field, f"must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(field, f"must be >= {minimum}, got {value}")
    return value


def _field_num(raw: dict, key: str, field: str, default=...) -> float:
    if key not in raw:
        if default is not ...:
            return default
        raise ConfigError(field, "required field is missing")
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"must be a number, got {value!r}")
    if not math.isfinite(float(value)):
        raise ConfigError(field, "must be finite")
    return float(value)


def _field_list(raw: dict, key: str, field: str, default=...) -> list:
    if key not in raw:
        if default is not ...:
            return default
        raise ConfigError(field, "required field is missing")
    if not isinstance(raw[key], list):
        raise ConfigError(field, "must be an array")
    return raw[key]


def _num_list(raw: dict, key: str, field: str, default=...) -> list:
    values = _field_list(raw, key, field, default)
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{field}[{i}]", f"must be a number, got {v!r}")
        out.append(float(v))
    return out


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    schema = _field_int(raw, "schema", "schema")
    if schema != SCHEMA:
        raise ConfigError("schema", f"expected {SCHEMA}, got {schema}")
    ens = raw.get("ensemble")
    if not isinstance(ens, dict):
        raise ConfigError("ensemble", "must be an object")
    try:
        spec = EnsembleSpec(
            family=ens.get("family"), dim=ens.get("dim", 2),
            params=ens.get("params"),
            index_modulation=ens.get("index_modulation"),
            x0=ens.get("x0"), boundary_matrix=ens.get("boundary_matrix"))
    except (ValueError, TypeError) as e:
        raise ConfigError("ensemble", str(e)) from None

    x0 = raw.get("x0")
    if x0 is not None:
        x0 = tuple(_num_list({"x0": x0}, "x0", "x0"))
        if len(x0) != spec.dim:
            raise ConfigError("x0", f"must have {spec.dim} entries")
    grid = _field_list(raw, "n_grid", "n_grid")
    n_grid = tuple(_field_int({"n": n}, "n", f"n_grid[{i}]", minimum=1)
                   for i, n in enumerate(grid))
    if list(n_grid) != sorted(set(n_grid)) or not n_grid:
        raise ConfigError("n_grid", "must be strictly increasing and nonempty")
    m = _field_int(raw, "m", "m", minimum=1)
    seed = _field_int(raw, "seed", "seed", minimum=0)
    workers = raw.get("workers")
    if workers is not None:
        workers = _field_int(raw, "workers", "workers", minimum=1)
    sample_cap = _field_int(raw, "sample_cap", "sample_cap", minimum=1,
                            default=SAMPLE_CAP)
    csv_cap = raw.get("samples_csv_cap")
    if csv_cap is not None:
        csv_cap = _field_int(raw, "samples_csv_cap", "samples_csv_cap", minimum=1)
    output_dir = raw.get("output_dir")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "must be a nonempty string")
    if not os.path.isabs(output_dir):
        output_dir = os.path.join(os.path.dirname(os.path.abspath(path)),
                                  output_dir)

    certifications = _field_list(raw, "certifications", "certifications",
                                 default=[])
    for i, entry in enumerate(certifications):
        if not isinstance(entry, dict):
            raise ConfigError(f"certifications[{i}]", "must be an object")
        cond = entry.get("condition")
        if cond not in _CONDITIONS:
            raise ConfigError(f"certifications[{i}].condition",
                              f"unknown condition {cond!r}; expected one of "
                              f"{sorted(_CONDITIONS)}")
    analyses = _field_list(raw, "analyses", "analyses", default=[])
    seen = set()
    for i, entry in enumerate(analyses):
        if not isinstance(entry, dict):
            raise ConfigError(f"analyses[{i}]", "must be an object")
        kind = entry.get("kind")
        if kind not in _ANALYSIS_KINDS:
            raise ConfigError(f"analyses[{i}].kind",
                              f"unknown kind {kind!r}; expected one of "
                              f"{sorted(_ANALYSIS_KINDS)}")
        if kind in seen:
            raise ConfigError(f"analyses[{i}].kind",
                              f"duplicate analysis kind {kind!r}")
        seen.add(kind)
    return ExperimentConfig(spec=spec, x0=x0, n_grid=n_grid, m=m, seed=seed,
                            workers=workers, sample_cap=sample_cap,
                            samples_csv_cap=csv_cap, output_dir=output_dir,
                            certifications=certifications, analyses=analyses,
                            raw=raw)


def config_digest(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _resolve_workers(cfg: ExperimentConfig) -> int:
    if cfg.workers is not None:
        return cfg.workers
    env = os.environ.get("COCYCLE_LAB_WORKERS", "").strip()
    if env:
        return int(env)
    return os.cpu_count() or 1


# ------------------------------------------------------------ certify stage


def _search_config(entry: dict, field: str) -> PairSearchConfig:
    kwargs = {}
    for key in ("grid_size", "refine_rounds", "mc_per_pair"):
        if key in entry:
            kwargs[key] = _field_int(entry, key, f"{field}.{key}", minimum=0)
    try:
        return PairSearchConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(field, str(e)) from None


def _run_log_contraction(cfg, entry, field, seed):
    return estimate_log_contraction(
        cfg.spec, _field_int(entry, "j", f"{field}.j", minimum=1),
        _field_int(entry, "n0", f"{field}.n0", minimum=1),
        _search_config(entry, field), seed)


def _run_holder(cfg, entry, field, seed):
    return estimate_holder_contraction(
        cfg.spec, _field_int(entry, "j", f"{field}.j", minimum=1),
        _field_int(entry, "n0", f"{field}.n0", minimum=1),
        _field_num(entry, "alpha", f"{field}.alpha"),
        _search_config(entry, field), seed)


def _run_decay(cfg, entry, field, seed):
    j_range = [int(j) for j in _num_list(entry, "j_range", f"{field}.j_range")]
    return check_decay_condition(
        cfg.spec, j_range, _field_int(entry, "mc", f"{field}.mc", minimum=1),
        seed)


def _run_sl2_moment(cfg, entry, field, seed):
    return check_sl2_moment(
        cfg.spec, _field_int(entry, "n0", f"{field}.n0", minimum=1),
        _field_num(entry, "epsilon", f"{field}.epsilon"),
        _search_config(entry, field), seed)


def _run_svd(cfg, entry, field, seed):
    return check_svd_condition(
        cfg.spec, _field_num(entry, "delta", f"{field}.delta"),
        _field_int(entry, "mc", f"{field}.mc", minimum=1),
        _search_config(entry, field), seed,
        guard_samples=_field_int(entry, "guard_samples",
                                 f"{field}.guard_samples", minimum=1,
                                 default=1 << 20))


def _run_u1(mode):
    def run(cfg, entry, field, seed):
        return check_u1_regularity(
            cfg.spec, _field_num(entry, "C", f"{field}.C"),
            _field_num(entry, "alpha", f"{field}.alpha"), mode,
            _field_int(entry, "mc", f"{field}.mc", minimum=1), seed)
    return run


def _run_perturbation(cfg, entry, field, seed):
    j_range = tuple(int(j) for j in _num_list(entry, "j_range",
                                              f"{field}.j_range",
                                              default=[1, 9, 33]))
    threshold = _field_num(entry, "threshold", f"{field}.threshold",
                           default=math.inf) if "threshold" in entry else math.inf
    return perturbation_theta(
        cfg.spec, _field_int(entry, "n0", f"{field}.n0", minimum=1),
        _field_int(entry, "mc", f"{field}.mc", minimum=1), seed,
        j_range=j_range, threshold=threshold)


def _run_lemma_bounded(cfg, entry, field, seed):
    eps0 = (_field_num(entry, "eps0", f"{field}.eps0")
            if "eps0" in entry else solve_eps0())
    return check_lemma_bounded(
        _field_num(entry, "A", f"{field}.A"),
        _field_num(entry, "B", f"{field}.B"),
        _field_num(entry, "C", f"{field}.C"),
        _field_num(entry, "alpha", f"{field}.alpha"), eps0)


def _run_lemma_unbounded(cfg, entry, field, seed):
    eps0 = (_field_num(entry, "eps0", f"{field}.eps0")
            if "eps0" in entry else solve_eps0())
    return check_lemma_unbounded(
        _field_num(entry, "A", f"{field}.A"),
        _field_num(entry, "B", f"{field}.B"),
        _field_num(entry, "C", f"{field}.C"),
        _field_num(entry, "D", f"{field}.D"),
        _field_num(entry, "alpha", f"{field}.alpha"),
        _field_num(entry, "q", f"{field}.q"), eps0)


def _run_markov(cfg, entry, field, seed):
    return check_markov_contraction(
        cfg.spec, _field_int(entry, "n0", f"{field}.n0", minimum=1),
        _search_config(entry, field),
        _field_int(entry, "mc_outer", f"{field}.mc_outer", minimum=1),
        _field_int(entry, "mc_inner", f"{field}.mc_inner", minimum=1),
        seed, j=_field_int(entry, "j", f"{field}.j", minimum=1, default=12))


_CONDITIONS = {
    "average_log_contraction": _run_log_contraction,
    "holder_contraction": _run_holder,
    "norm_decay_sum": _run_decay,
    "sl2_negative_moment": _run_sl2_moment,
    "svd_gap_alignment": _run_svd,
    "u1_power_law": _run_u1("PowerLaw"),
    "u1_log_law": _run_u1("LogLaw"),
    "perturbation_theta": _run_perturbation,
    "lemma_bounded_norm": _run_lemma_bounded,
    "lemma_unbounded_norm": _run_lemma_unbounded,
    "markov_conditional_contraction": _run_markov,
}

_ANALYSIS_KINDS = {"distances", "rate", "concentration", "mdp", "tail", "approx"}


def cmd_certify(cfg: ExperimentConfig) -> int:
    if not cfg.certifications:
        raise ConfigError("certifications", "must be nonempty for certify")
    os.makedirs(cfg.output_dir, exist_ok=True)
    started = time.perf_counter()
    reports = []
    for i, entry in enumerate(cfg.certifications):
        field = f"certifications[{i}]"
        seed = _field_int(entry, "seed", f"{field}.seed", minimum=0,
                          default=cfg.seed)
        runner = _CONDITIONS[entry["condition"]]
        try:
            reports.append(runner(cfg, entry, field, seed))
        except ValueError as e:
            raise ConfigError(field, str(e)) from None
    out = os.path.join(cfg.output_dir, "certificates.json")
    _write_json(out, {"schema": SCHEMA, "tool_version": __version__,
                      "reports": [report_to_json_dict(r) for r in reports]})
    _update_manifest(cfg, "certify", time.perf_counter() - started,
                     {"certificates.json": out})
    verdicts = [r.verdict for r in reports]
    if any(v == "Refuted" for v in verdicts):
        return EXIT_REFUTED
    if all(v == "Certified" for v in verdicts):
        return EXIT_OK
    return EXIT_INCONCLUSIVE


# ----------------------------------------------------------- simulate stage


def _analysis(cfg: ExperimentConfig, kind: str) -> dict | None:
    for entry in cfg.analyses:
        if entry["kind"] == kind:
            return entry
    return None


def _tail_outputs(cfg: ExperimentConfig, entry: dict, outputs: dict) -> None:
    field = "analyses[tail]"
    pairs_raw = entry.get("pairs")
    if pairs_raw is None:
        e1 = [1.0] + [0.0] * (cfg.spec.dim - 1)
        e2 = [0.0, 1.0] + [0.0] * (cfg.spec.dim - 2)
        pairs_raw = [[e1, e2]]
    try:
        pairs = [(Direction.from_vector(p[0]), Direction.from_vector(p[1]))
                 for p in pairs_raw]
        curve = contraction_tail(
            cfg.spec, _field_int(entry, "j", f"{field}.j", minimum=1, default=1),
            pairs, _field_num(entry, "ell", f"{field}.ell"),
            [int(k) for k in _num_list(entry, "k_grid", f"{field}.k_grid")],
            _field_int(entry, "mc", f"{field}.mc", minimum=1), cfg.seed)
    except (ValueError, TypeError, IndexError) as e:
        raise ConfigError(field, str(e)) from None
    csv_path = os.path.join(cfg.output_dir, "tail.csv")
    _write_csv(csv_path, ["k", "prob", "count", "censored"],
               [(int(k), float(curve.probs[i]), int(curve.counts[i]),
                 int(curve.censored[i]))
                for i, k in enumerate(curve.k_grid)])
    json_path = os.path.join(cfg.output_dir, "tail.json")
    _write_json(json_path, {
        "schema": SCHEMA, "ell": curve.ell, "mc": curve.mc,
        "k_grid": list(curve.k_grid), "probs": curve.probs.tolist(),
        "gamma": curve.gamma, "gamma_ci": list(curve.gamma_ci),
        "rate_constant": curve.rate_constant, "r2": curve.r2,
        "fitted_points": curve.fitted_points})
    outputs["tail.csv"] = csv_path
    outputs["tail.json"] = json_path


def _approx_outputs(cfg: ExperimentConfig, entry: dict, outputs: dict) -> None:
    field = "analyses[approx]"
    try:
        curve = approx_coefficients(
            cfg.spec, _field_int(entry, "k", f"{field}.k", minimum=1),
            [int(r) for r in _num_list(entry, "r_grid", f"{field}.r_grid")],
            _field_int(entry, "mc", f"{field}.mc", minimum=1), cfg.seed)
    except ValueError as e:
        raise ConfigError(field, str(e)) from None
    csv_path = os.path.join(cfg.output_dir, "approx.csv")
    _write_csv(csv_path, ["r", "coef"],
               [(int(r), float(curve.coefs[i]))
                for i, r in enumerate(curve.r_grid)])
    json_path = os.path.join(cfg.output_dir, "approx.json")
    _write_json(json_path, {
        "schema": SCHEMA, "k": curve.k, "mc": curve.mc,
        "r_grid": list(curve.r_grid), "coefs": curve.coefs.tolist(),
        "rho": curve.rho, "rho_ci": list(curve.rho_ci), "r2": curve.r2})
    outputs["approx.csv"] = csv_path
    outputs["approx.json"] = json_path


def cmd_simulate(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    started = time.perf_counter()
    stats = simulate(cfg.spec, cfg.x0, cfg.n_grid, cfg.m, cfg.seed,
                     workers=_resolve_workers(cfg), sample_cap=cfg.sample_cap)
    stats_path = os.path.join(cfg.output_dir, "stats.csv")
    samples_path = os.path.join(cfg.output_dir, "samples.csv")
    write_stats_csv(stats, stats_path)
    write_samples_csv(stats, samples_path, cap=cfg.samples_csv_cap)
    outputs = {"stats.csv": stats_path, "samples.csv": samples_path}
    entry = _analysis(cfg, "tail")
    if entry is not None:
        _tail_outputs(cfg, entry, outputs)
    entry = _analysis(cfg, "approx")
    if entry is not None:
        _approx_outputs(cfg, entry, outputs)
    _update_manifest(cfg, "simulate", time.perf_counter() - started, outputs)
    return EXIT_OK


# ------------------------------------------------------------ analyze stage


def _manifest_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.output_dir, "manifest.json")


def _update_manifest(cfg: ExperimentConfig, stage: str, wall: float,
                     outputs: dict) -> None:
    path = _manifest_path(cfg)
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
    else:
        manifest = {"schema": SCHEMA, "tool_version": __version__,
                    "config_digest": config_digest(cfg), "stages": {},
                    "outputs": {}}
    manifest["tool_version"] = __version__
    manifest["config_digest"] = config_digest(cfg)
    manifest["stages"][stage] = {"wall_seconds": wall}
    for name, file_path in outputs.items():
        manifest["outputs"][name] = {"sha256": _sha256(file_path),
                                     "bytes": os.path.getsize(file_path)}
    _write_json(path, manifest)


def _load_manifest(cfg: ExperimentConfig) -> dict:
    path = _manifest_path(cfg)
    if not os.path.exists(path):
        raise ConfigError("manifest", f"{path} not found; run simulate first")
    with open(path) as fh:
        return json.load(fh)


def _verify_digest(manifest: dict, name: str, path: str) -> None:
    recorded = manifest.get("outputs", {}).get(name, {}).get("sha256")
    if recorded is None:
        raise ConfigError("manifest", f"no recorded digest for {name}")
    if not os.path.exists(path):
        raise ConfigError(name, f"file not found: {path}")
    actual = _sha256(path)
    if actual != recorded:
        raise DigestError(f"digest mismatch for {name}: manifest has "
                          f"{recorded[:12]}.., file has {actual[:12]}..")


def _read_stats(cfg: ExperimentConfig, stats_path: str,
                samples_path: str) -> TrajectoryStats:
    with open(stats_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError("stats.csv", "no data rows")
    grid = tuple(int(r["n"]) for r in rows)
    mean = np.array([float(r["mean"]) for r in rows])
    var = np.array([float(r["var"]) for r in rows])
    m = int(rows[0]["m"])
    by_n: dict[int, list] = {n: [] for n in grid}
    trajs: dict[int, list] = {n: [] for n in grid}
    with open(samples_path) as fh:
        for r in csv.DictReader(fh):
            n = int(r["n"])
            if n not in by_n:
                raise ConfigError("samples.csv", f"row with n={n} not in stats.csv")
            by_n[n].append(float(r["value"]))
            trajs[n].append(int(r["traj"]))
    counts = {len(v) for v in by_n.values()}
    if len(counts) != 1 or 0 in counts:
        raise ConfigError("samples.csv", "unequal or empty sample rows per n")
    samples = np.array([by_n[n] for n in grid])
    return TrajectoryStats(
        n_grid=grid, samples=samples, mean=mean, var=var, m=m,
        master_seed=cfg.seed, spec_digest=spec_digest(cfg.spec),
        x0=tuple(cfg.x0 or ()), traj_ids=np.array(trajs[grid[0]], dtype=np.uint64),
        capped=samples.shape[1] < m)


_METRIC_OPS = {
    "kolmogorov": lambda z, p: weighted_kolmogorov(z, p),
    "lq": lambda z, p: lq_distance(z, p),
    "wasserstein": lambda z, p: wasserstein_p(z, p),
    "moment": lambda z, p: moment_gap(z, int(p)),
}


def _distance_outputs(cfg, stats, entry, outputs) -> None:
    field = "analyses[distances]"
    n_values = [int(n) for n in _num_list(entry, "n_values", f"{field}.n_values",
                                          default=list(stats.n_grid))]
    bad = [n for n in n_values if n not in stats.n_grid]
    if bad:
        raise ConfigError(f"{field}.n_values", f"{bad} not in the simulated grid")
    kwargs = {}
    for key, name in (("s_values", "s_values"), ("q_values", "q_values"),
                      ("p_values", "p_values"), ("a_values", "a_values")):
        if key in entry:
            values = _num_list(entry, key, f"{field}.{key}")
            if not values:
                raise ConfigError(f"{field}.{key}", "must be nonempty")
            kwargs[name] = values
    try:
        reports = [distance_report(stats, n, **kwargs) for n in n_values]
    except ValueError as e:
        raise ConfigError(field, str(e)) from None
    csv_path = os.path.join(cfg.output_dir, "distances.csv")
    _write_csv(csv_path, ["n", "metric", "parameter", "value"],
               distance_csv_rows(reports))
    json_path = os.path.join(cfg.output_dir, "distances.json")
    _write_json(json_path, distances_json(reports))
    outputs["distances.csv"] = csv_path
    outputs["distances.json"] = json_path


def _rate_outputs(cfg, stats, entry, outputs) -> None:
    field = "analyses[rate]"
    metric = entry.get("metric")
    if metric not in _METRIC_OPS:
        raise ConfigError(f"{field}.metric",
                          f"unknown metric {metric!r}; expected one of "
                          f"{sorted(_METRIC_OPS)}")
    parameter = _field_num(entry, "parameter", f"{field}.parameter")
    n_values = [int(n) for n in _num_list(entry, "n_values", f"{field}.n_values",
                                          default=list(stats.n_grid))]
    bad = [n for n in n_values if n not in stats.n_grid]
    if bad:
        raise ConfigError(f"{field}.n_values", f"{bad} not in the simulated grid")
    series = []
    try:
        for n in n_values:
            row = stats.sample_row(n)
            series.append((float(np.std(row)),
                           _METRIC_OPS[metric](standardize(row), parameter)))
        fit = rate_fit(series)
    except ValueError as e:
        raise ConfigError(field, str(e)) from None
    json_path = os.path.join(cfg.output_dir, "ratefit.json")
    blob = ratefit_json(fit)
    blob.update(metric=metric, parameter=parameter, n_values=n_values)
    _write_json(json_path, blob)
    outputs["ratefit.json"] = json_path


def _deviation_outputs(cfg, stats, con_entry, mdp_entry, outputs) -> None:
    concentration = mdp = None
    if con_entry is not None:
        field = "analyses[concentration]"
        try:
            concentration = concentration_check(
                stats, _num_list(con_entry, "t_grid", f"{field}.t_grid"),
                _num_list(con_entry, "c_offsets", f"{field}.c_offsets",
                          default=[0.0]),
                alpha=_field_num(con_entry, "alpha", f"{field}.alpha",
                                 default=0.05)).concentration
        except ValueError as e:
            raise ConfigError(field, str(e)) from None
    if mdp_entry is not None:
        field = "analyses[mdp]"
        exponent = _field_num(mdp_entry, "a_exponent", f"{field}.a_exponent")
        if not 0.5 < exponent < 1.0:
            raise ConfigError(f"{field}.a_exponent",
                              "must lie strictly between 0.5 and 1")
        coeff = _field_num(mdp_entry, "a_coeff", f"{field}.a_coeff", default=1.0)
        gammas = _field_list(mdp_entry, "gammas", f"{field}.gammas")
        try:
            mdp = mdp_check(
                stats, lambda n: coeff * n ** exponent,
                [(g[0], g[1]) for g in gammas],
                alpha=_field_num(mdp_entry, "alpha", f"{field}.alpha",
                                 default=0.05),
                trend_factor=_field_num(mdp_entry, "trend_factor",
                                        f"{field}.trend_factor",
                                        default=0.9)).mdp
        except (ValueError, TypeError, IndexError) as e:
            raise ConfigError(field, str(e)) from None
    report = DeviationReport(concentration=concentration, mdp=mdp)
    csv_path = os.path.join(cfg.output_dir, "deviations.csv")
    _write_csv(csv_path,
               ["kind", "param1", "param2", "n", "value", "ci_low", "ci_high",
                "flag"], deviation_csv_rows(report))
    json_path = os.path.join(cfg.output_dir, "deviations.json")
    _write_json(json_path, deviation_json(report))
    outputs["deviations.csv"] = csv_path
    outputs["deviations.json"] = json_path


def cmd_analyze(cfg: ExperimentConfig, stats_path: str | None = None) -> int:
    manifest = _load_manifest(cfg)
    stats_path = stats_path or os.path.join(cfg.output_dir, "stats.csv")
    samples_path = os.path.join(cfg.output_dir, "samples.csv")
    _verify_digest(manifest, "stats.csv", stats_path)
    _verify_digest(manifest, "samples.csv", samples_path)
    started = time.perf_counter()
    stats = _read_stats(cfg, stats_path, samples_path)
    outputs: dict = {}
    entry = _analysis(cfg, "distances")
    if entry is not None:
        _distance_outputs(cfg, stats, entry, outputs)
    entry = _analysis(cfg, "rate")
    if entry is not None:
        _rate_outputs(cfg, stats, entry, outputs)
    con_entry = _analysis(cfg, "concentration")
    mdp_entry = _analysis(cfg, "mdp")
    if con_entry is not None or mdp_entry is not None:
        _deviation_outputs(cfg, stats, con_entry, mdp_entry, outputs)
    if not outputs:
        raise ConfigError("analyses", "no analyze-stage entries "
                          "(distances, rate, concentration, mdp)")
    _update_manifest(cfg, "analyze", time.perf_counter() - started, outputs)
    return EXIT_OK


_ANALYZE_STAGE = ("distances", "rate", "concentration", "mdp")


def cmd_all(cfg: ExperimentConfig) -> int:
    code = EXIT_OK
    if cfg.certifications:
        code = cmd_certify(cfg)
    cmd_simulate(cfg)
    if any(_analysis(cfg, kind) is not None for kind in _ANALYZE_STAGE):
        cmd_analyze(cfg)
    return code


# -------------------------------------------------------------------- main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cocycle-lab",
        description="certify, simulate, and analyze random matrix cocycles")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("certify", "run certification conditions"),
                      ("simulate", "draw trajectories, write stats/samples"),
                      ("analyze", "distances, rate fits, deviation checks"),
                      ("all", "certify, then simulate, then analyze")):
        cmd = sub.add_parser(name, help=doc)
        cmd.add_argument("config", help="experiment config JSON")
        if name == "analyze":
            cmd.add_argument("stats", nargs="?", default=None,
                             help="stats.csv override (default: output_dir)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "certify":
            return cmd_certify(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.stats)
        return cmd_all(cfg)
    except json.JSONDecodeError as e:
        print(f"config parse error: invalid JSON at line {e.lineno} "
              f"column {e.colno}: {e.msg}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DigestError as e:
        print(f"digest error: {e}", file=sys.stderr)
        return EXIT_DIGEST
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
