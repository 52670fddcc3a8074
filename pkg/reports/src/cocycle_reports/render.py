"""Publication-style figures from the simulation CLI's CSV/JSON outputs.

Every figure is drawn from the versioned files alone; nothing is
recomputed here, so the numbers on a plot always match the artifacts
they came from.  Rendering is deterministic: an explicit Figure (no
pyplot state), the Agg/SVG canvases, a fixed svg hash salt, and
metadata timestamps suppressed.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field

import matplotlib
import numpy as np
from matplotlib.figure import Figure

SCHEMA = 1

STATS_COLUMNS = {"n", "mean", "var", "m"}
SAMPLES_COLUMNS = {"n", "traj", "value"}
TAIL_COLUMNS = {"k", "prob", "count", "censored"}
APPROX_COLUMNS = {"r", "coef"}
DEVIATIONS_COLUMNS = {"kind", "param1", "param2", "n", "value",
                      "ci_low", "ci_high", "flag"}

SVG_HASH_SALT = "cocycle-report"


class RenderError(ValueError):
    """Bad request or input file; the message names what is wrong."""


@dataclass(frozen=True)
class FigureRequest:
    kind: str
    inputs: dict
    output: str
    style: dict = field(default_factory=dict)


def load_request(path: str) -> FigureRequest:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise RenderError("request must be a JSON object")
    if raw.get("schema") != SCHEMA:
        raise RenderError(f"schema mismatch in request: expected {SCHEMA}, "
                          f"got {raw.get('schema')!r}")
    kind = raw.get("kind")
    if kind not in RENDERERS:
        raise RenderError(f"unknown figure kind {kind!r}; expected one of "
                          f"{sorted(RENDERERS)}")
    inputs = raw.get("inputs")
    if not isinstance(inputs, dict):
        raise RenderError("inputs must be an object mapping role to file path")
    output = raw.get("output")
    if not isinstance(output, str) or not output:
        raise RenderError("output must be a file path")
    if not output.lower().endswith((".png", ".svg")):
        raise RenderError(f"output format must be PNG or SVG, got {output!r}")
    style = raw.get("style", {})
    if not isinstance(style, dict):
        raise RenderError("style must be an object")
    return FigureRequest(kind=kind, inputs=inputs, output=output, style=style)


def _input_path(req: FigureRequest, role: str) -> str:
    path = req.inputs.get(role)
    if not isinstance(path, str) or not path:
        raise RenderError(f"{req.kind} needs input role {role!r}")
    return path


def _read_csv(path: str, required: set) -> list[dict]:
    try:
        with open(path) as fh:
            reader = csv.DictReader(fh)
            fields = set(reader.fieldnames or ())
            missing = sorted(required - fields)
            if missing:
                raise RenderError(f"missing columns {missing} in {path}")
            return list(reader)
    except OSError as e:
        raise RenderError(f"cannot read {path}: {e.strerror}") from None


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise RenderError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise RenderError(f"invalid JSON in {path}: {e.msg}") from None
    if not isinstance(raw, dict) or raw.get("schema") != SCHEMA:
        got = raw.get("schema") if isinstance(raw, dict) else None
        raise RenderError(f"schema mismatch in {path}: expected {SCHEMA}, "
                          f"got {got!r}")
    return raw


def _new_figure(style: dict) -> Figure:
    size = style.get("figsize", (6.4, 4.8))
    return Figure(figsize=tuple(size), dpi=float(style.get("dpi", 100)))


def _normal_cdf(grid: np.ndarray) -> np.ndarray:
    root2 = math.sqrt(2.0)
    return np.array([0.5 * (1.0 + math.erf(t / root2)) for t in grid])


def slope_annotation(slope: float) -> str:
    return f"slope = {slope:.2f}"


# ------------------------------------------------------------- renderers


def _render_cdf_overlay(req: FigureRequest, fig: Figure) -> None:
    stats = _read_csv(_input_path(req, "stats"), STATS_COLUMNS)
    samples = _read_csv(_input_path(req, "samples"), SAMPLES_COLUMNS)
    if not stats or not samples:
        raise RenderError("stats and samples files must have data rows")
    n = int(req.style.get("n", max(int(r["n"]) for r in samples)))
    moment = next((r for r in stats if int(r["n"]) == n), None)
    if moment is None:
        raise RenderError(f"n = {n} not present in the stats file")
    values = np.array([float(r["value"]) for r in samples if int(r["n"]) == n])
    if values.size == 0:
        raise RenderError(f"n = {n} not present in the samples file")
    sd = math.sqrt(float(moment["var"]))
    z = values - float(moment["mean"])
    if sd > 0.0:
        z = z / sd
    z.sort()
    ax = fig.subplots()
    ax.step(z, np.arange(1, z.size + 1) / z.size, where="post",
            label=f"empirical, m = {z.size}")
    lo = min(-3.5, float(z[0]) - 0.5)
    hi = max(3.5, float(z[-1]) + 0.5)
    grid = np.linspace(lo, hi, 401)
    ax.plot(grid, _normal_cdf(grid), linestyle="--", label="standard normal")
    ax.set_xlabel("standardized value")
    ax.set_ylabel("cumulative probability")
    ax.set_title(req.style.get("title", f"empirical CDF vs normal, n = {n}"))
    ax.legend(loc="lower right")


def _render_rate_plot(req: FigureRequest, fig: Figure) -> None:
    fit = _read_json(_input_path(req, "ratefit"))
    for key in ("pairs", "slope", "intercept"):
        if key not in fit:
            raise RenderError(f"ratefit file lacks field {key!r}")
    pairs = np.array(fit["pairs"], dtype=float)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] < 2:
        raise RenderError("ratefit pairs must be a list of [sigma, distance]")
    sigma, dist = pairs[:, 0], pairs[:, 1]
    slope, intercept = float(fit["slope"]), float(fit["intercept"])
    ax = fig.subplots()
    ax.loglog(sigma, dist, "o", label="measured")
    line = np.exp(intercept) * sigma ** slope
    ax.loglog(sigma, line, "-", label=slope_annotation(slope))
    ref = line[0] * (sigma / sigma[0]) ** -1.0
    ax.loglog(sigma, ref, ":", label="reference slope = -1.00")
    if "r2" in fit:
        ax.annotate(f"r2 = {float(fit['r2']):.3f}", xy=(0.05, 0.05),
                    xycoords="axes fraction")
    ax.set_xlabel("sigma_n")
    ax.set_ylabel("distance")
    ax.set_title(req.style.get("title", "distance decay against sigma_n"))
    ax.legend(loc="upper right")


def _render_tail_decay(req: FigureRequest, fig: Figure) -> None:
    rows = _read_csv(_input_path(req, "tail"), TAIL_COLUMNS)
    fit = _read_json(_input_path(req, "tail_fit"))
    if not rows:
        raise RenderError("tail file has no data rows")
    k = np.array([float(r["k"]) for r in rows])
    prob = np.array([float(r["prob"]) for r in rows])
    censored = np.array([r["censored"] not in ("0", "", "False") for r in rows])
    ax = fig.subplots()
    live = prob > 0
    ax.semilogy(k[live & ~censored], prob[live & ~censored], "o",
                label="exceedance estimate")
    if np.any(live & censored):
        ax.semilogy(k[live & censored], prob[live & censored], "v",
                    label="censored (zero count)")
    gamma = float(fit.get("gamma", float("nan")))
    const = float(fit.get("rate_constant", float("nan")))
    if math.isfinite(gamma) and math.isfinite(const) and gamma > 0:
        ax.semilogy(k, const * gamma ** k, "-",
                    label=f"fit, gamma = {gamma:.3f}")
    ax.set_xlabel("block length k")
    ax.set_ylabel("tail probability")
    ax.set_title(req.style.get("title",
                               f"contraction tail, ell = {fit.get('ell')}"))
    ax.legend(loc="upper right")


def _render_approx_decay(req: FigureRequest, fig: Figure) -> None:
    rows = _read_csv(_input_path(req, "approx"), APPROX_COLUMNS)
    fit = _read_json(_input_path(req, "approx_fit"))
    if not rows:
        raise RenderError("approx file has no data rows")
    r = np.array([float(row["r"]) for row in rows])
    coef = np.array([float(row["coef"]) for row in rows])
    ax = fig.subplots()
    live = coef > 0
    ax.semilogy(r[live], coef[live], "o", label="coefficient")
    rho = float(fit.get("rho", float("nan")))
    if math.isfinite(rho) and rho > 0 and np.any(live):
        anchor = int(np.argmax(live))
        ax.semilogy(r, coef[anchor] * rho ** (r - r[anchor]), "-",
                    label=f"fit, rho = {rho:.3f}")
    ax.set_xlabel("approximation depth r")
    ax.set_ylabel("coefficient")
    ax.set_title(req.style.get("title", "approximation coefficient decay"))
    ax.legend(loc="upper right")


def _render_concentration_panel(req: FigureRequest, fig: Figure) -> None:
    _read_csv(_input_path(req, "deviations"), DEVIATIONS_COLUMNS)
    blob = _read_json(_input_path(req, "deviations_fit"))
    con = blob.get("concentration")
    if not con:
        raise RenderError("deviations file has no concentration report")
    cells = con["cells"]
    ts = sorted({cell["t"] for cell in cells})
    axes = fig.subplots(1, len(ts), sharey=True, squeeze=False)[0]
    for ax, t in zip(axes, ts):
        mine = [c for c in cells if c["t"] == t]
        ns = np.array([c["n"] for c in mine], dtype=float)
        phat = np.array([c["phat"] for c in mine])
        lo = phat - np.array([c["ci"][0] for c in mine])
        hi = np.array([c["ci"][1] for c in mine]) - phat
        ax.errorbar(ns, phat, yerr=[lo, hi], fmt="o", capsize=3,
                    label="tail frequency")
        bounds = np.array([c.get("bound", 0.0) for c in mine])
        if np.any(bounds > 0):
            ax.plot(ns, bounds, "--", label="fitted bound")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("n")
        ax.set_title(f"t = {t:.3g}")
    axes[0].set_ylabel("P(|S_n| >= t n + C)")
    axes[0].legend(loc="upper right")
    fig.suptitle(req.style.get(
        "title", f"concentration cells, fitted c = {con.get('c'):.4g}"))


def _render_mdp_trend(req: FigureRequest, fig: Figure) -> None:
    _read_csv(_input_path(req, "deviations"), DEVIATIONS_COLUMNS)
    blob = _read_json(_input_path(req, "deviations_fit"))
    mdp = blob.get("mdp")
    if not mdp:
        raise RenderError("deviations file has no mdp report")
    rows = mdp["rows"]
    ax = fig.subplots()
    intervals = sorted({tuple(r["gamma"]) for r in rows})
    floor = min((r["value"] for r in rows if math.isfinite(r["value"])),
                default=-1.0) - 1.0
    for u, v in intervals:
        mine = [r for r in rows if tuple(r["gamma"]) == (u, v)]
        ns = np.array([r["n"] for r in mine], dtype=float)
        vals = np.array([r["value"] for r in mine])
        lo = np.array([max(r["ci"][0], floor) for r in mine])
        hi = np.array([r["ci"][1] for r in mine])
        ax.errorbar(ns, vals, yerr=[vals - lo, hi - vals], fmt="o-",
                    capsize=3, label=f"Gamma = [{u:g}, {v:g}]")
        ax.axhline(-0.5 * u * u, linestyle="--", linewidth=0.8)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("n")
    ax.set_ylabel("normalized log tail probability")
    ax.set_title(req.style.get("title",
                               "moderate deviation trend vs -u^2/2 target"))
    ax.legend(loc="lower right")


RENDERERS = {
    "CdfOverlay": _render_cdf_overlay,
    "RatePlot": _render_rate_plot,
    "TailDecay": _render_tail_decay,
    "ApproxDecay": _render_approx_decay,
    "ConcentrationPanel": _render_concentration_panel,
    "MdpTrend": _render_mdp_trend,
}


def render(request: FigureRequest) -> str:
    """Draw the requested figure and write it; returns the output path."""
    fig = _new_figure(request.style)
    RENDERERS[request.kind](request, fig)
    parent = os.path.dirname(request.output)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if request.output.lower().endswith(".svg"):
        with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
            fig.savefig(request.output, format="svg",
                        metadata={"Date": None})
    else:
        fig.savefig(request.output, format="png",
                    metadata={"Software": "cocycle-report"})
    return request.output


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cocycle-report",
        description="render one figure from simulation output files")
    parser.add_argument("request", help="figure request JSON")
    args = parser.parse_args(argv)
    try:
        path = render(load_request(args.request))
    except RenderError as e:
        print(f"render error: {e}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as e:
        print(f"render error: {e}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
