"""Declarative ensembles of independent or Markov-dependent invertible matrices.

A spec is a JSON-serializable description of the law of (g_j); sampling
is a pure function of (spec, master seed, trajectory, index j), so runs
reproduce bit-for-bit under any worker count or evaluation order.

Families
--------
iid_sl2_rotation
    g = R(phi') diag(a, 1/a) R(phi), both angles uniform on [0, 2pi).
    ||g|| = a almost surely and det g = 1.  `a` may be index-modulated.
svd_structured
    g = U diag(sigma_1 .. sigma_d) V with configurable law for the top
    left singular direction (haar / atom / log_singular), Haar V, and
    sigma_1 either fixed or log-uniform on [A, B]; the spectral gap
    sigma_1/sigma_2 is a parameter (or sigma_2 = 1/sigma_1 when
    unimodular, d = 2).
contracting_norm
    g = c * O with O Haar-rotational, or an explicit deterministic
    matrix cycle indexed by j (degenerate ensembles, coboundary tests).
perturbed_base
    g = h + E where h follows a nested base spec and the entries of E
    are uniform with the hard bound ||E|| <= epsilon; near-singular
    draws resample the noise a bounded number of times.
markov_chain
    state-dependent SL(2) kernels: `independent` (ignores the state),
    `identity` (g_j = g_{j-1}), `ar_lognorm` (log-norm follows an AR(1)
    recursion read off the previous matrix), `two_state` (alternates
    stochastically between a fixed hyperbolic matrix and a rotation-
    conjugated one, switching by state norm).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .matcore import Direction, SingularMatrixError, SquareMatrix
from .seeding import (
    STREAM_MATRIX,
    STREAM_NOISE,
    SeedPath,
    uniform_slots,
)

__all__ = [
    "SCHEMA_VERSION",
    "EnsembleSpec",
    "CoupledSample",
    "MarkovState",
    "sample_matrix",
    "sample_coupled",
    "sample_markov_step",
    "product_range",
    "product_range_scaled",
    "spec_digest",
]

SCHEMA_VERSION = 1

_FAMILIES = (
    "iid_sl2_rotation",
    "svd_structured",
    "contracting_norm",
    "perturbed_base",
    "markov_chain",
)

# Matrices are renormalized into (unit-scale matrix, log scale) form
# once any entry magnitude passes this bound.
_SCALE_LIMIT = 1e150


def _require(cond: bool, field: str, msg: str) -> None:
    if not cond:
        raise ValueError(f"spec field '{field}': {msg}")


def _finite_number(x, field: str) -> float:
    _require(isinstance(x, (int, float)) and not isinstance(x, bool), field, "must be a number")
    v = float(x)
    _require(math.isfinite(v), field, "must be finite")
    return v


def _scalar_law(raw, field: str) -> tuple[float, float]:
    """Parse {'fixed': v} or {'log_uniform': [lo, hi]} into a (lo, hi) range."""
    _require(isinstance(raw, dict), field, "must be an object")
    if "fixed" in raw:
        v = _finite_number(raw["fixed"], field + ".fixed")
        return v, v
    if "log_uniform" in raw:
        rng = raw["log_uniform"]
        _require(isinstance(rng, (list, tuple)) and len(rng) == 2, field + ".log_uniform", "must be [lo, hi]")
        lo = _finite_number(rng[0], field + ".log_uniform[0]")
        hi = _finite_number(rng[1], field + ".log_uniform[1]")
        _require(0 < lo <= hi, field + ".log_uniform", "must satisfy 0 < lo <= hi")
        return lo, hi
    raise ValueError(f"spec field '{field}': must contain 'fixed' or 'log_uniform'")


def _matrix_param(raw, dim: int, field: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    _require(arr.shape == (dim, dim), field, f"must be a {dim}x{dim} matrix")
    SquareMatrix(arr)  # validates finiteness and invertibility
    return arr


@dataclass(frozen=True)
class CoupledSample:
    """A base draw h and its perturbation g with ||g - h|| <= epsilon."""

    base: SquareMatrix
    perturbed: SquareMatrix
    epsilon: float


@dataclass(frozen=True)
class MarkovState:
    """Chain position: the previously emitted matrix and its index."""

    matrix: SquareMatrix
    index: int


class EnsembleSpec:
    """Validated, immutable ensemble description.

    Construction rejects malformed parameters with messages naming the
    offending field.  Derived bounds (n_max, det_min) are computed once
    and are certified by sampling in the test suite.
    """

    __slots__ = ("family", "dim", "params", "index_modulation", "_x0", "_boundary",
                 "n_max", "det_min", "_base_spec")

    def __init__(self, family: str, dim: int, params: dict | None = None,
                 index_modulation: dict | None = None, x0=None, boundary_matrix=None):
        _require(family in _FAMILIES, "family", f"unknown family {family!r}; expected one of {_FAMILIES}")
        _require(isinstance(dim, int) and dim >= 2, "dim", "must be an integer >= 2")
        params = copy.deepcopy(dict(params or {}))
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "index_modulation", copy.deepcopy(index_modulation) if index_modulation else None)
        object.__setattr__(self, "_base_spec", None)

        if x0 is not None:
            v = np.asarray(x0, dtype=np.float64)
            _require(v.shape == (dim,), "x0", f"must be a vector of length {dim}")
            x0_dir = Direction.from_vector(v)
        else:
            e1 = np.zeros(dim)
            e1[0] = 1.0
            x0_dir = Direction(e1)
        object.__setattr__(self, "_x0", x0_dir)

        if boundary_matrix is not None:
            object.__setattr__(self, "_boundary", SquareMatrix(_matrix_param(boundary_matrix, dim, "boundary_matrix")))
        else:
            object.__setattr__(self, "_boundary", SquareMatrix(np.eye(dim)))

        self._validate_modulation()
        n_max, det_min = self._validate_family()
        object.__setattr__(self, "n_max", float(n_max))
        object.__setattr__(self, "det_min", float(det_min))

    def __setattr__(self, name, value):
        raise AttributeError("EnsembleSpec is immutable")

    # -- validation ---------------------------------------------------

    def _validate_modulation(self) -> None:
        mod = self.index_modulation
        if mod is None:
            return
        _require(isinstance(mod, dict), "index_modulation", "must be an object")
        target = mod.get("target")
        allowed = {"iid_sl2_rotation": {"a"}, "contracting_norm": {"scale"},
                   "svd_structured": {"gap"}}.get(self.family, set())
        _require(target in allowed, "index_modulation.target",
                 f"family {self.family} supports targets {sorted(allowed)}, got {target!r}")
        kind = mod.get("kind")
        if kind == "sinusoid":
            for k in ("base", "amplitude", "omega"):
                _finite_number(mod.get(k), f"index_modulation.{k}")
        elif kind == "cycle":
            vals = mod.get("values")
            _require(isinstance(vals, (list, tuple)) and len(vals) >= 1, "index_modulation.values",
                     "must be a non-empty list")
            for i, v in enumerate(vals):
                _finite_number(v, f"index_modulation.values[{i}]")
        else:
            raise ValueError(f"spec field 'index_modulation.kind': unknown kind {kind!r}")

    def _modulation_range(self) -> tuple[float, float] | None:
        mod = self.index_modulation
        if mod is None:
            return None
        if mod["kind"] == "sinusoid":
            b, amp = float(mod["base"]), abs(float(mod["amplitude"]))
            return b - amp, b + amp
        vals = [float(v) for v in mod["values"]]
        return min(vals), max(vals)

    def _validate_family(self) -> tuple[float, float]:
        p = self.params
        fam = self.family
        if fam == "iid_sl2_rotation":
            _require(self.dim == 2, "dim", "iid_sl2_rotation requires dim = 2")
            rng = self._modulation_range()
            if rng is None:
                a = _finite_number(p.get("a"), "params.a")
                rng = (a, a)
            _require(rng[0] > 1.0, "params.a", "expansion must exceed 1 (including modulation range)")
            return rng[1], 1.0

        if fam == "svd_structured":
            lo, hi = _scalar_law(p.get("sigma1", {}), "params.sigma1")
            unimodular = bool(p.get("unimodular", False))
            law = p.get("angle_law", {"kind": "haar"})
            _require(isinstance(law, dict) and "kind" in law, "params.angle_law", "must have a 'kind'")
            kind = law["kind"]
            if kind == "atom":
                _finite_number(law.get("angle"), "params.angle_law.angle")
                _require(self.dim == 2, "params.angle_law", "atom law requires dim = 2")
            elif kind == "log_singular":
                _require(self.dim == 2, "params.angle_law", "log_singular law requires dim = 2")
                kappa = _finite_number(law.get("kappa"), "params.angle_law.kappa")
                tmax = _finite_number(law.get("theta_max"), "params.angle_law.theta_max")
                _require(kappa > 0, "params.angle_law.kappa", "must be positive")
                _require(0 < tmax < 1, "params.angle_law.theta_max", "must lie in (0, 1)")
            else:
                _require(kind == "haar", "params.angle_law.kind", f"unknown kind {kind!r}")
            if unimodular:
                _require(self.dim == 2, "params.unimodular", "unimodular mode requires dim = 2")
                _require(lo >= 1.0, "params.sigma1", "unimodular mode needs sigma1 >= 1")
                return hi, 1.0
            grng = self._modulation_range()
            if grng is None:
                gap = _finite_number(p.get("gap", 1.0), "params.gap")
                grng = (gap, gap)
            _require(grng[0] >= 1.0, "params.gap", "spectral gap must be >= 1 (including modulation range)")
            gap_max = grng[1]
            n_max = max(hi, gap_max / lo)
            det_min = lo * (lo / gap_max) ** (self.dim - 1)
            return n_max, det_min

        if fam == "contracting_norm":
            if "matrix_cycle" in p:
                mats = p["matrix_cycle"]
                _require(isinstance(mats, (list, tuple)) and len(mats) >= 1, "params.matrix_cycle",
                         "must be a non-empty list of matrices")
                sms = [SquareMatrix(_matrix_param(m, self.dim, f"params.matrix_cycle[{i}]"))
                       for i, m in enumerate(mats)]
                return max(max(m.norm, m.inv_norm) for m in sms), min(abs(m.det) for m in sms)
            rng = self._modulation_range()
            if rng is None:
                lo, hi = _scalar_law(p.get("scale", {}), "params.scale")
            else:
                lo, hi = rng
                _require(lo > 0, "index_modulation", "modulated scale must stay positive")
            return max(hi, 1.0 / lo), lo ** self.dim

        if fam == "perturbed_base":
            base_raw = p.get("base")
            _require(isinstance(base_raw, dict), "params.base", "must be a nested spec object")
            base = EnsembleSpec.from_json_dict(base_raw, _allow_schema_missing=True)
            _require(base.family not in ("perturbed_base", "markov_chain"), "params.base",
                     "base family must be independent and unperturbed")
            _require(base.dim == self.dim, "params.base.dim", "must match the outer dim")
            object.__setattr__(self, "_base_spec", base)
            eps = _finite_number(p.get("epsilon"), "params.epsilon")
            _require(eps >= 0.0, "params.epsilon", "must be >= 0")
            retries = p.get("max_retries", 8)
            _require(isinstance(retries, int) and retries >= 1, "params.max_retries", "must be an integer >= 1")
            det_floor = 0.5 * base.det_min
            nb = base.n_max + eps
            n_max = max(nb, nb ** (self.dim - 1) / det_floor)
            return n_max, det_floor

        # markov_chain
        _require(self.dim == 2, "dim", "markov_chain requires dim = 2")
        kern = p.get("kernel")
        _require(isinstance(kern, dict) and "kind" in kern, "params.kernel", "must be an object with 'kind'")
        kind = kern["kind"]
        init = p.get("initial")
        init_mat = SquareMatrix(_matrix_param(init, self.dim, "params.initial")) if init is not None \
            else SquareMatrix(np.eye(self.dim))
        n_init = max(init_mat.norm, init_mat.inv_norm)
        if kind == "independent":
            rng = kern.get("a_range")
            _require(isinstance(rng, (list, tuple)) and len(rng) == 2, "params.kernel.a_range", "must be [lo, hi]")
            lo = _finite_number(rng[0], "params.kernel.a_range[0]")
            hi = _finite_number(rng[1], "params.kernel.a_range[1]")
            _require(1.0 <= lo <= hi, "params.kernel.a_range", "must satisfy 1 <= lo <= hi")
            return max(hi, n_init), 1.0
        if kind == "identity":
            return n_init, min(abs(init_mat.det), 1.0)
        if kind == "ar_lognorm":
            for k in ("mu", "phi", "noise_sd", "a_min", "a_max"):
                _finite_number(kern.get(k), f"params.kernel.{k}")
            _require(abs(float(kern["phi"])) < 1.0, "params.kernel.phi", "must satisfy |phi| < 1")
            _require(1.0 <= float(kern["a_min"]) <= float(kern["a_max"]), "params.kernel.a_min",
                     "need 1 <= a_min <= a_max")
            return max(float(kern["a_max"]), n_init), 1.0
        if kind == "two_state":
            a_big = _finite_number(kern.get("a_big"), "params.kernel.a_big")
            _require(a_big > 1.0, "params.kernel.a_big", "must exceed 1")
            fixed = SquareMatrix(_matrix_param(kern.get("fixed"), self.dim, "params.kernel.fixed"))
            sw = _finite_number(kern.get("switch_prob"), "params.kernel.switch_prob")
            _require(0.0 < sw < 1.0, "params.kernel.switch_prob", "must lie in (0, 1)")
            _finite_number(kern.get("norm_threshold"), "params.kernel.norm_threshold")
            n_max = max(a_big, fixed.norm, fixed.inv_norm, n_init)
            return n_max, min(1.0, abs(fixed.det), abs(init_mat.det))
        raise ValueError(f"spec field 'params.kernel.kind': unknown kind {kind!r}")

    # -- derived views ------------------------------------------------

    @property
    def x0(self) -> Direction:
        return self._x0

    @property
    def boundary_matrix(self) -> SquareMatrix:
        return self._boundary

    @property
    def base_spec(self) -> "EnsembleSpec | None":
        return self._base_spec

    @property
    def is_markov(self) -> bool:
        return self.family == "markov_chain"

    @property
    def is_unimodular(self) -> bool:
        """True when the family emits |det g| = 1 by construction."""
        if self.family == "iid_sl2_rotation":
            return True
        if self.family == "svd_structured":
            return bool(self.params.get("unimodular", False))
        if self.family == "contracting_norm":
            if "matrix_cycle" in self.params:
                return all(abs(abs(SquareMatrix(np.asarray(m, float)).det) - 1.0) < 1e-12
                           for m in self.params["matrix_cycle"])
            lo, hi = _scalar_law(self.params.get("scale", {}), "params.scale") \
                if self.index_modulation is None else self._modulation_range()
            return lo == hi == 1.0
        if self.family == "markov_chain":
            kind = self.params["kernel"]["kind"]
            if kind in ("independent", "ar_lognorm"):
                init = self.params.get("initial")
                det_init = 1.0 if init is None else abs(float(np.linalg.det(np.asarray(init, float))))
                return abs(det_init - 1.0) < 1e-12
            if kind == "two_state":
                fixed_det = abs(float(np.linalg.det(np.asarray(self.params["kernel"]["fixed"], float))))
                return abs(fixed_det - 1.0) < 1e-12
            return False
        return False

    def modulated_value(self, j: int) -> float | None:
        mod = self.index_modulation
        if mod is None:
            return None
        if mod["kind"] == "sinusoid":
            return float(mod["base"]) + float(mod["amplitude"]) * math.sin(float(mod["omega"]) * j)
        vals = mod["values"]
        return float(vals[(j - 1) % len(vals)])

    # -- serialization ------------------------------------------------

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "schema": SCHEMA_VERSION,
            "family": self.family,
            "dim": self.dim,
            "params": copy.deepcopy(self.params),
        }
        if self.index_modulation is not None:
            out["index_modulation"] = copy.deepcopy(self.index_modulation)
        out["x0"] = self._x0.rep.tolist()
        out["boundary_matrix"] = self._boundary.entries.tolist()
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, d: dict, _allow_schema_missing: bool = False) -> "EnsembleSpec":
        _require(isinstance(d, dict), "spec", "must be a JSON object")
        if not _allow_schema_missing or "schema" in d:
            _require(d.get("schema") == SCHEMA_VERSION, "schema",
                     f"unsupported schema {d.get('schema')!r}; this build reads schema {SCHEMA_VERSION}")
        dim = d.get("dim")
        _require(isinstance(dim, int), "dim", "must be an integer")
        return cls(
            family=d.get("family"),
            dim=dim,
            params=d.get("params", {}),
            index_modulation=d.get("index_modulation"),
            x0=d.get("x0"),
            boundary_matrix=d.get("boundary_matrix"),
        )

    def __repr__(self) -> str:
        return f"EnsembleSpec(family={self.family!r}, dim={self.dim}, params={self.params!r})"


def spec_digest(spec: EnsembleSpec) -> str:
    """Stable sha256 of the canonical JSON form; recorded in every report."""
    return hashlib.sha256(spec.canonical_json().encode()).hexdigest()


def _as_path(seed) -> SeedPath:
    return seed if isinstance(seed, SeedPath) else SeedPath(int(seed))


# -- batch samplers ---------------------------------------------------
#
# Hot paths work on (m, d, d) stacks; the typed single-sample API wraps
# batches of one.  Slot layouts per family are fixed so that the value
# drawn for (traj, j, slot) never depends on batch shape.


def _compose_rot_diag_rot(s1, s2, phi_right, phi_left) -> np.ndarray:
    """R(phi_left) @ diag(s1, s2) @ R(phi_right) as an (..., 2, 2) stack."""
    c1, sn1 = np.cos(phi_right), np.sin(phi_right)
    c2, sn2 = np.cos(phi_left), np.sin(phi_left)
    m00 = s1 * c1
    m01 = -s1 * sn1
    m10 = s2 * sn1
    m11 = s2 * c1
    out = np.empty(np.broadcast(c1, c2).shape + (2, 2), dtype=np.float64)
    out[..., 0, 0] = c2 * m00 - sn2 * m10
    out[..., 0, 1] = c2 * m01 - sn2 * m11
    out[..., 1, 0] = sn2 * m00 + c2 * m10
    out[..., 1, 1] = sn2 * m01 + c2 * m11
    return out


def _haar_orthogonal(normals: np.ndarray) -> np.ndarray:
    """Haar-orthogonal stack from iid normal (..., d, d) input via QR."""
    q, r = np.linalg.qr(normals)
    diag = np.einsum("...ii->...i", r)
    sign = np.where(diag < 0, -1.0, 1.0)
    return q * sign[..., None, :]


def _spectral_norm_2x2(mats: np.ndarray) -> np.ndarray:
    """Largest singular value of an (..., 2, 2) stack, closed form."""
    fro2 = np.sum(mats * mats, axis=(-2, -1))
    det = mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    gap = np.sqrt(np.maximum(fro2 * fro2 - 4.0 * det * det, 0.0))
    return np.sqrt(0.5 * (fro2 + gap))


def _scale_range(spec: EnsembleSpec, name: str) -> tuple[float, float]:
    return _scalar_law(spec.params[name], f"params.{name}")


def _log_uniform(lo: float, hi: float, u: np.ndarray) -> np.ndarray:
    if lo == hi:
        return np.full_like(u, lo)
    return np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))


def _sample_iid_sl2(spec: EnsembleSpec, j: int, trajs: np.ndarray, seed: SeedPath) -> np.ndarray:
    u = seed.uniforms(STREAM_MATRIX, trajs, j, 2)
    a = spec.modulated_value(j)
    if a is None:
        a = float(spec.params["a"])
    two_pi = 2.0 * np.pi
    return _compose_rot_diag_rot(a, 1.0 / a, u[..., 0] * two_pi, u[..., 1] * two_pi)


def _svd_u_angles(law: dict, u_mag: np.ndarray, u_sign: np.ndarray) -> np.ndarray:
    kind = law.get("kind", "haar")
    if kind == "haar":
        return u_mag * 2.0 * np.pi
    if kind == "atom":
        return np.full_like(u_mag, float(law["angle"]))
    # log_singular: CDF F(t) = (|ln theta_max| / |ln t|)^kappa on (0, theta_max]
    kappa = float(law["kappa"])
    tmax = float(law["theta_max"])
    with np.errstate(under="ignore"):
        theta = np.exp(-abs(math.log(tmax)) * u_mag ** (-1.0 / kappa))
    return np.where(u_sign < 0.5, theta, -theta)


def _sample_svd_structured(spec: EnsembleSpec, j: int, trajs: np.ndarray, seed: SeedPath) -> np.ndarray:
    p = spec.params
    d = spec.dim
    lo, hi = _scale_range(spec, "sigma1")
    if d == 2:
        u = seed.uniforms(STREAM_MATRIX, trajs, j, 4)
        beta = _svd_u_angles(p.get("angle_law", {"kind": "haar"}), u[..., 0], u[..., 1])
        psi = u[..., 2] * 2.0 * np.pi
        s1 = _log_uniform(lo, hi, u[..., 3])
        if p.get("unimodular", False):
            s2 = 1.0 / s1
        else:
            gap = spec.modulated_value(j)
            if gap is None:
                gap = float(p.get("gap", 1.0))
            s2 = s1 / gap
        # U = R(beta) acts on the left, V = R(psi) on the right.
        return _compose_rot_diag_rot(s1, s2, psi, beta)
    from scipy.special import ndtri

    n_norm = 2 * d * d
    u = seed.uniforms(STREAM_MATRIX, trajs, j, n_norm + 1)
    normals = ndtri(u[..., :n_norm])
    shape = u.shape[:-1]
    U = _haar_orthogonal(normals[..., : d * d].reshape(shape + (d, d)))
    V = _haar_orthogonal(normals[..., d * d:].reshape(shape + (d, d)))
    s1 = _log_uniform(lo, hi, u[..., n_norm])
    gap = spec.modulated_value(j)
    if gap is None:
        gap = float(p.get("gap", 1.0))
    sig = np.empty(shape + (d,))
    sig[..., 0] = s1
    sig[..., 1:] = (s1 / gap)[..., None]
    return U * sig[..., None, :] @ V


def _sample_contracting(spec: EnsembleSpec, j: int, trajs: np.ndarray, seed: SeedPath) -> np.ndarray:
    p = spec.params
    d = spec.dim
    trajs = np.asarray(trajs)
    if "matrix_cycle" in p:
        mats = p["matrix_cycle"]
        g = np.asarray(mats[(j - 1) % len(mats)], dtype=np.float64)
        return np.broadcast_to(g, trajs.shape + (d, d)).copy()
    scale_mod = spec.modulated_value(j)
    if d == 2:
        u = seed.uniforms(STREAM_MATRIX, trajs, j, 2)
        theta = u[..., 0] * 2.0 * np.pi
        c = scale_mod if scale_mod is not None else _log_uniform(*_scale_range(spec, "scale"), u[..., 1])
        return _compose_rot_diag_rot(c, c, theta, 0.0)
    from scipy.special import ndtri

    u = seed.uniforms(STREAM_MATRIX, trajs, j, d * d + 1)
    O = _haar_orthogonal(ndtri(u[..., : d * d]).reshape(trajs.shape + (d, d)))
    c = scale_mod if scale_mod is not None else _log_uniform(*_scale_range(spec, "scale"), u[..., d * d])
    return O * np.asarray(c, dtype=np.float64)[..., None, None]


def _det_batch(mats: np.ndarray) -> np.ndarray:
    if mats.shape[-1] == 2:
        return mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    return np.linalg.det(mats)


def _sample_coupled_batch(spec: EnsembleSpec, j: int, trajs: np.ndarray, seed: SeedPath
                          ) -> tuple[np.ndarray, np.ndarray]:
    """(base, perturbed) stacks for a perturbed_base spec.

    The base marginal is bit-identical to sampling the base spec on its
    own, so theta(0) vanishes exactly and couplings are monotone in
    epsilon under a shared seed.
    """
    base_spec = spec.base_spec
    h = _sample_batch(base_spec, j, trajs, seed)
    eps = float(spec.params["epsilon"])
    if eps == 0.0:
        return h, h.copy()
    d = spec.dim
    retries = int(spec.params.get("max_retries", 8))
    half_width = eps / d  # |E_ij| <= eps/d gives ||E||_F <= eps
    det_floor = 0.5 * np.abs(_det_batch(h))
    key = seed.key(STREAM_NOISE, np.asarray(trajs), j)
    g = np.empty_like(h)
    pending = np.arange(h.shape[0])
    for r in range(retries):
        n_slots = (r + 1) * d * d
        u = uniform_slots(key[pending], n_slots)[..., r * d * d:]
        noise = (2.0 * u - 1.0).reshape(pending.shape + (d, d)) * half_width
        cand = h[pending] + noise
        g[pending] = cand
        ok = np.abs(_det_batch(cand)) >= det_floor[pending]
        pending = pending[~ok]
        if pending.size == 0:
            return h, g
    raise SingularMatrixError(
        f"perturbation retries exhausted at j={j} for trajectories {pending[:5].tolist()}"
    )


def _markov_initial(spec: EnsembleSpec, m: int) -> np.ndarray:
    init = spec.params.get("initial")
    g0 = np.asarray(init, dtype=np.float64) if init is not None else np.eye(spec.dim)
    return np.broadcast_to(g0, (m, spec.dim, spec.dim)).copy()


def _markov_step_batch(spec: EnsembleSpec, states: np.ndarray, j: int, trajs: np.ndarray,
                       seed: SeedPath) -> np.ndarray:
    kern = spec.params["kernel"]
    kind = kern["kind"]
    if kind == "identity":
        return states.copy()
    two_pi = 2.0 * np.pi
    if kind == "independent":
        u = seed.uniforms(STREAM_MATRIX, trajs, j, 3)
        lo, hi = float(kern["a_range"][0]), float(kern["a_range"][1])
        a = _log_uniform(lo, hi, u[..., 2])
        return _compose_rot_diag_rot(a, 1.0 / a, u[..., 0] * two_pi, u[..., 1] * two_pi)
    if kind == "ar_lognorm":
        from scipy.special import ndtri

        u = seed.uniforms(STREAM_MATRIX, trajs, j, 3)
        mu, phi, sd = float(kern["mu"]), float(kern["phi"]), float(kern["noise_sd"])
        ln_prev = np.log(_spectral_norm_2x2(states))
        ln_a = mu + phi * (ln_prev - mu) + sd * ndtri(u[..., 2])
        ln_a = np.clip(ln_a, math.log(float(kern["a_min"])), math.log(float(kern["a_max"])))
        a = np.exp(ln_a)
        return _compose_rot_diag_rot(a, 1.0 / a, u[..., 0] * two_pi, u[..., 1] * two_pi)
    # two_state
    u = seed.uniforms(STREAM_MATRIX, trajs, j, 4)
    a_big = float(kern["a_big"])
    fixed = np.asarray(kern["fixed"], dtype=np.float64)
    sw = float(kern["switch_prob"])
    big = _spectral_norm_2x2(states) >= float(kern["norm_threshold"])
    emit_fixed = np.where(big, u[..., 0] < sw, u[..., 0] >= sw)
    g_rand = _compose_rot_diag_rot(a_big, 1.0 / a_big, u[..., 1] * two_pi, u[..., 2] * two_pi)
    return np.where(emit_fixed[..., None, None], fixed, g_rand)


def _sample_batch(spec: EnsembleSpec, j: int, trajs, seed: SeedPath) -> np.ndarray:
    """(m, d, d) stack of g_j over a trajectory index array; independent families only."""
    if j < 1:
        raise ValueError(f"matrix index j must be >= 1, got {j}")
    trajs = np.asarray(trajs, dtype=np.uint64)
    fam = spec.family
    if fam == "iid_sl2_rotation":
        return _sample_iid_sl2(spec, j, trajs, seed)
    if fam == "svd_structured":
        return _sample_svd_structured(spec, j, trajs, seed)
    if fam == "contracting_norm":
        return _sample_contracting(spec, j, trajs, seed)
    if fam == "perturbed_base":
        return _sample_coupled_batch(spec, j, trajs, seed)[1]
    if fam == "markov_chain":
        # Chain law: evolve each trajectory from the initial state.
        states = _markov_initial(spec, int(trajs.shape[0]))
        for i in range(1, j + 1):
            states = _markov_step_batch(spec, states, i, trajs, seed)
        return states
    raise AssertionError(f"unhandled family {fam}")


# -- public single-sample API -----------------------------------------


def sample_matrix(spec: EnsembleSpec, j: int, seed, traj: int = 0) -> SquareMatrix:
    """The matrix g_j of trajectory `traj`; a pure function of its labels."""
    g = _sample_batch(spec, j, np.asarray([traj], dtype=np.uint64), _as_path(seed))[0]
    return SquareMatrix(g)


def sample_coupled(spec: EnsembleSpec, j: int, seed, traj: int = 0) -> CoupledSample:
    """Base/perturbed pair for a perturbed_base spec."""
    if spec.family != "perturbed_base":
        raise ValueError("sample_coupled requires a perturbed_base spec")
    h, g = _sample_coupled_batch(spec, j, np.asarray([traj], dtype=np.uint64), _as_path(seed))
    return CoupledSample(base=SquareMatrix(h[0]), perturbed=SquareMatrix(g[0]),
                         epsilon=float(spec.params["epsilon"]))


def sample_markov_step(spec: EnsembleSpec, state: MarkovState | None, seed, traj: int = 0
                       ) -> tuple[SquareMatrix, MarkovState]:
    """Advance the chain one step; state None means 'before the first step'."""
    if spec.family != "markov_chain":
        raise ValueError("sample_markov_step requires a markov_chain spec")
    if state is None:
        state = MarkovState(matrix=SquareMatrix(_markov_initial(spec, 1)[0]), index=0)
    j = state.index + 1
    nxt = _markov_step_batch(spec, state.matrix.entries[None, ...], j,
                             np.asarray([traj], dtype=np.uint64), _as_path(seed))[0]
    mat = SquareMatrix(nxt)
    return mat, MarkovState(matrix=mat, index=j)


def product_range_scaled(spec: EnsembleSpec, j: int, n: int, seed, traj: int = 0
                         ) -> tuple[np.ndarray, float]:
    """(P / s, ln s) with P = g_{j+n-1} ... g_j, right-to-left application.

    The pair form keeps long products finite; the stored factor has all
    entries within the representable range.
    """
    if n < 1:
        raise ValueError(f"product length n must be >= 1, got {n}")
    path = _as_path(seed)
    trajs = np.asarray([traj], dtype=np.uint64)
    d = spec.dim
    if spec.is_markov:
        states = _markov_initial(spec, 1)
        for i in range(1, j):
            states = _markov_step_batch(spec, states, i, trajs, path)
    P = np.eye(d)
    log_scale = 0.0
    for k in range(n):
        if spec.is_markov:
            states = _markov_step_batch(spec, states, j + k, trajs, path)
            g = states[0]
        else:
            g = _sample_batch(spec, j + k, trajs, path)[0]
        P = g @ P
        peak = np.max(np.abs(P))
        if peak > _SCALE_LIMIT:
            P = P / peak
            log_scale += math.log(peak)
    return P, log_scale


def product_range(spec: EnsembleSpec, j: int, n: int, seed, traj: int = 0) -> SquareMatrix:
    """Dense product g_{j+n-1} ... g_j; raises OverflowError beyond 1e150 scale."""
    P, ls = product_range_scaled(spec, j, n, seed, traj)
    peak = float(np.max(np.abs(P)))
    if ls + math.log(max(peak, 1e-300)) > math.log(_SCALE_LIMIT):
        raise OverflowError(
            "product norm exceeds 1e150; use product_range_scaled for the (matrix, log-scale) pair"
        )
    return SquareMatrix(P * math.exp(ls))
