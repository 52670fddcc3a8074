"""Projective geometry and norm primitives for invertible matrices.

The projective space P(R^d) is the unit sphere with antipodes glued;
the metric between lines spanned by unit vectors x, y is the wedge norm
||x ^ y|| = sqrt(1 - <x, y>^2), i.e. the sine of the angle between the
lines.  The norm cocycle sigma(g, y) = ln(||g y|| / ||y||) is additive
along products and bounded by ln N(g) with N(g) = max(||g||, ||g^-1||).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SingularMatrixError",
    "SquareMatrix",
    "Direction",
    "SvdTriple",
    "projective_distance",
    "cocycle_sigma",
    "norm_N",
    "svd",
    "act_projective",
    "det_normalize",
    "matrix_to_json",
    "matrix_from_json",
    "wedge_unit",
    "unit_rows",
]

# Relative determinant floor below which a matrix is treated as singular.
DET_REL_FLOOR = 1e-12


class SingularMatrixError(ValueError):
    """Raised when a matrix fails the invertibility floor |det| > 1e-12 ||g||^d."""


def _validate_square(entries: np.ndarray) -> np.ndarray:
    a = np.asarray(entries, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 2:
        raise ValueError("dimension must be >= 2")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


@dataclass(frozen=True)
class SvdTriple:
    """Factors of g = U diag(sigma) V with sigma descending and positive.

    V is stored row-orthogonal (the usual Vh), so its rows v_i are the
    right singular directions.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.U @ np.diag(self.sigma) @ self.V


class SquareMatrix:
    """Immutable invertible real matrix with cached spectral data."""

    __slots__ = ("entries", "_sigma", "_det")

    def __init__(self, entries):
        a = _validate_square(entries)
        a = a.copy()
        a.flags.writeable = False
        det = float(np.linalg.det(a))
        sigma = np.linalg.svd(a, compute_uv=False)
        if abs(det) <= DET_REL_FLOOR * float(sigma[0]) ** a.shape[0]:
            raise SingularMatrixError(
                f"|det| = {abs(det):.3e} is below the floor "
                f"{DET_REL_FLOOR:.0e} * ||g||^d = {DET_REL_FLOOR * float(sigma[0]) ** a.shape[0]:.3e}"
            )
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "_sigma", sigma)
        object.__setattr__(self, "_det", det)

    def __setattr__(self, name, value):
        raise AttributeError("SquareMatrix is immutable")

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def det(self) -> float:
        return self._det

    @property
    def norm(self) -> float:
        """Operator norm (largest singular value)."""
        return float(self._sigma[0])

    @property
    def sigma_min(self) -> float:
        return float(self._sigma[-1])

    @property
    def inv_norm(self) -> float:
        """||g^-1|| = 1 / sigma_min(g)."""
        return 1.0 / float(self._sigma[-1])

    def inverse(self) -> "SquareMatrix":
        return SquareMatrix(np.linalg.inv(self.entries))

    def __matmul__(self, other: "SquareMatrix") -> "SquareMatrix":
        return SquareMatrix(self.entries @ other.entries)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.entries @ np.asarray(v, dtype=np.float64)

    def __repr__(self) -> str:
        return f"SquareMatrix({self.entries.tolist()!r})"

    def allclose(self, other: "SquareMatrix", atol: float = 1e-12) -> bool:
        return self.dim == other.dim and bool(np.allclose(self.entries, other.entries, atol=atol, rtol=0.0))


class Direction:
    """A point of P(R^d): a unit vector identified with its negative."""

    __slots__ = ("rep",)

    def __init__(self, rep):
        v = np.asarray(rep, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] < 2:
            raise ValueError("direction must be a vector of dimension >= 2")
        if not np.all(np.isfinite(v)):
            raise ValueError("direction entries must be finite")
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-12:
            raise ValueError("representative must be a unit vector; use Direction.from_vector")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "rep", v)

    def __setattr__(self, name, value):
        raise AttributeError("Direction is immutable")

    @classmethod
    def from_vector(cls, v) -> "Direction":
        v = np.asarray(v, dtype=np.float64)
        n = float(np.linalg.norm(v))
        if n == 0.0 or not np.isfinite(n):
            raise ValueError("cannot normalize a zero or non-finite vector")
        return cls(v / n)

    @property
    def dim(self) -> int:
        return self.rep.shape[0]

    def canonical(self) -> np.ndarray:
        """Sign-canonical representative: first nonzero coordinate positive."""
        v = self.rep
        idx = np.flatnonzero(np.abs(v) > 1e-14)
        lead = idx[0] if idx.size else 0
        return -v if v[lead] < 0 else v

    def __eq__(self, other) -> bool:
        if not isinstance(other, Direction) or other.dim != self.dim:
            return NotImplemented
        return bool(np.allclose(self.canonical(), other.canonical(), atol=1e-9, rtol=0.0))

    def __hash__(self) -> int:
        return hash(tuple(np.round(self.canonical(), 6)))

    def __repr__(self) -> str:
        return f"Direction({self.rep.tolist()!r})"


def unit_rows(a: np.ndarray) -> np.ndarray:
    """Normalize the rows of a 2-D array to unit length."""
    a = np.asarray(a, dtype=np.float64)
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def wedge_unit(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """||x ^ y|| for unit rows x, y, clamped to [0, 1].

    Computed as ||x - <x,y> y||, which equals sqrt(1 - <x,y>^2) exactly
    but keeps relative precision when the directions nearly coincide.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ip = np.sum(x * y, axis=-1, keepdims=True)
    w = np.linalg.norm(x - ip * y, axis=-1)
    return np.clip(w, 0.0, 1.0)


def projective_distance(x: Direction, y: Direction) -> float:
    """Metric d(x, y) = ||x ^ y|| on P(R^d); 0 iff x == y, max 1."""
    if x.dim != y.dim:
        raise ValueError("directions live in different dimensions")
    return float(wedge_unit(x.rep, y.rep))


def cocycle_sigma(g: SquareMatrix, y) -> float:
    """Norm cocycle sigma(g, y) = ln(||g y|| / ||y||) for y != 0."""
    v = y.rep if isinstance(y, Direction) else np.asarray(y, dtype=np.float64)
    ny = float(np.linalg.norm(v))
    if ny == 0.0:
        raise ValueError("sigma(g, y) is undefined for y = 0")
    return float(np.log(np.linalg.norm(g.entries @ v)) - np.log(ny))


def norm_N(g: SquareMatrix) -> float:
    """N(g) = max(||g||, ||g^-1||); always >= 1 when |det g| = 1."""
    return max(g.norm, g.inv_norm)


def svd(g: SquareMatrix) -> SvdTriple:
    """Full SVD with descending positive singular values."""
    try:
        u, s, vh = np.linalg.svd(g.entries)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure is exotic
        raise ValueError(f"SVD failed to converge: {exc}") from exc
    return SvdTriple(U=u, sigma=s, V=vh)


def act_projective(g: SquareMatrix, x: Direction) -> Direction:
    """Projective action: the line through g x."""
    if g.dim != x.dim:
        raise ValueError("matrix and direction dimensions differ")
    return Direction.from_vector(g.entries @ x.rep)


def det_normalize(g: SquareMatrix) -> SquareMatrix:
    """Scale g by |det g|^(-1/d) so the result has |det| = 1."""
    scale = abs(g.det) ** (1.0 / g.dim)
    return SquareMatrix(g.entries / scale)


def matrix_to_json(g: SquareMatrix) -> str:
    """Row-major JSON; floats survive the round trip bit-exactly."""
    return json.dumps(g.entries.tolist())


def matrix_from_json(text: str) -> SquareMatrix:
    rows = json.loads(text)
    return SquareMatrix(np.asarray(rows, dtype=np.float64))
