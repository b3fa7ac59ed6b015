"""Flat tori, trigonometric Morse functions and their critical points."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateCritical, NonConvergence

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class TorusModel:
    """The flat torus ``R^n / Z^n`` sampled on a uniform periodic grid."""

    n: int
    grid_res: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        if self.grid_res < 8 or self.grid_res & (self.grid_res - 1):
            raise ValueError("grid_res must be a power of two and >= 8")

    @property
    def spacing(self) -> float:
        return 1.0 / self.grid_res

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.n

    @property
    def shape(self) -> tuple:
        return (self.grid_res,) * self.n

    def axes(self) -> list:
        return [np.arange(self.grid_res) / self.grid_res for _ in range(self.n)]

    def points(self) -> np.ndarray:
        """Grid coordinates with shape ``shape + (n,)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)


def torus_delta(a, b) -> np.ndarray:
    """Signed coordinate-wise difference ``a - b`` reduced to [-1/2, 1/2)."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.round(d)


def torus_distance(a, b) -> np.ndarray:
    return np.linalg.norm(torus_delta(a, b), axis=-1)


@dataclass(frozen=True)
class MorseTerm:
    freq: tuple
    amp: float
    phase: float = 0.0


@dataclass(frozen=True)
class MorseFunctionSpec:
    """h(x) = sum_m a_m cos(2 pi <m, x> + phi_m) on the unit torus."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(
            t if isinstance(t, MorseTerm)
            else MorseTerm(tuple(int(v) for v in t[0]), float(t[1]), float(t[2]) if len(t) > 2 else 0.0)
            for t in self.terms
        )
        if not terms:
            raise ValueError("a Morse function needs at least one term")
        dims = {len(t.freq) for t in terms}
        if len(dims) != 1:
            raise ValueError("all frequency vectors must share one dimension")
        object.__setattr__(self, "terms", terms)
        freqs = np.array([t.freq for t in terms], dtype=float)
        object.__setattr__(self, "_freqs", freqs)
        object.__setattr__(self, "_amps", np.array([t.amp for t in terms]))
        object.__setattr__(self, "_phases", np.array([t.phase for t in terms]))

    @property
    def n(self) -> int:
        return len(self.terms[0].freq)

    @property
    def bandwidth(self) -> int:
        return int(np.max(np.abs(self._freqs)))

    def _arg(self, x):
        x = np.asarray(x, dtype=float)
        return TWO_PI * (x @ self._freqs.T) + self._phases

    def value(self, x) -> np.ndarray:
        return np.cos(self._arg(x)) @ self._amps

    def grad(self, x) -> np.ndarray:
        s = np.sin(self._arg(x)) * self._amps
        return -TWO_PI * (s @ self._freqs)

    def hessian(self, x) -> np.ndarray:
        c = np.cos(self._arg(x)) * self._amps
        outer = np.einsum("mi,mj->mij", self._freqs, self._freqs)
        return -(TWO_PI ** 2) * np.tensordot(c, outer, axes=(-1, 0))

    def hessian_bound(self) -> float:
        """Upper bound on the spectral norm of the Hessian anywhere on the torus."""
        return float(TWO_PI ** 2 * np.sum(np.abs(self._amps) * np.sum(self._freqs ** 2, axis=1)))

    # serialization
    def to_dict(self) -> dict:
        return {"terms": [{"freq": list(t.freq), "amp": t.amp, "phase": t.phase} for t in self.terms]}

    @classmethod
    def from_dict(cls, data) -> "MorseFunctionSpec":
        records = data["terms"] if isinstance(data, dict) else data
        return cls(tuple(MorseTerm(tuple(int(v) for v in r["freq"]), float(r["amp"]), float(r.get("phase", 0.0)))
                         for r in records))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MorseFunctionSpec":
        return cls.from_dict(json.loads(text))


def eval_h(model: TorusModel, spec: MorseFunctionSpec, point) -> float:
    return float(spec.value(np.asarray(point, dtype=float).reshape(model.n)))


def grad_h(model: TorusModel, spec: MorseFunctionSpec, point) -> np.ndarray:
    return spec.grad(np.asarray(point, dtype=float).reshape(model.n))


def hessian_h(model: TorusModel, spec: MorseFunctionSpec, point) -> np.ndarray:
    return spec.hessian(np.asarray(point, dtype=float).reshape(model.n))


# reference functions used throughout the tests and the CLI
def cosine_t1() -> MorseFunctionSpec:
    return MorseFunctionSpec(((( 1,), 1.0, 0.0),))


def double_well_t1(a: float = 0.3) -> MorseFunctionSpec:
    return MorseFunctionSpec((((1,), 1.0, 0.0), ((2,), a, 0.0)))


def product_cosine_t2() -> MorseFunctionSpec:
    return MorseFunctionSpec((((1, 0), 1.0, 0.0), ((0, 1), 1.0, 0.0)))


def _canonical_sign(vectors: np.ndarray) -> np.ndarray:
    # deterministic eigenvector signs: the largest-magnitude entry is positive
    out = vectors.copy()
    for j in range(out.shape[1]):
        i = np.argmax(np.abs(out[:, j]))
        if out[i, j] < 0:
            out[:, j] = -out[:, j]
    return out


@dataclass(frozen=True)
class CriticalPoint:
    """A nondegenerate critical point together with its Hessian eigenframe.

    ``unstable_frame`` holds the eigenvectors of the negative Hessian
    eigenvalues as columns, ordered by ascending eigenvalue.  Its ordering,
    multiplied by ``orientation``, is the chosen orientation of the unstable
    manifold (for an index-0 point only the sign is meaningful).
    """

    position: tuple
    value: float
    index: int
    hessian_eigs: tuple
    unstable_frame: np.ndarray = field(repr=False, compare=False)
    stable_frame: np.ndarray = field(repr=False, compare=False)
    orientation: int = 1
    label: str = ""

    @property
    def n(self) -> int:
        return len(self.position)

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)

    @property
    def frame(self) -> np.ndarray:
        """Full eigenframe, unstable directions first."""
        return np.hstack([self.unstable_frame, self.stable_frame])

    @property
    def abs_eigs(self) -> np.ndarray:
        """|Hessian eigenvalues| matching the column order of :attr:`frame`."""
        return np.abs(np.asarray(self.hessian_eigs))

    def flipped(self) -> "CriticalPoint":
        return replace(self, orientation=-self.orientation)


def _snap(x: np.ndarray) -> np.ndarray:
    x = np.mod(x, 1.0)
    x[np.abs(x) < 1e-13] = 0.0
    x[np.abs(x - 1.0) < 1e-13] = 0.0
    return x


def classify(spec: MorseFunctionSpec, position, degeneracy_tol: float) -> CriticalPoint:
    x = np.asarray(position, dtype=float)
    H = spec.hessian(x)
    H = 0.5 * (H + H.T)
    eigs, vecs = np.linalg.eigh(H)
    if np.min(np.abs(eigs)) < degeneracy_tol:
        raise DegenerateCritical(
            f"critical point at {tuple(x)} has Hessian eigenvalue {eigs[np.argmin(np.abs(eigs))]:.3e}")
    k = int(np.sum(eigs < 0))
    vecs = _canonical_sign(vecs)
    return CriticalPoint(
        position=tuple(float(v) for v in x),
        value=float(spec.value(x)),
        index=k,
        hessian_eigs=tuple(float(e) for e in eigs),
        unstable_frame=vecs[:, :k],
        stable_frame=vecs[:, k:],
    )


def find_critical_points(model: TorusModel, spec: MorseFunctionSpec, seeds_per_axis: int = 16,
                         tol: float = 1e-12, degeneracy_tol: float | None = None,
                         max_iter: int = 60) -> list:
    """Newton's method on grad h = 0 from a regular seed lattice.

    Roots are deduplicated modulo the period lattice and returned sorted
    by (index, value, position).
    """
    if seeds_per_axis < 8:
        raise ValueError("seeds_per_axis must be >= 8")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if spec.n != model.n:
        raise ValueError("Morse function dimension does not match the torus")
    n = model.n
    axes = [(np.arange(seeds_per_axis) + 0.25) / seeds_per_axis for _ in range(n)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    active = np.ones(len(X), dtype=bool)
    converged = np.zeros(len(X), dtype=bool)
    step_cap = 0.25 / max(1, spec.bandwidth)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        g = spec.grad(X[idx])
        gnorm = np.linalg.norm(g, axis=1)
        done = gnorm < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        idx, g = idx[~done], g[~done]
        if idx.size == 0:
            break
        H = spec.hessian(X[idx])
        step = np.einsum("mij,mj->mi", np.linalg.pinv(H), g)
        norm = np.linalg.norm(step, axis=1, keepdims=True)
        step *= np.minimum(1.0, step_cap / np.maximum(norm, 1e-300))
        X[idx] -= step
    # a few polishing iterations absorb round-off stagnation just above tol
    for _ in range(3):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        g = spec.grad(X[idx])
        ok = np.linalg.norm(g, axis=1) < 1e3 * tol
        if not ok.any():
            break
        H = spec.hessian(X[idx[ok]])
        X[idx[ok]] -= np.einsum("mij,mj->mi", np.linalg.pinv(H), g[ok])
        g2 = np.linalg.norm(spec.grad(X[idx[ok]]), axis=1)
        hit = idx[ok][g2 < tol]
        converged[hit] = True
        active[hit] = False
    roots = X[converged]
    if len(roots) == 0:
        raise NonConvergence("Newton iteration converged from no seed")
    roots = _snap(roots)

    unique: list = []
    for r in roots:
        if not any(torus_distance(r, u) < 10 * tol for u in unique):
            unique.append(r)

    if degeneracy_tol is None:
        scale = max(float(np.max(np.abs(spec.hessian(np.array(unique))))), 1e-300)
        degeneracy_tol = 1e-6 * scale
    points = [classify(spec, u, degeneracy_tol) for u in unique]
    points.sort(key=lambda c: (c.index, round(c.value, 9), tuple(round(p, 9) for p in c.position)))
    return [replace(c, label=f"c{c.index}_{i}") for i, c in enumerate(points)]


def minimal_distance(points: Sequence[CriticalPoint]) -> float:
    best = math.inf
    for i, a in enumerate(points):
        for b in points[i + 1:]:
            best = min(best, float(torus_distance(a.x, b.x)))
    return best


def index_counts(points: Iterable[CriticalPoint], n: int) -> list:
    counts = [0] * (n + 1)
    for c in points:
        counts[c.index] += 1
    return counts
