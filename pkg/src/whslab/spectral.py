"""Eigensolves of the Witten Laplacian, gap detection and the comparison maps.

Forms are handled as flat vectors scaled by sqrt(cell volume), so the
Euclidean inner product of two vectors equals the L2 inner product of the
forms they represent.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.linalg import eigh
from scipy.sparse.linalg import LinearOperator, cg, lobpcg

from .errors import GapNotOpen, HypothesisViolation, NoConvergence, RankDeficient, SupportOverlap
from .forms import (GridForm, _grid_data, _number_table, basis, check_resolution, min_resolution,
                    random_form, squared_wavenumbers, witten_d, witten_laplacian_apply)
from .geometry import (CriticalPoint, MorseFunctionSpec, TorusModel, find_critical_points, index_counts,
                       minimal_distance, torus_delta)
from .morse import MorseComplex, TrigInterpolant, UnstableCell, build_cells, integrate_values
from .oscillator import _radial_rule, smoothstep_profile

SMALL_THRESHOLD = 1.0
DENSE_LIMIT = 3000
SELF_ADJOINT_TOL = 1e-9


def fmt(x) -> str:
    """17 significant digits, the CSV float format."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# operators and eigensolves


class SymmetricOperatorHandle:
    """A symmetric operator on q-forms over a grid, applied to scaled vectors.

    ``apply`` maps a :class:`GridForm` to a :class:`GridForm`.  Construction
    runs a self-adjointness probe on random band-limited forms and raises
    :class:`HypothesisViolation` when it fails.
    """

    def __init__(self, apply: Callable, q: int, model: TorusModel, meta: dict | None = None,
                 probe: bool = True, seed: int = 0, shift: float = 1.0, potential: np.ndarray | None = None):
        self.apply = apply
        # optional fused path: -Lap plus a pointwise (C x C) potential field
        self.potential = potential
        self.q = q
        self.model = model
        self.meta = dict(meta or {})
        self.shift = float(shift)
        self.ncomp = len(basis(model.n, q))
        self.size = self.ncomp * model.grid_res ** model.n
        self._scale = math.sqrt(model.cell_volume)
        if probe:
            self.probe_residual = self._probe(seed)
            if self.probe_residual > SELF_ADJOINT_TOL:
                raise HypothesisViolation(f"operator is not self-adjoint: probe residual {self.probe_residual:.3e}")

    @classmethod
    def witten(cls, spec: MorseFunctionSpec, model: TorusModel, q: int, t: float,
               path: str = "decomposition", dealias: bool = False, check: bool = True,
               seed: int = 0) -> "SymmetricOperatorHandle":
        """Delta_q(t) for the Morse function ``spec`` on ``model``."""
        if check:
            check_resolution(spec, model, t)
        n = model.n
        _, g, H = _grid_data(spec, n, model.grid_res)
        g2 = np.sum(g * g, axis=0)
        shift = t * t * float(np.mean(g2)) + 1.0
        potential = None
        if path == "decomposition" and not dealias:
            C = len(basis(n, q))
            potential = np.zeros((C, C) + model.shape)
            trace = sum(H[i, i] for i in range(n))
            for a in range(C):
                potential[a, a] = t * t * g2 - t * trace
            for b, a, i, j, sign in _number_table(n, q):
                potential[b, a] += 2 * sign * t * H[i, j]
        return cls(lambda f: witten_laplacian_apply(f, spec, t, path=path, dealias=dealias), q, model,
                   {"spec": spec, "t": float(t), "path": path}, seed=seed, shift=shift, potential=potential)

    def to_form(self, vec: np.ndarray) -> GridForm:
        comps = np.asarray(vec, dtype=float).reshape((self.ncomp,) + self.model.shape) / self._scale
        return GridForm(self.q, comps)

    def to_vec(self, form: GridForm) -> np.ndarray:
        return form.components.reshape(-1) * self._scale

    def matvec(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = X.reshape(self.size, -1)
        if self.potential is not None:
            out = self._fused(X)
        else:
            out = np.empty_like(X)
            for j in range(X.shape[1]):
                out[:, j] = self.to_vec(self.apply(self.to_form(X[:, j])))
        return out[:, 0] if single else out

    def _wavenumbers(self) -> np.ndarray:
        return squared_wavenumbers(self.model.n, self.model.grid_res, real=True)

    def _fused(self, X: np.ndarray) -> np.ndarray:
        n, N = self.model.n, self.model.grid_res
        Y = X.T.reshape((-1, self.ncomp) + self.model.shape)
        axes = tuple(range(2, 2 + n))
        lap = sfft.irfftn(self._wavenumbers() * sfft.rfftn(Y, axes=axes), s=self.model.shape, axes=axes)
        pot = np.einsum("ba...,ma...->mb...", self.potential, Y)
        return (lap + pot).reshape(X.shape[1], -1).T

    def precondition(self, X: np.ndarray) -> np.ndarray:
        """Inverse of -Lap + shift, diagonal in Fourier space."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = X.reshape(self.size, -1)
        n = self.model.n
        Y = X.T.reshape((-1, self.ncomp) + self.model.shape)
        axes = tuple(range(2, 2 + n))
        Z = sfft.irfftn(sfft.rfftn(Y, axes=axes) / (self._wavenumbers() + self.shift), s=self.model.shape, axes=axes)
        out = Z.reshape(X.shape[1], -1).T
        return out[:, 0] if single else out

    def dense(self) -> np.ndarray:
        A = self.matvec(np.eye(self.size))
        return 0.5 * (A + A.T)

    def _probe(self, seed: int) -> float:
        rng = np.random.default_rng(seed + 7919)
        band = max(1, self.model.grid_res // 8)
        worst = 0.0
        for _ in range(2):
            u = self.to_vec(random_form(self.model, self.q, band, rng))
            v = self.to_vec(random_form(self.model, self.q, band, rng))
            Au, Av = self.matvec(u), self.matvec(v)
            scale = max(np.linalg.norm(Au) * np.linalg.norm(v), np.linalg.norm(Av) * np.linalg.norm(u), 1e-300)
            worst = max(worst, abs(float(Au @ v - u @ Av)) / scale)
        return worst


@dataclass(frozen=True)
class Eigenpairs:
    values: np.ndarray
    vectors: np.ndarray = field(repr=False)
    residuals: np.ndarray
    method: str

    def forms(self, op: SymmetricOperatorHandle) -> list:
        return [op.to_form(v) for v in self.vectors.T]


def lowest_eigenpairs(op: SymmetricOperatorHandle, count: int, tol: float = 1e-8, seed: int = 0,
                      method: str = "auto", maxiter: int = 600, expected: int | None = None) -> Eigenpairs:
    """Lowest ``count`` eigenpairs with ``|op v - lam v| <= tol max(1, |lam|)`` for each pair.

    ``method`` is ``"dense"``, ``"lobpcg"`` or ``"auto"`` (dense for small
    problems).  LOBPCG starts from a seeded random block, so results are
    deterministic.
    """
    if count < 1 or count > op.size:
        raise ValueError("count must lie in 1..size")
    if expected is not None and count > 2 * op.ncomp * (expected + 4):
        raise ValueError(f"count {count} exceeds 2 C(n,q) (m_q + 4) = {2 * op.ncomp * (expected + 4)}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if method == "auto":
        method = "dense" if op.size <= DENSE_LIMIT else "lobpcg"
    if method == "dense":
        vals, vecs = eigh(op.dense(), subset_by_index=(0, count - 1))
    elif method == "lobpcg":
        vals, vecs = _lobpcg(op, count, tol, seed, maxiter)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = np.linalg.norm(op.matvec(vecs) - vecs * vals, axis=0)
    bad = res > tol * np.maximum(1.0, np.abs(vals))
    if np.any(bad):
        raise NoConvergence(f"{method}: {int(bad.sum())} of {count} pairs above tolerance; residuals "
                            f"{np.array2string(res, precision=3)} for eigenvalues "
                            f"{np.array2string(vals, precision=6)}")
    return Eigenpairs(vals, vecs, res, method)


def _lobpcg(op: SymmetricOperatorHandle, count: int, tol: float, seed: int, maxiter: int) -> tuple:
    """LOBPCG to a modest tolerance, then block inverse iteration to the requested one.

    LOBPCG cannot resolve residuals far below eps |A| reliably, so its block
    is refined by Rayleigh-Ritz on the span of the block and (A + 1)^{-1}
    applied to the unconverged pairs, each solve by preconditioned CG.
    """
    guard = max(2, count // 2)
    block = min(count + guard, op.size // 4)
    A = LinearOperator((op.size, op.size), matvec=op.matvec, matmat=op.matvec, dtype=float)
    M = LinearOperator((op.size, op.size), matvec=op.precondition, matmat=op.precondition, dtype=float)
    X = np.random.default_rng(seed).standard_normal((op.size, block))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, X = lobpcg(A, X, M=M, largest=False, tol=1e-6, maxiter=maxiter)
    shifted = LinearOperator((op.size, op.size), matvec=lambda v: op.matvec(v) + v, dtype=float)
    for _ in range(8):
        vals, X = _rayleigh_ritz(op, X)
        res = np.linalg.norm(op.matvec(X[:, :count]) - X[:, :count] * vals[:count], axis=0)
        bad = np.nonzero(res > 0.5 * tol * np.maximum(1.0, np.abs(vals[:count])))[0]
        if bad.size == 0:
            break
        Y = np.column_stack([cg(shifted, X[:, j], rtol=1e-12, atol=0.0, M=M, maxiter=2000)[0] for j in bad])
        vals, Z = _rayleigh_ritz(op, np.hstack([X, Y]))
        X = Z[:, :block]
    return vals[:count], X[:, :count]


def _rayleigh_ritz(op: SymmetricOperatorHandle, X: np.ndarray) -> tuple:
    Q, _ = np.linalg.qr(X)
    K = Q.T @ op.matvec(Q)
    w, W = eigh(0.5 * (K + K.T))
    return w, Q @ W


# ---------------------------------------------------------------------------
# gap detection


@dataclass(frozen=True)
class SpectrumReport:
    q: int
    t: float
    grid_res: int
    eigenvalues: np.ndarray
    residuals: np.ndarray
    small_count: int
    expected: int
    max_small: float
    min_large: float
    widest_gap_index: int
    fits: dict = field(default_factory=dict)

    COLUMNS = ("q", "t", "grid_res", "small_count", "expected", "max_small", "min_large",
               "widest_gap_index", "max_residual", "decay_slope", "decay_corr", "growth_slope", "count_ok")

    def row(self) -> list:
        f = self.fits
        return [str(self.q), fmt(self.t), str(self.grid_res), str(self.small_count), str(self.expected),
                fmt(self.max_small), fmt(self.min_large), str(self.widest_gap_index),
                fmt(np.max(self.residuals)), fmt(f.get("C2", math.nan)), fmt(f.get("decay_corr", math.nan)),
                fmt(f.get("C3", math.nan)), str(int(self.small_count == self.expected))]


_EIG_CACHE: dict = {}


def witten_eigenpairs(spec: MorseFunctionSpec, model: TorusModel, q: int, t: float, count: int,
                      tol: float = 1e-8, seed: int = 0) -> tuple:
    """Cached lowest eigenpairs of Delta_q(t); returns ``(op, pairs)``."""
    key = (spec, model, q, float(t), count, tol, seed)
    if key not in _EIG_CACHE:
        op = SymmetricOperatorHandle.witten(spec, model, q, t, seed=seed)
        _EIG_CACHE[key] = (op, lowest_eigenpairs(op, count, tol, seed))
    return _EIG_CACHE[key]


def clear_cache():
    _EIG_CACHE.clear()


def default_resolution(spec: MorseFunctionSpec, t: float, grid_res: int | None = None) -> int:
    floor = 256 if spec.n == 1 else 32
    if grid_res is not None:
        return grid_res
    return max(floor, min_resolution(spec, spec.n, t))


def _fit(x, y) -> tuple:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2 or not np.all(np.isfinite(y)):
        return math.nan, math.nan
    slope = float(np.polyfit(x, y, 1)[0])
    corr = float(np.corrcoef(x, y)[0, 1]) if np.std(y) > 0 else math.nan
    return slope, corr


def gap_report(spec: MorseFunctionSpec, q: int, t_grid: Sequence[float], count: int | None = None,
               grid_res: int | None = None, tol: float = 1e-8, seed: int = 0,
               threshold: float = SMALL_THRESHOLD, require_open: bool = True) -> list:
    """Spectrum sweep of Delta_q(t) over ``t_grid`` with the gap fits.

    With ``grid_res=None`` each t uses the smallest grid passing the
    resolution guard; a fixed ``grid_res`` that is too coarse raises
    :class:`ResolutionTooCoarse`.  Fits over t > 0: C2 is minus the slope of
    log(max small eigenvalue), C3 the slope of the smallest large
    eigenvalue.  :class:`GapNotOpen` is raised when the small count differs
    from the number of index-q critical points at the largest t.
    """
    n = spec.n
    points = find_critical_points(TorusModel(n, 64), spec)
    expected = index_counts(points, n)[q]
    count = expected + 4 if count is None else count
    raw = []
    for t in sorted(float(v) for v in t_grid):
        model = TorusModel(n, default_resolution(spec, t, grid_res))
        _, pairs = witten_eigenpairs(spec, model, q, t, count, tol, seed)
        vals = pairs.values
        small = vals < threshold
        k = int(small.sum())
        max_small = float(vals[small].max()) if k else math.nan
        min_large = float(vals[~small].min()) if k < len(vals) else math.nan
        pos = np.maximum(vals, 1e-300)
        widest = int(np.argmax(pos[1:] / pos[:-1])) + 1 if len(vals) > 1 else 0
        raw.append((t, model.grid_res, vals, pairs.residuals, k, max_small, min_large, widest))
    ts = [r[0] for r in raw if r[0] > 0]
    logs = [math.log(max(r[5], np.finfo(float).tiny)) if r[4] else math.nan for r in raw if r[0] > 0]
    larges = [r[6] for r in raw if r[0] > 0]
    d_slope, d_corr = _fit(ts, logs)
    g_slope, g_corr = _fit(ts, larges)
    ok = [r[0] for r in raw if r[4] == expected]
    t0 = math.nan
    for r in reversed(raw):
        if r[4] != expected:
            break
        t0 = r[0]
    fits = {"C2": -d_slope, "decay_corr": -d_corr if not math.isnan(d_corr) else math.nan,
            "C3": g_slope, "growth_corr": g_corr, "T0": t0}
    reports = [SpectrumReport(q, t, N, vals, res, k, expected, ms, ml, w, dict(fits))
               for t, N, vals, res, k, ms, ml, w in raw]
    if require_open and reports and reports[-1].small_count != expected:
        raise GapNotOpen(f"q={q}: {reports[-1].small_count} eigenvalues below {threshold} at t={reports[-1].t}, "
                         f"expected {expected}")
    return reports


def spectrum_csv(reports: Sequence[SpectrumReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SpectrumReport.COLUMNS)
    for r in sorted(reports, key=lambda r: (r.q, r.t)):
        w.writerow(r.row())
    return buf.getvalue()


def eigenvalue_csv(reports: Sequence[SpectrumReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("q", "t", "j", "eigenvalue", "residual"))
    for r in sorted(reports, key=lambda r: (r.q, r.t)):
        for j, (v, e) in enumerate(zip(r.eigenvalues, r.residuals)):
            w.writerow([str(r.q), fmt(r.t), str(j), fmt(v), fmt(e)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# the gap lemma


def _rayleigh_extremes(A: np.ndarray, basis_: np.ndarray) -> tuple:
    B = np.asarray(basis_, dtype=float)
    if B.shape[1] == 0:
        return math.inf, -math.inf
    G = B.T @ B
    K = B.T @ A @ B
    vals = eigh(0.5 * (K + K.T), 0.5 * (G + G.T), eigvals_only=True)
    return float(vals[0]), float(vals[-1])


def verify_gap_lemma(A, H1, H2, a: float, b: float, tol: float = 1e-10) -> bool:
    """No eigenvalue of A in (a, b), given a complementary split with
    <Ax, x> <= a |x|^2 on H1 and <Ax, x> >= b |x|^2 on H2.

    ``H1`` and ``H2`` are bases as matrix columns.  The hypotheses are checked
    first and :class:`HypothesisViolation` is raised if one fails; the
    conclusion is then tested against a brute-force eigensolve and its truth
    value returned.
    """
    A = np.asarray(A, dtype=float)
    H1 = np.asarray(H1, dtype=float).reshape(len(A), -1)
    H2 = np.asarray(H2, dtype=float).reshape(len(A), -1)
    if not 0 < a < b:
        raise HypothesisViolation("need 0 < a < b")
    if np.max(np.abs(A - A.T)) > tol * max(1.0, np.max(np.abs(A))):
        raise HypothesisViolation("matrix is not symmetric")
    evals = np.linalg.eigvalsh(0.5 * (A + A.T))
    scale = max(1.0, float(np.max(np.abs(evals))))
    if evals[0] < -tol * scale:
        raise HypothesisViolation("matrix is not positive")
    both = np.hstack([H1, H2])
    if both.shape[1] != len(A) or np.linalg.matrix_rank(both, tol=tol * max(1.0, np.linalg.norm(both))) != len(A):
        raise HypothesisViolation("H1 and H2 do not form a direct sum decomposition of the space")
    if H1.shape[1] and _rayleigh_extremes(A, H1)[1] > a + tol * scale:
        raise HypothesisViolation("quadratic form exceeds a on H1")
    if H2.shape[1] and _rayleigh_extremes(A, H2)[0] < b - tol * scale:
        raise HypothesisViolation("quadratic form falls below b on H2")
    return not bool(np.any((evals > a + tol * scale) & (evals < b - tol * scale)))


# ---------------------------------------------------------------------------
# comparison maps


def default_eta(points: Sequence[CriticalPoint]) -> float:
    return 0.4 * minimal_distance(points)


def _chart_beta(eigs: np.ndarray, t: float, eta: float) -> float:
    """L2 norm of gamma_eta(|u|) times the anisotropic unit Gaussian, by polar quadrature."""
    n = len(eigs)
    r, w = _radial_rule(eta, t)
    gam2 = smoothstep_profile(r, eta) ** 2
    pref2 = (t / math.pi) ** (n / 2) * float(np.prod(np.abs(eigs))) ** 0.5
    if n == 1:
        ang = np.array([[1.0], [-1.0]])
        aw = np.ones(2)
    elif n == 2:
        th = 2 * math.pi * np.arange(128) / 128
        ang = np.stack([np.cos(th), np.sin(th)], axis=-1)
        aw = np.full(128, 2 * math.pi / 128)
    else:
        raise NotImplementedError("cutoff transplants are implemented for n <= 2")
    quad = ang ** 2 @ np.abs(eigs)
    vals = np.exp(-t * np.outer(r * r, quad)) * (gam2 * r ** (n - 1))[:, None]
    return math.sqrt(pref2 * float(np.sum(w[:, None] * vals * aw[None, :])))


def transplant(y: CriticalPoint, model: TorusModel, t: float, eta: float) -> GridForm:
    """The cutoff Gaussian at ``y`` carried through its Hessian eigenframe chart.

    In the orthonormal eigen-coordinates u of y the state is
    gamma_eta(|u|) (t/pi)^{n/4} prod|lam_i|^{1/4} exp(-t sum |lam_i| u_i^2 / 2) / beta
    times du over the unstable directions (oriented by ``y.orientation``):
    the ground state of the quadratic model of Delta_q(t) at y, which is
    the isotropic model state after rescaling u_i by |lam_i|^{1/2}.
    """
    n, q = model.n, y.index
    eigs = y.abs_eigs
    u = torus_delta(model.points(), y.x) @ y.frame
    r = np.sqrt(np.sum(u * u, axis=-1))
    pref = (t / math.pi) ** (n / 4) * float(np.prod(eigs)) ** 0.25 / _chart_beta(eigs, t, eta)
    g = pref * smoothstep_profile(r, eta) * np.exp(-0.5 * t * np.sum(eigs * u * u, axis=-1))
    E = y.unstable_frame
    comps = []
    for I in basis(n, q):
        coef = float(np.linalg.det(E[list(I), :])) if q else 1.0
        comps.append(y.orientation * coef * g)
    return GridForm(q, np.array(comps).reshape((len(comps),) + model.shape))


@dataclass(frozen=True)
class JMap:
    q: int
    t: float
    eta: float
    labels: tuple
    vectors: np.ndarray = field(repr=False)
    gram: np.ndarray


def build_J(spec: MorseFunctionSpec, q: int, t: float, eta: float | None = None,
            model: TorusModel | None = None, points: Sequence[CriticalPoint] | None = None,
            op: SymmetricOperatorHandle | None = None) -> JMap:
    """Columns: cutoff Gaussians at the index-q critical points, sampled on the grid."""
    model = model or TorusModel(spec.n, default_resolution(spec, t))
    points = points if points is not None else find_critical_points(TorusModel(spec.n, 64), spec)
    d_min = minimal_distance(points) if len(points) > 1 else 1.0
    eta = default_eta(points) if eta is None and len(points) > 1 else (0.4 if eta is None else eta)
    if eta <= 0 or 2 * eta >= d_min or eta >= 0.5:
        raise SupportOverlap(f"cutoff radius {eta:.4g} must be positive and below half the minimal "
                             f"critical distance {d_min:.4g} (and below 1/2)")
    gens = [p for p in points if p.index == q]
    scale = math.sqrt(model.cell_volume)
    cols = [transplant(y, model, t, eta).components.reshape(-1) * scale for y in gens]
    V = np.array(cols).T if cols else np.zeros((len(basis(spec.n, q)) * model.grid_res ** spec.n, 0))
    return JMap(q, float(t), float(eta), tuple(y.label for y in gens), V, V.T @ V)


@dataclass(frozen=True)
class Isometry:
    q: int
    t: float
    labels: tuple
    vectors: np.ndarray = field(repr=False)
    small_values: np.ndarray
    gram_I: np.ndarray
    defect_l2: float
    defect_sup: float
    tail_sup: np.ndarray
    isometry_error: float


def small_subspace(spec: MorseFunctionSpec, model: TorusModel, q: int, t: float, count: int,
                   tol: float = 1e-8, seed: int = 0, threshold: float = SMALL_THRESHOLD) -> tuple:
    """(op, eigenvalues, orthonormal basis vectors) of the span of eigenforms below ``threshold``."""
    op, pairs = witten_eigenpairs(spec, model, q, t, count, tol, seed)
    keep = pairs.values < threshold
    if keep.all():
        raise NoConvergence(f"all {count} computed eigenvalues lie below {threshold}; raise the count")
    return op, pairs.values[keep], pairs.vectors[:, keep]


def build_isometry(spec: MorseFunctionSpec, q: int, t: float, eta: float | None = None,
                   model: TorusModel | None = None, points: Sequence[CriticalPoint] | None = None,
                   tol: float = 1e-8, seed: int = 0, count: int | None = None) -> Isometry:
    """The polar isometry I (I^# I)^{-1/2} of I = Q J, with the defect |QJ - J|."""
    model = model or TorusModel(spec.n, default_resolution(spec, t))
    points = points if points is not None else find_critical_points(TorusModel(spec.n, 64), spec)
    J = build_J(spec, q, t, eta, model, points)
    m = len(J.labels)
    count = m + 4 if count is None else count
    op, vals, V = small_subspace(spec, model, q, t, count, tol, seed)
    if V.shape[1] != m:
        raise RankDeficient(f"small subspace has dimension {V.shape[1]} but there are {m} index-{q} points "
                            f"at t={t}")
    B = V.T @ J.vectors
    G = B.T @ B
    w, P = np.linalg.eigh(0.5 * (G + G.T))
    if m and w[0] < 1e-10 * max(1.0, w[-1]):
        raise RankDeficient(f"Gram matrix of Q J is singular (smallest eigenvalue {w[0]:.3e}) at t={t}")
    inv_sqrt = (P / np.sqrt(w)) @ P.T if m else G
    U = V @ (B @ inv_sqrt)
    D = V @ B - J.vectors
    scale = math.sqrt(model.cell_volume)
    defect_l2 = float(np.linalg.norm(D, 2)) if m else 0.0
    defect_sup = float(np.max(np.abs(D))) / scale if m else 0.0
    tails = []
    pts = model.points()
    for j, label in enumerate(J.labels):
        y = next(p for p in points if p.label == label)
        far = np.sqrt(np.sum(torus_delta(pts, y.x) ** 2, axis=-1)) > J.eta
        comps = np.abs(U[:, j].reshape((op.ncomp,) + model.shape)) / scale
        tails.append(float(np.max(comps[:, far])) if far.any() else 0.0)
    err = float(np.max(np.abs(U.T @ U - np.eye(m)))) if m else 0.0
    return Isometry(q, float(t), J.labels, U, vals, G, defect_l2, defect_sup, np.array(tails), err)


def _log_scale(x: CriticalPoint, t: float, n: int) -> float:
    # (pi/t)^{(n-2q)/4} prod_u |lam|^{1/4} prod_s |lam|^{-1/4}; e^{-t h(x)} enters per node
    q = x.index
    eigs = x.abs_eigs
    return (n - 2 * q) / 4 * math.log(math.pi / t) + 0.25 * float(np.sum(np.log(eigs[:q]))) \
        - 0.25 * float(np.sum(np.log(eigs[q:])))


@dataclass(frozen=True)
class ComparisonReport:
    q: int
    t: float
    labels: tuple
    L: np.ndarray
    deviation: float
    isometry: Isometry = field(repr=False)

    COLUMNS = ("q", "t", "m_q", "deviation", "defect_l2", "defect_sup", "isometry_error", "max_tail",
               "ratio_to_2t", "pass_025")


def comparison_matrix(spec: MorseFunctionSpec, cx: MorseComplex, q: int, t: float, eta: float | None = None,
                      cells: dict | None = None, model: TorusModel | None = None, tol: float = 1e-8,
                      quad_tol: float = 1e-6, seed: int = 0, prune: float = 40.0) -> ComparisonReport:
    """Matrix of Int o e^{th} applied to the isometry columns, with per-generator rescaling.

    Entry (x, y) = s_x * integral over W_x^- of exp(t (h - h(x))) U_y, where
    s_x = (pi/t)^{(n-2q)/4} prod_u |lam|^{1/4} prod_s |lam|^{-1/4}.  All
    exponentials are combined in log space; nodes where t (h - h(x)) falls
    below ``-prune`` contribute nothing and are skipped.
    """
    n = spec.n
    model = model or TorusModel(n, default_resolution(spec, t))
    iso = build_isometry(spec, q, t, eta, model, cx.points, tol, seed)
    cells = cells if cells is not None else build_cells(cx, spec)
    labels = iso.labels
    if tuple(cx.generators[q]) != labels:
        raise ValueError("generator order differs between the complex and the critical-point census")
    scale = math.sqrt(model.cell_volume)
    ncomp = len(basis(n, q))
    m = len(labels)
    L = np.zeros((m, m))
    interps = [TrigInterpolant(iso.vectors[:, j].reshape((ncomp,) + model.shape) / scale) for j in range(m)]
    for a, lx in enumerate(labels):
        cell: UnstableCell = cells[lx]
        x = cell.point
        ls = _log_scale(x, t, n)
        for b in range(m):
            interp = interps[b]

            def evaluate(nodes, interp=interp):
                expo = t * (spec.value(nodes) - x.value)
                keep = expo > -prune
                out = np.zeros((len(nodes), ncomp))
                if keep.any():
                    out[keep] = interp(np.mod(nodes[keep], 1.0)) * np.exp(expo[keep] + ls)[:, None]
                return out

            L[a, b] = integrate_values(cell, evaluate, quad_tol)
    dev = float(np.max(np.abs(L - np.eye(m)))) if m else 0.0
    return ComparisonReport(q, float(t), labels, L, dev, iso)


def comparison_sweep(spec: MorseFunctionSpec, cx: MorseComplex, q: int, t_grid: Sequence[float],
                     cells: dict | None = None, **kwargs) -> tuple:
    """Reports over ``t_grid`` and the deviation ratios dev(t)/dev(2t) where both are sampled."""
    cells = cells if cells is not None else build_cells(cx, spec)
    reports = [comparison_matrix(spec, cx, q, t, cells=cells, **kwargs) for t in sorted(t_grid)]
    by_t = {r.t: r for r in reports}
    ratios = {t: by_t[t].deviation / by_t[2 * t].deviation for t in by_t if 2 * t in by_t
              and by_t[2 * t].deviation > 0}
    return reports, ratios


def comparison_csv(reports: Sequence[ComparisonReport], ratios: dict | None = None) -> str:
    ratios = ratios or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ComparisonReport.COLUMNS)
    for r in sorted(reports, key=lambda r: (r.q, r.t)):
        iso = r.isometry
        ratio = ratios.get((r.q, r.t), ratios.get(r.t, math.nan))
        w.writerow([str(r.q), fmt(r.t), str(len(r.labels)), fmt(r.deviation), fmt(iso.defect_l2),
                    fmt(iso.defect_sup), fmt(iso.isometry_error),
                    fmt(np.max(iso.tail_sup) if len(iso.tail_sup) else 0.0), fmt(ratio),
                    str(int(r.deviation <= 0.25))])
    return buf.getvalue()


def matrix_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x"] + list(report.labels))
    for label, row in zip(report.labels, report.L):
        w.writerow([label] + [fmt(v) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# the small subcomplex


@dataclass(frozen=True)
class ClosureReport:
    t: float
    dims: tuple
    residuals: tuple
    ranks: tuple
    betti: tuple

    @property
    def residual(self) -> float:
        return max(self.residuals) if self.residuals else 0.0


def small_complex_closure_check(spec: MorseFunctionSpec, t: float, model: TorusModel | None = None,
                                tol: float = 1e-8, seed: int = 0, rank_tol: float = 1e-6,
                                extra: int = 4) -> ClosureReport:
    """Apply d(t) to every small eigenform and measure what leaves the small subspace.

    Residuals are |(1 - Q_{q+1}) d(t) w| for unit small eigenforms w.  The
    ranks of d(t) between small subspaces (singular values above
    ``rank_tol``) give the cohomology dimensions of the small complex.
    """
    n = spec.n
    model = model or TorusModel(n, default_resolution(spec, t))
    points = find_critical_points(TorusModel(n, 64), spec)
    counts = index_counts(points, n)
    subs = []
    for q in range(n + 1):
        op, vals, V = small_subspace(spec, model, q, t, counts[q] + extra, tol, seed)
        subs.append((op, V))
    residuals, ranks = [], []
    for q in range(n):
        op, V = subs[q]
        op1, W = subs[q + 1]
        if V.shape[1] == 0:
            residuals.append(0.0)
            ranks.append(0)
            continue
        DV = np.column_stack([op1.to_vec(witten_d(op.to_form(v), spec, t)) for v in V.T])
        proj = W @ (W.T @ DV)
        residuals.append(float(np.max(np.linalg.norm(DV - proj, axis=0))))
        sv = np.linalg.svd(W.T @ DV, compute_uv=False) if W.shape[1] else np.zeros(0)
        ranks.append(int(np.sum(sv > rank_tol)))
    dims = tuple(V.shape[1] for _, V in subs)
    betti = tuple(dims[q] - (ranks[q] if q < n else 0) - (ranks[q - 1] if q > 0 else 0) for q in range(n + 1))
    return ClosureReport(float(t), dims, tuple(residuals), tuple(ranks), betti)


def summary_json(spectra: Sequence[SpectrumReport], comparisons: Sequence[ComparisonReport] = (),
                 ratios: dict | None = None) -> str:
    out = {"spectra": [], "comparisons": []}
    for r in sorted(spectra, key=lambda r: (r.q, r.t)):
        out["spectra"].append({"q": r.q, "t": r.t, "small_count": r.small_count, "expected": r.expected,
                               "max_small": r.max_small, "min_large": r.min_large,
                               "fits": {k: v for k, v in sorted(r.fits.items())},
                               "pass": r.small_count == r.expected})
    for r in sorted(comparisons, key=lambda r: (r.q, r.t)):
        out["comparisons"].append({"q": r.q, "t": r.t, "deviation": r.deviation,
                                   "pass": r.deviation <= 0.25})
    if ratios:
        out["ratios"] = [{"q": q, "t": t, "ratio": v, "pass": 1.4 <= v <= 2.8}
                         for (q, t), v in sorted(ratios.items())]
    return json.dumps(out, indent=2, sort_keys=True, allow_nan=True) + "\n"
