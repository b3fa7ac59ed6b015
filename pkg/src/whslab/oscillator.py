"""Harmonic-oscillator model of the Witten Laplacian near a critical point.

Near an index-k critical point with h = -1/2 (x_1^2 + ... + x_k^2)
+ 1/2 (x_{k+1}^2 + ... + x_n^2) and the Euclidean metric, the deformed
Laplacian on q-forms is

    Delta_{q,k}(t) = -sum_j d^2/dx_j^2 + t M_{q,k} + t^2 |x|^2,

acting componentwise, with M_{q,k} diagonal in the basis dx_I with entries
``epsilon_coeff(I, q, k, n)``.  Everything here is closed form, apart from a
dense Fourier discretization on a box used as an independent cross-check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

from .errors import TruncationWarning

# cross-check agreement below which no TruncationWarning is raised
BOX_REL_TOL = 1e-3


def epsilon_coeff(I, q: int, k: int, n: int) -> int:
    """-n + 2k - 2q + 4 #{j : k + 1 <= i_j <= n} for a 1-based multi-index I."""
    I = tuple(int(i) for i in I)
    if len(I) != q:
        raise ValueError(f"multi-index {I} does not have length q={q}")
    if any(i < 1 or i > n for i in I) or list(I) != sorted(set(I)):
        raise ValueError(f"multi-index {I} must be strictly increasing within 1..{n}")
    if not 0 <= k <= n:
        raise ValueError("index k must satisfy 0 <= k <= n")
    return -n + 2 * k - 2 * q + 4 * sum(1 for i in I if k + 1 <= i <= n)


def multi_indices(n: int, q: int) -> list:
    """1-based increasing multi-indices of length q, lexicographic."""
    return [tuple(i + 1 for i in I) for I in combinations(range(n), q)]


@dataclass(frozen=True)
class ModelOperator:
    n: int
    k: int
    q: int
    t: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= self.k <= self.n or not 0 <= self.q <= self.n:
            raise ValueError("need 0 <= k <= n and 0 <= q <= n")
        if self.t <= 0:
            raise ValueError("t must be positive")

    def epsilons(self) -> list:
        return [epsilon_coeff(I, self.q, self.k, self.n) for I in multi_indices(self.n, self.q)]


def _closed_form(op: ModelOperator, count: int) -> np.ndarray:
    # levels t (n + 2|m| + eps_I); |m| up to count is always enough
    n, t = op.n, op.t
    vals = []
    for eps in op.epsilons():
        for L in range(count + 1):
            mult = math.comb(L + n - 1, n - 1)
            vals.extend([t * (n + 2 * L + eps)] * mult)
    return np.sort(np.array(vals))[:count]


@lru_cache(maxsize=32)
def _fourier_second_derivative(M: int, length: float) -> np.ndarray:
    """Dense -d^2/dx^2 for the periodic Fourier basis on M points over ``length``."""
    k = np.fft.fftfreq(M, d=length / M) * 2 * math.pi
    F = np.fft.fft(np.eye(M), axis=0)
    D = np.real(np.fft.ifft((k ** 2)[:, None] * F, axis=0))
    return 0.5 * (D + D.T)


def box_half_width(t: float, eta: float = 0.0) -> float:
    return 8.0 / math.sqrt(t) + eta


def box_operator(op: ModelOperator, points: int = 48, eta: float = 0.0) -> tuple:
    """Dense scalar oscillator -Lap + t^2 |x|^2 on the box [-L, L]^n, L = 8/sqrt(t) + eta.

    Returns ``(A, x, weight)`` with the grid axis ``x`` and the cell volume
    ``weight``; the q-form operator is ``A + t eps_I`` on each component.
    """
    n, t = op.n, op.t
    L = box_half_width(t, eta)
    x = -L + 2 * L * np.arange(points) / points
    D1 = _fourier_second_derivative(points, 2 * L)
    I1 = np.eye(points)
    A = np.zeros((points ** n, points ** n))
    for j in range(n):
        term = np.ones((1, 1))
        for i in range(n):
            term = np.kron(term, D1 if i == j else I1)
        A += term
    grids = np.meshgrid(*([x] * n), indexing="ij")
    r2 = sum(g ** 2 for g in grids).reshape(-1)
    A[np.diag_indices_from(A)] += t * t * r2
    return A, x, (2 * L / points) ** n


def model_spectrum(op: ModelOperator, count: int, cross_check: bool = True, points: int | None = None,
                   eta: float = 0.0) -> np.ndarray:
    """Lowest ``count`` eigenvalues of the model operator (closed form).

    With ``cross_check`` the box discretization is diagonalized as well and
    a :class:`TruncationWarning` is raised when the two disagree beyond
    ``BOX_REL_TOL`` relative to the level spacing 2t.
    """
    if count < 1:
        raise ValueError("count must be positive")
    exact = _closed_form(op, count)
    if cross_check:
        box = box_spectrum(op, count, points, eta)
        dev = float(np.max(np.abs(box - exact))) / (2 * op.t)
        if dev > BOX_REL_TOL:
            warnings.warn(f"box discretization deviates from the closed form by {dev:.2e} "
                          f"(in units of 2t) for n={op.n}, k={op.k}, q={op.q}, t={op.t}",
                          TruncationWarning)
    return exact


def box_spectrum(op: ModelOperator, count: int, points: int | None = None, eta: float = 0.0) -> np.ndarray:
    if points is None:
        points = 64 if op.n == 1 else 40
    A, _, _ = box_operator(op, points, eta)
    base = np.linalg.eigvalsh(A)[:count]
    vals = np.concatenate([base + op.t * e for e in op.epsilons()])
    return np.sort(vals)[:count]


def kernel_dimension(op: ModelOperator, tol: float = 1e-9) -> int:
    """Number of closed-form eigenvalues equal to zero."""
    count = len(op.epsilons()) + 1
    return int(np.sum(np.abs(_closed_form(op, count)) <= tol * op.t))


def on_lattice(values, t: float) -> np.ndarray:
    """Relative distance of each value to the nearest point of 2t Z_{>=0}, in units of 2t."""
    v = np.asarray(values, dtype=float) / (2 * t)
    return np.abs(v - np.maximum(np.round(v), 0))


# ---------------------------------------------------------------------------
# Gaussian ground state and its cutoff


def ground_prefactor(n: int, t: float) -> float:
    # (t/pi)^{n/4} makes the L2 norm exactly one; (t/pi)^{n/2} would not
    return (t / math.pi) ** (n / 4)


@dataclass(frozen=True)
class GroundState:
    """(t/pi)^{n/4} exp(-t |x|^2 / 2) dx_1 ^ ... ^ dx_q, the unit kernel generator of Delta_{q,q}(t)."""

    n: int
    q: int
    t: float

    @property
    def index(self) -> tuple:
        return tuple(range(1, self.q + 1))

    def coefficient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1) if self.n > 1 or x.ndim > 1 else x * x
        return ground_prefactor(self.n, self.t) * np.exp(-0.5 * self.t * r2)


def ground_state(n: int, q: int, t: float) -> GroundState:
    if not 0 <= q <= n or t <= 0:
        raise ValueError("need 0 <= q <= n and t > 0")
    return GroundState(n, q, t)


def smoothstep_profile(u, eta: float) -> np.ndarray:
    """gamma_eta: 1 on [0, eta/2], 0 beyond eta, quintic C^2 bridge in between."""
    s = np.clip((np.asarray(u, dtype=float) - 0.5 * eta) / (0.5 * eta), 0.0, 1.0)
    return 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def smoothstep_derivatives(u, eta: float) -> tuple:
    """First and second derivatives of :func:`smoothstep_profile` in u."""
    u = np.asarray(u, dtype=float)
    s = (u - 0.5 * eta) / (0.5 * eta)
    inside = (s > 0) & (s < 1)
    s = np.clip(s, 0.0, 1.0)
    c = 2.0 / eta
    d1 = np.where(inside, -30.0 * s ** 2 * (1 - s) ** 2 * c, 0.0)
    d2 = np.where(inside, -60.0 * s * (1 - s) * (1 - 2 * s) * c * c, 0.0)
    return d1, d2


def _sphere_area(n: int) -> float:
    return 2 * math.pi ** (n / 2) / math.gamma(n / 2)


def _radial_rule(eta: float, t: float, panels: int = 8, order: int = 24) -> tuple:
    # GL panels on [0, eta], graded so the Gaussian core is resolved at large t
    edges = np.unique(np.concatenate([np.linspace(0, eta, panels + 1),
                                      np.minimum(eta, np.arange(0, 9) / math.sqrt(max(t, 1e-12)))]))
    g, w = np.polynomial.legendre.leggauss(order)
    r = np.concatenate([a + (b - a) * (g + 1) / 2 for a, b in zip(edges[:-1], edges[1:])])
    wr = np.concatenate([(b - a) * w / 2 for a, b in zip(edges[:-1], edges[1:])])
    return r, wr


def beta(n: int, q: int, t: float, eta: float) -> float:
    """(t/pi)^{n/4} (int gamma_eta(|x|)^2 exp(-t |x|^2) dx)^{1/2} by radial quadrature."""
    if t <= 0 or eta <= 0:
        raise ValueError("t and eta must be positive")
    r, w = _radial_rule(eta, t)
    integrand = smoothstep_profile(r, eta) ** 2 * np.exp(-t * r * r) * r ** (n - 1)
    return ground_prefactor(n, t) * math.sqrt(_sphere_area(n) * float(np.sum(w * integrand)))


@dataclass(frozen=True)
class CutoffGaussian:
    """beta^{-1} gamma_eta(|x|) times the ground state; unit norm, support in |x| <= eta."""

    n: int
    q: int
    t: float
    eta: float
    beta: float

    @property
    def index(self) -> tuple:
        return tuple(range(1, self.q + 1))

    def radial(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return smoothstep_profile(r, self.eta) * ground_prefactor(self.n, self.t) \
            * np.exp(-0.5 * self.t * r * r) / self.beta

    def coefficient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1)) if x.ndim > 1 or self.n > 1 else np.abs(x)
        return self.radial(r)

    def norm_squared(self) -> float:
        r, w = _radial_rule(self.eta, self.t)
        return _sphere_area(self.n) * float(np.sum(w * self.radial(r) ** 2 * r ** (self.n - 1)))

    def residual(self, r) -> np.ndarray:
        """Delta_{q,q}(t) applied to the state, as a radial profile.

        The Gaussian is annihilated, so only derivatives of the cutoff survive:
        g (2 t r gamma' - gamma'' - (n - 1) gamma' / r) / beta.
        """
        r = np.asarray(r, dtype=float)
        d1, d2 = smoothstep_derivatives(r, self.eta)
        g = ground_prefactor(self.n, self.t) * np.exp(-0.5 * self.t * r * r) / self.beta
        with np.errstate(divide="ignore", invalid="ignore"):
            curv = np.where(r > 0, (self.n - 1) * d1 / np.where(r > 0, r, 1.0), 0.0)
        return g * (2 * self.t * r * d1 - d2 - curv)

    def sup_residual(self, samples: int = 4001) -> float:
        r = np.linspace(0.5 * self.eta, self.eta, samples)
        return float(np.max(np.abs(self.residual(r))))

    def energy(self, k: int) -> float:
        """<Delta_{q,k}(t) w, w> by radial quadrature of the quadratic form."""
        r, w = _radial_rule(self.eta, self.t)
        d1, _ = smoothstep_derivatives(r, self.eta)
        gam = smoothstep_profile(r, self.eta)
        g = ground_prefactor(self.n, self.t) * np.exp(-0.5 * self.t * r * r) / self.beta
        u = gam * g
        du = d1 * g - self.t * r * u
        eps = epsilon_coeff(self.index, self.q, k, self.n)
        dens = du * du + (self.t ** 2 * r * r + self.t * eps) * u * u
        return _sphere_area(self.n) * float(np.sum(w * dens * r ** (self.n - 1)))


def cutoff_state(n: int, q: int, t: float, eta: float) -> CutoffGaussian:
    if not 0 <= q <= n:
        raise ValueError("need 0 <= q <= n")
    return CutoffGaussian(n, q, t, eta, beta(n, q, t, eta))


# ---------------------------------------------------------------------------
# desk-scale checks of the cutoff estimates


def residual_sweep(n: int, q: int, eta: float, t_grid) -> dict:
    """Sup residual of Delta_{q,q}(t) on the cutoff state and a log-linear fit."""
    t_grid = np.asarray(t_grid, dtype=float)
    res = np.array([cutoff_state(n, q, t, eta).sup_residual() for t in t_grid])
    slope, intercept = np.polyfit(t_grid, np.log(res), 1)
    corr = float(np.corrcoef(t_grid, np.log(res))[0, 1])
    return {"t": t_grid, "residual": res, "slope": float(slope), "intercept": float(intercept),
            "correlation": corr}


def coercivity_constant(n: int, q: int, t: float, eta: float, points: int | None = None) -> float:
    """min Rayleigh quotient of the box-discretized Delta_{q,q}(t) on the complement of the cutoff state, over t."""
    op = ModelOperator(n, q, q, t)
    if points is None:
        points = 64 if n == 1 else 32
    A, x, _ = box_operator(op, points, eta)
    state = cutoff_state(n, q, t, eta)
    grids = np.meshgrid(*([x] * n), indexing="ij")
    w = state.coefficient(np.stack(grids, axis=-1).reshape(-1, n)).reshape(-1)
    w /= np.linalg.norm(w)
    best = math.inf
    for eps in op.epsilons():
        B = A + t * eps * np.eye(len(A))
        if eps == -n:
            # restrict to the orthogonal complement of the cutoff state
            Q, _ = np.linalg.qr(np.column_stack([w, np.eye(len(A))[:, :len(A) - 1]]))
            P = Q[:, 1:]
            B = P.T @ B @ P
        best = min(best, float(np.linalg.eigvalsh(B)[0]))
    return best / t


def coercivity_sweep(n: int, q: int, eta: float, t_grid, points: int | None = None) -> dict:
    t_grid = np.asarray(t_grid, dtype=float)
    lam = np.array([coercivity_constant(n, q, t, eta, points) * t for t in t_grid])
    slope, intercept = np.polyfit(t_grid, lam, 1)
    return {"t": t_grid, "rayleigh_min": lam, "constant": float(np.min(lam / t_grid)),
            "slope": float(slope), "intercept": float(intercept)}


def spectrum_rows(n: int, t_grid, count: int) -> list:
    """Rows (n, k, q, t, level, eigenvalue, lattice_deviation) for CSV export."""
    rows = []
    for t in t_grid:
        for k in range(n + 1):
            for q in range(n + 1):
                op = ModelOperator(n, k, q, float(t))
                vals = model_spectrum(op, count, cross_check=False)
                box = box_spectrum(op, count)
                dev = on_lattice(box, op.t)
                rows.extend((n, k, q, float(t), i, float(v), float(b), float(e))
                            for i, (v, b, e) in enumerate(zip(vals, box, dev)))
    return rows


__all__ = [
    "BOX_REL_TOL", "CutoffGaussian", "GroundState", "ModelOperator", "beta", "box_half_width",
    "box_operator", "box_spectrum", "coercivity_constant", "coercivity_sweep", "cutoff_state",
    "epsilon_coeff", "ground_prefactor", "ground_state", "kernel_dimension", "model_spectrum",
    "multi_indices", "on_lattice", "residual_sweep", "smoothstep_derivatives", "smoothstep_profile",
    "spectrum_rows",
]
