"""Differential forms on a periodic grid over the flat torus.

A q-form is stored as one real grid per increasing multi-index
``I = (i1 < ... < iq)``, in lexicographic order.  Derivatives are taken in
frequency space (exact for band-limited data), products are formed on the
grid, and integrals are uniform grid sums times the cell volume.

Binary layout written by :func:`form_to_bytes` (all little endian)::

    offset  size        field
    0       4           magic b"WHSF"
    4       2  uint16   format version (1)
    6       2  uint16   n
    8       2  uint16   q
    10      4  uint32   grid_res
    14      2  uint16   number of components C(n, q)
    16      C*q uint8   multi-indices, 1-based axis numbers, lexicographic
    ...     C*N^n f64   component grids, component-major, each row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np
import scipy.fft as sfft

from .errors import ResolutionTooCoarse
from .geometry import MorseFunctionSpec, TorusModel

MAGIC = b"WHSF"
FORMAT_VERSION = 1


@lru_cache(maxsize=None)
def basis(n: int, q: int) -> tuple:
    if q < 0 or q > n:
        return ()
    return tuple(combinations(range(n), q))


@lru_cache(maxsize=None)
def _wedge_table(n: int, q: int) -> tuple:
    # entries (target J, axis j, source I, sign) with dx_j ^ dx_I = sign dx_J
    src = {I: a for a, I in enumerate(basis(n, q))}
    table = []
    for b, J in enumerate(basis(n, q + 1)):
        for pos, j in enumerate(J):
            I = J[:pos] + J[pos + 1:]
            table.append((b, j, src[I], (-1) ** pos))
    return tuple(table)


@lru_cache(maxsize=None)
def _contraction_table(n: int, q: int) -> tuple:
    # entries (target J, axis j, source I, sign) with iota_{e_j} dx_I -> sign dx_J
    tgt = {J: b for b, J in enumerate(basis(n, q - 1))}
    table = []
    for a, I in enumerate(basis(n, q)):
        for pos, j in enumerate(I):
            J = I[:pos] + I[pos + 1:]
            table.append((tgt[J], j, a, (-1) ** pos))
    return tuple(table)


def _perm_sign(seq) -> int:
    seq = list(seq)
    sign = 1
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


@lru_cache(maxsize=None)
def star_table(n: int, q: int) -> tuple:
    """(target index, sign) for each source multi-index of degree q."""
    tgt = {J: b for b, J in enumerate(basis(n, n - q))}
    out = []
    for I in basis(n, q):
        comp = tuple(i for i in range(n) if i not in I)
        out.append((tgt[comp], _perm_sign(I + comp)))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class GridForm:
    degree: int
    components: np.ndarray

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=float)
        object.__setattr__(self, "components", comps)
        n = comps.ndim - 1
        expected = len(basis(n, self.degree))
        if comps.shape[0] != expected:
            raise ValueError(f"a {self.degree}-form on T^{n} needs {expected} components, got {comps.shape[0]}")
        if len(set(comps.shape[1:])) > 1:
            raise ValueError("component grids must share one resolution")

    @property
    def n(self) -> int:
        return self.components.ndim - 1

    @property
    def grid_res(self) -> int:
        return self.components.shape[1]

    @property
    def shape(self) -> tuple:
        return self.components.shape[1:]

    @property
    def model(self) -> TorusModel:
        return TorusModel(self.n, self.grid_res)

    def __add__(self, other: "GridForm") -> "GridForm":
        _same_degree(self, other)
        return GridForm(self.degree, self.components + other.components)

    def __sub__(self, other: "GridForm") -> "GridForm":
        _same_degree(self, other)
        return GridForm(self.degree, self.components - other.components)

    def __mul__(self, c: float) -> "GridForm":
        return GridForm(self.degree, self.components * c)

    __rmul__ = __mul__

    def __neg__(self) -> "GridForm":
        return GridForm(self.degree, -self.components)

    def copy(self) -> "GridForm":
        return GridForm(self.degree, self.components.copy())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.components))) if self.components.size else 0.0


def _same_degree(a: GridForm, b: GridForm):
    if a.degree != b.degree or a.components.shape != b.components.shape:
        raise ValueError("forms must share degree and resolution")


def zero_form(model: TorusModel, q: int) -> GridForm:
    return GridForm(q, np.zeros((len(basis(model.n, q)),) + model.shape))


def function(values: np.ndarray) -> GridForm:
    return GridForm(0, np.asarray(values, dtype=float)[None])


@dataclass(frozen=True, eq=False)
class VectorFieldGrid:
    components: np.ndarray

    @property
    def n(self) -> int:
        return self.components.shape[0]

    def flat(self) -> GridForm:
        """X^flat; the flat metric makes the components identical."""
        return GridForm(1, self.components)


# ---------------------------------------------------------------------------
# spectral differentiation


@lru_cache(maxsize=None)
def _ik(N: int) -> np.ndarray:
    k = np.arange(N // 2 + 1, dtype=float)
    if N % 2 == 0:
        k[-1] = 0.0  # Nyquist mode carries no odd derivative
    return 2j * math.pi * k


def partial(u: np.ndarray, axis: int) -> np.ndarray:
    """Pseudo-spectral derivative of a periodic grid array along ``axis``."""
    N = u.shape[axis]
    shape = [1] * u.ndim
    shape[axis] = N // 2 + 1
    spec = sfft.rfft(u, axis=axis)
    spec *= _ik(N).reshape(shape)
    return sfft.irfft(spec, n=N, axis=axis)


def _pad_spectrum(u: np.ndarray, M: int) -> np.ndarray:
    N = u.shape[0]
    U = np.fft.fftshift(np.fft.fftn(u))
    if N % 2 == 0:
        U[(slice(0, 1),) + (slice(None),) * (u.ndim - 1)] = 0
        for ax in range(1, u.ndim):
            idx = [slice(None)] * u.ndim
            idx[ax] = slice(0, 1)
            U[tuple(idx)] = 0
    lo = (M - N) // 2
    P = np.zeros((M,) * u.ndim, dtype=complex)
    P[tuple(slice(lo, lo + N) for _ in range(u.ndim))] = U
    return np.real(np.fft.ifftn(np.fft.ifftshift(P))) * (M / N) ** u.ndim


def _truncate_spectrum(v: np.ndarray, N: int) -> np.ndarray:
    M = v.shape[0]
    V = np.fft.fftshift(np.fft.fftn(v))
    lo = (M - N) // 2
    U = V[tuple(slice(lo, lo + N) for _ in range(v.ndim))]
    return np.real(np.fft.ifftn(np.fft.ifftshift(U))) * (N / M) ** v.ndim


def grid_product(a: np.ndarray, b: np.ndarray, dealias: bool = False) -> np.ndarray:
    """Pointwise product; with ``dealias`` the product is formed on a 3/2 padded grid."""
    if not dealias:
        return a * b
    N = a.shape[0]
    M = 3 * N // 2
    return _truncate_spectrum(_pad_spectrum(a, M) * _pad_spectrum(b, M), N)


# ---------------------------------------------------------------------------
# exterior algebra


def d(form: GridForm) -> GridForm:
    n, q = form.n, form.degree
    out = np.zeros((len(basis(n, q + 1)),) + form.shape)
    if q >= n:
        return GridForm(q + 1, out)
    derivs = {}
    for b, j, a, sign in _wedge_table(n, q):
        key = (a, j)
        if key not in derivs:
            derivs[key] = partial(form.components[a], j)
        out[b] += sign * derivs[key]
    return GridForm(q + 1, out)


def exterior_mult(alpha: GridForm, form: GridForm, dealias: bool = False) -> GridForm:
    """alpha ^ form for a 1-form alpha."""
    if alpha.degree != 1:
        raise ValueError("exterior_mult expects a 1-form multiplier")
    n, q = form.n, form.degree
    out = np.zeros((len(basis(n, q + 1)),) + form.shape)
    for b, j, a, sign in _wedge_table(n, q):
        out[b] += sign * grid_product(alpha.components[j], form.components[a], dealias)
    return GridForm(q + 1, out)


def contraction(X: VectorFieldGrid, form: GridForm, dealias: bool = False) -> GridForm:
    n, q = form.n, form.degree
    out = np.zeros((len(basis(n, q - 1)),) + form.shape)
    if q == 0:
        return GridForm(-1, out)
    for b, j, a, sign in _contraction_table(n, q):
        out[b] += sign * grid_product(X.components[j], form.components[a], dealias)
    return GridForm(q - 1, out)


def contraction_sharp(X: VectorFieldGrid, form: GridForm, path: str = "flat") -> GridForm:
    """Formal adjoint of iota_X, mapping (q-1)-forms to q-forms.

    ``path="flat"`` is exterior multiplication by X^flat; ``path="star"``
    conjugates iota_X by the Hodge star.
    """
    if path == "flat":
        return exterior_mult(X.flat(), form)
    if path != "star":
        raise ValueError(f"unknown path {path!r}")
    n, q = form.n, form.degree + 1
    sign = (-1) ** (n * q - 1)
    return sign * hodge_star(contraction(X, hodge_star(form)))


def hodge_star(form: GridForm) -> GridForm:
    n, q = form.n, form.degree
    if q < 0 or q > n:
        return GridForm(n - q, np.zeros((0,) + form.shape))
    out = np.empty((len(basis(n, n - q)),) + form.shape)
    for a, (b, sign) in enumerate(star_table(n, q)):
        out[b] = sign * form.components[a]
    return GridForm(n - q, out)


def codifferential(form: GridForm) -> GridForm:
    """delta = (-1)^{n(p-1)+1} * star d star on p-forms."""
    n, p = form.n, form.degree
    if p <= 0:
        return GridForm(p - 1, np.zeros((0,) + form.shape))
    sign = (-1) ** (n * (p - 1) + 1)
    return sign * hodge_star(d(hodge_star(form)))


def lie_derivative(X: VectorFieldGrid, form: GridForm) -> GridForm:
    n, q = form.n, form.degree
    out = contraction(X, d(form)) if q < n else zero_form(form.model, q)
    if q > 0:
        out = out + d(contraction(X, form))
    return out


def lie_sharp(X: VectorFieldGrid, form: GridForm, path: str = "star") -> GridForm:
    """Formal adjoint of the Lie derivative.

    ``path="star"`` conjugates by the Hodge star, ``path="flat"`` uses
    ``E_{X^flat} delta + delta E_{X^flat}``.
    """
    n, q = form.n, form.degree
    if path == "star":
        sign = (-1) ** ((n + 1) * q + 1)
        return sign * hodge_star(lie_derivative(X, hodge_star(form)))
    if path != "flat":
        raise ValueError(f"unknown path {path!r}")
    Xb = X.flat()
    out = zero_form(form.model, q)
    if q > 0:
        out = out + exterior_mult(Xb, codifferential(form))
    if q < n:
        out = out + codifferential(exterior_mult(Xb, form))
    return out


def fiber_product(a: GridForm, b: GridForm) -> GridForm:
    _same_degree(a, b)
    return function(np.sum(a.components * b.components, axis=0))


def inner_product(a: GridForm, b: GridForm) -> float:
    _same_degree(a, b)
    return float(np.sum(a.components * b.components)) * a.model.cell_volume


def norm(a: GridForm) -> float:
    return math.sqrt(max(inner_product(a, a), 0.0))


# ---------------------------------------------------------------------------
# Morse-function data on the grid


@lru_cache(maxsize=32)
def _grid_data(spec: MorseFunctionSpec, n: int, N: int):
    pts = TorusModel(n, N).points()
    h = spec.value(pts)
    g = np.moveaxis(spec.grad(pts), -1, 0)
    H = np.moveaxis(spec.hessian(pts), (-2, -1), (0, 1))
    for arr in (h, g, H):
        arr.setflags(write=False)
    return h, g, H


def h_grid(spec: MorseFunctionSpec, model: TorusModel) -> np.ndarray:
    return _grid_data(spec, model.n, model.grid_res)[0]


def dh(spec: MorseFunctionSpec, model: TorusModel) -> GridForm:
    return GridForm(1, _grid_data(spec, model.n, model.grid_res)[1])


def gradient_field(spec: MorseFunctionSpec, model: TorusModel, sign: float = 1.0) -> VectorFieldGrid:
    return VectorFieldGrid(sign * _grid_data(spec, model.n, model.grid_res)[1])


def max_hessian_eigenvalue(spec: MorseFunctionSpec, model: TorusModel) -> float:
    H = _grid_data(spec, model.n, model.grid_res)[2]
    mats = np.moveaxis(H, (0, 1), (-2, -1)).reshape(-1, model.n, model.n)
    return float(np.max(np.abs(np.linalg.eigvalsh(mats))))


def gaussian_width(spec: MorseFunctionSpec, model: TorusModel, t: float) -> float:
    if t <= 0:
        return math.inf
    return (t * max_hessian_eigenvalue(spec, model)) ** -0.5


def check_resolution(spec: MorseFunctionSpec, model: TorusModel, t: float, spacings: float = 4.0):
    width = gaussian_width(spec, model, t)
    if width < spacings * model.spacing:
        raise ResolutionTooCoarse(
            f"Gaussian width {width:.4g} at t={t} is below {spacings:g} grid spacings "
            f"({spacings * model.spacing:.4g}) for grid_res={model.grid_res}")


def min_resolution(spec: MorseFunctionSpec, n: int, t: float, spacings: float = 4.0) -> int:
    """Smallest admissible power-of-two grid for a Witten Laplacian at parameter t."""
    N = 8
    while True:
        try:
            check_resolution(spec, TorusModel(n, N), t, spacings)
            return N
        except ResolutionTooCoarse:
            N *= 2


# ---------------------------------------------------------------------------
# Witten deformation


def witten_d(form: GridForm, spec: MorseFunctionSpec, t: float, dealias: bool = False) -> GridForm:
    out = d(form)
    if t == 0 or form.degree >= form.n:
        return out
    return out + t * exterior_mult(dh(spec, form.model), form, dealias)


def witten_delta(form: GridForm, spec: MorseFunctionSpec, t: float, path: str = "contraction",
                 dealias: bool = False) -> GridForm:
    """delta(t) = delta + t iota_{grad h}; ``path="star"`` uses the star-conjugated d(t)."""
    n, p = form.n, form.degree
    if p <= 0:
        return GridForm(p - 1, np.zeros((0,) + form.shape))
    if path == "star":
        # star-conjugating d(t) = e^{-th} d e^{th} yields e^{-th} delta e^{th};
        # the adjoint of d(t) therefore needs the conjugated d(-t)
        sign = (-1) ** (n * (p - 1) + 1)
        return sign * hodge_star(witten_d(hodge_star(form), spec, -t, dealias))
    if path != "contraction":
        raise ValueError(f"unknown path {path!r}")
    out = codifferential(form)
    if t == 0:
        return out
    return out + t * contraction(gradient_field(spec, form.model), form, dealias)


def flat_laplacian(form: GridForm) -> GridForm:
    """-sum_j d^2/dx_j^2 applied componentwise (Hodge Laplacian of the flat metric).

    The symbol is |k|^2 on every mode, Nyquist included; composing two first
    derivatives would give the Nyquist modes a spurious zero eigenvalue.
    """
    axes = tuple(range(1, form.n + 1))
    K2 = squared_wavenumbers(form.n, form.grid_res)
    return GridForm(form.degree, np.real(sfft.ifftn(K2 * sfft.fftn(form.components, axes=axes), axes=axes)))


@lru_cache(maxsize=16)
def squared_wavenumbers(n: int, N: int, real: bool = False) -> np.ndarray:
    """|k|^2 on the FFT grid; ``real`` gives the half spectrum of the last axis."""
    k2 = (np.fft.fftfreq(N, 1.0 / N) * 2 * math.pi) ** 2
    axes = [k2] * n
    if real:
        axes[-1] = k2[:N // 2 + 1]
    return sum(np.meshgrid(*axes, indexing="ij"))


@lru_cache(maxsize=None)
def _number_table(n: int, q: int) -> tuple:
    # entries (target, source, i, j) of sum_ij H_ij dx_i ^ iota_j on q-forms with their sign
    idx = {I: a for a, I in enumerate(basis(n, q))}
    table = []
    for a, I in enumerate(basis(n, q)):
        for pos, j in enumerate(I):
            rest = I[:pos] + I[pos + 1:]
            for i in range(n):
                if i in rest:
                    continue
                J = tuple(sorted(rest + (i,)))
                s_in = sum(1 for r in rest if r < i)
                table.append((idx[J], a, i, j, (-1) ** pos * (-1) ** s_in))
    return tuple(table)


def zeroth_order_term(form: GridForm, spec: MorseFunctionSpec, dealias: bool = False) -> GridForm:
    """Pointwise operator sum_ij H_ij (2 dx_i ^ iota_j) - tr(H), from the analytic Hessian.

    This is the coefficient of t in the Witten Laplacian (the symmetrised
    Lie derivative along grad h), acting without derivatives.
    """
    H = _grid_data(spec, form.n, form.grid_res)[2]
    trace = sum(H[i, i] for i in range(form.n))
    out = -grid_product_stack(trace, form.components, dealias)
    for b, a, i, j, sign in _number_table(form.n, form.degree):
        out[b] += 2 * sign * grid_product(H[i, j], form.components[a], dealias)
    return GridForm(form.degree, out)


def grid_product_stack(f: np.ndarray, comps: np.ndarray, dealias: bool) -> np.ndarray:
    if not dealias:
        return f[None] * comps
    return np.stack([grid_product(f, c, True) for c in comps]) if len(comps) else comps.copy()


def witten_laplacian_apply(form: GridForm, spec: MorseFunctionSpec, t: float,
                           path: str = "composition", dealias: bool = False,
                           check: bool = False) -> GridForm:
    """Delta_q(t) applied to a q-form.

    ``composition``: delta(t) d(t) + d(t) delta(t).
    ``decomposition``: Delta_q + t Z + t^2 |grad h|^2 with Z the pointwise
    Hessian term of :func:`zeroth_order_term`.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if check:
        check_resolution(spec, form.model, t)
    n, q = form.n, form.degree
    if path == "composition":
        out = zero_form(form.model, q)
        if q < n:
            out = out + witten_delta(witten_d(form, spec, t, dealias), spec, t, dealias=dealias)
        if q > 0:
            out = out + witten_d(witten_delta(form, spec, t, dealias=dealias), spec, t, dealias)
        return out
    if path != "decomposition":
        raise ValueError(f"unknown path {path!r}")
    out = flat_laplacian(form)
    if t == 0:
        return out
    g = _grid_data(spec, n, form.grid_res)[1]
    g2 = np.sum(g * g, axis=0)
    out = out + t * zeroth_order_term(form, spec, dealias)
    return out + GridForm(q, (t * t) * grid_product_stack(g2, form.components, dealias))


# ---------------------------------------------------------------------------
# construction helpers


def random_form(model: TorusModel, q: int, band: int, rng: np.random.Generator) -> GridForm:
    """Random real q-form whose components are trig polynomials with |k_i| <= band."""
    if 2 * band >= model.grid_res // 2:
        raise ValueError("band too wide for the grid to keep products resolved")
    N = model.grid_res
    comps = []
    for _ in basis(model.n, q):
        spec = np.zeros(model.shape, dtype=complex)
        sl = tuple(np.r_[0:band + 1, N - band:N] for _ in range(model.n))
        sub = np.ix_(*sl)
        size = (2 * band + 1,) * model.n
        spec[sub] = rng.standard_normal(size) + 1j * rng.standard_normal(size)
        comps.append(np.real(np.fft.ifftn(spec)) * N ** model.n / (2 * band + 1) ** (model.n / 2))
    return GridForm(q, np.array(comps).reshape((len(comps),) + model.shape))


def bump(model: TorusModel, center, power: int = 4) -> GridForm:
    """Band-limited bump prod_j ((1 + cos 2pi(x_j - c_j)) / 2)^power."""
    pts = model.points()
    vals = np.ones(model.shape)
    for j in range(model.n):
        vals *= ((1 + np.cos(2 * math.pi * (pts[..., j] - center[j]))) / 2) ** power
    return function(vals)


def multiply_function(f: GridForm, form: GridForm, dealias: bool = False) -> GridForm:
    return GridForm(form.degree, grid_product_stack(f.components[0], form.components, dealias))


# ---------------------------------------------------------------------------
# serialization


def form_to_bytes(form: GridForm) -> bytes:
    n, q, N = form.n, form.degree, form.grid_res
    idx = basis(n, q)
    header = MAGIC + struct.pack("<HHHIH", FORMAT_VERSION, n, q, N, len(idx))
    header += bytes(i + 1 for I in idx for i in I)
    return header + np.ascontiguousarray(form.components, dtype="<f8").tobytes()


def form_from_bytes(data: bytes) -> GridForm:
    if data[:4] != MAGIC:
        raise ValueError("not a grid-form file")
    version, n, q, N, C = struct.unpack("<HHHIH", data[4:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    if C != len(basis(n, q)):
        raise ValueError("component count does not match (n, q)")
    off = 16 + C * q
    stored = tuple(tuple(b - 1 for b in data[16 + a * q:16 + (a + 1) * q]) for a in range(C))
    if stored != basis(n, q):
        raise ValueError("fiber order is not lexicographic")
    arr = np.frombuffer(data[off:], dtype="<f8").reshape((C,) + (N,) * n)
    return GridForm(q, arr.astype(float))


def save_form(path, form: GridForm):
    with open(path, "wb") as fh:
        fh.write(form_to_bytes(form))


def load_form(path) -> GridForm:
    with open(path, "rb") as fh:
        return form_from_bytes(fh.read())
