import math

import numpy as np
import pytest

from whslab import forms as F
from whslab.errors import ResolutionTooCoarse
from whslab.geometry import MorseFunctionSpec, TorusModel, cosine_t1, product_cosine_t2

M1, M2 = TorusModel(1, 32), TorusModel(2, 32)
SPEC2 = MorseFunctionSpec((((1, 0), 1.0, 0.0), ((0, 1), 0.8, 0.4), ((1, 1), 0.2, 0.1)))


def coords(model):
    return np.moveaxis(model.points(), -1, 0)


def one_form(model, *comps):
    return F.GridForm(1, np.array(comps))


def rng():
    return np.random.default_rng(1)


def test_d_of_sine():
    x, y = coords(M2)
    df = F.d(F.function(np.sin(2 * np.pi * x)))
    np.testing.assert_allclose(df.components[0], 2 * np.pi * np.cos(2 * np.pi * x), atol=1e-12)
    np.testing.assert_allclose(df.components[1], 0, atol=1e-12)


def test_d_constant_and_top_degree():
    assert F.d(F.function(np.full(M2.shape, 3.0))).max_abs() < 1e-14
    top = F.random_form(M2, 2, 3, rng())
    out = F.d(top)
    assert out.degree == 3 and out.components.shape[0] == 0


def test_star_examples():
    one = np.ones(M2.shape)
    dx, dy = one_form(M2, one, 0 * one), one_form(M2, 0 * one, one)
    np.testing.assert_array_equal(F.hodge_star(dx).components, dy.components)
    np.testing.assert_array_equal(F.hodge_star(dy).components, -dx.components)
    np.testing.assert_array_equal(F.hodge_star(F.function(one)).components, one[None])
    np.testing.assert_array_equal(F.hodge_star(F.GridForm(2, one[None])).components, one[None])


@pytest.mark.parametrize("n", [1, 2, 3])
def test_star_star_sign_law(n):
    model = TorusModel(n, 16)
    for q in range(n + 1):
        w = F.random_form(model, q, 2, rng())
        sign = (-1) ** (q * (n - q))
        assert np.array_equal(F.hodge_star(F.hodge_star(w)).components, sign * w.components)


def test_codifferential_of_cosine():
    x = coords(M1)[0]
    g = F.GridForm(1, (2 * np.pi * np.cos(2 * np.pi * x))[None])
    np.testing.assert_allclose(F.codifferential(g).components[0], 4 * np.pi ** 2 * np.sin(2 * np.pi * x), atol=1e-10)


def test_adjointness_and_nilpotency():
    r = rng()
    for q in range(2):
        for _ in range(10):
            w, eta = F.random_form(M2, q, 3, r), F.random_form(M2, q + 1, 3, r)
            lhs, rhs = F.inner_product(F.d(w), eta), F.inner_product(w, F.codifferential(eta))
            assert abs(lhs - rhs) < 1e-10 * F.norm(F.d(w)) * F.norm(eta)
    f = F.random_form(M2, 0, 3, r)
    assert F.d(F.d(f)).max_abs() < 1e-9 * f.max_abs()
    w = F.random_form(M2, 2, 3, r)
    assert F.codifferential(F.codifferential(w)).max_abs() < 1e-9 * w.max_abs()


def test_contraction_examples_and_adjoint():
    one = np.ones(M2.shape)
    vol = F.GridForm(2, one[None])
    ex = F.VectorFieldGrid(np.array([one, 0 * one]))
    ey = F.VectorFieldGrid(np.array([0 * one, one]))
    np.testing.assert_array_equal(F.contraction(ex, vol).components, np.array([0 * one, one]))
    np.testing.assert_array_equal(F.contraction(ey, vol).components, np.array([-one, 0 * one]))
    r = rng()
    X = F.VectorFieldGrid(F.random_form(M2, 1, 2, r).components)
    for q in (1, 2):
        w, eta = F.random_form(M2, q, 2, r), F.random_form(M2, q - 1, 2, r)
        lhs = F.inner_product(F.contraction(X, w), eta)
        rhs = F.inner_product(w, F.exterior_mult(X.flat(), eta))
        assert abs(lhs - rhs) < 1e-12 * F.norm(w) * F.norm(eta) * X.flat().max_abs()
        assert F.contraction(X, F.contraction(X, F.random_form(M2, 2, 2, r))).max_abs() < 1e-12


def test_lie_derivative_examples():
    x, _ = coords(M2)
    one = np.ones(M2.shape)
    ex = F.VectorFieldGrid(np.array([one, 0 * one]))
    w = one_form(M2, 0 * one, np.sin(2 * np.pi * x))
    np.testing.assert_allclose(F.lie_derivative(ex, w).components[1], 2 * np.pi * np.cos(2 * np.pi * x),
                               atol=1e-11)
    # divergence-free field: the derivative of the volume form integrates to zero
    _, y = coords(M2)
    X = F.VectorFieldGrid(np.array([np.sin(2 * np.pi * y), np.cos(2 * np.pi * x)]))
    out = F.lie_derivative(X, F.GridForm(2, one[None]))
    assert abs(float(np.sum(out.components)) * M2.cell_volume) < 1e-12


def test_symmetrised_lie_derivative_is_pointwise():
    # (L + L^sharp) commutes with multiplication by functions
    model = TorusModel(2, 64)
    r = rng()
    X = F.gradient_field(SPEC2, model)
    for q in range(3):
        w = F.random_form(model, q, 3, r)
        f = F.random_form(model, 0, 2, r).components[0]

        def S(v):
            return F.lie_derivative(X, v) + F.lie_sharp(X, v)

        lhs = S(F.GridForm(q, f[None] * w.components))
        rhs = F.GridForm(q, f[None] * S(w).components)
        assert (lhs - rhs).max_abs() < 1e-9 * lhs.max_abs()
        # both adjoint paths agree
        assert (F.lie_sharp(X, w, "star") - F.lie_sharp(X, w, "flat")).max_abs() < 1e-9 * w.max_abs()


def test_inner_products():
    one = np.ones(M2.shape)
    dx, dy = one_form(M2, one, 0 * one), one_form(M2, 0 * one, one)
    assert F.inner_product(dx, dx) == pytest.approx(1.0, abs=1e-14)
    assert F.inner_product(dx, dy) == 0.0
    r = rng()
    for _ in range(10):
        a, b = F.random_form(M2, 1, 3, r), F.random_form(M2, 1, 3, r)
        assert abs(F.inner_product(a, b)) <= F.norm(a) * F.norm(b)


def test_witten_d_identities():
    r = rng()
    t = 3.0
    for q in range(2):
        w = F.random_form(M2, q, 2, r)
        if q == 0:
            assert F.witten_d(F.witten_d(w, SPEC2, t), SPEC2, t).max_abs() < 1e-9 * t * t * w.max_abs()
        assert np.array_equal(F.witten_d(w, SPEC2, 0.0).components, F.d(w).components)
    w = F.random_form(M2, 1, 2, r)
    assert np.array_equal(F.witten_delta(w, SPEC2, 0.0).components, F.codifferential(w).components)
    # e^{th} d(t) w = d(e^{th} w): use a small t and a fine grid so e^{th} stays resolved
    model = TorusModel(2, 128)
    t = 0.5
    w = F.random_form(model, 0, 3, r)
    e = np.exp(t * F.h_grid(SPEC2, model))
    lhs = F.GridForm(1, e[None] * F.witten_d(w, SPEC2, t).components)
    rhs = F.d(F.GridForm(0, e[None] * w.components))
    assert (lhs - rhs).max_abs() < 1e-8 * rhs.max_abs()


def test_witten_delta_paths_agree_and_adjoint():
    r = rng()
    t = 2.0
    for q in (1, 2):
        w = F.random_form(M2, q, 2, r)
        a, b = F.witten_delta(w, SPEC2, t, "contraction"), F.witten_delta(w, SPEC2, t, "star")
        assert (a - b).max_abs() < 1e-10 * a.max_abs()
        v = F.random_form(M2, q - 1, 2, r)
        lhs = F.inner_product(F.witten_d(v, SPEC2, t), w)
        assert abs(lhs - F.inner_product(v, a)) < 1e-10 * F.norm(v) * F.norm(w) * 100


def test_laplacian_on_sine_and_cosine_expansion():
    x = coords(TorusModel(1, 64))[0]
    f = F.function(np.sin(2 * np.pi * x))
    np.testing.assert_allclose(F.witten_laplacian_apply(f, cosine_t1(), 0.0).components[0],
                               4 * np.pi ** 2 * f.components[0], atol=1e-9)
    t = 2.0
    f = F.random_form(TorusModel(1, 64), 0, 4, rng())
    u = f.components[0]
    upp = F.partial(F.partial(u, 0), 0)
    oracle = -upp + t * t * 4 * np.pi ** 2 * np.sin(2 * np.pi * x) ** 2 * u \
        + t * 4 * np.pi ** 2 * np.cos(2 * np.pi * x) * u
    for path in ("composition", "decomposition"):
        got = F.witten_laplacian_apply(f, cosine_t1(), t, path=path).components[0]
        np.testing.assert_allclose(got, oracle, atol=1e-9 * np.max(np.abs(oracle)))


def test_laplacian_nonnegative():
    r = rng()
    for q in range(3):
        for _ in range(5):
            w = F.random_form(M2, q, 3, r)
            assert F.inner_product(F.witten_laplacian_apply(w, SPEC2, 4.0), w) >= 0


def test_resolution_guard():
    with pytest.raises(ResolutionTooCoarse):
        F.check_resolution(product_cosine_t2(), TorusModel(2, 16), 32.0)
    N = F.min_resolution(product_cosine_t2(), 2, 32.0)
    F.check_resolution(product_cosine_t2(), TorusModel(2, N), 32.0)


def test_form_bytes_roundtrip(tmp_path):
    w = F.random_form(TorusModel(2, 16), 1, 2, rng())
    F.save_form(tmp_path / "w.bin", w)
    back = F.load_form(tmp_path / "w.bin")
    assert back.degree == 1 and np.array_equal(back.components, w.components)
    with pytest.raises(ValueError):
        F.form_from_bytes(b"XXXX" + F.form_to_bytes(w)[4:])
