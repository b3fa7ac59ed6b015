import numpy as np
import pytest

from whslab import forms as F
from whslab.errors import BoundarySquareNonzero
from whslab.geometry import (MorseFunctionSpec, TorusModel, cosine_t1, double_well_t1, find_critical_points,
                             product_cosine_t2)
from whslab.morse import (MorseComplex, TrigInterpolant, build_cells, build_complex, cohomology_ranks,
                          connecting_orbits, flow, incidence, int_cochain, int_morphism_check,
                          integrate_over_unstable)

# a T^2 function whose Morse differential is nonzero in both degrees
MIXED = MorseFunctionSpec((((1, 0), 1.0, 0.0), ((2, 0), 0.5, 0.0), ((0, 1), 1.0, 0.0), ((1, 1), 0.15, 0.3)))


def census(spec):
    return find_critical_points(TorusModel(spec.n, 64), spec)


@pytest.fixture(scope="module")
def t1():
    spec = cosine_t1()
    cx = build_complex(spec, census(spec))
    return spec, cx, build_cells(cx, spec)


@pytest.fixture(scope="module")
def mixed():
    cx = build_complex(MIXED, census(MIXED))
    return cx, build_cells(cx, MIXED)


def test_flow_destinations():
    spec = cosine_t1()
    pts = census(spec)
    down = flow(spec, pts, [0.1])
    assert down.destination == "c0_0" and down.is_monotone()
    assert flow(spec, pts, [0.1], reverse=True).destination == "c1_1"


def test_flow_from_perturbed_saddle_descends():
    spec = product_cosine_t2()
    pts = census(spec)
    saddle = pts[1]
    tr = flow(spec, pts, saddle.x + 0.05 * saddle.unstable_frame[:, 0])
    dest = next(c for c in pts if c.label == tr.destination)
    assert dest.index < saddle.index and dest.value < saddle.value


def test_t1_orbits_opposite_signs():
    spec = cosine_t1()
    pts = census(spec)
    orbits = connecting_orbits(spec, pts, pts[1], pts[0])
    assert sorted(o.sign for o in orbits) == [-1, 1]
    assert incidence(orbits) == 0


def test_t2_orbits_top_to_saddles():
    spec = product_cosine_t2()
    pts = census(spec)
    top = pts[3]
    for saddle in pts[1:3]:
        orbits = connecting_orbits(spec, pts, top, saddle)
        assert sorted(o.sign for o in orbits) == [-1, 1]


def test_orbit_preconditions():
    spec = cosine_t1()
    pts = census(spec)
    with pytest.raises(ValueError):
        connecting_orbits(spec, pts, pts[1], pts[1])
    with pytest.raises(ValueError):
        connecting_orbits(spec, pts, pts[0], pts[1])


def test_double_well_complex():
    spec = double_well_t1()
    cx = build_complex(spec, census(spec))
    D = cx.boundary[0]
    # every max is adjacent to both minima, one orbit each
    assert np.array_equal(np.abs(D), np.ones((2, 2), dtype=int))
    assert np.all(D.sum(axis=0) == 0) and np.all(D.sum(axis=1) == 0)
    assert np.linalg.matrix_rank(D) == 1
    assert cohomology_ranks(cx) == [1, 1]


def test_product_cosine_zero_differential():
    spec = product_cosine_t2()
    cx = build_complex(spec, census(spec))
    assert all(not D.any() for D in cx.boundary)
    assert cohomology_ranks(cx) == cx.counts == [1, 2, 1]


def test_mixed_complex_nonzero(mixed):
    cx, _ = mixed
    assert cx.counts == [2, 4, 2]
    assert all(D.any() for D in cx.boundary)
    assert not (cx.boundary[1] @ cx.boundary[0]).any()
    assert cohomology_ranks(cx) == [1, 2, 1]


def test_orientation_flip_negates_incidences(mixed):
    cx, _ = mixed
    label = cx.generators[1][0]
    flipped = cx.with_orientation(label)
    assert np.array_equal(flipped.boundary[0][0], -cx.boundary[0][0])
    assert np.array_equal(flipped.boundary[1][:, 0], -cx.boundary[1][:, 0])
    assert cohomology_ranks(flipped) == cohomology_ranks(cx)


def test_square_nonzero_is_rejected(monkeypatch):
    # force every incidence to 1: both coboundaries become all-ones and their product is nonzero
    from whslab import morse
    spec = product_cosine_t2()
    monkeypatch.setattr(morse, "incidence", lambda orbits: 1)
    with pytest.raises(BoundarySquareNonzero) as info:
        build_complex(spec, census(spec))
    assert info.value.degree == 0


def test_zero_differential_betti_equals_counts():
    spec = product_cosine_t2()
    cx = build_complex(spec, census(spec))
    assert cohomology_ranks(cx) == cx.counts


def test_needs_two_points():
    spec = cosine_t1()
    with pytest.raises(ValueError):
        build_complex(spec, census(spec)[:1])


def test_integration_examples(t1):
    spec, cx, cells = t1
    M = TorusModel(1, 32)
    dx = F.GridForm(1, np.ones((1, 32)))
    assert integrate_over_unstable(dx, cells["c1_1"]) == pytest.approx(1.0, abs=1e-9)
    f = F.random_form(M, 0, 3, np.random.default_rng(0))
    assert abs(integrate_over_unstable(F.d(f), cells["c1_1"])) < 1e-8
    # a point cell evaluates the function
    val = integrate_over_unstable(f, cells["c0_0"])
    assert val == pytest.approx(float(TrigInterpolant(f.components)(np.array([[0.5]]))[0, 0]), abs=1e-13)
    assert int_cochain(F.GridForm(0, np.zeros((1, 32))), cx, cells).tolist() == [0.0]


def test_morphism_t1(t1):
    spec, cx, cells = t1
    r = np.random.default_rng(2)
    assert max(int_morphism_check(F.random_form(TorusModel(1, 32), 0, 3, r), cx, cells) for _ in range(5)) < 1e-6


def test_morphism_mixed(mixed):
    cx, cells = mixed
    r = np.random.default_rng(3)
    res = max(int_morphism_check(F.random_form(TorusModel(2, 32), 0, 2, r), cx, cells) for _ in range(5))
    assert res < 1e-6
    zero = F.GridForm(1, np.zeros((2, 32, 32)))
    assert int_morphism_check(zero, cx, cells, tol=1e-3) == 0.0


def test_trig_interpolant_exact_on_band_limited():
    M = TorusModel(2, 16)
    w = F.random_form(M, 1, 3, np.random.default_rng(4))
    pts = M.points().reshape(-1, 2)
    np.testing.assert_allclose(TrigInterpolant(w.components)(pts), w.components.reshape(2, -1).T, atol=1e-12)
    off = np.array([[0.123, 0.456]])
    k = np.fft.fftfreq(16, 1 / 16)
    coef = np.fft.fft2(w.components[0]) / 256
    oracle = np.real(np.sum(coef * np.exp(2j * np.pi * (k[:, None] * 0.123 + k[None, :] * 0.456))))
    assert TrigInterpolant(w.components)(off)[0, 0] == pytest.approx(oracle, abs=1e-12)


def test_report_and_exports(t1):
    _, cx, _ = t1
    assert "Betti numbers: [1, 1]" in cx.report()
    assert cx.incidence_csv(0).splitlines() == ["x,c0_0", "c1_1,0"]
    assert '"betti": [\n    1,\n    1\n  ]' in cx.betti_json()
