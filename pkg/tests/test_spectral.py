import math

import numpy as np
import pytest

from whslab import forms as F
from whslab.errors import GapNotOpen, HypothesisViolation, NoConvergence, SupportOverlap
from whslab.geometry import (MorseFunctionSpec, TorusModel, cosine_t1, double_well_t1, find_critical_points,
                             product_cosine_t2)
from whslab.morse import build_cells, build_complex
from whslab.spectral import (SymmetricOperatorHandle, build_isometry, build_J, comparison_matrix,
                             comparison_sweep, default_eta, fmt, gap_report, lowest_eigenpairs,
                             small_complex_closure_check, spectrum_csv, verify_gap_lemma)

SPEC2 = MorseFunctionSpec((((1, 0), 1.0, 0.0), ((0, 1), 0.8, 0.4), ((1, 1), 0.2, 0.1)))
# two wells of depth 2 on the circle
TWIN = MorseFunctionSpec((((2,), 1.0, 0.0),))


def test_flat_laplacian_spectrum_t2():
    op = SymmetricOperatorHandle.witten(product_cosine_t2(), TorusModel(2, 16), 0, 0.0)
    vals = lowest_eigenpairs(op, 9).values
    oracle = (2 * math.pi) ** 2 * np.array([0, 1, 1, 1, 1, 2, 2, 2, 2])
    np.testing.assert_allclose(vals, oracle, atol=1e-9 * oracle.max())


def test_harmonic_one_forms():
    op = SymmetricOperatorHandle.witten(product_cosine_t2(), TorusModel(2, 16), 1, 0.0)
    vals = lowest_eigenpairs(op, 3).values
    assert np.sum(np.abs(vals) < 1e-9) == 2 and vals[2] > 1


@pytest.mark.parametrize("n,q", [(1, 0), (1, 1), (2, 0), (2, 1), (2, 2)])
def test_fused_matvec_matches_decomposition(n, q):
    spec = cosine_t1() if n == 1 else SPEC2
    model = TorusModel(n, 64)
    op = SymmetricOperatorHandle.witten(spec, model, q, 6.0, check=False)
    assert op.potential is not None
    w = F.random_form(model, q, 5, np.random.default_rng(0))
    ref = F.witten_laplacian_apply(w, spec, 6.0, path="decomposition")
    got = op.to_form(op.matvec(op.to_vec(w)))
    assert (got - ref).max_abs() < 1e-12 * ref.max_abs()


def test_iterative_matches_dense():
    op = SymmetricOperatorHandle.witten(SPEC2, TorusModel(2, 32), 1, 2.0, check=False)
    dense = lowest_eigenpairs(op, 6, method="dense")
    it = lowest_eigenpairs(op, 6, method="lobpcg", seed=3)
    np.testing.assert_allclose(it.values, dense.values, atol=1e-8 * max(1.0, dense.values.max()))
    assert np.all(it.residuals <= 1e-8 * np.maximum(1, np.abs(it.values)))


def test_eigensolve_deterministic():
    op = SymmetricOperatorHandle.witten(SPEC2, TorusModel(2, 64), 0, 4.0)
    a = lowest_eigenpairs(op, 3, seed=5)
    b = lowest_eigenpairs(op, 3, seed=5)
    assert a.method == "lobpcg" and np.array_equal(a.values, b.values)


def test_probe_rejects_nonsymmetric():
    model = TorusModel(1, 32)

    def skew(w):
        return F.GridForm(0, F.partial(w.components[0], 0)[None] + w.components)

    with pytest.raises(HypothesisViolation):
        SymmetricOperatorHandle(skew, 0, model)


def test_unreachable_tolerance_raises():
    op = SymmetricOperatorHandle.witten(product_cosine_t2(), TorusModel(2, 16), 0, 0.0)
    with pytest.raises(NoConvergence):
        lowest_eigenpairs(op, 2, tol=1e-30)


def test_gap_lemma_examples():
    A = np.diag([0.1, 0.2, 5.0, 7.0])
    E = np.eye(4)
    assert verify_gap_lemma(A, E[:, :2], E[:, 2:], 0.25, 4.0)
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    assert verify_gap_lemma(Q @ A @ Q.T, Q[:, :2], Q[:, 2:], 0.25, 4.0)
    with pytest.raises(HypothesisViolation):
        verify_gap_lemma(A, E[:, :2], E[:, 2:], 0.15, 4.0)
    with pytest.raises(HypothesisViolation):
        verify_gap_lemma(A, E[:, :2], E[:, 1:], 0.25, 4.0)


def test_t0_small_count_is_harmonic():
    spec = product_cosine_t2()
    for q in range(3):
        r = gap_report(spec, q, [0.0], grid_res=16, require_open=False)[0]
        assert r.small_count == math.comb(2, q)


def test_gap_report_t1_and_csv():
    reps = gap_report(TWIN, 0, [2.0, 3.0, 4.0], count=5)
    assert [r.small_count for r in reps] == [2, 2, 2]
    assert reps[-1].fits["C2"] > 0 and reps[-1].fits["C3"] > 0
    lines = spectrum_csv(reps).splitlines()
    assert lines[0].startswith("q,t,grid_res,small_count") and len(lines) == 4
    with pytest.raises(GapNotOpen):
        gap_report(TWIN, 0, [0.05], count=5)


def test_fmt_roundtrips():
    for v in (math.pi, 1e-300, -2.5e17, 0.1):
        assert float(fmt(v)) == v


def test_J_columns():
    spec = product_cosine_t2()
    pts = find_critical_points(TorusModel(2, 64), spec)
    model = TorusModel(2, 64)
    J = build_J(spec, 1, 24.0, model=model, points=pts)
    np.testing.assert_allclose(J.gram, np.eye(2), atol=1e-3)
    eta = default_eta(pts)
    for j, label in enumerate(J.labels):
        y = next(p for p in pts if p.label == label)
        col = np.abs(J.vectors[:, j].reshape((2,) + model.shape))
        r = np.linalg.norm((model.points() - y.x + 0.5) % 1.0 - 0.5, axis=-1)
        assert np.all(col[:, r > eta] == 0)
    with pytest.raises(SupportOverlap):
        build_J(spec, 1, 24.0, eta=0.3, model=model, points=pts)


def test_J_t1_closed_form():
    spec = cosine_t1()
    model = TorusModel(1, 256)
    t, eta = 16.0, 0.2
    J = build_J(spec, 0, t, eta=eta, model=model)
    x = np.arange(256) / 256
    u = x - 0.5
    lam = 4 * math.pi ** 2
    from whslab.oscillator import smoothstep_profile
    g = smoothstep_profile(np.abs(u), eta) * np.exp(-0.5 * t * lam * u * u)
    g /= np.linalg.norm(g)
    np.testing.assert_allclose(J.vectors[:, 0] / np.linalg.norm(J.vectors[:, 0]), g, atol=1e-12)
    assert np.linalg.norm(J.vectors[:, 0]) == pytest.approx(1.0, abs=1e-3)


def test_isometry_and_decay_t1():
    spec = cosine_t1()
    isos = [build_isometry(spec, 0, t) for t in (8.0, 16.0, 24.0, 32.0)]
    for iso in isos:
        assert iso.isometry_error < 1e-8
    defects = [i.defect_l2 for i in isos]
    slope = np.polyfit([8, 16, 24, 32], np.log(defects), 1)[0]
    assert slope < 0
    tails = [float(i.tail_sup.max()) for i in isos]
    assert all(b < a for a, b in zip(tails, tails[1:]))
    assert np.polyfit([8, 16, 24, 32], np.log(tails), 1)[0] < 0


def test_comparison_t1_and_ratio():
    spec = cosine_t1()
    cx = build_complex(spec, find_critical_points(TorusModel(1, 64), spec))
    cells = build_cells(cx, spec)
    for q in (0, 1):
        reps, ratios = comparison_sweep(spec, cx, q, [16.0, 24.0, 32.0], cells=cells)
        devs = [r.deviation for r in reps]
        assert devs[0] <= 0.25 and devs[0] > devs[1] > devs[2]
        assert 1.4 <= ratios[16.0] <= 2.8


def test_off_diagonal_small_twin_wells():
    spec = TWIN
    cx = build_complex(spec, find_critical_points(TorusModel(1, 64), spec))
    r = comparison_matrix(spec, cx, 0, 24.0)
    off = r.L[~np.eye(2, dtype=bool)]
    assert np.max(np.abs(off)) < 1e-6
    assert np.max(np.abs(np.diag(r.L) - 1)) < 0.05


def test_closure_check():
    spec = product_cosine_t2()
    rep = small_complex_closure_check(spec, 16.0)
    assert rep.residual < 1e-6 and rep.betti == (1, 2, 1)
    rep0 = small_complex_closure_check(spec, 0.0, model=TorusModel(2, 16))
    assert rep0.residual < 1e-9 and rep0.dims == (1, 2, 1)
