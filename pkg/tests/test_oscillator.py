import math
import warnings
from itertools import combinations

import numpy as np
import pytest

from whslab.errors import TruncationWarning
from whslab.oscillator import (ModelOperator, beta, box_operator, box_spectrum, coercivity_constant,
                               cutoff_state, epsilon_coeff, ground_state, kernel_dimension, model_spectrum,
                               multi_indices, on_lattice, residual_sweep, smoothstep_profile)


def test_epsilon_examples():
    assert epsilon_coeff((1,), 1, 1, 2) == -2
    assert epsilon_coeff((2,), 1, 1, 2) == 2
    assert epsilon_coeff((), 0, 0, 1) == -1


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_epsilon_minimum_is_minus_n_iff_q_equals_k(n):
    for k in range(n + 1):
        for q in range(n + 1):
            low = min(epsilon_coeff(I, q, k, n) for I in multi_indices(n, q))
            assert (low == -n) == (q == k)


def test_epsilon_validation():
    with pytest.raises(ValueError):
        epsilon_coeff((2, 1), 2, 0, 2)
    with pytest.raises(ValueError):
        epsilon_coeff((1,), 2, 0, 2)


def test_hermite_levels_t1():
    t = 3.0
    np.testing.assert_allclose(model_spectrum(ModelOperator(1, 0, 0, t), 4), [0, 2 * t, 4 * t, 6 * t], atol=1e-12)


@pytest.mark.parametrize("n", [1, 2])
@pytest.mark.parametrize("t", [4.0, 16.0])
def test_lattice_membership_and_kernel(n, t):
    for k in range(n + 1):
        for q in range(n + 1):
            op = ModelOperator(n, k, q, t)
            with warnings.catch_warnings():
                warnings.simplefilter("error", TruncationWarning)
                vals = model_spectrum(op, 8)
            assert np.max(on_lattice(vals, t)) < 1e-12
            assert np.max(on_lattice(box_spectrum(op, 8), t)) < 5e-3
            assert kernel_dimension(op) == (1 if q == k else 0)


def test_box_matches_closed_form_within_one_percent():
    for n, k, q in [(1, 0, 0), (1, 1, 0), (2, 1, 1), (2, 0, 2)]:
        op = ModelOperator(n, k, q, 16.0)
        exact = model_spectrum(op, 6, cross_check=False)
        box = box_spectrum(op, 6)
        assert np.max(np.abs(box - exact)) < 0.01 * 2 * op.t


def test_truncation_warning_on_coarse_box():
    with pytest.warns(TruncationWarning):
        model_spectrum(ModelOperator(1, 0, 0, 16.0), 12, points=12)


def test_ground_state_normalisation():
    gs = ground_state(1, 0, math.pi)
    assert float(gs.coefficient(0.0)) == pytest.approx(1.0)
    for n in (1, 2):
        t = 5.0
        L, N = 8 / math.sqrt(t), 200
        x = -L + 2 * L * np.arange(N) / N
        grids = np.stack(np.meshgrid(*([x] * n), indexing="ij"), axis=-1).reshape(-1, n)
        c = ground_state(n, n, t).coefficient(grids)
        assert float(np.sum(c ** 2)) * (2 * L / N) ** n == pytest.approx(1.0, abs=1e-12)


def test_ground_state_in_kernel_of_box_operator():
    for n in (1, 2):
        op = ModelOperator(n, n, n, 9.0)
        A, x, _ = box_operator(op, 64 if n == 1 else 40)
        grids = np.stack(np.meshgrid(*([x] * n), indexing="ij"), axis=-1).reshape(-1, n)
        v = ground_state(n, n, op.t).coefficient(grids)
        r = A @ v + op.t * (-n) * v
        assert np.linalg.norm(r) < 1e-8 * np.linalg.norm(A @ v)


def test_cutoff_state_properties():
    eta = 0.5
    for n in (1, 2):
        for q in range(n + 1):
            s = cutoff_state(n, q, 40.0, eta)
            assert s.norm_squared() == pytest.approx(1.0, abs=1e-12)
            far = np.array([[eta * 1.001] + [0.0] * (n - 1), [1.001 * eta / math.sqrt(n)] * n])
            assert np.all(s.coefficient(far) == 0.0)
    assert smoothstep_profile(0.2, 0.5) == 1.0 and smoothstep_profile(0.6, 0.5) == 0.0


def test_beta_tends_to_one():
    eta = 0.5
    ts = [10, 40, 120, 240, 480]
    gaps = [1 - beta(2, 1, t, eta) for t in ts]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    # t eta^2 = 60
    assert 1 - beta(2, 1, 240.0, eta) < 1e-6


def test_residual_decays_exponentially():
    out = residual_sweep(2, 1, 0.5, [40, 80, 120, 160, 200])
    assert out["slope"] < 0 and out["correlation"] < -0.99


def test_energy_lower_bound():
    # <Delta_{q,k} w, w> >= 2 t |q - k| for the cutoff state of degree q
    t, eta = 20.0, 0.5
    for q in range(3):
        s = cutoff_state(2, q, t, eta)
        for k in range(3):
            assert s.energy(k) >= 2 * t * abs(q - k) - 1e-9 * t


def test_coercivity_constant_positive():
    for n in (1, 2):
        for t in (8.0, 16.0):
            assert coercivity_constant(n, n, t, 0.5) > 1.0


def test_multi_indices_lexicographic():
    assert multi_indices(3, 2) == [tuple(i + 1 for i in I) for I in combinations(range(3), 2)]
