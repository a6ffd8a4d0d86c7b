import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evofam.errors import InvalidArgument, InvalidWeight
from evofam.evolution_family import GridField, SpaceTimeField, grid_points
from evofam.weighted_norms import (
    WeightSpec,
    ap_constant,
    consistency_probe,
    norm_row,
    rows_to_json,
    weighted_norm,
)

L = 2 * np.pi


def midpoints(n, a=0.0, b=1.0):
    return a + (np.arange(n) + 0.5) * (b - a) / n


def test_ap_constant_of_one_is_exact():
    est = ap_constant(WeightSpec.constant(1.0), 2.0, 6)
    assert est.value == 1.0 and est.stable


@pytest.mark.parametrize("c", [0.1, 3.0, 1e5])
def test_ap_constant_scale_invariant(c):
    assert ap_constant(WeightSpec.constant(c), 3.0, 5).value == pytest.approx(1.0, abs=1e-14)


def test_ap_power_weight_inside_range():
    est = ap_constant(WeightSpec.power(0.5), 2.0, 12)
    assert est.stable and not est.diverging
    assert abs(est.per_level[-1] - est.per_level[-2]) / est.per_level[-2] <= 0.02


def test_ap_power_weight_outside_range():
    est = ap_constant(WeightSpec.power(1.1), 2.0, 12)
    assert est.diverging and not est.stable


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.9, 0.9), st.sampled_from([1.5, 2.0, 3.0]), st.floats(-0.7, 0.7))
def test_ap_at_least_one_and_monotone(gamma, p, center):
    est = ap_constant(WeightSpec("power", gamma, center), p, 6)
    assert est.value >= 1 - 1e-12
    assert all(b >= a for a, b in zip(est.per_level, est.per_level[1:]))


def test_ap_two_dimensional_weight():
    est = ap_constant(WeightSpec.power(0.8, dim=2), 2.0, 7)
    assert est.value >= 1 and math.isfinite(est.value)


def test_weight_validation():
    with pytest.raises(InvalidWeight):
        WeightSpec.power(1.5, p=2.0)
    with pytest.raises(InvalidWeight):
        WeightSpec.tabulated([1.0, 0.0, 2.0])
    with pytest.raises(InvalidWeight):
        WeightSpec.constant(-1.0)
    with pytest.raises(InvalidWeight):
        WeightSpec.power(-0.5)(np.array([0.0]))
    with pytest.raises(InvalidArgument):
        ap_constant(WeightSpec.constant(), 1.0, 3)


def test_tabulated_weight_scan():
    vals = np.where(np.arange(64) < 32, 1.0, 4.0)
    est = ap_constant(WeightSpec.tabulated(vals), 2.0, 6)
    # worst dyadic cube is the base one: (2.5)(0.625) = 1.5625
    assert est.value == pytest.approx(1.5625, rel=1e-12)


def test_parseval_single_mode():
    a = 1.7
    times = midpoints(8)
    fields = [GridField.mode(2, 16, L, 1, [1, 2], amplitude=[a]) for _ in times]
    assert weighted_norm(fields, 2, 2, times=times) == pytest.approx(a * math.sqrt(L ** 2 * 1.0), rel=1e-12)


def test_homogeneity_three(rng):
    times = midpoints(5)
    f = SpaceTimeField.random_bandlimited(times, 1, 16, L, 2, rng)
    for args in [dict(p=2, q=2), dict(p=3, q=2, v=WeightSpec.power(0.3), w=WeightSpec.power(0.2), k=1)]:
        base = weighted_norm(f, **args)
        assert weighted_norm(f.like(3 * f.values), **args) == pytest.approx(3 * base, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(2, 2), (3, 2), (2, 3), (1.5, 4)]), st.integers(0, 2))
def test_norm_axioms(seed, pq, k):
    rng = np.random.default_rng(seed)
    times = midpoints(4)
    p, q = pq
    v, w = WeightSpec.power(0.3 * (p - 1), center=-0.1), WeightSpec.power(0.3 * (q - 1))
    f, g = (SpaceTimeField.random_bandlimited(times, 1, 8, L, 2, rng) for _ in range(2))
    c = complex(rng.standard_normal(), rng.standard_normal())
    nf, ng = weighted_norm(f, p, q, v, w, k), weighted_norm(g, p, q, v, w, k)
    assert weighted_norm(f.like(f.values + g.values), p, q, v, w, k) <= (nf + ng) * (1 + 1e-10)
    assert weighted_norm(f.like(c * f.values), p, q, v, w, k) == pytest.approx(abs(c) * nf, rel=1e-10)


def brute_force(values, times, L, p, q, v, w, k):
    # nested loops with an explicit DFT for the derivative term
    n_t, n, N = values.shape
    h = L / n
    x = [-L / 2 + (j + 0.5) * h for j in range(n)]
    freqs = [2 * math.pi * (kk if kk < n // 2 else kk - n) / L for kk in range(n)]
    dt = times[1] - times[0]
    total = 0.0
    for i in range(n_t):
        inner = 0.0
        for order in range(k + 1):
            s = 0.0
            for j in range(n):
                vec = []
                for c in range(N):
                    if order == 0:
                        vec.append(values[i, j, c])
                    else:
                        acc = 0j
                        for a in range(n):
                            coef = sum(values[i, b, c] * np.exp(-2j * math.pi * a * b / n) for b in range(n))
                            acc += freqs[a] ** order * coef * np.exp(2j * math.pi * a * j / n) / n
                        vec.append(acc)
                s += w(abs(x[j])) * math.sqrt(sum(abs(z) ** 2 for z in vec)) ** q
            inner += (s * h) ** (1 / q)
        total += dt * v(times[i]) * inner ** p
    return total ** (1 / p)


def test_brute_force_oracle(rng):
    times = midpoints(3)
    f = SpaceTimeField.random_bandlimited(times, 1, 8, L, 2, rng, band=2)
    gamma, delta = 0.3 * 2, 0.3 * 1
    v, w = WeightSpec.power(gamma), WeightSpec.power(delta)
    for k in (0, 1):
        ours = weighted_norm(f, 3, 2, v, w, k)
        ref = brute_force(f.values, times, L, 3, 2, lambda t: abs(t) ** gamma, lambda x: x ** delta, k)
        assert ours == pytest.approx(ref, rel=1e-12)


def test_scalar_path_and_rules():
    times = np.linspace(0, 1, 101)
    vals = np.exp(-times)
    trap = weighted_norm(vals, 2, 2, times=times, rule="trapezoid")
    assert trap == pytest.approx(math.sqrt((1 - math.exp(-2)) / 2), rel=1e-4)
    mids = midpoints(200)
    assert weighted_norm(np.exp(-mids), 2, 2, times=mids) == pytest.approx(math.sqrt((1 - math.exp(-2)) / 2), rel=1e-5)


def test_grid_mismatch(rng):
    times = midpoints(2)
    fields = [GridField.random_bandlimited(1, 8, L, 1, rng), GridField.random_bandlimited(1, 16, L, 1, rng)]
    with pytest.raises(InvalidArgument):
        weighted_norm(fields, 2, 2, times=times)
    with pytest.raises(InvalidArgument):
        weighted_norm(fields[:1], 2, 2, times=times)
    with pytest.raises(InvalidArgument):
        weighted_norm([fields[0]] * 2, 2, 2, w=WeightSpec.power(0.1, dim=2), times=times)


def test_consistency_probe_trivial_cases():
    ws = [WeightSpec.power(g) for g in (0.0, 0.3, 0.6)]
    assert consistency_probe(lambda w: 1.0, ws, 2.0).monotone
    ident = consistency_probe(lambda w: ap_constant(w, 2.0, 8).value, ws, 2.0)
    assert ident.monotone and ident.measured == ident.ap_constants
    flipped = consistency_probe(lambda w: -w.gamma, ws, 2.0)
    assert not flipped.monotone and flipped.violations
    with pytest.raises(InvalidArgument):
        consistency_probe(lambda w: 1.0, ws[:2], 2.0)


def test_norm_rows_json():
    rows = [norm_row(2, 3, 0.3, 0.6, 1.25)]
    assert json.loads(rows_to_json(rows)) == [{"p": 2, "q": 3, "gamma": 0.3, "delta": 0.6, "value": 1.25}]


def test_weight_on_grid_points():
    x = grid_points(2, 4, 2.0)
    vals = WeightSpec.power(1.0, dim=2)(x)
    np.testing.assert_allclose(vals, np.linalg.norm(x, axis=-1))
