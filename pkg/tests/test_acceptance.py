import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from evofam.corpus import corpus
from evofam.evolution_family import (
    EvolutionOperator,
    GridField,
    SpaceTimeField,
    apply_S,
    check_adjoint_duality,
    check_cocycle,
    check_commutation_with_A0,
    check_derivative_commutation,
    decay_exponent_fit,
    implicit_euler,
)
from evofam.mreg_lab import (
    aligned_times,
    box_kernel,
    exponential_kernel,
    kernel_operator_apply,
    lambda_sweep,
    solve_nondivergence,
    trapezoid_weights,
)
from evofam.multiplier_checks import mihlin_constant_scan, resolvent_bound_scan, sector_geometry
from evofam.operator_spec import heat_spec, noncommuting_example, principal_symbol
from evofam.symbol_propagator import (
    PicardConfig,
    gronwall_envelope_margin,
    picard_solve,
    propagate_forced,
    propagate_homogeneous,
)
from evofam.weighted_norms import WeightSpec, ap_constant

L = 2 * np.pi


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def test_criterion_01_heat_kernel_exactness():
    rng = np.random.default_rng(1)
    op = EvolutionOperator(heat_spec(d=1), 32)
    k2 = op.xi[:, 0] ** 2
    worst, transform = 0.0, 0.0
    for _ in range(50):
        s = rng.uniform(-2, 1)
        t = s + rng.uniform(0, 1)
        j = int(rng.integers(0, 32))
        expected = math.exp(-(t - s) * k2[j])
        worst = max(worst, abs(op.matrices(t, s)[j, 0, 0] - expected) / expected)
        # the grid operator applies exactly these multipliers, up to FFT roundoff
        g = GridField.random_bandlimited(1, 32, L, 1, rng)
        out = apply_S(op, t, s, g)
        ref = g.hat()[:, 0] * np.exp(-(t - s) * k2)
        transform = max(transform, np.max(np.abs(out.hat()[:, 0] - ref)) / np.max(np.abs(g.hat())))
    ok = worst <= 1e-10 and transform <= 1e-13
    record(1, ok, f"heat mode-wise relative error {worst:.2e} <= 1e-10 (50 samples), "
                  f"grid application {transform:.1e}")


def test_criterion_02_cocycle():
    rng = np.random.default_rng(2)
    op = EvolutionOperator(noncommuting_example(), 32)
    worst = 0.0
    for _ in range(100):
        s, r, t = np.sort(rng.uniform(-1.5, 1.5, 3))
        g = GridField.random_bandlimited(1, 32, L, 2, rng)
        worst = max(worst, check_cocycle(op, s, r, t, g))
    record(2, worst <= 1e-10, f"Example cocycle error {worst:.2e} <= 1e-10 (100 samples)")


def test_criterion_03_gronwall_envelope():
    rng = np.random.default_rng(3)
    entries = corpus()
    worst = math.inf
    for entry in entries:
        for _ in range(250):
            xi = rng.uniform(-6, 6, entry.spec.d)
            s = rng.uniform(-2, 1)
            grid = np.sort(np.concatenate([[s], s + rng.uniform(0, 2, 4)]))
            res = propagate_forced(entry.spec, xi, s, grid)
            worst = min(worst, gronwall_envelope_margin(res, entry.kappa, eps=0.0))
    ok = worst >= -1e-12 and len(entries) >= 5
    record(3, ok, f"min envelope margin {worst:.2e} >= -1e-12 over {len(entries)} specs x 1000 samples")


def _decay_times(m, n, order):
    lo = order / (2 * m) * (n / 4) ** (-2 * m)
    return np.geomspace(lo, 1000 * lo, 25)


def test_criterion_04_decay_exponents():
    cases = [("heat", heat_spec(d=1), 0.0), ("example", noncommuting_example(), 0.5),
             ("biheat", heat_spec(d=1, m=2), 0.0)]
    rows, ok = [], True
    for name, spec, s in cases:
        op = EvolutionOperator(spec, 128)
        for order in (1, 2):
            start = time.perf_counter()
            fit = decay_exponent_fit(op, (order,), s, s + _decay_times(spec.m, 128, order))
            elapsed = time.perf_counter() - start
            target = -order / (2 * spec.m)
            good = not fit.inconclusive and abs(fit.slope - target) <= 0.05 and elapsed <= 60
            ok &= good
            rows.append(f"{name}/{order}: {fit.slope:.3f} vs {target:.2f} in {elapsed:.1f}s")
    record(4, ok, "; ".join(rows))


def test_criterion_05_mihlin_stability():
    rows, ok = [], True
    for name, spec in [("heat", heat_spec(d=1)), ("example", noncommuting_example()),
                       ("anisotropic", corpus()[6].spec)]:
        tables = [mihlin_constant_scan(spec, lam, (0,) * spec.d, 3, "homogeneous") for lam in (1.0, 10.0, 100.0)]
        refine = max(max(t.deltas.values()) for t in tables)
        spread = max(max(t.constants[o] for t in tables) / min(t.constants[o] for t in tables) - 1
                     for o in range(4))
        ok &= refine <= 0.05 and spread <= 0.10 and all(t.finite for t in tables)
        rows.append(f"{name}: refinement {refine:.1e}, lambda spread {spread:.1e}")
    record(5, ok, "; ".join(rows))


def test_criterion_06_resolvent_and_sector():
    rows, ok = [], True
    for entry in corpus():
        kappa, theta0, theta = entry.sector()
        scan = resolvent_bound_scan(entry.spec, kappa, theta0, theta)
        geo = sector_geometry(theta0, theta, kappa, n_samples=100_000)
        ok &= scan.passed and geo.inequality_holds
        rows.append(f"{entry.name} {scan.C_observed / scan.bound:.3f}")
    record(6, ok, "C_observed/bound " + ", ".join(rows) + "; sector ratio >= eps on 1e5 samples")


def test_criterion_07_duality():
    worst = 0.0
    for entry in corpus():
        op = EvolutionOperator(entry.spec, 16)
        worst = max(worst, check_adjoint_duality(entry.spec, -1.0, 1.5, op.xi))
    record(7, worst <= 1e-10, f"duality error {worst:.2e} <= 1e-10 over the corpus")


def test_criterion_08_commutation():
    rng = np.random.default_rng(8)
    deriv, comm = 0.0, 0.0
    for entry in corpus():
        spec = entry.spec
        op = EvolutionOperator(spec, 16)
        g = GridField.random_bandlimited(spec.d, 16, L, spec.N, rng)
        for alpha in [(1,) + (0,) * (spec.d - 1), (0,) * (spec.d - 1) + (2,)]:
            deriv = max(deriv, check_derivative_commutation(op, 1.5, -1.0, alpha, g))
        comm = max(comm, check_commutation_with_A0(op, 0.1, 0.3, 1.5, -1.0, g))
    ok = deriv <= 1e-10 and comm <= 1e-10
    record(8, ok, f"derivative commutation {deriv:.2e}, heat-semigroup commutation {comm:.2e}")


def test_criterion_09_picard():
    rng = np.random.default_rng(9)
    entries = [e for e in corpus() if e.spec.m == 1]
    worst_excess, worst_cross, converged = -math.inf, 0.0, True
    for i in range(20):
        target = rng.uniform(0.5, 5.0)
        if i % 2 == 0:
            # linear field from a corpus symbol, frequency scaled so that K1 = target
            spec = entries[(i // 2) % len(entries)].spec
            direction = rng.standard_normal(spec.d)
            direction /= np.linalg.norm(direction)
            unit = max(float(np.linalg.norm(principal_symbol(spec, t, direction), 2)) for t in spec.segment_times(2))
            xi = math.sqrt(target / unit) * direction
            Q = lambda t, x, spec=spec, xi=xi: -principal_symbol(spec, t, xi) @ x
            res = picard_solve(Q, np.eye(spec.N), None, -1.0, 1.0, PicardConfig(K1=target),
                               breakpoints=spec.breakpoints)
            for t, u in zip(res.times[::5], res.values[::5]):
                worst_cross = max(worst_cross, float(np.max(np.abs(u - propagate_homogeneous(spec, xi, -1.0, t)))))
        else:
            # nonlinear field B(t) x + c sin(x) with a breakpoint at 0, Lipschitz constant target
            B = rng.standard_normal((2, 3, 3))
            c = rng.uniform(0, 0.5) * target
            B *= (target - c) / np.linalg.norm(B, 2, axis=(-2, -1))[:, None, None]
            Q = lambda t, x, B=B, c=c: B[int(t >= 0)] @ x + c * np.sin(x)
            res = picard_solve(Q, rng.standard_normal(3), None, -1.0, 1.0, PicardConfig(K1=target),
                               breakpoints=(0.0,))
        converged &= res.converged
        worst_excess = max(worst_excess, res.measured_factor - target / (target + 1))
    ok = worst_excess <= 1e-3 and worst_cross <= 1e-8 and converged
    record(9, ok, f"factor - K1/(K1+1) <= {worst_excess:.2e} on 20 fields, cross-method {worst_cross:.2e}")


def test_criterion_10_maximal_regularity():
    spec = noncommuting_example()
    times = aligned_times(-1.0, 1.0, 1e-3, spec.breakpoints)
    f = SpaceTimeField.random_bandlimited(times, 1, 16, L, 2, np.random.default_rng(10), band=4)
    sweep = lambda_sweep(spec, [1.0, 10.0, 100.0, 1000.0], f)
    residual = max(r["residual"] for r in sweep.rows)
    finite = []
    for p, q in [(2, 2), (3, 2), (2, 3)]:
        _, rep = solve_nondivergence(spec, 10.0, f, p, q, WeightSpec.power(0.3 * (p - 1)),
                                     WeightSpec.power(0.3 * (q - 1)))
        finite.append(math.isfinite(rep.ratio) and rep.ratio > 0)
        residual = max(residual, rep.residual)
    ok = sweep.spread <= 3 and all(finite) and residual <= 1e-6
    record(10, ok, f"sweep max/min {sweep.spread:.3f} <= 3, weighted ratios finite {all(finite)}, "
                   f"residual {residual:.2e}")


def test_criterion_11_ap():
    one = ap_constant(WeightSpec.constant(1.0), 2.0, 8)
    half = ap_constant(WeightSpec.power(0.5), 2.0, 12)
    over = ap_constant(WeightSpec.power(1.1), 2.0, 12)
    ok = one.value == 1.0 and half.stable and not half.diverging and over.diverging
    record(11, ok, f"[1] = {one.value!r}, |t|^0.5 -> {half.value:.4f} (stable {half.stable}), "
                   f"|t|^1.1 diverging {over.diverging}")


def _brute_force(op, kernel, f):
    out = np.zeros_like(f.values)
    for i, t in enumerate(f.times):
        c = trapezoid_weights(f.times, i)
        for j in range(i + 1):
            if t - f.times[j] > kernel.support[1] * (1 + 1e-12):
                continue
            g = GridField(f.d, f.n, f.L, f.N, f.values[j])
            out[i] += c[j] * kernel(np.array(t - f.times[j])) * apply_S(op, t, f.times[j], g).values
    return out


def test_criterion_12_oracles():
    spec = noncommuting_example()
    rng = np.random.default_rng(12)
    op = EvolutionOperator(spec, 16, cache_size=0)
    f = SpaceTimeField.random_bandlimited(np.linspace(-0.5, 0.5, 17), 1, 16, L, 2, rng)
    kern_err = 0.0
    for kern in (box_kernel(0.25), exponential_kernel(3.0)):
        ref = _brute_force(op, kern, f)
        kern_err = max(kern_err, np.max(np.abs(kernel_operator_apply(op, kern, f).values - ref)) / np.max(np.abs(ref)))
    op32 = EvolutionOperator(spec, 32)
    g = GridField.random_bandlimited(1, 32, L, 2, rng)
    exact = apply_S(op32, 1.0, -1.0, g)
    euler = (exact - implicit_euler(op32, -1.0, 1.0, g, h=1e-4)).norm() / exact.norm()
    ok = kern_err <= 1e-12 and euler <= 1e-5
    record(12, ok, f"kernel vs double loop {kern_err:.2e} (16 cells), mild vs implicit Euler {euler:.2e}")
