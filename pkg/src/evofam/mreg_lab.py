"""Maximal-regularity experiments on the periodic grid.

Forcings are time-indexed grid fields, read as piecewise linear in time.
Solutions are built per frequency with exact exponential integrators for
the shifted symbol ``lam + A(t, xi)`` (lower-order terms included), so the
only discretization error is the linear interpolation of the forcing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .errors import InvalidArgument, PreconditionViolated
from .evolution_family import (
    EvolutionOperator,
    GridField,
    SpaceTimeField,
    frequencies,
    grid_points,
)
from .operator_spec import OperatorSpec, check_legendre_hadamard, monomial, multi_indices_upto, symbol
from .symbol_propagator import central_weights, phi_propagators, propagate_tabulated, spec_segment_key
from .weighted_norms import WeightSpec, sobolev_lq, spatial_lq, time_lp

LAMBDA0 = 1.0


def aligned_times(a: float, b: float, h: float, breakpoints: Sequence[float] = ()) -> np.ndarray:
    """Uniform time nodes of step at most ``h`` on each piece of ``[a, b]`` cut at ``breakpoints``."""
    if not b > a or not h > 0:
        raise InvalidArgument("need a < b and h > 0")
    edges = [a, *[t for t in sorted(breakpoints) if a < t < b], b]
    out = [np.array([a])]
    for lo, hi in zip(edges, edges[1:]):
        n = max(1, math.ceil((hi - lo) / h - 1e-9))
        out.append(np.linspace(lo, hi, n + 1)[1:])
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# per-frequency machinery


def _flat_hat(field_: SpaceTimeField) -> np.ndarray:
    return field_.hat().reshape(len(field_.times), -1, field_.N)


def _unflat(field_like: SpaceTimeField, hat_flat) -> SpaceTimeField:
    shape = (len(field_like.times),) + (field_like.n,) * field_like.d + (field_like.N,)
    return SpaceTimeField.from_hat(field_like.times, field_like.d, field_like.n, field_like.L,
                                   field_like.N, hat_flat.reshape(shape))


def _cell_groups(spec, times):
    """Cells grouped by (coefficient piece, step length)."""
    groups = {}
    for i, (a, b) in enumerate(zip(times, times[1:])):
        groups.setdefault((spec_segment_key(spec, a), round(b - a, 13)), []).append(i)
    return groups


def within_cells(spec, lam, xis, times, fhat, uhat, thetas, principal=False):
    """Exact solution at ``t_i + theta (t_(i+1) - t_i)`` for every cell ``i`` and every theta.

    Returns an array of shape ``(len(thetas), n_cells, K, N)``.
    """
    n_cells = len(times) - 1
    out = np.empty((len(thetas), n_cells) + uhat.shape[1:], dtype=complex)
    for (seg, _), cells in _cell_groups(spec, times).items():
        cells = np.array(cells)
        h = times[cells[0] + 1] - times[cells[0]]
        mat = symbol(spec, times[cells[0]], xis, principal=principal) + lam * np.eye(spec.N)
        u0, f0, f1 = uhat[cells], fhat[cells], fhat[cells + 1]
        for k, theta in enumerate(thetas):
            tau = theta * h
            E, P1, P2 = phi_propagators(tau * mat)
            out[k, cells] = (
                np.einsum("kab,ckb->cka", E, u0)
                + tau * np.einsum("kab,ckb->cka", P1, f0)
                + tau * theta * np.einsum("kab,ckb->cka", P2, f1 - f0)
            )
    return out


def node_derivative(times, values, breakpoints=()) -> np.ndarray:
    """``d/dt`` at the nodes by 5-point differences inside each coefficient piece.

    Centered where possible, one-sided near the ends of a piece. At a
    breakpoint node the right piece is used (coefficients are right-continuous).
    """
    times = np.asarray(times, dtype=float)
    n_t = len(times)
    cuts = [0]
    for b in breakpoints:
        hit = np.nonzero(np.isclose(times, b, rtol=0, atol=1e-12))[0]
        if hit.size and 0 < hit[0] < n_t - 1:
            cuts.append(int(hit[0]))
    cuts = sorted(set(cuts)) + [n_t - 1]
    out = np.empty_like(values)
    for g, (i0, i1) in enumerate(zip(cuts, cuts[1:])):
        width = min(5, i1 - i0 + 1)
        last = g == len(cuts) - 2
        for j in range(i0, i1 + (1 if last else 0)):
            lo = min(max(j - width // 2, i0), i1 - width + 1)
            idx = np.arange(lo, lo + width)
            dt = times[idx] - times[j]
            scale = np.max(np.abs(dt))
            V = np.vander(dt / scale, width, increasing=True).T
            rhs = np.zeros(width)
            rhs[1] = 1.0
            wts = np.linalg.solve(V, rhs) / scale
            out[j] = np.tensordot(wts, values[idx], axes=1)
    return out


def _solve_hat(spec, lam, f: SpaceTimeField, u_start=None, principal=False):
    xis = frequencies(f.d, f.n, f.L).reshape(-1, f.d)
    fhat = _flat_hat(f)
    v0 = None
    if u_start is not None:
        if u_start.geometry != f.geometry:
            raise InvalidArgument("initial field geometry does not match the forcing")
        v0 = u_start.hat().reshape(-1, f.N)
    uhat = propagate_tabulated(spec, xis, f.times, fhat, v0=v0, principal=principal, shift=lam)
    return xis, fhat, uhat


def strong_residual(spec, lam, f: SpaceTimeField, xis, fhat, uhat, principal=False) -> float:
    """Max over interior cells of ``||u' + (lam + A) u - f||_{L^2}`` at cell midpoints, relative to ``max ||f||``.

    ``u'`` is a 5-point central difference of the exact in-cell solution
    with step 1/32 of the cell.
    """
    times = f.times
    if len(times) < 4:
        raise InvalidArgument("need at least three time cells")
    offs, wts = central_weights(1)
    thetas = 0.5 + offs / 32.0
    sub = within_cells(spec, lam, xis, times, fhat, uhat, thetas, principal)
    h = np.diff(times)
    du = np.tensordot(wts, sub, axes=1) / (h[:, None, None] / 32.0)
    mid = sub[len(offs) // 2]
    fmid = 0.5 * (fhat[:-1] + fhat[1:])
    res = np.empty(len(h))
    for (seg, _), cells in _cell_groups(spec, times).items():
        cells = np.array(cells)
        t_mid = times[cells[0]] + 0.5 * h[cells[0]]
        A = symbol(spec, t_mid, xis, principal=principal) + lam * np.eye(spec.N)
        r = du[cells] + np.einsum("kab,ckb->cka", A, mid[cells]) - fmid[cells]
        res[cells] = np.sqrt(np.sum(np.abs(r) ** 2, axis=(1, 2)))
    dv = (f.h / f.n) ** f.d
    fmax = np.sqrt(np.max(np.sum(np.abs(fhat) ** 2, axis=(1, 2))) * dv)
    interior = np.sqrt(res[1:-1] ** 2 * dv)
    return float(np.max(interior) / (fmax if fmax > 0 else 1.0))


# ---------------------------------------------------------------------------
# non-divergence problem


@dataclass
class RegularityReport:
    """Norms of the maximal-regularity estimate in ``L^p(v; L^q(w))``.

    ``u_X1`` is ``||(-Laplace)^m u||``; ``u_W2m`` is the full Sobolev norm of order 2m.
    """

    lam: float
    lam_u: float
    du: float
    u_X1: float
    u_W2m: float
    f_norm: float
    ratio: float
    residual: float
    p: float
    q: float
    v: Optional[dict]
    w: Optional[dict]
    grid: dict

    def to_dict(self) -> dict:
        return asdict(self)


def regularity_norms(spec, lam, u: SpaceTimeField, du_vals, f: SpaceTimeField, p, q, v, w):
    wvals = None
    if w is not None:
        if w.dim != u.d:
            raise InvalidArgument(f"spatial weight has dimension {w.dim}, grid has {u.d}")
        wvals = w(grid_points(u.d, u.n, u.L))
    axes = tuple(range(1, u.d + 1))

    def lp(vals):
        return time_lp(spatial_lq(vals, u.h, u.d, q, wvals), u.times, p, v, "trapezoid")

    xi = frequencies(u.d, u.n, u.L)
    lap = np.sum(xi ** 2, axis=-1) ** spec.m
    x1_vals = np.fft.ifftn(lap[..., None] * u.hat(), axes=axes)
    u_norm = lp(u.values)
    w2m = time_lp(sobolev_lq(u.values, u.L, u.d, q, 2 * spec.m, wvals), u.times, p, v, "trapezoid")
    return lam * u_norm, lp(du_vals), lp(x1_vals), w2m, lp(f.values)


def _check_weights(v, w, d):
    if v is not None and v.dim != 1:
        raise InvalidArgument("the time weight must be one-dimensional")
    if w is not None and w.dim != d:
        raise InvalidArgument(f"the spatial weight must have dimension {d}")


def _check_spec(spec, f):
    if f.d != spec.d or f.N != spec.N:
        raise InvalidArgument(f"forcing has (d, N) = ({f.d}, {f.N}), spec has ({spec.d}, {spec.N})")
    cert = check_legendre_hadamard(spec, sphere_samples=32, time_samples=1)
    if not cert.passed:
        raise PreconditionViolated(f"spec is not Legendre-Hadamard elliptic (kappa_LH={cert.kappa_LH:.3g})")


def solve_nondivergence(
    spec: OperatorSpec,
    lam: float,
    f: SpaceTimeField,
    p: float = 2.0,
    q: float = 2.0,
    v: Optional[WeightSpec] = None,
    w: Optional[WeightSpec] = None,
    window: Optional[tuple] = None,
    lam0: float = LAMBDA0,
    u_start: Optional[GridField] = None,
    principal: bool = False,
):
    """Solve ``u' + (lam + A(t)) u = f`` on the time grid of ``f``.

    With ``u_start=None`` this is the mild solution for a forcing that
    vanishes before the window. Returns ``(u, RegularityReport)``.

    Raises
    ------
    PreconditionViolated
        If ``lam < lam0`` (the estimate is only asserted for ``lam >= lam0``)
        or the spec is not Legendre-Hadamard elliptic.
    """
    if lam < lam0:
        raise PreconditionViolated(
            f"lam={lam} is below lam0={lam0}; the maximal-regularity estimate is only claimed for lam >= lam0"
        )
    if window is not None and (not np.isclose(f.times[0], window[0]) or not np.isclose(f.times[-1], window[1])):
        raise InvalidArgument(f"forcing times span ({f.times[0]}, {f.times[-1]}), not the window {window}")
    _check_spec(spec, f)
    _check_weights(v, w, f.d)
    return _solve_with_report(spec, lam, f, p, q, v, w, u_start, principal)


def _solve_with_report(spec, lam, f, p, q, v, w, u_start, principal):
    xis, fhat, uhat = _solve_hat(spec, lam, f, u_start, principal)
    u = _unflat(f, uhat)
    du_hat = node_derivative(f.times, uhat, spec.breakpoints)
    du = _unflat(f, du_hat)
    residual = strong_residual(spec, lam, f, xis, fhat, uhat, principal)
    lam_u, du_n, x1, w2m, fn = regularity_norms(spec, lam, u, du.values, f, p, q, v, w)
    ratio = (lam_u + du_n + x1) / fn if fn > 0 else (0.0 if lam_u + du_n + x1 == 0 else math.inf)
    report = RegularityReport(
        lam, lam_u, du_n, x1, w2m, fn, ratio, residual, p, q,
        v.describe() if v is not None else None,
        w.describe() if w is not None else None,
        {"d": f.d, "n": f.n, "L": f.L, "N": f.N, "n_times": len(f.times),
         "window": [float(f.times[0]), float(f.times[-1])]},
    )
    return u, report


# ---------------------------------------------------------------------------
# divergence problem


@dataclass
class DivergenceReport:
    """Left and right sides of the divergence-form estimate under two exponent conventions.

    ``homogeneous`` weighs ``||D^alpha u||`` by ``lam^(1-|alpha|/2m)`` and
    ``||f_alpha||`` by ``lam^(|alpha|/2m)``; ``printed`` uses ``lam^(1-|alpha|/m)``
    and ``lam^(|alpha|/m)``.
    """

    lam: float
    scaled_homogeneous: dict
    scaled_printed: dict
    forcing_norms: dict
    lhs_homogeneous: float
    rhs_homogeneous: float
    lhs_printed: float
    rhs_printed: float
    weak_residual: float

    @property
    def ratio_homogeneous(self) -> float:
        return self.lhs_homogeneous / self.rhs_homogeneous if self.rhs_homogeneous > 0 else 0.0

    @property
    def ratio_printed(self) -> float:
        return self.lhs_printed / self.rhs_printed if self.rhs_printed > 0 else 0.0


def _gauss_cells(times, order=4):
    x, wts = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1), 0.5 * wts


def weak_residual(spec, lam, times, xis, uhat_alpha, fhat_alpha, L, modes=2, bumps=(1, 2, 3), principal=False):
    """Weak-form residual of ``u = sum_alpha D^alpha v_alpha`` against ``chi_j(t) e^{i xi x} e_c``.

    With ``D = -i d/dx`` (symmetric) the tested identity is
    ``int -chi' u_hat + chi (lam + A) u_hat - chi sum_alpha xi^alpha f_alpha_hat dt = 0``
    for ``chi_j = sin^2(pi j (t - a)/(b - a))``. Time integrals use 4-point
    Gauss rules inside every cell on the exact in-cell solution. Returns the
    largest residual relative to the sum of the magnitudes of its terms.
    """
    d = xis.shape[-1]
    k_int = np.rint(xis * L / (2 * np.pi)).astype(int)
    sel = np.nonzero(np.max(np.abs(k_int), axis=-1) <= modes)[0]
    xs = xis[sel]
    nodes, gw = _gauss_cells(times)
    a, b = times[0], times[-1]
    h = np.diff(times)
    tq = (times[:-1, None] + nodes[None, :] * h[:, None])  # (cells, q)
    wq = gw[None, :] * h[:, None]
    U = 0
    F = 0
    for alpha, vhat in uhat_alpha.items():
        fh = fhat_alpha[alpha][:, sel]
        sub = within_cells(spec, lam, xs, times, fh, vhat[:, sel], nodes, principal)  # (q, cells, K, N)
        mono = monomial(xs, alpha)[None, None, :, None]
        U = U + mono * sub
        fq = fh[:-1][None] + nodes[:, None, None, None] * (fh[1:] - fh[:-1])[None]
        F = F + mono * fq
    AU = np.empty_like(U)
    for (seg, _), cells in _cell_groups(spec, times).items():
        A = symbol(spec, times[cells[0]], xs, principal=principal) + lam * np.eye(spec.N)
        AU[:, cells] = np.einsum("kab,qckb->qcka", A, U[:, cells])
    worst = 0.0
    for j in bumps:
        s = (tq - a) / (b - a)
        chi = np.sin(np.pi * j * s) ** 2
        dchi = np.pi * j / (b - a) * np.sin(2 * np.pi * j * s)
        wt = wq.T  # (q, cells)
        terms = (-dchi.T[..., None, None] * U, chi.T[..., None, None] * AU, -chi.T[..., None, None] * F)
        total = sum(np.sum(wt[..., None, None] * t, axis=(0, 1)) for t in terms)  # (K, N)
        scale = sum(np.sum(wt[..., None, None] * np.abs(t), axis=(0, 1)) for t in terms)
        mask = scale > 1e-300
        if np.any(mask):
            worst = max(worst, float(np.max(np.abs(total[mask]) / scale[mask])))
    return worst


def solve_divergence(
    spec: OperatorSpec,
    lam: float,
    f_alpha: dict,
    p: float = 2.0,
    q: float = 2.0,
    v: Optional[WeightSpec] = None,
    w: Optional[WeightSpec] = None,
    lam0: float = LAMBDA0,
    principal: bool = False,
):
    """Weak solution of ``u' + (lam + A(t)) u = sum_{|alpha| <= m} D^alpha f_alpha``.

    Solves ``v_alpha' + (lam + A) v_alpha = f_alpha`` for every alpha and sets
    ``u = sum D^alpha v_alpha``. ``f_alpha`` maps every multi-index with
    ``|alpha| <= m`` to a forcing. Returns ``(u, DivergenceReport)``.
    """
    keys = multi_indices_upto(spec.d, spec.m)
    missing = [a for a in keys if a not in f_alpha]
    if missing:
        raise InvalidArgument(f"missing forcing for multi-indices {missing}")
    extra = [a for a in f_alpha if a not in keys]
    if extra:
        raise InvalidArgument(f"unexpected multi-indices {extra}")
    f0 = f_alpha[keys[0]]
    if any(f_alpha[a].geometry != f0.geometry or not np.array_equal(f_alpha[a].times, f0.times) for a in keys):
        raise InvalidArgument("all forcings must share one space-time grid")
    if lam < lam0:
        raise PreconditionViolated(f"lam={lam} is below lam0={lam0}")
    _check_spec(spec, f0)
    _check_weights(v, w, f0.d)

    uhat_alpha, fhat_alpha = {}, {}
    xis = None
    total = 0
    for alpha in keys:
        xis, fhat, vhat = _solve_hat(spec, lam, f_alpha[alpha], None, principal)
        uhat_alpha[alpha], fhat_alpha[alpha] = vhat, fhat
        total = total + monomial(xis, alpha)[None, :, None] * vhat
    u = _unflat(f0, total)

    wvals = None if w is None else w(grid_points(f0.d, f0.n, f0.L))
    xi = frequencies(f0.d, f0.n, f0.L)
    axes = tuple(range(1, f0.d + 1))
    uh = u.hat()

    def lp(vals):
        return time_lp(spatial_lq(vals, f0.h, f0.d, q, wvals), f0.times, p, v, "trapezoid")

    sh, sp, fn = {}, {}, {}
    for alpha in keys:
        a = sum(alpha)
        dn = lp(np.fft.ifftn(monomial(xi, alpha)[..., None] * uh, axes=axes))
        sh[alpha] = lam ** (1 - a / (2 * spec.m)) * dn
        sp[alpha] = lam ** (1 - a / spec.m) * dn
        fn[alpha] = lp(f_alpha[alpha].values)
    rhs_h = sum(lam ** (sum(a) / (2 * spec.m)) * fn[a] for a in keys)
    rhs_p = sum(lam ** (sum(a) / spec.m) * fn[a] for a in keys)
    res = weak_residual(spec, lam, f0.times, xis, uhat_alpha, fhat_alpha, f0.L, principal=principal)
    report = DivergenceReport(lam, sh, sp, fn, sum(sh.values()), rhs_h, sum(sp.values()), rhs_p, res)
    return u, report


# ---------------------------------------------------------------------------
# weighted initial value problem


@dataclass
class IVPReport:
    gamma: float
    p: float
    u_X1: float
    u_W1p: float
    sup_Wm2: float
    trace_times: list
    trace_errors: list
    trace_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def solve_ivp(
    spec: OperatorSpec,
    u0: GridField,
    f: Optional[SpaceTimeField],
    gamma: float,
    p: float,
    T: float,
    h: float = 1e-3,
    q: float = 2.0,
):
    """``u(t) = S(t,0) u0 + int_0^t S(t,s) f(s) ds`` on ``[0, T]`` with the time weight ``t^gamma``.

    Reports ``||u||_{L^p(t^gamma; X1)}``, ``||u||_{W^{1,p}(t^gamma; X0)}``,
    ``sup_t ||u(t)||_{W^{m,2}}`` (a smooth surrogate of the trace space) and
    the decay of ``||u(t) - u0||`` as ``t -> 0`` with its fitted rate.
    """
    if not 0 <= gamma < p - 1:
        raise PreconditionViolated(f"gamma={gamma} is outside [0, p-1) = [0, {p - 1}); t^gamma is then not A_p")
    if u0.d != spec.d or u0.N != spec.N:
        raise InvalidArgument("initial value does not match the spec dimensions")
    if f is None:
        times = aligned_times(0.0, T, h, spec.breakpoints)
        f = SpaceTimeField.zeros(times, u0.d, u0.n, u0.L, u0.N)
    if f.geometry != u0.geometry:
        raise InvalidArgument("forcing and initial value grids differ")
    if not (np.isclose(f.times[0], 0.0) and np.isclose(f.times[-1], T)):
        raise InvalidArgument("forcing must be sampled on [0, T]")
    _, _, uhat = _solve_hat(spec, 0.0, f, u0, principal=False)
    u = _unflat(f, uhat)
    du = _unflat(f, node_derivative(f.times, uhat, spec.breakpoints))
    v = WeightSpec.power(gamma)
    xi = frequencies(u.d, u.n, u.L)
    lap = np.sum(xi ** 2, axis=-1) ** spec.m
    axes = tuple(range(1, u.d + 1))
    x1 = np.fft.ifftn(lap[..., None] * u.hat(), axes=axes)

    def lp(vals):
        return time_lp(spatial_lq(vals, u.h, u.d, q), u.times, p, v, "trapezoid")

    u_x1 = lp(x1)
    u_w1p = lp(u.values) + lp(du.values)
    sup_wm2 = float(np.max(sobolev_lq(u.values, u.L, u.d, 2.0, spec.m)))
    diffs = spatial_lq(u.values - u0.values[None], u.h, u.d, 2.0)
    picks = sorted({int(np.argmin(np.abs(f.times - T * 2.0 ** -k))) for k in range(4, 14)} - {0})
    tt = f.times[picks]
    errs = diffs[picks]
    ok = errs > 0
    rate = float(np.polyfit(np.log(tt[ok]), np.log(errs[ok]), 1)[0]) if ok.sum() >= 2 else math.nan
    return u, IVPReport(gamma, p, u_x1, u_w1p, sup_wm2, tt.tolist(), errs.tolist(), rate)


# ---------------------------------------------------------------------------
# lambda sweep


@dataclass
class SweepTable:
    rows: list
    factor: float

    @property
    def spread(self) -> float:
        ratios = [r["ratio"] for r in self.rows]
        if not ratios:
            return 1.0
        return max(ratios) / min(ratios) if min(ratios) > 0 else math.inf

    @property
    def bounded(self) -> bool:
        return self.spread <= self.factor


def lambda_sweep(spec, lams, f, p=2.0, q=2.0, v=None, w=None, factor: float = 3.0, lam0: float = LAMBDA0) -> SweepTable:
    """Regularity ratio ``R(lam)`` for each ``lam``; bounded when ``max R / min R <= factor``."""
    rows = []
    for lam in lams:
        _, rep = solve_nondivergence(spec, lam, f, p, q, v, w, lam0=lam0)
        rows.append({"lam": lam, "ratio": rep.ratio, "residual": rep.residual})
    return SweepTable(rows, factor)


# ---------------------------------------------------------------------------
# kernel operators


@dataclass(frozen=True)
class Kernel:
    """Scalar kernel ``k(t - s)`` vanishing outside ``support``."""

    name: str
    fn: Callable
    support: tuple

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        lo, hi = self.support
        inside = (tau >= lo) & (tau <= hi)
        return np.where(inside, self.fn(tau), 0.0)


def box_kernel(h: float) -> Kernel:
    """``(2h)^-1`` on ``[-h, h]``."""
    return Kernel(f"box({h})", lambda tau: np.full_like(tau, 0.5 / h), (-h, h))


def one_sided_box_kernel(h: float) -> Kernel:
    """``h^-1`` on ``[0, h]``."""
    return Kernel(f"one_sided_box({h})", lambda tau: np.full_like(tau, 1.0 / h), (0.0, h))


def exponential_kernel(rate: float) -> Kernel:
    """``exp(-rate tau)`` for ``tau >= 0``."""
    return Kernel(f"exponential({rate})", lambda tau: np.exp(-rate * tau), (0.0, math.inf))


def trapezoid_weights(times, i: int) -> np.ndarray:
    """Trapezoid weights of ``[t_0, t_i]`` on the nodes ``t_0..t_i``."""
    c = np.zeros(i + 1)
    if i == 0:
        return c
    dt = np.diff(times[: i + 1])
    c[:-1] += dt / 2
    c[1:] += dt / 2
    return c


def kernel_operator_apply(op: EvolutionOperator, kernel: Kernel, f: SpaceTimeField) -> SpaceTimeField:
    """``(I f)(t_i) = sum_{s_j <= t_i} c_j k(t_i - s_j) T(t_i, s_j) f(s_j)``.

    ``c_j`` are trapezoid weights on ``[t_0, t_i]``; the family is causal,
    so only ``s_j <= t_i`` contribute. Propagated forcings are carried
    forward one step at a time and dropped once they leave the kernel support.
    """
    if f.geometry != op.geometry:
        raise InvalidArgument(f"forcing geometry {f.geometry} does not match {op.geometry}")
    times = f.times
    span = times[-1] - times[0]
    probe = np.linspace(0.0, span, 2001)
    mass = float(trapezoid(np.abs(kernel(probe)), probe))
    if not math.isfinite(mass) or mass <= 0:
        raise InvalidArgument(f"kernel {kernel.name} is not normalizable on the window")
    fhat = _flat_hat(f)
    out = np.zeros_like(fhat)
    stack = np.empty((0,) + fhat.shape[1:], dtype=complex)
    idx = np.empty(0, dtype=int)
    for i, t in enumerate(times):
        if i > 0:
            P = op.matrices(t, times[i - 1])
            stack = np.einsum("kab,jkb->jka", P, stack)
        stack = np.concatenate([stack, fhat[i][None]])
        idx = np.append(idx, i)
        keep = (t - times[idx]) <= kernel.support[1] * (1 + 1e-12)
        stack, idx = stack[keep], idx[keep]
        c = trapezoid_weights(times, i)[idx] * kernel(t - times[idx])
        out[i] = np.tensordot(c, stack, axes=1)
    return _unflat(f, out)


# ---------------------------------------------------------------------------
# square functions


@dataclass
class SquareFunctionReport:
    """Finite-sample lower estimate of the l^2 square-function constant of a family."""

    n_operators: int
    trials: int
    C: float
    quantiles: dict
    description: str = ""
    label: str = "finite-sample lower estimate"


def _magnitude(obj):
    """Pointwise Euclidean magnitudes and the matching cell measures."""
    if isinstance(obj, GridField):
        return np.linalg.norm(obj.values, axis=-1), obj.h ** obj.d
    if isinstance(obj, SpaceTimeField):
        c = trapezoid_weights(obj.times, len(obj.times) - 1)
        shape = (-1,) + (1,) * obj.d
        return np.linalg.norm(obj.values, axis=-1), c.reshape(shape) * obj.h ** obj.d
    raise InvalidArgument(f"unsupported vector type {type(obj).__name__}")


def _square_norm(objs, q):
    acc, meas = 0.0, None
    for o in objs:
        mag, meas = _magnitude(o)
        acc = acc + mag ** 2
    return float(np.sum(meas * acc ** (q / 2)) ** (1 / q))


def square_function_ratio(operators: Sequence[Callable], sampler: Callable, trials: int = 100,
                          rng=None, q: float = 2.0, description: str = "") -> SquareFunctionReport:
    """``max ||(sum |T_n x_n|^2)^(1/2)||_q / ||(sum |x_n|^2)^(1/2)||_q`` over random trials.

    ``sampler(rng)`` returns one vector per operator. Trials with a zero
    denominator are skipped.
    """
    rng = np.random.default_rng(rng)
    ratios = []
    for _ in range(trials):
        xs = sampler(rng)
        if len(xs) != len(operators):
            raise InvalidArgument("sampler must return one vector per operator")
        den = _square_norm(xs, q)
        if den == 0:
            continue
        ratios.append(_square_norm([T(x) for T, x in zip(operators, xs)], q) / den)
    if not ratios:
        return SquareFunctionReport(len(operators), 0, math.nan, {}, description)
    qs = {str(k): float(np.quantile(ratios, k)) for k in (0.5, 0.9, 0.99)}
    return SquareFunctionReport(len(operators), len(ratios), float(max(ratios)), qs, description)
