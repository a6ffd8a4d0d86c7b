"""Per-frequency solution of the symbol ODE ``v' + A_#(t, xi) v = f``.

Propagation is exact on every constant piece of the coefficients: the
homogeneous flow is a time-ordered product of matrix exponentials, later
times multiplying on the left. Forcing integrals use adaptive Simpson
quadrature, or closed-form phi-functions when the forcing is tabulated and
linearly interpolated in time.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import DivergenceError, InvalidArgument, NumericFailure
from .expm import expm
from .operator_spec import OperatorSpec, multi_indices_upto, spectral_norm, symbol

FD_REL_STEP = 1e-3
SIMPSON_TOL = 1e-10


# ---------------------------------------------------------------------------
# time segmentation


def constant_pieces(spec: OperatorSpec, s: float, t: float) -> list:
    """Split ``[s, t]`` at coefficient breakpoints into ``(a, b)`` pieces of constant symbol."""
    if t < s:
        raise InvalidArgument(f"need s <= t, got s={s}, t={t}")
    cuts = [b for b in spec.breakpoints if s < b < t]
    edges = [s, *cuts, t]
    return [(a, b) for a, b in zip(edges, edges[1:]) if b > a]


def _piece_symbol(spec, a, b, xi, principal, shift):
    """Symbol on the open piece ``(a, b)``, evaluated at its left end (right-continuous paths)."""
    mat = symbol(spec, a, xi, principal=principal)
    if shift:
        mat = mat + shift * np.eye(spec.N)
    return mat


def _apply(mat, vec):
    if vec.ndim == mat.ndim - 1:
        return np.einsum("...ij,...j->...i", mat, vec)
    return mat @ vec


# ---------------------------------------------------------------------------
# homogeneous flow


def propagate_homogeneous(
    spec: OperatorSpec,
    xi,
    s: float,
    t: float,
    M=None,
    principal: bool = True,
    shift: float = 0.0,
) -> np.ndarray:
    """``v(t, xi)`` for ``v' + (shift + A(r, xi)) v = 0``, ``v(s) = M``.

    ``xi`` may be a single frequency ``(d,)`` or a stack ``(..., d)``;
    ``M`` defaults to the identity and may be a matrix or a vector (per
    frequency or broadcast). ``principal=False`` propagates the full symbol.
    """
    xi = np.asarray(xi, dtype=float)
    batch = xi.shape[:-1]
    if M is None:
        M = np.broadcast_to(np.eye(spec.N, dtype=complex), batch + (spec.N, spec.N))
    v = np.array(M, dtype=complex)
    for k, (a, b) in enumerate(constant_pieces(spec, s, t)):
        mat = _piece_symbol(spec, a, b, xi, principal, shift)
        try:
            step = expm(-(b - a) * mat)
        except NumericFailure as exc:
            raise NumericFailure(str(exc), segment=k, interval=(a, b)) from exc
        v = _apply(step, v)
    return v


def step_propagators(spec, xi, s, t, principal=True, shift=0.0):
    """Per-piece exponentials ``[(a, b, exp(-(b-a) A))]`` over ``[s, t]``."""
    out = []
    for a, b in constant_pieces(spec, s, t):
        mat = _piece_symbol(spec, a, b, xi, principal, shift)
        out.append((a, b, expm(-(b - a) * mat)))
    return out


# ---------------------------------------------------------------------------
# forcing


@dataclass(frozen=True, eq=False)
class ForcingPath:
    """Forcing ``f(t, xi)`` of the symbol ODE.

    ``smoothness`` is one of ``"zero"``, ``"smooth"``, ``"piecewise_smooth"``
    or ``"piecewise_linear"``; ``breakpoints`` lists the times where a
    piecewise forcing may jump. Tabulated forcings (``times``/``values``) are
    linearly interpolated and integrated in closed form.
    """

    func: Optional[Callable] = None
    smoothness: str = "smooth"
    l2_bound: Optional[float] = None
    breakpoints: tuple = ()
    times: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    @classmethod
    def zero(cls) -> "ForcingPath":
        return cls(None, "zero", 0.0)

    @classmethod
    def constant(cls, value) -> "ForcingPath":
        value = np.asarray(value, dtype=complex)
        return cls(lambda t, xi: value, "smooth")

    @classmethod
    def tabulated(cls, times, values) -> "ForcingPath":
        """Samples ``values[i] = f(times[i])`` for a single frequency, linear in between."""
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=complex)
        if times.ndim != 1 or len(times) != len(values) or np.any(np.diff(times) <= 0):
            raise InvalidArgument("tabulated forcing needs increasing times matching the values")

        def func(t, xi):
            i = int(np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2))
            w = (t - times[i]) / (times[i + 1] - times[i])
            return (1 - w) * values[i] + w * values[i + 1]

        return cls(func, "piecewise_linear", None, tuple(times), times, values)

    @property
    def is_zero(self) -> bool:
        return self.smoothness == "zero" or self.func is None

    def __call__(self, t, xi):
        if self.is_zero:
            return 0.0
        out = np.asarray(self.func(t, xi), dtype=complex)
        if not np.all(np.isfinite(out)):
            raise NumericFailure("forcing returned non-finite values", t=t)
        return out


def adaptive_simpson(fn, a, b, tol=SIMPSON_TOL, max_depth=40):
    """Adaptive Simpson quadrature of an array-valued function (max-abs error control)."""
    fa, fm, fb = fn(a), fn(0.5 * (a + b)), fn(b)
    whole = (b - a) / 6 * (fa + 4 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = fn(lm), fn(rm)
        left = (m - a) / 6 * (fa + 4 * flm + fm)
        right = (b - m) / 6 * (fm + 4 * frm + fb)
        err = np.max(np.abs(left + right - whole))
        if err <= 15 * tol:
            return left + right + (left + right - whole) / 15
        if depth >= max_depth:
            raise NumericFailure("adaptive Simpson did not converge", interval=(a, b), error=float(err))
        return recurse(a, m, fa, flm, fm, left, tol / 2, depth + 1) + recurse(
            m, b, fm, frm, fb, right, tol / 2, depth + 1
        )

    return recurse(a, b, fa, fm, fb, whole, tol, 0)


# ---------------------------------------------------------------------------
# forced propagation


@dataclass(eq=False)
class PropagationResult:
    """Symbol solution ``v(t_k, xi)`` on a time grid starting at ``s``."""

    xi: np.ndarray
    s: float
    times: np.ndarray
    matrices: list
    M: np.ndarray
    m: int = 1
    forcing: ForcingPath = field(default_factory=ForcingPath.zero)
    breakpoints: tuple = ()

    def to_csv(self) -> str:
        """Rows ``t, re_00, im_00, re_01, ...`` in row-major entry order."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        first = np.atleast_2d(self.matrices[0])
        n_rows, n_cols = first.shape
        header = ["t"]
        for i in range(n_rows):
            for j in range(n_cols):
                header += [f"re_{i}{j}", f"im_{i}{j}"]
        writer.writerow(header)
        for t, mat in zip(self.times, self.matrices):
            row = [repr(float(t))]
            for z in np.atleast_2d(mat).ravel():
                row += [repr(float(z.real)), repr(float(z.imag))]
            writer.writerow(row)
        return buf.getvalue()


def _forced_piece(mat, a, b, v, forcing, xi, tol):
    """Variation of constants on one constant piece."""
    v_new = _apply(expm(-(b - a) * mat), v)
    if forcing.is_zero:
        return v_new
    if forcing.smoothness == "piecewise_linear" and forcing.times is not None:
        fa, fb = forcing(a, xi), forcing(b, xi)
        E, P1, P2 = phi_propagators((b - a) * mat)
        return v_new + (b - a) * (_apply(P1, fa) + _apply(P2, fb - fa))

    def integrand(r):
        return _apply(expm(-(b - r) * mat), forcing(r, xi) * np.ones_like(v))

    return v_new + adaptive_simpson(integrand, a, b, tol)


def propagate_forced(
    spec: OperatorSpec,
    xi,
    s: float,
    t_grid: Sequence[float],
    M=None,
    f: Optional[ForcingPath] = None,
    principal: bool = True,
    shift: float = 0.0,
    tol: float = SIMPSON_TOL,
) -> PropagationResult:
    """Solve ``v' + (shift + A(t, xi)) v = f(t, xi)``, ``v(s) = M``, reporting ``v`` on ``t_grid``."""
    xi = np.asarray(xi, dtype=float)
    f = ForcingPath.zero() if f is None else f
    times = np.asarray(t_grid, dtype=float)
    if times.ndim != 1 or len(times) == 0 or times[0] != s or np.any(np.diff(times) < 0):
        raise InvalidArgument("t_grid must be nondecreasing and start at s")
    if M is None:
        M = np.eye(spec.N, dtype=complex)
    v = np.array(M, dtype=complex)
    out = [v.copy()]
    cuts = tuple(sorted(set(spec.breakpoints) | set(f.breakpoints)))
    for t0, t1 in zip(times, times[1:]):
        edges = [t0, *[c for c in cuts if t0 < c < t1], t1]
        for a, b in zip(edges, edges[1:]):
            if b <= a:
                continue
            mat = _piece_symbol(spec, a, b, xi, principal, shift)
            v = _forced_piece(mat, a, b, v, f, xi, tol)
        out.append(v.copy())
    return PropagationResult(xi, float(s), times, out, np.array(M, dtype=complex), spec.m, f, spec.breakpoints)


def phi_propagators(hmat):
    """``exp(-H)``, ``phi_1(-H)`` and ``phi_2(-H)`` for a (stack of) matrices ``H``.

    Read off the exponential of the block matrix ``[[-H, I, 0], [0, 0, I], [0, 0, 0]]``.
    """
    hmat = np.asarray(hmat)
    n = hmat.shape[-1]
    big = np.zeros(hmat.shape[:-2] + (3 * n, 3 * n), dtype=complex)
    big[..., :n, :n] = -hmat
    big[..., :n, n:2 * n] = np.eye(n)
    big[..., n:2 * n, 2 * n:] = np.eye(n)
    e = expm(big)
    return e[..., :n, :n], e[..., :n, n:2 * n], e[..., :n, 2 * n:]


def propagate_tabulated(
    spec: OperatorSpec,
    xis,
    times,
    values,
    v0=None,
    principal: bool = True,
    shift: float = 0.0,
) -> np.ndarray:
    """Batched exact solve for forcing linear between the nodes ``times``.

    ``values`` has shape ``(n_t, K, N)`` (one forcing vector per frequency);
    the return value has the same shape. Nodes must include every coefficient
    breakpoint inside the window. Per-piece propagators are reused across
    steps of equal length.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=complex)
    xis = np.asarray(xis, dtype=float)
    inside = [b for b in spec.breakpoints if times[0] < b < times[-1]]
    missing = [b for b in inside if not np.any(np.isclose(times, b, rtol=0, atol=1e-12))]
    if missing:
        raise InvalidArgument(f"time nodes must include coefficient breakpoints {missing}")
    out = np.empty_like(values)
    v = np.zeros(values.shape[1:], dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    out[0] = v
    cache = {}
    for n in range(len(times) - 1):
        a, b = times[n], times[n + 1]
        h = b - a
        seg = (spec_segment_key(spec, a), round(h, 14))
        if seg not in cache:
            mat = _piece_symbol(spec, a, b, xis, principal, shift)
            cache[seg] = phi_propagators(h * mat)
        E, P1, P2 = cache[seg]
        f0, f1 = values[n], values[n + 1]
        v = _apply(E, v) + h * (_apply(P1, f0) + _apply(P2, f1 - f0))
        out[n + 1] = v
    return out


def spec_segment_key(spec: OperatorSpec, t: float) -> int:
    """Index of the constant piece containing ``t`` (right-continuous)."""
    return int(np.searchsorted(np.asarray(spec.breakpoints), t, side="right"))


# ---------------------------------------------------------------------------
# Gronwall envelope


def gronwall_envelope_margin(result: PropagationResult, kappa: float, eps: float = None) -> float:
    """Minimum over the grid of (energy envelope) - ``||v(t, xi)||^2``.

    The envelope is ``exp(2(eps-kappa)|xi|^2m (t-s)) ||M||^2`` plus, for a
    nonzero forcing, ``(1/2eps) int_s^t exp(2(eps-kappa)|xi|^2m (t-r)) |xi|^-2m ||f(r)||^2 dr``.
    ``eps`` defaults to ``kappa / 2``; ``eps = 0`` requires zero forcing.
    A nonnegative margin means the estimate holds on the grid.
    """
    eps = kappa / 2 if eps is None else eps
    if not 0 <= eps < kappa:
        raise InvalidArgument(f"need 0 <= eps < kappa, got eps={eps}, kappa={kappa}")
    forced = not result.forcing.is_zero
    if forced and eps == 0:
        raise InvalidArgument("eps = 0 is only allowed for zero forcing")
    xi2m = float(np.linalg.norm(result.xi)) ** (2 * result.m)
    rate = 2 * (eps - kappa) * xi2m
    m0 = float(spectral_norm(np.atleast_2d(result.M))) ** 2
    margins = []
    for t, v in zip(result.times, result.matrices):
        rhs = math.exp(rate * (t - result.s)) * m0
        if forced and t > result.s and xi2m > 0:
            def g(r):
                fr = np.atleast_2d(result.forcing(r, result.xi))
                return math.exp(rate * (t - r)) * float(spectral_norm(fr)) ** 2
            pts = [b for b in (*result.breakpoints, *result.forcing.breakpoints) if result.s < b < t]
            val, _ = integrate.quad(g, result.s, t, points=pts[:50] or None, limit=200,
                                    epsabs=1e-14, epsrel=1e-12)
            rhs += val / (2 * eps * xi2m)
        margins.append(rhs - float(spectral_norm(np.atleast_2d(v))) ** 2)
    return float(min(margins))


# ---------------------------------------------------------------------------
# Picard iteration


@dataclass(frozen=True)
class PicardConfig:
    """Constants of the fixed-point iteration in the weighted sup norm ``sup e^(-lam(t-s)) ||u(t)||``."""

    K1: float
    K2: float = 1.0
    lam: Optional[float] = None
    max_iterations: int = 500
    tolerance: float = 1e-12
    nodes_per_cell: int = 8
    cell_width: float = 0.05
    p: float = 2.0

    def __post_init__(self):
        lam = self.K1 + 1.0 if self.lam is None else float(self.lam)
        if lam <= self.K1:
            raise InvalidArgument(f"need lam > K1, got lam={lam}, K1={self.K1}")
        object.__setattr__(self, "lam", lam)


@dataclass
class PicardResult:
    times: np.ndarray
    values: np.ndarray
    factors: list
    iterations: int
    converged: bool
    measured_factor: float
    bound_constant: float
    weighted_sup: float

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.values[i]


def _vec_norm(x) -> float:
    x = np.asarray(x)
    if x.ndim >= 2:
        return float(spectral_norm(x))
    return float(np.linalg.norm(x))


def _collocation(k: int):
    x, w = np.polynomial.legendre.leggauss(k)
    tau = 0.5 * (x + 1)
    w = 0.5 * w
    V = tau[:, None] ** np.arange(k)[None, :]
    integ = tau[:, None] ** (np.arange(k)[None, :] + 1) / (np.arange(k)[None, :] + 1)
    S = integ @ np.linalg.inv(V)
    return tau, w, S


def picard_solve(
    Q: Callable,
    u0,
    f: Optional[Callable],
    s: float,
    T: float,
    cfg: PicardConfig,
    breakpoints: Sequence[float] = (),
) -> PicardResult:
    """Fixed point of ``u(t) = u0 + int_s^t Q(r, u(r)) + f(r) dr`` on ``[s, T]``.

    Iterates are represented on Gauss-Legendre nodes inside cells aligned
    with ``breakpoints``; integrals use the exact polynomial integration
    matrix of each cell. Records the contraction factor of every iteration
    in the weighted sup norm. Iteration stops once the increment is below
    ``tolerance`` in both the weighted and the plain sup norm.

    Raises
    ------
    DivergenceError
        If the factor is >= 1 on three consecutive iterations.
    """
    u0 = np.asarray(u0, dtype=complex)
    edges = [s, *[b for b in sorted(breakpoints) if s < b < T], T]
    cells = []
    for a, b in zip(edges, edges[1:]):
        n = max(1, math.ceil((b - a) / cfg.cell_width))
        cells += [(a + (b - a) * i / n, a + (b - a) * (i + 1) / n) for i in range(n)]
    tau, w, S = _collocation(cfg.nodes_per_cell)
    k = len(tau)

    node_t = np.array([a + (b - a) * tau for a, b in cells])  # (cells, k)
    widths = np.array([b - a for a, b in cells])
    out_times = np.concatenate([[s], np.concatenate([np.append(nt, b) for nt, (a, b) in zip(node_t, cells)])])
    weight = np.exp(-cfg.lam * (out_times - s))

    fvals = np.zeros((len(cells), k) + u0.shape, dtype=complex)
    if f is not None:
        for c in range(len(cells)):
            for j in range(k):
                fvals[c, j] = f(node_t[c, j])

    def sweep(U_nodes):
        g = np.empty_like(U_nodes)
        for c in range(len(cells)):
            for j in range(k):
                g[c, j] = Q(node_t[c, j], U_nodes[c, j])
        g = g + fvals
        # integral from the cell start to each node, and over each whole cell
        partial = np.einsum("jl,cl...->cj...", S, g) * widths.reshape((-1, 1) + (1,) * u0.ndim)
        whole = np.einsum("l,cl...->c...", w, g) * widths.reshape((-1,) + (1,) * u0.ndim)
        start = np.concatenate([np.zeros((1,) + u0.shape, dtype=complex), np.cumsum(whole, axis=0)[:-1]])
        new_nodes = u0 + start[:, None] + partial
        ends = u0 + np.cumsum(whole, axis=0)
        path = [u0]
        for c in range(len(cells)):
            path.extend(new_nodes[c])
            path.append(ends[c])
        return new_nodes, np.array(path)

    def enorm(path):
        return float(max(wt * _vec_norm(x) for wt, x in zip(weight, path)))

    U = np.broadcast_to(u0, (len(cells), k) + u0.shape).astype(complex)
    path = np.broadcast_to(u0, (len(out_times),) + u0.shape).astype(complex)
    factors, prev_dist, bad_run = [], None, 0
    converged = False
    measured = 0.0
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        U, new_path = sweep(U)
        dist = enorm(new_path - path)
        scale = max(1.0, enorm(new_path))
        # the weighted norm hides late-time error by exp(lam (T - s)); also require the plain increment to settle
        plain = float(max(_vec_norm(x) for x in new_path - path))
        plain_scale = max(1.0, float(max(_vec_norm(x) for x in new_path)))
        path = new_path
        if prev_dist is not None and prev_dist > 0:
            fac = dist / prev_dist
            factors.append(fac)
            if prev_dist > 1e-11 * scale:
                measured = max(measured, fac)
                bad_run = bad_run + 1 if fac >= 1 else 0
                if bad_run >= 3:
                    raise DivergenceError("Picard iteration is not contracting", factors=factors[-3:])
        prev_dist = dist
        if dist <= cfg.tolerance * scale and plain <= cfg.tolerance * plain_scale:
            converged = True
            break

    fnorm = 0.0
    if f is not None:
        fn = np.array([[_vec_norm(fvals[c, j]) for j in range(k)] for c in range(len(cells))])
        fnorm = float((np.sum(fn ** cfg.p * w[None, :] * widths[:, None])) ** (1 / cfg.p))
    wsup = enorm(path)
    bound = wsup / (1 + _vec_norm(u0) + fnorm)
    return PicardResult(out_times, path, factors, it, converged, measured, bound, wsup)


# ---------------------------------------------------------------------------
# frequency derivatives


def central_weights(order: int, accuracy: int = 4):
    """Offsets and weights of the central stencil for the ``order``-th derivative."""
    p = (order + 1) // 2 - 1 + accuracy // 2
    offsets = np.arange(-p, p + 1)
    V = np.vander(offsets, increasing=True).T.astype(float)
    rhs = np.zeros(len(offsets))
    rhs[order] = math.factorial(order)
    return offsets, np.linalg.solve(V, rhs)


def fd_derivative(F: Callable, x, gamma, h):
    """Tensor-product central differences (4th order) plus one Richardson level.

    ``x`` is a point ``(d,)`` or a stack ``(..., d)``; ``h`` holds per-coordinate
    steps broadcastable to ``x``. ``F`` maps a stack of points to a stack of
    values. Returns ``D^gamma F(x)``.
    """
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    d = x.shape[-1]
    if sum(gamma) == 0:
        return F(x)

    def stencil(hh):
        pts = [(np.zeros_like(x), np.ones(x.shape[:-1]))]
        for j, g in enumerate(gamma):
            if g == 0:
                continue
            offs, wts = central_weights(g)
            unit = np.eye(d)[j]
            pts = [
                (shift + o * hh[..., j:j + 1] * unit, c * wt / hh[..., j] ** g)
                for shift, c in pts
                for o, wt in zip(offs, wts)
                if wt != 0
            ]
        total = 0
        for shift, c in pts:
            val = np.asarray(F(x + shift))
            total = total + np.reshape(c, c.shape + (1,) * (val.ndim - c.ndim)) * val
        return total

    coarse, fine = stencil(h), stencil(h / 2)
    return (16 * fine - coarse) / 15


def _fd_step(xi, rel_step):
    xi = np.asarray(xi, dtype=float)
    nrm = float(np.linalg.norm(xi))
    if nrm == 0:
        raise InvalidArgument("frequency derivatives need xi != 0")
    h = rel_step * max(nrm, 1.0)
    if h < 1e-8 * nrm or np.any(xi + h == xi):
        raise InvalidArgument("finite-difference step underflows relative to |xi|")
    return np.full(len(xi), h)


@dataclass
class SymbolDerivative:
    value: np.ndarray
    residual: Optional[float] = None


def _v_at(spec, s, t, M, f, principal=True):
    def F(x):
        if f is None or f.is_zero:
            return propagate_homogeneous(spec, x, s, t, M, principal)
        return propagate_forced(spec, x, s, [s, t], M, f, principal).matrices[-1]
    return F


def symbol_derivative(
    spec: OperatorSpec,
    xi,
    gamma,
    s: float,
    t: float,
    M=None,
    f: Optional[ForcingPath] = None,
    max_order: int = 4,
    rel_step: float = FD_REL_STEP,
    check_residual: bool = False,
    residual_points: int = 8,
) -> SymbolDerivative:
    """``D^gamma_xi v(t, xi)`` by central differences with Richardson extrapolation.

    With ``check_residual`` also measures how well the differentiated path
    solves ``w' + A_# w = -sum C(gamma, e1) D^e1 A_# D^e2 v + D^gamma f``
    (``e1 + e2 = gamma``, ``e2 != gamma``) on ``residual_points`` interior
    times, reporting the sup of the residual norm.
    """
    gamma = tuple(int(g) for g in gamma)
    if len(gamma) != spec.d:
        raise InvalidArgument(f"gamma must have length d={spec.d}")
    if sum(gamma) > max_order:
        raise InvalidArgument(f"|gamma| = {sum(gamma)} exceeds max_order={max_order}")
    xi = np.asarray(xi, dtype=float)
    if sum(gamma) == 0:
        value = _v_at(spec, s, t, M, f)(xi)
        return SymbolDerivative(value, 0.0 if check_residual else None)
    h = _fd_step(xi, rel_step)
    value = fd_derivative(_v_at(spec, s, t, M, f), xi, gamma, h)
    res = None
    if check_residual:
        res = leibniz_residual(spec, xi, gamma, s, t, M, f, h, residual_points)
    return SymbolDerivative(value, res)


def _sub_indices(gamma):
    ranges = [range(g + 1) for g in gamma]
    import itertools

    return [tuple(e) for e in itertools.product(*ranges)]


def leibniz_residual(spec, xi, gamma, s, t, M, f, h, n_points=8):
    """Sup over interior times of the ODE residual of ``D^gamma v``.

    Time derivatives use a 4th-order central stencil of width ``dt`` kept
    inside one constant piece.
    """
    gamma = tuple(gamma)
    dt = 1e-3 * (t - s)
    bps = spec.breakpoints
    candidates = s + (t - s) * (np.arange(1, n_points + 1) / (n_points + 1))
    taus = [c for c in candidates if all(abs(c - b) > 3 * dt for b in bps)]
    offs, wts = central_weights(1)
    worst = 0.0
    for tau in taus:
        w_stencil = [fd_derivative(_v_at(spec, s, tau + o * dt, M, f), xi, gamma, h) for o in offs]
        dw = sum(c * w for c, w in zip(wts, w_stencil)) / dt
        w_tau = w_stencil[len(offs) // 2]
        A = symbol(spec, tau, xi)
        forcing = np.zeros_like(w_tau)
        for eta1 in _sub_indices(gamma):
            if sum(eta1) == 0:
                continue
            eta2 = tuple(g - e for g, e in zip(gamma, eta1))
            coef = math.prod(math.comb(g, e) for g, e in zip(gamma, eta1))
            dA = symbol(spec, tau, xi, deriv=eta1)
            dv = fd_derivative(_v_at(spec, s, tau, M, f), xi, eta2, h)
            forcing = forcing - coef * (dA @ dv)
        if f is not None and not f.is_zero:
            forcing = forcing + fd_derivative(lambda x: f(tau, x), xi, gamma, h)
        worst = max(worst, float(spectral_norm(dw + A @ w_tau - forcing)))
    return worst


# ---------------------------------------------------------------------------
# decay scan


@dataclass
class ScanReport:
    """Sup of a scaled quantity over a grid and over one refinement of it."""

    constant: float
    refined_constant: float
    relative_change: float
    stable: bool
    verified: bool
    argmax: tuple = ()

    def to_dict(self) -> dict:
        return {
            "constant": self.constant,
            "refined_constant": self.refined_constant,
            "relative_change": self.relative_change,
            "stable": self.stable,
            "verified": self.verified,
        }


def refine_rays(xi_grid) -> np.ndarray:
    """Insert geometric midpoints between consecutive radii along each direction."""
    xi_grid = np.asarray(xi_grid, dtype=float)
    radii = np.linalg.norm(xi_grid, axis=-1)
    dirs = np.round(xi_grid / radii[:, None], 12)
    out = [xi_grid]
    for d in np.unique(dirs, axis=0):
        mask = np.all(dirs == d, axis=-1)
        r = np.sort(radii[mask])
        mids = np.sqrt(r[:-1] * r[1:])
        out.append(mids[:, None] * d[None, :])
    return np.concatenate(out)


def refine_times(s, t_grid) -> np.ndarray:
    tt = np.sort(np.asarray(t_grid, dtype=float))
    pos = tt[tt > s]
    mids = s + np.sqrt((pos[:-1] - s) * (pos[1:] - s))
    return np.sort(np.concatenate([tt, mids]))


def _decay_sup(spec, gamma, k, xi_grid, t_grid, s, M):
    best, arg = 0.0, ()
    order = sum(gamma)
    radii = np.linalg.norm(xi_grid, axis=-1)
    for t in t_grid:
        if t <= s and k > 0:
            continue
        if order == 0:
            vals = spectral_norm(propagate_homogeneous(spec, xi_grid, s, t, M))
        else:
            vals = np.array([
                float(spectral_norm(symbol_derivative(spec, x, gamma, s, t, M).value)) for x in xi_grid
            ])
        scaled = vals * radii ** (order + 2 * spec.m * k) * (t - s) ** k
        j = int(np.argmax(scaled))
        if scaled[j] > best:
            best, arg = float(scaled[j]), (float(t), tuple(xi_grid[j]))
    return best, arg


def mihlin_decay_scan(spec: OperatorSpec, gamma, k: int, xi_grid, t_grid, s: float, M=None) -> ScanReport:
    """Estimate ``sup ||D^gamma v(t, xi)|| |xi|^(|gamma| + 2mk) (t-s)^k`` and its stability.

    Stable means within 5% after one refinement of both grids; a change
    beyond a factor 2 marks the scan as not verified.
    """
    if k < 0:
        raise InvalidArgument("k must be >= 0")
    xi_grid = np.asarray(xi_grid, dtype=float)
    if np.any(np.linalg.norm(xi_grid, axis=-1) == 0):
        raise InvalidArgument("xi_grid must exclude 0")
    c0, arg = _decay_sup(spec, tuple(gamma), k, xi_grid, t_grid, s, M)
    c1, arg1 = _decay_sup(spec, tuple(gamma), k, refine_rays(xi_grid), refine_times(s, t_grid), s, M)
    rel = abs(c1 - c0) / max(c0, 1e-300)
    ratio = max(c0, c1) / max(min(c0, c1), 1e-300)
    return ScanReport(c0, c1, rel, rel <= 0.05, bool(np.isfinite(c1)) and ratio <= 2.0, arg1 or arg)
