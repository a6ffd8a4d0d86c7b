"""The evolution family ``S(t, s)`` on a periodic grid, assembled frequency by frequency.

Fields live on ``[-L/2, L/2)^d`` sampled at cell centers. The Fourier
convention is ``D = -i d/dx``, so ``D^alpha`` acts as the multiplier
``xi^alpha`` with ``xi_k = 2 pi k / L``.
"""

from __future__ import annotations

import json
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .errors import InvalidArgument
from .operator_spec import OperatorSpec, monomial, spectral_norm, symbol
from .symbol_propagator import propagate_homogeneous


@dataclass(eq=False)
class GridField:
    """``N``-component complex field on an ``n^d`` periodic grid of period ``L``."""

    d: int
    n: int
    L: float
    N: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        shape = (self.n,) * self.d + (self.N,)
        if self.values.shape != shape:
            raise InvalidArgument(f"values must have shape {shape}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("field values must be finite")

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def geometry(self) -> tuple:
        return (self.d, self.n, float(self.L), self.N)

    @classmethod
    def zeros(cls, d, n, L, N) -> "GridField":
        return cls(d, n, L, N, np.zeros((n,) * d + (N,), dtype=complex))

    @classmethod
    def from_function(cls, d, n, L, N, fn) -> "GridField":
        """Sample ``fn(x)`` where ``x`` has shape ``(n, ..., n, d)``; ``fn`` returns ``(..., N)``."""
        x = grid_points(d, n, L)
        return cls(d, n, L, N, np.asarray(fn(x), dtype=complex).reshape((n,) * d + (N,)))

    @classmethod
    def mode(cls, d, n, L, N, k, amplitude=None) -> "GridField":
        """Single Fourier mode ``amplitude * exp(i <xi_k, x>)``."""
        amp = np.ones(N) if amplitude is None else np.asarray(amplitude, dtype=complex)
        xi = 2 * np.pi * np.asarray(k, dtype=float) / L
        return cls.from_function(d, n, L, N, lambda x: np.exp(1j * x @ xi)[..., None] * amp)

    @classmethod
    def random_bandlimited(cls, d, n, L, N, rng=None, band=None) -> "GridField":
        """Random field whose spectrum lives in ``|k|_inf <= band`` (default ``n/4``)."""
        rng = np.random.default_rng(rng)
        band = n // 4 if band is None else band
        shape = (n,) * d + (N,)
        hat = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        k = integer_frequencies(d, n)
        hat[np.max(np.abs(k), axis=-1) > band] = 0
        return cls.from_hat(d, n, L, N, hat)

    @classmethod
    def from_hat(cls, d, n, L, N, hat) -> "GridField":
        axes = tuple(range(d))
        return cls(d, n, L, N, np.fft.ifftn(hat, axes=axes))

    def hat(self) -> np.ndarray:
        return np.fft.fftn(self.values, axes=tuple(range(self.d)))

    def norm(self) -> float:
        """Discrete L^2 norm ``(h^d sum |u|^2)^(1/2)``."""
        return float(math.sqrt(self.h ** self.d * np.sum(np.abs(self.values) ** 2)))

    def spectral_norm(self) -> float:
        """The same norm computed from the Fourier coefficients (Parseval)."""
        return float(math.sqrt(self.h ** self.d / self.n ** self.d * np.sum(np.abs(self.hat()) ** 2)))

    def like(self, values) -> "GridField":
        return GridField(self.d, self.n, self.L, self.N, values)

    def __sub__(self, other: "GridField") -> "GridField":
        _check_geometry(self.geometry, other)
        return self.like(self.values - other.values)

    def __add__(self, other: "GridField") -> "GridField":
        _check_geometry(self.geometry, other)
        return self.like(self.values + other.values)

    def __mul__(self, c) -> "GridField":
        return self.like(c * self.values)

    __rmul__ = __mul__

    def save(self, path) -> None:
        """Flat little-endian complex64 data plus a JSON sidecar ``<path>.json``."""
        path = Path(path)
        self.values.astype("<c8").tofile(path)
        meta = {"d": self.d, "n": self.n, "L": float(self.L), "N": self.N}
        path.with_name(path.name + ".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path) -> "GridField":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        data = np.fromfile(path, dtype="<c8").astype(complex)
        shape = (meta["n"],) * meta["d"] + (meta["N"],)
        if data.size != math.prod(shape):
            raise InvalidArgument(f"{path} holds {data.size} values, sidecar expects {shape}")
        return cls(meta["d"], meta["n"], meta["L"], meta["N"], data.reshape(shape))


@dataclass(eq=False)
class SpaceTimeField:
    """Grid fields sampled at increasing times; ``values`` has shape ``(n_t, n, ..., n, N)``."""

    times: np.ndarray
    d: int
    n: int
    L: float
    N: int
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.times.ndim != 1 or np.any(np.diff(self.times) <= 0):
            raise InvalidArgument("times must be strictly increasing")
        shape = (len(self.times),) + (self.n,) * self.d + (self.N,)
        if self.values.shape != shape:
            raise InvalidArgument(f"values must have shape {shape}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("field values must be finite")

    @property
    def geometry(self) -> tuple:
        return (self.d, self.n, float(self.L), self.N)

    @property
    def h(self) -> float:
        return self.L / self.n

    @classmethod
    def from_function(cls, times, d, n, L, N, fn) -> "SpaceTimeField":
        """Sample ``fn(t, x)`` (``x`` of shape ``(n, ..., n, d)``, result ``(..., N)``)."""
        x = grid_points(d, n, L)
        vals = np.stack([np.asarray(fn(t, x), dtype=complex).reshape((n,) * d + (N,)) for t in times])
        return cls(times, d, n, L, N, vals)

    @classmethod
    def from_hat(cls, times, d, n, L, N, hat) -> "SpaceTimeField":
        return cls(times, d, n, L, N, np.fft.ifftn(hat, axes=tuple(range(1, d + 1))))

    @classmethod
    def zeros(cls, times, d, n, L, N) -> "SpaceTimeField":
        return cls(times, d, n, L, N, np.zeros((len(times),) + (n,) * d + (N,), dtype=complex))

    @classmethod
    def random_bandlimited(cls, times, d, n, L, N, rng=None, band=None, time_modes=3) -> "SpaceTimeField":
        """Random spatial spectrum in ``|k|_inf <= band`` with smooth random time profiles."""
        rng = np.random.default_rng(rng)
        times = np.asarray(times, dtype=float)
        band = n // 4 if band is None else band
        shape = (n,) * d + (N,)
        k = np.max(np.abs(integer_frequencies(d, n)), axis=-1)
        tau = (times - times[0]) / (times[-1] - times[0])
        hat = np.zeros((len(times),) + shape, dtype=complex)
        for j in range(time_modes):
            c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            c[k > band] = 0
            hat += np.cos(np.pi * j * tau)[(...,) + (None,) * (d + 1)] * c[None]
        return cls.from_hat(times, d, n, L, N, hat)

    def hat(self) -> np.ndarray:
        return np.fft.fftn(self.values, axes=tuple(range(1, self.d + 1)))

    def fields(self) -> list:
        return [GridField(self.d, self.n, self.L, self.N, v) for v in self.values]

    def like(self, values) -> "SpaceTimeField":
        return SpaceTimeField(self.times, self.d, self.n, self.L, self.N, values)

    def norm(self) -> float:
        """Discrete L^2 norm over space-time with trapezoid weights in time."""
        inner = self.h ** self.d * np.sum(np.abs(self.values) ** 2, axis=tuple(range(1, self.d + 2)))
        return float(math.sqrt(trapezoid(inner, self.times)))


def grid_points(d, n, L) -> np.ndarray:
    """Cell centers ``-L/2 + (j + 1/2) L/n`` on every axis, shape ``(n, ..., n, d)``."""
    x1 = -L / 2 + (np.arange(n) + 0.5) * (L / n)
    return np.stack(np.meshgrid(*([x1] * d), indexing="ij"), axis=-1)


def integer_frequencies(d, n) -> np.ndarray:
    k1 = np.fft.fftfreq(n, 1.0 / n)
    return np.stack(np.meshgrid(*([k1] * d), indexing="ij"), axis=-1)


def frequencies(d, n, L) -> np.ndarray:
    """``xi_k = 2 pi k / L`` in FFT order, shape ``(n, ..., n, d)``."""
    return 2 * np.pi * integer_frequencies(d, n) / L


def spectral_derivative(g: GridField, alpha) -> GridField:
    """``D^alpha g`` as the multiplier ``xi^alpha``."""
    if sum(alpha) == 0:
        return g
    xi = frequencies(g.d, g.n, g.L)
    return GridField.from_hat(g.d, g.n, g.L, g.N, monomial(xi, tuple(alpha))[..., None] * g.hat())


def sobolev_norm(g: GridField, k: int) -> float:
    """``sum_{|alpha| <= k} ||D^alpha g||`` with spectral derivatives."""
    from .operator_spec import multi_indices_upto

    return float(sum(spectral_derivative(g, a).norm() for a in multi_indices_upto(g.d, k)))


def _check_geometry(geometry, g):
    if g.geometry != geometry:
        raise InvalidArgument(f"field geometry {g.geometry} does not match {geometry}")


# ---------------------------------------------------------------------------


class EvolutionOperator:
    """``S(t, s)`` on a periodic grid, with an LRU cache of per-frequency matrices.

    ``shift`` adds ``shift * I`` to the symbol; ``principal=False`` uses the full
    symbol including lower-order terms.
    """

    def __init__(self, spec: OperatorSpec, n: int, L: float = 2 * np.pi, principal: bool = True,
                 shift: float = 0.0, cache_size: int = 64):
        if n < 2 or n & (n - 1):
            raise InvalidArgument("n must be a power of two >= 2")
        self.spec = spec
        self.n = n
        self.L = float(L)
        self.principal = principal
        self.shift = shift
        self.cache_size = cache_size
        self.xi = frequencies(spec.d, n, L).reshape(-1, spec.d)
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def geometry(self) -> tuple:
        return (self.spec.d, self.n, self.L, self.spec.N)

    def matrices(self, t: float, s: float) -> np.ndarray:
        """``v(t, s, xi_k)`` for every grid frequency, shape ``(n^d, N, N)``."""
        key = (float(t), float(s))
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                self.hits += 1
                return self._cache[key]
            self.misses += 1
            if t == s:
                out = np.broadcast_to(np.eye(self.spec.N, dtype=complex), (len(self.xi), self.spec.N, self.spec.N))
            else:
                out = propagate_homogeneous(self.spec, self.xi, s, t, principal=self.principal, shift=self.shift)
            out = np.array(out)
            out.flags.writeable = False
            if self.cache_size > 0:
                self._cache[key] = out
                while len(self._cache) > self.cache_size:
                    self._cache.popitem(last=False)
            return out

    def symbol_stack(self, t: float) -> np.ndarray:
        A = symbol(self.spec, t, self.xi, principal=self.principal)
        return A + self.shift * np.eye(self.spec.N) if self.shift else A

    def apply_multiplier(self, mats, g: GridField) -> GridField:
        _check_geometry(self.geometry, g)
        hat = g.hat().reshape(-1, self.spec.N)
        out = np.einsum("kij,kj->ki", mats, hat)
        return GridField.from_hat(g.d, g.n, g.L, g.N, out.reshape(g.values.shape))

    def apply_A(self, t: float, g: GridField) -> GridField:
        return self.apply_multiplier(self.symbol_stack(t), g)


def apply_S(op: EvolutionOperator, t: float, s: float, g: GridField) -> GridField:
    """``u = S(t, s) g`` with ``u_hat(xi_k) = v(t, s, xi_k) g_hat(xi_k)``."""
    if t < s:
        raise InvalidArgument(f"need s <= t, got s={s}, t={t}")
    _check_geometry(op.geometry, g)
    if t == s:
        return g.like(g.values.copy())
    return op.apply_multiplier(op.matrices(t, s), g)


def check_cocycle(op, s, r, t, g) -> float:
    if not s <= r <= t:
        raise InvalidArgument("need s <= r <= t")
    lhs = apply_S(op, t, r, apply_S(op, r, s, g))
    return (lhs - apply_S(op, t, s, g)).norm() / g.norm()


def check_derivative_commutation(op, t, s, alpha, g, max_order: int = 4) -> float:
    if sum(alpha) > max_order:
        raise InvalidArgument(f"|alpha| = {sum(alpha)} exceeds max_order={max_order}")
    lhs = spectral_derivative(apply_S(op, t, s, g), alpha)
    rhs = apply_S(op, t, s, spectral_derivative(g, alpha))
    return (lhs - rhs).norm() / g.norm()


# ---------------------------------------------------------------------------
# decay


@dataclass
class DecayFit:
    """Power-law fit of the frequency-sup proxy for ``||D^alpha S(t, s)||``.

    The proxy is exact on the discrete L^2 grid for normal families and an
    upper bound otherwise.
    """

    slope: float
    C: float
    taus: np.ndarray
    norms: np.ndarray
    used: np.ndarray
    cutoff_binding: bool
    inconclusive: bool


def multiplier_sup(op, alpha, t, s):
    """``max_k ||xi_k^alpha v(t, s, xi_k)||`` and the maximizing frequency index."""
    mats = op.matrices(t, s)
    vals = np.abs(monomial(op.xi, tuple(alpha))) * spectral_norm(mats)
    j = int(np.argmax(vals))
    return float(vals[j]), j


def decay_exponent_fit(op, alpha, s, t_grid) -> DecayFit:
    """Least-squares slope of ``log ||D^alpha S(t, s)||`` against ``log(t - s)``.

    Grid times whose maximizing frequency sits at the lattice edge
    (``|k|_inf = n/2``) or at the smallest nonzero lattice frequency are
    excluded from the fit; the first case sets ``cutoff_binding``. ``C`` is
    ``max ||D^alpha S|| (t - s)^(|alpha|/2m)`` over the points used.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    taus = t_grid - s
    if np.any(taus <= 0):
        raise InvalidArgument("t_grid must lie strictly after s")
    kk = np.max(np.abs(integer_frequencies(op.spec.d, op.n).reshape(-1, op.spec.d)), axis=-1)
    norms, used = [], []
    binding = False
    for t in t_grid:
        val, j = multiplier_sup(op, alpha, t, s)
        norms.append(val)
        edge = kk[j] >= op.n // 2
        floor = sum(alpha) > 0 and kk[j] <= 1
        binding |= bool(edge)
        used.append(not edge and not floor)
    norms, used = np.array(norms), np.array(used)
    order = sum(alpha) / (2 * op.spec.m)
    if used.sum() < 3:
        return DecayFit(math.nan, math.nan, taus, norms, used, binding, True)
    slope = float(np.polyfit(np.log(taus[used]), np.log(norms[used]), 1)[0])
    C = float(np.max(norms[used] * taus[used] ** order))
    return DecayFit(slope, C, taus, norms, used, binding, False)


# ---------------------------------------------------------------------------
# generator relations


@dataclass
class GeneratorReport:
    forward: list
    backward: list
    forward_order: float
    backward_order: float
    one_sided: bool
    steps: list = field(default_factory=list)


def _near_breakpoint(spec, t, h):
    return any(abs(t - b) < h * (1 + 1e-12) for b in spec.breakpoints)


def check_generator_relations(op, g, s, t, h, halvings: int = 2) -> GeneratorReport:
    """Residuals of ``d/dt S(t,s) g = -A(t) S(t,s) g`` and ``d/ds S(t,s) g = S(t,s) A(s) g``.

    Central differences with steps ``h, h/2, ...``; when ``t`` or ``s`` is
    within a step of a coefficient breakpoint, right-sided differences are
    used and ``one_sided`` is set (first order expected). Residuals are
    relative to ``||g||``.
    """
    if not s < t:
        raise InvalidArgument("need s < t")
    steps = [h / 2 ** j for j in range(halvings + 1)]
    one_sided = _near_breakpoint(op.spec, t, h) or _near_breakpoint(op.spec, s, h)
    gn = g.norm()
    fwd, bwd = [], []
    u = apply_S(op, t, s, g)
    Au = op.apply_A(t, u)
    SAg = apply_S(op, t, s, op.apply_A(s, g))
    for k in steps:
        if one_sided:
            dt = (apply_S(op, t + k, s, g) - u) * (1 / k)
            ds = (apply_S(op, t, s + k, g) - u) * (1 / k)
        else:
            dt = (apply_S(op, t + k, s, g) - apply_S(op, t - k, s, g)) * (1 / (2 * k))
            ds = (apply_S(op, t, s + k, g) - apply_S(op, t, s - k, g)) * (1 / (2 * k))
        fwd.append((dt + Au).norm() / gn)
        bwd.append((ds - SAg).norm() / gn)

    def order(res):
        if res[-2] == 0 or res[-1] == 0:
            return math.inf
        return float(math.log2(res[-2] / res[-1]))

    return GeneratorReport(fwd, bwd, order(fwd), order(bwd), one_sided, steps)


# ---------------------------------------------------------------------------
# duality and commutation


def check_adjoint_duality(spec: OperatorSpec, s, t, xi, t0=None) -> float:
    """Max over ``xi`` of ``||v_S(t, s, xi)^* - w(t0; t0 - s, t0 - t, xi)||``.

    ``w`` propagates the reflected adjoint symbol ``A_#(t0 - tau, xi)^*``;
    ``t0`` defaults to ``t``.
    """
    t0 = t if t0 is None else t0
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    v = propagate_homogeneous(spec, xi, s, t)
    w = propagate_homogeneous(spec.adjoint_reflected(t0), xi, t0 - t, t0 - s)
    return float(np.max(spectral_norm(np.conj(np.swapaxes(v, -1, -2)) - w)))


def heat_semigroup_multiplier(op, delta, r):
    """``exp(-r delta |xi|^2m)`` on the grid frequencies."""
    return np.exp(-r * delta * np.sum(op.xi ** 2, axis=-1) ** op.spec.m)


def check_commutation_with_A0(op, delta, r, t, s, g) -> float:
    """``||T(t,s) e^(-r A0) g - e^(-r A0) T(t,s) g|| / ||g||`` with ``A0 = delta (-Laplace)^m``.

    ``T`` is the family generated by ``A(t) - A0``.
    """
    if delta <= 0 or r < 0:
        raise InvalidArgument("need delta > 0 and r >= 0")
    if r == 0:
        return 0.0  # e^(-0 A0) is the identity
    T = EvolutionOperator(op.spec.shifted(delta), op.n, op.L, op.principal, op.shift)
    mult = heat_semigroup_multiplier(op, delta, r)[:, None, None] * np.eye(op.spec.N)
    lhs = apply_S(T, t, s, T.apply_multiplier(mult, g))
    rhs = T.apply_multiplier(mult, apply_S(T, t, s, g))
    return (lhs - rhs).norm() / g.norm()


# ---------------------------------------------------------------------------
# reference time stepper


def implicit_euler(op: EvolutionOperator, s, t, g: GridField, h=1e-4, richardson=True) -> GridField:
    """Implicit Euler for ``u' + A(t) u = 0`` on the grid, steps aligned to breakpoints.

    With ``richardson`` the results at steps ``h`` and ``h/2`` are combined
    as ``2 u_(h/2) - u_h``, which is second order.
    """
    def run(step):
        hat = g.hat().reshape(-1, op.spec.N)
        edges = [s, *[b for b in op.spec.breakpoints if s < b < t], t]
        eye = np.eye(op.spec.N)
        for a, b in zip(edges, edges[1:]):
            n_steps = max(1, round((b - a) / step))
            k = (b - a) / n_steps
            inv = np.linalg.inv(eye + k * op.symbol_stack(a))
            for _ in range(n_steps):
                hat = np.einsum("kij,kj->ki", inv, hat)
        return hat

    hat = run(h)
    if richardson:
        hat = 2 * run(h / 2) - hat
    return GridField.from_hat(g.d, g.n, g.L, g.N, hat.reshape(g.values.shape))
