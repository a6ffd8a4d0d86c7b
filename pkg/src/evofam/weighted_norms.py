"""Muckenhoupt weights, dyadic A_p constants and weighted mixed Lebesgue-Sobolev norms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidWeight
from .evolution_family import GridField, SpaceTimeField, frequencies, grid_points
from .operator_spec import monomial, multi_indices_upto

MAX_CELLS = 1 << 24


@dataclass(frozen=True, eq=False)
class WeightSpec:
    """A positive weight on ``R^dim``.

    ``kind="power"`` is ``scale * |x - center|^gamma``; ``kind="tabulated"``
    is piecewise constant on a uniform grid of ``values`` over ``[lo, hi)^dim``.
    Declaring ``intended_p`` checks that a power weight lies in the A_p range
    ``-dim < gamma < dim (p - 1)``.
    """

    kind: str = "power"
    gamma: float = 0.0
    center: float = 0.0
    dim: int = 1
    scale: float = 1.0
    values: Optional[np.ndarray] = None
    lo: float = -1.0
    hi: float = 1.0
    intended_p: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("power", "tabulated"):
            raise InvalidArgument(f"unknown weight kind {self.kind!r}")
        if self.scale <= 0:
            raise InvalidWeight("weight scale must be positive")
        if self.kind == "power" and self.intended_p is not None:
            p = self.intended_p
            if not -self.dim < self.gamma < self.dim * (p - 1):
                raise InvalidWeight(f"|x|^{self.gamma} is not an A_{p} weight in dimension {self.dim}")
        if self.kind == "tabulated":
            vals = np.asarray(self.values, dtype=float)
            if vals.ndim != self.dim:
                raise InvalidArgument("tabulated values must have one axis per dimension")
            if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise InvalidWeight("tabulated weight values must be positive and finite")
            object.__setattr__(self, "values", vals)

    @classmethod
    def power(cls, gamma, dim=1, center=0.0, p=None) -> "WeightSpec":
        return cls("power", float(gamma), center, dim, intended_p=p)

    @classmethod
    def constant(cls, c=1.0, dim=1) -> "WeightSpec":
        return cls("power", 0.0, 0.0, dim, scale=float(c))

    @classmethod
    def tabulated(cls, values, lo=-1.0, hi=1.0) -> "WeightSpec":
        vals = np.asarray(values, dtype=float)
        return cls("tabulated", dim=vals.ndim, values=vals, lo=lo, hi=hi)

    def describe(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "gamma": self.gamma, "dim": self.dim, "scale": self.scale}
        return {"kind": "tabulated", "dim": self.dim, "shape": list(self.values.shape)}

    def __call__(self, x) -> np.ndarray:
        """Evaluate at points ``x`` of shape ``(..., dim)`` (or ``(...)`` when ``dim == 1``)."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if x.shape[-1] != self.dim:
            raise InvalidArgument(f"points have dimension {x.shape[-1]}, weight has {self.dim}")
        if self.kind == "power":
            r = np.linalg.norm(x - self.center, axis=-1)
            with np.errstate(divide="ignore"):
                out = self.scale * r ** self.gamma
        else:
            n = np.array(self.values.shape)
            idx = np.floor((x - self.lo) / (self.hi - self.lo) * n).astype(int)
            if np.any(idx < 0) or np.any(idx >= n):
                raise InvalidArgument("tabulated weight evaluated outside its domain")
            out = self.values[tuple(np.moveaxis(idx, -1, 0))]
        if not np.all(np.isfinite(out)) or np.any(out <= 0):
            raise InvalidWeight("weight is nonpositive or infinite at an evaluation point")
        return out


# ---------------------------------------------------------------------------
# A_p constants


@dataclass
class ApEstimate:
    """Dyadic A_p scan. ``per_level[l]`` is the estimate using levels ``0..l``.

    Only dyadic cubes are scanned, so the value bounds the true constant from below.
    """

    value: float
    per_level: list
    p: float
    stable: bool
    diverging: bool

    def __float__(self) -> float:
        return self.value


def _block_mean(arr, block):
    d = arr.ndim
    shape = []
    for s in arr.shape:
        shape += [s // block, block]
    return arr.reshape(shape).mean(axis=tuple(range(1, 2 * d, 2)))


def _scan_level(w: WeightSpec, p, level, lo, hi):
    cells = 2 ** (level + 1)
    if cells ** w.dim > MAX_CELLS:
        raise InvalidArgument(f"level {level} needs {cells ** w.dim} cells in dimension {w.dim}")
    x1 = lo + (np.arange(cells) + 0.5) * (hi - lo) / cells
    x = np.stack(np.meshgrid(*([x1] * w.dim), indexing="ij"), axis=-1)
    vals = w(x)
    dual = vals ** (-1.0 / (p - 1))
    best = 0.0
    for sub in range(level + 1):
        block = cells >> sub
        prod = _block_mean(vals, block) * _block_mean(dual, block) ** (p - 1)
        best = max(best, float(prod.max()))
    return best


def ap_constant(w: WeightSpec, p: float, dyadic_levels: int, base_interval=(-1.0, 1.0),
                stability_tol: float = 0.02) -> ApEstimate:
    """``max (avg_Q w)(avg_Q w^(-1/(p-1)))^(p-1)`` over dyadic cubes ``Q`` of the base cube.

    The scan at level ``l`` samples ``w`` at the centers of ``2^(l+1)`` cells
    per axis (two cells per smallest cube), so the quadrature resolves finer
    as levels are added; the estimate is the running maximum over levels and
    hence nondecreasing. ``stable`` means the last level raised it by at most
    ``stability_tol`` relative; otherwise ``diverging`` is set.
    """
    if not p > 1:
        raise InvalidArgument("p must be > 1")
    if dyadic_levels < 1:
        raise InvalidArgument("need at least one dyadic level")
    lo, hi = map(float, base_interval)
    per_level, best = [], 0.0
    for level in range(dyadic_levels + 1):
        best = max(best, _scan_level(w, p, level, lo, hi))
        per_level.append(best)
    rel = (per_level[-1] - per_level[-2]) / per_level[-2]
    stable = rel <= stability_tol
    return ApEstimate(best, per_level, p, stable, not stable)


# ---------------------------------------------------------------------------
# weighted norms


def spatial_lq(values, h: float, d: int, q: float, wvals=None) -> np.ndarray:
    """``(h^d sum_x w(x) |u(x)|^q)^(1/q)`` over the trailing ``d`` grid axes and component axis."""
    mag = np.linalg.norm(values, axis=-1) ** q
    if wvals is not None:
        mag = mag * wvals
    axes = tuple(range(mag.ndim - d, mag.ndim))
    return (np.sum(mag, axis=axes) * h ** d) ** (1 / q)


def time_lp(inner, times, p: float, v: Optional[WeightSpec] = None, rule: str = "midpoint") -> float:
    """Outer ``L^p(v)`` sum of per-time inner norms.

    ``midpoint``: samples at midpoints of uniform cells, weighted by ``v``
    there. ``trapezoid``: samples at cell edges, cell weight ``v`` at the
    midpoint, p-th powers of the two ends averaged.
    """
    times = np.asarray(times, dtype=float)
    inner = np.asarray(inner, dtype=float)
    if len(times) < 2:
        raise InvalidArgument("need at least two time samples")
    dt = np.diff(times)
    if rule == "midpoint":
        if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
            raise InvalidArgument("midpoint rule needs uniform times")
        weights = np.full(len(times), dt[0])
        if v is not None:
            weights = weights * v(times)
        return float(np.sum(weights * inner ** p) ** (1 / p))
    if rule == "trapezoid":
        cell = dt if v is None else dt * v(0.5 * (times[:-1] + times[1:]))
        powers = inner ** p
        return float(np.sum(cell * 0.5 * (powers[:-1] + powers[1:])) ** (1 / p))
    raise InvalidArgument(f"unknown rule {rule!r}")


def sobolev_lq(values, L: float, d: int, q: float, k: int, wvals=None) -> np.ndarray:
    """``sum_{|alpha| <= k} ||D^alpha u||_{L^q(w)}`` for a stack of fields ``(..., n, ..., n, N)``."""
    n = values.shape[-2]
    axes = tuple(range(values.ndim - 1 - d, values.ndim - 1))
    hat = np.fft.fftn(values, axes=axes)
    xi = frequencies(d, n, L)
    total = 0.0
    for alpha in multi_indices_upto(d, k):
        vals = values if sum(alpha) == 0 else np.fft.ifftn(monomial(xi, alpha)[..., None] * hat, axes=axes)
        total = total + spatial_lq(vals, L / n, d, q, wvals)
    return total


def spatial_weight_values(w: Optional[WeightSpec], g: GridField):
    if w is None:
        return None
    if w.dim != g.d:
        raise InvalidArgument(f"spatial weight has dimension {w.dim}, grid has {g.d}")
    return w(grid_points(g.d, g.n, g.L))


def weighted_norm(
    data,
    p: float,
    q: float,
    v: Optional[WeightSpec] = None,
    w: Optional[WeightSpec] = None,
    k: int = 0,
    times: Sequence[float] = None,
    rule: str = "midpoint",
) -> float:
    """Discrete ``L^p(v; W^{k,q}(w))`` norm of a time-indexed family.

    ``data`` is a list of GridFields, a SpaceTimeField, or an array of
    scalar/vector values (inner norm: Euclidean length). The inner norm is
    ``sum_{|alpha| <= k} (h^d sum_x w(x) |D^alpha u(x)|^q)^(1/q)`` at cell
    centers with spectral derivatives; the outer sum follows ``time_lp``.
    """
    if isinstance(data, SpaceTimeField):
        times = data.times if times is None else times
        data = data.fields()
    if times is None:
        raise InvalidArgument("times are required")
    if len(data) != len(times):
        raise InvalidArgument(f"{len(data)} samples for {len(times)} times")
    if isinstance(data, np.ndarray) or not isinstance(data[0], GridField):
        arr = np.asarray(data, dtype=complex)
        inner = np.abs(arr) if arr.ndim == 1 else np.linalg.norm(arr.reshape(len(arr), -1), axis=-1)
    else:
        g0 = data[0]
        if any(g.geometry != g0.geometry for g in data):
            raise InvalidArgument("all samples must share one grid")
        wvals = spatial_weight_values(w, g0)
        stack = np.stack([g.values for g in data])
        inner = sobolev_lq(stack, g0.L, g0.d, q, k, wvals)
    return time_lp(inner, times, p, v, rule)


def norm_row(p, q, gamma, delta, value) -> dict:
    return {"p": p, "q": q, "gamma": gamma, "delta": delta, "value": value}


def rows_to_json(rows) -> str:
    return json.dumps(list(rows))


# ---------------------------------------------------------------------------


@dataclass
class ConsistencyReport:
    """Measured constants along a family ordered by A_p constant.

    Only the monotone direction of A_p-consistency can be probed numerically.
    """

    ap_constants: list
    measured: list
    monotone: bool
    violations: list = field(default_factory=list)


def consistency_probe(bound_fn: Callable, weights: Sequence[WeightSpec], p: float,
                      levels: int = 8, base_interval=(-1.0, 1.0)) -> ConsistencyReport:
    """Check that ``bound_fn(w)`` is nondecreasing along weights sorted by ``[w]_{A_p}``."""
    if len(weights) < 3:
        raise InvalidArgument("need at least three weights")
    aps = [ap_constant(w, p, levels, base_interval).value for w in weights]
    order = np.argsort(aps)
    sorted_aps = [aps[i] for i in order]
    if any(b <= a for a, b in zip(sorted_aps, sorted_aps[1:])):
        raise InvalidArgument("weights must have strictly ordered A_p constants")
    measured = [float(bound_fn(weights[i])) for i in order]
    violations = [i for i in range(len(measured) - 1) if measured[i + 1] < measured[i]]
    return ConsistencyReport(sorted_aps, measured, not violations, violations)
