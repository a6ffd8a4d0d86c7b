"""Sector geometry, resolvent bounds and Mihlin-type constants of resolvent symbols."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgument, PreconditionViolated
from .operator_spec import OperatorSpec, multi_indices, monomial, sphere_points, spectral_norm, symbol
from .symbol_propagator import fd_derivative

CONVENTIONS = ("paper", "homogeneous")


@dataclass(frozen=True)
class SectorGeometry:
    theta0: float
    theta: float
    kappa: float
    b: float
    eps: float
    C_resolvent: float
    overflow: bool
    min_ratio: float
    n_samples: int

    @property
    def inequality_holds(self) -> bool:
        return self.min_ratio >= self.eps * (1 - 1e-12)


def sector_sample(rng, half_angle, n, decades=6):
    """``n`` points of the sector ``|arg z| < half_angle`` with log-uniform moduli."""
    arg = rng.uniform(-half_angle, half_angle, n)
    mod = 10.0 ** rng.uniform(-decades / 2, decades / 2, n)
    return mod * np.exp(1j * arg)


def sector_geometry(theta0, theta, kappa, n_samples=100_000, seed=0) -> SectorGeometry:
    """``b = |cos(theta - theta0)|``, ``eps = sqrt((1 - b)/2)``, ``C = 1/(eps kappa)``.

    Also samples ``lam`` in the sector of half-angle ``pi - theta`` and ``mu``
    in the sector of half-angle ``theta0`` and reports the smallest observed
    ``|lam + mu| / (|lam| + |mu|)``, which should never drop below ``eps``.
    Pairs of equal modulus on the boundary rays are included, since that is
    where the ratio is smallest.
    """
    if not 0 < theta0 < theta < math.pi:
        raise InvalidArgument(f"need 0 < theta0 < theta < pi, got theta0={theta0}, theta={theta}")
    if not kappa > 0:
        raise InvalidArgument("kappa must be positive")
    b = abs(math.cos(theta - theta0))
    eps = math.sqrt(max(1.0 - b, 0.0) / 2)
    with np.errstate(divide="ignore", over="ignore"):
        C = 1.0 / (eps * kappa) if eps * kappa > 0 else math.inf
    overflow = not math.isfinite(C) or C > 1e300

    rng = np.random.default_rng(seed)
    lam = sector_sample(rng, math.pi - theta, n_samples)
    mu = sector_sample(rng, theta0, n_samples)
    edge = np.exp(1j * np.array([math.pi - theta, -(math.pi - theta)]))
    lam = np.concatenate([lam, edge])
    mu = np.concatenate([mu, np.exp(-1j * np.array([theta0, -theta0]))])
    ratio = np.abs(lam + mu) / (np.abs(lam) + np.abs(mu))
    return SectorGeometry(theta0, theta, kappa, b, eps, C, overflow, float(ratio.min()), len(ratio))


def inverse_norm_bound_check(B, r: float, n: int) -> float:
    """Margin ``||B||^n r^(-n-1) - ||B^-1||`` of the inverse-norm observation.

    The margin is nonnegative for normal ``B`` and for ``n >= N - 1`` (from
    ``|det B| >= r^N``). For non-normal ``B`` and small ``n`` it can be
    negative; the value is returned, not raised.
    """
    B = np.asarray(B, dtype=complex)
    if r <= 0 or n < 0:
        raise InvalidArgument("need r > 0 and n >= 0")
    eig = np.linalg.eigvals(B)
    if np.min(np.abs(eig)) < r * (1 - 1e-12):
        raise PreconditionViolated(f"eigenvalue of modulus {np.min(np.abs(eig)):.3g} < r={r}")
    sv = np.linalg.svd(B, compute_uv=False)
    return float(sv[0] ** n * r ** (-n - 1) - 1.0 / sv[-1])


# ---------------------------------------------------------------------------
# resolvent bound


def lambda_rays(theta, decades=4, per_decade=6, center=1.0):
    """Log-spaced moduli on the two boundary rays of the sector of half-angle ``pi - theta`` and on the real axis."""
    mods = center * np.logspace(-decades / 2, decades / 2, decades * per_decade + 1)
    phi = math.pi - theta
    return np.concatenate([mods * np.exp(1j * a) for a in (-phi, 0.0, phi)])


def xi_rays(d, radii=None, n_directions=16):
    """Log-spaced radii times fixed sphere directions (0 excluded)."""
    radii = np.logspace(-2, 2, 41) if radii is None else np.asarray(radii, dtype=float)
    dirs = sphere_points(d, n_directions)
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)


@dataclass
class ResolventScan:
    C_observed: float
    bound: float
    passed: bool
    worst: tuple = ()
    singular: Optional[tuple] = None


def resolvent_bound_scan(
    spec: OperatorSpec,
    kappa: float,
    theta0: float,
    theta: float,
    lam_grid=None,
    xi_grid=None,
    time_samples: int = 2,
) -> ResolventScan:
    """Sup of ``||(A_#(t, xi) + lam)^-1|| (|xi|^2m + |lam|)`` over the grids.

    The norm of the inverse is ``1/sigma_min``. A singular point gives an
    infinite constant and is recorded in ``singular``.
    """
    geo = sector_geometry(theta0, theta, kappa, n_samples=1)
    lam = lambda_rays(theta) if lam_grid is None else np.asarray(lam_grid, dtype=complex)
    xi = xi_rays(spec.d) if xi_grid is None else np.asarray(xi_grid, dtype=float)
    if lam.size == 0 or xi.size == 0:
        raise InvalidArgument("grids must be nonempty")
    weight = np.linalg.norm(xi, axis=-1)[None, :] ** (2 * spec.m) + np.abs(lam)[:, None]
    eye = np.eye(spec.N)
    best, worst = 0.0, ()
    for t in spec.segment_times(time_samples):
        A = principal_symbol_stack(spec, t, xi)
        mats = A[None] + lam[:, None, None, None] * eye
        smin = np.linalg.svd(mats, compute_uv=False)[..., -1]
        if np.any(smin == 0):
            i, j = np.argwhere(smin == 0)[0]
            return ResolventScan(math.inf, geo.C_resolvent, False, (complex(lam[i]), tuple(xi[j]), t),
                                 (complex(lam[i]), tuple(xi[j])))
        vals = weight / smin
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        if vals[i, j] > best:
            best, worst = float(vals[i, j]), (complex(lam[i]), tuple(xi[j]), float(t))
    return ResolventScan(best, geo.C_resolvent, best <= geo.C_resolvent * (1 + 1e-6), worst)


def principal_symbol_stack(spec, t, xi):
    return symbol(spec, t, xi, principal=True)


# ---------------------------------------------------------------------------
# Mihlin constants


def exponent(beta, m, convention):
    if convention == "paper":
        return 1 - sum(beta) / m
    if convention == "homogeneous":
        return 1 - sum(beta) / (2 * m)
    raise InvalidArgument(f"unknown convention {convention!r}; use one of {CONVENTIONS}")


def resolvent_multiplier(spec, lam, beta, convention, t=0.0):
    """``M(xi) = lam^e(beta) xi^beta (lam + A_#(t, xi))^-1`` as a vectorized callable."""
    e = exponent(beta, spec.m, convention)
    scale = complex(lam) ** e
    eye = np.eye(spec.N)

    def M(xi):
        xi = np.asarray(xi, dtype=float)
        R = np.linalg.inv(lam * eye + symbol(spec, t, xi))
        return scale * monomial(xi, beta)[..., None, None] * R

    return M


def resolvent_derivative(spec, lam, alpha, xi, t=0.0):
    """Exact ``D^alpha (lam + A_#)^-1`` from ``D^a R = -sum C(a, e) D^(a-e) R D^e A R`` (e != 0)."""
    import itertools

    cache = {}
    eye = np.eye(spec.N)

    def R(a):
        if a in cache:
            return cache[a]
        if sum(a) == 0:
            out = np.linalg.inv(lam * eye + symbol(spec, t, xi))
        else:
            out = 0
            for e in itertools.product(*[range(k + 1) for k in a]):
                if sum(e) == 0:
                    continue
                coef = math.prod(math.comb(k, j) for k, j in zip(a, e))
                rest = tuple(k - j for k, j in zip(a, e))
                out = out - coef * R(rest) @ symbol(spec, t, xi, deriv=e) @ R(tuple(0 for _ in a))
        cache[a] = out
        return out

    return R(tuple(alpha))


@dataclass
class MihlinTable:
    convention: str
    beta: tuple
    lam: complex
    constants: dict
    refined: dict
    deltas: dict = field(default_factory=dict)

    @property
    def stable(self) -> bool:
        return all(v <= 0.05 for v in self.deltas.values())

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.constants.values())

    def to_json(self) -> str:
        return json.dumps({
            "convention": self.convention,
            "beta": list(self.beta),
            "lambda": [self.lam.real, self.lam.imag],
            "table": [[k, v] for k, v in sorted(self.constants.items())],
            "refined": [[k, v] for k, v in sorted(self.refined.items())],
            "refinement_deltas": [[k, v] for k, v in sorted(self.deltas.items())],
        })


def _mihlin_sup(M, d, order, xi):
    radius = np.linalg.norm(xi, axis=-1)
    h = (1e-3 * radius)[:, None]
    best = 0.0
    for alpha in multi_indices(d, order):
        vals = spectral_norm(fd_derivative(M, xi, alpha, h)) * radius ** order
        best = max(best, float(np.max(vals)))
    return best


def mihlin_constant_scan(
    spec: OperatorSpec,
    lam,
    beta,
    max_order: int = 3,
    convention: str = "homogeneous",
    t: float = 0.0,
    radii=None,
    n_directions: int = 8,
) -> MihlinTable:
    """Sup of ``|xi|^|alpha| ||D^alpha M(xi)||`` for each order ``|alpha| <= max_order``.

    Derivatives are central differences with step ``1e-3 |xi|`` (scale
    invariant) and one Richardson level. The scan is repeated on a grid with
    geometric midpoints inserted between radii; ``deltas`` holds the relative
    change per order.
    """
    beta = tuple(int(b) for b in beta)
    limit = spec.m if convention == "paper" else 2 * spec.m
    if sum(beta) > limit:
        raise InvalidArgument(f"|beta| = {sum(beta)} exceeds {limit} for the {convention} convention")
    radii = np.logspace(-3, 3, 61) if radii is None else np.asarray(radii, dtype=float)
    if np.any(radii <= 0):
        raise InvalidArgument("radii must be positive")
    fine = np.sort(np.concatenate([radii, np.sqrt(radii[:-1] * radii[1:])]))
    M = resolvent_multiplier(spec, complex(lam), beta, convention, t)
    dirs = sphere_points(spec.d, n_directions)
    consts, refined, deltas = {}, {}, {}
    for order in range(max_order + 1):
        coarse_xi = (radii[:, None, None] * dirs[None]).reshape(-1, spec.d)
        fine_xi = (fine[:, None, None] * dirs[None]).reshape(-1, spec.d)
        c0 = _mihlin_sup(M, spec.d, order, coarse_xi)
        c1 = _mihlin_sup(M, spec.d, order, fine_xi)
        consts[order], refined[order] = c0, c1
        deltas[order] = abs(c1 - c0) / max(c1, 1e-300)
    return MihlinTable(convention, beta, complex(lam), consts, refined, deltas)
