"""A small corpus of elliptic operators with known Legendre-Hadamard constants."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .operator_spec import (
    CoefficientPath,
    OperatorSpec,
    check_legendre_hadamard,
    heat_spec,
    noncommuting_example,
)


@dataclass(frozen=True, eq=False)
class CorpusEntry:
    name: str
    spec: OperatorSpec
    kappa: float  # exact Legendre-Hadamard constant

    def sector(self, sphere_samples: int = 256):
        """``(kappa, theta0, theta)`` for resolvent checks.

        ``theta0`` bounds the numerical-range angle ``arccos(kappa/K)`` with
        a 0.01 rad margin; ``kappa`` is capped at 1 so that
        ``|lam| + kappa |xi|^2m >= kappa (|lam| + |xi|^2m)``.
        """
        cert = check_legendre_hadamard(self.spec, sphere_samples, time_samples=2)
        k = min(self.kappa, 1.0)
        bound = cert.symbol_bound
        theta0 = math.acos(min(self.kappa / bound, 1.0)) + 0.01
        theta = max(3 * math.pi / 4, 0.5 * (theta0 + math.pi))
        return k, theta0, theta


def _accretive(rng, N, kappa, spread=1.0):
    """Random matrix whose Hermitian part has smallest eigenvalue exactly ``kappa``."""
    G = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    H = G @ G.conj().T
    H = H - np.linalg.eigvalsh(H)[0] * np.eye(N) + kappa * np.eye(N)
    S = spread * (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N)))
    return H + 0.5 * (S - S.conj().T)


def random_spec(seed: int = 7, N: int = 3, kappa: float = 0.4) -> OperatorSpec:
    """``d = 1`` system with two constant pieces, each of Legendre-Hadamard constant ``kappa``."""
    rng = np.random.default_rng(seed)
    segs = np.stack([_accretive(rng, N, kappa) for _ in range(2)])
    return OperatorSpec(1, 1, N, {((1,), (1,)): CoefficientPath((0.5,), segs)})


def isotropic_system(seed: int = 11, kappa: float = 0.3) -> OperatorSpec:
    """``|xi|^2 B(t)`` in ``d = 2`` with ``B`` switching at ``t = 0`` and ``t = 1``."""
    rng = np.random.default_rng(seed)
    segs = np.stack([_accretive(rng, 2, kappa) for _ in range(3)])
    path = CoefficientPath((0.0, 1.0), segs)
    return OperatorSpec(1, 2, 2, {((1, 0), (1, 0)): path, ((0, 1), (0, 1)): path})


def anisotropic_scalar() -> OperatorSpec:
    """Scalar ``d = 2`` symbol ``xi^T Q(t) xi + i e(t) xi_1^2``; ``kappa`` is the smallest eigenvalue of ``Q``."""
    Qs = [np.array([[2.0, 0.6], [0.6, 0.5]]), np.array([[1.0, -0.3], [-0.3, 3.0]])]
    es = [0.7, -1.2]
    bp = (0.25,)

    def path(entry, imag=None):
        vals = [Q[entry] + (1j * e if imag else 0) for Q, e in zip(Qs, es)]
        return CoefficientPath(bp, np.array(vals, dtype=complex).reshape(2, 1, 1))

    coeffs = {
        ((1, 0), (1, 0)): path((0, 0), imag=True),
        ((0, 1), (0, 1)): path((1, 1)),
        ((1, 0), (0, 1)): path((0, 1)),
        ((0, 1), (1, 0)): path((1, 0)),
    }
    return OperatorSpec(1, 2, 1, coeffs)


def _anisotropic_kappa() -> float:
    Qs = [np.array([[2.0, 0.6], [0.6, 0.5]]), np.array([[1.0, -0.3], [-0.3, 3.0]])]
    return float(min(np.linalg.eigvalsh(Q)[0] for Q in Qs))


@lru_cache(maxsize=1)
def corpus() -> tuple:
    return (
        CorpusEntry("heat_1d", heat_spec(d=1), 1.0),
        CorpusEntry("heat_2d", heat_spec(d=2), 1.0),
        CorpusEntry("example", noncommuting_example(), 0.5),
        CorpusEntry("biheat_1d", heat_spec(d=1, m=2), 1.0),
        CorpusEntry("random_3x3", random_spec(), 0.4),
        CorpusEntry("isotropic_2d", isotropic_system(), 0.3),
        CorpusEntry("anisotropic_2d", anisotropic_scalar(), _anisotropic_kappa()),
    )


def by_name(name: str) -> CorpusEntry:
    for entry in corpus():
        if entry.name == name:
            return entry
    raise KeyError(name)
