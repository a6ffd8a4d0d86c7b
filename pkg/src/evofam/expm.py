"""Batched matrix exponential by scaling and squaring with a [13/13] Pade approximant.

Follows Higham (2005), "The scaling and squaring method for the matrix
exponential revisited", restricted to the degree-13 approximant. Works on a
single ``(n, n)`` matrix or on any stack ``(..., n, n)``; every matrix in the
stack gets its own scaling parameter.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericFailure

_B13 = np.array(
    [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ]
)
THETA_13 = 5.371920351148152


def _pade13(a):
    b = _B13
    ident = np.broadcast_to(np.eye(a.shape[-1], dtype=a.dtype), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (
        a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
        + b[7] * a6
        + b[5] * a4
        + b[3] * a2
        + b[1] * ident
    )
    v = (
        a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
        + b[6] * a6
        + b[4] * a4
        + b[2] * a2
        + b[0] * ident
    )
    return np.linalg.solve(v - u, v + u)


def expm(a):
    """Matrix exponential of ``a`` (shape ``(n, n)`` or ``(..., n, n)``).

    Raises
    ------
    NumericFailure
        If the input or the result contains non-finite entries.
    """
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    dtype = np.result_type(a.dtype, np.float64)
    a = a.astype(dtype, copy=False)
    if not np.all(np.isfinite(a)):
        raise NumericFailure("non-finite entries in matrix exponential input")

    batch_shape = a.shape[:-2]
    n = a.shape[-1]
    flat = a.reshape((-1, n, n))

    norm1 = np.abs(flat).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norm1 > THETA_13, np.ceil(np.log2(norm1 / THETA_13)), 0.0)
    s = s.astype(int)
    scaled = flat / (2.0 ** s)[:, None, None]

    r = _pade13(scaled)
    r[norm1 == 0] = np.eye(n)  # exact identity; the Pade solve rounds at 1 ulp
    smax = int(s.max()) if s.size else 0
    for j in range(smax):
        idx = np.nonzero(s > j)[0]
        r[idx] = r[idx] @ r[idx]

    if not np.all(np.isfinite(r)):
        bad = int(np.nonzero(~np.isfinite(r).all(axis=(-1, -2)))[0][0])
        raise NumericFailure("matrix exponential produced non-finite entries", index=bad)
    return r.reshape(batch_shape + (n, n))
