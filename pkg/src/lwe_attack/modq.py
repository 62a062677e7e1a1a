"""Exact arithmetic over Z_q.

Residues are stored canonically in ``[0, q)`` as ``int64``; the centered view
is computed on demand. ``q`` is capped below ``2**51``.
"""

from __future__ import annotations

import numpy as np

MAX_MODULUS = 1 << 51
MAX_DIM = 4096

# Column chunk for ternary dot products: 1024 * 2**51 = 2**61 < 2**63.
_TERNARY_CHUNK = 1024


class ContractError(ValueError):
    """An argument violates a documented precondition."""


def validate_modulus(q: int) -> int:
    q = int(q)
    if q < 3 or q >= MAX_MODULUS:
        raise ContractError(f"modulus must satisfy 3 <= q < 2**51, got {q}")
    return q


def canonical(x, q: int):
    """Map any integer (array) into ``[0, q)``."""
    if isinstance(x, (int, np.integer)):
        return int(x) % q
    return np.mod(np.asarray(x, dtype=np.int64), q)


def center(x, q: int):
    """Centered representative of a canonical residue.

    For odd ``q`` the result lies in ``[-(q-1)/2, (q-1)/2]``.

    >>> center(6, 7)
    -1
    """
    half = q // 2
    if isinstance(x, (int, np.integer)):
        x = int(x)
        if not 0 <= x < q:
            raise ContractError(f"residue {x} outside [0, {q})")
        return x - q if x > half else x
    arr = np.asarray(x, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= q):
        raise ContractError(f"residues outside [0, {q})")
    return np.where(arr > half, arr - q, arr)


def _check_ternary(s: np.ndarray) -> None:
    if s.size and (s.min() < -1 or s.max() > 1):
        raise ContractError("secret entries must lie in {-1, 0, 1}")


def mod_dot(a, s, q: int) -> int:
    """``sum(a_i * s_i) mod q`` for canonical ``a`` and ternary ``s``."""
    a = np.asarray(a, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    if a.shape != s.shape or a.ndim != 1:
        raise ContractError("a and s must be vectors of equal length")
    if a.size > MAX_DIM:
        raise ContractError(f"dimension {a.size} exceeds {MAX_DIM}")
    return int(mod_matvec(a[None, :], s, q)[0])


def mod_matvec(A, s, q: int) -> np.ndarray:
    """Row-wise ``A @ s mod q`` for canonical ``A`` and ternary ``s``; exact."""
    A = np.asarray(A, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    _check_ternary(s)
    if A.size and (A.min() < 0 or A.max() >= q):
        raise ContractError(f"matrix entries outside [0, {q})")
    out = np.zeros(A.shape[0], dtype=np.int64)
    pos = s == 1
    neg = s == -1
    for start in range(0, A.shape[1], _TERNARY_CHUNK):
        sl = slice(start, start + _TERNARY_CHUNK)
        blk = A[:, sl]
        plus = blk[:, pos[sl]].sum(axis=1) % q
        minus = blk[:, neg[sl]].sum(axis=1) % q
        out = (out + plus - minus) % q
    return out


def mod_matmul(X, Y, q: int) -> np.ndarray:
    """Exact ``X @ Y mod q`` for arbitrary integer matrices (or vectors)."""
    X = np.mod(np.asarray(X, dtype=np.int64), q)
    Y = np.mod(np.asarray(Y, dtype=np.int64), q)
    inner = X.shape[-1]
    if inner == 0:
        shape = X.shape[:-1] + Y.shape[1:]
        return np.zeros(shape, dtype=np.int64)
    qq = (q - 1) * (q - 1)
    if qq < (1 << 62):
        chunk = max(1, ((1 << 62) // max(qq, 1)))
        acc = None
        for start in range(0, inner, chunk):
            part = X[..., start:start + chunk] @ Y[start:start + chunk] % q
            acc = part if acc is None else (acc + part) % q
        return acc
    # Python ints: slow but exact for very large q.
    Xo = X.astype(object)
    Yo = Y.astype(object)
    return np.mod(Xo @ Yo, q).astype(np.int64)
