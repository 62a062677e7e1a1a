"""Inner loops for lattice reduction.

Bases are ``int64`` row matrices updated in place with exact integer row
operations; Gram-Schmidt data is kept in float64. Status codes are returned
instead of raising so the same code runs under numba and plain Python.
"""

import numpy as np

from ._jit import njit

OK = 0
ERR_DEGENERATE = 1
ERR_OVERFLOW = 2
ERR_ITERATIONS = 3
ERR_NODE_CAP = 4

# Entries beyond this magnitude risk int64 wraparound in a row update.
_ENTRY_LIMIT = 2.0 ** 61
# Gram entries above this are no longer exact integers in float64.
_GRAM_EXACT = 2.0 ** 52


@njit
def _dot(B, i, j):
    s = 0.0
    for t in range(B.shape[1]):
        s += float(B[i, t]) * float(B[j, t])
    return s


@njit
def _gso_row(G, k, mu, r):
    """Recompute ``mu[k, :k]`` and ``r[k]`` from the Gram matrix (rows ``< k`` valid)."""
    for j in range(k):
        s = G[k, j]
        for l in range(j):
            s -= mu[j, l] * mu[k, l] * r[l]
        mu[k, j] = s / r[j]
    s = G[k, k]
    for j in range(k):
        s -= mu[k, j] * mu[k, j] * r[j]
    r[k] = s


@njit
def _gram_row(B, G, k):
    for i in range(B.shape[0]):
        g = _dot(B, k, i)
        G[k, i] = g
        G[i, k] = g


@njit
def _row_maxabs(B, k):
    m = 0.0
    for t in range(B.shape[1]):
        v = abs(float(B[k, t]))
        if v > m:
            m = v
    return m


@njit
def _swap_rows(B, i, j):
    for t in range(B.shape[1]):
        tmp = B[i, t]
        B[i, t] = B[j, t]
        B[j, t] = tmp


@njit
def lll_kernel(B, delta, max_iter):
    """LLL in place on the (independent) rows of ``B``.

    A nonpositive projected norm is reported as ``ERR_DEGENERATE``. Returns
    ``(status, mu, r)``; on success ``mu``/``r`` are the Gram-Schmidt data of
    the output basis.
    """
    d = B.shape[0]
    mu = np.zeros((d, d))
    r = np.zeros(d)
    G = np.zeros((d, d))
    for i in range(d):
        _gram_row(B, G, i)
    k = 0
    it = 0
    while k < d:
        it += 1
        if it > max_iter:
            return ERR_ITERATIONS, mu, r
        # size reduction; repeated against fresh Gram-Schmidt data after large steps
        for _rep in range(64):
            _gso_row(G, k, mu, r)
            big = False
            dirty = False
            for j in range(k - 1, -1, -1):
                if abs(mu[k, j]) > 0.5:
                    x = np.floor(mu[k, j] + 0.5)
                    if abs(x) > 1e6:
                        big = True
                    if abs(x) * _row_maxabs(B, j) + _row_maxabs(B, k) > _ENTRY_LIMIT:
                        return ERR_OVERFLOW, mu, r
                    xi = np.int64(x)
                    for t in range(B.shape[1]):
                        B[k, t] -= xi * B[j, t]
                    gkk = G[k, k] - 2.0 * x * G[k, j] + x * x * G[j, j]
                    gmax = 0.0
                    for i in range(d):
                        gmax = max(gmax, abs(G[j, i]))
                        G[k, i] -= x * G[j, i]
                    if abs(x) * gmax > _GRAM_EXACT or abs(gkk) > _GRAM_EXACT:
                        dirty = True
                    G[k, k] = gkk
                    for i in range(d):
                        G[i, k] = G[k, i]
                    for l in range(j):
                        mu[k, l] -= x * mu[j, l]
                    mu[k, j] -= x
            if dirty:
                _gram_row(B, G, k)
            if not (big or dirty):
                break
        s = G[k, k]
        for j in range(k):
            s -= mu[k, j] * mu[k, j] * r[j]
        r[k] = s
        if r[k] <= 0.0:
            return ERR_DEGENERATE, mu, r
        if k > 0 and r[k] < (delta - mu[k, k - 1] * mu[k, k - 1]) * r[k - 1]:
            _swap_rows(B, k, k - 1)
            _swap_rows(G, k, k - 1)
            for i in range(d):
                tmp = G[i, k]
                G[i, k] = G[i, k - 1]
                G[i, k - 1] = tmp
            k -= 1
        else:
            k += 1
    return OK, mu, r


@njit
def polish_kernel(B, max_sweeps):
    """Pairwise norm-decreasing reduction ``v_i -= round(<v_i,v_j>/<v_j,v_j>) v_j``.

    An update is applied only when it strictly lowers ``|v_i|``. Sweeps over
    all ordered pairs until nothing changes or ``max_sweeps`` is reached.
    Returns the number of sweeps performed.
    """
    d, c = B.shape
    G = np.zeros((d, d))
    for i in range(d):
        _gram_row(B, G, i)
    sweeps = 0
    changed = True
    while changed and sweeps < max_sweeps:
        changed = False
        sweeps += 1
        for i in range(d):
            for j in range(d):
                if i == j or G[j, j] == 0.0:
                    continue
                x = np.floor(G[i, j] / G[j, j] + 0.5)
                if x == 0.0:
                    continue
                nn = G[i, i] - 2.0 * x * G[i, j] + x * x * G[j, j]
                if not nn < G[i, i]:
                    continue
                if abs(x) * _row_maxabs(B, j) + _row_maxabs(B, i) > _ENTRY_LIMIT:
                    continue
                xi = np.int64(x)
                for t in range(c):
                    B[i, t] -= xi * B[j, t]
                gmax = 0.0
                for l in range(d):
                    gmax = max(gmax, abs(G[j, l]))
                    G[i, l] -= x * G[j, l]
                G[i, i] = nn
                if abs(x) * gmax > _GRAM_EXACT or abs(nn) > _GRAM_EXACT:
                    _gram_row(B, G, i)
                else:
                    for l in range(d):
                        G[l, i] = G[i, l]
                changed = True
    return sweeps


@njit
def enum_kernel(mu, r, radius2, node_cap):
    """Schnorr-Euchner search for the shortest nonzero projected vector.

    ``mu`` (k x k, lower triangle) and ``r`` describe a projected block.
    Looks for integer ``x`` with ``sum_i r_i (x_i + sum_{l>i} mu_li x_l)^2 <
    radius2``, shrinking the radius at each hit. Returns ``(status, found,
    x)``; ``status`` is ``ERR_NODE_CAP`` when the search was cut short.
    """
    n = r.shape[0]
    v = np.zeros(n, dtype=np.int64)
    best = np.zeros(n, dtype=np.int64)
    c = np.zeros(n)
    w = np.zeros(n, dtype=np.int64)
    rho = np.zeros(n + 1)
    v[0] = 1
    last_nz = 0
    k = 0
    R2 = radius2
    found = False
    nodes = 0
    while True:
        nodes += 1
        if nodes > node_cap:
            return ERR_NODE_CAP, found, best
        diff = float(v[k]) - c[k]
        rho[k] = rho[k + 1] + diff * diff * r[k]
        if rho[k] < R2:
            if k == 0:
                R2 = rho[0]
                for i in range(n):
                    best[i] = v[i]
                found = True
            else:
                k -= 1
                s = 0.0
                for i in range(k + 1, n):
                    s += float(v[i]) * mu[i, k]
                c[k] = -s
                v[k] = np.int64(np.floor(c[k] + 0.5))
                w[k] = 1
        else:
            k += 1
            if k == n:
                break
            if k >= last_nz:
                last_nz = k
                v[k] += 1
            else:
                if float(v[k]) > c[k]:
                    v[k] -= w[k]
                else:
                    v[k] += w[k]
                w[k] += 1
    return OK, found, best
