"""Lattice-reduction preprocessing of LWE matrices.

The embedding ``[[0, q I_n], [w I_m, A]]`` is reduced with interleaved
LLL-class and BKZ-class loops, each followed by a polish pass. Reduced rows
``[w R, R A + q C]`` yield the operator ``R`` and the reduced rows ``RA``.
"""

from __future__ import annotations

import csv
import io
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import lattice_kernels as K
from .modq import ContractError, center, mod_matmul

MAX_PRECISE_Q = 1 << 40
MAX_PRECISE_DIM = 256


class PrecisionError(ArithmeticError):
    """Floating-point Gram-Schmidt cannot be trusted for this input."""


class ReductionError(RuntimeError):
    """Reduction produced no usable result."""


class InvariantError(AssertionError):
    """An internal exactness invariant failed."""


class PartialTourWarning(UserWarning):
    """A BKZ block search hit its node cap; the best vector found was used."""


@dataclass
class EmbeddingLattice:
    basis: np.ndarray
    omega: int
    m: int
    n: int
    q: int

    @property
    def A(self) -> np.ndarray:
        return self.basis[self.n:, self.m:]


def build_lambda(A_sub, q: int, omega: int = 10) -> EmbeddingLattice:
    A_sub = np.asarray(A_sub, dtype=np.int64)
    if A_sub.ndim != 2:
        raise ContractError("A_sub must be a matrix")
    m, n = A_sub.shape
    if not 1 <= m <= n:
        raise ContractError(f"need 1 <= m <= n, got m={m}, n={n}")
    if omega < 1:
        raise ContractError("omega must be a positive integer")
    basis = np.zeros((m + n, m + n), dtype=np.int64)
    basis[:n, m:] = q * np.eye(n, dtype=np.int64)
    basis[n:, :m] = omega * np.eye(m, dtype=np.int64)
    basis[n:, m:] = np.mod(A_sub, q)
    return EmbeddingLattice(basis=basis, omega=int(omega), m=m, n=n, q=int(q))


def _check_delta(delta: float) -> None:
    if not 0.25 < delta < 1:
        raise ContractError(f"LLL delta must lie in (0.25, 1), got {delta}")


def _check_precision(basis: np.ndarray) -> None:
    if basis.shape[0] > MAX_PRECISE_DIM:
        raise PrecisionError(f"dimension {basis.shape[0]} exceeds {MAX_PRECISE_DIM}")
    if basis.size and np.abs(basis).max() > MAX_PRECISE_Q * MAX_PRECISE_DIM:
        raise PrecisionError("basis entries too large for double-precision Gram-Schmidt")


def _max_iter(d: int) -> int:
    return 2000 * d * d + 10000


def _run_lll(B: np.ndarray, delta: float):
    status, mu, r = K.lll_kernel(B, delta, _max_iter(B.shape[0]))
    if status == K.ERR_DEGENERATE:
        raise PrecisionError("zero projected norm: rows dependent or precision lost")
    if status == K.ERR_OVERFLOW:
        raise PrecisionError("integer entries would overflow int64")
    if status == K.ERR_ITERATIONS:
        raise PrecisionError("LLL did not converge within the iteration cap")
    return mu, r


def lll_reduce(basis, delta: float = 0.99) -> np.ndarray:
    """LLL-reduce the rows of an integer basis; returns a new array."""
    _check_delta(delta)
    B = np.array(basis, dtype=np.int64, copy=True)
    _check_precision(B)
    _run_lll(B, delta)
    return B


def polish(basis, max_sweeps: int = 100) -> np.ndarray:
    """Norm-monotone pairwise size reduction to a fixpoint; returns a new array."""
    B = np.array(basis, dtype=np.int64, copy=True)
    if B.shape[0] > 1:
        K.polish_kernel(B, max_sweeps)
    return B


def _insert(B: np.ndarray, j: int, x: np.ndarray) -> None:
    """Make ``sum_i x_i B[j+i]`` the row at ``j`` with unimodular row operations."""
    x = np.array(x, dtype=np.int64)
    g = np.gcd.reduce(np.abs(x))
    x //= g
    rows = B[j:j + x.size]
    while np.count_nonzero(x) > 1:
        nz = np.flatnonzero(x)
        p = nz[np.argmin(np.abs(x[nz]))]
        for l in nz:
            if l == p:
                continue
            t = int(np.floor(x[l] / x[p] + 0.5))
            if t:
                x[l] -= t * x[p]
                rows[p] += t * rows[l]
    p = int(np.flatnonzero(x)[0])
    if x[p] < 0:
        rows[p] *= -1
    if p:
        B[j:j + p + 1] = np.roll(B[j:j + p + 1], 1, axis=0)


def bkz_reduce(basis, block_size: int, delta: float = 0.99, node_cap: int = 1_000_000) -> np.ndarray:
    """One BKZ tour with exact enumeration in every projected block."""
    _check_delta(delta)
    if not 2 <= block_size <= 12:
        raise ContractError("block size must lie in [2, 12]")
    B = np.array(basis, dtype=np.int64, copy=True)
    _check_precision(B)
    mu, r = _run_lll(B, delta)
    d = B.shape[0]
    for j in range(d - 1):
        k = min(j + block_size, d)
        status, found, x = K.enum_kernel(np.ascontiguousarray(mu[j:k, j:k]),
                                         np.ascontiguousarray(r[j:k]),
                                         delta * r[j], node_cap)
        if status == K.ERR_NODE_CAP:
            warnings.warn(f"block {j}..{k} enumeration hit node cap {node_cap}",
                          PartialTourWarning, stacklevel=2)
        if found:
            _insert(B, j, x)
            mu, r = _run_lll(B, delta)
    return B


@dataclass
class ReductionSchedule:
    beta1: int = 4
    beta2: int = 8
    delta1: float = 0.96
    delta2: float = 0.99
    switch_window: int = 3
    switch_threshold: float = -0.001
    tighten_rho: float = 0.85
    polish: bool = True
    max_loops: int = 40
    time_budget: float = 60.0
    node_cap: int = 1_000_000

    def __post_init__(self):
        if self.beta1 > self.beta2:
            raise ContractError("beta1 must not exceed beta2")
        for dl in (self.delta1, self.delta2):
            _check_delta(dl)
        if self.switch_window < 1 or self.max_loops < 1:
            raise ContractError("window and loop cap must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LoopRecord:
    loop: int
    reducer: str
    rho: float
    delta_rho: float
    seconds: float
    accepted: bool
    block_size: int
    lll_delta: float


@dataclass
class ReductionResult:
    R: np.ndarray
    RA: np.ndarray
    rho: float
    r_ratio: float
    q: int
    omega: int
    indices: np.ndarray | None = None
    loop_log: list = field(default_factory=list)

    def loop_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loop", "reducer", "rho", "delta_rho", "seconds", "accepted",
                    "block_size", "lll_delta"])
        for rec in self.loop_log:
            w.writerow([rec.loop, rec.reducer, f"{rec.rho:.6f}", f"{rec.delta_rho:.6f}",
                        f"{rec.seconds:.4f}", int(rec.accepted), rec.block_size,
                        rec.lll_delta])
        return buf.getvalue()


def rho(RA, A_ref, q: int) -> float:
    """Mean row std of centered ``RA`` relative to the same for ``A_ref``."""
    RA = np.asarray(RA, dtype=np.int64)
    A_ref = np.asarray(A_ref, dtype=np.int64)
    if RA.size == 0 or A_ref.size == 0:
        raise ContractError("rho needs nonempty matrices")
    den = float(np.mean(np.std(center(A_ref, q).astype(np.float64), axis=1)))
    if den == 0:
        raise ContractError("reference matrix has zero spread")
    num = float(np.mean(np.std(center(RA, q).astype(np.float64), axis=1)))
    return num / den


def extract_r(lattice: EmbeddingLattice, reduced_basis) -> ReductionResult:
    Bm = np.asarray(reduced_basis, dtype=np.int64)
    m, q, w = lattice.m, lattice.q, lattice.omega
    left = Bm[:, :m]
    if np.any(left % w):
        raise InvariantError("left block is not divisible by omega")
    R = left // w
    keep = np.any(R != 0, axis=1)
    R = R[keep]
    RA = np.mod(Bm[keep, m:], q)
    r_ratio = float(np.abs(R).max()) / q if R.size else 0.0
    value = rho(RA, lattice.A, q) if R.shape[0] else 0.0
    return ReductionResult(R=R, RA=RA, rho=value, r_ratio=r_ratio, q=q, omega=w)


def _lll_loop(basis, beta, delta, node_cap):
    return lll_reduce(basis, delta)


def _bkz_loop(basis, beta, delta, node_cap):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PartialTourWarning)
        return bkz_reduce(basis, beta, delta, node_cap)


DEFAULT_REDUCERS = {"A": _lll_loop, "B": _bkz_loop}


def reduce_matrix(A_sub, q: int, omega: int = 10, schedule: ReductionSchedule | None = None,
                  indices=None, reducers=None) -> ReductionResult:
    """Reduce one ``m x n`` matrix under the switching controller.

    Reducer "A" (LLL-class) and "B" (BKZ-class) alternate: after
    ``switch_window`` loops of the active reducer whose summed change in rho
    exceeds ``switch_threshold`` the other one takes over; when both have
    stalled back to back, reduction stops. A loop whose output has a larger
    rho than the current basis is discarded. Once rho drops below
    ``tighten_rho`` the (beta, delta) parameters move to their second values.
    """
    sched = schedule or ReductionSchedule()
    reducers = reducers or DEFAULT_REDUCERS
    lat = build_lambda(A_sub, q, omega)
    if q > MAX_PRECISE_Q:
        raise PrecisionError(f"q={q} exceeds the double-precision contract (2**40)")
    basis = lat.basis.copy()
    current = extract_r(lat, basis)
    t_start = time.perf_counter()
    active = "A"
    beta, delta = sched.beta1, sched.delta1
    tightened = False
    window: list[float] = []
    stalled: set[str] = set()
    log: list[LoopRecord] = []
    for loop in range(sched.max_loops):
        if time.perf_counter() - t_start >= sched.time_budget:
            if not log:
                raise ReductionError("time budget exhausted before any loop completed")
            break
        t0 = time.perf_counter()
        cand = reducers[active](basis, beta, delta, sched.node_cap)
        if sched.polish:
            cand = polish(cand)
        res = extract_r(lat, cand)
        accepted = res.rho <= current.rho
        d_rho = res.rho - current.rho if accepted else 0.0
        if accepted:
            basis, current = cand, res
        log.append(LoopRecord(loop, active, current.rho, d_rho, time.perf_counter() - t0,
                              accepted, beta, delta))
        if not tightened and current.rho < sched.tighten_rho:
            beta, delta = sched.beta2, sched.delta2
            tightened = True
            stalled.clear()
        window.append(d_rho)
        if len(window) >= sched.switch_window:
            if sum(window) > sched.switch_threshold:
                stalled.add(active)
                if len(stalled) == 2:
                    break
                active = "B" if active == "A" else "A"
            else:
                stalled.clear()
            window = []
    current.loop_log = log
    current.indices = None if indices is None else np.asarray(indices, dtype=np.int64)
    return current


def _reduce_job(args):
    A_sub, q, omega, sched, idx = args
    return reduce_matrix(A_sub, q, omega, sched, indices=idx)


def reduce_batch(samples, count: int, m: int, omega: int = 10,
                 schedule: ReductionSchedule | None = None, seed: int = 0,
                 workers: int = 1) -> list[ReductionResult]:
    """Reduce ``count`` independent subsamples; matrix ``i`` uses seed ``seed ^ i``.

    Results do not depend on ``workers``.
    """
    from .dataset import subsample

    jobs = []
    for i in range(count):
        idx, A_sub, _ = subsample(samples, m, seed ^ i)
        jobs.append((A_sub, samples.params.q, omega, schedule, idx))
    if workers <= 1:
        return [_reduce_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_reduce_job, jobs))


def unimodular_transform(initial, reduced) -> tuple[np.ndarray, int]:
    """Exact ``U`` with ``reduced = U @ initial`` and ``det U`` (small inputs only)."""
    import sympy

    M0 = sympy.Matrix(np.asarray(initial, dtype=object).tolist())
    M1 = sympy.Matrix(np.asarray(reduced, dtype=object).tolist())
    U = M1 * M0.inv()
    if any(not v.is_integer for v in U):
        raise InvariantError("transform has non-integer entries")
    return np.array(U.tolist(), dtype=object), int(U.det())


def result_to_meta(res: ReductionResult, timings: bool = True) -> dict:
    """JSON-ready record; ``timings=False`` zeroes loop seconds for reproducible files."""
    log = [asdict(r) for r in res.loop_log]
    if not timings:
        for r in log:
            r["seconds"] = 0.0
    return {
        "R": res.R.tolist(), "rho": res.rho, "r_ratio": res.r_ratio, "q": res.q,
        "omega": res.omega,
        "indices": None if res.indices is None else res.indices.tolist(),
        "loop_log": log,
    }


def result_from_meta(meta: dict, RA: np.ndarray) -> ReductionResult:
    R = np.array(meta["R"], dtype=np.int64).reshape(len(meta["R"]), -1)
    log = [LoopRecord(**r) for r in meta.get("loop_log", [])]
    idx = meta.get("indices")
    return ReductionResult(R=R, RA=RA, rho=meta["rho"], r_ratio=meta["r_ratio"],
                           q=meta["q"], omega=meta["omega"],
                           indices=None if idx is None else np.array(idx, dtype=np.int64),
                           loop_log=log)


def mod_check(res: ReductionResult, A_sub) -> bool:
    """``RA == R A_sub (mod q)`` entrywise."""
    return bool(np.array_equal(mod_matmul(res.R, A_sub, res.q), res.RA))

