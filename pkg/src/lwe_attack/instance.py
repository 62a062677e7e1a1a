"""LWE instance generation, residual verification and the NoMod statistic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .modq import ContractError, center, mod_matvec, validate_modulus

SECRET_DISTS = ("binary", "ternary")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def rounded_gaussian(rng: np.random.Generator, sigma: float, size) -> np.ndarray:
    if sigma == 0:
        return np.zeros(size, dtype=np.int64)
    return round_half_away(rng.normal(0.0, sigma, size))


@dataclass(frozen=True)
class LweParams:
    n: int
    q: int
    sigma_e: float = 3.0
    h: int = 3
    secret_dist: str = "binary"
    t: int | None = None

    def __post_init__(self):
        validate_modulus(self.q)
        if self.n < 1:
            raise ContractError("n must be positive")
        if not 0 <= self.h <= self.n:
            raise ContractError(f"Hamming weight h={self.h} outside [0, n={self.n}]")
        if self.sigma_e < 0:
            raise ContractError("sigma_e must be non-negative")
        if self.secret_dist not in SECRET_DISTS:
            raise ContractError(f"unknown secret distribution {self.secret_dist!r}")
        if self.t is None:
            object.__setattr__(self, "t", 4 * self.n)
        if self.t < 1:
            raise ContractError("t must be positive")

    def to_dict(self) -> dict:
        return {"n": self.n, "q": self.q, "sigma_e": self.sigma_e, "h": self.h,
                "secret_dist": self.secret_dist, "t": self.t}


@dataclass
class SampleSet:
    A: np.ndarray
    b: np.ndarray
    params: LweParams
    secret: np.ndarray | None = field(default=None, repr=False)

    @property
    def errors(self) -> np.ndarray:
        """Lab-only: ``center(b - A s)``."""
        if self.secret is None:
            raise ContractError("true secret unknown")
        q = self.params.q
        return center((self.b - mod_matvec(self.A, self.secret, q)) % q, q)


def gen_secret(params: LweParams, seed: int) -> np.ndarray:
    """Sparse secret with exactly ``h`` nonzero entries at uniform positions."""
    n, h = params.n, params.h
    rng = make_rng(seed, 1)
    s = np.zeros(n, dtype=np.int64)
    pos = rng.choice(n, size=h, replace=False)
    if params.secret_dist == "binary":
        s[pos] = 1
    else:
        s[pos] = rng.integers(0, 2, size=h) * 2 - 1
    return s


def check_secret(secret, n: int) -> np.ndarray:
    s = np.asarray(secret, dtype=np.int64)
    if s.shape != (n,):
        raise ContractError(f"secret must have length {n}")
    if s.size and (s.min() < -1 or s.max() > 1):
        raise ContractError("secret entries must lie in {-1, 0, 1}")
    return s


def gen_samples(params: LweParams, secret, seed: int) -> SampleSet:
    """Draw ``t`` LWE samples ``b = A s + e mod q`` with rounded-Gaussian ``e``."""
    s = check_secret(secret, params.n)
    if params.secret_dist == "binary" and (s < 0).any():
        raise ContractError("binary secret with -1 entries")
    rng = make_rng(seed, 2)
    A = rng.integers(0, params.q, size=(params.t, params.n), dtype=np.int64)
    e = rounded_gaussian(rng, params.sigma_e, params.t)
    b = (mod_matvec(A, s, params.q) + e) % params.q
    return SampleSet(A=A, b=b, params=params, secret=s.copy())


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    residual_std: float


def acceptance_threshold(q: int) -> float:
    return q / (10.0 * math.sqrt(12.0))


def verify_secret(samples: SampleSet, candidate) -> Verdict:
    """Residual test: accept when ``std(center(b - A s*)) < q / (10 sqrt 12)``."""
    q = samples.params.q
    s = check_secret(candidate, samples.params.n)
    resid = center((samples.b - mod_matvec(samples.A, s, q)) % q, q)
    std = float(np.std(resid.astype(np.float64)))
    return Verdict(accepted=std < acceptance_threshold(q), residual_std=std)


def nomod_fraction(rows, targets, secret, q: int) -> float:
    """Fraction of pairs with ``|center(Ra).s - center(Rb)| < q/2`` over Z."""
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if rows.shape[0] != targets.shape[0]:
        raise ContractError("rows and targets differ in length")
    if rows.shape[0] == 0:
        return 1.0
    s = check_secret(secret, rows.shape[1])
    x = center(rows, q) @ s - center(targets, q)
    # |x| < q/2  <=>  2|x| < q, kept in integers.
    return float(np.count_nonzero(2 * np.abs(x) < q)) / rows.shape[0]
