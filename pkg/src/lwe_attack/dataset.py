"""Training sets built from reductions or synthesized, plus the SLSF file format.

SLSF layout (little-endian)::

    b"SLSF" | u32 version | u32 flags | u64 N | u32 n | u64 q | f64 rho
    | 32-byte seed record | N records | u64 CRC-64/XZ of everything before it

Each record is ``n`` u64 row entries, a u64 target and, when flag bit 0 is
set, a u16 secret-token id. The seed record holds u64 seed, u64 secret id
(``2**64 - 1`` when absent or multiple), u32 source code and 12 zero bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .checksum import crc64
from .instance import (
    LweParams,
    SampleSet,
    check_secret,
    make_rng,
    rounded_gaussian,
)
from .modq import ContractError, mod_matmul, mod_matvec
from .reduction import rho

MAGIC = b"SLSF"
VERSION = 1
FLAG_TOKENS = 1
NO_SECRET_ID = (1 << 64) - 1
SOURCES = {"reduced": 0, "synthetic": 1, "raw": 2, "reduction": 3}
_SOURCE_NAMES = {v: k for k, v in SOURCES.items()}

_HEADER = struct.Struct("<4sIIQIQd")
_SEED_RECORD = struct.Struct("<QQI12x")


class FormatError(Exception):
    """Base class for malformed artifact files."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


@dataclass
class TrainSet:
    rows: np.ndarray
    targets: np.ndarray
    q: int
    tokens: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.int64)
        if self.rows.ndim != 2 or self.targets.shape != (self.rows.shape[0],):
            raise ContractError("rows must be N x n and targets length N")
        if self.tokens is not None:
            self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
            if self.tokens.shape != self.targets.shape:
                raise ContractError("token ids must have length N")
        for arr in (self.rows, self.targets):
            if arr.size and (arr.min() < 0 or arr.max() >= self.q):
                raise ContractError("entries must be canonical residues")
        self.meta.setdefault("n", int(self.rows.shape[1]))
        self.meta.setdefault("q", int(self.q))

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    def subset(self, count: int) -> "TrainSet":
        """First ``count`` records (sets are stored in shuffled order)."""
        tok = None if self.tokens is None else self.tokens[:count]
        meta = dict(self.meta, size=int(min(count, len(self))))
        return TrainSet(self.rows[:count], self.targets[:count], self.q, tok, meta)


def subsample(samples: SampleSet, m: int, seed: int):
    """Pick ``m`` distinct sample indices; returns ``(indices, A_sub, b_sub)``."""
    t = samples.A.shape[0]
    if not 1 <= m <= t:
        raise ContractError(f"cannot draw m={m} rows from t={t}")
    idx = make_rng(seed, 3).permutation(t)[:m]
    return idx, samples.A[idx].copy(), samples.b[idx].copy()


def with_secret(samples: SampleSet, secret, seed: int) -> SampleSet:
    """Same ``A`` with a fresh ``b = A s + e`` for another secret."""
    p = samples.params
    s = check_secret(secret, p.n)
    rng = make_rng(seed, 4)
    e = rounded_gaussian(rng, p.sigma_e, p.t)
    b = (mod_matvec(samples.A, s, p.q) + e) % p.q
    return SampleSet(A=samples.A, b=b, params=p, secret=s.copy())


def assemble(reductions, samples: SampleSet, secret=None, seed: int | None = None,
             secret_id: int | None = None) -> TrainSet:
    """Stack ``(RA, R b_sub mod q)`` over many reductions of the same samples.

    If ``secret`` differs from the one behind ``samples.b``, ``b`` is redrawn
    for it over the same ``A`` (requires ``seed``) so one set of reductions
    serves many secrets.
    """
    q = samples.params.q
    if secret is not None:
        s = check_secret(secret, samples.params.n)
        if samples.secret is None or not np.array_equal(s, samples.secret):
            if seed is None:
                raise ContractError("a seed is required to draw b for a new secret")
            samples = with_secret(samples, s, seed)
    rows, targets = [], []
    rho_vals = []
    for red in reductions:
        idx = np.asarray(red.indices, dtype=np.int64)
        if red.R.shape[1] != idx.size or idx.size == 0:
            raise ContractError("reduction index bookkeeping mismatch")
        A_sub = samples.A[idx]
        if not np.array_equal(mod_matmul(red.R, A_sub, q), red.RA):
            raise ContractError("reduction does not match the sample rows it claims")
        rows.append(red.RA)
        targets.append(mod_matmul(red.R, samples.b[idx], q))
        rho_vals.append(red.rho)
    n = samples.params.n
    R_rows = np.concatenate(rows) if rows else np.zeros((0, n), dtype=np.int64)
    T = np.concatenate(targets) if targets else np.zeros(0, dtype=np.int64)
    meta = {
        "n": n, "q": q, "source": "reduced",
        "rho": float(np.mean(rho_vals)) if rho_vals else 1.0,
        "seed": int(seed) if seed is not None else 0,
        "secret_ids": [] if secret_id is None else [int(secret_id)],
        "size": int(T.size),
    }
    return TrainSet(R_rows, T, q, None, meta)


def _wrapped_std(sigma: float, terms: int = 50) -> float:
    """Std of a centered normal (in units of q) wrapped onto [-1/2, 1/2)."""
    if sigma < 0.1:
        # mass beyond +-q/2 is below 1e-6; the series would need ~1/sigma terms
        return sigma
    k = np.arange(1, terms + 1, dtype=np.float64)
    var = 1.0 / 12.0 + np.sum((-1.0) ** k * np.exp(-2 * math.pi ** 2 * k ** 2 * sigma ** 2)
                              / (math.pi ** 2 * k ** 2))
    return math.sqrt(max(var, 0.0))


def gaussian_width_for_rho(target_rho: float) -> float | None:
    """Width (units of q) whose wrapped std is ``target_rho / sqrt(12)``.

    Returns ``None`` when the target is indistinguishable from uniform.
    """
    goal = target_rho / math.sqrt(12.0)
    lo = goal
    if _wrapped_std(lo) >= goal * (1 - 1e-12):
        return lo
    hi = 3.0
    if _wrapped_std(hi) < goal:
        return None
    return brentq(lambda s: _wrapped_std(s) - goal, lo, hi, xtol=1e-14)


def synthesize_reduced(params: LweParams, target_rho: float, count: int, secret,
                       seed: int, secret_id: int | None = None) -> TrainSet:
    """Rows that look reduced: centered rounded Gaussians with std ``rho q/sqrt 12``."""
    if not 0 < target_rho <= 1:
        raise ContractError("target_rho must lie in (0, 1]")
    q, n = params.q, params.n
    s = check_secret(secret, n)
    rng = make_rng(seed, 5)
    width = gaussian_width_for_rho(target_rho)
    if width is None:
        rows = rng.integers(0, q, size=(count, n), dtype=np.int64)
    else:
        rows = rounded_gaussian(rng, width * q, (count, n)) % q
    e = rounded_gaussian(rng, params.sigma_e, count)
    targets = (mod_matvec(rows, s, q) + e) % q
    achieved = 1.0
    if count:
        ref = make_rng(seed, 6).integers(0, q, size=(min(count, 4096), n), dtype=np.int64)
        achieved = rho(rows, ref, q)
    meta = {
        "n": n, "q": q, "source": "synthetic", "rho": achieved,
        "target_rho": float(target_rho), "seed": int(seed),
        "secret_ids": [] if secret_id is None else [int(secret_id)],
        "sigma_e": params.sigma_e, "size": int(count),
    }
    return TrainSet(rows, targets, q, None, meta)


def pretrain_set(rows: np.ndarray, secrets, params: LweParams, seed: int,
                 secret_ids=None) -> TrainSet:
    """Pair shared rows with each secret; token ``i + 1`` marks secret ``i``."""
    q = params.q
    rows = np.asarray(rows, dtype=np.int64)
    rng = make_rng(seed, 7)
    all_rows, all_targets, all_tokens = [], [], []
    for i, s in enumerate(secrets):
        s = check_secret(s, rows.shape[1])
        e = rounded_gaussian(rng, params.sigma_e, rows.shape[0])
        all_rows.append(rows)
        all_targets.append((mod_matvec(rows, s, q) + e) % q)
        all_tokens.append(np.full(rows.shape[0], i + 1, dtype=np.int64))
    perm = rng.permutation(rows.shape[0] * len(secrets))
    ids = list(range(1, len(secrets) + 1)) if secret_ids is None else list(secret_ids)
    meta = {"n": rows.shape[1], "q": q, "source": "synthetic", "seed": int(seed),
            "secret_ids": ids, "rho": 1.0}
    return TrainSet(np.concatenate(all_rows)[perm], np.concatenate(all_targets)[perm], q,
                    np.concatenate(all_tokens)[perm], meta)


def shuffled(ts: TrainSet, seed: int) -> TrainSet:
    perm = make_rng(seed, 8).permutation(len(ts))
    tok = None if ts.tokens is None else ts.tokens[perm]
    return TrainSet(ts.rows[perm], ts.targets[perm], ts.q, tok, dict(ts.meta))


# ---------------------------------------------------------------- SLSF I/O

def _record_dtype(n: int, tokens: bool) -> np.dtype:
    fields = [("row", "<u8", (n,)), ("target", "<u8")]
    if tokens:
        fields.append(("token", "<u2"))
    return np.dtype(fields)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def dumps(ts: TrainSet) -> bytes:
    n = ts.n
    has_tok = ts.tokens is not None
    if has_tok and ts.tokens.size and (ts.tokens.min() < 0 or ts.tokens.max() > 0xFFFF):
        raise ContractError("token ids must fit in u16")
    meta = ts.meta
    ids = meta.get("secret_ids", [])
    secret_id = ids[0] if len(ids) == 1 else NO_SECRET_ID
    header = _HEADER.pack(MAGIC, VERSION, FLAG_TOKENS if has_tok else 0, len(ts), n,
                          ts.q, float(meta.get("rho", 1.0)))
    seed_rec = _SEED_RECORD.pack(int(meta.get("seed", 0)) & NO_SECRET_ID, secret_id,
                                 SOURCES.get(meta.get("source", "raw"), 2))
    rec = np.zeros(len(ts), dtype=_record_dtype(n, has_tok))
    rec["row"] = ts.rows
    rec["target"] = ts.targets
    if has_tok:
        rec["token"] = ts.tokens
    body = header + seed_rec + rec.tobytes()
    return body + struct.pack("<Q", crc64(body))


def loads(data: bytes, meta: dict | None = None) -> TrainSet:
    fixed = _HEADER.size + _SEED_RECORD.size
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError("not an SLSF file")
    if len(data) < fixed:
        raise TruncatedError("header truncated")
    magic, version, flags, N, n, q, rho_val = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionError(f"unsupported SLSF version {version}")
    seed, secret_id, source = _SEED_RECORD.unpack_from(data, _HEADER.size)
    dt = _record_dtype(n, bool(flags & FLAG_TOKENS))
    expected = fixed + N * dt.itemsize + 8
    if len(data) < expected:
        raise TruncatedError(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError("trailing bytes after checksum")
    (stored,) = struct.unpack_from("<Q", data, expected - 8)
    if crc64(memoryview(data)[: expected - 8]) != stored:
        raise ChecksumError("CRC-64 mismatch")
    rec = np.frombuffer(data, dtype=dt, count=N, offset=fixed)
    rows = rec["row"].astype(np.int64).reshape(N, n)
    targets = rec["target"].astype(np.int64)
    tokens = rec["token"].astype(np.int64) if flags & FLAG_TOKENS else None
    m = dict(meta or {})
    m.update({"n": n, "q": q, "rho": rho_val, "seed": seed,
              "source": _SOURCE_NAMES.get(source, "raw")})
    if "secret_ids" not in m:
        m["secret_ids"] = [] if secret_id == NO_SECRET_ID else [secret_id]
    return TrainSet(rows, targets, q, tokens, m)


def save(ts: TrainSet, path, sidecar: bool = True) -> None:
    path = Path(path)
    path.write_bytes(dumps(ts))
    if sidecar:
        sidecar_path(path).write_text(json.dumps(ts.meta, indent=2, sort_keys=True,
                                                 default=_json_default) + "\n")


def load(path) -> TrainSet:
    path = Path(path)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else None
    return loads(path.read_bytes(), meta)


# ---------------------------------------------------------------- reduction results

def save_reduction(res, path, seed: int = 0) -> None:
    """``RA`` as an SLSF file (source ``reduction``); ``R``, indices and loop log in the sidecar."""
    from .reduction import result_to_meta

    meta = {"source": "reduction", "seed": int(seed), "rho": float(res.rho),
            "reduction": result_to_meta(res, timings=False)}
    ts = TrainSet(res.RA, np.zeros(res.RA.shape[0], dtype=np.int64), res.q, None, meta)
    save(ts, path)


def load_reduction(path):
    from .reduction import result_from_meta

    ts = load(path)
    if "reduction" not in ts.meta:
        raise FormatError("sidecar carries no reduction record")
    return result_from_meta(ts.meta["reduction"], ts.rows)


# ---------------------------------------------------------------- sample sets

def save_samples(samples: SampleSet, path, seed: int = 0) -> None:
    """``(A, b)`` as an SLSF file (source ``raw``); parameters and lab-only secret in the sidecar."""
    meta = {"source": "raw", "seed": int(seed), "rho": 1.0, "params": samples.params.to_dict(),
            "secret": None if samples.secret is None else samples.secret.tolist()}
    save(TrainSet(samples.A, samples.b, samples.params.q, None, meta), path)


def load_samples(path) -> SampleSet:
    ts = load(path)
    if "params" not in ts.meta:
        raise FormatError("sidecar carries no LWE parameters")
    params = LweParams(**ts.meta["params"])
    secret = ts.meta.get("secret")
    return SampleSet(ts.rows, ts.targets, params,
                     None if secret is None else np.asarray(secret, dtype=np.int64))
