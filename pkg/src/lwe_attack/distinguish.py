"""Turning a trained model into verified secret guesses.

A model is anything that maps a batch of rows ``(P, n)`` to plane points
``(P, 2)``. For each coordinate ``i`` the probes are shifted by ``K`` at that
coordinate only, and the mean distance between the normalized predictions
before and after the shift scores how much the secret depends on ``i``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .instance import SampleSet, make_rng, verify_secret
from .modq import ContractError

Predictor = Callable[[np.ndarray], np.ndarray]

MIN_PROBES = 32
TERNARY_CAP = 8


@dataclass(frozen=True)
class RecoverConfig:
    probes: int = 128
    K: int | None = None            # None -> q // 4
    random_K: bool = False
    probe_source: str = "train"     # "train" rows or fresh "uniform" rows
    secret_dist: str = "binary"
    max_support: int | None = None  # ternary: largest support size tried
    seed: int = 0

    def __post_init__(self):
        if self.probes < MIN_PROBES:
            raise ContractError(f"need at least {MIN_PROBES} probes")
        if self.probe_source not in ("train", "uniform"):
            raise ContractError(f"unknown probe source {self.probe_source!r}")
        if self.secret_dist not in ("binary", "ternary"):
            raise ContractError(f"unknown secret distribution {self.secret_dist!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Candidate:
    secret: np.ndarray
    residual_std: float
    accepted: bool

    def to_dict(self) -> dict:
        s = self.secret
        return {"plus": np.flatnonzero(s == 1).tolist(), "minus": np.flatnonzero(s == -1).tolist(),
                "residual_std": self.residual_std, "accepted": self.accepted}


@dataclass
class RecoveryReport:
    scores: np.ndarray
    candidates: list[Candidate] = field(default_factory=list)
    secret: np.ndarray | None = None
    probes: int = 0
    skipped: int = 0
    K: int = 0

    @property
    def accepted(self) -> bool:
        return self.secret is not None

    def to_dict(self) -> dict:
        return {
            "scores": [float(x) for x in self.scores],
            "candidates": [c.to_dict() for c in self.candidates],
            "secret": None if self.secret is None else self.secret.tolist(),
            "probes": self.probes, "skipped": self.skipped, "K": self.K,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RecoveryReport":
        n = len(d["scores"])
        cands = []
        for c in d["candidates"]:
            s = np.zeros(n, dtype=np.int64)
            s[c["plus"]] = 1
            s[c["minus"]] = -1
            cands.append(Candidate(s, c["residual_std"], c["accepted"]))
        secret = None if d["secret"] is None else np.asarray(d["secret"], dtype=np.int64)
        return cls(np.asarray(d["scores"], dtype=np.float64), cands, secret,
                   d["probes"], d["skipped"], d["K"])

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "score"])
        for i, s in enumerate(self.scores):
            w.writerow([i, repr(float(s))])
        return buf.getvalue()


# ---------------------------------------------------------------- scoring

def _normalize(points: np.ndarray):
    pts = np.asarray(points, dtype=np.float64)
    norm = np.linalg.norm(pts, axis=-1, keepdims=True)
    ok = norm[..., 0] > 0
    return np.divide(pts, norm, out=np.zeros_like(pts), where=norm > 0), ok


def shifted_predictions(model: Predictor, probes: np.ndarray, K: int, q: int):
    """Normalized predictions for the probes and for every single-coordinate shift.

    Returns ``(base (P, 2), shifted (n, P, 2), valid (P,))``; a probe is invalid
    when any of its predictions is the zero vector.
    """
    probes = np.asarray(probes, dtype=np.int64)
    P, n = probes.shape
    if P < MIN_PROBES:
        raise ContractError(f"need at least {MIN_PROBES} probes")
    if not 0 < K < q:
        raise ContractError("K must lie in (0, q)")
    base, valid = _normalize(model(probes))
    stacked = np.repeat(probes[None, :, :], n, axis=0)
    cols = np.arange(n)
    stacked[cols, :, cols] = (stacked[cols, :, cols] + K) % q
    shifted, ok = _normalize(model(stacked.reshape(n * P, n)))
    shifted = shifted.reshape(n, P, 2)
    valid = valid & ok.reshape(n, P).all(axis=0)
    return base, shifted, valid


def _scores_from(base, shifted, valid) -> np.ndarray:
    if not valid.any():
        return np.zeros(shifted.shape[0])
    d = np.linalg.norm(shifted[:, valid, :] - base[None, valid, :], axis=-1)
    return d.mean(axis=1)


def score_bits(model: Predictor, probes, K: int, q: int):
    """Per-index scores and the number of skipped (degenerate) probes."""
    base, shifted, valid = shifted_predictions(model, probes, K, q)
    return _scores_from(base, shifted, valid), int((~valid).sum())


def binary_candidates(scores) -> list[np.ndarray]:
    """Candidate ``k`` has ones at the ``k`` highest-scoring indices (ties: lower index)."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    order = np.lexsort((np.arange(n), -scores))
    out = []
    s = np.zeros(n, dtype=np.int64)
    for i in order:
        s[i] = 1
        out.append(s.copy())
    return out


# ---------------------------------------------------------------- ternary grouping

def pair_distances(shifted, valid, indices) -> np.ndarray:
    """Mean distance between predictions shifted at ``i`` and at ``j``."""
    idx = list(indices)
    k = len(idx)
    D = np.zeros((k, k))
    sv = shifted[:, valid, :]
    for a in range(k):
        for b in range(a + 1, k):
            d = float(np.linalg.norm(sv[idx[a]] - sv[idx[b]], axis=-1).mean()) if sv.shape[1] else 0.0
            D[a, b] = D[b, a] = d
    return D


def _components(adj: np.ndarray) -> list[list[int]]:
    k = adj.shape[0]
    label = [-1] * k
    comps = []
    for start in range(k):
        if label[start] >= 0:
            continue
        stack, comp = [start], []
        label[start] = len(comps)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.flatnonzero(adj[u]):
                if label[v] < 0:
                    label[v] = len(comps)
                    stack.append(int(v))
        comps.append(sorted(comp))
    return comps


def _sign_patterns(comps, k: int, cap: int) -> list[np.ndarray]:
    out = []
    for mask in range(min(1 << len(comps), cap)):
        signs = np.empty(k, dtype=np.int64)
        for c, members in enumerate(comps):
            signs[members] = -1 if (mask >> c) & 1 else 1
        out.append(signs)
    if len(comps) == 2:
        # first group positive or first group negative
        out = [out[2], out[1]]
    return out


def group_signs(D: np.ndarray, scores, cap: int = TERNARY_CAP) -> list[np.ndarray]:
    """Sign patterns (+1/-1 per index) consistent with the pair distances.

    Distances are divided by ``score_i + score_j`` so that weakly and strongly
    learned coordinates are comparable: a pair moved in the same direction
    lands near 0, an opposite pair near the top of the range. Same-sign edges
    are pairs below a threshold placed at the midpoint of the largest gap in
    the sorted ratios, and connected components are the sign groups. When that
    split is not two clean groups, further thresholds (next largest gaps) add
    patterns until ``cap`` distinct ones are collected.
    """
    k = D.shape[0]
    if k == 1:
        return [np.array([1]), np.array([-1])]
    scores = np.asarray(scores, dtype=np.float64)
    denom = scores[:, None] + scores[None, :]
    ratio = np.divide(D, denom, out=np.zeros_like(D), where=denom > 0)
    iu = np.triu_indices(k, 1)
    vals = np.unique(ratio[iu])
    cuts = []
    if vals.size > 1:
        gaps = np.diff(vals)
        for g in np.argsort(-gaps, kind="stable"):
            cuts.append((vals[g] + vals[g + 1]) / 2.0)
    cuts.append(np.inf)          # everything one group
    cuts.append(-np.inf)         # every index its own group
    patterns: list[np.ndarray] = []
    seen = set()
    for t in cuts:
        adj = ratio < t
        np.fill_diagonal(adj, False)
        for p in _sign_patterns(_components(adj), k, cap):
            key = p.tobytes()
            if key not in seen:
                seen.add(key)
                patterns.append(p)
            if len(patterns) >= cap:
                return patterns
    return patterns


def ternary_groups(model: Predictor, indices, K: int, probes, q: int, cap: int = TERNARY_CAP):
    """Two sign assignments for the nonzero ``indices`` (more when ambiguous)."""
    idx = list(indices)
    if len(idx) < 2:
        raise ContractError("need at least two nonzero indices")
    base, shifted, valid = shifted_predictions(model, probes, K, q)
    D = pair_distances(shifted, valid, idx)
    return group_signs(D, _scores_from(base, shifted, valid)[idx], cap)


# ---------------------------------------------------------------- full recovery

def choose_probes(cfg: RecoverConfig, n: int, q: int, train_rows: np.ndarray | None = None,
                  salt: int = 0) -> np.ndarray:
    rng = make_rng(cfg.seed, 30, salt)
    if cfg.probe_source == "train" and train_rows is not None and len(train_rows) >= cfg.probes:
        pick = rng.choice(len(train_rows), size=cfg.probes, replace=False)
        return np.asarray(train_rows, dtype=np.int64)[np.sort(pick)]
    return rng.integers(0, q, size=(cfg.probes, n), dtype=np.int64)


def choose_K(cfg: RecoverConfig, q: int, salt: int = 0) -> int:
    if cfg.random_K:
        return int(make_rng(cfg.seed, 31, salt).integers(1, q))
    return int(cfg.K) if cfg.K is not None else q // 4


def recover(model: Predictor, samples: SampleSet, cfg: RecoverConfig,
            probes: np.ndarray | None = None, K: int | None = None) -> RecoveryReport:
    """Score, enumerate candidates, and verify each on ``samples``; first accept wins."""
    q, n = samples.params.q, samples.params.n
    if probes is None:
        probes = choose_probes(cfg, n, q)
    if K is None:
        K = choose_K(cfg, q)
    base, shifted, valid = shifted_predictions(model, probes, K, q)
    scores = _scores_from(base, shifted, valid)
    report = RecoveryReport(scores=scores, probes=int(valid.sum()),
                            skipped=int((~valid).sum()), K=int(K))
    seen = set()

    def attempt(s: np.ndarray) -> bool:
        key = s.tobytes()
        if key in seen:
            return False
        seen.add(key)
        v = verify_secret(samples, s)
        report.candidates.append(Candidate(s, v.residual_std, v.accepted))
        if v.accepted:
            report.secret = s.copy()
        return v.accepted

    if cfg.secret_dist == "binary":
        for s in binary_candidates(scores):
            if attempt(s):
                break
        return report
    order = np.lexsort((np.arange(n), -scores))
    top = cfg.max_support if cfg.max_support is not None else n
    for k in range(1, min(top, n) + 1):
        support = order[:k]
        D = pair_distances(shifted, valid, support) if k > 1 else np.zeros((1, 1))
        for signs in group_signs(D, scores[support]):
            s = np.zeros(n, dtype=np.int64)
            s[support] = signs
            if attempt(s):
                return report
    return report


def model_predictor(params, cfg, token: int | None = None, batch: int = 1024) -> Predictor:
    """Wrap model parameters as a batch predictor (token fixed when given)."""
    from .model import predict

    def fn(rows):
        rows = np.asarray(rows, dtype=np.int64)
        tok = None if token is None else np.full(rows.shape[0], token, dtype=np.int64)
        return predict(params, cfg, rows, tok, batch)

    return fn


def oracle_predictor(secret, q: int) -> Predictor:
    """Exact model ``a -> angular_embed(a.s mod q)`` for tests and calibration."""
    from .model import angular_embed
    from .modq import mod_matvec

    s = np.asarray(secret, dtype=np.int64)
    return lambda rows: angular_embed(mod_matvec(np.asarray(rows, dtype=np.int64), s, q), q)


def make_hook(samples: SampleSet, cfg: RecoverConfig, train_rows: np.ndarray | None = None,
              token: int | None = None):
    """Recovery hook for ``train``: fresh probes and K per call, seeded by step."""

    def hook(params, model_cfg, step: int) -> RecoveryReport:
        probes = choose_probes(cfg, samples.params.n, samples.params.q, train_rows, salt=step)
        K = choose_K(cfg, samples.params.q, salt=step)
        return recover(model_predictor(params, model_cfg, token), samples, cfg, probes, K)

    return hook
