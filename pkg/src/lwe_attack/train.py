"""Training loop, secret-token pre-training and fine-tuning.

Batches are drawn from per-epoch permutations keyed by ``(seed, epoch)``, so the
data order is a pure function of the step counter and a checkpoint needs only
the step to resume bit-exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .dataset import TrainSet
from .instance import make_rng
from .model import (ModelConfig, NonFiniteError, dumps_checkpoint, init_params,
                    loads_checkpoint, loss_and_grads)
from .modq import ContractError

log = logging.getLogger(__name__)

_EPOCH_STREAM = 20
_INIT_STREAM = 21
_T0_STREAM = 22


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    warmup: int = 200
    batch_size: int = 64
    max_steps: int = 30_000
    seed: int = 0
    distinguish_period: int = 2000
    sample_cap: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100
    init_std: float = 0.02

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("rates must be nonnegative")
        if self.batch_size < 1 or self.max_steps < 0 or self.warmup < 0:
            raise ContractError("batch size, steps and warmup must be nonnegative")
        if self.warmup > self.max_steps:
            raise ContractError("warmup exceeds max_steps")
        if self.distinguish_period < 1 or self.log_every < 1:
            raise ContractError("periods must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Rate used for update number ``step`` (1-based): linear warmup, then constant."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    return cfg.lr


@dataclass
class Checkpoint:
    model: ModelConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        arrays = {}
        for prefix, group in (("param/", self.params), ("adam.m/", self.m), ("adam.v/", self.v)):
            for k, a in group.items():
                arrays[prefix + k] = a
        meta = dict(self.meta, step=int(self.step))
        return dumps_checkpoint(self.model, arrays, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        cfg, arrays, meta = loads_checkpoint(data)
        groups: dict[str, dict] = {"param/": {}, "adam.m/": {}, "adam.v/": {}}
        for name, a in arrays.items():
            for prefix in groups:
                if name.startswith(prefix):
                    groups[prefix][name[len(prefix):]] = a
        meta = dict(meta)
        step = int(meta.pop("step", 0))
        return cls(cfg, groups["param/"], groups["adam.m/"], groups["adam.v/"], step, meta)

    def save(self, path) -> None:
        from pathlib import Path
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from pathlib import Path
        return cls.from_bytes(Path(path).read_bytes())


def _zeros_like(params):
    return {k: np.zeros_like(a) for k, a in params.items()}


def init_checkpoint(model: ModelConfig, seed: int, std: float = 0.02) -> Checkpoint:
    params = init_params(model, make_rng(seed, _INIT_STREAM), std)
    return Checkpoint(model, params, _zeros_like(params), _zeros_like(params), 0,
                      {"provenance": "random", "init_seed": int(seed)})


@dataclass
class EventLog:
    records: list[dict] = field(default_factory=list)
    recovery: object | None = None   # accepted RecoveryReport, if any
    reports: list = field(default_factory=list)

    COLUMNS = ("step", "loss", "lr", "event", "verdict", "wall_seconds", "note")

    def add(self, **rec) -> None:
        self.records.append({c: rec.get(c, "") for c in self.COLUMNS})

    def to_csv(self, wall: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            row = [r[c] for c in self.COLUMNS]
            if not wall:
                row[5] = ""
            w.writerow(["" if x is None else (repr(x) if isinstance(x, float) else x) for x in row])
        return buf.getvalue()


def _batch_indices(count: int, cfg: TrainConfig, step: int, cache: dict) -> np.ndarray:
    """Indices for update ``step`` (1-based) from seeded per-epoch permutations."""
    start = (step - 1) * cfg.batch_size
    out = np.empty(cfg.batch_size, dtype=np.int64)
    filled = 0
    while filled < cfg.batch_size:
        pos = start + filled
        epoch, off = divmod(pos, count)
        if cache.get("epoch") != epoch:
            cache["epoch"] = epoch
            cache["perm"] = make_rng(cfg.seed, _EPOCH_STREAM, epoch).permutation(count)
        take = min(cfg.batch_size - filled, count - off)
        out[filled:filled + take] = cache["perm"][off:off + take]
        filled += take
    return out


def _adamw_step(ck: Checkpoint, grads, cfg: TrainConfig, eta: float, step: int) -> None:
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    shrink = 1.0 - eta * cfg.weight_decay
    for k, p in ck.params.items():
        g = grads[k]
        m, v = ck.m[k], ck.v[k]
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        if eta == 0.0:
            continue
        upd = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
        p *= dt(shrink)
        p -= dt(eta) * upd


Hook = Callable[[dict, ModelConfig, int], object]


def train(ck: Checkpoint, data: TrainSet, cfg: TrainConfig, hook: Hook | None = None,
          stop_at: int | None = None, wall: bool = True) -> tuple[Checkpoint, EventLog]:
    """Continue training ``ck`` on ``data`` up to ``cfg.max_steps`` (or ``stop_at``).

    Every ``distinguish_period`` steps the hook is called with the current
    parameters; a report with an accepted secret ends training early.
    """
    if len(data) == 0:
        raise ContractError("empty training set")
    if data.n != ck.model.n or data.q != ck.model.q:
        raise ContractError("training set does not match the model's n and q")
    if cfg.sample_cap is not None:
        data = data.subset(cfg.sample_cap)
    tokens = data.tokens
    if tokens is not None and ck.model.secret_tokens == 0 and np.any(tokens != 0):
        raise ContractError("token ids given to a model without a secret-token table")
    last = cfg.max_steps if stop_at is None else min(stop_at, cfg.max_steps)
    events = EventLog()
    if ck.step == 0:
        events.add(step=0, event="init", note=ck.meta.get("provenance", "random"))
    t0 = time.perf_counter()
    cache: dict = {}
    running, count = 0.0, 0
    step = ck.step
    while step < last:
        step += 1
        idx = _batch_indices(len(data), cfg, step, cache)
        tok = None if tokens is None else tokens[idx]
        try:
            value, grads = loss_and_grads(ck.params, ck.model, data.rows[idx], data.targets[idx], tok)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss at step {step} (last mean loss "
                                   f"{running / max(count, 1):.4g})") from exc
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {k} at step {step}")
        eta = learning_rate(cfg, step)
        _adamw_step(ck, grads, cfg, eta, step)
        ck.step = step
        running += value
        count += 1
        if step % cfg.log_every == 0 or step == last:
            events.add(step=step, loss=running / count, lr=eta, event="train",
                       wall_seconds=round(time.perf_counter() - t0, 3) if wall else "")
            log.debug("step %d loss %.5f lr %.3g", step, running / count, eta)
            running, count = 0.0, 0
        if hook is not None and step % cfg.distinguish_period == 0:
            report = hook(ck.params, ck.model, step)
            events.reports.append((step, report))
            ok = bool(getattr(report, "accepted", False))
            events.add(step=step, event="recovery", verdict="accepted" if ok else "rejected",
                       wall_seconds=round(time.perf_counter() - t0, 3) if wall else "")
            if ok:
                events.recovery = report
                log.info("secret recovered at step %d", step)
                break
    return ck, events


def pretrain(model: ModelConfig, data: TrainSet, cfg: TrainConfig) -> Checkpoint:
    """Train a secret-token model on ``(row, token, target)`` triplets; no recovery hook."""
    if model.secret_tokens < 1:
        raise ContractError("pre-training needs secret_tokens >= 1")
    if data.tokens is None:
        raise ContractError("pre-training set carries no token ids")
    if data.tokens.min() < 1 or data.tokens.max() > model.secret_tokens:
        raise ContractError(f"token ids must lie in [1, {model.secret_tokens}]")
    ck = init_checkpoint(model, cfg.seed, cfg.init_std)
    ck.meta["provenance"] = "pretrain"
    ck, events = train(ck, data, cfg)
    ck.meta["pretrain_steps"] = ck.step
    return ck


def finetune(theta_star: Checkpoint, data: TrainSet, cfg: TrainConfig, hook: Hook | None = None,
             wall: bool = True) -> tuple[Checkpoint, EventLog]:
    """Start from ``theta_star`` with a fresh ``t_0`` row and reset optimizer moments."""
    model = theta_star.model
    if model.secret_tokens < 1:
        raise ContractError("theta* has no secret-token table")
    if data.tokens is not None and np.any(data.tokens != 0):
        raise ContractError("fine-tuning data must carry no token ids (or only t_0)")
    shapes_ok = all(a.shape == b.shape for a, b in zip(theta_star.params.values(),
                                                       init_params(model, make_rng(0)).values()))
    if not shapes_ok:
        raise ContractError("theta* arrays do not match its config")
    params = {k: a.copy() for k, a in theta_star.params.items()}
    t0 = make_rng(cfg.seed, _T0_STREAM).normal(0.0, 0.02, model.d_model)
    params["embed.secret"][0] = t0.astype(params["embed.secret"].dtype)
    prov = f"pretrained@{theta_star.step}"
    ck = Checkpoint(model, params, _zeros_like(params), _zeros_like(params), 0,
                    {"provenance": prov, "optimizer": "reset"})
    data = TrainSet(data.rows, data.targets, data.q, np.zeros(len(data), dtype=np.int64), data.meta)
    return train(ck, data, cfg, hook, wall=wall)


def run_attack(ck: Checkpoint, data: TrainSet, cfg: TrainConfig, hook: Hook | None,
               wall: bool = True):
    """``train`` plus a final recovery attempt when the loop ended without one."""
    ck, events = train(ck, data, cfg, hook, wall=wall)
    if hook is not None and events.recovery is None and ck.step % cfg.distinguish_period:
        report = hook(ck.params, ck.model, ck.step)
        events.reports.append((ck.step, report))
        ok = bool(getattr(report, "accepted", False))
        events.add(step=ck.step, event="recovery", verdict="accepted" if ok else "rejected")
        if ok:
            events.recovery = report
    return ck, events


def held_out_loss(ck: Checkpoint, data: TrainSet) -> float:
    from .model import loss, predict
    pred = predict(ck.params, ck.model, data.rows, data.tokens)
    return loss(pred, data.targets, ck.model.q) if len(data) else math.nan
