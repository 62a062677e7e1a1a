"""Encoder-only transformer that maps a row of residues to a point on the plane.

Inputs are embedded either as angles (one position per coordinate: the point
``(sin 2 pi a/q, cos 2 pi a/q)`` through a learned 2 -> d projection) or as
two vocabulary tokens per coordinate. An optional secret-token embedding is
prepended. Pre-norm encoder blocks are followed by a final layer norm, a
coordinate-wise max over positions and a d -> 2 projection. Gradients are
computed analytically; max-pool routes each coordinate's gradient to the
first position attaining the maximum.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .checksum import crc64
from .model_kernels import gelu, gelu_back, layernorm, layernorm_back, softmax, softmax_back
from .modq import ContractError

MAX_VOCAB = 10_000


class NonFiniteError(FloatingPointError):
    """Loss or gradients stopped being finite."""


@dataclass(frozen=True)
class ModelConfig:
    n: int
    q: int
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    ffn_mult: int = 4
    embedding: str = "angular"
    vocab_base: int = 0
    vocab_bucket: int = 1
    secret_tokens: int = 0
    pool_token: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ContractError("d_model must be divisible by heads")
        if self.embedding not in ("angular", "vocab"):
            raise ContractError(f"unknown embedding {self.embedding!r}")
        if self.embedding == "vocab":
            if not 0 < self.vocab_base < self.q:
                raise ContractError("vocab embedding needs 0 < base < q")
            if self.vocab_bucket < 1:
                raise ContractError("bucket size must be positive")
            if self.vocab_size > MAX_VOCAB:
                raise ContractError(f"vocabulary of {self.vocab_size} tokens exceeds {MAX_VOCAB}")

    @property
    def high_tokens(self) -> int:
        return -(-self.q // self.vocab_base)

    @property
    def low_tokens(self) -> int:
        return -(-self.vocab_base // self.vocab_bucket)

    @property
    def vocab_size(self) -> int:
        return self.high_tokens + self.low_tokens

    @property
    def seq_len(self) -> int:
        """Positions fed to the encoder (including the secret token, if any)."""
        per_row = self.n if self.embedding == "angular" else 2 * self.n
        return per_row + (1 if self.secret_tokens else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    shapes: dict[str, tuple] = {}
    if cfg.embedding == "angular":
        shapes["embed.W"] = (2, d)
        slots = cfg.n + 1
    else:
        shapes["embed.tokens"] = (cfg.vocab_size, d)
        slots = 2 * cfg.n + 1
    shapes["embed.pos"] = (slots, d)
    if cfg.secret_tokens:
        shapes["embed.secret"] = (cfg.secret_tokens + 1, d)
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.W{name}"] = (d, d)
            shapes[p + f"attn.b{name}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.W1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.W2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["final.g"] = (d,)
    shapes["final.b"] = (d,)
    shapes["head.W"] = (d, 2)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, np.ndarray]:
    dt = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".g",)) and len(shape) == 1:
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, std, shape)
        params[name] = arr.astype(dt)
    return params


# ---------------------------------------------------------------- embedding helpers

def angular_embed(a, q: int) -> np.ndarray:
    """Residue(s) to ``(sin 2 pi a/q, cos 2 pi a/q)``; last axis has size 2."""
    arr = np.asarray(a, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= q):
        raise ContractError("residues must lie in [0, q)")
    theta = (2.0 * math.pi / q) * arr.astype(np.float64)
    return np.stack([np.sin(theta), np.cos(theta)], axis=-1)


def decode_angle(pred, q: int):
    """Nearest residue to the angle of ``pred`` (same convention as ``angular_embed``)."""
    p = np.asarray(pred, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    if np.any((x == 0) & (y == 0)):
        raise ContractError("angle of the zero vector is undefined")
    theta = np.arctan2(x, y)
    out = np.mod(np.floor(theta * (q / (2.0 * math.pi)) + 0.5).astype(np.int64), q)
    return int(out) if out.ndim == 0 else out


def tokenize_vocab(a, q: int, base: int, bucket: int):
    """Two-token encoding: ``(a // base, (a % base) // bucket)``."""
    arr = np.asarray(a, dtype=np.int64)
    if base >= q:
        raise ContractError("base must be below q")
    high = arr // base
    low = (arr % base) // bucket
    high_count = -(-q // base)
    if high_count + -(-base // bucket) > MAX_VOCAB:
        raise ContractError("token table overflow")
    if arr.ndim == 0:
        return int(high), int(low)
    return high, low


def _vocab_ids(X: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    high, low = tokenize_vocab(X, cfg.q, cfg.vocab_base, cfg.vocab_bucket)
    ids = np.empty((X.shape[0], 2 * X.shape[1]), dtype=np.int64)
    ids[:, 0::2] = high
    ids[:, 1::2] = cfg.high_tokens + low
    return ids


# ---------------------------------------------------------------- building blocks

def _mm(x, W):
    """``x @ W`` over the last axis of a (B, L, d) tensor."""
    return (x.reshape(-1, x.shape[-1]) @ W).reshape(x.shape[:-1] + (W.shape[1],))


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# ---------------------------------------------------------------- forward / backward

def _check_tokens(cfg: ModelConfig, batch: int, tokens):
    if not cfg.secret_tokens:
        return None
    if tokens is None:
        return np.zeros(batch, dtype=np.int64)
    tok = np.asarray(tokens, dtype=np.int64).reshape(batch)
    if tok.size and (tok.min() < 0 or tok.max() > cfg.secret_tokens):
        raise ContractError(f"secret token ids must lie in [0, {cfg.secret_tokens}]")
    return tok


def forward_batch(params, cfg: ModelConfig, X, tokens=None, need_cache: bool = True):
    """Predictions ``(B, 2)`` for rows ``X`` (B x n residues) and a backward cache."""
    X = np.asarray(X, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != cfg.n:
        raise ContractError(f"rows must have shape (B, {cfg.n})")
    dt = np.dtype(cfg.dtype)
    Bsz = X.shape[0]
    tok = _check_tokens(cfg, Bsz, tokens)
    pos = params["embed.pos"]
    cache = {"tok": tok}
    if cfg.embedding == "angular":
        pts = angular_embed(X, cfg.q).astype(dt)
        h = _mm(pts, params["embed.W"]) + pos[1:cfg.n + 1]
        cache["pts"] = pts
    else:
        ids = _vocab_ids(X, cfg)
        h = params["embed.tokens"][ids] + pos[1:2 * cfg.n + 1]
        cache["ids"] = ids
    if tok is not None:
        first = params["embed.secret"][tok] + pos[0]
        h = np.concatenate([first[:, None, :], h], axis=1)
    H = cfg.heads
    dh = cfg.d_model // H
    scale = 1.0 / math.sqrt(dh)
    L = h.shape[1]
    layer_caches = []
    for i in range(cfg.layers):
        p = f"layer{i}."
        u, ln1 = layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        Q = _mm(u, params[p + "attn.Wq"]) + params[p + "attn.bq"]
        Kt = _mm(u, params[p + "attn.Wk"]) + params[p + "attn.bk"]
        V = _mm(u, params[p + "attn.Wv"]) + params[p + "attn.bv"]
        Qh = Q.reshape(Bsz, L, H, dh).transpose(0, 2, 1, 3)
        Kh = Kt.reshape(Bsz, L, H, dh).transpose(0, 2, 1, 3)
        Vh = V.reshape(Bsz, L, H, dh).transpose(0, 2, 1, 3)
        P = softmax((Qh @ Kh.transpose(0, 1, 3, 2)) * scale)
        Oh = P @ Vh
        O = Oh.transpose(0, 2, 1, 3).reshape(Bsz, L, cfg.d_model)
        h = h + _mm(O, params[p + "attn.Wo"]) + params[p + "attn.bo"]
        u2, ln2 = layernorm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        z = _mm(u2, params[p + "ffn.W1"]) + params[p + "ffn.b1"]
        a, t = gelu(z)
        h = h + _mm(a, params[p + "ffn.W2"]) + params[p + "ffn.b2"]
        if need_cache:
            layer_caches.append((u, ln1, Qh, Kh, Vh, P, O, u2, ln2, z, a, t))
    hf, lnf = layernorm(h, params["final.g"], params["final.b"])
    start = 1 if (tok is not None and not cfg.pool_token) else 0
    pool_src = hf[:, start:, :]
    idx = np.argmax(pool_src, axis=1)
    pooled = np.take_along_axis(pool_src, idx[:, None, :], axis=1)[:, 0, :]
    out = pooled @ params["head.W"]
    if need_cache:
        cache.update(layers=layer_caches, lnf=lnf, idx=idx + start, pooled=pooled,
                     L=L, B=Bsz)
    return out, cache


def backward_batch(params, cfg: ModelConfig, cache, dout) -> dict[str, np.ndarray]:
    """Gradients of every named array given ``dL/dout``."""
    dt = np.dtype(cfg.dtype)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dout = np.asarray(dout, dtype=dt)
    Bsz, L = cache["B"], cache["L"]
    H = cfg.heads
    dhd = cfg.d_model // H
    scale = 1.0 / math.sqrt(dhd)
    grads["head.W"] = cache["pooled"].T @ dout
    dpooled = dout @ params["head.W"].T
    dhf = np.zeros((Bsz, L, cfg.d_model), dtype=dt)
    np.put_along_axis(dhf, cache["idx"][:, None, :], dpooled[:, None, :], axis=1)
    dh, grads["final.g"], grads["final.b"] = layernorm_back(dhf, params["final.g"], cache["lnf"])
    for i in reversed(range(cfg.layers)):
        p = f"layer{i}."
        u, ln1, Qh, Kh, Vh, P, O, u2, ln2, z, a, t = cache["layers"][i]
        # feed-forward
        grads[p + "ffn.W2"] = _wgrad(a, dh)
        grads[p + "ffn.b2"] = dh.reshape(-1, cfg.d_model).sum(axis=0)
        dz = gelu_back(_mm(dh, params[p + "ffn.W2"].T), z, t)
        grads[p + "ffn.W1"] = _wgrad(u2, dz)
        grads[p + "ffn.b1"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
        du2 = _mm(dz, params[p + "ffn.W1"].T)
        dx, grads[p + "ln2.g"], grads[p + "ln2.b"] = layernorm_back(du2, params[p + "ln2.g"], ln2)
        dh = dh + dx
        # attention
        grads[p + "attn.Wo"] = _wgrad(O, dh)
        grads[p + "attn.bo"] = dh.reshape(-1, cfg.d_model).sum(axis=0)
        dO = _mm(dh, params[p + "attn.Wo"].T).reshape(Bsz, L, H, dhd).transpose(0, 2, 1, 3)
        dP = dO @ Vh.transpose(0, 1, 3, 2)
        dVh = P.transpose(0, 1, 3, 2) @ dO
        dS = softmax_back(P, dP, scale)
        dQh = dS @ Kh
        dKh = dS.transpose(0, 1, 3, 2) @ Qh
        du = np.zeros_like(u)
        for name, dX in (("q", dQh), ("k", dKh), ("v", dVh)):
            dflat = dX.transpose(0, 2, 1, 3).reshape(Bsz, L, cfg.d_model)
            grads[p + f"attn.W{name}"] = _wgrad(u, dflat)
            grads[p + f"attn.b{name}"] = dflat.reshape(-1, cfg.d_model).sum(axis=0)
            du += _mm(dflat, params[p + f"attn.W{name}"].T)
        dx, grads[p + "ln1.g"], grads[p + "ln1.b"] = layernorm_back(du, params[p + "ln1.g"], ln1)
        dh = dh + dx
    tok = cache["tok"]
    gpos = grads["embed.pos"]
    if tok is not None:
        np.add.at(grads["embed.secret"], tok, dh[:, 0, :])
        gpos[0] += dh[:, 0, :].sum(axis=0)
        dh = dh[:, 1:, :]
    gpos[1:dh.shape[1] + 1] += dh.sum(axis=0)
    if cfg.embedding == "angular":
        grads["embed.W"] = _wgrad(cache["pts"], dh)
    else:
        np.add.at(grads["embed.tokens"], cache["ids"].reshape(-1), dh.reshape(-1, cfg.d_model))
    return grads


def loss(pred, b, q: int) -> float:
    """Mean squared distance between predictions and the circle points of ``b``."""
    target = angular_embed(b, q)
    diff = np.asarray(pred, dtype=np.float64) - target
    if diff.ndim == 1:
        return float(diff @ diff)
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def loss_grad(pred, b, q: int) -> np.ndarray:
    """``d loss / d pred`` for the batch-mean loss."""
    pred = np.asarray(pred)
    target = angular_embed(b, q).astype(pred.dtype)
    n = pred.shape[0] if pred.ndim == 2 else 1
    return 2.0 * (pred - target) / n


def loss_and_grads(params, cfg: ModelConfig, X, b, tokens=None):
    if len(X) == 0:
        return 0.0, {k: np.zeros_like(v) for k, v in params.items()}
    pred, cache = forward_batch(params, cfg, X, tokens)
    value = loss(pred, b, cfg.q)
    if not math.isfinite(value):
        raise NonFiniteError("loss is not finite")
    return value, backward_batch(params, cfg, cache, loss_grad(pred, b, cfg.q))


def forward(params, cfg: ModelConfig, row, token_id=None) -> np.ndarray:
    """Prediction for a single row."""
    row = np.asarray(row, dtype=np.int64)
    if row.shape != (cfg.n,):
        raise ContractError(f"row must have length {cfg.n}")
    tok = None if token_id is None else np.array([token_id])
    out, _ = forward_batch(params, cfg, row[None, :], tok, need_cache=False)
    return out[0]


def predict(params, cfg: ModelConfig, X, tokens=None, batch: int = 512) -> np.ndarray:
    X = np.asarray(X, dtype=np.int64)
    outs = []
    for s in range(0, X.shape[0], batch):
        tok = None if tokens is None else np.asarray(tokens)[s:s + batch]
        outs.append(forward_batch(params, cfg, X[s:s + batch], tok, need_cache=False)[0])
    if not outs:
        return np.zeros((0, 2), dtype=np.dtype(cfg.dtype))
    return np.concatenate(outs)


# ---------------------------------------------------------------- SLSM checkpoints

SLSM_MAGIC = b"SLSM"
SLSM_VERSION = 1


def dumps_checkpoint(cfg: ModelConfig, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """``magic | u32 version | u32 len | JSON header | u32 count | arrays | CRC-64``.

    Each array is ``u16 name length | name | u64 element count | f64 entries``;
    shapes and dtypes live in the JSON header next to the model config.
    """
    header = {
        "config": cfg.to_dict(),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "dtypes": {k: str(v.dtype) for k, v in arrays.items()},
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(SLSM_MAGIC)
    buf.write(struct.pack("<II", SLSM_VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        buf.write(struct.pack("<Q", flat.size))
        buf.write(flat.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<Q", crc64(body))


def _layout_end(data: bytes, hlen: int) -> int:
    """Offset where the array section claims to end (to tell truncation from corruption)."""
    off = 12 + hlen
    if off + 4 > len(data):
        return off + 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    for _ in range(count):
        if off + 2 > len(data):
            return off + 2
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2 + nlen
        if off + 8 > len(data):
            return off + 8
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8 + 8 * size
    return off


def loads_checkpoint(data: bytes):
    """Inverse of :func:`dumps_checkpoint`; returns ``(config, arrays, meta)``."""
    from .dataset import ChecksumError, MagicError, TruncatedError, VersionError

    if data[:4] != SLSM_MAGIC:
        raise MagicError("not an SLSM file")
    if len(data) < 20:
        raise TruncatedError("checkpoint truncated")
    (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != SLSM_VERSION:
        raise VersionError(f"unsupported SLSM version {version}")
    if crc64(memoryview(data)[:-8]) != stored:
        if _layout_end(data, hlen) > len(data) - 8:
            raise TruncatedError("checkpoint truncated")
        raise ChecksumError("CRC-64 mismatch")
    off = 12
    header = json.loads(data[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8
        flat = np.frombuffer(data, dtype="<f8", count=size, offset=off)
        off += 8 * size
        arrays[name] = flat.reshape(header["shapes"][name]).astype(header["dtypes"][name])
    if off != len(data) - 8:
        raise TruncatedError("array section length mismatch")
    return ModelConfig.from_dict(header["config"]), arrays, header["meta"]


def save_checkpoint(path, cfg: ModelConfig, arrays, meta=None) -> None:
    Path(path).write_bytes(dumps_checkpoint(cfg, arrays, meta))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())
