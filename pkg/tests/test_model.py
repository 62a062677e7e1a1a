import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lwe_attack.dataset import ChecksumError, MagicError, TruncatedError, VersionError
from lwe_attack.model import (MAX_VOCAB, ModelConfig, NonFiniteError, angular_embed,
                              backward_batch, decode_angle, dumps_checkpoint, forward,
                              forward_batch, init_params, load_checkpoint, loads_checkpoint,
                              loss, loss_and_grads, loss_grad, param_shapes, predict,
                              save_checkpoint, tokenize_vocab)
from lwe_attack.modq import ContractError
from lwe_attack.presets import PRESETS


def small(embedding="angular", secret_tokens=0, layers=1, d=8, heads=2, n=5, q=97, **kw):
    extra = dict(vocab_base=10, vocab_bucket=3) if embedding == "vocab" else {}
    extra.update(kw)
    return ModelConfig(n=n, q=q, layers=layers, d_model=d, heads=heads, ffn_mult=2,
                       embedding=embedding, secret_tokens=secret_tokens, dtype="float64", **extra)


def params_for(cfg, seed=0, std=0.3):
    p = init_params(cfg, np.random.default_rng(seed), std)
    rng = np.random.default_rng(seed + 100)
    for k, a in p.items():
        if a.ndim == 1:   # perturb gains and biases too so every path is exercised
            a += rng.normal(0, 0.2, a.shape)
    return p


# ---------------------------------------------------------------- embedding

def test_angular_examples():
    assert np.allclose(angular_embed(0, 97), (0.0, 1.0), atol=1e-15)
    assert np.allclose(angular_embed(25, 100), (1.0, 0.0), atol=1e-15)
    pts = angular_embed(np.arange(1000), 1000)
    assert np.allclose(np.linalg.norm(pts, axis=-1), 1.0, atol=1e-12)
    q = 1009
    near = np.linalg.norm(angular_embed(0, q) - angular_embed(q - 1, q))
    far = np.linalg.norm(angular_embed(0, q) - angular_embed(q // 2, q))
    assert abs(near - 2 * math.pi / q) < 1e-4 and abs(far - 2) < 1e-4
    with pytest.raises(ContractError):
        angular_embed(97, 97)


@pytest.mark.parametrize("q", [97, 9973])
def test_decode_round_trip_exhaustive(q):
    b = np.arange(q)
    assert np.array_equal(decode_angle(angular_embed(b, q), q), b)


def test_decode_examples():
    assert decode_angle((0.0, 1.0), 97) == 0
    p = angular_embed(40, 97)
    assert decode_angle(5 * p, 97) == 40
    with pytest.raises(ContractError):
        decode_angle((0.0, 0.0), 97)


@given(st.integers(2, 10_000), st.data())
def test_decode_round_trip_property(q, data):
    b = data.draw(st.integers(0, q - 1))
    scale = data.draw(st.floats(1e-3, 1e3))
    assert decode_angle(scale * angular_embed(b, q), q) == b


def test_tokenize_examples():
    assert tokenize_vocab(0, 97, 10, 3) == (0, 0)
    assert tokenize_vocab(10, 97, 10, 3) == (1, 0)
    assert tokenize_vocab(96, 97, 10, 3) == (9, 2)
    p = PRESETS["paper512"]
    assert (p.q, p.vocab_base, p.vocab_bucket) == (2199023255531, 137438953471, 134217728)
    with pytest.raises(ContractError):
        tokenize_vocab(5, 97, 97, 1)
    with pytest.raises(ContractError):
        tokenize_vocab(5, 10**6, 10, 1)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_vocab_bound(name):
    p = PRESETS[name]
    cfg = ModelConfig(n=p.n, q=p.q, layers=1, d_model=8, heads=2, embedding="vocab",
                      vocab_base=p.vocab_base, vocab_bucket=p.vocab_bucket)
    assert cfg.vocab_size < MAX_VOCAB
    hi, lo = tokenize_vocab(np.array([0, p.q - 1]), p.q, p.vocab_base, p.vocab_bucket)
    assert hi.max() < cfg.high_tokens and lo.max() < cfg.low_tokens


def test_config_contracts():
    with pytest.raises(ContractError):
        ModelConfig(n=4, q=97, d_model=10, heads=4)
    with pytest.raises(ContractError):
        ModelConfig(n=4, q=97, embedding="onehot")
    with pytest.raises(ContractError):
        ModelConfig(n=4, q=10**6, embedding="vocab", vocab_base=10, vocab_bucket=1)
    cfg = small(secret_tokens=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert param_shapes(cfg)["embed.pos"] == (6, 8)
    assert param_shapes(small("vocab"))["embed.pos"] == (11, 8)


# ---------------------------------------------------------------- reference forward

def _ln(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + eps) * gg + bb for x, gg, bb in zip(v, g, b)]


def _matvec(v, W):
    return [sum(v[i] * W[i][j] for i in range(len(v))) for j in range(len(W[0]))]


def _add(u, v):
    return [a + b for a, b in zip(u, v)]


def reference_forward(P, cfg, row, token=None):
    """Position-by-position float64 forward written without numpy broadcasting."""
    d, H = cfg.d_model, cfg.heads
    dh = d // H
    W = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in P.items()}
    seq = []
    if token is not None:
        seq.append(_add(W["embed.secret"][token], W["embed.pos"][0]))
    for j, a in enumerate(row):
        t = 2 * math.pi * a / cfg.q
        e = _matvec([math.sin(t), math.cos(t)], W["embed.W"])
        seq.append(_add(e, W["embed.pos"][j + 1]))
    for i in range(cfg.layers):
        p = f"layer{i}."
        u = [_ln(x, W[p + "ln1.g"], W[p + "ln1.b"]) for x in seq]
        Qs = [_add(_matvec(x, W[p + "attn.Wq"]), W[p + "attn.bq"]) for x in u]
        Ks = [_add(_matvec(x, W[p + "attn.Wk"]), W[p + "attn.bk"]) for x in u]
        Vs = [_add(_matvec(x, W[p + "attn.Wv"]), W[p + "attn.bv"]) for x in u]
        outs = []
        for r in range(len(seq)):
            o = [0.0] * d
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                sc = [sum(a * b for a, b in zip(Qs[r][sl], Ks[c][sl])) / math.sqrt(dh)
                      for c in range(len(seq))]
                mx = max(sc)
                ex = [math.exp(s - mx) for s in sc]
                tot = sum(ex)
                for c in range(len(seq)):
                    for k in range(dh):
                        o[h * dh + k] += ex[c] / tot * Vs[c][h * dh + k]
            outs.append(o)
        seq = [_add(x, _add(_matvec(o, W[p + "attn.Wo"]), W[p + "attn.bo"])) for x, o in zip(seq, outs)]
        new = []
        for x in seq:
            z = _add(_matvec(_ln(x, W[p + "ln2.g"], W[p + "ln2.b"]), W[p + "ffn.W1"]), W[p + "ffn.b1"])
            g = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3))) for v in z]
            new.append(_add(x, _add(_matvec(g, W[p + "ffn.W2"]), W[p + "ffn.b2"])))
        seq = new
    fin = [_ln(x, W["final.g"], W["final.b"]) for x in seq]
    pooled = [max(x[k] for x in fin) for k in range(d)]
    return np.array(_matvec(pooled, W["head.W"]))


@pytest.mark.parametrize("tokens", [0, 3])
def test_matches_reference_forward(tokens):
    cfg = small(secret_tokens=tokens)
    P = params_for(cfg, 1)
    rng = np.random.default_rng(2)
    for _ in range(5):
        row = rng.integers(0, cfg.q, cfg.n)
        tok = int(rng.integers(0, 4)) if tokens else None
        ref = reference_forward(P, cfg, row.tolist(), tok)
        assert np.abs(forward(P, cfg, row, tok) - ref).max() < 1e-10


def test_two_layer_reference_and_batch_agree():
    cfg = small(layers=2)
    P = params_for(cfg, 3)
    X = np.random.default_rng(4).integers(0, cfg.q, (6, cfg.n))
    out, _ = forward_batch(P, cfg, X)
    for r in range(6):
        assert np.abs(out[r] - reference_forward(P, cfg, X[r].tolist())).max() < 1e-10
    assert np.array_equal(predict(P, cfg, X, batch=4), out)


# ---------------------------------------------------------------- architecture properties

def test_permuting_coordinates_with_positions():
    cfg = small()
    P = params_for(cfg, 5)
    row = np.random.default_rng(6).integers(0, cfg.q, cfg.n)
    i, j = 1, 3
    Q = {k: v.copy() for k, v in P.items()}
    Q["embed.pos"][[i + 1, j + 1]] = Q["embed.pos"][[j + 1, i + 1]]
    swapped = row.copy()
    swapped[[i, j]] = swapped[[j, i]]
    assert np.allclose(forward(P, cfg, row), forward(Q, cfg, swapped), atol=1e-12)


def test_zero_head_gives_zero_output():
    cfg = small()
    P = params_for(cfg, 7)
    P["head.W"][:] = 0
    X = np.random.default_rng(8).integers(0, cfg.q, (10, cfg.n))
    assert np.all(forward_batch(P, cfg, X)[0] == 0)


def test_maxpool_ties_go_to_lowest_position():
    cfg = small()
    P = params_for(cfg, 9)
    P["embed.pos"][:] = 0
    X = np.full((2, cfg.n), 11)
    _, cache = forward_batch(P, cfg, X)
    assert np.all(cache["idx"] == 0)


def test_shape_errors():
    cfg = small(secret_tokens=2)
    P = params_for(cfg)
    with pytest.raises(ContractError):
        forward(P, cfg, np.zeros(cfg.n + 1, dtype=np.int64))
    with pytest.raises(ContractError):
        forward(P, cfg, np.zeros(cfg.n, dtype=np.int64), 3)


def test_deterministic_forward_backward():
    cfg = small(layers=2)
    P = params_for(cfg, 2)
    X = np.random.default_rng(0).integers(0, cfg.q, (8, cfg.n))
    b = np.random.default_rng(1).integers(0, cfg.q, 8)
    l1, g1 = loss_and_grads(P, cfg, X, b)
    l2, g2 = loss_and_grads(P, cfg, X, b)
    assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g1)


# ---------------------------------------------------------------- loss

def test_loss_examples():
    q = 97
    assert loss(angular_embed(13, q), 13, q) == pytest.approx(0.0, abs=1e-24)
    assert loss(-angular_embed(13, q), 13, q) == pytest.approx(4.0)
    g = loss_grad(np.zeros((4, 2)), np.zeros(4, dtype=np.int64), q)
    assert np.allclose(g, np.tile([0.0, -2.0 / 4], (4, 1)))


# ---------------------------------------------------------------- gradients

def finite_difference(P, cfg, X, b, tok, name, h=1e-4):
    out = np.zeros_like(P[name])
    flat = P[name].reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss(forward_batch(P, cfg, X, tok, need_cache=False)[0], b, cfg.q)
        flat[i] = old - h
        dn = loss(forward_batch(P, cfg, X, tok, need_cache=False)[0], b, cfg.q)
        flat[i] = old
        out.reshape(-1)[i] = (up - dn) / (2 * h)
    return out


# Softmax is invariant to adding the same vector to every key, so the key bias
# has an exact zero gradient; its check is absolute rather than relative.
ZERO_GRAD_FLOOR = 1e-8


@pytest.mark.parametrize("embedding,tokens", [("angular", 0), ("angular", 2), ("vocab", 2)])
def test_gradients_match_finite_differences(embedding, tokens):
    cfg = small(embedding, tokens)
    P = params_for(cfg, 11)
    rng = np.random.default_rng(12)
    X = rng.integers(0, cfg.q, (4, cfg.n))
    b = rng.integers(0, cfg.q, 4)
    tok = rng.integers(0, tokens + 1, 4) if tokens else None
    _, grads = loss_and_grads(P, cfg, X, b, tok)
    for name in P:
        fd = finite_difference(P, cfg, X, b, tok, name)
        err = np.linalg.norm(grads[name] - fd)
        scale = max(np.linalg.norm(fd), np.linalg.norm(grads[name]))
        if scale < ZERO_GRAD_FLOOR:
            continue
        assert err / scale < 1e-4, name


def test_key_bias_gradient_is_zero():
    cfg = small()
    P = params_for(cfg, 3)
    X = np.random.default_rng(0).integers(0, cfg.q, (4, cfg.n))
    _, g = loss_and_grads(P, cfg, X, np.arange(4))
    assert np.abs(g["layer0.attn.bk"]).max() < 1e-12


def test_empty_batch_zero_grads():
    cfg = small()
    P = params_for(cfg)
    value, g = loss_and_grads(P, cfg, np.zeros((0, cfg.n), dtype=np.int64), np.zeros(0, dtype=np.int64))
    assert value == 0.0 and all(not a.any() for a in g.values())


def test_unused_secret_rows_have_zero_gradient():
    cfg = small(secret_tokens=4)
    P = params_for(cfg)
    X = np.random.default_rng(0).integers(0, cfg.q, (6, cfg.n))
    _, g = loss_and_grads(P, cfg, X, np.arange(6), np.array([0, 2, 2, 0, 2, 0]))
    assert not g["embed.secret"][[1, 3, 4]].any()
    assert g["embed.secret"][[0, 2]].any()


def test_non_finite_loss_is_reported():
    cfg = small()
    P = params_for(cfg)
    P["head.W"][0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        loss_and_grads(P, cfg, np.zeros((2, cfg.n), dtype=np.int64), np.zeros(2, dtype=np.int64))


def test_float32_backward_close_to_float64():
    cfg64 = small(layers=2)
    cfg32 = ModelConfig(**dict(cfg64.to_dict(), dtype="float32"))
    P64 = params_for(cfg64, 4, std=0.1)
    P32 = {k: v.astype(np.float32) for k, v in P64.items()}
    X = np.random.default_rng(1).integers(0, 97, (8, cfg64.n))
    b = np.arange(8)
    _, g64 = loss_and_grads(P64, cfg64, X, b)
    _, g32 = loss_and_grads(P32, cfg32, X, b)
    for k in g64:
        assert g32[k].dtype == np.float32
        scale = max(np.abs(g64[k]).max(), 1e-6)
        assert np.abs(g32[k] - g64[k]).max() / scale < 1e-3, k


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = small(secret_tokens=2)
    P = params_for(cfg)
    save_checkpoint(tmp_path / "m.slsm", cfg, P, {"step": 7})
    cfg2, Q, meta = load_checkpoint(tmp_path / "m.slsm")
    assert cfg2 == cfg and meta == {"step": 7}
    assert all(np.array_equal(P[k], Q[k]) and Q[k].dtype == P[k].dtype for k in P)
    assert dumps_checkpoint(cfg2, Q, meta) == (tmp_path / "m.slsm").read_bytes()


def test_checkpoint_float32_exact():
    cfg = ModelConfig(n=4, q=97, layers=1, d_model=8, heads=2)
    P = init_params(cfg, np.random.default_rng(0))
    _, Q, _ = loads_checkpoint(dumps_checkpoint(cfg, P))
    assert all(np.array_equal(P[k], Q[k]) and Q[k].dtype == np.float32 for k in P)


def test_checkpoint_corruption():
    cfg = small()
    data = bytearray(dumps_checkpoint(cfg, params_for(cfg)))
    bad = bytearray(data)
    bad[-20] ^= 1
    with pytest.raises(ChecksumError):
        loads_checkpoint(bytes(bad))
    with pytest.raises(TruncatedError):
        loads_checkpoint(bytes(data[:-100]))
    with pytest.raises(MagicError):
        loads_checkpoint(b"SLSF" + bytes(data[4:]))
    ver = bytearray(data)
    ver[4] = 2
    with pytest.raises(VersionError):
        loads_checkpoint(bytes(ver))
