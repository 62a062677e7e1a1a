import csv
import io

import numpy as np
import pytest

from lwe_attack.dataset import TrainSet, pretrain_set, synthesize_reduced
from lwe_attack.instance import LweParams, gen_secret
from lwe_attack.model import ModelConfig, forward
from lwe_attack.modq import ContractError
from lwe_attack.train import (Checkpoint, TrainConfig, TrainingDiverged, _batch_indices,
                              finetune, held_out_loss, init_checkpoint, learning_rate, pretrain,
                              run_attack, train)

from conftest import DESK_Q

N = 12


def model(tokens=0):
    return ModelConfig(n=N, q=DESK_Q, layers=1, d_model=16, heads=2, secret_tokens=tokens)


def data(count=256, seed=0, rho=0.2):
    p = LweParams(n=N, q=DESK_Q, h=2)
    return synthesize_reduced(p, rho, count, gen_secret(p, seed), seed)


def same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_config_contracts():
    with pytest.raises(ContractError):
        TrainConfig(lr=-1)
    with pytest.raises(ContractError):
        TrainConfig(warmup=10, max_steps=5)
    assert TrainConfig.from_dict(TrainConfig(lr=3e-4).to_dict()).lr == 3e-4


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=1e-3, warmup=10, max_steps=100)
    assert learning_rate(cfg, 1) == pytest.approx(1e-4)
    assert learning_rate(cfg, 5) == pytest.approx(5e-4)
    assert learning_rate(cfg, 10) == learning_rate(cfg, 99) == 1e-3


def test_zero_rate_keeps_parameters_despite_decay():
    ck = init_checkpoint(model(), 0)
    before = {k: v.copy() for k, v in ck.params.items()}
    ck, _ = train(ck, data(), TrainConfig(lr=0.0, weight_decay=0.5, warmup=0, max_steps=7))
    assert ck.step == 7 and same(before, ck.params)


def test_warmup_visible_in_event_log():
    cfg = TrainConfig(lr=2e-3, warmup=8, max_steps=12, log_every=1)
    _, ev = train(init_checkpoint(model(), 0), data(), cfg)
    rows = list(csv.DictReader(io.StringIO(ev.to_csv())))
    rates = {int(r["step"]): float(r["lr"]) for r in rows if r["event"] == "train"}
    for k in range(1, 8):
        assert rates[k] == pytest.approx(2e-3 * k / 8)
    assert all(rates[k] == 2e-3 for k in range(8, 13))


def test_event_csv_without_wall_times_is_stable():
    cfg = TrainConfig(max_steps=6, warmup=2, log_every=2)
    a = train(init_checkpoint(model(), 1), data(), cfg)[1].to_csv(wall=False)
    b = train(init_checkpoint(model(), 1), data(), cfg)[1].to_csv(wall=False)
    assert a == b
    assert a.splitlines()[0] == "step,loss,lr,event,verdict,wall_seconds,note"


def test_resume_is_bit_exact(tmp_path):
    ts = data(100)
    cfg = TrainConfig(lr=1e-3, warmup=5, max_steps=20, batch_size=32)
    full, _ = train(init_checkpoint(model(), 3), ts, cfg)
    half, _ = train(init_checkpoint(model(), 3), ts, cfg, stop_at=9)
    half.save(tmp_path / "half.slsm")
    resumed, _ = train(Checkpoint.load(tmp_path / "half.slsm"), ts, cfg)
    assert resumed.step == 20
    assert same(full.params, resumed.params) and same(full.m, resumed.m) and same(full.v, resumed.v)


def test_checkpoint_bytes_round_trip():
    ck = init_checkpoint(model(2), 4)
    ck.step = 17
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert back.step == 17 and back.model == ck.model
    assert same(back.params, ck.params) and back.meta["provenance"] == "random"


def test_epochs_visit_every_row_once():
    cfg = TrainConfig(batch_size=7, max_steps=100, warmup=0)
    cache = {}
    seen = np.concatenate([_batch_indices(20, cfg, k, cache) for k in range(1, 21)])
    for e in range(7):
        assert sorted(seen[e * 20:(e + 1) * 20]) == list(range(20))


def test_divergence_raises():
    ck = init_checkpoint(model(), 0)
    ck.params["head.W"][0, 0] = np.inf
    with pytest.raises(TrainingDiverged):
        train(ck, data(), TrainConfig(max_steps=3, warmup=0))


def test_empty_and_mismatched_sets():
    empty = TrainSet(np.zeros((0, N), dtype=np.int64), np.zeros(0, dtype=np.int64), DESK_Q)
    with pytest.raises(ContractError):
        train(init_checkpoint(model(), 0), empty, TrainConfig(max_steps=1, warmup=0))
    other = ModelConfig(n=N + 1, q=DESK_Q, layers=1, d_model=16, heads=2)
    with pytest.raises(ContractError):
        train(init_checkpoint(other, 0), data(), TrainConfig(max_steps=1, warmup=0))


class _Report:
    def __init__(self, ok):
        self.accepted = ok


def test_hook_period_and_early_exit():
    calls = []

    def hook(params, cfg, step):
        calls.append(step)
        return _Report(step >= 6)

    cfg = TrainConfig(max_steps=50, warmup=0, distinguish_period=3)
    ck, ev = train(init_checkpoint(model(), 0), data(), cfg, hook)
    assert calls == [3, 6] and ck.step == 6
    assert ev.recovery is not None
    verdicts = [r["verdict"] for r in ev.records if r["event"] == "recovery"]
    assert verdicts == ["rejected", "accepted"]


def test_run_attack_adds_final_attempt():
    calls = []

    def hook(params, cfg, step):
        calls.append(step)
        return _Report(False)

    run_attack(init_checkpoint(model(), 0), data(), TrainConfig(max_steps=7, warmup=0,
                                                                distinguish_period=3), hook)
    assert calls == [3, 6, 7]


def test_sample_cap_limits_rows():
    ts = data(200)
    capped, _ = train(init_checkpoint(model(), 0), ts,
                      TrainConfig(max_steps=10, warmup=0, batch_size=16, sample_cap=20))
    direct, _ = train(init_checkpoint(model(), 0), ts.subset(20),
                      TrainConfig(max_steps=10, warmup=0, batch_size=16))
    assert same(capped.params, direct.params)


# ---------------------------------------------------------------- pre-training / fine-tuning

def tokened(S=3, rows=64):
    p = LweParams(n=N, q=DESK_Q, h=2)
    base = synthesize_reduced(p, 0.2, rows, gen_secret(p, 0), 0).rows
    return pretrain_set(base, [gen_secret(p, 10 + i) for i in range(S)], p, 1)


def test_pretrain_contracts():
    with pytest.raises(ContractError):
        pretrain(model(0), tokened(), TrainConfig(max_steps=2, warmup=0))
    with pytest.raises(ContractError):
        pretrain(model(2), tokened(3), TrainConfig(max_steps=2, warmup=0))
    with pytest.raises(ContractError):
        pretrain(model(3), data(), TrainConfig(max_steps=2, warmup=0))
    theta = pretrain(model(3), tokened(), TrainConfig(max_steps=4, warmup=0))
    assert theta.step == 4 and theta.meta["pretrain_steps"] == 4


def test_finetune_initialisation():
    theta = pretrain(model(3), tokened(), TrainConfig(max_steps=4, warmup=0))
    ck, ev = finetune(theta, data(), TrainConfig(max_steps=0, warmup=0))
    assert ck.step == 0 and ck.meta["provenance"] == "pretrained@4"
    assert ev.records[0]["note"] == "pretrained@4"
    for k in theta.params:
        if k == "embed.secret":
            assert np.array_equal(ck.params[k][1:], theta.params[k][1:])
            assert not np.array_equal(ck.params[k][0], theta.params[k][0])
        else:
            assert np.array_equal(ck.params[k], theta.params[k])
    assert all(not a.any() for a in ck.m.values())
    # the only difference between t_0 and token 1 outputs is the embedding row
    row = data().rows[0]
    swapped = {k: v.copy() for k, v in ck.params.items()}
    swapped["embed.secret"][0] = swapped["embed.secret"][1]
    assert np.array_equal(forward(swapped, ck.model, row, 0), forward(ck.params, ck.model, row, 1))


def test_finetune_contracts():
    theta = pretrain(model(3), tokened(), TrainConfig(max_steps=2, warmup=0))
    with pytest.raises(ContractError):
        finetune(theta, tokened(), TrainConfig(max_steps=1, warmup=0))
    with pytest.raises(ContractError):
        finetune(init_checkpoint(model(0), 0), data(), TrainConfig(max_steps=1, warmup=0))
    broken = Checkpoint(theta.model, dict(theta.params, **{"head.W": np.zeros((3, 3), np.float32)}),
                        theta.m, theta.v, theta.step)
    with pytest.raises(ContractError):
        finetune(broken, data(), TrainConfig(max_steps=1, warmup=0))


def test_held_out_loss_drops_with_training():
    ts = data(2048, rho=0.1)
    cfg = TrainConfig(lr=1e-3, warmup=20, max_steps=150, batch_size=32)
    ck0 = init_checkpoint(model(), 2)
    start = held_out_loss(ck0, ts.subset(256))
    ck, _ = train(ck0, ts, cfg)
    assert held_out_loss(ck, ts.subset(256)) < start
