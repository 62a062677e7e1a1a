import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lwe_attack.instance import (LweParams, acceptance_threshold, check_secret, gen_samples,
                                 gen_secret, make_rng, nomod_fraction, round_half_away,
                                 rounded_gaussian, verify_secret)
from lwe_attack.modq import ContractError, center, mod_matvec

from conftest import DESK_Q


def test_params_defaults_and_validation():
    p = LweParams(n=16, q=97)
    assert p.t == 64 and p.sigma_e == 3.0
    for kw in ({"h": 17}, {"h": -1}, {"sigma_e": -1.0}, {"secret_dist": "gauss"}):
        with pytest.raises(ContractError):
            LweParams(n=16, q=97, **kw)


def test_secret_edge_weights():
    assert gen_secret(LweParams(n=8, q=97, h=0), 1).tolist() == [0] * 8
    assert gen_secret(LweParams(n=8, q=97, h=8), 1).tolist() == [1] * 8


@given(st.integers(0, 2**64 - 1), st.integers(0, 32), st.sampled_from(["binary", "ternary"]))
def test_secret_weight_and_alphabet(seed, h, dist):
    s = gen_secret(LweParams(n=32, q=97, h=h, secret_dist=dist), seed)
    assert np.count_nonzero(s) == h
    allowed = {0, 1} if dist == "binary" else {-1, 0, 1}
    assert set(s.tolist()) <= allowed


def test_ternary_sign_balance():
    p = LweParams(n=64, q=97, h=10, secret_dist="ternary")
    plus = sum(int((gen_secret(p, seed) == 1).sum()) for seed in range(10_000))
    total = 10 * 10_000
    assert abs(plus - total / 2) <= 4 * math.sqrt(total / 4)


def test_round_half_away():
    assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]


def test_rounded_gaussian_zero_sigma():
    assert rounded_gaussian(make_rng(1), 0.0, 5).tolist() == [0] * 5


def test_samples_zero_noise_exact():
    p = LweParams(n=16, q=DESK_Q, sigma_e=0.0, h=4)
    s = gen_secret(p, 3)
    S = gen_samples(p, s, 3)
    assert np.array_equal(S.b, mod_matvec(S.A, s, p.q))


def test_samples_noise_std_and_equation():
    p = LweParams(n=64, q=DESK_Q, h=5)
    s = gen_secret(p, 11)
    S = gen_samples(p, s, 11)
    assert S.A.shape == (256, 64)
    e = S.errors
    assert 2.5 <= e.std() <= 3.5
    assert np.all(np.abs(e) <= 8 * 3)
    assert np.array_equal((mod_matvec(S.A, s, p.q) + e) % p.q, S.b)


def test_samples_deterministic():
    p = LweParams(n=16, q=97, h=3)
    s = gen_secret(p, 5)
    a, b = gen_samples(p, s, 5), gen_samples(p, s, 5)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b)


def test_verify_true_wrong_and_zero():
    p = LweParams(n=64, q=DESK_Q, h=6)
    s = gen_secret(p, 2)
    S = gen_samples(p, s, 2)
    v = verify_secret(S, s)
    assert v.accepted and 2.0 < v.residual_std < 4.0
    wrong = gen_secret(p, 99)
    v = verify_secret(S, wrong)
    assert not v.accepted
    assert abs(v.residual_std - p.q / math.sqrt(12)) < 0.1 * p.q / math.sqrt(12)
    assert not verify_secret(S, np.zeros(64, dtype=np.int64)).accepted


def test_verify_flip_any_bit_rejects():
    rejected = 0
    for seed in range(100):
        p = LweParams(n=32, q=DESK_Q, h=4)
        s = gen_secret(p, seed)
        S = gen_samples(p, s, seed)
        flip = s.copy()
        i = int(make_rng(seed, 99).integers(0, 32))
        flip[i] = 1 - flip[i]
        rejected += not verify_secret(S, flip).accepted
    assert rejected >= 99


def test_acceptance_threshold_value():
    assert acceptance_threshold(1200) == pytest.approx(1200 / (10 * math.sqrt(12)))


def test_check_secret_rejects():
    with pytest.raises(ContractError):
        check_secret([2, 0], 2)
    with pytest.raises(ContractError):
        check_secret([1, 0, 0], 2)


def test_nomod_examples():
    assert nomod_fraction([[3, 2]], [3], [1, 0], 7) == 1.0
    assert nomod_fraction(np.zeros((4, 3), dtype=np.int64), np.zeros(4, dtype=np.int64),
                          [1, 1, 0], 7) == 1.0
    assert nomod_fraction(np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64),
                          [1, 1, 0], 7) == 1.0


def test_nomod_matches_brute_force():
    rng = np.random.default_rng(3)
    q = 1009
    rows = rng.integers(0, q, size=(1000, 12))
    targets = rng.integers(0, q, size=1000)
    s = rng.integers(-1, 2, size=12)
    count = 0
    for row, t in zip(rows.tolist(), targets.tolist()):
        x = sum((v - q if v > q // 2 else v) * si for v, si in zip(row, s.tolist()))
        x -= t - q if t > q // 2 else t
        count += abs(x) * 2 < q
    assert nomod_fraction(rows, targets, s, q) == count / 1000


def test_nomod_uniform_vs_small_rows():
    q = DESK_Q
    p = LweParams(n=64, q=q, h=20)
    s = gen_secret(p, 1)
    S = gen_samples(p, s, 1)
    assert nomod_fraction(S.A, S.b, s, q) < 0.75
    small = center(S.A, q) // 1000 % q
    assert nomod_fraction(small, mod_matvec(small, s, q), s, q) == 1.0
