"""Named parameter bundles for the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

# Bases for a deterministic Miller-Rabin test valid for all n < 3.3e24.
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)


def is_probable_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for ``n < 3.3e24``."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def prime_below(bound: int) -> int:
    """Largest prime strictly below ``bound``."""
    c = bound - 1
    while not is_probable_prime(c):
        c -= 1
    return c


@dataclass(frozen=True)
class Preset:
    name: str
    n: int
    q: int
    sigma_e: float
    omega: int
    m: int
    d_model: int
    heads: int
    layers: int
    batch_size: int
    lr: float
    warmup: int
    vocab_base: int
    vocab_bucket: int
    desk_runnable: bool = True


_DESK_Q = prime_below(1 << 20)

PRESETS = {
    "desk64": Preset(
        name="desk64", n=64, q=_DESK_Q, sigma_e=3.0, omega=10, m=64,
        d_model=64, heads=4, layers=2, batch_size=64, lr=1e-4, warmup=200,
        vocab_base=_DESK_Q // 10 + 1, vocab_bucket=128,
    ),
    "paper512": Preset(
        name="paper512", n=512, q=2199023255531, sigma_e=3.0, omega=10, m=512,
        d_model=512, heads=8, layers=4, batch_size=256, lr=1e-6, warmup=3000,
        vocab_base=137438953471, vocab_bucket=134217728, desk_runnable=False,
    ),
    "paper768": Preset(
        name="paper768", n=768, q=34088624597, sigma_e=3.0, omega=10, m=768,
        d_model=512, heads=8, layers=4, batch_size=128, lr=1e-6, warmup=3000,
        vocab_base=1893812477, vocab_bucket=378762, desk_runnable=False,
    ),
    "paper1024": Preset(
        name="paper1024", n=1024, q=607817174438671, sigma_e=3.0, omega=10, m=1024,
        d_model=512, heads=8, layers=4, batch_size=128, lr=1e-6, warmup=3000,
        vocab_base=25325715601611, vocab_bucket=5065143120, desk_runnable=False,
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
