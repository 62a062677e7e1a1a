"""Compare the numba kernels with the pure-numpy fallback.

Each mode runs in a fresh interpreter because the switch is read at import
time. Usage: ``python benchmarks/bench_jit.py [--repeat N]``.
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKLOADS = ("lll_20", "polish_20", "crc64_256k", "train_step_d64")


def _best(fn, repeat):
    fn()  # warm-up (includes compilation when JIT is on)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def measure(repeat: int) -> dict:
    import numpy as np

    from lwe_attack.checksum import crc64
    from lwe_attack.instance import LweParams, gen_samples, gen_secret
    from lwe_attack.dataset import subsample, synthesize_reduced
    from lwe_attack.model import ModelConfig
    from lwe_attack.reduction import build_lambda, lll_reduce, polish
    from lwe_attack.train import TrainConfig, init_checkpoint, train

    p = LweParams(n=10, q=1048573, h=3)
    S = gen_samples(p, gen_secret(p, 0), 0)
    _, A_sub, _ = subsample(S, 10, 0)
    basis = build_lambda(A_sub, p.q, 10).basis
    reduced = lll_reduce(basis, 0.99)
    blob = np.random.default_rng(0).integers(0, 256, 1 << 18, dtype=np.uint8).tobytes()

    P64 = LweParams(n=64, q=1048573, h=3)
    data = synthesize_reduced(P64, 0.3, 4096, gen_secret(P64, 0), 0)
    model = ModelConfig(n=64, q=1048573, layers=2, d_model=64, heads=4)
    cfg = TrainConfig(max_steps=5, warmup=0)

    def step():
        train(init_checkpoint(model, 0), data, cfg)

    return {
        "lll_20": _best(lambda: lll_reduce(basis, 0.99), repeat),
        "polish_20": _best(lambda: polish(reduced), repeat),
        "crc64_256k": _best(lambda: crc64(blob), repeat),
        "train_step_d64": _best(step, repeat) / cfg.max_steps,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(measure(args.repeat)))
        return
    results = {}
    for mode, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, LWE_ATTACK_NO_JIT=flag)
        out = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        results[mode] = json.loads(out.stdout.strip().splitlines()[-1])
    print(f"{'workload':<16}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for w in WORKLOADS:
        a, b = results["numba"][w], results["numpy"][w]
        print(f"{w:<16}{a:>12.5f}{b:>12.5f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
