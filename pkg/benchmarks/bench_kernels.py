"""Time the numba kernels against the numpy fallback, plus one full DICE step.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from dicelab import _kernels


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    x = rng.normal(size=(4096, 64))
    correct = rng.random((8, 20000)) < 0.8
    conf, hit = rng.random(200_000), rng.random(200_000) < 0.7
    return {
        "softplus 4096x64": lambda k: k.softplus(x),
        "sigmoid 4096x64": lambda k: k.sigmoid(x),
        "leaky_relu 4096x64": lambda k: k.leaky_relu(x, 0.2),
        "log_softmax 4096x64": lambda k: k.log_softmax(x),
        "pair_counts M=8 N=20000": lambda k: k.pair_counts(correct),
        "bin_stats n=200000": lambda k: k.bin_stats(conf, hit, 15),
    }


def dice_step_time(repeat):
    from dicelab.config import TrainConfig
    from dicelab.training import init_run, train_step

    rng = np.random.default_rng(0)
    cfg = TrainConfig(variant="DICE", M=4, batch_size=64)
    state = init_run(cfg, 16, 4)
    x, y = rng.normal(size=(64, 16)), rng.integers(0, 4, 64)
    ids = np.arange(64)
    return best_of(lambda: train_step(state, x, y, ids, cfg, epoch=1.0), repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba active: {_kernels.USE_NUMBA}")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in kernel_cases(rng).items():
        t_np = best_of(lambda: fn(_kernels.numpy_impl), args.repeat)
        if _kernels.numba_impl is None:
            print(f"{name:28s} {t_np * 1e3:10.3f} {'-':>10s}")
            continue
        t_nb = best_of(lambda: fn(_kernels.numba_impl), args.repeat)
        print(f"{name:28s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")
    print(f"DICE train_step M=4 B=64: {dice_step_time(max(3, args.repeat // 4)) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
