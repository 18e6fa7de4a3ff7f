"""Time each numba kernel against its numpy twin on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The numba timings exclude compilation (one warm-up call first).
"""
import argparse
import timeit

import numpy as np

from moedisco import _kernels as K


def cases(rng):
    points = rng.standard_normal((4000, 64))
    cents = rng.standard_normal((4, 64))
    logits = rng.standard_normal((512, 4))
    idx = rng.integers(0, 40, 512)
    grad = rng.standard_normal((512, 64))
    table = rng.standard_normal((40, 64))
    lengths = rng.integers(40, 90, 3000)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    tokens = rng.integers(0, 40, offsets[-1])
    x = rng.standard_normal(512 * 128)
    vocab_logits = rng.standard_normal((512, 40))
    return {
        "kmeans_assign": (points, cents),
        "topk_route": (logits, 2),
        "embedding_backward": (idx, grad, 40),
        "mean_pool": (table, tokens, offsets),
        "gelu": (x,),
        "softmax_xent": (vocab_logits, idx),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, call_args in cases(np.random.default_rng(0)).items():
        fnp, fnb = getattr(K, "np_" + name), getattr(K, "nb_" + name)
        fnb(*call_args)
        t_np = min(timeit.repeat(lambda: fnp(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fnb(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
