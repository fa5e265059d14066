"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--trials N]

Times the three hot loops (hindsight posterior rows, batched FSM decoding,
batched FSM posterior) on identical pre-drawn inputs, so the comparison is
pure loop execution.
"""

import argparse
import time

import numpy as np

from gumbelcf import _kernels_py
from gumbelcf.gumbel import standard_gumbel_from_uniform, uniform_open
from gumbelcf.models import TableLm, Vocabulary

try:
    from gumbelcf import _kernels_cy
except ImportError:
    _kernels_cy = None


def _table(rng, vocab_size, order):
    import itertools

    symbols = tuple(f"s{i}" for i in range(vocab_size - 1)) + ("<eos>",)
    vocab = Vocabulary(symbols, vocab_size - 1)
    rows = {}
    for length in range(order):
        for ctx in itertools.product(range(vocab_size), repeat=length):
            rows[ctx] = rng.normal(size=vocab_size)
    return TableLm(vocab, order, rows)


def bench(label, fn, repeats=5):
    fn()  # warm up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return label, min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=100_000)
    parser.add_argument("--vocab-size", type=int, default=8)
    parser.add_argument("--max-len", type=int, default=8)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n, t, v = args.trials, args.max_len, args.vocab_size
    lm = _table(rng, v, 2)
    fsm = lm.to_fsm()
    clamp = np.full(t, -1, dtype=np.int32)

    logits = rng.normal(size=(n, v))
    observed = rng.integers(0, v, size=n).astype(np.int64)
    u_rows = uniform_open(rng, (n, v))
    noise = standard_gumbel_from_uniform(uniform_open(rng, (n, t, v)))
    u_post = uniform_open(rng, (n, t, v))
    tokens, lengths = _kernels_py.fsm_decode(fsm.rows, fsm.next_state, fsm.start, noise, fsm.eos_id, clamp)

    backends = [("py", _kernels_py)]
    if _kernels_cy is not None:
        backends.append(("cy", _kernels_cy))

    cases = {
        "posterior_rows": lambda impl: impl.posterior_rows(logits, observed, u_rows),
        "fsm_decode": lambda impl: impl.fsm_decode(
            fsm.rows, fsm.next_state, fsm.start, noise, fsm.eos_id, clamp
        ),
        "fsm_posterior": lambda impl: impl.fsm_posterior(
            fsm.rows, fsm.next_state, fsm.start, tokens, lengths, u_post, clamp
        ),
    }

    print(f"trials={n} max_len={t} vocab={v}")
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    for case, runner in cases.items():
        row = []
        for _, impl in backends:
            _, secs = bench(case, lambda impl=impl: runner(impl))
            row.append(secs)
        speedup = f"{row[0] / row[-1]:.1f}x" if len(row) > 1 else "-"
        print(f"{case:<16}" + "".join(f"{secs * 1e3:>10.1f}ms" for secs in row) + f"{speedup:>10}")


if __name__ == "__main__":
    main()
