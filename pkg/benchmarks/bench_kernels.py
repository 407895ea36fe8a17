"""Time the inference kernels under each available backend.

    python3 benchmarks/bench_kernels.py [--hidden 64] [--repeat 5]

Reports per-call time for ``encode`` and a batched ``decoder_step`` plus an
end-to-end beam search, for the numpy fallback and the compiled extension.
"""
import argparse
import time

import numpy as np

from biagree import kernels
from biagree.decoding import DecodeConfig, beam_search
from biagree.seq2seq import L2R, DirectionalModel, ModelConfig, Vocab


def best_of(fn, repeat, number):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        for _ in range(number):
            fn()
        times.append((time.perf_counter() - t) / number)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vocab", type=int, default=10)
    ap.add_argument("--emb", type=int, default=32)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--attn", type=int, default=64)
    ap.add_argument("--src-len", type=int, default=12)
    ap.add_argument("--rows", type=int, default=8, help="decoder rows per step (beam width)")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    vocab = Vocab([f"w{i}" for i in range(args.vocab)])
    cfg = ModelConfig(len(vocab), len(vocab), args.emb, args.hidden, args.attn)
    model = DirectionalModel.create(cfg, L2R, 0, vocab, vocab)
    P = {k: model.params[k] for k in model.params.names()}
    rng = np.random.default_rng(0)
    src = rng.integers(3, len(vocab), size=args.src_len)
    prev = rng.integers(3, len(vocab), size=args.rows)

    results = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        H, K, s0 = kernels.encode(P, src)
        S = np.repeat(s0[None, :], args.rows, axis=0)
        results[name] = {
            "encode": best_of(lambda: kernels.encode(P, src), args.repeat, 200),
            "decoder_step": best_of(lambda: kernels.decoder_step(P, H, K, prev, S), args.repeat, 500),
            "beam8": best_of(lambda: beam_search(model, tuple(src), DecodeConfig(8, 1.0, 2 * args.src_len)),
                             args.repeat, 20),
        }
    print(f"{'kernel':<14}" + "".join(f"{n:>14}" for n in results) +
          ("   speedup" if len(results) > 1 else ""))
    for op in ("encode", "decoder_step", "beam8"):
        row = f"{op:<14}" + "".join(f"{results[n][op] * 1e6:>12.1f}us" for n in results)
        if "cython" in results and "python" in results:
            row += f"   {results['python'][op] / results['cython'][op]:6.2f}x"
        print(row)


if __name__ == "__main__":
    main()
