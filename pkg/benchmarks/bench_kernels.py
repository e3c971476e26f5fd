"""Compare the numba and numpy toy-policy kernels.

    python benchmarks/bench_kernels.py [--tokens 20000] [--states 256] [--vocab 32] [--repeat 20]

Prints best-of-``repeat`` wall time per kernel for both paths and the
speedup, after checking that both paths agree.
"""

import argparse
import timeit

import numpy as np

from dcrkit.grpo import kernels


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=20000)
    ap.add_argument("--states", type=int, default=256)
    ap.add_argument("--vocab", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    logits = rng.normal(size=(args.states, args.vocab))
    states = rng.integers(0, args.states, args.tokens)
    tokens = rng.integers(0, args.vocab, args.tokens)
    coefs = rng.normal(size=args.tokens)
    uniforms = rng.random(args.tokens)
    cases = {
        "gather_logprobs": (kernels.nb_gather_logprobs, kernels.np_gather_logprobs, (logits, states, tokens)),
        "sample_tokens": (kernels.nb_sample_tokens, kernels.np_sample_tokens, (logits, states, uniforms)),
        "scatter_token_grad": (kernels.nb_scatter_token_grad, kernels.np_scatter_token_grad, (logits, states, tokens, coefs)),
    }
    print(f"tokens={args.tokens} states={args.states} vocab={args.vocab} best of {args.repeat}")
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (nb, npf, a) in cases.items():
        np.testing.assert_allclose(nb(*a), npf(*a), rtol=1e-10, atol=1e-12)  # also triggers compilation
        t_nb = min(timeit.repeat(lambda: nb(*a), number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(lambda: npf(*a), number=1, repeat=args.repeat))
        print(f"{name:<20}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
