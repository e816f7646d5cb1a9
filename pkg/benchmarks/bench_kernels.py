"""Time the numpy and numba convolution kernels on the shapes the network uses.

    python3 benchmarks/bench_kernels.py [--repeats N] [--batch B]

Also times one full training step (forward, backward, Adam) under each
backend by re-running this script in a subprocess with FENET_KERNELS set,
since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fenet import _kernels

# (label, c_in, c_out, width, dilation) for one forward call of each layer kind
LAYERS = [
    ("branch d=8", 1, 1, 3, 8),
    ("extractor 4->1", 4, 1, 3, 1),
    ("trunk 1->8", 1, 8, 3, 1),
    ("trunk 8->8", 8, 8, 3, 1),
    ("wide kernel w=7 d=4", 1, 1, 7, 4),
]


def bench_kernels(batch, repeats):
    rng = np.random.default_rng(0)
    print(f"{'layer':<22}{'backend':<8}{'forward us':>12}{'backward us':>13}")
    for label, ci, co, w, d in LAYERS:
        x = rng.standard_normal((batch, ci, 60))
        weight = rng.standard_normal((co, ci, w))
        bias = rng.standard_normal(co)
        g = rng.standard_normal((batch, co, 60))
        for name, (fwd, bwd) in _kernels._BACKENDS.items():
            fwd(x, weight, bias, d)
            bwd(g, x, weight, d)  # compile outside the timed region
            tf = min(timeit.repeat(lambda: fwd(x, weight, bias, d), number=20, repeat=repeats)) / 20
            tb = min(timeit.repeat(lambda: bwd(g, x, weight, d), number=20, repeat=repeats)) / 20
            print(f"{label:<22}{name:<8}{tf * 1e6:>12.1f}{tb * 1e6:>13.1f}")


def train_step_seconds(batch, repeats):
    from fenet.model import FENet
    from fenet.nn import AdamState, adam_step
    from fenet.train import LossWeights, loss_and_grad

    rng = np.random.default_rng(0)
    model = FENet(seed=0)
    X = rng.uniform(0.5, 1.5, (batch, 60))
    Y = rng.integers(0, 2, (batch, 3))
    weights = LossWeights.from_center(0.7)
    state = AdamState()

    def step():
        _, logits, cache = model.forward(X, train=True, rng=rng)
        _, g = loss_and_grad(logits, Y, weights)
        adam_step(model.params, model.backward(cache, g), state)

    step()
    return min(timeit.repeat(step, number=5, repeat=repeats)) / 5


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--step-only", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.step_only:
        print(train_step_seconds(args.batch, args.repeats))
        return
    bench_kernels(args.batch, args.repeats)
    print()
    for name in _kernels._BACKENDS:
        env = dict(os.environ, FENET_KERNELS=name)
        out = subprocess.run(
            [sys.executable, __file__, "--step-only", "--batch", str(args.batch), "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True, check=True,
        )
        print(f"training step, batch {args.batch}, {name}: {float(out.stdout) * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
