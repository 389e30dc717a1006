"""Exact mutual information between a random sequence and its shuffled copy.

Enumerates every sequence over a small alphabet and every shuffle outcome, for
a grid of shuffling rates, and optionally plots I(X*; X) against the rate.

    python3 scripts/probe_mi.py --alphabet 2 --length 5 --plot mi.png
"""

import argparse

import numpy as np

from fsr.scoring import DiscreteSequenceModel, entropy_bits, mutual_information_probe


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--alphabet", type=int, default=2)
    p.add_argument("--length", type=int, default=4)
    p.add_argument("--probs", help="comma-separated symbol probabilities (default uniform)")
    p.add_argument("--plot", help="write a PNG of MI against the shuffling rate")
    args = p.parse_args()

    if args.probs:
        model = DiscreteSequenceModel(tuple(float(v) for v in args.probs.split(",")), args.length)
    else:
        model = DiscreteSequenceModel.uniform(args.alphabet, args.length)
    taus = [k / args.length for k in range(args.length + 1)]
    rows = mutual_information_probe(model, taus)
    print(f"H(X) = {entropy_bits(model):.6f} bits")
    for tau, mi in rows:
        print(f"tau={tau:.3f}  I={mi:.6f}")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        t, mi = np.array(rows).T
        plt.figure(figsize=(4, 3))
        plt.plot(t, mi, "o-")
        plt.xlabel("shuffling rate")
        plt.ylabel("I(shuffled; original) [bits]")
        plt.tight_layout()
        plt.savefig(args.plot, dpi=120)


if __name__ == "__main__":
    main()
