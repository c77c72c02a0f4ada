"""Consecutive-triple diagnostic for RANDU, the default LC and MT19937.

Writes one x,y,z CSV per generator (for a 3-D scatter) and prints the residue summary.

    python scripts/rng_lattice.py --n 100000 --out lattice/
"""
import argparse
from pathlib import Path

import numpy as np

from perturbgan.noisegen import DEFAULT_LC, RANDU, LcState, lattice_diagnostic, mt_seed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    states = {"RANDU": LcState(RANDU, args.seed), "LC": LcState(DEFAULT_LC, args.seed),
              "MT19937": mt_seed(args.seed)}
    for name, state in states.items():
        rep = lattice_diagnostic(state, args.n)
        print(f"{name:<8} {rep.summary()} chi2_p={rep.chi2_pvalue:.4f}")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            np.savetxt(Path(args.out) / f"{name}.csv", rep.triples, delimiter=",",
                       header="x,y,z", comments="", fmt="%.9f")


if __name__ == "__main__":
    main()
