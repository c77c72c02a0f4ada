"""Parameter counts for every generator and critic at the reference base width.

    python scripts/param_table.py [--base-width 1024]
"""
import argparse

from perturbgan.models import (DISCRIMINATORS, GENERATORS, build_named, generator_spec,
                               matched_stage_ratios)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--base-width", type=int, default=1024)
    args = ap.parse_args()
    counts = {m: build_named(m, args.base_width)[1].count() for m in GENERATORS + DISCRIMINATORS}
    print(f"{'model':<6} {'params':>12} {'vs CG/CD':>9}")
    for m, n in counts.items():
        ref = counts["CG"] if m in GENERATORS else counts["CD"]
        print(f"{m:<6} {n:>12,} {n / ref:>9.4f}")
    for m in ("PGv1", "PGv2", "PGv3"):
        rows = matched_stage_ratios(generator_spec(m, args.base_width), generator_spec("CG", args.base_width))
        print(f"{m}: " + ", ".join(f"{a}/{b}={f}" for a, b, f in rows))


if __name__ == "__main__":
    main()
