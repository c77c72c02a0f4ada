"""Smoke protocol repeated over mask seeds for one RNG/distribution pairing.

Used to calibrate the MT(SND) spread threshold and to report the LC(UD) runs.

    python scripts/rng_kind_sweep.py --rng-kind MT19937 --dist-kind SND --seeds 0,1,2
    python scripts/rng_kind_sweep.py --rng-kind LC --dist-kind UD --seeds 0,1,2
"""
import argparse
import time

from perturbgan.data import load_dataset
from perturbgan.metrics import ClassifierConfig, ProxyClassifier, mask_seed_sweep
from perturbgan.presets import SMOKE_CONFIG


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rng-kind", default="MT19937")
    ap.add_argument("--dist-kind", default="SND")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--iterations", type=int, default=SMOKE_CONFIG.iterations)
    ap.add_argument("--out", default=None, help="CSV path")
    args = ap.parse_args()
    cfg = SMOKE_CONFIG.replace(rng_kind=args.rng_kind, dist_kind=args.dist_kind,
                               iterations=args.iterations)
    data = load_dataset(cfg.dataset, cfg.n_data, cfg.global_seed)
    clf = ProxyClassifier.fit(data, ClassifierConfig())
    t0 = time.process_time()

    def progress(row):
        print(row.csv_row(), f"cpu={time.process_time() - t0:.0f}s", flush=True)

    print("mask_seed,initial_md,final_md,initial_is,final_is,error")
    res = mask_seed_sweep(cfg, [int(s) for s in args.seeds.split(",")], data, clf, progress)
    mean, std = res.mean_std()
    print(f"final moment distance mean={mean:.4f} std={std:.4f} relative_std={res.relative_std():.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(res.to_csv())


if __name__ == "__main__":
    main()
