"""Desk-scale convergence run: small PGv1 generator against a small CD critic on two-mode data.

Prints the iteration-0 and final snapshots. Used to calibrate the frozen thresholds
in tests/test_acceptance.py.

    python scripts/convergence_smoke.py --iterations 2000 --mask-seed 0
"""
import argparse
import time

from perturbgan.data import load_dataset
from perturbgan.metrics import ClassifierConfig, ProxyClassifier, run_with_metrics
from perturbgan.presets import SMOKE_CONFIG


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=SMOKE_CONFIG.iterations)
    ap.add_argument("--mask-seed", type=int, default=0)
    ap.add_argument("--rng-kind", default="MT19937")
    ap.add_argument("--dist-kind", default="SND")
    ap.add_argument("--eval-every", type=int, default=500)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = SMOKE_CONFIG.replace(iterations=args.iterations, mask_seed=args.mask_seed,
                               rng_kind=args.rng_kind, dist_kind=args.dist_kind,
                               eval_every=args.eval_every)
    data = load_dataset(cfg.dataset, cfg.n_data, cfg.global_seed)
    clf = ProxyClassifier.fit(data, ClassifierConfig())
    t0 = time.perf_counter()
    c0 = time.process_time()

    def progress(rec):
        if rec.metric is not None:
            print(f"iter {rec.iteration} d_loss={rec.d_loss:.4f} g_loss={rec.g_loss:.4f} "
                  f"metric={rec.metric:.4f} t={time.perf_counter() - t0:.0f}s", flush=True)

    initial, final, history = run_with_metrics(cfg, data, clf, args.out, progress)
    for s in history.snapshots:
        print(f"snapshot iter={s.iteration} moment_distance={s.moment_distance:.4f} "
              f"proxy_is={s.proxy_is:.4f}")
    print(f"initial {initial}\nfinal {final}\nwall {time.perf_counter() - t0:.1f}s "
          f"cpu {time.process_time() - c0:.1f}s")


if __name__ == "__main__":
    main()
