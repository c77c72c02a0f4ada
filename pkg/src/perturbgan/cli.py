"""Command-line entry point.

Exit codes: 0 success, 1 contract violation (bad config, bad input values,
failed integrity checks, training aborts), 2 I/O errors.
"""
from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import ptns
from .data import load_dataset, synth_dataset
from .metrics import (ClassifierConfig, MetricSnapshot, ProxyClassifier, mask_seed_sweep,
                      snapshot)
from .models import (DISCRIMINATORS, GENERATORS, REFERENCE_COUNTS, REFERENCE_RATIOS,
                     build_named, generator_spec, matched_stage_ratios)
from .noisegen import DEFAULT_LC, RANDU, LcState, MaskKey, lattice_diagnostic, make_mask, mt_seed
from .trainer import (TrainingError, TrainConfig, image_grid, load_config,
                      state_from_checkpoint, train, write_ppm)

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


def _config(args) -> TrainConfig:
    cfg = load_config(args.config)
    if args.deterministic:
        cfg = cfg.replace(dtype="float64")
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    evaluator = None
    if cfg.eval_every:
        from .metrics import make_evaluator
        data = load_dataset(cfg.dataset, cfg.n_data, cfg.global_seed)
        clf = ProxyClassifier.load(args.classifier) if args.classifier else None
        evaluator = make_evaluator(data.images, clf)

    def progress(rec):
        if args.verbose:
            print(f"{rec.iteration},{rec.d_loss!r},{rec.g_loss!r},{rec.gp!r}", flush=True)

    final, history, _ = train(cfg, args.out, resume=args.resume, evaluator=evaluator,
                              progress=progress)
    print(f"trained to iteration {final.iteration}; outputs in {args.out}")
    return EXIT_OK


def _load_state(path):
    ck = ckpt.load(path)
    return state_from_checkpoint(ck)


def cmd_generate(args) -> int:
    st = _load_state(args.checkpoint)
    from .trainer import generate_images
    from .noisegen import DOMAIN_LATENT, draw_normal, seed_mix, seeded_state
    state = seeded_state("MT19937", seed_mix(args.seed, 0, 3, DOMAIN_LATENT))
    z, _ = draw_normal(state, args.n * st.config.latent_dim)
    images = generate_images(st.g, z.reshape(args.n, st.config.latent_dim), st.config.np_dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ptns.save(out / "images.ptns", images)
    write_ppm(out / "grid.ppm", image_grid(images))
    print(f"wrote {args.n} images to {out / 'images.ptns'} and {out / 'grid.ppm'}")
    return EXIT_OK


def _fmt(n) -> str:
    return f"{n:,}" if n is not None else "-"


def cmd_count_params(args) -> int:
    models = [args.model] + ([args.compare] if args.compare else [])
    counts = {}
    for m in models:
        width = args.base_width
        counts[m] = build_named(m, width)[1].count()
    base = models[-1] if args.compare else models[0]
    print(f"{'model':<6} {'params':>12} {'ratio':>7} {'reference params':>17} {'reference ratio':>16}")
    for m in models:
        ratio = counts[m] / counts[base]
        print(f"{m:<6} {_fmt(counts[m]):>12} {ratio:>7.2f} {_fmt(REFERENCE_COUNTS.get(m)):>17} "
              f"{REFERENCE_RATIOS.get(m, float('nan')):>16.2f}")
    if args.compare:
        a, b = models
        print(f"ratio {a}/{b} = {counts[a] / counts[b]:.4f} (reference {REFERENCE_RATIOS.get(a, float('nan')):.2f})")
        if a in GENERATORS and b == "CG" and a != "CG":
            rows = matched_stage_ratios(generator_spec(a, args.base_width),
                                        generator_spec(b, args.base_width))
            for pa, pb, frac in rows:
                print(f"stage {pa} / {pb} = {frac}")
            law = all(f == Fraction(1, 9) for _, _, f in rows)
            print(f"per-stage 1/9 law: {'holds' if law else 'VIOLATED'}")
    return EXIT_OK


def cmd_maskgen(args) -> int:
    key = MaskKey.parse(args.key)
    mask = make_mask(key)
    if args.out:
        ptns.save(args.out, mask)
    print(f"key={args.key} shape={mask.shape} mean={mask.mean():.6f} std={mask.std():.6f} "
          f"min={mask.min():.6f} max={mask.max():.6f}")
    return EXIT_OK


def cmd_rng_test(args) -> int:
    if args.rng == "MT19937":
        state = mt_seed(args.seed)
    else:
        params = RANDU if args.rng == "RANDU" else DEFAULT_LC
        state = LcState(params, args.seed % params.m)
    report = lattice_diagnostic(state, args.n, args.bins)
    if args.out:
        np.savetxt(args.out, report.triples, delimiter=",", header="x,y,z", comments="",
                   fmt="%.9f")
    print(report.summary())
    return EXIT_OK


def cmd_eval(args) -> int:
    st = _load_state(args.checkpoint)
    clf = ProxyClassifier.load(args.classifier) if args.classifier else None
    data = load_dataset(st.config.dataset, st.config.n_data, st.config.global_seed)
    snap = snapshot(st.g, st.config, data.images, st.iteration, clf, args.n)
    print(MetricSnapshot.CSV_HEADER)
    print(snap.csv_row())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    clf = ProxyClassifier.load(args.classifier) if args.classifier else None
    result = mask_seed_sweep(cfg, seeds, classifier=clf,
                             progress=lambda row: print(row.csv_row(), flush=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(result.to_csv())
    mean, std = result.mean_std()
    print(f"final moment distance mean={mean:.6f} std={std:.6f}; wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_make_synth(args) -> int:
    data = synth_dataset(args.spec, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ptns.save(out / "images.ptns", data.images)
    ptns.save(out / "labels.ptns", data.labels.astype(np.float64))
    write_ppm(out / "preview.ppm", image_grid(data.images[:64]))
    print(f"wrote {args.n} {args.spec} images to {out}")
    return EXIT_OK


def cmd_fit_classifier(args) -> int:
    data = load_dataset(args.dataset, args.n, args.seed)
    clf = ProxyClassifier.fit(data, ClassifierConfig(steps=args.steps, seed=args.seed))
    clf.save(args.out)
    print(f"classifier accuracy on its training data {clf.accuracy(data):.4f}; wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perturbgan", description=__doc__.splitlines()[0])
    ap.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                    help="pin single-worker 64-bit mode (default on)")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run WGAN-GP training from a key = value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--classifier", default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("count-params", help="parameter counts with reference columns")
    p.add_argument("--model", required=True, choices=GENERATORS + DISCRIMINATORS)
    p.add_argument("--compare", choices=GENERATORS + DISCRIMINATORS)
    p.add_argument("--base-width", type=int, default=1024)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("maskgen", help="derive one noise mask from its key")
    p.add_argument("--key", required=True, help="seed,layer,channel,HxW,rng,dist")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_maskgen)

    p = sub.add_parser("rng-test", help="consecutive-triple lattice diagnostic")
    p.add_argument("--rng", choices=("MT19937", "LC", "RANDU"), default="RANDU")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--out", default=None, help="CSV of x,y,z triples")
    p.set_defaults(func=cmd_rng_test)

    p = sub.add_parser("eval", help="metric snapshot of a checkpoint as one CSV row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classifier", default=None)
    p.add_argument("--n", type=int, default=1024)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="mask-seed sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated mask seeds")
    p.add_argument("--classifier", default=None)
    p.add_argument("--out", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-synth", help="write a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth")
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("fit-classifier", help="train the proxy classifier used by eval")
    p.add_argument("--dataset", default="synth:two-mode")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", default="classifier.bin")
    p.set_defaults(func=cmd_fit_classifier)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TrainingError, FloatingPointError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
