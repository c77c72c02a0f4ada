"""Proxy inception score, pixel-moment distance and the mask-seed sweep."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import ops
from .data import ImageBatch, load_dataset
from .models import ParamStore
from .noisegen import DOMAIN_INIT, DOMAIN_DATA, draw_normal, draw_uniform, seed_mix, seeded_state
from .tape import Tape, gradient
from .trainer import (AdamHyper, AdamState, TrainConfig, TrainingError, adam_step,
                      eval_latents, generate_images, train)

KL_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# scores


def inception_score_from_probs(probs: np.ndarray) -> float:
    """exp(mean_n KL(p(y|x_n) || p_bar)) with conditionals floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] < 2:
        raise ValueError(f"need at least 2 conditionals over at least 2 classes, got {p.shape}")
    p = np.maximum(p, KL_FLOOR)
    p_bar = p.mean(axis=0)
    kl = np.sum(p * (np.log(p) - np.log(p_bar)), axis=1)
    return float(np.exp(kl.mean()))


def proxy_inception_score(clf: "ProxyClassifier", images: np.ndarray) -> float:
    return inception_score_from_probs(clf.predict_proba(images))


def pixel_moment_distance(gen: np.ndarray, real: np.ndarray) -> float:
    """||mu_gen - mu_real||_2 + ||sigma_gen - sigma_real||_2 over per-pixel moments."""
    gen, real = np.asarray(gen, dtype=np.float64), np.asarray(real, dtype=np.float64)
    if gen.shape[1:] != real.shape[1:]:
        raise ValueError(f"image shapes differ: {gen.shape[1:]} vs {real.shape[1:]}")
    dmu = np.linalg.norm((gen.mean(axis=0) - real.mean(axis=0)).ravel())
    dsd = np.linalg.norm((gen.std(axis=0) - real.std(axis=0)).ravel())
    return float(dmu + dsd)


# ---------------------------------------------------------------------------
# proxy classifier


@dataclass(frozen=True)
class ClassifierConfig:
    width: int = 8
    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def _clf_decls(n_classes: int, width: int, in_channels: int = 3) -> dict[str, tuple]:
    return {"c1.K": (width, in_channels, 3, 3), "c1.b": (width,),
            "c2.K": (2 * width, width, 3, 3), "c2.b": (2 * width,),
            "head.W": (2 * width, n_classes), "head.b": (n_classes,)}


def _clf_init(n_classes: int, width: int, seed: int) -> ParamStore:
    out = {}
    for i, (name, shape) in enumerate(_clf_decls(n_classes, width).items()):
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if name.endswith(".K") else shape[0]
        state = seeded_state("MT19937", seed_mix(seed, i, 2, DOMAIN_INIT))
        z, _ = draw_normal(state, int(np.prod(shape)))
        out[name] = np.sqrt(2.0 / fan_in) * z.reshape(shape)
    return ParamStore(out)


def _clf_logits(p, x):
    h = ops.avg_pool(ops.relu(ops.conv2d(x, p["c1.K"], p["c1.b"], pad=1)))
    h = ops.avg_pool(ops.relu(ops.conv2d(h, p["c2.K"], p["c2.b"], pad=1)))
    return ops.linear(ops.global_avg_pool(h), p["head.W"], p["head.b"])


class ProxyClassifier:
    """Small conv classifier trained on the experiment's own labelled data, then frozen."""

    def __init__(self, params: ParamStore, n_classes: int):
        if n_classes < 2:
            raise ValueError("a proxy classifier needs at least 2 classes")
        self.params = params
        self.n_classes = n_classes

    def logits(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        outs = []
        for i in range(0, len(images), chunk):
            tape = Tape()
            p = {k: tape.const(v, copy=False) for k, v in self.params.items()}
            outs.append(_clf_logits(p, tape.const(images[i:i + chunk], copy=False)).value)
        return np.concatenate(outs)

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        z = self.logits(images)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, data: ImageBatch) -> float:
        return float(np.mean(self.predict_proba(data.images).argmax(axis=1) == data.labels))

    @classmethod
    def fit(cls, data: ImageBatch, config: ClassifierConfig = ClassifierConfig()) -> "ProxyClassifier":
        if data.labels is None:
            raise ValueError("the proxy classifier needs labelled data")
        n_classes = int(data.labels.max()) + 1
        store = _clf_init(n_classes, config.width, config.seed)
        adam = AdamState.zeros(store)
        hyper = AdamHyper(config.lr, 0.9, 0.999, 1e-8)
        state = seeded_state("MT19937", seed_mix(config.seed, 0, 2, DOMAIN_DATA))
        b = min(config.batch_size, len(data))
        for step in range(config.steps):
            u, state = draw_uniform(state, b)
            idx = (u * len(data)).astype(np.int64)
            tape = Tape()
            p = store.to_tape(tape)
            loss = ops.softmax_cross_entropy(
                _clf_logits(p, tape.const(data.images[idx], copy=False)), data.labels[idx])
            grads = gradient(tape, loss, list(p.values()))
            store, adam = adam_step(store, {k: grads[t.id].value for k, t in p.items()},
                                    adam, hyper, step)
        return cls(store, n_classes)

    def save(self, path) -> None:
        ckpt.save(ckpt.Checkpoint(0, dict(self.params.items()),
                                  {"kind": "proxy-classifier", "n_classes": self.n_classes}), path)

    @classmethod
    def load(cls, path) -> "ProxyClassifier":
        ck = ckpt.load(path)
        if ck.meta.get("kind") != "proxy-classifier":
            raise ckpt.CheckpointError(f"{path} does not hold a proxy classifier")
        return cls(ParamStore(ck.tensors), int(ck.meta["n_classes"]))


# ---------------------------------------------------------------------------
# snapshots


@dataclass(frozen=True)
class MetricSnapshot:
    iteration: int
    proxy_is: float | None
    moment_distance: float
    n_images: int = 1024

    def __post_init__(self):
        if self.n_images < 2:
            raise ValueError("a snapshot needs at least 2 images")

    def csv_row(self) -> str:
        is_ = "" if self.proxy_is is None else repr(self.proxy_is)
        return f"{self.iteration},{is_},{self.moment_distance!r},{self.n_images}"

    CSV_HEADER = "iteration,proxy_is,moment_distance,n_images"


def snapshot(g_model, config: TrainConfig, real: np.ndarray, iteration: int,
             classifier: ProxyClassifier | None = None, n: int | None = None) -> MetricSnapshot:
    n = n or config.n_eval
    images = generate_images(g_model, eval_latents(config, n), config.np_dtype)
    is_ = proxy_inception_score(classifier, images) if classifier is not None else None
    return MetricSnapshot(iteration, is_, pixel_moment_distance(images, real), n)


def make_evaluator(real: np.ndarray, classifier: ProxyClassifier | None = None):
    """Training callback: returns (moment_distance, MetricSnapshot)."""
    def evaluate(state):
        snap = snapshot(state.g, state.config, real, state.iteration, classifier)
        return snap.moment_distance, snap
    return evaluate


# ---------------------------------------------------------------------------
# mask-seed sweep


@dataclass
class SweepRow:
    seed: int
    initial: MetricSnapshot | None = None
    final: MetricSnapshot | None = None
    error: str | None = None

    def csv_row(self) -> str:
        f, i = self.final, self.initial
        cells = [str(self.seed),
                 "" if i is None else repr(i.moment_distance),
                 "" if f is None else repr(f.moment_distance),
                 "" if i is None or i.proxy_is is None else repr(i.proxy_is),
                 "" if f is None or f.proxy_is is None else repr(f.proxy_is),
                 "" if self.error is None else self.error.replace(",", ";")]
        return ",".join(cells)

    CSV_HEADER = "mask_seed,initial_moment_distance,final_moment_distance,initial_proxy_is,final_proxy_is,error"


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def finals(self, attr: str = "moment_distance") -> np.ndarray:
        return np.array([getattr(r.final, attr) for r in self.rows if r.final is not None])

    def mean_std(self, attr: str = "moment_distance") -> tuple[float, float]:
        v = self.finals(attr)
        if len(v) == 0:
            return math.nan, math.nan
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

    def relative_std(self, attr: str = "moment_distance") -> float:
        mean, std = self.mean_std(attr)
        return std / abs(mean)

    def to_csv(self) -> str:
        lines = [SweepRow.CSV_HEADER] + [r.csv_row() for r in self.rows]
        mean, std = self.mean_std()
        lines.append(f"# final moment distance mean={mean!r} std={std!r}")
        return "\n".join(lines) + "\n"


def run_with_metrics(config: TrainConfig, data: ImageBatch | None = None,
                     classifier: ProxyClassifier | None = None, out_dir=None, progress=None):
    """Train once, snapshotting at iteration 0 and at the end; returns (initial, final, history)."""
    if data is None:
        data = load_dataset(config.dataset, config.n_data, config.global_seed)
    evaluator = make_evaluator(data.images, classifier)
    _, history, st = train(config, out_dir, data=data, evaluator=evaluator, progress=progress)
    initial = history.snapshots[0]
    final = history.snapshots[-1]
    if final.iteration != st.iteration:
        final = snapshot(st.g, config, data.images, st.iteration, classifier)
    return initial, final, history


def mask_seed_sweep(base_config: TrainConfig, seeds, data: ImageBatch | None = None,
                    classifier: ProxyClassifier | None = None, progress=None) -> SweepResult:
    """One training run per mask seed, all else fixed. Failed runs are recorded, not raised."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("a sweep needs at least 2 seeds")
    if data is None:
        data = load_dataset(base_config.dataset, base_config.n_data, base_config.global_seed)
    result = SweepResult()
    for s in seeds:
        row = SweepRow(int(s))
        try:
            row.initial, row.final, _ = run_with_metrics(
                base_config.replace(mask_seed=int(s)), data, classifier)
        except (TrainingError, FloatingPointError, ValueError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        result.rows.append(row)
        if progress is not None:
            progress(row)
    return result
