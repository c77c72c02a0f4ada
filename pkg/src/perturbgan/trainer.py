"""WGAN-GP training with Adam, deterministic from (config, seed)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import ops
from .data import BatchStream, ImageBatch, StreamPosition, load_dataset
from .layers import MaskBank, MaskConfig
from .models import (DISCRIMINATORS, GENERATORS, Model, ModelSpec, ParamStore,
                     discriminator_spec, generator_spec, init_buffers, init_params)
from .noisegen import DOMAIN_LATENT, draw_normal, draw_uniform, seed_mix, seeded_state
from .tape import Tape, Tensor, gradient, gradient_penalty


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    latent_dim: int = 128
    n_critic: int = 5
    gp_lambda: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    adam_eps: float = 1e-8
    iterations: int = 1000
    global_seed: int = 0
    mask_seed: int = 0
    rng_kind: str = "MT19937"
    dist_kind: str = "SND"
    dataset: str = "synth:two-mode"
    n_data: int = 4096
    generator: str = "PGv1"
    discriminator: str = "PD"
    g_base_width: int = 64
    d_base_width: int = 64
    eval_every: int = 0
    n_eval: int = 1024
    checkpoint_every: int = 0
    sample_every: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (the penalty interpolates pairs)")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be at least 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.discriminator not in DISCRIMINATORS:
            raise ConfigError(f"unknown discriminator {self.discriminator!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.n_eval < 2:
            raise ConfigError("n_eval must be at least 2")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def _coerce(name: str, typ: str, text: str):
    try:
        if typ == "int":
            return int(text, 0)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {typ}") from None
    return text


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], val)
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8


@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, store: ParamStore) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in store.items()},
                   {k: np.zeros_like(a) for k, a in store.items()}, 0)


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              hyper: AdamHyper = AdamHyper(), iteration: int | None = None
              ) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update. Parameters without a gradient entry are left alone."""
    where = f" at iteration {iteration}" if iteration is not None else ""
    t = state.step + 1
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    new_p, new_m, new_v = {}, dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = store[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}{where}")
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * g * g
        new_p[name] = p - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return store.replace(new_p), AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# losses


def _per_sample(eps: np.ndarray, ndim: int) -> np.ndarray:
    return eps.reshape((-1,) + (1,) * (ndim - 1))


def wgan_gp_losses(critic, real: np.ndarray, fake, eps: np.ndarray, gp_lambda: float,
                   tape: Tape) -> tuple[Tensor, Tensor, Tensor]:
    """Critic and generator losses on ``tape``.

    ``critic`` maps a tensor to (N, 1) scores. ``fake`` is a tensor (attached to the
    generator when generator gradients are wanted) or an array. Returns
    ``(d_loss, g_loss, gp_term)`` where gp_term already includes the factor lambda.
    """
    real = np.asarray(real)
    fake_t = fake if isinstance(fake, Tensor) else tape.const(fake)
    if real.shape != fake_t.shape:
        raise ValueError(f"real batch {real.shape} and fake batch {fake_t.shape} differ")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (real.shape[0],):
        raise ValueError(f"eps must have shape ({real.shape[0]},), got {eps.shape}")
    if np.any(eps < 0) or np.any(eps > 1):
        raise ValueError("eps must lie in [0, 1]")
    e = _per_sample(eps, real.ndim)
    x_hat = tape.input(e * real + (1.0 - e) * fake_t.value, name="x_hat")
    d_real = ops.mean(critic(tape.const(real, copy=False)))
    d_fake = ops.mean(critic(fake_t))
    if gp_lambda != 0:
        gp = ops.scale(gradient_penalty(tape, ops.sum(critic(x_hat)), x_hat), gp_lambda)
        d_loss = ops.add(ops.sub(d_fake, d_real), gp)
    else:
        gp = tape.const(0.0)
        d_loss = ops.sub(d_fake, d_real)
    return d_loss, ops.neg(d_fake), gp


# ---------------------------------------------------------------------------
# history


@dataclass
class HistoryRecord:
    iteration: int
    d_loss: float
    g_loss: float
    gp: float
    wall_time: float = 0.0
    metric: float | None = None


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # MetricSnapshot-like objects

    def append(self, rec: HistoryRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError(f"history iteration {rec.iteration} does not advance past "
                             f"{self.records[-1].iteration}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        """Deterministic columns only; wall time is kept in memory, not on disk."""
        lines = ["iteration,d_loss,g_loss,gp,metric"]
        for r in self.records:
            metric = "" if r.metric is None else repr(float(r.metric))
            lines.append(f"{r.iteration},{float(r.d_loss)!r},{float(r.g_loss)!r},"
                         f"{float(r.gp)!r},{metric}")
        return "\n".join(lines) + "\n"

    def to_array(self) -> np.ndarray:
        return np.array([[r.iteration, r.d_loss, r.g_loss, r.gp,
                          np.nan if r.metric is None else r.metric] for r in self.records],
                        dtype=np.float64).reshape(-1, 5)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TrainHistory":
        h = cls()
        for row in arr:
            h.records.append(HistoryRecord(int(row[0]), float(row[1]), float(row[2]),
                                           float(row[3]), 0.0,
                                           None if np.isnan(row[4]) else float(row[4])))
        return h


# ---------------------------------------------------------------------------
# training state


def architecture_json(g_spec: ModelSpec, d_spec: ModelSpec) -> str:
    return json.dumps({"generator": json.loads(g_spec.to_json()),
                       "discriminator": json.loads(d_spec.to_json())}, sort_keys=True, indent=1)


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    g: Model
    d: Model
    g_adam: AdamState
    d_adam: AdamState
    stream: BatchStream
    iteration: int = 0
    history: TrainHistory = field(default_factory=TrainHistory)
    initial_metric: float | None = None

    @property
    def arch_json(self) -> str:
        return architecture_json(self.g.spec, self.d.spec)

    def to_checkpoint(self) -> ckpt.Checkpoint:
        t: dict[str, np.ndarray] = {}
        for k, v in self.g.params.items():
            t[f"g/{k}"] = v
        for k, v in self.d.params.items():
            t[f"d/{k}"] = v
        for k, v in self.g.buffers.items():
            t[f"gbuf/{k}"] = v
        for k, v in self.d.buffers.items():
            t[f"dbuf/{k}"] = v
        for tag, st in (("g", self.g_adam), ("d", self.d_adam)):
            for k, v in st.m.items():
                t[f"{tag}adam_m/{k}"] = v
            for k, v in st.v.items():
                t[f"{tag}adam_v/{k}"] = v
        t["history"] = self.history.to_array()
        pos = self.stream.position
        meta = {"config": self.config.to_dict(), "config_hash": config_hash(self.config),
                "arch_hash": ckpt.sha256_bytes(self.arch_json.encode()),
                "mask_seed": self.config.mask_seed,
                "data_position": [pos.epoch, pos.offset],
                "adam_steps": [self.g_adam.step, self.d_adam.step]}
        return ckpt.Checkpoint(self.iteration, t, meta)


def _mask_bank(config: TrainConfig) -> MaskBank:
    return MaskBank(MaskConfig(config.mask_seed, config.rng_kind, config.dist_kind))


def build_models(config: TrainConfig) -> tuple[Model, Model]:
    g_spec = generator_spec(config.generator, config.g_base_width, config.latent_dim)
    d_spec = discriminator_spec(config.discriminator, config.d_base_width)
    masks = _mask_bank(config)
    g = Model(g_spec, init_params(g_spec, config.global_seed), masks)
    d = Model(d_spec, init_params(d_spec, config.global_seed), masks)
    return g, d


def init_state(config: TrainConfig, data: ImageBatch | None = None) -> TrainState:
    if data is None:
        data = load_dataset(config.dataset, config.n_data, config.global_seed)
    g, d = build_models(config)
    return TrainState(config, g, d, AdamState.zeros(g.params), AdamState.zeros(d.params),
                      BatchStream(data, config.batch_size, config.global_seed))


def state_from_checkpoint(ck: ckpt.Checkpoint, data: ImageBatch | None = None) -> TrainState:
    config = TrainConfig(**ck.meta["config"])
    st = init_state(config, data)
    g_params, d_params = ParamStore(ck.group("g")), ParamStore(ck.group("d"))
    if g_params.names() != st.g.params.names() or d_params.names() != st.d.params.names():
        raise ckpt.CheckpointError("checkpoint parameters do not match the configured models")
    st.g.params, st.d.params = g_params, d_params
    st.g.buffers = {**init_buffers(st.g.spec), **ck.group("gbuf")}
    st.d.buffers = {**init_buffers(st.d.spec), **ck.group("dbuf")}
    gs, ds = ck.meta["adam_steps"]
    st.g_adam = AdamState(ck.group("gadam_m"), ck.group("gadam_v"), gs)
    st.d_adam = AdamState(ck.group("dadam_m"), ck.group("dadam_v"), ds)
    st.stream.position = StreamPosition(*ck.meta["data_position"])
    st.iteration = ck.iteration
    st.history = TrainHistory.from_array(ck.tensors["history"])
    return st


# ---------------------------------------------------------------------------
# one iteration


def iteration_noise(config: TrainConfig, iteration: int):
    """Latents and interpolation weights of one iteration, from their own MT stream."""
    state = seeded_state("MT19937", seed_mix(config.global_seed, iteration, 0, DOMAIN_LATENT))
    b, k = config.batch_size, config.latent_dim
    critic = []
    for _ in range(config.n_critic):
        z, state = draw_normal(state, b * k)
        eps, state = draw_uniform(state, b)
        critic.append((z.reshape(b, k), eps))
    zg, state = draw_normal(state, b * k)
    return critic, zg.reshape(b, k)


def _fake_batch(g: Model, z: np.ndarray, dtype) -> tuple[np.ndarray, dict]:
    tape = Tape(dtype)
    out, rt = g(tape, tape.input(z), train=True)
    return out.value, rt.buffer_updates


def _check_finite(values: dict, iteration: int):
    for name, v in values.items():
        if not np.isfinite(v):
            raise TrainingError(f"non-finite {name} ({v}) at iteration {iteration}")


def train_iteration(st: TrainState) -> HistoryRecord:
    """n_critic critic updates followed by one generator update."""
    cfg = st.config
    dtype = cfg.np_dtype
    it = st.iteration + 1
    hyper = AdamHyper(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    critic_noise, zg = iteration_noise(cfg, it)
    d_val = gp_val = 0.0
    for z, eps in critic_noise:
        real = st.stream.next()
        fake, _ = _fake_batch(st.g, z, dtype)  # detached generator output
        tape = Tape(dtype)
        params = st.d.params.to_tape(tape)
        critic = lambda x: st.d(tape, x, True, params)[0]  # noqa: E731
        d_loss, _, gp = wgan_gp_losses(critic, real, fake, eps, cfg.gp_lambda, tape)
        d_val, gp_val = float(d_loss.item()), float(gp.item())
        _check_finite({"d_loss": d_val, "gp": gp_val}, it)
        grads = gradient(tape, d_loss, list(params.values()))
        st.d.params, st.d_adam = adam_step(
            st.d.params, {k: grads[t.id].value for k, t in params.items()}, st.d_adam, hyper, it)
    tape = Tape(dtype)
    g_params = st.g.params.to_tape(tape)
    fake, rt = st.g(tape, tape.input(zg), True, g_params)
    score, _ = st.d(tape, fake, True)
    g_loss = ops.neg(ops.mean(score))
    g_val = float(g_loss.item())
    _check_finite({"g_loss": g_val}, it)
    grads = gradient(tape, g_loss, list(g_params.values()))
    st.g.params, st.g_adam = adam_step(
        st.g.params, {k: grads[t.id].value for k, t in g_params.items()}, st.g_adam, hyper, it)
    st.g.commit_buffers(rt)
    st.iteration = it
    return HistoryRecord(it, d_val, g_val, gp_val)


# ---------------------------------------------------------------------------
# outputs


def eval_latents(config: TrainConfig, n: int) -> np.ndarray:
    """Fixed evaluation latents (iteration index -1 in the latent domain)."""
    state = seeded_state("MT19937", seed_mix(config.global_seed, 2**32 - 1, 1, DOMAIN_LATENT))
    z, _ = draw_normal(state, n * config.latent_dim)
    return z.reshape(n, config.latent_dim)


def generate_images(g: Model, z: np.ndarray, dtype=np.float64, chunk: int = 256) -> np.ndarray:
    return np.concatenate([g.generate(z[i:i + chunk], dtype) for i in range(0, len(z), chunk)])


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def image_grid(images: np.ndarray, cols: int | None = None) -> np.ndarray:
    """(N, 3, H, W) in [-1, 1] -> (rows*H, cols*W, 3) uint8 grid, black padding."""
    n, _, h, w = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = -(-n // cols)
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    pix = to_uint8(images).transpose(0, 2, 3, 1)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = pix[i]
    return grid


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary 8-bit PPM (P6)."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# loop


def train(config: TrainConfig, out_dir=None, resume=None, data: ImageBatch | None = None,
          evaluator=None, progress=None) -> tuple[ckpt.Checkpoint, TrainHistory, TrainState]:
    """Run (or resume) training up to ``config.iterations``.

    ``evaluator(state) -> (metric, snapshot)`` is called at iteration 0 and every
    ``eval_every`` iterations; its metric lands in the history's metric column.
    ``resume`` is a Checkpoint or a path. Output files are written when ``out_dir``
    is given.
    """
    if resume is not None:
        ck = resume if isinstance(resume, ckpt.Checkpoint) else ckpt.load(resume)
        st = state_from_checkpoint(ck, data)
        if st.config.to_dict() != config.replace(iterations=st.config.iterations).to_dict():
            raise ConfigError("resume config differs from the checkpoint's configuration")
        st.config = config
    else:
        st = init_state(config, data)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "samples").mkdir(parents=True, exist_ok=True)
        (out / "arch.json").write_text(st.arch_json)
        (out / "config.txt").write_text(config.to_text())
    sample_z = eval_latents(config, 64)

    def write_outputs(ck_now: bool):
        if out is None or not ck_now:
            return
        (out / "history.csv").write_text(st.history.to_csv())
        ckpt.save(st.to_checkpoint(), out / f"checkpoint_{st.iteration}.bin")

    def maybe_eval():
        if evaluator is None:
            return None
        metric, snap = evaluator(st)
        if snap is not None:
            st.history.snapshots.append(snap)
        return metric

    if st.iteration == 0 and evaluator is not None and not st.history.snapshots:
        st.initial_metric = maybe_eval()
    t0 = time.perf_counter()
    while st.iteration < config.iterations:
        try:
            rec = train_iteration(st)
        except TrainingError:
            write_outputs(True)
            raise
        rec.wall_time = time.perf_counter() - t0
        i = rec.iteration
        if config.eval_every and i % config.eval_every == 0:
            rec.metric = maybe_eval()
        st.history.append(rec)
        if out is not None and config.sample_every and i % config.sample_every == 0:
            write_ppm(out / "samples" / f"iter_{i}.ppm",
                      image_grid(generate_images(st.g, sample_z, config.np_dtype)))
        if progress is not None:
            progress(rec)
        write_outputs(bool(config.checkpoint_every) and i % config.checkpoint_every == 0)
    final = st.to_checkpoint()
    if out is not None:
        (out / "history.csv").write_text(st.history.to_csv())
        ckpt.save(final, out / f"checkpoint_{st.iteration}.bin")
    return final, st.history, st
