"""PGv1/PGv2/PGv3/CG generators, PD/CD critics and parameter accounting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .layers import (ConvLayerSpec, MaskBank, MaskConfig, ModuleSpec, ParamDecl,
                     PerturbLayerSpec, Runtime, batch_norm_forward, bn_decls, build_module)
from .noisegen import DOMAIN_INIT, draw_normal, seed_mix, seeded_state
from .tape import Tape, Tensor

GENERATORS = ("PGv1", "PGv2", "PGv3", "CG")
DISCRIMINATORS = ("PD", "CD")
START_RES = {"PGv1": 4, "PGv2": 2, "PGv3": 1, "CG": 4}
# discriminator perturbation layers draw masks from a separate layer-id range
CRITIC_LAYER_BASE = 10_000

# parameter counts printed in the reference tables, for side-by-side reports only
REFERENCE_COUNTS = {"CG": 11_540_480, "PGv1": 5_570_944, "PGv2": 5_833_088,
                    "PGv3": 7_537_024, "CD": 11_017_216, "PD": 1_395_584}
REFERENCE_RATIOS = {"CG": 1.00, "PGv1": 0.48, "PGv2": 0.51, "PGv3": 0.65, "CD": 1.00, "PD": 0.13}


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    kind: str  # linear | module | upconv | conv | combine_out | conv_out | head_flat | head_gap
    name: str
    in_channels: int
    out_channels: int
    resolution: int  # spatial extent of the stage output
    module: ModuleSpec | None = None
    layer_id: int = 0


@dataclass(frozen=True)
class ModelSpec:
    role: str
    variant: str
    latent_dim: int = 128
    image_shape: tuple[int, int, int] = (3, 32, 32)
    base_width: int = 1024
    stages: tuple[Stage, ...] = field(default_factory=tuple)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        stages = tuple(
            Stage(**{**s, "module": ModuleSpec(**s["module"]) if s["module"] else None})
            for s in d["stages"])
        return cls(d["role"], d["variant"], d["latent_dim"], tuple(d["image_shape"]),
                   d["base_width"], stages)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))

    def module_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.stages:
            if s.module is not None:
                counts[s.module.kind] = counts.get(s.module.kind, 0) + 1
        return counts


class ParamStore:
    """Ordered map of layer path -> trainable array."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._t: dict[str, np.ndarray] = {}
        for k, v in (tensors or {}).items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            self._t[k] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __contains__(self, name) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def count(self) -> int:
        return int(sum(v.size for v in self._t.values()))

    def replace(self, updates: dict[str, np.ndarray]) -> "ParamStore":
        return ParamStore({**self._t, **updates})

    def table(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(k, v.shape, int(v.size)) for k, v in self._t.items()]

    def to_tape(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.param(v, name=k) for k, v in self._t.items()}

    def equals(self, other: "ParamStore") -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(v, other[k]) for k, v in self.items()))


def count_params(store: ParamStore) -> int:
    return store.count()


# ---------------------------------------------------------------------------
# architecture construction


def _check_base(base_width: int, divisor: int):
    if base_width <= 0 or base_width % divisor:
        raise ArchitectureError(f"base width {base_width} must be a positive multiple of {divisor}")


def _gen_width(base: int, res: int) -> int:
    return base if res <= 4 else base * 4 // res


def generator_spec(variant: str, base_width: int = 1024, latent_dim: int = 128,
                   image_size: int = 32) -> ModelSpec:
    if variant not in GENERATORS:
        raise ArchitectureError(f"unknown generator {variant!r}")
    r0 = START_RES[variant]
    if image_size < 4 or image_size & (image_size - 1):
        raise ArchitectureError(f"image size {image_size} is not reachable by 2x upsampling "
                                f"from {r0}x{r0}")
    _check_base(base_width, image_size // 4)
    w = lambda r: _gen_width(base_width, r)  # noqa: E731
    stages = [Stage("linear", "g.lin", latent_dim, w(r0), r0)]
    r, k, lid = r0, 0, 0
    while r < image_size:
        if variant == "CG":
            stages.append(Stage("upconv", f"g.s{k}.up", w(r), w(2 * r), 2 * r))
        else:
            stages.append(Stage("module", f"g.s{k}.grpm", w(r), w(r), r,
                                ModuleSpec("gRPM", w(r), w(r)), lid))
            lid += 2
            stages.append(Stage("module", f"g.s{k}.tpm", w(r), w(2 * r), 2 * r,
                                ModuleSpec("TPM", w(r), w(2 * r)), lid))
            lid += 1
        r *= 2
        k += 1
    out_kind = "conv_out" if variant == "CG" else "combine_out"
    stages.append(Stage(out_kind, "g.out", w(image_size), 3, image_size))
    return ModelSpec("generator", variant, latent_dim, (3, image_size, image_size),
                     base_width, tuple(stages))


def discriminator_spec(variant: str, base_width: int = 1024, image_size: int = 32) -> ModelSpec:
    if variant not in DISCRIMINATORS:
        raise ArchitectureError(f"unknown discriminator {variant!r}")
    if image_size != 32:
        raise ArchitectureError("critics are defined for 32x32 inputs")
    if variant == "CD":
        _check_base(base_width, 4)
        w = [base_width // 4, base_width // 2, base_width]
        stages = [Stage("conv", "d.c1", 3, w[0], 16),
                  Stage("conv", "d.c2", w[0], w[1], 8),
                  Stage("conv", "d.c3", w[1], w[2], 4),
                  Stage("head_flat", "d.head", w[2], 1, 1)]
    else:
        _check_base(base_width, 8)
        w = [base_width // 8, base_width // 8, base_width // 4, base_width // 2]
        lid = CRITIC_LAYER_BASE
        stages = [Stage("module", "d.bpm", 3, w[0], 32,
                        ModuleSpec("BPM", 3, w[0], norm=False), lid)]
        lid += 1
        res = 32
        for i in range(3):
            res //= 2
            stages.append(Stage("module", f"d.r{i}", w[i], w[i + 1], res,
                                ModuleSpec("dRPM", w[i], w[i + 1], norm=False), lid))
            lid += 2
        stages.append(Stage("head_gap", "d.head", w[3], 1, 1))
    return ModelSpec("discriminator", variant, 0, (3, 32, 32), base_width, tuple(stages))


def declarations(spec: ModelSpec) -> tuple[dict[str, ParamDecl], dict[str, np.ndarray]]:
    params: dict[str, ParamDecl] = {}
    buffers: dict[str, np.ndarray] = {}

    def add_bn(prefix, c):
        p, b = bn_decls(prefix, c)
        params.update(p)
        buffers.update(b)

    for s in spec.stages:
        if s.kind == "linear":
            n_out = s.out_channels * s.resolution ** 2
            params[f"{s.name}.W"] = ParamDecl((s.in_channels, n_out),
                                              std=float(np.sqrt(1.0 / s.in_channels)))
            params[f"{s.name}.b"] = ParamDecl((n_out,), "zeros")
            add_bn(f"{s.name}.bn", s.out_channels)
        elif s.kind == "module":
            p, b = build_module(s.module, s.layer_id).decls(s.name)
            params.update(p)
            buffers.update(b)
        elif s.kind == "upconv":
            params.update(ConvLayerSpec(s.in_channels, s.out_channels).param_decls(f"{s.name}.conv"))
            add_bn(f"{s.name}.bn", s.out_channels)
        elif s.kind == "conv":
            params.update(ConvLayerSpec(s.in_channels, s.out_channels).param_decls(f"{s.name}.conv"))
        elif s.kind == "conv_out":
            params.update(ConvLayerSpec(s.in_channels, s.out_channels).param_decls(f"{s.name}.conv"))
        elif s.kind == "combine_out":
            params[f"{s.name}.V"] = ParamDecl((s.out_channels, s.in_channels),
                                              std=float(np.sqrt(1.0 / s.in_channels)))
        elif s.kind in ("head_flat", "head_gap"):
            n_in = s.in_channels * (16 if s.kind == "head_flat" else 1)
            params[f"{s.name}.W"] = ParamDecl((n_in, 1), std=float(np.sqrt(1.0 / n_in)))
            params[f"{s.name}.b"] = ParamDecl((1,), "zeros")
        else:
            raise ArchitectureError(f"unknown stage kind {s.kind!r}")
    return params, buffers


def init_params(spec: ModelSpec, seed: int = 0) -> ParamStore:
    decls, _ = declarations(spec)
    out = {}
    role_tag = 0 if spec.role == "generator" else 1
    for i, (name, d) in enumerate(decls.items()):
        if d.init == "ones":
            out[name] = np.ones(d.shape)
        elif d.init == "zeros":
            out[name] = np.zeros(d.shape)
        else:
            state = seeded_state("MT19937", seed_mix(seed, i, role_tag, DOMAIN_INIT))
            z, _ = draw_normal(state, int(np.prod(d.shape)))
            out[name] = d.std * z.reshape(d.shape)
    return ParamStore(out)


def init_buffers(spec: ModelSpec) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in declarations(spec)[1].items()}


def build_generator(variant: str, base_width: int = 1024, latent_dim: int = 128,
                    seed: int = 0) -> tuple[ModelSpec, ParamStore]:
    spec = generator_spec(variant, base_width, latent_dim)
    return spec, init_params(spec, seed)


def build_discriminator(variant: str, base_width: int = 1024,
                        seed: int = 0) -> tuple[ModelSpec, ParamStore]:
    spec = discriminator_spec(variant, base_width)
    return spec, init_params(spec, seed)


# ---------------------------------------------------------------------------
# forward


def forward(spec: ModelSpec, rt: Runtime, x: Tensor) -> Tensor:
    p = rt.p
    for s in spec.stages:
        if s.kind == "linear":
            x = ops.linear(x, p(f"{s.name}.W"), p(f"{s.name}.b"))
            x = ops.reshape(x, (x.shape[0], s.out_channels, s.resolution, s.resolution))
            x = ops.relu(batch_norm_forward(rt, f"{s.name}.bn", x))
        elif s.kind == "module":
            x = build_module(s.module, s.layer_id)(rt, s.name, x)
        elif s.kind == "upconv":
            x = ops.conv2d(ops.upsample_nearest(x), p(f"{s.name}.conv.K"), pad=1)
            x = ops.relu(batch_norm_forward(rt, f"{s.name}.bn", x))
        elif s.kind == "conv":
            x = ops.avg_pool(ops.leaky_relu(ops.conv2d(x, p(f"{s.name}.conv.K"), pad=1), 0.2))
        elif s.kind == "conv_out":
            x = ops.tanh(ops.conv2d(x, p(f"{s.name}.conv.K"), pad=1))
        elif s.kind == "combine_out":
            x = ops.tanh(ops.channel_combine(x, p(f"{s.name}.V")))
        elif s.kind == "head_flat":
            x = ops.linear(ops.reshape(x, (x.shape[0], -1)), p(f"{s.name}.W"), p(f"{s.name}.b"))
        elif s.kind == "head_gap":
            x = ops.linear(ops.global_avg_pool(x), p(f"{s.name}.W"), p(f"{s.name}.b"))
    return x


class Model:
    """A ModelSpec with its parameters, normalization buffers and mask bank."""

    def __init__(self, spec: ModelSpec, params: ParamStore, masks: MaskBank | None = None,
                 buffers: dict[str, np.ndarray] | None = None):
        self.spec = spec
        self.params = params
        self.masks = masks or MaskBank(MaskConfig())
        self.buffers = buffers if buffers is not None else init_buffers(spec)

    def __call__(self, tape: Tape, x: Tensor, train: bool = True,
                 params: dict[str, Tensor] | None = None) -> tuple[Tensor, Runtime]:
        if params is None:
            params = {k: tape.const(v) for k, v in self.params.items()}
        rt = Runtime(tape, params, self.masks, train, self.buffers)
        return forward(self.spec, rt, x), rt

    def commit_buffers(self, rt: Runtime) -> None:
        self.buffers = {**self.buffers, **rt.buffer_updates}

    def generate(self, z: np.ndarray, dtype=np.float64) -> np.ndarray:
        """Generation mode: running batch-norm statistics, no tape retained."""
        tape = Tape(dtype)
        out, _ = self(tape, tape.input(z), train=False)
        return out.value.astype(np.float64)


# ---------------------------------------------------------------------------
# accounting


def stage_layer_counts(spec: ModelSpec) -> list[tuple[str, str, int]]:
    """(stage name, stage kind, weight count of its perturbation/conv layers)."""
    rows = []
    for s in spec.stages:
        if s.kind == "module":
            m = build_module(s.module, s.layer_id)
            n = sum(l.n_params() for l in m.layers.values())
            if m.project:
                n += s.in_channels * s.out_channels
            rows.append((s.name, s.module.kind, n))
        elif s.kind in ("upconv", "conv_out", "conv"):
            rows.append((s.name, s.kind, ConvLayerSpec(s.in_channels, s.out_channels).n_params()))
        elif s.kind == "combine_out":
            rows.append((s.name, s.kind, PerturbLayerSpec(s.in_channels, s.out_channels).n_params()))
    return rows


def matched_stage_ratios(pg: ModelSpec, cg: ModelSpec) -> list[tuple[str, str, Fraction]]:
    """Pair each TPM with the CG upsampling conv of the same stage, and the output layers."""
    pg_rows = [r for r in stage_layer_counts(pg) if r[1] in ("TPM", "combine_out")]
    cg_rows = [r for r in stage_layer_counts(cg) if r[1] in ("upconv", "conv_out")]
    # extra low-resolution PG stages (PGv2/v3) have no CG counterpart
    pg_rows = pg_rows[len(pg_rows) - len(cg_rows):]
    return [(a[0], b[0], Fraction(a[2], b[2])) for a, b in zip(pg_rows, cg_rows)]


def build_named(variant: str, base_width: int = 1024, seed: int = 0) -> tuple[ModelSpec, ParamStore]:
    if variant in GENERATORS:
        return build_generator(variant, base_width, seed=seed)
    return build_discriminator(variant, base_width, seed=seed)


def declared_count(spec: ModelSpec) -> int:
    """Trainable count from declarations alone (no allocation)."""
    return int(sum(np.prod(d.shape) for d in declarations(spec)[0].values()))

