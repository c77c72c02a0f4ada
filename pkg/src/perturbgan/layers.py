"""Perturbation layers, baseline convolutions and the BPM/TPM/gRPM/dRPM modules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .noisegen import MaskKey, make_mask
from .tape import Tape, Tensor

ACTIVATIONS = ("relu", "leaky_relu")


@dataclass(frozen=True)
class MaskConfig:
    global_seed: int = 0
    rng_kind: str = "MT19937"
    dist_kind: str = "SND"


class MaskBank:
    """Derives masks from their keys on first use and keeps them in memory only.

    ``used`` records every key handed out so callers can re-derive and compare.
    """

    def __init__(self, config: MaskConfig | None = None):
        self.config = config or MaskConfig()
        self._cache: dict[MaskKey, np.ndarray] = {}
        self._stacks: dict[tuple, np.ndarray] = {}

    @property
    def used(self) -> dict[MaskKey, np.ndarray]:
        return dict(self._cache)

    def key(self, layer_id: int, channel: int, shape) -> MaskKey:
        c = self.config
        return MaskKey(c.global_seed, layer_id, channel, tuple(shape), c.rng_kind, c.dist_kind)

    def mask(self, layer_id: int, channel: int, shape) -> np.ndarray:
        key = self.key(layer_id, channel, shape)
        m = self._cache.get(key)
        if m is None:
            m = self._cache[key] = make_mask(key)
        return m

    def stack(self, layer_id: int, channels: int, shape) -> np.ndarray:
        """(channels, H, W) masks of one layer."""
        sig = (layer_id, channels, tuple(shape))
        s = self._stacks.get(sig)
        if s is None:
            s = np.stack([self.mask(layer_id, c, shape) for c in range(channels)])
            s.flags.writeable = False
            self._stacks[sig] = s
        return s


def activate(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return ops.relu(x)
    if kind == "leaky_relu":
        return ops.leaky_relu(x, alpha)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class ParamDecl:
    shape: tuple[int, ...]
    init: str = "normal"  # normal | ones | zeros
    std: float = 0.0
    trainable: bool = True


@dataclass
class Runtime:
    """Per-pass state threaded through model code."""

    tape: Tape
    params: dict[str, Tensor]
    masks: MaskBank
    train: bool = True
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    # new running statistics computed in this pass, applied by the caller
    buffer_updates: dict[str, np.ndarray] = field(default_factory=dict)

    def p(self, name: str) -> Tensor:
        return self.params[name]


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class PerturbLayerSpec:
    in_channels: int
    out_channels: int
    layer_id: int = 0
    masks_per_channel: int = 1
    activation: str = "relu"
    alpha: float = 0.2
    bias: bool = False

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.masks_per_channel

    def param_decls(self, prefix: str) -> dict[str, ParamDecl]:
        d = {f"{prefix}.V": ParamDecl((self.out_channels, self.fan_in),
                                      std=float(np.sqrt(2.0 / self.fan_in)))}
        if self.bias:
            d[f"{prefix}.b"] = ParamDecl((self.out_channels,), "zeros")
        return d

    def n_params(self) -> int:
        return self.out_channels * self.fan_in + (self.out_channels if self.bias else 0)

    def mask_keys(self, masks: MaskBank, shape) -> list[MaskKey]:
        return [masks.key(self.layer_id, c, shape) for c in range(self.fan_in)]


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    bias: bool = False

    def param_decls(self, prefix: str) -> dict[str, ParamDecl]:
        fan = self.in_channels * self.kernel ** 2
        d = {f"{prefix}.K": ParamDecl(
            (self.out_channels, self.in_channels, self.kernel, self.kernel),
            std=float(np.sqrt(2.0 / fan)))}
        if self.bias:
            d[f"{prefix}.b"] = ParamDecl((self.out_channels,), "zeros")
        return d

    def n_params(self) -> int:
        return (self.out_channels * self.in_channels * self.kernel ** 2
                + (self.out_channels if self.bias else 0))


def perturb_forward(x: Tensor, spec: PerturbLayerSpec, weights: Tensor, masks: MaskBank,
                    bias: Tensor | None = None) -> Tensor:
    """out[t] = sum_i act(x[i] + mask[i]) * V[t, i] over a (N, m, H, W) batch."""
    n, m, h, w = x.shape
    if m != spec.in_channels:
        raise ValueError(f"perturbation layer {spec.layer_id}: expected {spec.in_channels} "
                         f"input channels, got {m}")
    k = spec.masks_per_channel
    if k > 1:
        x = ops.reshape(ops.broadcast_to(ops.reshape(x, (n, m, 1, h, w)), (n, m, k, h, w)),
                        (n, m * k, h, w))
    noise = masks.stack(spec.layer_id, m * k, (h, w))
    y = activate(ops.add_mask(x, noise, key=("layer", spec.layer_id)), spec.activation, spec.alpha)
    return ops.channel_combine(y, weights, bias)


def transposed_perturb_forward(x: Tensor, spec: PerturbLayerSpec, weights: Tensor,
                               masks: MaskBank, bias: Tensor | None = None) -> Tensor:
    """Bilinear 2x upsample followed by a perturbation layer on (2H, 2W) masks."""
    return perturb_forward(ops.upsample_bilinear(x), spec, weights, masks, bias)


def conv2d_forward(x: Tensor, spec: ConvLayerSpec, kernel: Tensor,
                   bias: Tensor | None = None) -> Tensor:
    return ops.conv2d(x, kernel, bias, stride=spec.stride, pad=spec.padding)


def _perturb(rt: Runtime, prefix: str, spec: PerturbLayerSpec, x: Tensor) -> Tensor:
    b = rt.params.get(f"{prefix}.b") if spec.bias else None
    return perturb_forward(x, spec, rt.p(f"{prefix}.V"), rt.masks, b)


def _conv(rt: Runtime, prefix: str, spec: ConvLayerSpec, x: Tensor) -> Tensor:
    b = rt.params.get(f"{prefix}.b") if spec.bias else None
    return conv2d_forward(x, spec, rt.p(f"{prefix}.K"), b)


def bn_decls(prefix: str, channels: int) -> tuple[dict[str, ParamDecl], dict[str, np.ndarray]]:
    params = {f"{prefix}.gamma": ParamDecl((channels,), "ones"),
              f"{prefix}.beta": ParamDecl((channels,), "zeros")}
    buffers = {f"{prefix}.running_mean": np.zeros(channels),
               f"{prefix}.running_var": np.ones(channels)}
    return params, buffers


def batch_norm_forward(rt: Runtime, prefix: str, x: Tensor) -> Tensor:
    gamma, beta = rt.p(f"{prefix}.gamma"), rt.p(f"{prefix}.beta")
    rm_key, rv_key = f"{prefix}.running_mean", f"{prefix}.running_var"
    if not rt.train:
        out, _ = ops.batch_norm(x, gamma, beta, rt.bn_eps, (rt.buffers[rm_key], rt.buffers[rv_key]))
        return out
    out, (mu, var) = ops.batch_norm(x, gamma, beta, rt.bn_eps)
    count = x.size // x.shape[1]
    unbiased = var * count / max(count - 1, 1)
    mom = rt.bn_momentum
    rt.buffer_updates[rm_key] = mom * rt.buffers[rm_key] + (1 - mom) * mu
    rt.buffer_updates[rv_key] = mom * rt.buffers[rv_key] + (1 - mom) * unbiased
    return out


# ---------------------------------------------------------------------------
# modules

MODULE_KINDS = ("BPM", "TPM", "gRPM", "dRPM")


@dataclass(frozen=True)
class ModuleSpec:
    kind: str
    in_channels: int
    out_channels: int
    norm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in MODULE_KINDS:
            raise ValueError(f"unknown module kind {self.kind!r}")
        if self.kind == "dRPM" and self.norm:
            raise ValueError("dRPM carries no normalization")

    @property
    def n_layer_ids(self) -> int:
        return 2 if self.kind in ("gRPM", "dRPM") else 1

    def spatial_factor(self) -> float:
        return {"TPM": 2.0, "dRPM": 0.5}.get(self.kind, 1.0)


class Module:
    """A built module: parameter declarations plus a forward that records on a tape."""

    def __init__(self, spec: ModuleSpec, layer_id_base: int):
        self.spec = spec
        s = spec
        self.layers: dict[str, PerturbLayerSpec] = {}
        if s.kind in ("BPM", "TPM"):
            self.layers["p1"] = PerturbLayerSpec(s.in_channels, s.out_channels, layer_id_base)
        else:
            self.layers["p1"] = PerturbLayerSpec(s.in_channels, s.out_channels, layer_id_base)
            self.layers["p2"] = PerturbLayerSpec(s.out_channels, s.out_channels, layer_id_base + 1)
        self.project = s.kind in ("gRPM", "dRPM") and s.in_channels != s.out_channels

    def decls(self, prefix: str) -> tuple[dict[str, ParamDecl], dict[str, np.ndarray]]:
        params: dict[str, ParamDecl] = {}
        buffers: dict[str, np.ndarray] = {}
        for i, (name, layer) in enumerate(self.layers.items(), start=1):
            params.update(layer.param_decls(f"{prefix}.{name}"))
            if self.spec.norm:
                p, b = bn_decls(f"{prefix}.bn{i}", layer.out_channels)
                params.update(p)
                buffers.update(b)
        if self.project:
            params[f"{prefix}.short.V"] = ParamDecl(
                (self.spec.out_channels, self.spec.in_channels),
                std=float(np.sqrt(1.0 / self.spec.in_channels)))
        return params, buffers

    def _norm(self, rt, prefix, i, x):
        return batch_norm_forward(rt, f"{prefix}.bn{i}", x) if self.spec.norm else x

    def __call__(self, rt: Runtime, prefix: str, x: Tensor) -> Tensor:
        s = self.spec
        act = s.activation
        if s.kind == "TPM":
            x = ops.upsample_bilinear(x)
        if s.kind in ("BPM", "TPM"):
            y = _perturb(rt, f"{prefix}.p1", self.layers["p1"], x)
            return activate(self._norm(rt, prefix, 1, y), act)
        y = activate(self._norm(rt, prefix, 1, _perturb(rt, f"{prefix}.p1", self.layers["p1"], x)), act)
        y = self._norm(rt, prefix, 2, _perturb(rt, f"{prefix}.p2", self.layers["p2"], y))
        short = ops.channel_combine(x, rt.p(f"{prefix}.short.V")) if self.project else x
        if s.kind == "dRPM":
            y, short = ops.avg_pool(y), ops.avg_pool(short)
        return activate(ops.add(y, short), act)


def build_module(spec: ModuleSpec, layer_id_base: int = 0) -> Module:
    return Module(spec, layer_id_base)
