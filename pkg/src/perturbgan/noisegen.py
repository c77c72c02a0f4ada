"""Pseudorandom generators and on-the-fly noise masks.

Everything here is a pure function of an explicit state: generators return
``(values, new_state)`` and never mutate what they were given.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MASK64 = (1 << 64) - 1

# ---------------------------------------------------------------------------
# linear congruential


@dataclass(frozen=True)
class LcParams:
    a: int = 1103515245
    c: int = 12345
    m: int = 1 << 31

    def __post_init__(self):
        if not 1 < self.m <= 1 << 64:
            raise ValueError(f"modulus must be in (1, 2**64], got {self.m}")
        if self.m & (self.m - 1):
            raise ValueError(f"modulus must be a power of two, got {self.m}")
        if not (0 <= self.a < self.m and 0 <= self.c < self.m):
            raise ValueError("need 0 <= a < m and 0 <= c < m")

    @property
    def bits(self) -> int:
        return self.m.bit_length() - 1


DEFAULT_LC = LcParams()
RANDU = LcParams(a=65539, c=0, m=1 << 31)


@dataclass(frozen=True)
class LcState:
    params: LcParams
    x: int

    kind = "LC"

    def __post_init__(self):
        if not 0 <= self.x < self.params.m:
            raise ValueError(f"LC state {self.x} outside [0, {self.params.m})")

    @property
    def bits(self) -> int:
        return self.params.bits


def lc_next(state: LcState) -> tuple[int, LcState]:
    p = state.params
    x = (p.a * state.x + p.c) % p.m
    return x, LcState(p, x)


@lru_cache(maxsize=16)
def _lc_jump_table(params: LcParams, block: int) -> tuple[np.ndarray, np.ndarray]:
    # x_{n+k} = A_k x_n + C_k (mod m), k = 1..block
    a_k = np.empty(block, dtype=np.uint64)
    c_k = np.empty(block, dtype=np.uint64)
    a, c = 1, 0
    for k in range(block):
        a = (a * params.a) % params.m
        c = (c * params.a + params.c) % params.m
        a_k[k], c_k[k] = a, c
    a_k.flags.writeable = False
    c_k.flags.writeable = False
    return a_k, c_k


def lc_draw(state: LcState, n: int, block: int = 1024) -> tuple[np.ndarray, LcState]:
    """The next ``n`` outputs as uint64 (wrapping uint64 arithmetic is exact mod m)."""
    p = state.params
    a_k, c_k = _lc_jump_table(p, block)
    mask = np.uint64(p.m - 1)
    out = np.empty(n, dtype=np.uint64)
    x = state.x
    for start in range(0, n, block):
        k = min(block, n - start)
        with np.errstate(over="ignore"):
            vals = (a_k[:k] * np.uint64(x) + c_k[:k]) & mask
        out[start:start + k] = vals
        x = int(vals[-1])
    return out, LcState(p, x)


# ---------------------------------------------------------------------------
# MT19937

_N, _M = 624, 397
_MATRIX_A = np.uint32(0x9908B0DF)
_UPPER = np.uint32(0x80000000)
_LOWER = np.uint32(0x7FFFFFFF)


@dataclass(frozen=True, eq=False)
class MtState:
    mt: np.ndarray  # 624 uint32 words, read-only
    index: int = _N

    kind = "MT19937"
    bits = 32

    def __post_init__(self):
        if self.mt.shape != (_N,) or self.mt.dtype != np.uint32:
            raise ValueError("MT state needs 624 uint32 words")
        if not 0 <= self.index <= _N:
            raise ValueError(f"MT index {self.index} outside [0, 624]")

    def __eq__(self, other):
        return (isinstance(other, MtState) and self.index == other.index
                and np.array_equal(self.mt, other.mt))


def _frozen(words) -> np.ndarray:
    arr = np.array(words, dtype=np.uint32)
    arr.flags.writeable = False
    return arr


def _genrand_words(seed: int) -> list[int]:
    mt = [seed & 0xFFFFFFFF]
    for i in range(1, _N):
        prev = mt[-1]
        mt.append((1812433253 * (prev ^ (prev >> 30)) + i) & 0xFFFFFFFF)
    return mt


def mt_seed(seed: int) -> MtState:
    """Standard ``init_genrand`` seeding (32-bit seed)."""
    return MtState(_frozen(_genrand_words(seed)))


def mt_seed_by_array(key) -> MtState:
    """Standard ``init_by_array`` seeding."""
    mt = _genrand_words(19650218)
    key = [k & 0xFFFFFFFF for k in key]
    i, j = 1, 0
    for _ in range(max(_N, len(key))):
        prev = mt[i - 1]
        mt[i] = ((mt[i] ^ ((prev ^ (prev >> 30)) * 1664525)) + key[j] + j) & 0xFFFFFFFF
        i += 1
        j += 1
        if i >= _N:
            mt[0] = mt[_N - 1]
            i = 1
        if j >= len(key):
            j = 0
    for _ in range(_N - 1):
        prev = mt[i - 1]
        mt[i] = ((mt[i] ^ ((prev ^ (prev >> 30)) * 1566083941)) - i) & 0xFFFFFFFF
        i += 1
        if i >= _N:
            mt[0] = mt[_N - 1]
            i = 1
    mt[0] = 0x80000000
    return MtState(_frozen(mt))


def _twist(old: np.ndarray) -> np.ndarray:
    mt = old.copy()

    def chunk(lo, hi, off):
        y = (mt[lo:hi] & _UPPER) | (mt[lo + 1:hi + 1] & _LOWER)
        mt[lo:hi] = mt[lo + off:hi + off] ^ (y >> np.uint32(1)) ^ ((y & np.uint32(1)) * _MATRIX_A)

    # each chunk only reads words that are already final for the sequential recurrence
    chunk(0, _N - _M, _M)
    chunk(_N - _M, 2 * (_N - _M), _M - _N)
    chunk(2 * (_N - _M), _N - 1, _M - _N)
    y = (mt[_N - 1] & _UPPER) | (mt[0] & _LOWER)
    mt[_N - 1] = mt[_M - 1] ^ (y >> np.uint32(1)) ^ ((y & np.uint32(1)) * _MATRIX_A)
    mt.flags.writeable = False
    return mt


def _temper(y: np.ndarray) -> np.ndarray:
    y = y ^ (y >> np.uint32(11))
    y = y ^ ((y << np.uint32(7)) & np.uint32(0x9D2C5680))
    y = y ^ ((y << np.uint32(15)) & np.uint32(0xEFC60000))
    return y ^ (y >> np.uint32(18))


def mt_next(state: MtState) -> tuple[int, MtState]:
    mt, idx = state.mt, state.index
    if idx >= _N:
        mt, idx = _twist(mt), 0
    return int(_temper(mt[idx:idx + 1])[0]), MtState(mt, idx + 1)


def mt_draw(state: MtState, n: int) -> tuple[np.ndarray, MtState]:
    """The next ``n`` tempered 32-bit outputs."""
    out = np.empty(n, dtype=np.uint32)
    mt, idx = state.mt, state.index
    pos = 0
    while pos < n:
        if idx >= _N:
            mt, idx = _twist(mt), 0
        k = min(_N - idx, n - pos)
        out[pos:pos + k] = _temper(mt[idx:idx + k])
        pos += k
        idx += k
    return out, MtState(mt, idx)


# ---------------------------------------------------------------------------
# generic draws

RngState = LcState | MtState


def draw_raw(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    if isinstance(state, MtState):
        vals, state = mt_draw(state, n)
        return vals.astype(np.uint64), state
    return lc_draw(state, n)


def draw_uniform(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """Uniforms on [0, 1) built from the top 24 bits of each output word."""
    raw, state = draw_raw(state, n)
    bits = state.bits
    if bits >= 24:
        top = raw >> np.uint64(bits - 24)
        return top.astype(np.float64) * 2.0 ** -24, state
    return raw.astype(np.float64) * 2.0 ** -bits, state


def uniform_to_normal(u1, u2):
    """Box-Muller; ``u1`` in (0, 1], ``u2`` in [0, 1)."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    if np.any(u1 <= 0) or np.any(u1 > 1):
        raise ValueError("u1 must lie in (0, 1]")
    if np.any(u2 < 0) or np.any(u2 >= 1):
        raise ValueError("u2 must lie in [0, 1)")
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z1, z2 = r * np.cos(theta), r * np.sin(theta)
    if z1.ndim == 0:
        return float(z1), float(z2)
    return z1, z2


def draw_normal(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    pairs = (n + 1) // 2
    u, state = draw_uniform(state, 2 * pairs)
    z1, z2 = uniform_to_normal(1.0 - u[0::2], u[1::2])
    z = np.empty(2 * pairs)
    z[0::2], z[1::2] = z1, z2
    return z[:n], state


# ---------------------------------------------------------------------------
# seeds and masks

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# seed domains keep mask, data-order and latent streams apart
DOMAIN_MASK = 0
DOMAIN_DATA = 1
DOMAIN_LATENT = 2
DOMAIN_INIT = 3


def splitmix64_finalize(z: int) -> int:
    """SplitMix64 output step: add the golden gamma, then two xor-shift-multiply rounds."""
    z = (z + _GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def seed_mix(global_seed: int, layer_id: int, channel: int, domain: int = DOMAIN_MASK) -> int:
    z = (global_seed & MASK64) ^ ((layer_id * _GAMMA) & MASK64) ^ ((channel * _MIX1) & MASK64)
    z ^= (domain * _MIX2) & MASK64
    return splitmix64_finalize(z)


def seeded_state(kind: str, seed: int, lc: LcParams = DEFAULT_LC) -> RngState:
    """Seed a generator of ``kind`` from a 64-bit seed."""
    if kind == "MT19937":
        return mt_seed_by_array([seed & 0xFFFFFFFF, seed >> 32])
    if kind == "LC":
        return LcState(lc, seed % lc.m)
    raise ValueError(f"unknown rng kind {kind!r}")


@dataclass(frozen=True)
class MaskKey:
    global_seed: int
    layer_id: int
    channel: int
    shape: tuple[int, int]
    rng_kind: str = "MT19937"
    dist_kind: str = "SND"

    def __post_init__(self):
        if self.rng_kind not in ("MT19937", "LC"):
            raise ValueError(f"unknown rng kind {self.rng_kind!r}")
        if self.dist_kind not in ("SND", "UD"):
            raise ValueError(f"unknown distribution {self.dist_kind!r}")
        if len(self.shape) != 2 or min(self.shape) <= 0:
            raise ValueError(f"mask shape must be two positive extents, got {self.shape}")

    @classmethod
    def parse(cls, text: str) -> "MaskKey":
        """``seed,layer,channel,HxW,rng,dist``, e.g. ``7,0,3,32x32,MT19937,SND``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 6:
            raise ValueError(f"mask key needs 6 comma-separated fields, got {text!r}")
        h, w = (int(v) for v in parts[3].lower().split("x"))
        rng = {"MT": "MT19937"}.get(parts[4].upper(), parts[4].upper())
        return cls(int(parts[0]), int(parts[1]), int(parts[2]), (h, w), rng, parts[5].upper())


def make_mask(key: MaskKey) -> np.ndarray:
    h, w = key.shape
    state = seeded_state(key.rng_kind, seed_mix(key.global_seed, key.layer_id, key.channel))
    if key.dist_kind == "SND":
        vals, _ = draw_normal(state, h * w)
    else:
        u, _ = draw_uniform(state, h * w)
        vals = 2.0 * u - 1.0
    out = vals.reshape(h, w)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# lattice diagnostics

RANDU_RESIDUE_MODULUS = 1 << 31


@dataclass(frozen=True)
class LatticeReport:
    triples: np.ndarray  # (n, 3) consecutive outputs scaled to [0, 1)
    residues: np.ndarray  # (x[i+2] - 6 x[i+1] + 9 x[i]) mod 2**31
    residue_zero_fraction: float
    chi2: float
    chi2_bins: int
    chi2_pvalue: float

    def summary(self) -> str:
        return f"residue_zero_fraction={self.residue_zero_fraction:.6f}, chi2={self.chi2:.4f}"


def lattice_diagnostic(state: RngState, n: int, bins: int = 64) -> LatticeReport:
    """Consecutive-triple structure of ``n`` triples drawn from ``state``."""
    from scipy.stats import chi2 as chi2_dist

    if n < 1000:
        raise ValueError("lattice diagnostic needs n >= 1000")
    raw, _ = draw_raw(state, n + 2)
    scaled = raw.astype(np.float64) / float(1 << state.bits)
    triples = np.stack([scaled[:-2], scaled[1:-1], scaled[2:]], axis=1)
    x = raw.astype(np.int64)
    residues = np.mod(x[2:] - 6 * x[1:-1] + 9 * x[:-2], RANDU_RESIDUE_MODULUS)
    counts = np.bincount(np.minimum((scaled * bins).astype(np.int64), bins - 1), minlength=bins)
    expected = scaled.size / bins
    stat = float(((counts - expected) ** 2 / expected).sum())
    return LatticeReport(triples, residues, float(np.mean(residues == 0)), stat, bins,
                         float(chi2_dist.sf(stat, bins - 1)))
