"""Gradient compression codec.

Lossy stage: kernel-wise magnitude sparsification followed by probabilistic
uniform quantization of the surviving values' magnitudes. A kernel is one
channel of the update (weight row plus its bias entry), matching the unit
the shrink stage works in.

Lossless stage: the per-coordinate survivor mask is Golomb-Rice coded as
zero-run lengths, signs travel as raw bits and level indices are canonical
Huffman coded with an explicit code-length table.

Wire format (all multi-byte integers little-endian, bitstream sections
byte-aligned, MSB-first within bytes):

    magic b"ACFL" | version u8=1 | alpha f32 | beta f32 | layer_count u16
    per layer:
        element_count u32 | u_min f32 | u_max f32 | (L - 1) u16 | rice_k u8
        mask_len u32  | Golomb-Rice run lengths
        sign_len u32  | raw sign bits (1 = negative)
        (L + 1) Huffman code lengths, u8 each
        level_len u32 | Huffman payload

The level count L is stored minus one so the full planner range [1, 2**16]
fits the 16-bit field.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .bitio import (
    CorruptStream,
    decode_mask,
    encode_mask,
    huffman_decode,
    huffman_encode,
    huffman_lengths,
    pack_flags,
    unpack_flags,
)
from .model import GradientUpdate

MAGIC = b"ACFL"
WIRE_VERSION = 1
MAX_LEVELS = 1 << 16


class EmptyUpdate(ValueError):
    """Raised when an all-zero update reaches the quantizer."""


@dataclass
class SparseUpdate:
    """Update tensors after kernel sparsification plus the survivor mask."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: list[tuple[np.ndarray, np.ndarray]]
    kept_kernel_count: int


@dataclass
class QuantizedLayer:
    """One layer flattened to [weights row-major, biases]."""

    element_count: int
    mask: np.ndarray  # bool, per coordinate
    levels: np.ndarray  # uint32, one per set mask bit, in scan order
    signs: np.ndarray  # bool, True = negative


@dataclass
class QuantizedUpdate:
    u_min: float
    u_max: float
    levels_count: int  # L; level indices run 0..L inclusive
    layers: list[QuantizedLayer]

    def survivor_count(self) -> int:
        return int(sum(layer.mask.sum() for layer in self.layers))


@dataclass(frozen=True)
class CompressionPlan:
    rho: float
    levels: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if not 1 <= self.levels <= MAX_LEVELS:
            raise ValueError(f"levels must be in [1, {MAX_LEVELS}]")


@dataclass
class EncodedUpdate:
    data: bytes
    declared_alpha: float
    declared_beta: float

    @property
    def size_bits(self) -> int:
        return 8 * len(self.data)


# ---------------------------------------------------------------------------
# array-level operations (also used directly by the divergence analyses)


def zero_smallest(values: np.ndarray, remove: int) -> np.ndarray:
    """Zero the ``remove`` smallest-magnitude entries; ties drop lower indices first."""
    flat = values.copy()
    if remove <= 0:
        return flat
    order = np.argsort(np.abs(flat), kind="stable")
    flat[order[:remove]] = 0.0
    return flat


def quantize_magnitudes(
    mags: np.ndarray, u_min: float, u_max: float, levels: int, rng: np.random.Generator
) -> np.ndarray:
    """Stochastically round magnitudes onto {u_min + l*(u_max-u_min)/L}.

    Rounds down with probability (Q_{l+1} - u) / (Q_{l+1} - Q_l), which makes
    the reconstruction unbiased. Exact u_min maps to level 0 and exact u_max
    to level L with probability one.
    """
    mags = np.asarray(mags, dtype=np.float64)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if u_max < u_min:
        raise ValueError("u_max must be >= u_min")
    if u_max == u_min:
        return np.full(len(mags), levels, dtype=np.uint32)
    step = (u_max - u_min) / levels
    t = (mags - u_min) / step
    low = np.clip(np.floor(t), 0, levels - 1)
    frac = np.clip(t - low, 0.0, 1.0)
    up = rng.random(len(mags)) < frac
    out = (low + up).astype(np.uint32)
    out[mags == u_max] = levels
    return out


def codebook(u_min: float, u_max: float, levels: int) -> np.ndarray:
    """The L+1 magnitude reconstruction points."""
    return u_min + (u_max - u_min) / levels * np.arange(levels + 1, dtype=np.float64)


# ---------------------------------------------------------------------------
# lossy stage on full updates


def _layer_flat(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([w.ravel(), b])


def _kernel_norms(update: GradientUpdate) -> np.ndarray:
    """L2 norm of every kernel (weight row + bias entry) across all layers."""
    parts = []
    for w, b in zip(update.weights, update.biases):
        sq = np.sum(np.square(w, dtype=np.float64), axis=1)
        sq += np.square(b, dtype=np.float64)
        parts.append(np.sqrt(sq))
    return np.concatenate(parts)


def sparsify(update: GradientUpdate, rho: float) -> SparseUpdate:
    """Zero the floor(rho * K) smallest-norm kernels of the update.

    K counts every channel row in the update. Ties zero the lower global
    kernel index first. The mask records, per coordinate, which entries
    still carry a (non-zero) value.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must be in [0, 1)")
    norms = _kernel_norms(update)
    k_total = len(norms)
    n_zero = int(np.floor(rho * k_total))
    drop = np.argsort(norms, kind="stable")[:n_zero]
    drop_set = np.zeros(k_total, dtype=bool)
    drop_set[drop] = True

    weights, biases, masks = [], [], []
    base = 0
    for w, b in zip(update.weights, update.biases):
        out_dim = w.shape[0]
        layer_drop = drop_set[base : base + out_dim]
        base += out_dim
        w2 = w.copy()
        b2 = b.copy()
        w2[layer_drop] = 0.0
        b2[layer_drop] = 0.0
        weights.append(w2)
        biases.append(b2)
        masks.append((w2 != 0.0, b2 != 0.0))
    return SparseUpdate(
        weights=weights, biases=biases, masks=masks, kept_kernel_count=k_total - n_zero
    )


def quantize(sparse: SparseUpdate, levels: int, rng: np.random.Generator) -> QuantizedUpdate:
    """Probabilistically quantize all surviving magnitudes of a sparse update.

    u_min / u_max are the extreme non-zero magnitudes across the whole
    update (stored as float32, since that is their wire precision).
    """
    flats = [
        _layer_flat(w, b) for w, b in zip(sparse.weights, sparse.biases)
    ]
    nonzero = np.concatenate([f[f != 0.0] for f in flats]) if flats else np.array([])
    if len(nonzero) == 0:
        raise EmptyUpdate("empty update: nothing left to quantize")
    mags = np.abs(nonzero)
    u_min = float(np.float32(mags.min()))
    u_max = float(np.float32(mags.max()))

    layers = []
    for f in flats:
        mask = f != 0.0
        vals = f[mask]
        lv = quantize_magnitudes(np.abs(vals), u_min, u_max, levels, rng)
        layers.append(
            QuantizedLayer(
                element_count=len(f),
                mask=mask,
                levels=lv,
                signs=vals < 0.0,
            )
        )
    return QuantizedUpdate(u_min=u_min, u_max=u_max, levels_count=levels, layers=layers)


def dequantize(q: QuantizedUpdate, shapes: list[tuple[int, int]]) -> GradientUpdate:
    """Rebuild dense float32 tensors from a quantized update.

    ``shapes`` gives (out, in) per layer; the wire only carries flat element
    counts, so the caller supplies the layer geometry.
    """
    if len(shapes) != len(q.layers):
        raise ValueError("shape list does not match the layer count")
    book = codebook(q.u_min, q.u_max, q.levels_count)
    weights, biases = [], []
    for layer, (out_dim, in_dim) in zip(q.layers, shapes):
        n = out_dim * in_dim + out_dim
        if layer.element_count != n:
            raise ValueError(
                f"layer of {layer.element_count} elements cannot fill shape ({out_dim}, {in_dim})"
            )
        if len(layer.levels) and int(layer.levels.max()) > q.levels_count:
            raise CorruptStream("level index exceeds the level count")
        flat = np.zeros(n, dtype=np.float64)
        vals = book[layer.levels]
        vals = np.where(layer.signs, -vals, vals)
        flat[layer.mask] = vals
        flat = flat.astype(np.float32)
        weights.append(flat[: out_dim * in_dim].reshape(out_dim, in_dim))
        biases.append(flat[out_dim * in_dim :])
    return GradientUpdate(weights=weights, biases=biases)


# ---------------------------------------------------------------------------
# lossless stage


def encode_update(q: QuantizedUpdate, alpha: float, beta: float) -> EncodedUpdate:
    """Serialize a quantized update to the wire format."""
    if not q.layers:
        raise ValueError("update has no layers")
    if not 1 <= q.levels_count <= MAX_LEVELS:
        raise ValueError(f"level count must be in [1, {MAX_LEVELS}]")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<B", WIRE_VERSION)
    out += struct.pack("<ff", alpha, beta)
    out += struct.pack("<H", len(q.layers))
    for layer in q.layers:
        if len(layer.levels) != int(layer.mask.sum()) or len(layer.signs) != len(layer.levels):
            raise ValueError("mask, levels and signs disagree on the survivor count")
        rice_k, mask_payload = encode_mask(layer.mask)
        sign_payload = pack_flags(layer.signs) if len(layer.signs) else b""
        freqs = np.bincount(layer.levels, minlength=q.levels_count + 1)
        lengths = huffman_lengths(freqs)
        level_payload = huffman_encode(layer.levels, lengths) if len(layer.levels) else b""
        out += struct.pack("<Iff", layer.element_count, q.u_min, q.u_max)
        out += struct.pack("<HB", q.levels_count - 1, rice_k)
        out += struct.pack("<I", len(mask_payload)) + mask_payload
        out += struct.pack("<I", len(sign_payload)) + sign_payload
        out += lengths.astype(np.uint8).tobytes()
        out += struct.pack("<I", len(level_payload)) + level_payload
    return EncodedUpdate(
        data=bytes(out),
        declared_alpha=float(np.float32(alpha)),
        declared_beta=float(np.float32(beta)),
    )


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptStream("stream truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_update(data: bytes) -> tuple[QuantizedUpdate, float, float]:
    """Parse the wire format back into (update, declared_alpha, declared_beta).

    Exact inverse of encode_update on its image; anything else raises
    CorruptStream.
    """
    cur = _Cursor(data)
    if cur.take(4) != MAGIC:
        raise CorruptStream("bad magic")
    (version,) = cur.unpack("<B")
    if version != WIRE_VERSION:
        raise CorruptStream(f"unsupported version {version}")
    alpha, beta = cur.unpack("<ff")
    (layer_count,) = cur.unpack("<H")
    if layer_count == 0:
        raise CorruptStream("zero layers")

    layers = []
    u_min = u_max = None
    levels_count = None
    for _ in range(layer_count):
        element_count, lo, hi = cur.unpack("<Iff")
        lvl_minus_1, rice_k = cur.unpack("<HB")
        l_count = lvl_minus_1 + 1
        if u_min is None:
            u_min, u_max, levels_count = lo, hi, l_count
        elif (lo, hi, l_count) != (u_min, u_max, levels_count):
            raise CorruptStream("quantizer parameters differ between layers")
        (mask_len,) = cur.unpack("<I")
        mask = decode_mask(cur.take(mask_len), rice_k, element_count)
        survivors = int(mask.sum())
        (sign_len,) = cur.unpack("<I")
        if sign_len != (survivors + 7) // 8:
            raise CorruptStream("sign section length mismatch")
        signs = unpack_flags(cur.take(sign_len), survivors) if survivors else np.zeros(0, bool)
        lengths = np.frombuffer(cur.take(l_count + 1), dtype=np.uint8)
        (level_len,) = cur.unpack("<I")
        payload = cur.take(level_len)
        levels = (
            huffman_decode(payload, lengths, survivors)
            if survivors
            else np.zeros(0, dtype=np.uint32)
        )
        layers.append(
            QuantizedLayer(
                element_count=element_count, mask=mask, levels=levels, signs=signs
            )
        )
    if cur.pos != len(data):
        raise CorruptStream("trailing bytes after the last layer")
    q = QuantizedUpdate(
        u_min=float(np.float32(u_min)),
        u_max=float(np.float32(u_max)),
        levels_count=int(levels_count),
        layers=layers,
    )
    return q, float(np.float32(alpha)), float(np.float32(beta))


def compress(
    update: GradientUpdate, plan: CompressionPlan, alpha: float, beta: float,
    rng: np.random.Generator,
) -> EncodedUpdate:
    """Full lossy + lossless pipeline for one update."""
    return encode_update(quantize(sparsify(update, plan.rho), plan.levels, rng), alpha, beta)


def update_element_count(update: GradientUpdate) -> int:
    return int(sum(w.size + b.size for w, b in zip(update.weights, update.biases)))


# ---------------------------------------------------------------------------
# rate planning


@dataclass
class RatePredictor:
    """Measured (rho, L) -> compression-ratio map with an interpolating curve.

    ``points`` holds every calibrated grid point; ``curve`` is the subset on
    the Pareto frontier (no other point compresses at least as hard with
    lower expected distortion), sorted by strictly increasing ratio.
    """

    points: list[tuple[float, int, float]]  # (rho, levels, measured ratio)
    curve: list[tuple[float, float, int]]  # (beta knot, rho, levels)

    def predicted_ratio(self, beta: float) -> float:
        knots = [c[0] for c in self.curve]
        return float(np.interp(beta, knots, knots))

    def to_json(self) -> str:
        return json.dumps(
            {
                "points": [[r, int(l), ratio] for r, l, ratio in self.points],
                "curve": [[b, r, int(l)] for b, r, l in self.curve],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "RatePredictor":
        raw = json.loads(text)
        points = [(float(r), int(l), float(ratio)) for r, l, ratio in raw["points"]]
        curve = [(float(b), float(r), int(l)) for b, r, l in raw["curve"]]
        if any(b2 <= b1 for (b1, _, _), (b2, _, _) in zip(curve, curve[1:])):
            raise ValueError("predictor curve betas must be strictly increasing")
        return cls(points=points, curve=curve)


def _distortion_proxy(rho: float, levels: int) -> float:
    """Relative divergence model for ranking plans: rho**3 + (1-rho)**3 / (2 L**2)."""
    return rho**3 + (1.0 - rho) ** 3 / (2.0 * levels**2)


def measure_ratio(update: GradientUpdate, plan: CompressionPlan, rng: np.random.Generator) -> float:
    """Encoded bits (headers included) over 32 bits per raw element."""
    encoded = compress(update, plan, 1.0, 0.0, rng)
    return encoded.size_bits / (32.0 * update_element_count(update))


def calibrate_predictor(
    samples: list[GradientUpdate],
    grid: list[tuple[float, int]],
    rng: np.random.Generator,
) -> RatePredictor:
    """Measure the compression ratio of each grid plan over sample updates.

    The returned predictor interpolates along the Pareto frontier of
    (measured ratio, modelled distortion), so plan_from_beta is monotone in
    beta by construction.
    """
    if not samples:
        raise ValueError("calibration needs at least one sample update")
    if not grid:
        raise ValueError("calibration grid is empty")
    points = []
    for rho, levels in grid:
        plan = CompressionPlan(rho=float(rho), levels=int(levels))
        ratios = [measure_ratio(u, plan, rng) for u in samples]
        points.append((plan.rho, plan.levels, float(np.mean(ratios))))

    by_ratio = sorted(points, key=lambda p: (p[2], _distortion_proxy(p[0], p[1])))
    frontier: list[tuple[float, int, float]] = []
    best = np.inf
    for rho, levels, ratio in by_ratio:
        d = _distortion_proxy(rho, levels)
        if d < best:
            if frontier and ratio == frontier[-1][2]:
                frontier[-1] = (rho, levels, ratio)
            else:
                frontier.append((rho, levels, ratio))
            best = d
    curve = [(ratio, rho, levels) for rho, levels, ratio in frontier]
    return RatePredictor(points=points, curve=curve)


def plan_from_beta(predictor: RatePredictor | None, beta: float) -> CompressionPlan:
    """Pick (rho, levels) for a target compression ratio.

    With a predictor, interpolate rho linearly and levels log-linearly
    between the bracketing calibrated knots. Without one, fall back to the
    analytic rule rho = 1 - sqrt(beta), L = round(2 ** (32 sqrt(beta))).
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must be in (0, 1]")
    if predictor is None:
        root = float(np.sqrt(beta))
        levels = int(np.clip(round(2.0 ** (32.0 * root)), 1, MAX_LEVELS))
        return CompressionPlan(rho=1.0 - root, levels=levels)

    curve = predictor.curve
    if not curve:
        raise ValueError("predictor has an empty curve")
    if beta <= curve[0][0]:
        _, rho, levels = curve[0]
        return CompressionPlan(rho=rho, levels=levels)
    if beta >= curve[-1][0]:
        _, rho, levels = curve[-1]
        return CompressionPlan(rho=rho, levels=levels)
    knots = [c[0] for c in curve]
    hi = int(np.searchsorted(knots, beta))
    b0, r0, l0 = curve[hi - 1]
    b1, r1, l1 = curve[hi]
    t = (beta - b0) / (b1 - b0)
    rho = r0 + t * (r1 - r0)
    levels = int(np.clip(round(2.0 ** (np.log2(l0) + t * (np.log2(l1) - np.log2(l0)))), 1, MAX_LEVELS))
    return CompressionPlan(rho=float(rho), levels=levels)
