"""Bit-level primitives for the update wire format.

Bitstreams are MSB-first within bytes and every section is padded to a byte
boundary. Encoders are vectorised with numpy; decoders validate as they go
and raise CorruptStream instead of reading past the end of a section.
"""

from __future__ import annotations

import heapq

import numpy as np


class CorruptStream(ValueError):
    """An encoded update failed validation while being parsed."""


def _scatter_codes(values: np.ndarray, lengths: np.ndarray) -> bytes:
    """Pack variable-length big-endian codes (values[i], lengths[i]) into bytes."""
    values = values.astype(np.uint64)
    lengths = lengths.astype(np.int64)
    total = int(lengths.sum())
    bits = np.zeros(total, dtype=np.uint8)
    offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    max_len = int(lengths.max()) if len(lengths) else 0
    for b in range(max_len):
        sel = lengths > b
        shift = (lengths[sel] - 1 - b).astype(np.uint64)
        bits[offsets[sel] + b] = ((values[sel] >> shift) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits).tobytes()


def rice_parameter(runs: np.ndarray) -> int:
    """k = floor(log2(mean_run + 1)), the classic Rice parameter choice."""
    if len(runs) == 0:
        return 0
    mean = float(np.mean(runs))
    return min(int(np.floor(np.log2(mean + 1.0))), 255)


def rice_encode(runs: np.ndarray, k: int) -> bytes:
    """Golomb-Rice code: quotient in unary (q ones then a zero), then k remainder bits."""
    runs = np.asarray(runs, dtype=np.int64)
    if np.any(runs < 0):
        raise ValueError("runs must be non-negative")
    q = runs >> k
    lengths = q + 1 + k
    total = int(lengths.sum())
    bits = np.zeros(total, dtype=np.uint8)
    offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    # unary quotients: q ones starting at each code's offset
    total_q = int(q.sum())
    if total_q:
        starts = np.concatenate(([0], np.cumsum(q)[:-1]))
        within = np.arange(total_q) - np.repeat(starts, q)
        bits[np.repeat(offsets, q) + within] = 1
    # separator zeros are already in place; now the k-bit remainders
    for b in range(k):
        bits[offsets + q + 1 + b] = (runs >> (k - 1 - b)) & 1
    return np.packbits(bits).tobytes()


def encode_mask(mask: np.ndarray) -> tuple[int, bytes]:
    """Run-length code a boolean mask as zero-gaps between set bits.

    One run precedes every set bit; a final run covers trailing zeros (only
    emitted when there are any). An all-zero mask is the single run ``n``.
    Returns (rice_k, payload).
    """
    mask = np.asarray(mask, dtype=bool)
    n = len(mask)
    ones = np.flatnonzero(mask)
    if len(ones) == 0:
        runs = np.array([n], dtype=np.int64)
    else:
        gaps = np.diff(ones) - 1
        runs = np.concatenate(([ones[0]], gaps))
        trailing = n - int(ones[-1]) - 1
        if trailing > 0:
            runs = np.concatenate((runs, [trailing]))
    k = rice_parameter(runs)
    return k, rice_encode(runs, k)


def decode_mask(data: bytes, k: int, n: int) -> np.ndarray:
    """Inverse of encode_mask for a mask of n coordinates."""
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    zeros = np.flatnonzero(bits == 0)
    mask = np.zeros(n, dtype=bool)
    pos = 0  # bit cursor
    zi = 0
    covered = 0
    n_bits = len(bits)
    while covered < n:
        while zi < len(zeros) and zeros[zi] < pos:
            zi += 1
        if zi >= len(zeros):
            raise CorruptStream("mask section ended inside a unary quotient")
        z = int(zeros[zi])
        if z + 1 + k > n_bits:
            raise CorruptStream("mask section ended inside a remainder")
        run = (z - pos) << k
        if k:
            rem = 0
            for bit in bits[z + 1 : z + 1 + k]:
                rem = (rem << 1) | int(bit)
            run |= rem
        pos = z + 1 + k
        if covered + run > n:
            raise CorruptStream("mask run overruns the element count")
        if covered + run == n:
            break  # trailing zeros
        mask[covered + run] = True
        covered += run + 1
    return mask


def huffman_lengths(freqs: np.ndarray) -> np.ndarray:
    """Code length per symbol from frequencies (0 for unused symbols).

    Deterministic: heap ties break on insertion order. A single-symbol
    alphabet gets length 1 so its codes still occupy bits on the wire.
    """
    freqs = np.asarray(freqs, dtype=np.int64)
    active = np.flatnonzero(freqs > 0)
    lengths = np.zeros(len(freqs), dtype=np.uint8)
    if len(active) == 0:
        return lengths
    if len(active) == 1:
        lengths[active[0]] = 1
        return lengths

    parent: dict[int, int] = {}
    heap = []
    counter = 0
    for sym in active:
        heapq.heappush(heap, (int(freqs[sym]), counter, int(sym)))
        counter += 1
    next_node = len(freqs)  # internal node ids start past the symbol range
    while len(heap) > 1:
        w1, _, n1 = heapq.heappop(heap)
        w2, _, n2 = heapq.heappop(heap)
        parent[n1] = next_node
        parent[n2] = next_node
        heapq.heappush(heap, (w1 + w2, counter, next_node))
        counter += 1
        next_node += 1
    for sym in active:
        depth = 0
        node = int(sym)
        while node in parent:
            node = parent[node]
            depth += 1
        if depth > 255:
            raise ValueError("Huffman code length exceeds the 8-bit table field")
        lengths[sym] = depth
    return lengths


def canonical_codes(lengths: np.ndarray) -> np.ndarray:
    """Assign canonical codes: symbols sorted by (length, symbol) get
    consecutive values, shifted left whenever the length grows."""
    lengths = np.asarray(lengths, dtype=np.int64)
    syms = np.flatnonzero(lengths > 0)
    if len(syms) and int(lengths[syms].max()) > 63:
        # u32 element counts keep genuine trees far shallower than this
        raise CorruptStream("code length exceeds the 64-bit code space")
    order = syms[np.lexsort((syms, lengths[syms]))]
    codes = np.zeros(len(lengths), dtype=np.uint64)
    code = 0
    prev = 0
    for i, s in enumerate(order):
        l = int(lengths[s])
        if i:
            code = (code + 1) << (l - prev)
        else:
            code = 0
        if code >> l:
            raise CorruptStream("code lengths violate the Kraft inequality")
        codes[s] = code
        prev = l
    return codes


def huffman_encode(symbols: np.ndarray, lengths: np.ndarray) -> bytes:
    codes = canonical_codes(lengths)
    sym = np.asarray(symbols, dtype=np.int64)
    return _scatter_codes(codes[sym], np.asarray(lengths, dtype=np.int64)[sym])


def huffman_decode(data: bytes, lengths: np.ndarray, count: int) -> np.ndarray:
    """Decode ``count`` symbols from a canonical-Huffman payload."""
    lengths = np.asarray(lengths, dtype=np.int64)
    out = np.zeros(count, dtype=np.uint32)
    if count == 0:
        return out
    syms = np.flatnonzero(lengths > 0)
    if len(syms) == 0:
        raise CorruptStream("level payload present but the code table is empty")
    order = syms[np.lexsort((syms, lengths[syms]))]
    ordered_lengths = lengths[order]
    max_len = int(ordered_lengths.max())
    # canonical decode tables: per length, the first code value and where the
    # symbols of that length start in `order`
    first_code = np.full(max_len + 1, -1, dtype=np.int64)
    first_index = np.zeros(max_len + 1, dtype=np.int64)
    counts = np.zeros(max_len + 1, dtype=np.int64)
    codes = canonical_codes(lengths)
    for idx, s in enumerate(order):
        l = int(lengths[s])
        if first_code[l] < 0:
            first_code[l] = int(codes[s])
            first_index[l] = idx
        counts[l] += 1

    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).tolist()
    n_bits = len(bits)
    pos = 0
    order_list = order.tolist()
    fc = first_code.tolist()
    fi = first_index.tolist()
    ct = counts.tolist()
    for i in range(count):
        code = 0
        l = 0
        while True:
            if pos >= n_bits:
                raise CorruptStream("level payload truncated")
            code = (code << 1) | bits[pos]
            pos += 1
            l += 1
            if l > max_len:
                raise CorruptStream("invalid prefix in level payload")
            if ct[l] and fc[l] >= 0:
                off = code - fc[l]
                if 0 <= off < ct[l]:
                    out[i] = order_list[fi[l] + off]
                    break
    return out


def pack_flags(flags: np.ndarray) -> bytes:
    """Raw bit packing for sign flags, MSB-first."""
    return np.packbits(np.asarray(flags, dtype=np.uint8)).tobytes()


def unpack_flags(data: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if len(bits) < count:
        raise CorruptStream("sign section shorter than the survivor count")
    return bits[:count].astype(bool)
