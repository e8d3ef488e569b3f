"""Bitstream primitives: Golomb-Rice runs, canonical Huffman, flag packing."""

import numpy as np
import pytest

from anycostfl import rngs
from anycostfl.bitio import (
    CorruptStream,
    canonical_codes,
    decode_mask,
    encode_mask,
    huffman_decode,
    huffman_encode,
    huffman_lengths,
    pack_flags,
    rice_encode,
    rice_parameter,
    unpack_flags,
)


def test_rice_parameter_known_values():
    assert rice_parameter(np.array([], dtype=np.int64)) == 0
    assert rice_parameter(np.array([0, 0, 0])) == 0
    assert rice_parameter(np.array([3])) == 2  # log2(4)
    assert rice_parameter(np.array([7])) == 3
    assert rice_parameter(np.array([1, 2])) == 1  # mean 1.5 -> floor(log2 2.5)


def test_rice_encode_hand_assembled_bits():
    # run 3 at k=1: quotient 1 -> "10", remainder 1 -> "1"; "101" pads to 0xA0
    assert rice_encode(np.array([3]), 1) == bytes([0xA0])
    # run 0 at k=0 is just the stop bit
    assert rice_encode(np.array([0]), 0) == bytes([0x00])
    # runs 5,2 at k=2: "10 01" + "0 10" = 1001010 -> 0x94
    assert rice_encode(np.array([5, 2]), 2) == bytes([0x94])
    # eight zero runs at k=0 fill exactly one byte of stop bits
    assert rice_encode(np.zeros(8, dtype=np.int64), 0) == bytes([0x00])


def test_rice_encode_rejects_negative():
    with pytest.raises(ValueError):
        rice_encode(np.array([-1]), 0)


def test_encode_mask_hand_case():
    # set bits at 1 and 4: runs [1, 2], mean 1.5 -> k=1, bits "01"+"100" -> 0x60
    k, data = encode_mask(np.array([0, 1, 0, 0, 1], dtype=bool))
    assert k == 1
    assert data == bytes([0x60])


def test_encode_mask_all_zero():
    # single run of 5, k = floor(log2 6) = 2, "10"+"01" -> 0x90
    k, data = encode_mask(np.zeros(5, dtype=bool))
    assert k == 2
    assert data == bytes([0x90])
    assert not decode_mask(data, k, 5).any()


def test_mask_roundtrip_densities():
    rng = rngs.stream(11, 3000)
    for n in (1, 7, 8, 9, 63, 1000):
        for density in (0.0, 0.01, 0.5, 0.99, 1.0):
            mask = rng.random(n) < density
            k, data = encode_mask(mask)
            assert np.array_equal(decode_mask(data, k, n), mask)


def test_mask_roundtrip_edge_positions():
    for n in (1, 2, 17):
        for pos in (0, n - 1):
            mask = np.zeros(n, dtype=bool)
            mask[pos] = True
            k, data = encode_mask(mask)
            assert np.array_equal(decode_mask(data, k, n), mask)


def test_decode_mask_truncated_raises():
    rng = rngs.stream(12, 3001)
    mask = rng.random(400) < 0.5
    k, data = encode_mask(mask)
    with pytest.raises(CorruptStream):
        decode_mask(data[: len(data) // 2], k, 400)


def test_decode_mask_overrun_raises():
    mask = np.zeros(10, dtype=bool)
    mask[9] = True
    k, data = encode_mask(mask)
    with pytest.raises(CorruptStream):
        decode_mask(data, k, 5)


def test_huffman_lengths_textbook_tree():
    lengths = huffman_lengths(np.array([8, 4, 2, 1, 1]))
    assert lengths.tolist() == [1, 2, 3, 4, 4]


def test_huffman_lengths_degenerate_alphabets():
    assert huffman_lengths(np.array([0, 0, 0])).tolist() == [0, 0, 0]
    assert huffman_lengths(np.array([0, 5, 0])).tolist() == [0, 1, 0]
    assert huffman_lengths(np.array([3, 3, 3, 3])).tolist() == [2, 2, 2, 2]


def test_huffman_lengths_satisfy_kraft_with_equality():
    rng = rngs.stream(13, 3002)
    for _ in range(20):
        freqs = rng.integers(0, 100, size=rng.integers(2, 40))
        lengths = huffman_lengths(freqs)
        used = lengths[lengths > 0]
        if len(used) == 0:
            continue
        if len(used) == 1:
            assert used[0] == 1
            continue
        kraft = np.sum(2.0 ** -used.astype(np.float64))
        assert abs(kraft - 1.0) < 1e-12


def test_canonical_codes_hand_case():
    codes = canonical_codes(np.array([1, 2, 3, 3]))
    assert codes.tolist() == [0, 2, 6, 7]


def test_canonical_codes_prefix_free():
    rng = rngs.stream(14, 3003)
    for _ in range(10):
        freqs = rng.integers(1, 50, size=12)
        lengths = huffman_lengths(freqs)
        codes = canonical_codes(lengths)
        syms = np.flatnonzero(lengths > 0)
        as_bits = [
            format(int(codes[s]), "0{}b".format(int(lengths[s]))) for s in syms
        ]
        for i, a in enumerate(as_bits):
            for j, b in enumerate(as_bits):
                if i != j:
                    assert not b.startswith(a)


def test_canonical_codes_reject_kraft_violation():
    with pytest.raises(CorruptStream):
        canonical_codes(np.array([1, 1, 1]))


def test_huffman_roundtrip_seeded_streams():
    rng = rngs.stream(15, 3004)
    for _ in range(25):
        n_sym = int(rng.integers(1, 20))
        # zipf-ish skew so lengths vary
        weights = 1.0 / (1.0 + np.arange(n_sym))
        symbols = rng.choice(n_sym, size=int(rng.integers(1, 500)), p=weights / weights.sum())
        freqs = np.bincount(symbols, minlength=n_sym)
        lengths = huffman_lengths(freqs)
        data = huffman_encode(symbols, lengths)
        out = huffman_decode(data, lengths, len(symbols))
        assert np.array_equal(out, symbols)


def test_huffman_single_symbol_stream():
    freqs = np.array([0, 7, 0])
    lengths = huffman_lengths(freqs)
    symbols = np.full(7, 1)
    data = huffman_encode(symbols, lengths)
    assert len(data) == 1  # 7 one-bit codes pad to a single byte
    assert np.array_equal(huffman_decode(data, lengths, 7), symbols)


def test_huffman_skew_beats_fixed_width():
    rng = rngs.stream(16, 3005)
    symbols = rng.choice(8, size=4000, p=[0.9, 0.04, 0.02, 0.01, 0.01, 0.01, 0.005, 0.005])
    freqs = np.bincount(symbols, minlength=8)
    lengths = huffman_lengths(freqs)
    data = huffman_encode(symbols, lengths)
    assert len(data) * 8 < 3 * len(symbols)  # fixed width would be 3 bits/symbol


def test_huffman_decode_truncation_raises():
    freqs = np.array([5, 3, 2, 1])
    lengths = huffman_lengths(freqs)
    symbols = np.array([0, 1, 2, 3, 0, 1, 0])
    data = huffman_encode(symbols, lengths)
    with pytest.raises(CorruptStream):
        huffman_decode(data[:-1], lengths, len(symbols))


def test_huffman_decode_empty_table_raises():
    with pytest.raises(CorruptStream):
        huffman_decode(b"\x00", np.zeros(4, dtype=np.int64), 3)


def test_huffman_decode_invalid_prefix_raises():
    # incomplete code set: "11" is not assigned, so all-ones input cannot parse
    lengths = np.array([2, 2, 2])
    with pytest.raises(CorruptStream):
        huffman_decode(b"\xff", lengths, 2)


def test_flags_pack_exact_bytes_and_roundtrip():
    assert pack_flags(np.array([1, 0, 1], dtype=bool)) == bytes([0xA0])
    rng = rngs.stream(17, 3006)
    for n in (1, 8, 9, 100):
        flags = rng.random(n) < 0.5
        assert np.array_equal(unpack_flags(pack_flags(flags), n), flags)


def test_unpack_flags_short_data_raises():
    with pytest.raises(CorruptStream):
        unpack_flags(b"\x00", 9)
