"""Conventional link: UTF-8 source coding, rate-1/2 convolutional code, BPSK, Viterbi.

Stands in for the UTF-8 + Turbo reference system: a constraint-length-7
feedforward code (171, 133 octal) with soft-decision Viterbi decoding plays
the rate-1/2 channel-code role.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import channel as ch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    polynomials: tuple[int, int] = (0o171, 0o133)
    constraint_length: int = 7
    modulation_order: int = 2     # BPSK

    @property
    def rate(self) -> float:
        return 1.0 / len(self.polynomials)

    @property
    def n_states(self) -> int:
        return 1 << (self.constraint_length - 1)


DEFAULT_CODEC = CodecConfig()


# ---------------------------------------------------------------------------
# source coding


def source_encode(text: str) -> np.ndarray:
    """UTF-8 bytes, MSB first, as a uint8 bit vector."""
    return np.unpackbits(np.frombuffer(text.encode("utf-8"), dtype=np.uint8))


def source_decode(bits: np.ndarray) -> tuple[str, bool]:
    """Bits back to text.  Invalid byte sequences become U+FFFD; the flag reports it."""
    bits = np.asarray(bits, dtype=np.uint8)
    raw = np.packbits(bits[: len(bits) - len(bits) % 8]).tobytes()
    try:
        return raw.decode("utf-8"), False
    except UnicodeDecodeError:
        return raw.decode("utf-8", errors="replace"), True


# ---------------------------------------------------------------------------
# convolutional code


def _parity(x: int) -> int:
    return bin(x).count("1") & 1


@lru_cache(maxsize=None)
def trellis(codec: CodecConfig = DEFAULT_CODEC) -> tuple[np.ndarray, np.ndarray]:
    """(next_state, outputs) tables indexed [state, input bit].

    The register holds the newest bit at position K-1; the state is the K-1
    previous bits.
    """
    k = codec.constraint_length
    nxt = np.zeros((codec.n_states, 2), dtype=np.int64)
    outs = np.zeros((codec.n_states, 2, len(codec.polynomials)), dtype=np.uint8)
    for s in range(codec.n_states):
        for u in (0, 1):
            reg = (u << (k - 1)) | s
            nxt[s, u] = reg >> 1
            outs[s, u] = [_parity(reg & g) for g in codec.polynomials]
    return nxt, outs


def conv_encode(bits: np.ndarray, codec: CodecConfig = DEFAULT_CODEC) -> np.ndarray:
    """Encode and terminate with K-1 zero tail bits: 2 * (len + K - 1) coded bits."""
    nxt, outs = trellis(codec)
    msg = np.concatenate([np.asarray(bits, dtype=np.uint8), np.zeros(codec.constraint_length - 1, np.uint8)])
    coded = np.empty((msg.size, len(codec.polynomials)), dtype=np.uint8)
    s = 0
    for i, u in enumerate(msg):
        coded[i] = outs[s, u]
        s = nxt[s, u]
    return coded.reshape(-1)


def viterbi_decode(soft: np.ndarray, codec: CodecConfig = DEFAULT_CODEC) -> np.ndarray:
    """Maximum-likelihood message for soft BPSK values (bit 0 -> +1, bit 1 -> -1).

    Maximises the correlation between ``soft`` and the codeword's antipodal
    image over terminated paths, which is ML for Gaussian noise.  Returns
    the message bits without the tail.
    """
    n_out = len(codec.polynomials)
    soft = np.asarray(soft, dtype=np.float64).reshape(-1, n_out)
    steps = soft.shape[0]
    tail = codec.constraint_length - 1
    if steps < tail:
        raise ValueError("soft input shorter than the code tail")
    nxt, outs = trellis(codec)
    n_states = codec.n_states
    half = n_states // 2
    # predecessors of state t: p0 = 2*(t mod half), p1 = p0 + 1, input bit = t // half
    ns = np.arange(n_states)
    pred = np.stack([2 * (ns % half), 2 * (ns % half) + 1], axis=1)
    bit_in = ns // half
    sign = 1.0 - 2.0 * outs.astype(np.float64)              # (S, 2, n_out)
    branch_sign = sign[pred, bit_in[:, None]]                 # (S, 2, n_out)
    metric = np.full(n_states, -np.inf)
    metric[0] = 0.0
    choice = np.zeros((steps, n_states), dtype=np.uint8)
    for t in range(steps):
        bm = branch_sign @ soft[t]                            # (S, 2)
        cand = metric[pred] + bm
        c = np.argmax(cand, axis=1)
        choice[t] = c
        metric = cand[ns, c]
    state = 0
    bits = np.zeros(steps, dtype=np.uint8)
    for t in range(steps - 1, -1, -1):
        bits[t] = bit_in[state]
        state = pred[state, choice[t, state]]
    return bits[: steps - tail]


def bpsk(bits: np.ndarray) -> np.ndarray:
    return 1.0 - 2.0 * np.asarray(bits, dtype=np.float64)


def symbol_count(text: str, codec: CodecConfig = DEFAULT_CODEC) -> int:
    """Channel symbols the conventional link spends on ``text`` (tail included)."""
    n_bits = 8 * len(text.encode("utf-8"))
    coded = len(codec.polynomials) * (n_bits + codec.constraint_length - 1)
    return int(coded // np.log2(codec.modulation_order))


# ---------------------------------------------------------------------------
# link


@dataclass
class LinkResult:
    text: str
    replaced: bool
    n_symbols: int
    deep_fade: bool


def baseline_link(text: str, snr_db: float, rng: np.random.Generator,
                  codec: CodecConfig = DEFAULT_CODEC) -> LinkResult:
    """Send ``text`` over one block-fading use of the channel and decode it."""
    coded = conv_encode(source_encode(text), codec)
    symbols = bpsk(coded).astype(np.complex128)
    real = ch.sample_channel(snr_db, rng)
    received = ch.transmit(symbols, real, rng)
    eq, deep = ch.equalize(received, real.h)
    bits = viterbi_decode(eq.real, codec)
    recovered, replaced = source_decode(bits)
    if replaced:
        log.debug("undecodable bytes replaced at %.1f dB", snr_db)
    return LinkResult(recovered, replaced, symbols.size, deep)


def awgn_ber(eb_n0_db: float, n_bits: int, rng: np.random.Generator, coded: bool,
             codec: CodecConfig = DEFAULT_CODEC, block: int = 2000) -> float:
    """Bit error rate of BPSK over AWGN at ``eb_n0_db``, with or without the code."""
    errors = 0
    done = 0
    rate = codec.rate if coded else 1.0
    n0 = 1.0 / (rate * 10 ** (eb_n0_db / 10))    # Es = 1
    std = np.sqrt(n0 / 2)
    while done < n_bits:
        m = min(block, n_bits - done)
        msg = rng.integers(0, 2, m).astype(np.uint8)
        tx = conv_encode(msg, codec) if coded else msg
        rx = bpsk(tx) + std * rng.standard_normal(tx.size)
        dec = viterbi_decode(rx, codec) if coded else (rx < 0).astype(np.uint8)
        errors += int(np.count_nonzero(dec != msg))
        done += m
    return errors / n_bits
