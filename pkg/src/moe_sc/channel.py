"""Filter module, symbol mapping and a block-fading Rayleigh + AWGN link.

Conventions: unit average transmit power per complex symbol and E|h|^2 = 1,
so the target average SNR gamma (dB) fixes the noise variance at
sigma^2 = 10^(-gamma/10).  One gain h is drawn per transmission.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEEP_FADE = 1e-6


class ChannelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelRealization:
    h: complex
    noise_var: float
    snr_db: float


@dataclass
class SymbolStream:
    symbols: np.ndarray      # complex, unit average power
    shape: tuple[int, int]   # (N_c, D) of the originating matrix
    scale: float             # RMS symbol magnitude before normalisation


def snr_to_noise_var(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def sample_channel(snr_db: float, rng: np.random.Generator) -> ChannelRealization:
    """h ~ CN(0, 1) and the noise variance for ``snr_db``."""
    re, im = rng.standard_normal(2) / np.sqrt(2.0)
    return ChannelRealization(complex(re, im), snr_to_noise_var(snr_db), float(snr_db))


def filter_rows(z_masked: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep rows with mask 1, in original order.  Returns (Z_hat, retained indices)."""
    mask = np.asarray(mask).reshape(-1)
    keep = np.nonzero(mask)[0]
    if keep.size == 0:
        raise ValueError("mask retains no rows")
    return np.asarray(z_masked)[keep], keep


def symbolize(z_hat: np.ndarray) -> SymbolStream:
    """Pair consecutive reals into complex symbols, normalised to unit mean power."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    n_c, d = z_hat.shape
    if d % 2:
        raise ChannelConfigError(f"feature width must be even to form complex symbols, got {d}")
    flat = z_hat.reshape(-1)
    sym = flat[0::2] + 1j * flat[1::2]
    power = float(np.mean(np.abs(sym) ** 2)) if sym.size else 0.0
    scale = float(np.sqrt(power)) if power > 0 else 1.0
    return SymbolStream(sym / scale, (n_c, d), scale)


def desymbolize(stream: SymbolStream | np.ndarray, n_rows: int | None = None, d: int | None = None,
                scale: float | None = None) -> np.ndarray:
    """Inverse of :func:`symbolize`: back to an (N_c, D) real matrix."""
    if isinstance(stream, SymbolStream):
        sym = stream.symbols
        n_rows, d = stream.shape if n_rows is None else (n_rows, d)
        scale = stream.scale if scale is None else scale
    else:
        sym = np.asarray(stream)
    if d % 2:
        raise ChannelConfigError(f"feature width must be even, got {d}")
    sym = sym * (1.0 if scale is None else scale)
    out = np.empty(sym.size * 2, dtype=np.float64)
    out[0::2] = sym.real
    out[1::2] = sym.imag
    return out.reshape(n_rows, d)


def complex_noise(n: int, noise_var: float, rng: np.random.Generator) -> np.ndarray:
    std = np.sqrt(noise_var / 2.0)
    return std * rng.standard_normal(n) + 1j * std * rng.standard_normal(n)


def transmit(symbols: np.ndarray, real: ChannelRealization, rng: np.random.Generator) -> np.ndarray:
    """y = h z + n with n_i ~ CN(0, sigma^2)."""
    symbols = np.asarray(symbols)
    if real.noise_var == 0:
        return real.h * symbols
    return real.h * symbols + complex_noise(symbols.size, real.noise_var, rng).reshape(symbols.shape)


def equalize(received: np.ndarray, h: complex) -> tuple[np.ndarray, bool]:
    """Zero-forcing with perfect CSI.  Returns (symbols, deep_fade flag)."""
    deep = abs(h) < DEEP_FADE
    if deep:
        log.warning("deep fade |h|=%.3g; equalised stream is noise dominated", abs(h))
    if h == 0:
        return np.zeros_like(received), True
    return received / h, deep


def empirical_snr_db(clean: np.ndarray, received: np.ndarray, h: complex) -> float:
    """Received SNR estimate: |h|^2 * mean|z|^2 over mean|y - h z|^2."""
    noise = received - h * clean
    return float(10 * np.log10(abs(h) ** 2 * np.mean(np.abs(clean) ** 2) / np.mean(np.abs(noise) ** 2)))


def pass_through(z_hat: np.ndarray, real: ChannelRealization, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """symbolize -> transmit -> equalize -> desymbolize for one retained matrix."""
    stream = symbolize(z_hat)
    received = transmit(stream.symbols, real, rng)
    eq, deep = equalize(received, real.h)
    return desymbolize(eq, stream.shape[0], stream.shape[1], stream.scale), deep
