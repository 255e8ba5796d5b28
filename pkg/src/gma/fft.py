"""Arbitrary-length discrete Fourier transforms.

Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform whose
butterfly stages are vectorised over numpy complex arrays; every other length
goes through Bluestein's chirp-z reformulation on a padded power-of-two grid.
Twiddle and chirp tables are cached per length as read-only arrays.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.flags.writeable = False
    return rev


@lru_cache(maxsize=64)
def _twiddles(n: int) -> np.ndarray:
    tw = np.exp(-2j * np.pi * np.arange(n // 2) / n)
    tw.flags.writeable = False
    return tw


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    tw = _twiddles(n)
    size = 2
    while size <= n:
        half = size // 2
        w = tw[:: n // size][:half]
        a = a.reshape(*x.shape[:-1], n // size, size)
        even = a[..., :half]
        odd = a[..., half:] * w
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(x.shape)


@lru_cache(maxsize=64)
def _bluestein_tables(n: int) -> tuple[np.ndarray, np.ndarray, int]:
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase exact for large n
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1
    while m < 2 * n - 1:
        m *= 2
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    b_hat = _fft_pow2(b)
    chirp.flags.writeable = False
    b_hat.flags.writeable = False
    return chirp, b_hat, m


def fft(x: np.ndarray) -> np.ndarray:
    """Forward DFT along the last axis, ``X_k = sum_j x_j exp(-2 pi i jk/n)``."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("fft of an empty sequence")
    if _is_pow2(n):
        return _fft_pow2(x)
    chirp, b_hat, m = _bluestein_tables(n)
    a = np.zeros((*x.shape[:-1], m), dtype=np.complex128)
    a[..., :n] = x * chirp
    conv = ifft(_fft_pow2(a) * b_hat)
    return conv[..., :n] * chirp


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse DFT along the last axis (1/n normalisation)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    return np.conj(fft(np.conj(x))) / n


def circular_convolve_direct(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """O(D^2) reference: ``out[k] = sum_j a[j] b[(k - j) mod D]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[-1]
    out = np.zeros(n)
    for k in range(n):
        for j in range(n):
            out[k] += a[j] * b[(k - j) % n]
    return out
