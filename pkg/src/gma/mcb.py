"""Multimodal compact bilinear pooling.

``mcb_pool(x, y) = IFFT(FFT(CS(x)) * FFT(CS(y)))`` where ``CS`` is a count
sketch. This approximates the flattened outer product of ``x`` and ``y``
sketched under the combined hash ``(h1[i] + h2[j]) mod D`` and sign
``s1[i] * s2[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gma import fft as _fft
from gma.autodiff import Tensor, _emit
from gma.errors import ContractError, ShapeError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of the splitmix64 generator started at ``seed``."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GAMMA * np.arange(1, count + 1, dtype=np.uint64)
        z = state
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class SketchSpec:
    """Hash indices ``h`` and signs ``s`` for one count sketch, derived from ``seed``."""

    input_dim: int
    sketch_dim: int
    seed: int
    h: np.ndarray = field(init=False, repr=False, compare=False)
    s: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.input_dim < 1 or self.sketch_dim < 1:
            raise ContractError("sketch dims must be positive")
        stream = splitmix64(self.seed, 2 * self.input_dim)
        h = (stream[0::2] % np.uint64(self.sketch_dim)).astype(np.int64)
        s = np.where((stream[1::2] >> np.uint64(63)) == 1, -1.0, 1.0)
        h.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "s", s)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "sketch_dim": self.sketch_dim, "seed": self.seed}


def sketch_pair(input_dims: tuple[int, int], sketch_dim: int, seed: int) -> tuple[SketchSpec, SketchSpec]:
    """Two independent sketches for an MCB fusion site."""
    return (
        SketchSpec(input_dims[0], sketch_dim, seed),
        SketchSpec(input_dims[1], sketch_dim, seed ^ 0x5DEECE66D),
    )


def count_sketch(x: Tensor, spec: SketchSpec) -> Tensor:
    """``out[h[i]] += s[i] * x[i]`` along the last axis."""
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"count_sketch expects last dim {spec.input_dim}, got {x.dims}")
    h, s, D = spec.h, spec.s, spec.sketch_dim
    lead = x.shape[:-1]
    flat = (x.data * s).reshape(-1, spec.input_dim)
    acc = np.zeros((D, flat.shape[0]))
    np.add.at(acc, h, flat.T)
    out = acc.T.reshape(*lead, D)

    def vjp(g):
        return (g[..., h] * s,)

    return _emit("count_sketch", (x,), out, vjp)


def circular_convolve_fft(a: Tensor, b: Tensor) -> Tensor:
    """Circular convolution along the last axis via the in-module FFT."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"circular convolution lengths differ: {a.dims} vs {b.dims}")
    if a.shape != b.shape:
        raise ShapeError(f"circular convolution operands must share dims: {a.dims} vs {b.dims}")
    if a.shape[-1] < 1:
        raise ShapeError("circular convolution of empty vectors")
    fa, fb = _fft.fft(a.data), _fft.fft(b.data)
    out = _fft.ifft(fa * fb).real

    def vjp(g):
        # adjoint of convolution with b is circular correlation with b
        fg = _fft.fft(g)
        ga = _fft.ifft(fg * np.conj(fb)).real if a.requires_grad else None
        gb = _fft.ifft(fg * np.conj(fa)).real if b.requires_grad else None
        return ga, gb

    return _emit("circular_convolve", (a, b), out, vjp)


def mcb_pool(x: Tensor, y: Tensor, specs: tuple[SketchSpec, SketchSpec]) -> Tensor:
    sx, sy = specs
    if sx.sketch_dim != sy.sketch_dim:
        raise ShapeError(f"sketch dims differ: {sx.sketch_dim} vs {sy.sketch_dim}")
    return circular_convolve_fft(count_sketch(x, sx), count_sketch(y, sy))


def combined_sketch_outer(x: np.ndarray, y: np.ndarray, specs: tuple[SketchSpec, SketchSpec]) -> np.ndarray:
    """Explicit reference: count sketch of ``outer(x, y)`` under the combined hash."""
    sx, sy = specs
    D = sx.sketch_dim
    out = np.zeros(D)
    for i in range(len(x)):
        for j in range(len(y)):
            out[(sx.h[i] + sy.h[j]) % D] += sx.s[i] * sy.s[j] * x[i] * y[j]
    return out
