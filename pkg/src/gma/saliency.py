"""Black-box importance estimation.

Image saliency is the score-weighted average of random occlusion masks,
normalised by the keep probability. Text importance is an exhaustive search
over all ways of zeroing two tokens of a question.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from gma.errors import ContractError, GMAError


class ScorerError(GMAError, RuntimeError):
    """The black-box scorer failed; ``index`` locates the offending probe."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray  # [count, N, N], values in [0, 1]
    p: float
    s: int
    count: int
    seed: int
    antithetic: bool = False

    @property
    def N(self) -> int:
        return self.masks.shape[-1]


def default_low_res(N: int) -> int:
    return math.ceil(N / 2)


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Row ``u`` holds the interpolation weights of output sample ``u`` over ``src`` inputs."""
    out = np.zeros((dst, src))
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    out[np.arange(dst), lo] += 1 - frac
    out[np.arange(dst), hi] += frac
    return out


def sample_masks(N: int, p: float = 0.5, s: int | None = None, count: int = 2000, seed: int = 0,
                 antithetic: bool = False) -> MaskSet:
    """RISE-style masks: ``s x s`` Bernoulli(p) grids, bilinearly upsampled and randomly shifted.

    With ``s == N`` the binary grids are used as-is. ``antithetic`` (needs
    ``p = 0.5`` and an even count) follows every mask with its complement;
    each mask is still Bernoulli(0.5) but every cell's mask mean is exactly
    ``p``, which cancels the largest Monte-Carlo term of the estimate.
    """
    s = default_low_res(N) if s is None else s
    if not 0 < p < 1:
        raise ContractError(f"keep probability must lie in (0, 1), got {p}")
    if not 1 <= s <= N:
        raise ContractError(f"low-res side must lie in [1, {N}], got {s}")
    if count < 1:
        raise ContractError("need at least one mask")
    if antithetic and (p != 0.5 or count % 2):
        raise ContractError("antithetic masks need p = 0.5 and an even count")
    rng = np.random.default_rng(seed)
    draws = count // 2 if antithetic else count
    grids = (rng.random((draws, s, s)) < p).astype(np.float64)
    if antithetic:
        # complement of a bilinear upsample is the upsample of the complement
        grids = np.stack([grids, 1.0 - grids], axis=1).reshape(count, s, s)
    if s == N:
        masks = grids
    else:
        cell = math.ceil(N / s)
        up = (s + 1) * cell
        R = _bilinear_matrix(s, up)
        big = np.einsum("us,msv,wv->muw", R, grids, R)
        shifts = rng.integers(0, cell, size=(draws, 2))
        if antithetic:
            shifts = np.repeat(shifts, 2, axis=0)
        masks = np.stack([big[i, dy:dy + N, dx:dx + N] for i, (dy, dx) in enumerate(shifts)])
    masks = np.clip(masks, 0.0, 1.0)
    masks.flags.writeable = False
    return MaskSet(masks, p, s, count, seed, antithetic)


def rise_saliency(
    X: np.ndarray,
    scorer: Callable[[np.ndarray], Any],
    masks: MaskSet,
    batched: bool = False,
    batch_size: int = 500,
) -> np.ndarray:
    """``S = 1/(p * count) * sum_i f(X * M_i) M_i`` for a grid ``X`` of ``[N, N, C]``.

    ``scorer`` maps a masked grid to the ground-truth class probability. With
    ``batched`` it instead receives ``[b, N, N, C]`` and returns ``b`` scores.
    The reduction runs in mask order, so the result does not depend on how
    scorer calls are dispatched.
    """
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    M = masks.masks
    if X.shape[:2] != M.shape[1:]:
        raise ContractError(f"grid {list(X.shape)} does not match masks of side {masks.N}")
    scores = np.empty(masks.count)
    if batched:
        for start in range(0, masks.count, batch_size):
            chunk = M[start:start + batch_size]
            try:
                vals = np.asarray(scorer(X[None] * chunk[..., None]), dtype=np.float64).reshape(-1)
            except Exception as exc:
                raise ScorerError(f"scorer failed on masks starting at {start}: {exc}", start) from exc
            scores[start:start + len(chunk)] = vals
    else:
        for i in range(masks.count):
            try:
                scores[i] = float(scorer(X * M[i][..., None]))
            except Exception as exc:
                raise ScorerError(f"scorer failed on mask {i}: {exc}", i) from exc
    if not np.all(np.isfinite(scores)):
        bad = int(np.flatnonzero(~np.isfinite(scores))[0])
        raise ScorerError(f"scorer returned a non-finite value on mask {bad}", bad)
    return rise_combine(scores, masks)


def rise_combine(scores: np.ndarray, masks: MaskSet) -> np.ndarray:
    """Score-weighted mask average for scores ``[..., count]``; returns ``[..., N, N]``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] != masks.count:
        raise ContractError(f"expected {masks.count} scores per map, got {scores.shape[-1]}")
    return np.tensordot(scores, masks.masks, axes=1) / (masks.p * masks.count)


@dataclass
class MaskedQuestionResult:
    masked_pair: tuple[int, int]
    gt_prob: float
    attention_map: Any
    calls: int


def candidate_pairs(T: int) -> list[tuple[int, int]]:
    """All ``(i, j)`` with ``i < j``, in lexicographic order."""
    if T < 2:
        raise ContractError(f"two-word masking needs at least 2 tokens, got {T}")
    return list(itertools.combinations(range(T), 2))


def best_pair_index(gt_probs: np.ndarray) -> int:
    """Index of the highest probability; ties resolve to the earliest pair."""
    return int(np.argmax(np.asarray(gt_probs)))


def mask_tokens(tokens: np.ndarray, pair: tuple[int, int]) -> np.ndarray:
    out = np.array(tokens, dtype=np.float64, copy=True)
    out[list(pair)] = 0.0
    return out


def pairwise_word_mask_search(
    q_tokens: np.ndarray,
    scorer: Callable[[np.ndarray], tuple[float, Any]],
) -> MaskedQuestionResult:
    """Zero every pair of tokens in ``q_tokens`` ``[T, d]`` and keep the pair the
    scorer rates most likely to yield the ground-truth answer."""
    tokens = np.asarray(getattr(q_tokens, "data", q_tokens), dtype=np.float64)
    pairs = candidate_pairs(tokens.shape[0])
    probs, maps = [], []
    for k, pair in enumerate(pairs):
        try:
            prob, amap = scorer(mask_tokens(tokens, pair))
        except Exception as exc:
            raise ScorerError(f"scorer failed on pair {pair}: {exc}", k) from exc
        prob = float(prob)
        if not 0.0 <= prob <= 1.0:
            raise ScorerError(f"scorer probability {prob} outside [0, 1] on pair {pair}", k)
        probs.append(prob)
        maps.append(amap)
    best = best_pair_index(np.array(probs))
    return MaskedQuestionResult(pairs[best], probs[best], maps[best], len(pairs))
