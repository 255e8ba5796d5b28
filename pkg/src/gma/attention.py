"""Attention architectures: the ATTENTION primitive, SAN, MCB attention,
granular image/text attention (GIA/GTA), their multimodal fusion (GMA), answer
scoring and the training loss.

All ops accept optional leading batch axes: a grid is ``[..., P, C]`` with
``P = N*N`` cells in row-major order, a query is ``[..., d]``. Parameters are
passed as plain dicts of :class:`~gma.autodiff.Parameter` keyed by short role
names; the ``*_params`` helpers build them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from gma import autodiff as ad
from gma.autodiff import Parameter, Tensor
from gma.errors import ConfigError, ContractError, ShapeError
from gma.mcb import SketchSpec, mcb_pool

Params = Mapping[str, Parameter]

FUSIONS = ("concat", "mcb", "mcb_att", "passthrough")


@dataclass
class ImageGrid:
    """``N x N`` grid of ``C``-channel cell features (row-major)."""

    features: Tensor

    def __post_init__(self):
        if self.features.ndim < 3 or self.features.shape[-3] != self.features.shape[-2]:
            raise ShapeError(f"ImageGrid needs [..., N, N, C], got {self.features.dims}")

    @property
    def N(self) -> int:
        return self.features.shape[-2]

    @property
    def C(self) -> int:
        return self.features.shape[-1]

    def cells(self) -> Tensor:
        f = self.features
        return ad.reshape(f, (*f.shape[:-3], self.N * self.N, self.C))


@dataclass
class AnswerScores:
    logits: Tensor
    probs: Tensor


def _cells(g) -> Tensor:
    return g.cells() if isinstance(g, ImageGrid) else g


def _vecmat(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of any rank >= 1."""
    if x.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), w), (w.shape[-1],))
    return ad.matmul(x, w)


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """``sum_p weights[..., p] * rows[..., p, :]``."""
    lead = weights.shape[:-1]
    w = ad.reshape(weights, (*lead, 1, weights.shape[-1]))
    return ad.reshape(ad.matmul(w, rows), (*lead, rows.shape[-1]))


def _squeeze_last(x: Tensor) -> Tensor:
    return ad.reshape(x, x.shape[:-1])


# --------------------------------------------------------------------------
# parameter builders
# --------------------------------------------------------------------------


def attention_params(prefix: str, grid_dim: int, query_dim: int, hidden: int, seed: int) -> dict[str, Parameter]:
    return {
        "conv_w": ad.xavier(f"{prefix}.conv_w", (grid_dim, grid_dim), seed),
        "conv_b": ad.zeros(f"{prefix}.conv_b", (grid_dim,)),
        "w_i": ad.xavier(f"{prefix}.w_i", (grid_dim, hidden), seed),
        "w_q": ad.xavier(f"{prefix}.w_q", (query_dim, hidden), seed),
        "b_q": ad.zeros(f"{prefix}.b_q", (hidden,)),
        "w_a": ad.xavier(f"{prefix}.w_a", (hidden, 1), seed),
        "b_a": ad.zeros(f"{prefix}.b_a", (1,)),
    }


def eq1_params(prefix: str, grid_dim: int, query_dim: int, hidden: int, seed: int) -> dict[str, Parameter]:
    return {
        "w_c": ad.xavier(f"{prefix}.w_c", (grid_dim, hidden), seed),
        "b_c": ad.zeros(f"{prefix}.b_c", (hidden,)),
        "w_q": ad.xavier(f"{prefix}.w_q", (query_dim, hidden), seed),
        "w_a1": ad.xavier(f"{prefix}.w_a1", (hidden, hidden), seed),
        "b_a1": ad.zeros(f"{prefix}.b_a1", (hidden,)),
        "w_a2": ad.xavier(f"{prefix}.w_a2", (hidden, 1), seed),
    }


def word_attention_params(prefix: str, image_dim: int, token_dim: int, hidden: int, seed: int) -> dict[str, Parameter]:
    return {
        "w_i": ad.xavier(f"{prefix}.w_i", (image_dim, hidden), seed),
        "b_i": ad.zeros(f"{prefix}.b_i", (hidden,)),
        "w_q": ad.xavier(f"{prefix}.w_q", (token_dim, hidden), seed),
        "b_q": ad.zeros(f"{prefix}.b_q", (hidden,)),
        "w_c": ad.xavier(f"{prefix}.w_c", (hidden, 1), seed),
        "b_c": ad.zeros(f"{prefix}.b_c", (1,)),
    }


# --------------------------------------------------------------------------
# attention maps
# --------------------------------------------------------------------------


def attention_primitive(g, f: Tensor, p: Params) -> Tensor:
    """Additive attention of query ``f`` over grid ``g``.

    ``z = W_a tanh(W_I conv(g) + W_Q tile(f) + b_q) + b_a`` per cell, with a 1x1
    channel-mixing conv, then a softmax over all cells.
    """
    cells = _cells(g)
    P = cells.shape[-2]
    if f.shape[:-1] != cells.shape[:-2]:
        raise ShapeError(f"query batch dims {f.dims} do not match grid {cells.dims}")
    conv = ad.add(ad.matmul(cells, p["conv_w"]), p["conv_b"])
    h = ad.tanh(ad.add(ad.add(ad.matmul(conv, p["w_i"]), ad.tile(_vecmat(f, p["w_q"]), P, axis=-2)), p["b_q"]))
    z = _squeeze_last(ad.add(ad.matmul(h, p["w_a"]), p["b_a"]))
    return ad.softmax(z, axis=-1)


def eq1_attention(g, query: Tensor, p: Params) -> Tensor:
    """Hadamard-joint attention over cells.

    Per cell: ``tanh((W_c cell + b_c) * W_q query)``, signed square root, L2
    normalisation, then ``W_a2 tanh(W_a1 . + b_a1)`` and a softmax over cells.
    """
    cells = _cells(g)
    P = cells.shape[-2]
    joint = ad.tanh(ad.mul(
        ad.add(ad.matmul(cells, p["w_c"]), p["b_c"]),
        ad.tile(_vecmat(query, p["w_q"]), P, axis=-2),
    ))
    normed = ad.l2_normalize(ad.signed_sqrt(joint), axis=-1)
    hidden = ad.tanh(ad.add(ad.matmul(normed, p["w_a1"]), p["b_a1"]))
    return ad.softmax(_squeeze_last(ad.matmul(hidden, p["w_a2"])), axis=-1)


def san_forward(g, q: Tensor, J: int, layers: list[Params]) -> tuple[Tensor, list[Tensor]]:
    """Stacked attention: ``f_j = sum(alpha_j * cells) + f_{j-1}``, ``f_0 = q``.

    Returns the refined query and the attention map of every iteration.
    """
    if J < 1:
        raise ContractError("SAN needs at least one iteration")
    if len(layers) < J:
        raise ContractError(f"SAN needs {J} attention layers, got {len(layers)}")
    cells = _cells(g)
    f = q
    maps = []
    for j in range(J):
        alpha = attention_primitive(cells, f, layers[j])
        f = ad.add(weighted_sum(alpha, cells), f)
        maps.append(alpha)
    return f, maps


def mcb_attention(g, q: Tensor, p: Params) -> tuple[Tensor, Tensor]:
    """Returns ``(alpha, f_out)`` with ``f_out = (sum alpha * cells) * W_out q``."""
    cells = _cells(g)
    alpha = eq1_attention(cells, q, p)
    f_att = weighted_sum(alpha, cells)
    return alpha, ad.mul(f_att, _vecmat(q, p["w_out"]))


# --------------------------------------------------------------------------
# granular image attention
# --------------------------------------------------------------------------


def top_k_cells(saliency: np.ndarray, K: int) -> np.ndarray:
    """Indices of the ``K`` most salient cells of ``[..., P]``, in row-major order.

    Ties in saliency go to the earlier cell.
    """
    sal = np.asarray(saliency, dtype=np.float64)
    P = sal.shape[-1]
    if not 1 <= K <= P:
        raise ContractError(f"K={K} outside [1, {P}]")
    return np.sort(np.argsort(-sal, axis=-1, kind="stable")[..., :K], axis=-1)


def gia_granules(granules: Tensor, q: Tensor, h: Tensor, p: Mapping[str, Params]) -> tuple[Tensor, Tensor]:
    """Attention over an explicit granule set ``[..., K, C]``.

    Question and history each attend the granules (Hadamard-joint form). The
    granules reweighted by the history map (scaled by K, so uniform weights
    leave them unchanged) form the grid that the question-attended vector
    queries through the ATTENTION primitive; its map weighs the granules into
    ``A_i``. Returns ``(A_i, granule weights)``.
    """
    K, C = granules.shape[-2:]
    f_q = weighted_sum(eq1_attention(granules, q, p["q_att"]), granules)
    beta_h = eq1_attention(granules, h, p["h_att"])
    history_map = ad.mul(granules, ad.tile(ad.scale(beta_h, float(K)), C, axis=-1))
    beta = attention_primitive(history_map, f_q, p["combine"])
    return weighted_sum(beta, granules), beta


def gia_forward(g, saliency, K: int, q: Tensor, h: Tensor, p: Mapping[str, Params]) -> tuple[Tensor, Tensor]:
    """Granular image attention over the ``K`` most salient cells.

    ``saliency`` is ``[..., N, N]`` or ``[..., P]``. Returns ``A_i`` and the
    granule weights scattered back onto all ``P`` cells (zeros elsewhere).
    """
    cells = _cells(g)
    P = cells.shape[-2]
    sal = np.asarray(saliency.data if isinstance(saliency, Tensor) else saliency, dtype=np.float64)
    if sal.shape[-2:] == (int(np.sqrt(P)),) * 2 and sal.ndim == cells.ndim:
        sal = sal.reshape(*sal.shape[:-2], P)
    if sal.shape != cells.shape[:-1]:
        raise ShapeError(f"saliency dims {list(sal.shape)} do not match grid {cells.dims}")
    if not np.all(np.isfinite(sal)):
        raise ContractError("saliency must be finite")
    idx = top_k_cells(sal, K)
    # all cells kept: skip the gather so the result equals the ungranulated path exactly
    granules = cells if K == P else ad.gather_rows(cells, idx)
    A_i, beta = gia_granules(granules, q, h, p)
    full = np.zeros(sal.shape)
    np.put_along_axis(full, idx, beta.data, axis=-1)
    return A_i, Tensor(full)


# --------------------------------------------------------------------------
# granular text attention
# --------------------------------------------------------------------------


def word_attention(tokens: Tensor, image: Tensor, p: Params, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """``p^k = softmax_k(W_c tanh(W_i g + b_i + W_q f^k + b_q) + b_c)``; returns (weights, sum p^k f^k).

    ``mask`` (same dims as the weights, 1 = keep) excludes padded positions.
    """
    T = tokens.shape[-2]
    c = ad.tanh(ad.add(
        ad.add(ad.tile(ad.add(_vecmat(image, p["w_i"]), p["b_i"]), T, axis=-2), ad.matmul(tokens, p["w_q"])),
        p["b_q"],
    ))
    z = _squeeze_last(ad.add(ad.matmul(c, p["w_c"]), p["b_c"]))
    if mask is not None:
        z = ad.add(z, Tensor(np.where(np.asarray(mask) > 0, 0.0, -1e30)))
    weights = ad.softmax(z, axis=-1)
    return weights, weighted_sum(weights, tokens)


def gta_forward(
    g_pooled: Tensor,
    q_tokens: Tensor,
    h_tokens: Tensor,
    p: Mapping[str, Params],
    h_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Granular text attention. Returns ``(A_t, word map over the T question tokens)``."""
    T = q_tokens.shape[-2]
    if T < 1 or h_tokens.shape[-2] < 1:
        raise ContractError("GTA needs non-empty question and history sequences")
    _, f_q = word_attention(q_tokens, g_pooled, p["q_words"])
    _, f_h = word_attention(h_tokens, g_pooled, p["h_words"], h_mask)
    gated = ad.mul(q_tokens, ad.tile(f_h, T, axis=-2))
    alpha = attention_primitive(gated, f_q, p["combine"])
    return weighted_sum(alpha, q_tokens), alpha


# --------------------------------------------------------------------------
# multimodal fusion, scoring, loss
# --------------------------------------------------------------------------


def fuse(A_i: Tensor, A_t: Tensor, fusion: str, specs: tuple[SketchSpec, SketchSpec] | None = None,
         normalize: bool = True) -> Tensor:
    """Joint feature ``C_A`` of the image- and text-attended vectors."""
    if fusion == "concat":
        return ad.concat([A_i, A_t], axis=-1)
    if fusion in ("mcb", "mcb_att"):
        if specs is None:
            raise ConfigError(f"{fusion} fusion needs sketch specs")
        c = mcb_pool(A_i, A_t, specs)
        return ad.l2_normalize(ad.signed_sqrt(c), axis=-1) if normalize else c
    raise ConfigError(f"unknown fusion {fusion!r}")


def gma_forward(
    A_i: Tensor,
    A_t: Tensor,
    g,
    fusion: str,
    p: Params | None,
    specs: tuple[SketchSpec, SketchSpec] | None = None,
    normalize: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Multimodal attention ``A = sum(gamma * cells)``.

    ``concat`` and ``mcb`` score cells with the ATTENTION primitive queried by
    ``C_A``; ``mcb_att`` uses the Hadamard-joint form with ``C_A`` as query.
    ``passthrough`` returns ``A_i`` unchanged (no map).
    """
    if fusion not in FUSIONS:
        raise ConfigError(f"unknown fusion {fusion!r}")
    if fusion == "passthrough":
        return A_i, None
    cells = _cells(g)
    c_a = fuse(A_i, A_t, fusion, specs, normalize)
    gamma = eq1_attention(cells, c_a, p) if fusion == "mcb_att" else attention_primitive(cells, c_a, p)
    return weighted_sum(gamma, cells), gamma


def score_answers(A: Tensor, options: Tensor, q_final: Tensor, w_p: Tensor) -> AnswerScores:
    """``logit_j = <W_p [A ; q_final], e_j>`` over encoded options ``[..., n, d_a]``."""
    if options.shape[-2] < 1:
        raise ContractError("score_answers needs at least one option")
    u = _vecmat(ad.concat([A, q_final], axis=-1), w_p)
    logits = _squeeze_last(ad.matmul(options, ad.reshape(u, (*u.shape, 1))))
    return AnswerScores(logits, ad.softmax(logits, axis=-1))


def cross_entropy_loss(scores: AnswerScores, gt_index) -> Tensor:
    """Mean of ``-log probs[gt]`` over any batch axes (scalar result)."""
    gt = np.asarray(gt_index, dtype=np.int64)
    n = scores.logits.shape[-1]
    if gt.size and (gt.min() < 0 or gt.max() >= n):
        raise ContractError(f"gt index out of range [0, {n})")
    losses = ad.cross_entropy(scores.logits, gt)
    return losses if losses.ndim == 0 else ad.mean(losses)
