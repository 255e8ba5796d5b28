"""Dialog models for every ablation variant, batched over dialogs and rounds.

All variants share the same front end: a word embedding, one Elman encoder for
questions, history entries and answer options, and a per-cell image embedding
``tanh(X W + b)`` so the grid channels need not match the text width. They
differ only in how the attended vector ``A`` is produced before
:func:`~gma.attention.score_answers`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gma import attention as att
from gma import autodiff as ad
from gma.autodiff import Parameter, Tensor
from gma.errors import ConfigError, ContractError, FormatError
from gma.harness.config import GMA_FUSION, RunConfig
from gma.harness.data import VOCAB, DialogInstance
from gma.mcb import sketch_pair
from gma.saliency import MaskSet, candidate_pairs

PROBE_PREFIX = "probe/"
RISE_CHUNK = 250


class CheckpointError(FormatError):
    """Checkpoint tensors do not fit the model built from the config."""


@dataclass
class Batch:
    images: np.ndarray  # [B, N, N, C]
    questions: np.ndarray  # [B, R, Tq] token ids
    word_keep: np.ndarray  # [B, R, Tq] 1 keep, 0 zeroed (text branch input)
    caption: np.ndarray  # [B, Tc]
    qa: np.ndarray  # [B, R-1, Tq+Ta], history entries after the caption
    options: np.ndarray  # [B, R, O, Ta]
    gt: np.ndarray  # [B, R]
    relevance: np.ndarray  # [B, R, O]
    saliency: np.ndarray  # [B, R, P]

    @property
    def B(self) -> int:
        return self.questions.shape[0]

    @property
    def R(self) -> int:
        return self.questions.shape[1]


def _int_array(rows, what: str) -> np.ndarray:
    try:
        arr = np.array(rows, dtype=np.int64)
    except ValueError as exc:
        raise ContractError(f"{what} must all have the same length") from exc
    return arr


def make_batch(dialogs: list[DialogInstance], saliency: np.ndarray | None = None,
               word_keep: np.ndarray | None = None) -> Batch:
    if not dialogs:
        raise ContractError("empty batch")
    R = len(dialogs[0].rounds)
    if any(len(d.rounds) != R for d in dialogs):
        raise ContractError("all dialogs in a batch need the same number of rounds")
    images = np.stack([d.image for d in dialogs])
    N = images.shape[1]
    questions = _int_array([[r.question for r in d.rounds] for d in dialogs], "questions")
    qa = _int_array([[r.question + r.answer for r in d.rounds[:-1]] for d in dialogs], "history entries")
    if R == 1:
        qa = np.zeros((len(dialogs), 0, 0), dtype=np.int64)
    batch = Batch(
        images=images,
        questions=questions,
        word_keep=np.ones(questions.shape) if word_keep is None else np.asarray(word_keep, dtype=np.float64),
        caption=_int_array([d.caption for d in dialogs], "captions"),
        qa=qa,
        options=_int_array([[r.options for r in d.rounds] for d in dialogs], "answer options"),
        gt=_int_array([[r.gt_index for r in d.rounds] for d in dialogs], "gt"),
        relevance=np.array([[r.relevance for r in d.rounds] for d in dialogs], dtype=np.float64),
        saliency=np.zeros((len(dialogs), R, N * N)) if saliency is None else np.asarray(saliency, dtype=np.float64),
    )
    if batch.word_keep.shape != questions.shape:
        raise ContractError(f"word mask dims {list(batch.word_keep.shape)} do not match questions {list(questions.shape)}")
    if batch.saliency.shape != (len(dialogs), R, N * N):
        raise ContractError(f"saliency dims {list(batch.saliency.shape)} do not match [{len(dialogs)}, {R}, {N * N}]")
    return batch


@dataclass
class Output:
    scores: att.AnswerScores
    maps: dict[str, Tensor]  # grid maps [B, R, P] keyed by role


def variant_kind(variant: str) -> str:
    if variant in GMA_FUSION:
        return "gma"
    if variant in ("san", "mcb_att", "gia", "gta"):
        return variant
    raise ConfigError(f"unknown variant {variant!r}")


def needs_saliency(variant: str) -> bool:
    return variant_kind(variant) in ("gia", "gma")


def needs_word_mask(variant: str) -> bool:
    return variant_kind(variant) in ("gta", "gma")


class Model:
    """Parameters and forward pass of one variant."""

    def __init__(self, config: RunConfig, variant: str | None = None):
        self.config = config
        self.variant = variant or config.variant
        kind = variant_kind(self.variant)
        c, s = config, config.seed
        d, h = c.embed_dim, c.hidden_dim
        self._params: dict[str, Parameter] = {}
        self.embedding = self._add({"table": ad.xavier("embed.table", (len(VOCAB), d), s)})
        self.encoder = self._add({
            "w_x": ad.xavier("enc.w_x", (d, d), s),
            "w_h": ad.xavier("enc.w_h", (d, d), s),
            "b": ad.zeros("enc.b", (d,)),
        })
        self.image = self._add({"w": ad.xavier("image.w", (c.channels, d), s), "b": ad.zeros("image.b", (d,))})
        self.w_p = self._add({"w_p": ad.xavier("score.w_p", (2 * d, d), s)})["w_p"]
        self.specs = None

        if kind == "san":
            self.san = [self._add(att.attention_params(f"san{j}", d, d, h, s)) for j in range(c.san_iterations)]
        if kind == "mcb_att":
            self.mcb = self._add({**att.eq1_params("mcbatt", d, d, h, s),
                                  "w_out": ad.xavier("mcbatt.w_out", (d, d), s)})
        if kind in ("gia", "gma"):
            q_att = self._add(att.eq1_params("gia.q", d, d, h, s))
            self.gia = {
                "q_att": q_att,
                "h_att": q_att if c.shared_history_attention else self._add(att.eq1_params("gia.h", d, d, h, s)),
                "combine": self._add(att.attention_params("gia.combine", d, d, h, s)),
            }
        if kind in ("gta", "gma"):
            q_words = self._add(att.word_attention_params("gta.q", d, d, h, s))
            self.gta = {
                "q_words": q_words,
                "h_words": q_words if c.shared_history_attention else self._add(
                    att.word_attention_params("gta.h", d, d, h, s)),
                "combine": self._add(att.attention_params("gta.combine", d, d, h, s)),
            }
        if kind == "gma":
            self.fusion = GMA_FUSION[self.variant]
            self.gma = None
            if self.fusion in ("mcb", "mcb_att"):
                self.specs = sketch_pair((d, d), c.sketch_dim, s)
            if self.fusion == "concat":
                self.gma = self._add(att.attention_params("gma.att", d, 2 * d, h, s))
            elif self.fusion == "mcb":
                self.gma = self._add(att.attention_params("gma.att", d, c.sketch_dim, h, s))
            elif self.fusion == "mcb_att":
                self.gma = self._add(att.eq1_params("gma.att", d, c.sketch_dim, h, s))

    def _add(self, group: dict[str, Parameter]) -> dict[str, Parameter]:
        for p in group.values():
            self._params[p.name] = p
        return group

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return [self._params[k] for k in sorted(self._params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self._params[k].data for k in sorted(self._params)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._params) - set(state))
        extra = sorted(set(state) - set(self._params))
        if missing or extra:
            raise CheckpointError(f"checkpoint does not match variant {self.variant}: "
                                  f"missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in self._params.items():
            if state[name].shape != p.data.shape:
                raise CheckpointError(f"{name}: checkpoint dims {list(state[name].shape)} vs config {p.dims}")
        for name, p in self._params.items():
            p.assign(state[name])

    # -- encoders -------------------------------------------------------------

    def encode(self, tokens: np.ndarray, keep: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        emb = ad.embed(self.embedding["table"], tokens)
        if keep is not None:
            emb = ad.mul(emb, Tensor(np.broadcast_to(np.asarray(keep, dtype=np.float64)[..., None], emb.shape)))
        e = self.encoder
        return ad.recurrent_encode(emb, e["w_x"], e["w_h"], e["b"])

    def embed_cells(self, images: np.ndarray) -> Tensor:
        """``[..., N, N, C]`` grids to ``[..., P, d]`` cell features."""
        x = np.asarray(images, dtype=np.float64)
        N, C = x.shape[-2], x.shape[-1]
        flat = Tensor(x.reshape(*x.shape[:-3], N * N, C))
        return ad.tanh(ad.add(ad.matmul(flat, self.image["w"]), self.image["b"]))

    def history(self, batch: Batch) -> Tensor:
        """History entry encodings ``[B, R, d]``: the caption, then each earlier QA pair."""
        _, cap = self.encode(batch.caption)
        cap = ad.reshape(cap, (batch.B, 1, cap.shape[-1]))
        if batch.R == 1:
            return cap
        _, qa = self.encode(batch.qa)
        return ad.concat([cap, qa], axis=1)

    # -- forward --------------------------------------------------------------

    def answer_vector(self, g: Tensor, q_final: Tensor) -> tuple[Tensor, Tensor]:
        """Question-only variants: returns ``(A, grid map)``."""
        kind = variant_kind(self.variant)
        if kind == "san":
            A, maps = att.san_forward(g, q_final, self.config.san_iterations, self.san)
            return A, maps[-1]
        if kind == "mcb_att":
            alpha, A = att.mcb_attention(g, q_final, self.mcb)
            return A, alpha
        raise ContractError(f"variant {self.variant} needs history")

    def forward(self, batch: Batch) -> Output:
        kind = variant_kind(self.variant)
        B, R = batch.B, batch.R
        cells = self.embed_cells(batch.images)
        g = ad.tile(cells, R, axis=1)  # [B, R, P, d]
        q_steps, q_final = self.encode(batch.questions)
        _, opts = self.encode(batch.options)
        maps: dict[str, Tensor] = {}

        if kind in ("san", "mcb_att"):
            A, maps["attention"] = self.answer_vector(g, q_final)
        else:
            H = self.history(batch)
            if kind in ("gia", "gma"):
                prefix_mean = np.tril(np.ones((R, R))) / np.arange(1, R + 1)[:, None]
                h = ad.matmul(Tensor(prefix_mean), H)
                A_i, maps["granules"] = att.gia_forward(g, batch.saliency, self.config.granules, q_final, h, self.gia)
            if kind in ("gta", "gma"):
                masked_steps, _ = self.encode(batch.questions, batch.word_keep)
                h_tokens = ad.tile(H, R, axis=1)  # [B, R, R, d]
                h_mask = np.broadcast_to(np.tril(np.ones((R, R))), (B, R, R))
                A_t, maps["words"] = att.gta_forward(ad.mean(g, axis=-2), masked_steps, h_tokens, self.gta, h_mask)
            if kind == "gia":
                A = A_i
            elif kind == "gta":
                A = A_t
            else:
                A, gamma = att.gma_forward(A_i, A_t, g, self.fusion, self.gma, self.specs,
                                           self.config.fusion_normalize)
                if gamma is not None:
                    maps["joint"] = gamma
        scores = att.score_answers(A, opts, q_final, self.w_p)
        return Output(scores, maps)

    def loss(self, batch: Batch) -> Tensor:
        return att.cross_entropy_loss(self.forward(batch).scores, batch.gt)

    def grid_map(self, out: Output) -> Tensor | None:
        """The map over image cells this variant attends with last."""
        for key in ("joint", "granules", "attention"):
            if key in out.maps:
                return out.maps[key]
        return None


# --------------------------------------------------------------------------
# the trained baseline as a black-box probe
# --------------------------------------------------------------------------


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Probe:
    """Answer probabilities of a trained question-only model under occlusion."""

    def __init__(self, model: Model):
        if variant_kind(model.variant) != "san":
            raise ContractError("the probe must be a stacked-attention model")
        self.model = model

    def predictions(self, batch: Batch) -> np.ndarray:
        """Arg-max option per round ``[B, R]``."""
        return np.argmax(self.model.forward(batch).scores.logits.data, axis=-1)

    def word_pair_probs(self, batch: Batch, targets: np.ndarray) -> np.ndarray:
        """Probability of ``targets`` with each token pair of the question zeroed: ``[B, R, pairs]``."""
        m = self.model
        B, R, T = batch.questions.shape
        pairs = candidate_pairs(T)
        n = len(pairs)
        keep = np.ones((n, T))
        for k, (i, j) in enumerate(pairs):
            keep[k, [i, j]] = 0.0
        questions = np.broadcast_to(batch.questions[:, :, None, :], (B, R, n, T))
        _, q_final = m.encode(questions, np.broadcast_to(keep, (B, R, n, T)))
        g = ad.tile(ad.tile(m.embed_cells(batch.images), R, axis=1), n, axis=2)
        _, opts = m.encode(batch.options)
        A, _ = m.answer_vector(g, q_final)
        probs = att.score_answers(A, ad.tile(opts, n, axis=2), q_final, m.w_p).probs.data
        t = np.broadcast_to(np.asarray(targets)[:, :, None], (B, R, n))
        return np.take_along_axis(probs, t[..., None], axis=-1)[..., 0]

    def rise_scores(self, image: np.ndarray, questions: np.ndarray, options: np.ndarray,
                    targets: np.ndarray, masks: MaskSet) -> np.ndarray:
        """Probability of ``targets`` for every round and masked copy of one image: ``[R, count]``.

        Equivalent to running the model on each masked image, but the
        query-independent part of each attention layer is computed once per
        mask rather than once per (mask, round).
        """
        m = self.model
        _, q = m.encode(questions)
        _, opts = m.encode(options)
        q, opts = q.data, opts.data  # [R, d], [R, O, d]
        w_p = m.w_p.data
        R = q.shape[0]
        out = np.empty((R, masks.count))
        for start in range(0, masks.count, RISE_CHUNK):
            M = masks.masks[start:start + RISE_CHUNK]
            cells = m.embed_cells(image[None] * M[..., None]).data  # [m, P, d]
            f = np.broadcast_to(q[:, None, :], (R, len(M), q.shape[1]))
            for layer in m.san:
                conv = cells @ layer["conv_w"].data + layer["conv_b"].data
                pre = conv @ layer["w_i"].data  # [m, P, h]
                qp = f @ layer["w_q"].data + layer["b_q"].data  # [R, m, h]
                hid = np.tanh(pre[None] + qp[:, :, None, :])
                z = hid @ layer["w_a"].data[:, 0] + layer["b_a"].data[0]
                alpha = _softmax(z, axis=-1)  # [R, m, P]
                f = np.einsum("rmp,mpd->rmd", alpha, cells) + f
            u = np.concatenate([f, np.broadcast_to(q[:, None, :], f.shape)], axis=-1) @ w_p
            probs = _softmax(np.einsum("rod,rmd->rmo", opts, u), axis=-1)
            out[:, start:start + len(M)] = np.take_along_axis(probs, targets[:, None, None], axis=-1)[..., 0]
        return out
