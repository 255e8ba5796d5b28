"""Training, evaluation, ablation sweeps and the run report."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gma import autodiff as ad
from gma.errors import ConfigError, ContractError, NumericError
from gma.gmat import checkpoint_to_bytes, load_checkpoint
from gma.harness.config import VARIANTS, RunConfig, k_axis
from gma.harness.data import DialogInstance, Splits, generate_dataset
from gma.harness.models import PROBE_PREFIX, Batch, Model, Probe, make_batch, needs_saliency, needs_word_mask
from gma.metrics import MetricVector, RankedRound, compare_maps, retrieval_metrics
from gma.saliency import best_pair_index, candidate_pairs, rise_combine, sample_masks

log = logging.getLogger(__name__)

MAP_COMPARISONS = 10  # test rounds per run compared against the saliency map


@dataclass
class Aux:
    """Per-round inputs derived from the probe: saliency ``[n, R, P]`` and word keep masks ``[n, R, T]``."""

    saliency: np.ndarray
    word_keep: np.ndarray
    masked_pairs: np.ndarray  # [n, R, 2]


@dataclass
class TrainResult:
    model: Model
    losses: list[float]


@dataclass
class Evaluation:
    metrics: MetricVector
    logits: np.ndarray  # [n, R, O]
    maps: np.ndarray | None  # [n, R, P]


@dataclass
class RunReport:
    config: RunConfig
    variant: str
    losses: list[float]
    probe_losses: list[float]
    metrics: dict[str, MetricVector]
    comparisons: list[dict]
    examples: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "variant": self.variant,
            "losses": self.losses,
            "probe_losses": self.probe_losses,
            "metrics": {k: {**v.to_table_row(), "count": v.count} for k, v in self.metrics.items()},
            "map_comparisons": self.comparisons,
            "examples": self.examples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def _batch(dialogs: list[DialogInstance], idx: np.ndarray, aux: Aux | None) -> Batch:
    chosen = [dialogs[i] for i in idx]
    if aux is None:
        return make_batch(chosen)
    return make_batch(chosen, aux.saliency[idx], aux.word_keep[idx])


def train(config: RunConfig, dialogs: list[DialogInstance], variant: str | None = None,
          aux: Aux | None = None, epochs: int | None = None) -> TrainResult:
    """Plain SGD on the batch-mean cross entropy, instances in a seeded per-epoch order."""
    model = Model(config, variant)
    if not dialogs:
        raise ContractError("no training dialogs")
    epochs = config.epochs if epochs is None else epochs
    rng = np.random.default_rng([config.seed, 0x5EED])
    params = model.parameters()
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(len(dialogs), config.batch_size, rng.permutation(len(dialogs))):
            batch = _batch(dialogs, idx, aux)
            try:
                with ad.Tape() as tape:
                    loss = model.loss(batch)
                grads = ad.backward(tape, loss, accumulate=False)
            except NumericError as exc:
                raise NumericError(f"{model.variant}: training diverged in epoch {epoch}: {exc}") from exc
            for p in params:
                g = grads.get(p.name)
                if g is not None:
                    p.assign(p.data - config.learning_rate * g)
            total += float(loss.data) * len(idx)
        mean = total / len(dialogs)
        if not np.isfinite(mean):
            raise NumericError(f"{model.variant}: mean loss {mean} in epoch {epoch}")
        log.info("%s epoch %d loss %.6f", model.variant, epoch, mean)
        losses.append(mean)
    return TrainResult(model, losses)


def evaluate(model: Model, dialogs: list[DialogInstance], aux: Aux | None = None) -> Evaluation:
    logits, maps = [], []
    for idx in _batches(len(dialogs), model.config.batch_size):
        out = model.forward(_batch(dialogs, idx, aux))
        logits.append(out.scores.logits.data)
        grid = model.grid_map(out)
        if grid is not None:
            maps.append(grid.data)
    logits = np.concatenate(logits)
    rounds = [
        RankedRound(logits[i, r], rnd.gt_index, np.asarray(rnd.relevance))
        for i, d in enumerate(dialogs) for r, rnd in enumerate(d.rounds)
    ]
    return Evaluation(retrieval_metrics(rounds), logits, np.concatenate(maps) if maps else None)


def score_metrics(dialogs: list[DialogInstance], scorer) -> MetricVector:
    """Metrics of an arbitrary ``scorer(dialog, round_index) -> scores`` over a split."""
    return retrieval_metrics([
        RankedRound(np.asarray(scorer(d, r), dtype=np.float64), rnd.gt_index, np.asarray(rnd.relevance))
        for d in dialogs for r, rnd in enumerate(d.rounds)
    ])


# --------------------------------------------------------------------------
# probe-derived inputs
# --------------------------------------------------------------------------


def compute_aux(probe: Probe, dialogs: list[DialogInstance], config: RunConfig, use_gt: bool = False,
                saliency: bool = True) -> Aux:
    """RISE saliency and best two-word question masks for every round.

    Targets are the probe's own predictions on the unoccluded input, on every
    split. ``use_gt`` scores the ground truth instead; that leaks the label
    through the top-K cut, so it is for diagnostics only.
    """
    n, R = len(dialogs), len(dialogs[0].rounds)
    N = config.grid
    T = len(dialogs[0].rounds[0].question)
    pairs = np.array(candidate_pairs(T))
    sal = np.zeros((n, R, N * N))
    keep = np.ones((n, R, T))
    chosen = np.zeros((n, R, 2), dtype=np.int64)
    masks = sample_masks(N, config.mask_p, config.effective_mask_side, config.mask_count, seed=config.seed)
    for idx in _batches(n, config.batch_size):
        batch = _batch(dialogs, idx, None)
        targets = batch.gt if use_gt else probe.predictions(batch)
        probs = probe.word_pair_probs(batch, targets)
        for bi, i in enumerate(idx):
            for r in range(R):
                pair = pairs[best_pair_index(probs[bi, r])]
                chosen[i, r] = pair
                keep[i, r, pair] = 0.0
            if saliency and config.saliency == "rise":
                scores = probe.rise_scores(batch.images[bi], batch.questions[bi], batch.options[bi], targets[bi], masks)
                sal[i] = rise_combine(scores, masks).reshape(R, N * N)
    return Aux(sal, keep, chosen)


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


class Experiment:
    """One seed: a dataset, the probe trained on it and cached probe-derived inputs."""

    def __init__(self, config: RunConfig, splits: Splits | None = None):
        self.config = config
        self.splits = splits if splits is not None else generate_dataset(config)
        self._probe: TrainResult | None = None
        self._aux: dict[str, Aux] = {}

    def probe_config(self) -> RunConfig:
        return self.config.replace(variant="san", epochs=self.config.effective_probe_epochs)

    def probe(self) -> TrainResult:
        if self._probe is None:
            pc = self.probe_config()
            self._probe = train(pc, self.splits.train, "san")
        return self._probe

    def aux(self, split: str) -> Aux:
        if split not in self._aux:
            probe = Probe(self.probe().model)
            self._aux[split] = compute_aux(probe, self.splits.get(split), self.config)
        return self._aux[split]

    def uses_probe(self, variant: str, config: RunConfig) -> bool:
        return needs_word_mask(variant) or (needs_saliency(variant) and config.saliency == "rise")

    def aux_for(self, variant: str, split: str, config: RunConfig | None = None) -> Aux | None:
        config = config or self.config
        if not self.uses_probe(variant, config):
            return None
        a = self.aux(split)
        if config.saliency == "uniform":
            a = Aux(np.zeros_like(a.saliency), a.word_keep, a.masked_pairs)
        return a

    def run(self, variant: str | None = None, config: RunConfig | None = None,
            eval_split: str = "test") -> tuple[RunReport, Model]:
        """Train ``variant`` and evaluate it on ``eval_split``."""
        config = (config or self.config).replace(variant=variant or (config or self.config).variant)
        variant = config.variant
        if config.seed != self.config.seed:
            raise ConfigError("an experiment's runs share its seed")
        probe_losses: list[float] = []
        if variant == "san" and config == self.probe_config():
            result = self.probe()
        else:
            result = train(config, self.splits.train, variant, self.aux_for(variant, "train", config))
        if self.uses_probe(variant, config):
            probe_losses = self.probe().losses
        test_aux = self.aux_for(variant, eval_split, config)
        ev = evaluate(result.model, self.splits.get(eval_split), test_aux)
        comparisons, examples = self._map_report(ev, eval_split, config)
        report = RunReport(config, variant, result.losses, probe_losses, {variant: ev.metrics}, comparisons, examples)
        return report, result.model

    def _map_report(self, ev: Evaluation, split: str, config: RunConfig) -> tuple[list[dict], dict]:
        dialogs = self.splits.get(split)
        N = config.grid
        R = len(dialogs[0].rounds)
        examples: dict = {"dialog": dialogs[0].id, "rounds": R}
        sal = self._aux[split].saliency if split in self._aux and config.saliency == "rise" else None
        if ev.maps is not None:
            examples["attention"] = ev.maps[0].reshape(R, N, N).tolist()
        if sal is not None:
            examples["saliency"] = sal[0].reshape(R, N, N).tolist()
        comparisons = []
        if ev.maps is None or sal is None:
            return comparisons, examples
        for k in range(min(MAP_COMPARISONS, len(dialogs) * R)):
            i, r = divmod(k, R)
            a = ev.maps[i, r].reshape(N, N)
            b = np.clip(sal[i, r], 0.0, None).reshape(N, N)
            try:
                mc = compare_maps(a, b)
            except ContractError:
                continue
            comparisons.append({"dialog": dialogs[i].id, "round": r, **mc.to_dict()})
        return comparisons, examples


def checkpoint_bytes(model: Model, probe: Model | None = None) -> bytes:
    tensors = dict(model.state_dict())
    if probe is not None:
        tensors.update({PROBE_PREFIX + k: v for k, v in probe.state_dict().items()})
    return checkpoint_to_bytes(tensors)


def load_model(path: str | Path, config: RunConfig) -> tuple[Model, Model | None]:
    """Model (and bundled probe, if any) restored from a checkpoint."""
    tensors = load_checkpoint(path)
    own = {k: v for k, v in tensors.items() if not k.startswith(PROBE_PREFIX)}
    probe_state = {k[len(PROBE_PREFIX):]: v for k, v in tensors.items() if k.startswith(PROBE_PREFIX)}
    model = Model(config)
    model.load_state(own)
    probe = None
    if probe_state:
        probe = Model(config.replace(variant="san"), "san")
        probe.load_state(probe_state)
    return model, probe


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

METRIC_COLUMNS = ("R@1", "R@5", "R@10", "MRR", "Mean", "NDCG")


@dataclass
class SweepReport:
    axis: str
    values: list
    rows: list[dict]

    def summary(self) -> list[dict]:
        """Mean of every metric over seeds, one row per axis value."""
        out = []
        for v in self.values:
            rows = [r for r in self.rows if r["value"] == v]
            mean = {c: float(np.mean([r[c] for r in rows])) for c in METRIC_COLUMNS}
            out.append({"value": v, "seeds": len(rows), **mean})
        return out

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "values": self.values, "rows": self.rows,
                           "summary": self.summary()}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["seed", "value", "variant", "K", *METRIC_COLUMNS]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()


def sweep(config: RunConfig, axis: str, values=None, seeds: int = 1, eval_split: str = "test") -> SweepReport:
    """Train and evaluate every axis value for each derived seed ``config.seed ^ i``."""
    if axis == "fusion":
        values = list(values) if values is not None else list(VARIANTS)
        for v in values:
            config.replace(variant=v)  # raises ConfigError on unknown variants
    elif axis == "K":
        values = k_axis(config.grid, values) if values is not None else k_axis(config.grid)
        for k in values:
            config.replace(granules=k)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected 'fusion' or 'K'")
    if seeds < 1:
        raise ConfigError("sweep needs at least one seed")
    rows = []
    for i in range(seeds):
        exp = Experiment(config.replace(seed=config.seed ^ i))
        for v in values:
            run_cfg = exp.config.replace(variant=v) if axis == "fusion" else exp.config.replace(granules=v)
            report, _ = exp.run(config=run_cfg, eval_split=eval_split)
            metrics = report.metrics[run_cfg.variant].to_table_row()
            rows.append({"seed": exp.config.seed, "value": v, "variant": run_cfg.variant,
                         "K": run_cfg.granules, **metrics})
    return SweepReport(axis, values, rows)
