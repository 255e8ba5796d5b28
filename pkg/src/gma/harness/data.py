"""Synthetic grounded visual dialog.

Each image is an ``N x N`` grid. A few cells hold an object with a colour, a
shape and a count, encoded as one-hot channels; the rest are background. The
caption names one focus object by colour and shape. Every round asks about an
object, either by colour ("tell me about red"), by shape ("tell me about
square") or by coreference ("tell me about it", always the focus object), and
the answer is the object's ``colour shape count`` triple. Candidate options are
distinct triples graded by how many attributes they share with the truth;
they always include the answers about the other objects in the picture.

Questions referring back with "it" are unanswerable without the history, and
the count is never stated in the text, so the image is always needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gma.errors import ConfigError, FormatError
from gma.gmat import read_tensor, write_tensor
from gma.harness.config import RunConfig

COLORS = ("red", "green", "blue", "yellow", "purple")
SHAPES = ("circle", "square", "triangle", "star", "cross")
COUNTS = ("one", "two", "three", "four")
FUNCTION_WORDS = ("<pad>", "there", "is", "a", "tell", "me", "about", "it")
VOCAB = FUNCTION_WORDS + COLORS + SHAPES + COUNTS
WORD_ID = {w: i for i, w in enumerate(VOCAB)}

ATTR_CHANNELS = len(COLORS) + len(SHAPES) + len(COUNTS) + 2
OBJECT_CHANNEL = len(COLORS) + len(SHAPES) + len(COUNTS)
EMPTY_CHANNEL = OBJECT_CHANNEL + 1
NOISE = 0.05
COREF_PROB = 0.35
HARD_FRACTION = 0.0
FOCUS_PROB = 0.5  # share of attribute questions about the captioned object

QUESTION_LEN = 4
ANSWER_LEN = 3
CAPTION_LEN = 5


def ids(words) -> list[int]:
    return [WORD_ID[w] for w in words]


def words(token_ids) -> list[str]:
    return [VOCAB[i] for i in token_ids]


def all_triples() -> list[tuple[int, int, int]]:
    return [(c, s, n) for c in range(len(COLORS)) for s in range(len(SHAPES)) for n in range(len(COUNTS))]


def answer_tokens(triple) -> list[int]:
    c, s, n = triple
    return ids([COLORS[c], SHAPES[s], COUNTS[n]])


def overlap(a, b) -> int:
    return sum(x == y for x, y in zip(a, b))


@dataclass
class Round:
    question: list[int]
    answer: list[int]
    options: list[list[int]]
    gt_index: int
    relevance: list[float]
    history: list[list[int]]
    referent: int  # cell index of the object asked about (latent)
    kind: str  # "color", "shape" or "coref"


@dataclass
class DialogInstance:
    id: str
    image: np.ndarray  # [N, N, C]
    caption: list[int]
    rounds: list[Round]
    objects: list[dict] = field(default_factory=list)  # latent scene description

    @property
    def N(self) -> int:
        return self.image.shape[0]


@dataclass
class Splits:
    train: list[DialogInstance]
    val: list[DialogInstance]
    test: list[DialogInstance]

    def get(self, name: str) -> list[DialogInstance]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def _options(rng: np.random.Generator, truth: tuple[int, int, int], count: int,
             scene: list[tuple[int, int, int]]) -> tuple[list, int, list[float]]:
    # the other objects' own answers come first, so picking "whatever is in the
    # picture" does not identify the referent
    chosen = [t for t in scene if t != truth][:count - 1]
    pool = [t for t in all_triples() if t != truth and t not in chosen]
    hard = [t for t in pool if overlap(t, truth) == 2]
    n_hard = min(len(hard), int(round((count - 1 - len(chosen)) * HARD_FRACTION)))
    chosen += [hard[i] for i in rng.choice(len(hard), size=n_hard, replace=False)]
    rest = [t for t in pool if t not in chosen]
    chosen += [rest[i] for i in rng.choice(len(rest), size=count - 1 - len(chosen), replace=False)]
    chosen = [chosen[i] for i in rng.permutation(len(chosen))]
    gt = int(rng.integers(0, count))
    chosen.insert(gt, truth)
    relevance = [overlap(t, truth) / 3.0 for t in chosen]
    return [answer_tokens(t) for t in chosen], gt, relevance


def make_dialog(rng: np.random.Generator, config: RunConfig, dialog_id: str) -> DialogInstance:
    N, C = config.grid, config.channels
    n_obj = config.objects
    cells = rng.choice(N * N, size=n_obj, replace=False)
    colors = rng.choice(len(COLORS), size=n_obj, replace=False)
    shapes = rng.choice(len(SHAPES), size=n_obj, replace=False)
    counts = rng.integers(0, len(COUNTS), size=n_obj)

    image = rng.normal(0.0, NOISE, size=(N * N, C))
    image[:, EMPTY_CHANNEL] += 1.0
    objects = []
    for cell, c, s, n in zip(cells, colors, shapes, counts):
        image[cell, EMPTY_CHANNEL] -= 1.0
        image[cell, OBJECT_CHANNEL] += 1.0
        image[cell, c] += 1.0
        image[cell, len(COLORS) + s] += 1.0
        image[cell, len(COLORS) + len(SHAPES) + n] += 1.0
        objects.append({"cell": int(cell), "color": int(c), "shape": int(s), "count": int(n)})
    image = image.reshape(N, N, C)

    focus = int(rng.integers(0, n_obj))
    fo = objects[focus]
    caption = ids(["there", "is", "a", COLORS[fo["color"]], SHAPES[fo["shape"]]])

    history = [caption]
    rounds = []
    for _ in range(config.rounds):
        if rng.random() < COREF_PROB:
            target, kind = focus, "coref"
            question = ids(["tell", "me", "about", "it"])
        else:
            target = focus if rng.random() < FOCUS_PROB else int(rng.integers(0, n_obj))
            kind = "color" if rng.random() < 0.5 else "shape"
            o = objects[target]
            ref = COLORS[o["color"]] if kind == "color" else SHAPES[o["shape"]]
            question = ids(["tell", "me", "about", ref])
        o = objects[target]
        truth = (o["color"], o["shape"], o["count"])
        scene = [(x["color"], x["shape"], x["count"]) for x in objects]
        options, gt, relevance = _options(rng, truth, config.option_count, scene)
        answer = answer_tokens(truth)
        rounds.append(Round(question, answer, options, gt, relevance, [list(h) for h in history], o["cell"], kind))
        history.append(question + answer)
    return DialogInstance(dialog_id, image, caption, rounds, objects)


def generate_dataset(config: RunConfig) -> Splits:
    """Deterministic train/val/test dialogs for ``config.seed``."""
    if config.channels < ATTR_CHANNELS:
        raise ConfigError(f"channels must be at least {ATTR_CHANNELS} to hold the attribute encoding")
    if config.objects > min(len(COLORS), len(SHAPES)) or config.objects > config.grid ** 2:
        raise ConfigError(f"at most {min(len(COLORS), len(SHAPES), config.grid ** 2)} objects fit the vocabulary and grid")
    if config.option_count > len(all_triples()):
        raise ConfigError(f"option_count exceeds the {len(all_triples())} distinct answers the vocabulary can express")
    out = {}
    for offset, (name, size) in enumerate((("train", config.train_dialogs), ("val", config.val_dialogs),
                                           ("test", config.test_dialogs))):
        rng = np.random.default_rng([config.seed, offset])
        out[name] = [make_dialog(rng, config, f"{name}-{i:05d}") for i in range(size)]
    return Splits(**out)


def cheat_choice(dialog: DialogInstance, r: int) -> int:
    """Option a reader of the generator's latent scene would pick."""
    rnd = dialog.rounds[r]
    obj = next(o for o in dialog.objects if o["cell"] == rnd.referent)
    want = answer_tokens((obj["color"], obj["shape"], obj["count"]))
    return rnd.options.index(want)


# --------------------------------------------------------------------------
# persistence: JSON Lines + one GMAT tensor per image
# --------------------------------------------------------------------------


def _round_to_json(r: Round) -> dict:
    return {
        "question": r.question, "answer": r.answer, "options": r.options, "gt_index": r.gt_index,
        "relevance": r.relevance, "history": r.history, "referent": r.referent, "kind": r.kind,
    }


def save_split(dialogs: list[DialogInstance], root: Path, name: str) -> list[Path]:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    written = []
    lines = []
    for d in dialogs:
        rel = Path("images") / f"{d.id}.gmat"
        write_tensor(root / rel, d.image)
        written.append(root / rel)
        lines.append(json.dumps({
            "id": d.id, "image": rel.as_posix(), "caption": d.caption, "objects": d.objects,
            "rounds": [_round_to_json(r) for r in d.rounds],
        }, sort_keys=True))
    path = root / f"{name}.jsonl"
    path.write_text("\n".join(lines) + "\n")
    written.append(path)
    return written


def load_split(root: Path, name: str) -> list[DialogInstance]:
    root = Path(root)
    path = root / f"{name}.jsonl"
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(DialogInstance(
            rec["id"], read_tensor(root / rec["image"]), rec["caption"],
            [Round(**r) for r in rec["rounds"]], rec.get("objects", []),
        ))
    return out


def save_splits(splits: Splits, root: Path) -> list[Path]:
    written = []
    for name in ("train", "val", "test"):
        written += save_split(splits.get(name), root, name)
    return written


def load_splits(root: Path) -> Splits:
    return Splits(*(load_split(root, n) for n in ("train", "val", "test")))
