"""Procedural image-caption pairs with an exact misalignment oracle.

Scenes hold 1-3 colored shapes on a 4x4 grid and render deterministically
to 3x32x32 pixels.  Captions assert facts (shape, optionally color and a
left/right/top/bottom position) about concrete scene objects, so the
effect of any augmentation on caption truth is computable exactly:

* a cropped-out object loses all its facts,
* grayscale voids color facts,
* a horizontal flip falsifies left/right facts,
* color jitter changes pixels but never fact verifiability.

``augment`` scores these rules fact by fact; ``semantic_alignment``
recomputes the same quantity by first transforming the symbolic scene
and then evaluating each fact as a predicate, which is the independent
checker used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import json

import numpy as np

from .rng import SplitMix64, derive_seed

GRID = 4
CELL = 8
CANVAS = GRID * CELL                     # 32 px square canvas
MAX_LEN = 16

# Fixed 32-token vocabulary.  0/1 are special; 17-27 are content words.
VOCAB = [
    "[pad]", "[mask]",
    "a", "the", "there", "is", "are", "and", "on", "in", "at", "of",
    "picture", "photo", "scene", "shows", "with",
    "red", "green", "blue", "yellow",
    "square", "circle", "triangle",
    "left", "right", "top", "bottom",
    "side", "corner", "small", "big",
]
PAD_ID = 0
MASK_ID = 1
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIDES = ("left", "right", "top", "bottom")

_COLOR_RGB = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.90, 0.85, 0.10),
}
_BACKGROUND = 0.05


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass(frozen=True)
class Scene:
    objects: tuple

    def render(self) -> np.ndarray:
        return render_scene(self)


@dataclass(frozen=True)
class Mention:
    """One described object: which scene object, and which facts are asserted."""

    object_index: int
    shape: str
    color: str = None       # None when the caption does not mention color
    side: str = None        # None when no position fact

    @property
    def fact_count(self) -> int:
        return 1 + (self.color is not None) + (self.side is not None)


@dataclass(frozen=True)
class Caption:
    tokens: tuple            # unpadded token ids, length <= MAX_LEN
    mentions: tuple

    @property
    def fact_count(self) -> int:
        return sum(m.fact_count for m in self.mentions)

    def padded(self, max_len: int = MAX_LEN) -> np.ndarray:
        out = np.full(max_len, PAD_ID, dtype=np.int64)
        out[: len(self.tokens)] = self.tokens
        return out


@dataclass
class AugmentationRecord:
    """Ordered ops plus the exact fraction of caption facts still true."""

    ops: list
    alignment_score: float


@dataclass
class PairRecord:
    """One dataset row; pixels are re-rendered from the scene on demand."""

    seed: int
    scene: Scene
    caption: Caption
    noisy: bool = False
    alignment: float = 1.0


@dataclass
class MaskedBatch:
    tokens: np.ndarray       # (n, max_len) after substitution
    positions: list          # [(row, pos), ...] in mask order
    targets: list            # original ids at those positions
    kinds: list              # "mask" | "random" | "keep", for statistics


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _shape_mask(shape: str) -> np.ndarray:
    """Boolean CELL x CELL stencil for one shape, computed on pixel centers."""
    m = np.zeros((CELL, CELL), dtype=bool)
    for r in range(CELL):
        for c in range(CELL):
            if shape == "square":
                m[r, c] = 1 <= r <= 6 and 1 <= c <= 6
            elif shape == "circle":
                m[r, c] = (r - 3.5) ** 2 + (c - 3.5) ** 2 <= 3.2**2
            else:  # triangle, apex at the top
                m[r, c] = 1 <= r <= 6 and abs(c - 3.5) <= 0.5 + (r - 1) * 0.5
    return m


_STENCILS = {s: _shape_mask(s) for s in SHAPES}


def render_scene(scene: Scene) -> np.ndarray:
    """Deterministic 3x32x32 float canvas in [0, 1]."""
    img = np.full((3, CANVAS, CANVAS), _BACKGROUND)
    for obj in scene.objects:
        mask = _STENCILS[obj.shape]
        rgb = _COLOR_RGB[obj.color]
        r0, c0 = obj.row * CELL, obj.col * CELL
        for ch in range(3):
            patch = img[ch, r0:r0 + CELL, c0:c0 + CELL]
            patch[mask] = rgb[ch]
    return img


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _side_options(obj: SceneObject) -> list:
    horizontal = "left" if obj.col <= 1 else "right"
    vertical = "top" if obj.row <= 1 else "bottom"
    return [horizontal, vertical]


_PREFIXES = (
    (),
    ("the", "picture", "shows"),
    ("the", "photo", "shows"),
    ("the", "scene", "shows"),
)


def gen_pair(seed: int):
    """Deterministic (Scene, Caption); every caption fact true of the scene."""
    rng = SplitMix64(seed)
    n_obj = 1 + rng.randint(3)
    cells = SplitMix64(derive_seed(seed, 1)).sample(GRID * GRID, n_obj)
    objects = tuple(
        SceneObject(
            shape=SHAPES[rng.randint(len(SHAPES))],
            color=COLORS[rng.randint(len(COLORS))],
            row=cell // GRID,
            col=cell % GRID,
        )
        for cell in cells
    )
    scene = Scene(objects)

    n_mention = 1 + rng.randint(min(2, n_obj))
    order = rng.sample(n_obj, n_mention)
    tokens = list(rng.choice(_PREFIXES))
    mentions = []
    for k, oi in enumerate(order):
        obj = objects[oi]
        color = obj.color if rng.uniform() < 0.8 else None
        side = rng.choice(_side_options(obj)) if rng.uniform() < 0.6 else None
        mentions.append(Mention(oi, obj.shape, color=color, side=side))
        if k > 0:
            tokens.append(TOKEN_ID["and"])
        tokens.append(TOKEN_ID["a"])
        if color is not None:
            tokens.append(TOKEN_ID[color])
        tokens.append(TOKEN_ID[obj.shape])
        if side is not None:
            tokens += [TOKEN_ID["on"], TOKEN_ID["the"], TOKEN_ID[side]]
    tokens = [TOKEN_ID[t] if isinstance(t, str) else t for t in tokens]
    assert len(tokens) <= MAX_LEN
    return scene, Caption(tuple(tokens), tuple(mentions))


# ---------------------------------------------------------------------------
# Augmentation + oracle
# ---------------------------------------------------------------------------

def _cell_center(row: int, col: int):
    return row * CELL + (CELL - 1) / 2.0, col * CELL + (CELL - 1) / 2.0


def _resize_nearest(img: np.ndarray, out: int = CANVAS) -> np.ndarray:
    _, h, w = img.shape
    rows = (np.arange(out) * h) // out
    cols = (np.arange(out) * w) // out
    return img[:, rows][:, :, cols]


def augment(scene: Scene, caption: Caption, rng_seed: int, base: np.ndarray = None):
    """Apply each op with probability 1/2; return (pixels, record).

    Op order is fixed: crop (window >= 50% area, resized back to 32x32),
    horizontal flip, grayscale, color jitter.  The record carries the
    exact alignment score of the paired caption's facts, computed fact by
    fact from the rules in the module docstring.  The pixels and sampled
    ops never depend on the caption.  ``base`` lets callers reuse a cached
    render of the scene.
    """
    rng = SplitMix64(rng_seed)
    img = render_scene(scene) if base is None else base
    ops = []

    if rng.uniform() < 0.5:
        h = 23 + rng.randint(CANVAS - 23 + 1)
        w = 23 + rng.randint(CANVAS - 23 + 1)
        top = rng.randint(CANVAS - h + 1)
        left = rng.randint(CANVAS - w + 1)
        ops.append(("crop", (top, left, h, w)))
        img = _resize_nearest(img[:, top:top + h, left:left + w])
    if rng.uniform() < 0.5:
        ops.append(("hflip",))
        img = img[:, :, ::-1].copy()
    if rng.uniform() < 0.5:
        ops.append(("grayscale",))
        img = np.repeat(img.mean(axis=0, keepdims=True), 3, axis=0)
    if rng.uniform() < 0.5:
        scales = tuple(rng.uniform_in(0.85, 1.15) for _ in range(3))
        ops.append(("jitter", scales))
        img = np.clip(img * np.asarray(scales)[:, None, None], 0.0, 1.0)

    if img is base:
        img = img.copy()                  # never alias the caller's cache
    return img, AugmentationRecord(ops, _score_ops(scene, caption, ops))


def _score_ops(scene: Scene, caption: Caption, ops) -> float:
    """Fact-by-fact survival rules applied directly to the op list."""
    crop = next((op[1] for op in ops if op[0] == "crop"), None)
    flipped = any(op[0] == "hflip" for op in ops)
    gray = any(op[0] == "grayscale" for op in ops)

    total = true = 0
    for mention in caption.mentions:
        obj = scene.objects[mention.object_index]
        lost = False
        if crop is not None:
            top, left, h, w = crop
            cy, cx = _cell_center(obj.row, obj.col)
            lost = not (top <= cy < top + h and left <= cx < left + w)
        total += mention.fact_count
        if lost:
            continue
        true += 1  # the shape fact survives everything but loss
        if mention.color is not None:
            true += 0 if gray else 1
        if mention.side is not None:
            if mention.side in ("left", "right") and flipped:
                true += 0
            else:
                true += 1
    return true / total if total else 1.0


# ---------------------------------------------------------------------------
# Independent semantic checker
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _TransformedObject:
    shape: str
    color: str        # None once grayscaled
    row: int
    col: int


def transform_semantics(scene: Scene, ops) -> dict:
    """Push the symbolic scene through the ops; returns {object_index: state}."""
    state = {
        i: _TransformedObject(o.shape, o.color, o.row, o.col)
        for i, o in enumerate(scene.objects)
    }
    for op in ops:
        if op[0] == "crop":
            top, left, h, w = op[1]
            survivors = {}
            for i, o in state.items():
                cy, cx = _cell_center(o.row, o.col)
                if top <= cy < top + h and left <= cx < left + w:
                    survivors[i] = o
            state = survivors
        elif op[0] == "hflip":
            state = {i: replace(o, col=GRID - 1 - o.col) for i, o in state.items()}
        elif op[0] == "grayscale":
            state = {i: replace(o, color=None) for i, o in state.items()}
        # jitter: no semantic effect
    return state


def _side_holds(obj, side: str) -> bool:
    if side == "left":
        return obj.col <= 1
    if side == "right":
        return obj.col >= 2
    if side == "top":
        return obj.row <= 1
    return obj.row >= 2


def semantic_alignment(scene: Scene, caption: Caption, ops) -> float:
    """Brute-force oracle: evaluate every fact against the transformed scene."""
    state = transform_semantics(scene, ops)
    total = true = 0
    for mention in caption.mentions:
        total += mention.fact_count
        obj = state.get(mention.object_index)
        if obj is None:
            continue
        if obj.shape == mention.shape:
            true += 1
        if mention.color is not None and obj.color == mention.color:
            true += 1
        if mention.side is not None and _side_holds(obj, mention.side):
            true += 1
    return true / total if total else 1.0


def _satisfied(obj, mention: Mention) -> int:
    sat = int(obj.shape == mention.shape)
    if mention.color is not None:
        sat += int(obj.color == mention.color)
    if mention.side is not None:
        sat += int(_side_holds(obj, mention.side))
    return sat


def caption_alignment(caption: Caption, scene: Scene) -> float:
    """Score a caption against an arbitrary clean scene (no object binding).

    Each mention is matched to the scene object satisfying the most of
    its facts; used to grade swapped captions after noise injection.  The
    source scene always scores 1.0.
    """
    total = true = 0
    for mention in caption.mentions:
        total += mention.fact_count
        best = max((_satisfied(obj, mention) for obj in scene.objects), default=0)
        true += best
    return true / total if total else 1.0


def rebind_mentions(caption: Caption, scene: Scene) -> Caption:
    """Re-anchor each mention to its best-matching object of a new scene.

    Needed when noise injection moves a caption between pairs: mention
    indices must stay valid for the scene they now describe.  Ties break
    to the lowest object index, so the result is deterministic, and the
    bound score of the rebound caption equals ``caption_alignment``.
    """
    mentions = []
    for m in caption.mentions:
        sats = [_satisfied(obj, m) for obj in scene.objects]
        best = int(np.argmax(sats)) if sats else 0
        mentions.append(replace(m, object_index=best))
    return Caption(caption.tokens, tuple(mentions))


# ---------------------------------------------------------------------------
# Dataset assembly and persistence
# ---------------------------------------------------------------------------

def generate_dataset(n_pairs: int, seed: int) -> list:
    """n_pairs clean records with per-pair child seeds."""
    records = []
    for i in range(n_pairs):
        pair_seed = derive_seed(seed, 0xDA7A, i)
        scene, caption = gen_pair(pair_seed)
        records.append(PairRecord(pair_seed, scene, caption))
    return records


def inject_noise(dataset: list, rate: float, rng_seed: int) -> list:
    """Reassign captions for an exact round(rate * n) subset of pairs.

    Chosen pairs trade captions along a random cycle (a derangement of
    the subset), so every chosen pair ends up with another pair's
    caption; each is flagged and rescored against its new caption.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    out = [replace(r) for r in dataset]
    n = len(out)
    k = round(rate * n)
    if k == 0 or n < 2:
        return out
    rng = SplitMix64(rng_seed)
    chosen = rng.sample(n, k)
    if k == 1:
        donors = [i for i in range(n) if i != chosen[0]]
        donor = donors[rng.randint(len(donors))]
        sources = [donor]
    else:
        sources = chosen[1:] + chosen[:1]        # single cycle: no fixed points
    new_captions = [dataset[s].caption for s in sources]
    for tgt, cap in zip(chosen, new_captions):
        out[tgt].caption = rebind_mentions(cap, out[tgt].scene)
        out[tgt].noisy = True
        out[tgt].alignment = caption_alignment(cap, out[tgt].scene)
    return out


def save_dataset(records: list, path: str) -> None:
    """One self-describing JSON record per line; scenes are the pixel source of truth."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {
                "seed": r.seed,
                "objects": [[o.shape, o.color, o.row, o.col] for o in r.scene.objects],
                "tokens": list(r.caption.tokens),
                "mentions": [
                    [m.object_index, m.shape, m.color, m.side] for m in r.caption.mentions
                ],
                "noisy": r.noisy,
                "alignment": r.alignment,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path: str) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            scene = Scene(tuple(SceneObject(s, c, r_, c_) for s, c, r_, c_ in row["objects"]))
            caption = Caption(
                tuple(row["tokens"]),
                tuple(Mention(oi, sh, color=co, side=si) for oi, sh, co, si in row["mentions"]),
            )
            records.append(PairRecord(row["seed"], scene, caption,
                                      noisy=row["noisy"], alignment=row["alignment"]))
    return records


# ---------------------------------------------------------------------------
# MLM masking
# ---------------------------------------------------------------------------

_NON_SPECIAL = [i for i in range(VOCAB_SIZE) if i not in (PAD_ID, MASK_ID)]


def mask_tokens(tokens, rng_seed: int) -> MaskedBatch:
    """BERT-style masking of a (n, max_len) token grid.

    Each non-pad token is selected with probability 0.15; a selected
    token becomes [mask] w.p. 0.8, a random non-special token w.p. 0.1,
    or stays unchanged w.p. 0.1.  Ground-truth ids are recorded either way.
    """
    tokens = np.array(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    rng = SplitMix64(rng_seed)
    out = tokens.copy()
    positions, targets, kinds = [], [], []
    n, length = tokens.shape
    for r in range(n):
        for p in range(length):
            if tokens[r, p] == PAD_ID:
                continue
            if rng.uniform() >= 0.15:
                continue
            positions.append((r, p))
            targets.append(int(tokens[r, p]))
            u = rng.uniform()
            if u < 0.8:
                out[r, p] = MASK_ID
                kinds.append("mask")
            elif u < 0.9:
                out[r, p] = _NON_SPECIAL[rng.randint(len(_NON_SPECIAL))]
                kinds.append("random")
            else:
                kinds.append("keep")
    return MaskedBatch(out, positions, targets, kinds)
