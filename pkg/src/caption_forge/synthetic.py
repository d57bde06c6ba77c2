"""Procedural image/caption corpus with known ground truth.

Captions are drawn from a small fixed grammar first, then a 32x32 scene is
rendered that satisfies it::

    CAPTION -> SCENE                          (0.7)
    CAPTION -> "a photo of" SCENE             (0.3)
    SCENE   -> NP                             (0.4)
    SCENE   -> NP REL NP                      (0.4)
    SCENE   -> NP REL NP "and" NP             (0.2)
    NP      -> "a" COLOR SHAPE
    REL     -> "above" | "below" | "beside"   (uniform)
    COLOR   -> "red" | "green" | "blue" | "yellow"   (uniform)
    SHAPE   -> "circle" | "square" | "triangle"      (uniform)

In a multi-object scene the first object stands in the stated relation to
every other object.  Photos get a bright background; plain scenes a dark
one.  With probability ``entity_rate`` an 8x8 entity glyph is stamped in
the top-left corner, a region objects never enter.
"""

import csv
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import hadamard

from .tensor.serialize import load_tensor, save_tensor

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("above", "below", "beside")
TAGS = COLORS + SHAPES + ("photo",)
COCO_STYLE_TAGS = COLORS + ("photo",)
WEB_STYLE_TAGS = SHAPES + ("photo",)

PHOTO_PROB = 0.3
OBJECT_COUNT_PROBS = {1: 0.4, 2: 0.4, 3: 0.2}

IMAGE_SIZE = 32
BOX = 9
GLYPH_SIZE = 8
RESERVED = GLYPH_SIZE + 1
NOISE_STD = 0.02

RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.15),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.85, 0.1),
}
BACKGROUND = {False: 0.05, True: 0.45}

# (name, kind) per glyph id
GLYPHS = (
    ("Ada Example", "celebrity"),
    ("Bo Sample", "celebrity"),
    ("Cy Placeholder", "celebrity"),
    ("Di Specimen", "celebrity"),
    ("Example Tower", "landmark"),
    ("Sample Bridge", "landmark"),
    ("Placeholder Arch", "landmark"),
    ("Specimen Gate", "landmark"),
)
CELEBRITY_REPLACE_WORDS = ("man", "woman", "person") + SHAPES
LANDMARK_REPLACE_WORDS = ("tower", "bridge", "arch", "gate", "building")
_HADAMARD = hadamard(16)


@dataclass
class SceneSpec:
    objects: list  # [(color, shape, (row, col))] top-left corner of each object's box
    relation: str = None
    photo: bool = False
    glyph: int = None
    seed: int = None


@dataclass
class LabeledExample:
    image: np.ndarray
    tags: frozenset
    caption: str
    glyph: int = None
    entity_descriptor: np.ndarray = None
    scene: SceneSpec = field(default=None, repr=False)


def _np_phrase(color, shape):
    return f"a {color} {shape}"


def caption_for(objects, relation, photo):
    """Render the grammar string for an object list."""
    nps = [_np_phrase(c, s) for c, s, *_ in objects]
    if len(nps) == 1:
        scene = nps[0]
    elif len(nps) == 2:
        scene = f"{nps[0]} {relation} {nps[1]}"
    else:
        scene = f"{nps[0]} {relation} {nps[1]} and {nps[2]}"
    return f"a photo of {scene}" if photo else scene


def tags_for(objects, photo):
    tags = {c for c, *_ in objects} | {s for _, s, *_ in objects}
    if photo:
        tags.add("photo")
    return frozenset(tags)


def caption_distribution():
    """Yield every ``(caption, probability)`` the grammar can produce."""
    for photo, p_photo in ((False, 1 - PHOTO_PROB), (True, PHOTO_PROB)):
        for k, p_k in OBJECT_COUNT_PROBS.items():
            nps = list(itertools.product(COLORS, SHAPES))
            rels = RELATIONS if k > 1 else (None,)
            p_each = p_photo * p_k / (len(rels) * len(nps) ** k)
            for rel in rels:
                for objs in itertools.product(nps, repeat=k):
                    yield caption_for(objs, rel, photo), p_each


def caption_entropy():
    """Return ``(entropy in nats, expected token count including the end marker)``."""
    h = 0.0
    tokens = 0.0
    for caption, p in caption_distribution():
        h -= p * math.log(p)
        tokens += p * (len(caption.split()) + 1)
    return h, tokens


# -- rendering ------------------------------------------------------------


def _shape_mask(shape):
    yy, xx = np.mgrid[0:BOX, 0:BOX]
    c = (BOX - 1) / 2
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= 4.2**2
    if shape == "square":
        return (yy >= 1) & (yy <= BOX - 2) & (xx >= 1) & (xx <= BOX - 2)
    if shape == "triangle":
        return np.abs(xx - c) <= yy * 0.5
    raise ValueError(f"unknown shape {shape!r}")


_MASKS = {s: _shape_mask(s) for s in SHAPES}


def glyph_pattern(glyph):
    """8x8 binary pattern: 2x2 blocks set by one row of a 16x16 Hadamard matrix."""
    if glyph not in range(len(GLYPHS)):
        raise KeyError(f"unknown glyph {glyph!r}; valid ids are 0..{len(GLYPHS) - 1}")
    row = _HADAMARD[glyph + 1].reshape(4, 4)
    return np.kron((1 + row) / 2, np.ones((2, 2)))


def patch_descriptor(image):
    """Centered 2x2-block means of the glyph corner, and their norm.

    Returns the raw (unnormalized) 16-vector so callers can reject flat
    patches by contrast before normalizing.
    """
    gray = np.asarray(image)[:, :GLYPH_SIZE, :GLYPH_SIZE].mean(axis=0)
    blocks = gray.reshape(4, 2, 4, 2).mean(axis=(1, 3)).ravel()
    v = blocks - blocks.mean()
    return v, float(np.linalg.norm(v))


def entity_descriptor(glyph):
    """Unit 16-vector for a glyph id, computed from its pattern statistics."""
    pattern = glyph_pattern(glyph)
    v, norm = patch_descriptor(np.broadcast_to(pattern, (3,) + pattern.shape))
    return v / norm


def _boxes_disjoint(a, b):
    (ya, xa), (yb, xb) = a, b
    return ya + BOX < yb or yb + BOX < ya or xa + BOX < xb or xb + BOX < xa


def _relation_holds(first, other, relation):
    (y1, x1), (y2, x2) = first, other
    if relation == "above":
        return y1 + BOX <= y2
    if relation == "below":
        return y2 + BOX <= y1
    return x1 + BOX <= x2


def _place(rng, k, relation):
    hi = IMAGE_SIZE - BOX + 1
    while True:
        boxes = [tuple(int(v) for v in rng.integers(0, hi, size=2)) for _ in range(k)]
        if any(y < RESERVED and x < RESERVED for y, x in boxes):
            continue
        if not all(_boxes_disjoint(a, b) for a, b in itertools.combinations(boxes, 2)):
            continue
        if k > 1 and not all(_relation_holds(boxes[0], b, relation) for b in boxes[1:]):
            continue
        return boxes


def render(scene, rng=None):
    """Rasterize a scene to a 3x32x32 float image in [0, 1]."""
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), BACKGROUND[scene.photo])
    for color, shape, (y, x) in scene.objects:
        region = img[:, y : y + BOX, x : x + BOX]
        region[:, _MASKS[shape]] = np.asarray(RGB[color])[:, None]
    if scene.glyph is not None:
        img[:, :GLYPH_SIZE, :GLYPH_SIZE] = glyph_pattern(scene.glyph)
    if rng is not None:
        img += rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_scene(rng, entity_rate=0.2):
    photo = bool(rng.random() < PHOTO_PROB)
    k = int(rng.choice(list(OBJECT_COUNT_PROBS), p=list(OBJECT_COUNT_PROBS.values())))
    relation = str(rng.choice(RELATIONS)) if k > 1 else None
    kinds = [(str(rng.choice(COLORS)), str(rng.choice(SHAPES))) for _ in range(k)]
    boxes = _place(rng, k, relation)
    glyph = int(rng.integers(len(GLYPHS))) if rng.random() < entity_rate else None
    objects = [(c, s, b) for (c, s), b in zip(kinds, boxes)]
    return SceneSpec(objects=objects, relation=relation, photo=photo, glyph=glyph)


def make_example(scene, rng=None):
    return LabeledExample(
        image=render(scene, rng),
        tags=tags_for(scene.objects, scene.photo),
        caption=caption_for(scene.objects, scene.relation, scene.photo),
        glyph=scene.glyph,
        entity_descriptor=None if scene.glyph is None else entity_descriptor(scene.glyph),
        scene=scene,
    )


def generate_corpus(seed, n, entity_rate=0.2):
    """Deterministic list of ``n`` labeled examples.

    The corpus for ``(seed, m)`` is a prefix of the corpus for ``(seed, n)``
    whenever ``m <= n``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scene = sample_scene(rng, entity_rate)
        scene.seed = seed
        out.append(make_example(scene, rng))
    return out


def corrupt_caption(caption, seed, kind=None):
    """Swap one color or shape word for an inventory member absent from the caption.

    ``kind`` may force ``"color"`` or ``"shape"``.  The swapped-in word is
    never already present, so the caption's tag set always changes.
    """
    words = caption.split()
    present = set(words)
    pools = {"color": COLORS, "shape": SHAPES}
    if kind is not None and kind not in pools:
        raise ValueError(f"kind must be 'color' or 'shape', got {kind!r}")
    options = []
    for i, w in enumerate(words):
        for k, pool in pools.items():
            if w in pool and (kind is None or kind == k):
                options += [(i, r) for r in pool if r not in present]
    if not options:
        raise ValueError(f"caption has no swappable word: {caption!r}")
    i, replacement = options[np.random.default_rng(seed).integers(len(options))]
    words[i] = replacement
    return " ".join(words)


def default_gallery_entries():
    """Gallery records (as loaded from JSON) for the eight synthetic glyphs."""
    entries = []
    for gid, (name, kind) in enumerate(GLYPHS):
        words = CELEBRITY_REPLACE_WORDS if kind == "celebrity" else LANDMARK_REPLACE_WORDS
        entries.append(
            {
                "name": name,
                "kind": kind,
                "embedding": entity_descriptor(gid).tolist(),
                "replace_words": list(words),
            }
        )
    return entries


def split_corpus(seed=7, n_train=2000, n_test=500, entity_rate=0.2):
    corpus = generate_corpus(seed, n_train + n_test, entity_rate)
    return corpus[:n_train], corpus[n_train:]


# -- export ---------------------------------------------------------------

INDEX_FILE = "index.tsv"


def save_corpus(examples, out_dir):
    """Write one ``.cftn`` image per example plus a tab-separated index."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, INDEX_FILE), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for i, ex in enumerate(examples):
            fname = f"{i:06d}.cftn"
            save_tensor(os.path.join(out_dir, fname), ex.image)
            glyph = "" if ex.glyph is None else str(ex.glyph)
            writer.writerow([fname, ",".join(sorted(ex.tags)), ex.caption, glyph])


def load_corpus(corpus_dir):
    examples = []
    with open(os.path.join(corpus_dir, INDEX_FILE), encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            fname, tags, caption, glyph = (row + [""])[:4]
            glyph = int(glyph) if glyph else None
            examples.append(
                LabeledExample(
                    image=load_tensor(os.path.join(corpus_dir, fname)),
                    tags=frozenset(t for t in tags.split(",") if t),
                    caption=caption,
                    glyph=glyph,
                    entity_descriptor=None if glyph is None else entity_descriptor(glyph),
                )
            )
    return examples
