"""Celebrity and landmark matching against an embedding gallery."""

import json
from dataclasses import dataclass

import numpy as np

from ._validation import check_vector

ARTICLES = frozenset({"a", "an", "the"})
KINDS = ("celebrity", "landmark")


@dataclass(frozen=True)
class GalleryEntry:
    name: str
    kind: str
    embedding: np.ndarray
    replace_words: tuple


@dataclass(frozen=True)
class EntityGallery:
    entries: tuple

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ValueError(f"duplicate gallery entry {dup!r}")
        dims = {e.embedding.shape[0] for e in self.entries}
        if len(dims) > 1:
            raise ValueError(f"gallery embeddings have mixed dimensions {sorted(dims)}")

    def __len__(self):
        return len(self.entries)

    @property
    def dim(self):
        return self.entries[0].embedding.shape[0] if self.entries else None

    def matrix(self):
        return np.stack([e.embedding for e in self.entries])

    def to_records(self):
        return [
            {"name": e.name, "kind": e.kind, "embedding": e.embedding.tolist(), "replace_words": list(e.replace_words)}
            for e in self.entries
        ]


@dataclass(frozen=True)
class EntityMatch:
    name: str
    kind: str
    similarity: float
    matched: bool
    replace_words: tuple = ()

    def to_json(self):
        return {"name": self.name, "kind": self.kind, "similarity": self.similarity, "matched": self.matched}


def gallery_from_records(records):
    """Build a gallery from parsed JSON records, L2-normalizing embeddings."""
    entries = []
    for rec in records:
        name = rec["name"]
        kind = rec["kind"]
        if kind not in KINDS:
            raise ValueError(f"entry {name!r}: kind must be one of {KINDS}, got {kind!r}")
        emb = check_vector(rec["embedding"], name=f"embedding of {name!r}")
        norm = np.linalg.norm(emb)
        if norm == 0 or not np.isfinite(norm):
            raise ValueError(f"entry {name!r} has a zero or non-finite embedding")
        entries.append(GalleryEntry(name, kind, emb / norm, tuple(w.lower() for w in rec.get("replace_words", ()))))
    return EntityGallery(tuple(entries))


def build_gallery(path):
    """Load a gallery JSON file (an array of entry objects); empty file -> empty gallery."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return gallery_from_records(json.loads(text) if text.strip() else [])


def save_gallery(gallery, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(gallery.to_records(), fh, indent=1)


def recognize(gallery, probe, threshold=0.8):
    """Score every entry by cosine, best first.

    ``matched`` is set on at most one entry per kind: the most similar one of
    that kind, and only when its similarity reaches ``threshold``.
    """
    if not len(gallery):
        return []
    probe = check_vector(probe, gallery.dim, "probe embedding")
    sims = gallery.matrix() @ probe
    order = sorted(range(len(gallery)), key=lambda i: (-sims[i], gallery.entries[i].name))
    seen = set()
    out = []
    for i in order:
        e = gallery.entries[i]
        sim = float(sims[i])
        matched = sim >= threshold and e.kind not in seen
        if matched:
            seen.add(e.kind)
        out.append(EntityMatch(e.name, e.kind, sim, matched, e.replace_words))
    return out


def enrich_caption(words, matches):
    """Name matched entities in a caption.

    For each matched entity (best first) the first not-yet-rewritten word in
    its ``replace_words`` is replaced by the entity name, dropping an article
    right before it.  A landmark with no replaceable word is appended as
    ``at <name>``.  Entities already named in the caption are skipped, which
    makes the rewrite idempotent.
    """
    out = list(words)
    locked = [False] * len(out)
    for m in sorted((m for m in matches if m.matched), key=lambda m: -m.similarity):
        name_words = m.name.split()
        if _contains(out, name_words):
            continue
        replace = set(m.replace_words)
        pos = next((i for i, w in enumerate(out) if not locked[i] and w.lower() in replace), None)
        if pos is None:
            if m.kind == "landmark":
                out += ["at"] + name_words
                locked += [True] * (len(name_words) + 1)
            continue
        start = pos - 1 if pos > 0 and out[pos - 1].lower() in ARTICLES and not locked[pos - 1] else pos
        out[start : pos + 1] = name_words
        locked[start : pos + 1] = [True] * len(name_words)
    return out


def _contains(seq, sub):
    n = len(sub)
    return any(seq[i : i + n] == sub for i in range(len(seq) - n + 1))
