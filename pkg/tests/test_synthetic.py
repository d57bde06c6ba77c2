import itertools
import re
from collections import Counter

import numpy as np
import pytest

from caption_forge import synthetic as S

from oracles import cosine

_NP = r"a (red|green|blue|yellow) (circle|square|triangle)"
_REL = r"(above|below|beside)"
GRAMMAR = re.compile(rf"^(a photo of )?{_NP}( {_REL} {_NP}( and {_NP})?)?$")


@pytest.fixture(scope="module")
def big_corpus():
    return S.generate_corpus(7, 10000)


def test_same_seed_bit_identical():
    a, b = S.generate_corpus(3, 50), S.generate_corpus(3, 50)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert (x.caption, x.tags, x.glyph) == (y.caption, y.tags, y.glyph)


def test_prefix_property():
    short, long = S.generate_corpus(5, 10), S.generate_corpus(5, 30)
    assert [e.caption for e in short] == [e.caption for e in long[:10]]
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(short, long))


def test_single_example_parses():
    (ex,) = S.generate_corpus(11, 1)
    assert GRAMMAR.match(ex.caption)


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        S.generate_corpus(0, 0)


def test_tag_marginals(big_corpus):
    counts = Counter(t for ex in big_corpus for t in ex.tags)
    assert set(counts) == set(S.TAGS)
    for tag in S.TAGS:
        assert 0.1 <= counts[tag] / len(big_corpus) <= 0.6, tag


def test_examples_are_consistent(big_corpus):
    for ex in big_corpus[:2000]:
        assert GRAMMAR.match(ex.caption), ex.caption
        words = set(ex.caption.split())
        assert ex.tags <= words
        assert ex.tags == {w for w in words if w in S.TAGS}
        assert ex.image.shape == (3, 32, 32)
        assert ex.image.min() >= 0 and ex.image.max() <= 1


def test_grammar_probabilities_sum_to_one():
    assert sum(p for _, p in S.caption_distribution()) == pytest.approx(1.0, abs=1e-12)
    assert all(GRAMMAR.match(c) for c, _ in itertools.islice(S.caption_distribution(), 0, None, 97))


def test_shapes_cover_at_least_16_pixels():
    for mask in (S._shape_mask(s) for s in S.SHAPES):
        assert mask.sum() >= 16


def test_objects_avoid_glyph_corner(big_corpus):
    for ex in big_corpus[:500]:
        for _, _, (y, x) in ex.scene.objects:
            assert not (y < S.RESERVED and x < S.RESERVED)


# -- corruption ----------------------------------------------------------------


def test_forced_color_swap_is_seeded():
    assert S.corrupt_caption("a red circle", 11, kind="color") == "a green circle"
    assert S.corrupt_caption("a red circle", 11, kind="color") == S.corrupt_caption("a red circle", 11, kind="color")


def test_corruption_always_changes_tags(big_corpus):
    for i, ex in enumerate(big_corpus[:300]):
        bad = S.corrupt_caption(ex.caption, i)
        assert bad != ex.caption
        assert {w for w in bad.split() if w in S.TAGS} != ex.tags


def test_nothing_to_swap():
    with pytest.raises(ValueError, match="no swappable"):
        S.corrupt_caption("a photo of", 0)


# -- glyphs --------------------------------------------------------------------


def test_glyph_descriptors():
    vecs = [S.entity_descriptor(g) for g in range(8)]
    for v in vecs:
        assert v.shape == (16,)
        assert abs(np.linalg.norm(v) - 1) <= 1e-9
    assert S.entity_descriptor(3).tobytes() == vecs[3].tobytes()
    pairs = list(itertools.combinations(vecs, 2))
    assert len(pairs) == 28
    assert max(cosine(a, b) for a, b in pairs) <= 0.3


def test_unknown_glyph():
    with pytest.raises(KeyError):
        S.entity_descriptor(8)


def test_rendered_glyph_recovers_descriptor():
    scene = S.SceneSpec(objects=[("red", "circle", (20, 20))], relation=None, photo=True, glyph=5)
    img = S.render(scene, np.random.default_rng(0))
    v, norm = S.patch_descriptor(img)
    assert cosine(v / norm, S.entity_descriptor(5)) >= 0.99


def test_gallery_entries_cover_all_glyphs():
    entries = S.default_gallery_entries()
    assert [e["name"] for e in entries] == [name for name, _ in S.GLYPHS]
    assert Counter(e["kind"] for e in entries) == {"celebrity": 4, "landmark": 4}


# -- export --------------------------------------------------------------------


def test_corpus_round_trip(tmp_path):
    corpus = S.generate_corpus(9, 12, entity_rate=0.5)
    S.save_corpus(corpus, tmp_path)
    assert len(list(tmp_path.glob("*.cftn"))) == 12
    lines = (tmp_path / S.INDEX_FILE).read_text(encoding="utf-8").splitlines()
    assert len(lines) == 12 and all(len(line.split("\t")) == 4 for line in lines)
    back = S.load_corpus(tmp_path)
    for a, b in zip(corpus, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert (a.caption, a.tags, a.glyph) == (b.caption, b.tags, b.glyph)
