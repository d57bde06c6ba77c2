import math

import numpy as np
import pytest

from caption_forge import synthetic
from caption_forge.language_model import (
    EOS,
    CaptionLanguageModel,
    LanguageModel,
    LMConfig,
    beam_search,
    read_caption_corpus,
    train_lm,
    write_caption_corpus,
)

from oracles import exhaustive_best, step_by_step_score, tiny_lm_corpus


@pytest.fixture(scope="module")
def corpus():
    return synthetic.split_corpus()


@pytest.fixture(scope="module")
def lm(corpus):
    train, _ = corpus
    model, curve = train_lm([ex.caption for ex in train], [ex.tags for ex in train])
    return model, curve


def _zero_lm():
    vocab = ("a", "b", "c", EOS)
    return LanguageModel(vocab, {(): 0}, np.zeros((1, 4)), np.zeros(4), 0.0)


# -- distribution -----------------------------------------------------------


def test_zero_weights_uniform():
    np.testing.assert_array_equal(_zero_lm().next_word_distribution(["a"], {"b"}), np.full(4, 0.25))


def test_distribution_is_valid_everywhere(lm):
    model, _ = lm
    rng = np.random.default_rng(0)
    words = [w for w in model.vocabulary if w != EOS]
    for _ in range(200):
        hist = list(rng.choice(words, size=int(rng.integers(0, 5))))
        tags = set(rng.choice(synthetic.TAGS, size=int(rng.integers(0, 4))))
        p = model.next_word_distribution(hist, tags)
        assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9


def test_unknown_history_word(lm):
    with pytest.raises(KeyError, match="zebra"):
        lm[0].next_word_distribution(["a", "zebra"], set())


def test_red_circle_continuation(lm, corpus):
    model, _ = lm
    p = model.next_word_distribution(["a", "red"], {"circle"})
    assert model.vocabulary[int(np.argmax(p))] == "circle"
    # the corpus only ever follows "a red" with a shape noun
    follows = set()
    for ex in corpus[0]:
        words = ex.caption.split()
        follows |= {words[i + 2] for i in range(len(words) - 2) if words[i : i + 2] == ["a", "red"]}
    assert follows <= set(synthetic.SHAPES) and "circle" in follows


# -- training ----------------------------------------------------------------


def test_curve_non_decreasing(lm):
    curve = np.array(lm[1])
    assert np.all(np.diff(curve) >= -1e-12)
    assert curve[-1] > curve[0]


def test_empty_corpus():
    with pytest.raises(ValueError, match="empty"):
        train_lm([], [])


def test_memorizes_single_caption():
    model, _ = train_lm(["a red circle"] * 20, [{"red", "circle"}] * 20)
    remaining, hist = {"red", "circle"}, []
    for w in ["a", "red", "circle", EOS]:
        p = model.next_word_distribution(hist, remaining)
        assert p[model.vocabulary.index(w)] >= 0.9
        remaining.discard(w)
        hist.append(w)


def test_huge_regularization_gives_uniform():
    model, _ = train_lm(["a red circle", "a blue square"], [{"red"}, {"blue"}], LMConfig(l2=1e6))
    p = model.next_word_distribution(["a"], {"red"})
    np.testing.assert_allclose(p, 1 / len(p), atol=1e-5)


def test_held_out_perplexity_near_generator_entropy(lm, corpus):
    _, test = corpus
    est = CaptionLanguageModel.from_model(lm[0])
    entropy, tokens = synthetic.caption_entropy()
    baseline = math.exp(entropy / tokens)
    assert est.perplexity([ex.caption for ex in test], [ex.tags for ex in test]) <= 1.5 * baseline


# -- beam search ---------------------------------------------------------------


def test_width_one_is_greedy(lm):
    model, _ = lm
    tags = {"blue", "square", "photo"}
    words, remaining = [], set(tags)
    while len(words) < 20:
        w = model.vocabulary[int(np.argmax(model.next_word_distribution(words, remaining)))]
        if w == EOS:
            break
        words.append(w)
        remaining.discard(w)
    assert beam_search(model, tags, beam_width=1)[0].words == tuple(words)


@pytest.mark.parametrize("seed", range(3))
def test_wide_beam_is_exhaustive(seed):
    captions, tags = tiny_lm_corpus(seed)
    model, _ = train_lm(captions, tags)
    assert len(model.vocabulary) == 5
    cond = {"w0", "w2"}
    top = beam_search(model, cond, beam_width=5**4, max_len=4)[0]
    score, words = exhaustive_best(model, cond, 4)
    assert top.words == words
    assert abs(top.lm_score - score) <= 1e-9


def test_candidate_invariants(lm):
    model, _ = lm
    tags = {"green", "triangle", "photo"}
    cands = beam_search(model, tags, beam_width=8)
    assert [c.lm_score for c in cands] == sorted((c.lm_score for c in cands), reverse=True)
    for c in cands:
        assert c.lm_score <= 0
        assert c.covered_tags == set(c.words) & tags
        assert abs(c.lm_score - step_by_step_score(model, c.words, tags, c.ended)) <= 1e-9
        assert c.ended or len(c.words) == 20


def test_wider_beam_never_worse(lm):
    model, _ = lm
    rng = np.random.default_rng(1)
    for _ in range(15):
        tags = set(rng.choice(synthetic.TAGS, size=int(rng.integers(0, 5)), replace=False))
        tops = [beam_search(model, tags, beam_width=k)[0].lm_score for k in (1, 2, 4, 8)]
        assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))


def test_red_circle_top3_cover_both(lm):
    cands = beam_search(lm[0], {"red", "circle"}, beam_width=8)
    assert all({"red", "circle"} <= c.covered_tags for c in cands[:3])


def test_empty_tags_allowed(lm):
    assert beam_search(lm[0], set(), beam_width=4)


def test_beam_argument_errors(lm):
    with pytest.raises(ValueError):
        beam_search(lm[0], set(), beam_width=0)


# -- persistence -------------------------------------------------------------


def test_model_round_trip(lm, tmp_path):
    model, _ = lm
    model.save(tmp_path / "lm.cfck")
    back = LanguageModel.load(tmp_path / "lm.cfck")
    p, q = model.next_word_distribution(["a"], {"red"}), back.next_word_distribution(["a"], {"red"})
    assert p.tobytes() == q.tobytes()


def test_corpus_file_round_trip(tmp_path):
    path = tmp_path / "c.tsv"
    write_caption_corpus(path, ["a red circle", "a photo of a blue square"], [{"red", "circle"}, {"photo", "blue", "square"}])
    caps, tags = read_caption_corpus(path)
    assert caps == ["a red circle", "a photo of a blue square"]
    assert tags[1] == {"photo", "blue", "square"}
    (tmp_path / "bad.tsv").write_text("no tab here\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        read_caption_corpus(tmp_path / "bad.tsv")
