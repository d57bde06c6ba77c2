"""Tag-conditioned maximum-entropy n-gram language model and beam decoder.

The score of candidate word ``w`` in a decoding state is a sum of weights:

* one per history suffix ``(h_{-k} .. h_{-1}, w)`` for ``k = 0..n``;
* ``tag_weights[w]`` when ``w`` is a tag not yet covered;
* ``end_gate`` when ``w`` is the end marker and every tag is covered.

Probabilities are the softmax of these scores over the output vocabulary
(content words plus the end marker; the start marker only pads histories).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted
from .tensor.serialize import load_checkpoint, save_checkpoint

BOS = "<s>"
EOS = "</s>"
TEMPLATE_VERSION = 1


def tokenize(text):
    return text.lower().split()


@dataclass(frozen=True)
class CaptionCandidate:
    words: tuple  # excludes the end marker
    lm_score: float  # natural-log probability including the end marker when ended
    covered_tags: frozenset
    ended: bool = True
    step_log_probs: tuple = field(default=(), compare=False, repr=False)

    @property
    def text(self):
        return " ".join(self.words)

    def __len__(self):
        return len(self.words)


@dataclass
class LanguageModel:
    vocabulary: tuple  # output words; last entry is EOS
    contexts: dict  # history suffix tuple -> row index into context_weights
    context_weights: np.ndarray  # (n_contexts, V)
    tag_weights: np.ndarray  # (V,)
    end_gate: float
    n: int = 3
    template_version: int = TEMPLATE_VERSION

    def __post_init__(self):
        self.vocabulary = tuple(self.vocabulary)
        if EOS not in self.vocabulary:
            raise ValueError("vocabulary must contain the end marker")
        self.word_index = {w: i for i, w in enumerate(self.vocabulary)}
        self.eos = self.word_index[EOS]
        weights = [self.context_weights, self.tag_weights, [self.end_gate]]
        if not all(np.all(np.isfinite(w)) for w in weights):
            raise ValueError("language model weights must be finite")

    @property
    def size(self):
        return len(self.vocabulary)

    def _history(self, history):
        history = [w.lower() for w in history]
        for w in history:
            if w != BOS and w not in self.word_index:
                raise KeyError(f"history word {w!r} not in vocabulary")
        return tuple([BOS] * self.n + history)[-self.n :] if self.n else ()

    def _tag_mask(self, remaining):
        mask = np.zeros(self.size)
        for t in remaining:
            i = self.word_index.get(t.lower())
            if i is not None and i != self.eos:
                mask[i] = 1.0
        return mask

    def scores(self, history, remaining_tags):
        hist = self._history(history)
        s = np.zeros(self.size)
        for k in range(self.n + 1):
            row = self.contexts.get(hist[len(hist) - k :])
            if row is not None:
                s += self.context_weights[row]
        s += self.tag_weights * self._tag_mask(remaining_tags)
        if not any(t.lower() in self.word_index for t in remaining_tags):
            s[self.eos] += self.end_gate
        return s

    def log_distribution(self, history, remaining_tags):
        s = self.scores(history, remaining_tags)
        s -= s.max()
        return s - math.log(np.exp(s).sum())

    def next_word_distribution(self, history, remaining_tags=frozenset()):
        """Probability vector over :attr:`vocabulary` for the next word."""
        return np.exp(self.log_distribution(history, remaining_tags))

    def score_sequence(self, words, tags, ended=True):
        """Total log-probability of ``words`` (plus the end marker if ``ended``)."""
        remaining = {t.lower() for t in tags}
        history = []
        total = 0.0
        steps = list(words) + ([EOS] if ended else [])
        for w in steps:
            w = w.lower()
            if w not in self.word_index:
                raise KeyError(f"word {w!r} not in vocabulary")
            total += self.log_distribution(history, remaining)[self.word_index[w]]
            remaining.discard(w)
            history.append(w)
        return float(total)

    # -- persistence -----------------------------------------------------

    def save(self, path):
        ordered = sorted(self.contexts, key=self.contexts.get)
        meta = {
            "kind": "caption-lm",
            "vocabulary": list(self.vocabulary),
            "n": self.n,
            "template_version": self.template_version,
            "contexts": [list(c) for c in ordered],
        }
        tensors = {
            "context_weights": self.context_weights,
            "tag_weights": self.tag_weights,
            "end_gate": np.array([self.end_gate]),
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        if meta.get("template_version") != TEMPLATE_VERSION:
            raise ValueError(f"{path}: unsupported feature template version {meta.get('template_version')}")
        return cls(
            vocabulary=tuple(meta["vocabulary"]),
            contexts={tuple(c): i for i, c in enumerate(meta["contexts"])},
            context_weights=tensors["context_weights"],
            tag_weights=tensors["tag_weights"],
            end_gate=float(tensors["end_gate"][0]),
            n=meta["n"],
        )


def next_word_distribution(lm, history, remaining_tags=frozenset()):
    return lm.next_word_distribution(history, remaining_tags)


# -- corpus files --------------------------------------------------------


def read_caption_corpus(path):
    """``caption<TAB>tag,tag`` lines -> ``(captions, tag_sets)``."""
    captions, tag_sets = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            caption, sep, tags = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected caption and tags separated by a tab")
            captions.append(caption)
            tag_sets.append(frozenset(t.strip().lower() for t in tags.split(",") if t.strip()))
    return captions, tag_sets


def write_caption_corpus(path, captions, tag_sets):
    with open(path, "w", encoding="utf-8") as fh:
        for caption, tags in zip(captions, tag_sets):
            fh.write(f"{caption}\t{','.join(sorted(tags))}\n")


# -- training ------------------------------------------------------------


@dataclass
class LMConfig:
    n: int = 3
    l2: float = 1e-4
    max_iter: int = 300
    tol: float = 1e-9


def _events(captions, tag_sets, n):
    for caption, tags in zip(captions, tag_sets):
        words = tokenize(caption) if isinstance(caption, str) else [w.lower() for w in caption]
        remaining = {t.lower() for t in tags}
        hist = [BOS] * n
        for w in words + [EOS]:
            yield tuple(hist[len(hist) - n :]) if n else (), frozenset(remaining), w
            remaining.discard(w)
            hist.append(w)


def train_lm(captions, tag_sets, config=None, log=None):
    """Fit by L-BFGS on mean per-word log-likelihood minus an L2 penalty.

    Returns ``(model, curve)``; ``curve[i]`` is the penalized mean
    log-likelihood after iteration ``i`` (index 0 is the all-zero start).
    """
    config = config or LMConfig()
    captions, tag_sets = list(captions), list(tag_sets)
    if not captions:
        raise ValueError("cannot train a language model on an empty corpus")
    if len(captions) != len(tag_sets):
        raise ValueError(f"{len(captions)} captions but {len(tag_sets)} tag sets")
    n = config.n
    events = list(_events(captions, tag_sets, n))
    words = sorted({w for _, _, w in events} - {EOS})
    vocab = tuple(words) + (EOS,)
    widx = {w: i for i, w in enumerate(vocab)}
    V = len(vocab)
    eos = widx[EOS]

    contexts = {}
    rows, cols = [], []
    for e, (hist, _, _) in enumerate(events):
        for k in range(n + 1):
            ctx = hist[len(hist) - k :]
            rows.append(e)
            cols.append(contexts.setdefault(ctx, len(contexts)))
    E, C = len(events), len(contexts)
    A = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(E, C))
    At = A.T.tocsr()
    tag_mask = np.zeros((E, V))
    empty = np.zeros(E)
    target = np.zeros(E, dtype=np.intp)
    for e, (_, remaining, w) in enumerate(events):
        for t in remaining:
            if t in widx and widx[t] != eos:
                tag_mask[e, widx[t]] = 1.0
        empty[e] = not any(t in widx for t in remaining)
        target[e] = widx[w]
    Y = np.zeros((E, V))
    Y[np.arange(E), target] = 1.0
    lam = config.l2

    def unpack(theta):
        return theta[: C * V].reshape(C, V), theta[C * V : C * V + V], theta[-1]

    def objective(theta):
        W, t, g = unpack(theta)
        s = A @ W + tag_mask * t
        s[:, eos] += g * empty
        s -= s.max(axis=1, keepdims=True)
        logz = np.log(np.exp(s).sum(axis=1))
        ll = (s[np.arange(E), target] - logz).mean()
        P = np.exp(s - logz[:, None])
        G = (Y - P) / E
        grad = np.concatenate([(At @ G).ravel(), (G * tag_mask).sum(0), [(G[:, eos] * empty).sum()]])
        penalized = ll - 0.5 * lam * theta @ theta
        return -penalized, -(grad - lam * theta)

    theta0 = np.zeros(C * V + V + 1)
    curve = [-objective(theta0)[0]]

    def record(xk):
        curve.append(-objective(xk)[0])
        if log:
            log(f"iter {len(curve) - 1} penalized log-likelihood {curve[-1]:.6f}")

    res = minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={"maxiter": config.max_iter, "ftol": config.tol, "gtol": 1e-8},
    )
    W, t, g = unpack(res.x)
    model = LanguageModel(vocab, contexts, W.copy(), t.copy(), float(g), n=n)
    return model, curve


# -- decoding ------------------------------------------------------------


def beam_search(lm, tags, beam_width=8, max_len=20):
    """Ranked caption candidates conditioned on ``tags``.

    ``max_len`` counts generated tokens including the end marker.  At each
    step the ``beam_width`` best expansions survive; those that emitted the
    end marker leave the beam as finished candidates.  Ties are broken by
    word sequence.  Returns candidates sorted by ``lm_score`` descending.
    """
    if beam_width < 1 or max_len < 1:
        raise ValueError("beam_width and max_len must be >= 1")
    tags = frozenset(t.lower() for t in tags)
    live = [((), 0.0, (), frozenset())]  # words, score, step log-probs, covered
    finished = []
    for step in range(max_len):
        pool = []
        for words, score, steps, covered in live:
            logp = lm.log_distribution(words, tags - covered)
            for i, w in enumerate(lm.vocabulary):
                pool.append((score + logp[i], words + (w,), steps + (logp[i],), covered))
        pool.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, words, steps, covered in pool[:beam_width]:
            if words[-1] == EOS:
                finished.append(CaptionCandidate(words[:-1], float(score), covered, True, steps))
            else:
                live.append((words, score, steps, covered | ({words[-1]} & tags)))
        if not live:
            break
    finished += [CaptionCandidate(w, float(s), c, False, st) for w, s, st, c in live]
    finished.sort(key=lambda c: (-c.lm_score, c.words))
    return finished


# -- estimator -----------------------------------------------------------


class CaptionLanguageModel(BaseEstimator):
    """Estimator wrapper: ``fit(captions, tag_sets)`` then decode with ``generate``."""

    def __init__(self, n=3, l2=1e-4, max_iter=300, beam_width=8, max_len=20, verbose=False):
        self.n = n
        self.l2 = l2
        self.max_iter = max_iter
        self.beam_width = beam_width
        self.max_len = max_len
        self.verbose = verbose

    def fit(self, captions, tag_sets):
        cfg = LMConfig(n=self.n, l2=self.l2, max_iter=self.max_iter)
        self.model_, self.log_likelihood_curve_ = train_lm(
            captions, tag_sets, cfg, log=print if self.verbose else None
        )
        return self

    @classmethod
    def from_model(cls, model, **params):
        est = cls(n=model.n, **params)
        est.model_ = model
        est.log_likelihood_curve_ = []
        return est

    def next_word_distribution(self, history, remaining_tags=frozenset()):
        check_is_fitted(self, "model_")
        return self.model_.next_word_distribution(history, remaining_tags)

    def generate(self, tags, beam_width=None, max_len=None):
        check_is_fitted(self, "model_")
        return beam_search(self.model_, tags, beam_width or self.beam_width, max_len or self.max_len)

    def log_likelihood(self, captions, tag_sets):
        """Mean per-token log-probability (end markers included)."""
        check_is_fitted(self, "model_")
        total, count = 0.0, 0
        for caption, tags in zip(captions, tag_sets):
            words = tokenize(caption)
            total += self.model_.score_sequence(words, tags)
            count += len(words) + 1
        return total / count

    def perplexity(self, captions, tag_sets):
        return math.exp(-self.log_likelihood(captions, tag_sets))

    def score(self, captions, tag_sets):
        return self.log_likelihood(captions, tag_sets)

    def save(self, path):
        check_is_fitted(self, "model_")
        self.model_.save(path)

    @classmethod
    def load(cls, path, **params):
        return cls.from_model(LanguageModel.load(path), **params)
