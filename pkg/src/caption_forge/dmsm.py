"""Two-tower multimodal embedding model for caption reranking.

Images enter as pooled vision-net channel vectors, captions as
letter-trigram counts.  Each tower is an affine/tanh stack ending in L2
normalization, so the cosine between towers is a plain dot product.
"""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_is_fitted, check_vector
from .language_model import tokenize
from .tensor import ops
from .tensor.autograd import Tape
from .tensor.ops import ShapeError
from .tensor.optim import sgd_step
from .tensor.serialize import load_checkpoint, save_checkpoint

BOUNDARY = "#"


def letter_trigrams(word):
    """``"cat"`` -> ``["#ca", "cat", "at#"]``."""
    padded = f"{BOUNDARY}{word}{BOUNDARY}"
    return [padded[i : i + 3] for i in range(len(padded) - 2)]


class TrigramFeaturizer(TransformerMixin, BaseEstimator):
    """Letter-trigram count vectors over an inventory fixed at ``fit`` time.

    Trigrams not in the inventory are dropped.
    """

    def __init__(self, inventory=None):
        self.inventory = inventory

    def fit(self, captions, y=None):
        if self.inventory is not None:
            grams = list(self.inventory)
        else:
            grams = sorted({g for c in captions for w in tokenize(c) for g in letter_trigrams(w)})
        self.inventory_ = tuple(grams)
        self.index_ = {g: i for i, g in enumerate(self.inventory_)}
        return self

    def counts(self, caption):
        words = tokenize(caption) if isinstance(caption, str) else [w.lower() for w in caption]
        return Counter(g for w in words for g in letter_trigrams(w))

    def transform(self, captions):
        check_is_fitted(self, "inventory_")
        out = np.zeros((len(captions), len(self.inventory_)))
        for r, caption in enumerate(captions):
            for g, c in self.counts(caption).items():
                j = self.index_.get(g)
                if j is not None:
                    out[r, j] = c
        return out


@dataclass(frozen=True)
class DmsmEmbedding:
    vector: np.ndarray
    modality: str  # "image" or "caption"

    @property
    def dim(self):
        return self.vector.shape[0]


@dataclass
class DmsmModel:
    image_layers: list  # [(weight (in, out), bias (out,))]
    caption_layers: list
    trigrams: tuple
    gamma: float = 10.0

    def __post_init__(self):
        d_img = self.image_layers[-1][0].shape[1]
        d_cap = self.caption_layers[-1][0].shape[1]
        if d_img != d_cap:
            raise ShapeError(f"tower output dims differ: image {d_img}, caption {d_cap}")
        if self.caption_layers[0][0].shape[0] != len(self.trigrams):
            raise ShapeError("caption tower input does not match the trigram inventory")
        self.featurizer = TrigramFeaturizer(self.trigrams).fit([])

    @property
    def dim(self):
        return self.image_layers[-1][0].shape[1]

    @property
    def image_input_dim(self):
        return self.image_layers[0][0].shape[0]

    def tensors(self):
        out = {}
        for tower, layers in (("image", self.image_layers), ("caption", self.caption_layers)):
            for i, (w, b) in enumerate(layers):
                out[f"{tower}.{i}.weight"] = w
                out[f"{tower}.{i}.bias"] = b
        return out

    def save(self, path):
        meta = {
            "kind": "dmsm",
            "trigrams": list(self.trigrams),
            "gamma": self.gamma,
            "image_depth": len(self.image_layers),
            "caption_depth": len(self.caption_layers),
            "dim": self.dim,
        }
        save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path):
        t, meta = load_checkpoint(path)

        def tower(name, depth):
            return [(t[f"{name}.{i}.weight"], t[f"{name}.{i}.bias"]) for i in range(depth)]

        return cls(
            tower("image", meta["image_depth"]),
            tower("caption", meta["caption_depth"]),
            tuple(meta["trigrams"]),
            meta["gamma"],
        )


def _tower(tape, x, layers, name):
    for i, (w, b) in enumerate(layers):
        x = tape.apply("affine", x, tape.leaf(w, f"{name}.{i}.weight"), tape.leaf(b, f"{name}.{i}.bias"))
        x = tape.apply("tanh", x)
    return x


def _tower_eval(x, layers):
    for w, b in layers:
        x = np.tanh(ops.affine(x, w, b))
    return x


def _normalize_rows(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"degenerate {what} embedding: tower output is the zero vector")
    return x / norms


def embed_images(model, features):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.image_input_dim:
        raise ShapeError(f"image features have dim {features.shape[1]}, tower expects {model.image_input_dim}")
    return _normalize_rows(_tower_eval(features, model.image_layers), "image")


def embed_captions(model, captions):
    x = model.featurizer.transform(captions)
    empty = np.nonzero(x.sum(axis=1) == 0)[0]
    if empty.size:
        raise ValueError(f"caption {captions[empty[0]]!r} has no in-inventory letter trigrams")
    return _normalize_rows(_tower_eval(x, model.caption_layers), "caption")


def embed_image(model, vision_features):
    v = check_vector(vision_features, model.image_input_dim, "vision features")
    return DmsmEmbedding(embed_images(model, v[None])[0], "image")


def embed_caption(model, words):
    caption = words if isinstance(words, str) else " ".join(words)
    if not tokenize(caption):
        raise ValueError("caption is empty")
    return DmsmEmbedding(embed_captions(model, [caption])[0], "caption")


def dmsm_score(image_emb, caption_emb):
    """Cosine similarity of two unit embeddings."""
    a = getattr(image_emb, "vector", image_emb)
    b = getattr(caption_emb, "vector", caption_emb)
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"embedding dims differ: {np.shape(a)} vs {np.shape(b)}")
    return float(np.dot(a, b))


@dataclass(frozen=True)
class RankedCandidate:
    candidate: object
    dmsm_score: float
    image_embedding: DmsmEmbedding
    caption_embedding: DmsmEmbedding


def rank_candidates(model, vision_features, candidates):
    """Stable sort of caption candidates by DMSM score, highest first."""
    if not candidates:
        raise ValueError("no candidates to rank")
    img = embed_image(model, vision_features)
    texts = [" ".join(c.words) if hasattr(c, "words") else c for c in candidates]
    caps = embed_captions(model, texts)
    ranked = [
        RankedCandidate(c, float(caps[i] @ img.vector), img, DmsmEmbedding(caps[i], "caption"))
        for i, c in enumerate(candidates)
    ]
    return sorted(ranked, key=lambda r: -r.dmsm_score)


# -- training --------------------------------------------------------------


@dataclass
class DmsmConfig:
    dim: int = 1000
    hidden: int = 300
    negatives: int = 4
    gamma: float = 10.0
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_model(image_dim, trigrams, config):
    rng = np.random.default_rng(config.seed)
    dims = [config.hidden, config.dim]
    image_layers, caption_layers = [], []
    prev = image_dim
    for d in dims:
        image_layers.append(_glorot(rng, prev, d))
        prev = d
    prev = len(trigrams)
    for d in dims:
        caption_layers.append(_glorot(rng, prev, d))
        prev = d
    return DmsmModel(image_layers, caption_layers, tuple(trigrams), config.gamma)


def sample_negatives(rng, captions, r):
    """(B, R) indices of in-batch captions differing from each row's own caption."""
    captions = np.asarray(captions, dtype=object)
    out = np.empty((len(captions), r), dtype=np.intp)
    for i, c in enumerate(captions):
        pool = np.nonzero(captions != c)[0]
        if pool.size == 0:
            raise ValueError("batch has no caption distinct from the positive")
        out[i] = rng.choice(pool, size=r, replace=pool.size < r)
    return out


def dmsm_loss(model, image_x, caption_x, negatives, gamma=None):
    """``(loss, grads)`` of the softmax ranking loss for one batch."""
    tape = Tape()
    img = tape.apply("l2_normalize", _tower(tape, tape.leaf(image_x, "image_x"), model.image_layers, "image"))
    cap = tape.apply(
        "l2_normalize", _tower(tape, tape.leaf(caption_x, "caption_x"), model.caption_layers, "caption")
    )
    g = model.gamma if gamma is None else gamma
    loss = tape.apply("dmsm_softmax_loss", img, cap, negatives=negatives, gamma=g)
    return float(loss.value), tape.backward(loss)


def _corpus_loss(model, image_x, text_x, batches):
    total = 0.0
    count = 0
    for idx, neg in batches:
        img = _normalize_rows(_tower_eval(image_x[idx], model.image_layers), "image")
        cap = _normalize_rows(_tower_eval(text_x[idx], model.caption_layers), "caption")
        loss, _ = ops.dmsm_softmax_loss_forward(img, cap, neg, model.gamma)
        total += loss * len(idx)
        count += len(idx)
    return total / count


def _set_tensors(model, params):
    for tower, layers in (("image", model.image_layers), ("caption", model.caption_layers)):
        for i in range(len(layers)):
            layers[i] = (params[f"{tower}.{i}.weight"], params[f"{tower}.{i}.bias"])


def train_dmsm(image_features, captions, config=None, log=None):
    """Fit both towers by minibatch SGD (momentum, cosine-decayed rate) on the softmax ranking loss.

    Image features are standardized during training and the scaling is
    folded into the first image layer afterwards.  Returns
    ``(model, loss_curve)``; ``loss_curve[e]`` is the loss after epoch ``e``
    over the whole corpus, scored against one fixed seeded set of negatives
    so successive epochs measure the same objective.
    """
    config = config or DmsmConfig()
    image_features = np.asarray(image_features, dtype=np.float64)
    captions = list(captions)
    if len(image_features) != len(captions):
        raise ValueError(f"{len(image_features)} images but {len(captions)} captions")
    distinct = len(set(captions))
    if distinct < config.negatives + 1:
        raise ValueError(
            f"{config.negatives} negatives per positive need at least {config.negatives + 1} "
            f"distinct captions, corpus has {distinct}"
        )
    featurizer = TrigramFeaturizer().fit(captions)
    text_x = featurizer.transform(captions)
    mean = image_features.mean(axis=0)
    scale = image_features.std(axis=0)
    scale[scale == 0] = 1.0
    image_x = (image_features - mean) / scale

    model = init_model(image_x.shape[1], featurizer.inventory_, config)
    rng = np.random.default_rng(config.seed + 1)
    params = model.tensors()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(captions)
    cap_arr = np.asarray(captions, dtype=object)
    eval_rng = np.random.default_rng(config.seed + 2)
    eval_batches = [
        (idx, sample_negatives(eval_rng, cap_arr[idx], config.negatives))
        for idx in (np.arange(s, min(s + config.batch_size, n)) for s in range(0, n, config.batch_size))
        if len(set(cap_arr[idx])) > 1
    ]
    curve = []
    total = config.epochs * math.ceil(n / config.batch_size)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(set(cap_arr[idx])) < 2:
                continue
            neg = sample_negatives(rng, cap_arr[idx], config.negatives)
            _, grads = dmsm_loss(model, image_x[idx], text_x[idx], neg)
            for k in velocity:
                velocity[k] = config.momentum * velocity[k] + grads[k]
            lr = 0.5 * config.learning_rate * (1 + math.cos(math.pi * step / total))
            params = sgd_step(params, velocity, lr, config.weight_decay)
            step += 1
            _set_tensors(model, params)
        curve.append(_corpus_loss(model, image_x, text_x, eval_batches))
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} loss {curve[-1]:.5f}")

    w0, b0 = model.image_layers[0]
    model.image_layers[0] = (w0 / scale[:, None], b0 - (mean / scale) @ w0)
    return model, curve


def retrieval_accuracy(model, image_features, captions, n_distractors=9, seed=0):
    """Fraction of images whose true caption outscores ``n_distractors`` random others.

    Distractors are drawn from the other captions in ``captions`` whose text
    differs from the true one.  Ties count as misses.
    """
    rng = np.random.default_rng(seed)
    img = embed_images(model, image_features)
    cap = embed_captions(model, list(captions))
    cap_arr = np.asarray(captions, dtype=object)
    hits = 0
    for i in range(len(captions)):
        pool = np.nonzero(cap_arr != cap_arr[i])[0]
        d = rng.choice(pool, size=n_distractors, replace=False)
        true = img[i] @ cap[i]
        hits += bool(np.all(true > cap[d] @ img[i]))
    return hits / len(captions)


class DmsmRanker(BaseEstimator):
    """``fit(vision_features, captions)``; embeds, scores and reranks captions."""

    def __init__(
        self,
        dim=1000,
        hidden=300,
        negatives=4,
        gamma=10.0,
        epochs=20,
        batch_size=64,
        learning_rate=0.05,
        momentum=0.9,
        random_state=0,
        verbose=False,
    ):
        self.dim = dim
        self.hidden = hidden
        self.negatives = negatives
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, captions):
        cfg = DmsmConfig(
            dim=self.dim,
            hidden=self.hidden,
            negatives=self.negatives,
            gamma=self.gamma,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            seed=self.random_state,
        )
        self.model_, self.loss_curve_ = train_dmsm(X, captions, cfg, log=print if self.verbose else None)
        return self

    @classmethod
    def from_model(cls, model):
        est = cls(dim=model.dim, gamma=model.gamma)
        est.model_ = model
        est.loss_curve_ = []
        return est

    def transform(self, X):
        """Unit image embeddings, shape (N, dim)."""
        check_is_fitted(self, "model_")
        return embed_images(self.model_, X)

    def embed_captions(self, captions):
        check_is_fitted(self, "model_")
        return embed_captions(self.model_, list(captions))

    def rank(self, vision_features, candidates):
        check_is_fitted(self, "model_")
        return rank_candidates(self.model_, vision_features, candidates)

    def score(self, X, captions):
        """Top-1 retrieval accuracy against nine seeded distractors."""
        check_is_fitted(self, "model_")
        return retrieval_accuracy(self.model_, X, captions)

    def save(self, path):
        check_is_fitted(self, "model_")
        self.model_.save(path)

    @classmethod
    def load(cls, path):
        return cls.from_model(DmsmModel.load(path))
