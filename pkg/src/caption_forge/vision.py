"""Residual-network multi-label concept detector."""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_images, check_is_fitted, tag_matrix
from .tensor import ops
from .tensor.autograd import Tape
from .tensor.ops import BatchNormParams, ConvParams, ShapeError
from .tensor.optim import sgd_step
from .tensor.serialize import load_checkpoint, save_checkpoint

DEFAULT_UNITS = ((16, 1), (32, 2), (64, 2), (64, 1))


@dataclass(frozen=True)
class TagVocabulary:
    tags: tuple
    source: str = "coco-style"

    def __post_init__(self):
        tags = tuple(self.tags)
        object.__setattr__(self, "tags", tags)
        if any(t != t.lower() or not t for t in tags):
            raise ValueError("tags must be non-empty lowercase strings")
        if len(set(tags)) != len(tags):
            dup = next(t for t in tags if tags.count(t) > 1)
            raise ValueError(f"duplicate tag {dup!r} in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tags)})

    def __len__(self):
        return len(self.tags)

    def __iter__(self):
        return iter(self.tags)

    def __contains__(self, tag):
        return tag in self._index

    def index(self, tag):
        return self._index[tag]

    @classmethod
    def from_file(cls, path, source="coco-style"):
        with open(path, encoding="utf-8") as fh:
            return cls(tuple(line.strip() for line in fh if line.strip()), source)

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(t + "\n" for t in self.tags)


@dataclass
class ConceptDetections:
    scores: np.ndarray
    vocabulary: TagVocabulary

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.vocabulary),):
            raise ShapeError(f"{self.scores.shape[0]} scores for {len(self.vocabulary)} tags")

    def as_dict(self):
        return dict(zip(self.vocabulary.tags, self.scores.tolist()))

    def above(self, threshold):
        """``[(tag, score)]`` with score >= threshold, highest first."""
        hits = [(t, float(s)) for t, s in zip(self.vocabulary.tags, self.scores) if s >= threshold]
        return sorted(hits, key=lambda ts: (-ts[1], ts[0]))


@dataclass
class ResidualUnit:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    shortcut: ConvParams = None  # None means identity

    def __post_init__(self):
        if self.shortcut is None:
            if self.conv2.out_channels != self.conv1.in_channels or self.conv1.stride * self.conv2.stride != 1:
                raise ShapeError("identity shortcut needs matching channels and unit stride")

    @property
    def in_channels(self):
        return self.conv1.in_channels

    @property
    def out_channels(self):
        return self.conv2.out_channels

    def output_hw(self, h, w):
        return self.conv2.output_hw(*self.conv1.output_hw(h, w))


@dataclass
class VisionNet:
    stem_conv: ConvParams
    stem_bn: BatchNormParams
    units: list
    head_weight: np.ndarray  # (final_channels, n_tags)
    head_bias: np.ndarray
    vocabulary: TagVocabulary
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        channels = self.stem_conv.out_channels
        for i, unit in enumerate(self.units):
            if unit.in_channels != channels:
                raise ShapeError(f"unit {i} expects {unit.in_channels} channels, previous stage gives {channels}")
            channels = unit.out_channels
        if self.head_weight.shape != (channels, len(self.vocabulary)):
            raise ShapeError(
                f"head weight {self.head_weight.shape} != ({channels}, {len(self.vocabulary)})"
            )

    @property
    def feature_dim(self):
        return self.head_weight.shape[0]

    def feature_hw(self, h, w):
        h, w = self.stem_conv.output_hw(h, w)
        for unit in self.units:
            h, w = unit.output_hw(h, w)
        return h, w

    def min_input_size(self):
        size = 1
        while min(self._stage_sizes(size, size)) < 1:
            size += 1
        return size

    def _stage_sizes(self, h, w):
        sizes = []
        h, w = self.stem_conv.output_hw(h, w)
        sizes.append(min(h, w))
        for unit in self.units:
            h, w = unit.conv1.output_hw(h, w)
            sizes.append(min(h, w))
            h, w = unit.conv2.output_hw(h, w)
            sizes.append(min(h, w))
        return sizes

    # -- parameter plumbing ----------------------------------------------

    def _modules(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for i, u in enumerate(self.units):
            yield f"units.{i}.conv1", u.conv1
            yield f"units.{i}.bn1", u.bn1
            yield f"units.{i}.conv2", u.conv2
            yield f"units.{i}.bn2", u.bn2
            if u.shortcut is not None:
                yield f"units.{i}.shortcut", u.shortcut

    def parameters(self):
        """Trainable arrays keyed by dotted name."""
        out = {}
        for prefix, mod in self._modules():
            fields = ("weight", "bias") if isinstance(mod, ConvParams) else ("gamma", "beta")
            for f in fields:
                out[f"{prefix}.{f}"] = getattr(mod, f)
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def set_parameters(self, params):
        for prefix, mod in self._modules():
            fields = ("weight", "bias") if isinstance(mod, ConvParams) else ("gamma", "beta")
            for f in fields:
                key = f"{prefix}.{f}"
                if key in params:
                    setattr(mod, f, params[key])
        self.head_weight = params.get("head.weight", self.head_weight)
        self.head_bias = params.get("head.bias", self.head_bias)

    def state_tensors(self):
        out = self.parameters()
        for prefix, mod in self._modules():
            if isinstance(mod, BatchNormParams):
                out[f"{prefix}.running_mean"] = mod.running_mean
                out[f"{prefix}.running_var"] = mod.running_var
        return out

    def save(self, path):
        meta = {
            "kind": "vision-net",
            "config": self.config,
            "vocabulary": list(self.vocabulary.tags),
            "source": self.vocabulary.source,
            "seed": self.seed,
        }
        save_checkpoint(path, self.state_tensors(), meta)

    @classmethod
    def load(cls, path):
        tensors, meta = load_checkpoint(path)
        vocab = TagVocabulary(tuple(meta["vocabulary"]), meta["source"])
        net = build_network(meta["config"], vocab, seed=meta["seed"])
        net.set_parameters(tensors)
        for prefix, mod in net._modules():
            if isinstance(mod, BatchNormParams):
                mod.running_mean = tensors[f"{prefix}.running_mean"]
                mod.running_var = tensors[f"{prefix}.running_var"]
        return net


# -- construction ----------------------------------------------------------


def default_config(**overrides):
    cfg = {
        "in_channels": 3,
        "image_size": 32,
        "stem_channels": 16,
        "stem_kernel": 3,
        "stem_stride": 2,
        "stem_padding": 0,
        "units": [list(u) for u in DEFAULT_UNITS],
    }
    cfg.update(overrides)
    cfg["units"] = [list(u) for u in cfg["units"]]
    return cfg


def _he_conv(rng, out_c, in_c, k, stride, padding):
    std = math.sqrt(2.0 / (in_c * k * k))
    return ConvParams(rng.normal(0.0, std, size=(out_c, in_c, k, k)), np.zeros(out_c), stride, padding)


def build_network(config, vocabulary, seed=0):
    """Seeded residual network.

    ``config["units"]`` lists ``(out_channels, stride)`` per residual unit;
    an empty list gives stem + head only.
    """
    cfg = default_config(**config)
    rng = np.random.default_rng(seed)
    k = cfg["stem_kernel"]
    stem_conv = _he_conv(rng, cfg["stem_channels"], cfg["in_channels"], k, cfg["stem_stride"], cfg["stem_padding"])
    stem_bn = BatchNormParams.identity(cfg["stem_channels"])
    size = cfg["image_size"]
    h = w = size
    h, w = stem_conv.output_hw(h, w)
    if min(h, w) < 1:
        raise ValueError(f"stem reduces a {size}x{size} image to {h}x{w}")
    units = []
    channels = cfg["stem_channels"]
    for i, (out_c, stride) in enumerate(cfg["units"]):
        conv1 = _he_conv(rng, out_c, channels, 3, stride, 1)
        conv2 = _he_conv(rng, out_c, out_c, 3, 1, 1)
        shortcut = None
        if stride != 1 or out_c != channels:
            shortcut = _he_conv(rng, out_c, channels, 1, stride, 0)
        unit = ResidualUnit(conv1, BatchNormParams.identity(out_c), conv2, BatchNormParams.identity(out_c), shortcut)
        h, w = unit.output_hw(h, w)
        if min(h, w) < 1:
            raise ValueError(
                f"unit {i} (out_channels={out_c}, stride={stride}) reduces a {size}x{size} image to {h}x{w}"
            )
        units.append(unit)
        channels = out_c
    head_w = rng.normal(0.0, 0.01, size=(channels, len(vocabulary)))
    return VisionNet(stem_conv, stem_bn, units, head_w, np.zeros(len(vocabulary)), vocabulary, cfg, seed)


# -- forward ---------------------------------------------------------------


class _Eager:
    """Tape stand-in that evaluates ops immediately and records nothing."""

    def leaf(self, value, name=None):
        return value

    def apply(self, op, *inputs, **attrs):
        return ops.OPS[op].forward(*inputs, **attrs)[0]


def _value(x):
    return getattr(x, "value", x)


def _conv(tape, x, conv, name):
    return tape.apply(
        "conv2d",
        x,
        tape.leaf(conv.weight, f"{name}.weight"),
        tape.leaf(conv.bias, f"{name}.bias"),
        stride=conv.stride,
        padding=conv.padding,
    )


def _bn(tape, x, bn, name, mode):
    return tape.apply(
        "batch_norm",
        x,
        tape.leaf(bn.gamma, f"{name}.gamma"),
        tape.leaf(bn.beta, f"{name}.beta"),
        params=bn,
        mode=mode,
    )


def _unit(tape, x, unit, name, mode):
    f = _conv(tape, x, unit.conv1, f"{name}.conv1")
    f = tape.apply("relu", _bn(tape, f, unit.bn1, f"{name}.bn1", mode))
    f = _bn(tape, _conv(tape, f, unit.conv2, f"{name}.conv2"), unit.bn2, f"{name}.bn2", mode)
    h = x if unit.shortcut is None else _conv(tape, x, unit.shortcut, f"{name}.shortcut")
    return tape.apply("relu", tape.apply("add", h, f))


def residual_unit_forward(x, unit, mode="infer"):
    """``relu(h(x) + F(x))`` with ``F = conv-bn-relu-conv-bn``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != unit.in_channels:
        raise ShapeError(f"unit expects (N, {unit.in_channels}, H, W) input, got {x.shape}")
    return _unit(_Eager(), x, unit, "unit", mode)


def _features(tape, net, x, mode):
    y = _conv(tape, x, net.stem_conv, "stem.conv")
    y = tape.apply("relu", _bn(tape, y, net.stem_bn, "stem.bn", mode))
    for i, unit in enumerate(net.units):
        y = _unit(tape, y, unit, f"units.{i}", mode)
    return tape.apply("global_avg_pool", y)


def _logits(tape, net, pooled):
    return tape.apply(
        "affine", pooled, tape.leaf(net.head_weight, "head.weight"), tape.leaf(net.head_bias, "head.bias")
    )


def _check_size(net, images):
    h, w = images.shape[2:]
    need = net.min_input_size()
    if min(h, w) < need:
        raise ValueError(f"image {h}x{w} is too small; minimum size is {need}x{need}")


def pooled_features(net, images):
    """Pooled final-stage channel vectors, shape (N, feature_dim)."""
    images = check_images(images, channels=net.stem_conv.in_channels)
    _check_size(net, images)
    return _features(_Eager(), net, images, "infer")


def predict_scores(net, images):
    """Per-tag sigmoid scores, shape (N, n_tags)."""
    return ops.sigmoid(ops.affine(pooled_features(net, images), net.head_weight, net.head_bias))


def detect_concepts(net, image):
    """Score one 3xHxW image of any size, square or not."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected a 3xHxW image, got shape {image.shape}")
    return ConceptDetections(predict_scores(net, image[None])[0], net.vocabulary)


def dual_detector(a, b):
    """Merge two detections over the union vocabulary, keeping the max on overlap."""
    merged = dict(a.as_dict())
    for tag, score in b.as_dict().items():
        merged[tag] = max(score, merged.get(tag, -np.inf))
    tags = tuple(a.vocabulary.tags) + tuple(t for t in b.vocabulary.tags if t not in a.vocabulary)
    source = a.vocabulary.source if a.vocabulary == b.vocabulary else "merged"
    return ConceptDetections(np.array([merged[t] for t in tags]), TagVocabulary(tags, source))


# -- training --------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 0.05
    batch_size: int = 32
    weight_decay: float = 1e-4
    momentum: float = 0.9
    min_steps: int = 300
    seed: int = 0


def training_loss(net, images, targets, mode="train"):
    """Mean per-tag BCE and its gradients, as ``(loss, grads)``."""
    tape = Tape()
    pooled = _features(tape, net, tape.leaf(images, "images"), mode)
    loss = tape.apply("bce_with_logits", _logits(tape, net, pooled), targets=targets)
    return float(loss.value), tape.backward(loss)


def dataset_loss(net, images, targets, batch_size=256):
    """Mean per-tag BCE over a dataset with running batch-norm statistics."""
    total = 0.0
    for start in range(0, len(images), batch_size):
        pooled = _features(_Eager(), net, images[start : start + batch_size], "infer")
        logits = ops.affine(pooled, net.head_weight, net.head_bias)
        total += ops.bce_with_logits_forward(logits, targets[start : start + batch_size])[0] * len(logits)
    return float(total / len(images))


def train_multilabel(net, images, tag_sets, config=None, log=None):
    """Fit ``net`` in place by minibatch SGD (heavy-ball momentum) on mean per-tag BCE.

    Returns ``(net, loss_curve)`` where ``loss_curve[e]`` is the mean BCE
    over the whole dataset after epoch ``e``, in inference mode.  Small datasets get extra epochs so at
    least ``config.min_steps`` updates happen.
    """
    config = config or TrainConfig()
    images = check_images(images, channels=net.stem_conv.in_channels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    targets = tag_matrix(tag_sets, net.vocabulary)
    if len(targets) != len(images):
        raise ValueError(f"{len(images)} images but {len(targets)} tag sets")
    n = len(images)
    steps_per_epoch = math.ceil(n / config.batch_size)
    epochs = max(config.epochs, math.ceil(config.min_steps / steps_per_epoch))
    total = epochs * steps_per_epoch
    rng = np.random.default_rng(config.seed)
    curve = []
    step = 0
    velocity = {k: np.zeros_like(v) for k, v in net.parameters().items()}
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grads = training_loss(net, images[idx], targets[idx])
            lr = 0.5 * config.learning_rate * (1 + math.cos(math.pi * step / total))
            for k in velocity:
                velocity[k] = config.momentum * velocity[k] + grads[k]
            net.set_parameters(sgd_step(net.parameters(), velocity, lr, config.weight_decay))
            step += 1
        curve.append(dataset_loss(net, images, targets))
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss {curve[-1]:.5f}")
    return net, curve


# -- evaluation ------------------------------------------------------------


def roc_auc(labels, scores):
    """Area under the ROC curve by trapezoidal integration over thresholds."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, np.cumsum(y)[last] / n_pos]
    fpr = np.r_[0.0, np.cumsum(~y)[last] / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def mean_tag_auc(targets, scores):
    """Mean ROC AUC over tags that have both classes present."""
    targets = np.asarray(targets)
    aucs = [
        roc_auc(targets[:, j], scores[:, j])
        for j in range(targets.shape[1])
        if 0 < targets[:, j].sum() < len(targets)
    ]
    return float(np.mean(aucs))


# -- estimator ---------------------------------------------------------------


class ConceptDetector(ClassifierMixin, BaseEstimator):
    """Residual-network multi-label tagger with a scikit-learn interface.

    ``fit`` takes images ``(N, 3, H, W)`` and either tag sets or an
    ``(N, n_tags)`` 0/1 matrix.  ``predict_proba`` returns independent
    per-tag sigmoid scores; rows do not sum to one.
    """

    def __init__(
        self,
        vocabulary=("red", "green", "blue", "yellow", "circle", "square", "triangle", "photo"),
        source="coco-style",
        units=DEFAULT_UNITS,
        stem_channels=16,
        image_size=32,
        epochs=15,
        batch_size=32,
        learning_rate=0.05,
        weight_decay=1e-4,
        min_steps=300,
        threshold=0.5,
        random_state=0,
        verbose=False,
    ):
        self.vocabulary = vocabulary
        self.source = source
        self.units = units
        self.stem_channels = stem_channels
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.min_steps = min_steps
        self.threshold = threshold
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y):
        vocab = TagVocabulary(tuple(self.vocabulary), self.source)
        cfg = default_config(units=self.units, stem_channels=self.stem_channels, image_size=self.image_size)
        net = build_network(cfg, vocab, seed=self.random_state)
        train_cfg = TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            min_steps=self.min_steps,
            seed=self.random_state,
        )
        self.net_, self.loss_curve_ = train_multilabel(net, X, y, train_cfg, log=print if self.verbose else None)
        self.classes_ = np.array(vocab.tags)
        return self

    @classmethod
    def from_network(cls, net, threshold=0.5):
        est = cls(vocabulary=net.vocabulary.tags, source=net.vocabulary.source, threshold=threshold)
        est.net_ = net
        est.loss_curve_ = []
        est.classes_ = np.array(net.vocabulary.tags)
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return predict_scores(self.net_, X)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(int)

    def transform(self, X):
        check_is_fitted(self, "net_")
        return pooled_features(self.net_, X)

    def detect(self, image):
        check_is_fitted(self, "net_")
        return detect_concepts(self.net_, image)

    def score(self, X, y):
        """Mean per-tag ROC AUC."""
        return mean_tag_auc(tag_matrix(y, self.net_.vocabulary), self.predict_proba(X))

    def save(self, path):
        check_is_fitted(self, "net_")
        self.net_.save(path)

    @classmethod
    def load(cls, path, threshold=0.5):
        return cls.from_network(VisionNet.load(path), threshold)
