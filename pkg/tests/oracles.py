"""Independent reference implementations used by the tests.

Everything here is written with explicit loops or textbook formulas and
shares no code with the package, so agreement is meaningful.
"""

import math

import numpy as np

from caption_forge.tensor import Tape, ops
from caption_forge.tensor.ops import BatchNormParams


def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * stride + di - padding
                                s = j * stride + dj - padding
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[ni, ci, r, s] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def avg_pool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for ni in range(n):
        for ci in range(c):
            total = 0.0
            for i in range(h):
                for j in range(w):
                    total += x[ni, ci, i, j]
            out[ni, ci] = total / (h * w)
    return out


def matmul_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def cosine(u, v):
    return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))


def rank_sum_auc(labels, scores):
    """Mann-Whitney U / (n_pos * n_neg) with midranks for ties."""
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = np.asarray(scores)[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    n_pos, n_neg = labels.sum(), (~labels).sum()
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


# -- finite differences --------------------------------------------------


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """Norm-wise relative error, floored so exactly-zero gradients compare as equal."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _unit_rows(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def gradient_case(op, rng):
    """Random instance of ``op``: returns (inputs, attrs, reduce_weights or None)."""
    if op == "conv2d":
        c, o = rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 2, 3]))
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = rng.integers(k + 1, 7), rng.integers(k + 1, 7)
        inputs = [rng.normal(size=(2, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)]
        return inputs, {"stride": stride, "padding": padding}, True
    if op.startswith("batch_norm"):
        mode = op.split(":")[1]
        c = int(rng.integers(1, 4))
        x = rng.normal(size=(3, c, int(rng.integers(1, 4)), int(rng.integers(1, 4)))) * 2 + 1
        params = BatchNormParams(
            np.ones(c), np.zeros(c), rng.normal(size=c), rng.uniform(0.5, 2, size=c)
        )
        return [x, rng.normal(size=c), rng.normal(size=c)], {"params": params, "mode": mode}, True
    if op in ("relu", "sigmoid", "tanh"):
        return [_away_from_zero(rng, (int(rng.integers(1, 4)), int(rng.integers(1, 6))))], {}, True
    if op == "add":
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        return [rng.normal(size=shape), rng.normal(size=shape)], {}, True
    if op == "global_avg_pool":
        return [rng.normal(size=(2, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 6))))], {}, True
    if op == "affine":
        n, d, k = (int(v) for v in rng.integers(1, 6, size=3))
        return [rng.normal(size=(n, d)), rng.normal(size=(d, k)), rng.normal(size=k)], {}, True
    if op == "l2_normalize":
        return [rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(2, 6))))], {}, True
    if op in ("bce_with_logits", "logistic_loss"):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 5))) if op == "bce_with_logits" else (int(rng.integers(2, 9)),)
        targets = rng.integers(0, 2, size=shape).astype(np.float64)
        return [rng.normal(size=shape) * 3], {"targets": targets}, False
    if op == "dmsm_softmax_loss":
        b, d, r = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        negatives = np.array([rng.choice([j for j in range(b) if j != i], size=r) for i in range(b)])
        inputs = [_unit_rows(rng, (b, d)), _unit_rows(rng, (b, d))]
        return inputs, {"negatives": negatives, "gamma": float(rng.uniform(0.5, 10))}, False
    raise KeyError(op)


GRADIENT_OPS = (
    "conv2d",
    "batch_norm:train",
    "batch_norm:infer",
    "relu",
    "sigmoid",
    "tanh",
    "add",
    "global_avg_pool",
    "affine",
    "l2_normalize",
    "bce_with_logits",
    "dmsm_softmax_loss",
    "logistic_loss",
)


def check_op_gradient(op, rng):
    """Max relative error between tape gradients and central differences for one instance."""
    inputs, attrs, needs_reduce = gradient_case(op, rng)
    name = op.split(":")[0]

    def forward():
        tape = Tape()
        leaves = [tape.leaf(v, name=f"in{i}") for i, v in enumerate(inputs)]
        out = tape.apply(name, *leaves, **attrs)
        return tape, out

    tape, out = forward()
    weights = rng.normal(size=out.value.shape) if needs_reduce else None

    def scalar():
        value = forward()[1].value
        return float((value * weights).sum()) if needs_reduce else float(value)

    grads = tape.backward(out, weights)
    return max(rel_error(grads[f"in{i}"], numeric_grad(scalar, v)) for i, v in enumerate(inputs))


# -- vision reference path -------------------------------------------------


def unit_by_hand(x, unit):
    f = ops.relu(ops.batch_norm(ops.conv2d(x, unit.conv1), unit.bn1, "infer"))
    f = ops.batch_norm(ops.conv2d(f, unit.conv2), unit.bn2, "infer")
    h = x if unit.shortcut is None else ops.conv2d(x, unit.shortcut)
    return ops.relu(h + f)


def feature_map_by_hand(net, image):
    """Final-stage feature map computed op by op, without the package's forward helpers."""
    y = ops.relu(ops.batch_norm(ops.conv2d(image[None], net.stem_conv), net.stem_bn, "infer"))
    for unit in net.units:
        y = unit_by_hand(y, unit)
    return y


def scores_by_hand(net, image):
    pooled = avg_pool_loops(feature_map_by_hand(net, image))
    logits = matmul_loops(pooled, net.head_weight) + net.head_bias
    return 1.0 / (1.0 + np.exp(-logits[0]))


# -- language model --------------------------------------------------------


def tiny_lm_corpus(seed, n_words=4, n_captions=30):
    """Random captions over ``n_words`` words (vocabulary n_words + end marker)."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(n_words)]
    captions, tag_sets = [], []
    for _ in range(n_captions):
        caption = list(rng.choice(words, size=int(rng.integers(1, 4))))
        captions.append(" ".join(caption))
        tag_sets.append(frozenset(w for w in caption if rng.random() < 0.5))
    return captions, tag_sets


def exhaustive_best(lm, tags, max_len):
    """Best (score, words) over every sequence of at most ``max_len`` tokens, by enumeration."""
    import itertools

    content = [w for w in lm.vocabulary if w != "</s>"]
    best = None
    for length in range(max_len + 1):
        for words in itertools.product(content, repeat=length):
            ended = length < max_len
            score = step_by_step_score(lm, words, tags, ended)
            key = (score, tuple(words))
            if best is None or score > best[0] or (score == best[0] and tuple(words) < best[1]):
                best = key
    return best


def step_by_step_score(lm, words, tags, ended=True):
    """Sum of log next-word probabilities, tracking remaining tags by exact match."""
    remaining = set(tags)
    history = []
    total = 0.0
    for w in list(words) + (["</s>"] if ended else []):
        p = lm.next_word_distribution(history, frozenset(remaining))
        total += math.log(p[lm.vocabulary.index(w)])
        remaining.discard(w)
        history.append(w)
    return total
