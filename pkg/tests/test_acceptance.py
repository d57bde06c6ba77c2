"""Acceptance criteria 1-11.

Each test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.
"""

import base64
import http.client
import json
import math
import time
import zlib

import numpy as np
import pytest

from caption_forge import synthetic
from caption_forge.cli import main
from caption_forge.confidence import QUALITY_LABELS, assemble_features, binarize_label, train_confidence
from caption_forge.dmsm import (
    DmsmConfig,
    dmsm_loss,
    embed_captions,
    embed_images,
    init_model,
    retrieval_accuracy,
    sample_negatives,
)
from caption_forge.language_model import beam_search, train_lm
from caption_forge.pipeline import STAGES, bench, vision_features
from caption_forge.service import encode_png, serve
from caption_forge.tensor import ops
from caption_forge.tensor.ops import BatchNormParams, ConvParams
from caption_forge.vision import (
    ConceptDetector,
    ResidualUnit,
    TagVocabulary,
    build_network,
    default_config,
    detect_concepts,
    mean_tag_auc,
    pooled_features,
    residual_unit_forward,
)
from caption_forge._validation import tag_matrix

from oracles import (
    GRADIENT_OPS,
    avg_pool_loops,
    check_op_gradient,
    conv2d_loops,
    exhaustive_best,
    feature_map_by_hand,
    matmul_loops,
    scores_by_hand,
    tiny_lm_corpus,
)

criterion = pytest.mark.criterion


@criterion(1, "conv2d / global_avg_pool / affine equal loop oracles (100 instances, 1e-10)")
def test_oracle_equivalence():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        c, o, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(int(rng.integers(1, 3)), c, int(rng.integers(k, 8)), int(rng.integers(k, 8))))
        w, b = rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        got = ops.conv2d(x, ConvParams(w, b, stride, pad))
        worst = max(worst, np.abs(got - conv2d_loops(x, w, b, stride, pad)).max())

        m = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 8)), int(rng.integers(1, 8))))
        worst = max(worst, np.abs(ops.global_avg_pool(m) - avg_pool_loops(m)).max())

        n, d, kk = (int(v) for v in rng.integers(1, 8, size=3))
        a, wt, bias = rng.normal(size=(n, d)), rng.normal(size=(d, kk)), rng.normal(size=kk)
        worst = max(worst, np.abs(ops.affine(a, wt, bias) - (matmul_loops(a, wt) + bias)).max())
    assert worst <= 1e-10


@criterion(2, "every op and loss matches central differences (20 instances each, 1e-4, < 1 min)")
def test_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for op in GRADIENT_OPS:
        rng = np.random.default_rng(zlib.crc32(op.encode()))
        worst[op] = max(check_op_gradient(op, rng) for _ in range(20))
    elapsed = time.perf_counter() - start
    assert {"bce_with_logits", "dmsm_softmax_loss", "logistic_loss"} <= set(worst)
    assert max(worst.values()) <= 1e-4, worst
    assert elapsed < 60, elapsed


@criterion(3, "zeroed residual branch is exactly relu(input) (50 inputs)")
def test_residual_identity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = int(rng.integers(1, 6))
        zero = lambda: ConvParams(np.zeros((c, c, 3, 3)), np.zeros(c), 1, 1)  # noqa: E731
        unit = ResidualUnit(zero(), BatchNormParams.identity(c), zero(), BatchNormParams.identity(c))
        x = rng.normal(size=(int(rng.integers(1, 3)), c, int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        assert np.array_equal(residual_unit_forward(x, unit), ops.relu(x))


@criterion(4, "fully-convolutional detect_concepts: non-square, 32x32 reference, 4x7 pooling")
def test_fully_convolutional():
    vocab = synthetic.TAGS
    net = build_network(default_config(), TagVocabulary(vocab), seed=4)
    rng = np.random.default_rng(4)
    square = rng.random((3, 32, 32))
    assert np.abs(detect_concepts(net, square).scores - scores_by_hand(net, square)).max() <= 1e-10

    wide = rng.random((3, 32, 56))
    fmap = feature_map_by_hand(net, wide)
    assert fmap.shape[2:] == (4, 7)
    assert np.abs(pooled_features(net, wide) - avg_pool_loops(fmap)).max() <= 1e-10
    scores = detect_concepts(net, wide).scores
    assert scores.shape == (len(vocab),) and np.all((scores > 0) & (scores < 1))

    m = rng.normal(size=(1, 5, 4, 7))
    by_hand = [sum(m[0, c, i, j] for i in range(4) for j in range(7)) / 28 for c in range(5)]
    assert np.abs(ops.global_avg_pool(m)[0] - by_hand).max() <= 1e-12


@criterion(5, "vision training: held-out mean tag AUC >= 0.95, loss falls, <= 10 min")
def test_vision_training(trained):
    aucs = []
    for name, est in trained.detectors.items():
        assert est.loss_curve_[-1] < est.loss_curve_[0], name
        vocab = est.net_.vocabulary
        X = np.stack([ex.image for ex in trained.test])
        targets = tag_matrix([ex.tags & set(vocab.tags) for ex in trained.test], vocab)
        aucs.append(mean_tag_auc(targets, est.predict_proba(X)))
    assert isinstance(trained.detectors["vision_coco"], ConceptDetector)
    assert np.mean(aucs) >= 0.95, aucs
    assert trained.timings["vision"] <= 600, trained.timings


@criterion(6, "beam width >= 5^4 equals exhaustive search on 10 tiny models; monotone in width")
def test_beam_optimality():
    for seed in range(10):
        captions, tags = tiny_lm_corpus(100 + seed)
        model, _ = train_lm(captions, tags)
        assert len(model.vocabulary) <= 5
        rng = np.random.default_rng(seed)
        content = [w for w in model.vocabulary if w != "</s>"]
        cond = set(rng.choice(content, size=int(rng.integers(0, 3)), replace=False))
        top = beam_search(model, cond, beam_width=5**4, max_len=4)[0]
        score, words = exhaustive_best(model, cond, 4)
        assert top.words == words and abs(top.lm_score - score) <= 1e-9
        tops = [beam_search(model, cond, beam_width=k, max_len=4)[0].lm_score for k in (1, 2, 4, 8)]
        assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))


@criterion(7, "DMSM: top-1 retrieval vs 9 distractors >= 80%, unit-norm embeddings, gamma=0 loss = log(R+1)")
def test_dmsm_retrieval(trained):
    model = trained.pipeline.dmsm
    feats = vision_features(trained.config, trained.test)
    captions = [ex.caption for ex in trained.test]
    assert retrieval_accuracy(model, feats, captions, n_distractors=9, seed=0) >= 0.8
    for emb in (embed_images(model, feats), embed_captions(model, captions)):
        assert np.abs(np.linalg.norm(emb, axis=1) - 1).max() <= 1e-9

    fresh = init_model(feats.shape[1], model.trigrams, DmsmConfig(seed=7))
    rng = np.random.default_rng(7)
    x_cap = fresh.featurizer.transform(captions[:32])
    for r in (1, 4, 9):
        loss, _ = dmsm_loss(fresh, feats[:32], x_cap, sample_negatives(rng, captions[:32], r), gamma=0.0)
        assert abs(loss - math.log(r + 1)) <= 1e-9


@criterion(8, "confidence: 2D+5 features (2005 at D=1000), separable toy 100%, total binarization")
def test_confidence_contract():
    rng = np.random.default_rng(8)
    vecs = [v / np.linalg.norm(v) for v in rng.normal(size=(2, 1000))]
    f = assemble_features(vecs[0], vecs[1], -4.0, "a red circle", {"red"}, 0.3)
    assert f.to_vector().shape == (2005,)
    X = np.array([np.full(2005, 1.0), np.full(2005, -1.0)])
    model, _ = train_confidence(X, ["good", "bad"])
    assert list((model.decision_function(X) >= 0).astype(int)) == [1, 0]
    assert [binarize_label(label) for label in QUALITY_LABELS] == [1, 1, 0, 0]


@criterion(9, "end-to-end: >= 18/20 captions carry all tag words, entity names appear, deterministic")
def test_end_to_end(trained):
    pipeline = trained.pipeline
    plain = [ex for ex in trained.test if ex.glyph is None][:20]
    covered = sum(ex.tags <= set(pipeline.caption(ex.image).caption.split()) for ex in plain)
    assert covered >= 18, covered

    with_glyph = [ex for ex in trained.test if ex.glyph is not None][:20]
    for ex in with_glyph:
        name = synthetic.GLYPHS[ex.glyph][0]
        result = pipeline.caption(ex.image)
        assert name in result.caption, (name, result.caption)

    for ex in plain[:5] + with_glyph[:5]:
        assert pipeline.caption(ex.image).without_latencies() == pipeline.caption(ex.image).without_latencies()


def _schema_ok(body):
    assert isinstance(body["caption"], str) and body["caption"]
    assert 0 < body["confidence"] < 1
    assert all(isinstance(t, str) and 0 <= s <= 1 for t, s in body["tags"])
    assert all(set(m) == {"name", "kind", "similarity", "matched"} and m["matched"] for m in body["entities"])
    assert isinstance(body["candidates_considered"], int) and body["candidates_considered"] >= 1
    assert set(body["stage_latencies"]) == set(STAGES)
    assert all(v >= 0 for v in body["stage_latencies"].values())
    assert isinstance(body["low_confidence_fallback_used"], bool)


@criterion(10, "service: POST PNG returns a full CaptionResult; CLI and service agree")
def test_service(trained, tmp_path, capsys):
    server = serve(trained.pipeline, "127.0.0.1", 0, block=False)
    try:
        host, port = server.server_address[:2]
        png = encode_png(trained.test[0].image)
        conn = http.client.HTTPConnection(host, port, timeout=30)
        conn.request("POST", "/v1/caption", body=png, headers={"Content-Type": "image/png"})
        resp = conn.getresponse()
        assert resp.status == 200
        http_body = json.loads(resp.read())
        conn.close()
        _schema_ok(http_body)

        conn = http.client.HTTPConnection(host, port, timeout=30)
        payload = json.dumps({"image_base64": base64.b64encode(png).decode()})
        conn.request("POST", "/v1/caption", body=payload, headers={"Content-Type": "application/json"})
        json_body = json.loads(conn.getresponse().read())
        conn.close()
    finally:
        server.shutdown()
        server.server_close()

    (tmp_path / "img.png").write_bytes(png)
    assert main(["--config", trained.config_path, "caption", str(tmp_path / "img.png")]) == 0
    cli_body = json.loads(capsys.readouterr().out)
    for body in (http_body, json_body, cli_body):
        body.pop("stage_latencies")
    assert cli_body == http_body == json_body


@criterion(11, "bench: per-stage p50/p95, p50 <= p95, end-to-end p50 under the 50 ms budget")
def test_latency(trained):
    report = bench(trained.pipeline, n_images=50, warmup=5, single_thread=True)
    rows = dict(report["stages"], end_to_end=report["end_to_end"])
    assert set(report["stages"]) == set(STAGES)
    for name, row in rows.items():
        assert row["n"] == 50
        assert row["p50"] <= row["p95"], name
    assert report["budget_ms"] == 50.0
    assert report["end_to_end"]["p50"] < report["budget_ms"], report["end_to_end"]
