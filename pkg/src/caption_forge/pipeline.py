"""Vision -> language model -> DMSM rerank -> entities -> confidence."""

import hashlib
import json
import os
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import synthetic
from .confidence import ConfidenceEstimator, ConfidenceModel, assemble_features, confidence_score
from .dmsm import DmsmModel, DmsmRanker, embed_caption, embed_image, rank_candidates
from .entity import build_gallery, enrich_caption, gallery_from_records, recognize, save_gallery
from .language_model import CaptionLanguageModel, LanguageModel, beam_search, tokenize
from .tensor import ops
from .vision import ConceptDetections, ConceptDetector, VisionNet, dual_detector, pooled_features

STAGES = ("vision", "language_model", "dmsm", "entity", "confidence")
CONFIG_ENV = "CAPTION_FORGE_CONFIG"
DEFAULT_CONFIG_PATH = "caption_forge.json"
MODEL_FILES = ("vision_coco", "vision_web", "lm", "dmsm", "confidence", "gallery")


class PipelineStageError(RuntimeError):
    def __init__(self, stage, error):
        super().__init__(f"{stage} stage failed: {error}")
        self.stage = stage
        self.error = error


@dataclass
class PipelineConfig:
    vision_coco: str = "vision_coco.cfck"
    vision_web: str = "vision_web.cfck"
    lm: str = "lm.cfck"
    dmsm: str = "dmsm.cfck"
    confidence: str = "confidence.cfck"
    gallery: str = "gallery.json"
    tag_threshold: float = 0.5
    beam_width: int = 8
    candidate_count: int = 5
    max_len: int = 20
    entity_threshold: float = 0.8
    entity_min_contrast: float = 0.5
    confidence_threshold: float = 0.3
    dim: int = 1000
    latency_budget_ms: float = 50.0
    max_body_bytes: int = 8 * 1024 * 1024
    base_dir: str = field(default="", compare=False)

    def __post_init__(self):
        for name in ("tag_threshold", "entity_threshold", "confidence_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.candidate_count < 1:
            raise ValueError(f"candidate_count must be >= 1, got {self.candidate_count}")

    def path(self, name):
        p = getattr(self, name)
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def resolve(cls, path=None):
        """Config from ``path``, else ``$CAPTION_FORGE_CONFIG``, else the default file name."""
        path = path or os.environ.get(CONFIG_ENV) or DEFAULT_CONFIG_PATH
        if os.path.exists(path):
            return cls.load(path)
        return cls(base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass
class CaptionResult:
    caption: str
    confidence: float
    tags: list  # [(tag, score)]
    entities: list  # matched EntityMatch only
    candidates_considered: int
    stage_latencies: dict
    low_confidence_fallback_used: bool

    def to_json(self):
        return {
            "caption": self.caption,
            "confidence": self.confidence,
            "tags": [[t, s] for t, s in self.tags],
            "entities": [m.to_json() for m in self.entities],
            "candidates_considered": self.candidates_considered,
            "stage_latencies": dict(self.stage_latencies),
            "low_confidence_fallback_used": self.low_confidence_fallback_used,
        }

    def without_latencies(self):
        d = self.to_json()
        d.pop("stage_latencies")
        return d


def _file_id(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


class CaptionPipeline:
    """Frozen set of models; :meth:`caption` is read-only and thread-safe."""

    def __init__(self, vision_a, vision_b, lm, dmsm, confidence, gallery, config=None, versions=None):
        self.vision_a = vision_a
        self.vision_b = vision_b
        self.lm = lm
        self.dmsm = dmsm
        self.confidence = confidence
        self.gallery = gallery
        self.config = config or PipelineConfig()
        self.versions = versions or {}

    @classmethod
    def from_config(cls, config):
        versions = {name: _file_id(config.path(name)) for name in MODEL_FILES}
        return cls(
            VisionNet.load(config.path("vision_coco")),
            VisionNet.load(config.path("vision_web")),
            LanguageModel.load(config.path("lm")),
            DmsmModel.load(config.path("dmsm")),
            ConfidenceModel.load(config.path("confidence")),
            build_gallery(config.path("gallery")),
            config,
            versions,
        )

    # -- stages ------------------------------------------------------------

    def detect(self, image):
        """Merged detections and the concatenated pooled features of both detectors."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise ValueError(f"expected a 3xHxW image, got shape {image.shape}")
        feats, dets = [], []
        for net in (self.vision_a, self.vision_b):
            pooled = pooled_features(net, image[None])
            scores = ops.sigmoid(ops.affine(pooled, net.head_weight, net.head_bias))[0]
            feats.append(pooled[0])
            dets.append(ConceptDetections(scores, net.vocabulary))
        return dual_detector(*dets), np.concatenate(feats)

    def candidates(self, tags):
        found = beam_search(self.lm, tags, self.config.beam_width, self.config.max_len)
        return [c for c in found if c.words][: self.config.candidate_count]

    def entity_probe(self, image):
        v, norm = synthetic.patch_descriptor(image)
        if norm < self.config.entity_min_contrast:
            return None
        return v / norm

    def caption(self, image):
        cfg = self.config
        lat = {}
        stage = "vision"
        try:
            t = time.perf_counter()
            detections, features = self.detect(image)
            tags = detections.above(cfg.tag_threshold)
            tag_set = frozenset(t for t, _ in tags)
            lat[stage] = (time.perf_counter() - t) * 1e3

            stage = "language_model"
            t = time.perf_counter()
            cands = self.candidates(tag_set)
            if not cands:
                raise ValueError("language model produced no non-empty candidate")
            lat[stage] = (time.perf_counter() - t) * 1e3

            stage = "dmsm"
            t = time.perf_counter()
            best = rank_candidates(self.dmsm, features, cands)[0]
            lat[stage] = (time.perf_counter() - t) * 1e3

            stage = "entity"
            t = time.perf_counter()
            probe = self.entity_probe(image)
            matches = [] if probe is None else recognize(self.gallery, probe, cfg.entity_threshold)
            matched = [m for m in matches if m.matched]
            words = enrich_caption(list(best.candidate.words), matched)
            lat[stage] = (time.perf_counter() - t) * 1e3

            stage = "confidence"
            t = time.perf_counter()
            feats = assemble_features(
                best.image_embedding,
                best.caption_embedding,
                best.candidate.lm_score,
                words,
                best.candidate.covered_tags,
                best.dmsm_score,
            )
            conf = confidence_score(self.confidence, feats)
            fallback = conf < cfg.confidence_threshold
            text = " ".join(words)
            if fallback:
                text = f"maybe {text}"
            lat[stage] = (time.perf_counter() - t) * 1e3
        except PipelineStageError:
            raise
        except Exception as exc:
            raise PipelineStageError(stage, exc) from exc
        return CaptionResult(text, conf, tags, matched, len(cands), lat, fallback)

    def health(self):
        return {"status": "ok", "models": dict(self.versions), "stages": list(STAGES)}


# -- training ----------------------------------------------------------------


def _images(examples):
    return np.stack([ex.image for ex in examples])


def train_vision_stage(examples, config, seed=0, log=None, **params):
    """Train and save both detectors: colors/photo ("coco-style") and shapes/photo ("web-style")."""
    X = _images(examples)
    out = {}
    for name, vocab, source, offset in (
        ("vision_coco", synthetic.COCO_STYLE_TAGS, "coco-style", 0),
        ("vision_web", synthetic.WEB_STYLE_TAGS, "web-style", 1),
    ):
        tags = [ex.tags & set(vocab) for ex in examples]
        est = ConceptDetector(vocabulary=vocab, source=source, random_state=seed + offset, **params)
        est.fit(X, tags)
        est.save(config.path(name))
        if log:
            log(f"{name}: loss {est.loss_curve_[0]:.4f} -> {est.loss_curve_[-1]:.4f}")
        out[name] = est
    return out


def train_lm_stage(examples, config, log=None, **params):
    est = CaptionLanguageModel(**params).fit([ex.caption for ex in examples], [ex.tags for ex in examples])
    est.save(config.path("lm"))
    if log:
        log(f"lm: penalized log-likelihood {est.log_likelihood_curve_[0]:.4f} -> {est.log_likelihood_curve_[-1]:.4f}")
    return est


def vision_features(config, examples):
    feats = [pooled_features(VisionNet.load(config.path(n)), _images(examples)) for n in ("vision_coco", "vision_web")]
    return np.concatenate(feats, axis=1)


def train_dmsm_stage(examples, config, seed=0, log=None, **params):
    params.setdefault("dim", config.dim)
    est = DmsmRanker(random_state=seed, **params).fit(vision_features(config, examples), [ex.caption for ex in examples])
    est.save(config.path("dmsm"))
    if log:
        log(f"dmsm: loss {est.loss_curve_[0]:.4f} -> {est.loss_curve_[-1]:.4f}")
    return est


def confidence_examples(pipeline, examples, seed=0):
    """Synthetic quality-labelled feature vectors.

    Per image: the ground-truth caption is ``excellent``; the reranked top
    beam candidate is ``good`` if its tag words equal the ground truth, else
    ``bad``; a corrupted ground-truth caption is ``embarrassing``.
    """
    X, labels = [], []
    for i, ex in enumerate(examples):
        detections, features = pipeline.detect(ex.image)
        tag_set = frozenset(t for t, _ in detections.above(pipeline.config.tag_threshold))
        img = embed_image(pipeline.dmsm, features)
        top = rank_candidates(pipeline.dmsm, features, pipeline.candidates(tag_set))[0].candidate
        top_tags = frozenset(top.words) & set(synthetic.TAGS)
        options = [
            (tokenize(ex.caption), "excellent"),
            (list(top.words), "good" if top_tags == ex.tags else "bad"),
            (tokenize(synthetic.corrupt_caption(ex.caption, seed + i)), "embarrassing"),
        ]
        for words, label in options:
            cap = embed_caption(pipeline.dmsm, words)
            X.append(
                assemble_features(
                    img,
                    cap,
                    pipeline.lm.score_sequence(words, tag_set),
                    words,
                    tag_set & set(words),
                    float(img.vector @ cap.vector),
                )
            )
            labels.append(label)
    return X, labels


def train_confidence_stage(examples, config, seed=0, log=None, **params):
    pipeline = CaptionPipeline(
        VisionNet.load(config.path("vision_coco")),
        VisionNet.load(config.path("vision_web")),
        LanguageModel.load(config.path("lm")),
        DmsmModel.load(config.path("dmsm")),
        None,
        None,
        config,
    )
    X, labels = confidence_examples(pipeline, examples, seed)
    est = ConfidenceEstimator(**params).fit(X, labels)
    est.save(config.path("confidence"))
    if log:
        log(f"confidence: {len(X)} examples, final loss {est.final_loss_:.4f}, train acc {est.score(X, labels):.3f}")
    return est


def write_gallery(config):
    save_gallery(gallery_from_records(synthetic.default_gallery_entries()), config.path("gallery"))


def train_all(examples, config, seed=0, confidence_examples_n=600, log=None):
    """Train every model on ``examples`` and write checkpoints where ``config`` points."""
    os.makedirs(config.base_dir or ".", exist_ok=True)
    train_vision_stage(examples, config, seed, log)
    train_lm_stage(examples, config, log)
    train_dmsm_stage(examples, config, seed, log)
    train_confidence_stage(examples[:confidence_examples_n], config, seed, log)
    write_gallery(config)
    return CaptionPipeline.from_config(config)


# -- latency -------------------------------------------------------------------


def bench(pipeline, n_images=50, warmup=5, seed=123, single_thread=True):
    """Per-stage and end-to-end p50/p95 latency (ms) over seeded synthetic images."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    images = [ex.image for ex in synthetic.generate_corpus(seed, n_images + warmup)]
    samples = {s: [] for s in STAGES + ("end_to_end",)}
    limit = threadpool_limits(limits=1) if single_thread else nullcontext()
    with limit:
        for i, image in enumerate(images):
            t = time.perf_counter()
            result = pipeline.caption(image)
            total = (time.perf_counter() - t) * 1e3
            if i < warmup:
                continue
            for s in STAGES:
                samples[s].append(result.stage_latencies[s])
            samples["end_to_end"].append(total)
    report = {
        name: {"p50": float(np.percentile(v, 50)), "p95": float(np.percentile(v, 95)), "n": len(v)}
        for name, v in samples.items()
    }
    budget = pipeline.config.latency_budget_ms
    return {
        "stages": {s: report[s] for s in STAGES},
        "end_to_end": report["end_to_end"],
        "budget_ms": budget,
        "within_budget": report["end_to_end"]["p50"] < budget,
        "single_thread": single_thread,
        "n_images": n_images,
        "warmup": warmup,
    }
