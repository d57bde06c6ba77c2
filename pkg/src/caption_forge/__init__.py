"""Image captioning from detected concepts, built on a small numpy tensor core."""

from .confidence import ConfidenceEstimator, ConfidenceFeatures, assemble_features, binarize_label, confidence_score
from .dmsm import DmsmRanker, TrigramFeaturizer, letter_trigrams, rank_candidates
from .entity import EntityGallery, EntityMatch, build_gallery, enrich_caption, recognize
from .language_model import CaptionCandidate, CaptionLanguageModel, beam_search
from .pipeline import CaptionPipeline, CaptionResult, PipelineConfig, PipelineStageError, bench, train_all
from .vision import ConceptDetections, ConceptDetector, TagVocabulary, detect_concepts, dual_detector

__version__ = "0.1.0"

__all__ = [
    "CaptionCandidate",
    "CaptionLanguageModel",
    "CaptionPipeline",
    "CaptionResult",
    "ConceptDetections",
    "ConceptDetector",
    "ConfidenceEstimator",
    "ConfidenceFeatures",
    "DmsmRanker",
    "EntityGallery",
    "EntityMatch",
    "PipelineConfig",
    "PipelineStageError",
    "TagVocabulary",
    "TrigramFeaturizer",
    "assemble_features",
    "beam_search",
    "bench",
    "binarize_label",
    "build_gallery",
    "confidence_score",
    "detect_concepts",
    "dual_detector",
    "enrich_caption",
    "letter_trigrams",
    "rank_candidates",
    "recognize",
    "train_all",
]
