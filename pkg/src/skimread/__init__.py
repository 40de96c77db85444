"""Two-branch (skim + close-read) video representation learning for
text-to-video retrieval."""

from .config import Config, desk_profile, paper_profile
from .corpus import (
    Batch,
    Caption,
    ConceptVocabulary,
    CorpusSplit,
    FrameFeatureSequence,
    Vocabulary,
    batch_iter,
    build_concept_vocabulary,
    build_vocabulary,
    concept_targets,
    load_captions,
    load_frame_features,
    make_synthetic_corpus,
    write_captions,
    write_frame_features,
)
from .model import RetrievalModel
from .pipeline import build_model, load_corpus, run_ablation, train_run
from .trainer import gradient_check, load_checkpoint, restore_model, save_checkpoint, train

__all__ = [
    "Batch",
    "Caption",
    "ConceptVocabulary",
    "Config",
    "CorpusSplit",
    "FrameFeatureSequence",
    "RetrievalModel",
    "Vocabulary",
    "batch_iter",
    "build_concept_vocabulary",
    "build_model",
    "build_vocabulary",
    "concept_targets",
    "desk_profile",
    "gradient_check",
    "load_captions",
    "load_checkpoint",
    "load_corpus",
    "load_frame_features",
    "make_synthetic_corpus",
    "paper_profile",
    "restore_model",
    "run_ablation",
    "save_checkpoint",
    "train",
    "train_run",
    "write_captions",
    "write_frame_features",
]

__version__ = "0.1.0"
