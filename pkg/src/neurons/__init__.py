"""Desk-scale fMRI-to-video reconstruction with decoupled task heads."""

from .aggregator import (ConditioningBundle, Reconstructor, apply_mask_condition,
                         interpolate_fps, reconstruct_video, rescale_mask)
from .brain import BrainModel, EmbeddingBundle, load_brain_model, train_brain_model
from .config import ExperimentConfig, config_hash, load_config
from .contrastive import MixState, bimixco_loss, clip_text_loss, mixco_mix, prior_loss
from .dataio import ClipDataset, FmriSample, VideoClip, load_dataset, save_dataset
from .decoupler import (DecouplerHeads, LossWeights, load_decoupler_heads,
                        schedule_weight, train_decoupler)
from .errors import (BackendError, ConfigError, DataFormatError, IntegrityError,
                     NeuronsError, ReconstructionError, ShapeError, StageError,
                     StateError, TrainingDiverged)
from .metrics import bleu_scores, clip_pcc, dice, nway_topk, psnr, ssim, verb_accuracy
from .pipeline import RunManifest, run_pipeline
from .report import MetricReport, emit_report, evaluate_pairs
from .synthetic import generate_synthetic_dataset
from .taxonomy import ConceptTaxonomy, default_taxonomy
from .tracks import ObjectTrack, discover_key_object, weighted_displacement

__version__ = "0.1.0"

__all__ = [
    "BackendError", "BrainModel", "ClipDataset", "ConceptTaxonomy", "ConditioningBundle",
    "ConfigError", "DataFormatError", "DecouplerHeads", "EmbeddingBundle",
    "ExperimentConfig", "FmriSample", "IntegrityError", "LossWeights", "MetricReport",
    "MixState", "NeuronsError", "ObjectTrack", "ReconstructionError", "Reconstructor",
    "RunManifest", "ShapeError", "StageError", "StateError", "TrainingDiverged",
    "VideoClip", "apply_mask_condition", "bimixco_loss", "bleu_scores", "clip_pcc",
    "clip_text_loss", "config_hash", "default_taxonomy", "dice", "discover_key_object",
    "emit_report", "evaluate_pairs", "generate_synthetic_dataset", "interpolate_fps",
    "load_brain_model", "load_config", "load_dataset", "load_decoupler_heads",
    "mixco_mix", "nway_topk", "prior_loss", "psnr", "reconstruct_video", "rescale_mask",
    "run_pipeline", "save_dataset", "schedule_weight", "ssim", "train_brain_model",
    "train_decoupler", "verb_accuracy", "weighted_displacement",
]
