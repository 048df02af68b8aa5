"""Predict procedure progress, total and remaining duration from 1 Hz multimodal streams."""

from procdur.datamodel import Frame, ProcedureRecord, load_dataset, save_dataset
from procdur.estimator import (
    FusionConfig,
    Model,
    PredictionPoint,
    duration_from_progress,
    load_checkpoint,
    open_session,
    predict_record,
    progress_label,
    save_checkpoint,
    train,
)
from procdur.evalbench import run_eval
from procdur.synthgen import SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "Frame",
    "FusionConfig",
    "Model",
    "PredictionPoint",
    "ProcedureRecord",
    "SynthSpec",
    "duration_from_progress",
    "generate",
    "load_checkpoint",
    "load_dataset",
    "open_session",
    "predict_record",
    "progress_label",
    "run_eval",
    "save_checkpoint",
    "save_dataset",
    "train",
]
