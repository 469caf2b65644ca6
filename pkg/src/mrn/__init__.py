"""Incremental multilingual glyph recognition: frozen per-language CTC
recognizers, a gated-MLP domain router, and soft-voting fusion over the
union label space, evaluated on procedurally generated scripts under
rehearsal-imbalanced incremental schedules."""

from .autograd import Tape, Tensor, grad_check
from .config import ExperimentConfig, default_config
from .glyphs import CharsetRegistry, NoiseConfig, ScriptSpec, TaskDataset, TextInstance
from .recognizer import RecognizerBranch, UnionCharset
from .rehearsal import RehearsalSet
from .router import RouterParams
from .trainer import (AccuracyMatrix, RunReport, run_baseline_sequential,
                      run_bound_joint, run_schedule)

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "CharsetRegistry", "ExperimentConfig", "NoiseConfig",
    "RecognizerBranch", "RehearsalSet", "RouterParams", "RunReport",
    "ScriptSpec", "Tape", "TaskDataset", "Tensor", "TextInstance",
    "UnionCharset", "default_config", "grad_check", "run_baseline_sequential",
    "run_bound_joint", "run_schedule",
]
