"""Hyperspectral small-target anomaly detection with a distilled student network.

The pipeline: a small target filter (global Mahalanobis distance, bilateral
smoothing, median mask) weights a reconstruction loss, and anomaly scores are
read off the gradient of that loss with respect to the input cube.
"""

from .detector import (
    MODES,
    DetectorConfig,
    ScoreMap,
    ablation_detect,
    export_scoremap,
    input_gradient,
    reconstruction_error,
    saliency_map,
    stad_detect,
)
from .evaluation import (
    EvalReport,
    EvaluationError,
    DepReport,
    auc_bs,
    auc_df,
    auc_ftau,
    dep_score,
    dependency_report,
    evaluate_image,
    evaluate_set,
    mdep,
    roc_curve,
)
from .hsi_io import (
    CubeFormatError,
    HyperCube,
    load_cube,
    load_labels,
    normalize,
    save_cube,
    save_labels,
    select_bands,
    synth_scene,
)
from .networks import (
    ModelParams,
    StudentSpec,
    TeacherSpec,
    init_params,
    load_checkpoint,
    save_checkpoint,
    student_forward,
    teacher_forward,
)
from .pipeline import RunConfig, run_desk_scale
from .stf import NumericalError, StfConfig, bilateral_filter, mahalanobis_map, median_mask, rx_detector, small_target_filter
from .tensor import DimensionError, GradientError, GradTape, Tensor, backward
from .training import TrainConfig, TrainLog, distill_loss, teacher_loss, train_student, train_teacher

__all__ = [
    "MODES",
    "DetectorConfig",
    "ScoreMap",
    "ablation_detect",
    "export_scoremap",
    "input_gradient",
    "reconstruction_error",
    "saliency_map",
    "stad_detect",
    "EvalReport",
    "EvaluationError",
    "DepReport",
    "auc_bs",
    "auc_df",
    "auc_ftau",
    "dep_score",
    "dependency_report",
    "evaluate_image",
    "evaluate_set",
    "mdep",
    "roc_curve",
    "CubeFormatError",
    "HyperCube",
    "load_cube",
    "load_labels",
    "normalize",
    "save_cube",
    "save_labels",
    "select_bands",
    "synth_scene",
    "ModelParams",
    "StudentSpec",
    "TeacherSpec",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "student_forward",
    "teacher_forward",
    "RunConfig",
    "run_desk_scale",
    "NumericalError",
    "StfConfig",
    "bilateral_filter",
    "mahalanobis_map",
    "median_mask",
    "rx_detector",
    "small_target_filter",
    "DimensionError",
    "GradientError",
    "GradTape",
    "Tensor",
    "backward",
    "TrainConfig",
    "TrainLog",
    "distill_loss",
    "teacher_loss",
    "train_student",
    "train_teacher",
]

__version__ = "0.1.0"
