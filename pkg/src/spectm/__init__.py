"""Physics-informed targeted masking for self-supervised pretraining on
hyperspectral reflectance spectra, with a frozen-encoder downstream
microcystin regressor and the full evaluation harness around them.
"""

__version__ = "0.1.0"

from .core import (BandTable, Dataset, DiagnosticSet, DiagnosticSpec, Sample,
                   Tokenization, ValidationReport, default_band_table,
                   default_tokenization, load_band_table, load_dataset_csv,
                   load_token_layout, resolve_diagnostic_set, save_dataset_csv,
                   validate_dataset)
from .errors import ConfigError, DataError, NumericError, SpecTMError
from .evaluation import (EvalReport, KNNRegressor, RidgeRegressor, RidgeWeights,
                         ablation_suite, default_boundary, interpolate_bands,
                         knn_regress, label_efficiency, logo_cv, metrics,
                         reconstruction_benchmark, ridge_fit, ridge_predict,
                         temporal_split)
from .indices import (IndexDefinition, default_index_set, evaluate_index,
                      index_vector, load_index_set)
from .masking import (MaskVector, RandomContiguousMasker, TargetedMasker,
                      apply_mask, random_contiguous_mask, targeted_mask)
from .model import (CHECKPOINT_MAGIC, ModelConfig, ModelState,
                    add_downstream_head, init_model, load_checkpoint,
                    param_count, save_checkpoint)
from .numerics import (LrSchedule, OptimizerState, Parameter, Tensor,
                       adamw_step, cosine_warmup_lr, grad_check, zero_grads)
from .synthgen import (SceneConfig, SceneDynamics, ToxinParams,
                       baseline_spectrum, microcystin_from_state,
                       reflectance_forward, simulate_scene)
from .training import (EarlyStopper, FinetuneConfig, LossWeights,
                       MicrocystinRegressor, PretrainConfig, SpecTMPretrainer,
                       aux_features, cls_features, extract_features, finetune,
                       masked_mse, predict_mc, predict_mc_log, pretrain,
                       split_groups, ssl_loss, stratified_val_split)

__all__ = [
    "__version__",
    "BandTable", "Dataset", "DiagnosticSet", "DiagnosticSpec", "Sample",
    "Tokenization", "ValidationReport", "default_band_table",
    "default_tokenization", "load_band_table", "load_dataset_csv",
    "load_token_layout", "resolve_diagnostic_set", "save_dataset_csv",
    "validate_dataset",
    "ConfigError", "DataError", "NumericError", "SpecTMError",
    "EvalReport", "KNNRegressor", "RidgeRegressor", "RidgeWeights",
    "ablation_suite", "default_boundary", "interpolate_bands", "knn_regress",
    "label_efficiency", "logo_cv", "metrics", "reconstruction_benchmark",
    "ridge_fit", "ridge_predict", "temporal_split",
    "IndexDefinition", "default_index_set", "evaluate_index", "index_vector",
    "load_index_set",
    "MaskVector", "RandomContiguousMasker", "TargetedMasker", "apply_mask",
    "random_contiguous_mask", "targeted_mask",
    "CHECKPOINT_MAGIC", "ModelConfig", "ModelState", "add_downstream_head",
    "init_model", "load_checkpoint", "param_count", "save_checkpoint",
    "LrSchedule", "OptimizerState", "Parameter", "Tensor", "adamw_step",
    "cosine_warmup_lr", "grad_check", "zero_grads",
    "SceneConfig", "SceneDynamics", "ToxinParams", "baseline_spectrum",
    "microcystin_from_state", "reflectance_forward", "simulate_scene",
    "EarlyStopper", "FinetuneConfig", "LossWeights", "MicrocystinRegressor",
    "PretrainConfig", "SpecTMPretrainer", "aux_features", "cls_features",
    "extract_features", "finetune", "masked_mse", "predict_mc",
    "predict_mc_log", "pretrain", "split_groups", "ssl_loss",
    "stratified_val_split",
]
