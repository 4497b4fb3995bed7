# SPDX-License-Identifier: Apache-2.0
"""Quantitative CT biomarkers and CVD risk fusion."""

from ._core import (
    BIOMARKER_NAMES,
    CtquantError,
    Mask,
    Model,
    Volume,
    agatston_weight,
    bootstrap_auc_ci,
    extract_all,
    generate_phantom,
    init_model,
    load_mask,
    load_model,
    load_volume,
    mcnemar_test,
    predict,
    predict_file,
    roc_auc,
    save_mask,
    save_model,
    save_volume,
    select_threshold,
    train,
    write_synthetic_cohort,
)

__version__ = "0.1.0"

__all__ = [
    "BIOMARKER_NAMES",
    "CtquantError",
    "Mask",
    "Model",
    "Volume",
    "agatston_weight",
    "bootstrap_auc_ci",
    "extract_all",
    "generate_phantom",
    "init_model",
    "load_mask",
    "load_model",
    "load_volume",
    "mcnemar_test",
    "predict",
    "predict_file",
    "roc_auc",
    "save_mask",
    "save_model",
    "save_volume",
    "select_threshold",
    "train",
    "write_synthetic_cohort",
]
