"""Constants for the mmagg video classification pipeline."""

from __future__ import annotations

from typing import Final

DOMAIN: Final = "mmagg"
VERSION: Final = "0.1.0"

# Feature file (binary, little-endian)
FEATURE_MAGIC: Final = b"MMF1"
FEATURE_DTYPE_RAW: Final = 0  # float32 payload
FEATURE_DTYPE_QUANTIZED: Final = 1  # uint8 codes + clip bound

# Checkpoint tensor table (binary, little-endian)
CHECKPOINT_MAGIC: Final = b"MMCK"
CHECKPOINT_VERSION: Final = 1
TENSOR_DTYPE_F32: Final = 0
TENSOR_DTYPE_F64: Final = 1
TENSOR_DTYPE_U8: Final = 2

# Preprocessing
DEFAULT_CLIP_BOUND: Final = 2.5
DEFAULT_LEVELS: Final = 256
DEFAULT_WHITEN_EPS: Final = 1e-6
DEFAULT_PCA_MAX_FRAMES: Final = 100_000
ORTHONORMAL_TOLERANCE: Final = 1e-8

# Sampling
SEGMENT_SECONDS: Final = 600.0
DEFAULT_SAMPLE_SIZE: Final = 50
DEFAULT_REPEATS: Final = 5
DEFAULT_SEED: Final = 42

# VLAD
DEFAULT_NORM_EPS: Final = 1e-12

# Head
DEFAULT_HIDDEN_SIZE: Final = 1024
DEFAULT_EXPERTS: Final = 2
PROB_CLAMP: Final = 1e-7

# Optimizer / training
DEFAULT_LR: Final = 1e-3
DEFAULT_BETA1: Final = 0.9
DEFAULT_BETA2: Final = 0.999
DEFAULT_ADAM_EPS: Final = 1e-8
DEFAULT_BATCH_SIZE: Final = 64
DEFAULT_EPOCHS: Final = 10
DEFAULT_THREADS: Final = 1

# Gradient check
GRADCHECK_STEP: Final = 1e-5
GRADCHECK_TOLERANCE: Final = 1e-4
GRADCHECK_FLOOR: Final = 1e-6  # denominator floor for relative error on vanishing gradients
# gradcheck model when neither flags nor a config file say otherwise
GRADCHECK_MODEL: Final = {"hidden_size": 8, "experts": 2, "sample_size": 6}
GRADCHECK_CLUSTERS: Final = 3

# Introspection
DEFAULT_TIMELINE_STEP_S: Final = 10.0

# Dataset splits
SPLIT_TRAIN: Final = "train"
SPLIT_VAL: Final = "val"
SPLIT_TEST: Final = "test"
SPLITS: Final = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)
LABELED_SPLITS: Final = (SPLIT_TRAIN, SPLIT_VAL)

# Reference modality presets: (fps, clusters, pca dim or None when unpublished)
MODALITY_PRESETS: Final = {
    "inresv2": (1.0, 80, 1024),
    "senet": (1.0, 80, 1024),
    "scene": (1.0, 40, None),
    "food": (1.0, 40, None),
    "i3d_rgb": (0.3125, 80, None),
    "i3d_flow": (0.3125, 80, None),
    "audio": (0.9, 40, 128),
}

# Predictions CSV
PREDICTION_COLUMNS: Final = ("video_id", "class_index", "score")
CLASS_AP_COLUMNS: Final = ("class_index", "class_name", "ap", "num_positives")
