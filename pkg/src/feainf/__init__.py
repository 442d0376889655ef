"""Feature-based interpretable lesion classification with adaptive dynamic-mask saliency."""

import os as _os

# FEAINF_THREADS caps BLAS parallelism; it only takes effect before numpy loads.
if "FEAINF_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["FEAINF_THREADS"])

from .encoder import EncoderConfig, encode, init_params  # noqa: E402
from .inference import PredictionOutcome, mean_pooled_baseline_predict, predict  # noqa: E402
from .lfm import MaskBank, build_masks, extract_features  # noqa: E402
from .metrics import GroundTruth, binarize, confusion_metrics, proportion  # noqa: E402
from .model import ModelState, init_model  # noqa: E402
from .saliency import ExplainConfig, explain, upsampled_similarity_baseline  # noqa: E402
from .synthdata import SynthConfig, generate  # noqa: E402
from .training import TrainConfig, run_training  # noqa: E402

__all__ = [
    "EncoderConfig", "encode", "init_params", "PredictionOutcome", "mean_pooled_baseline_predict",
    "predict", "MaskBank", "build_masks", "extract_features", "GroundTruth", "binarize",
    "confusion_metrics", "proportion", "ModelState", "init_model", "ExplainConfig", "explain",
    "upsampled_similarity_baseline", "SynthConfig", "generate", "TrainConfig", "run_training",
]
