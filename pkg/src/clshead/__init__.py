"""Transfer-learning classifier heads over precomputed CNN features.

Core pieces: dense float32 kernels with hand-derived gradients
(``layers``), SGD with step decay and early stopping (``optim``), the
appended-layer and replaced-layer head architectures with the
fine-tuning loop (``heads``), feature containers and the split protocol
(``features``/``featfile``/``splits``), pretrained-class similarity
(``similarity``), and the config-driven experiment harness
(``experiments``/``report``/``cli``).
"""

from .errors import (
    BadMagicError,
    ConfigurationError,
    DataError,
    DimOverflowError,
    DivergedError,
    EngineError,
    FeatureFileError,
    ShapeError,
    TruncatedPayloadError,
    ValidationError,
)
from .experiments import ExperimentConfig, compute_gain, cross_validate, run_experiment
from .features import FeatureBundle, FeatureSet, Manifest, synth_bundle, synth_features
from .featfile import read_bundle, read_featureset, write_bundle, write_featureset
from .heads import (
    BASELINE,
    PROPOSED,
    Head,
    HeadSpec,
    TrainConfig,
    TrainResult,
    build_baseline_head,
    build_proposed_head,
    count_params,
    default_train_config,
    evaluate,
    train_head,
)
from .layers import (
    AffineParams,
    affine_backward,
    affine_forward,
    init_uniform,
    make_rng,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .optim import (
    EarlyStopConfig,
    EarlyStopState,
    SgdConfig,
    early_stop_check,
    init_early_stop,
    sgd_step,
    step_lr,
)
from .report import ExperimentReport, ReportRow, emit_tables
from .similarity import build_similarity_report, class_similarity
from .splits import AType, BType, SplitSpec, compose_experiment, make_splits

__version__ = "0.1.0"
