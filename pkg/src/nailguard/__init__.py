"""Nail-disease image classification: training, robustness, explanations, triage service."""

__version__ = "0.1.0"

from .dataset import (
    CANONICAL_CATEGORIES,
    DatasetManifest,
    LabelTaxonomy,
    SplitAssignment,
    category_distribution,
    ingest,
    split,
)
from .pipeline import (
    AugmentationConfig,
    ImageBatch,
    ImageStore,
    PreprocessedImage,
    augment,
    load_and_resize,
    make_batches,
)
from .models import Checkpoint, Classifier, build, load, save
from .training import (
    AdversarialConfig,
    TrainingConfig,
    TrainingHistory,
    adversarial_fit,
    early_stop_update,
    epsilon_sweep,
    fgsm,
    fit,
    hyperparameter_sweep,
)
from .evaluation import (
    ConfusionMatrix,
    EvaluationReport,
    classification_report,
    compare_models,
    confusion_matrix,
    evaluate,
)
from .explain import (
    AttributionMap,
    Segmentation,
    ShapleyResult,
    grad_cam,
    overlay,
    segment_grid,
    shapley_attribution,
    to_pixel_map,
)
from .synthdata import SynthSpec, generate
