"""Incremental learning on tiny budgets: distribution-matching dataset
distillation with adaptive model sizing and exact FLOPs/memory accounting."""

__version__ = "0.1.0"

from .augment import DSA_OPS, AugmentationDraw, dsa_apply, sample_draw
from .data import LabeledSet, load_array_import, load_dataset, synthetic_digits
from .distill import (
    DistillConfig,
    DistilledBuffer,
    append_step,
    distill,
    dm_loss,
    init_synthetic,
)
from .errors import (
    ChecksumError,
    ConfigError,
    DataFormatError,
    DistillCLError,
    NumericError,
    ValidationError,
)
from .estimators import ConvNetClassifier, DatasetDistiller, IncrementalClassifier
from .flops import FlopsCount, count_flops
from .models import (
    ConvNet,
    ModelSpec,
    backward,
    build_model,
    convnet_ladder,
    convnet_spec,
    embed,
    forward,
)
from .reports import ComparisonTable, accuracy_flops_series, compare, render_report
from .scenarios import (
    Scenario,
    ScenarioStep,
    class_incremental,
    rotated_mnist,
    scenario_manifest,
)
from .seeding import derive_seed
from .serialize import (
    checkpoint_model,
    deserialize_buffer,
    restore_model,
    serialize_buffer,
)
from .training import (
    REGIMES,
    GrowthPolicy,
    OptimizerConfig,
    RunLog,
    StepMetrics,
    aggregate,
    grow_if_needed,
    run_incremental,
    train_model,
    validate,
)
