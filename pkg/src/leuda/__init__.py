"""Label-efficient domain adaptation for 2D image segmentation.

Pipeline: unpaired cycle translation builds synthetic cross-domain image
families; a student segmenter then trains with scarce source labels under
two EMA teachers (within-domain consistency and cross-domain structural
consistency) and per-level discriminators that align student predictions
with teacher predictions.
"""

from .core import (
    DatasetSplit,
    ImageKind,
    ImageTensor,
    InvalidInputError,
    PairKind,
    PairedSample,
    ProbMap,
    SegMask,
    Subject,
    TrainingConfig,
    assemble_batch,
    split_dataset,
)
from .ensembling import ModelBundle, TeacherState, ema_update, make_teacher
from .losses import LossBreakdown, WeightSnapshot, lr_at, rampup_weight
from .metrics import AggregateResult, SubjectResult, aggregate, asd, dice
from .networks import SegmenterConfig, build_discriminator, build_segmenter
from .synthdata import AugmentParams, PhantomSpec, generate_phantoms
from .trainer import (
    ABLATION_LADDER,
    METHODS,
    ExperimentSpec,
    RunRecord,
    TrainingMonitor,
    benchmark_spec,
    run_ablation_suite,
    run_stage1,
    run_stage2,
)
from .translation import TranslationConfig, TranslatorPair, synthesize_domains, train_dcam

__version__ = "0.1.0"

__all__ = [
    "ABLATION_LADDER",
    "AggregateResult",
    "AugmentParams",
    "DatasetSplit",
    "ExperimentSpec",
    "ImageKind",
    "ImageTensor",
    "InvalidInputError",
    "LossBreakdown",
    "METHODS",
    "ModelBundle",
    "PairKind",
    "PairedSample",
    "PhantomSpec",
    "ProbMap",
    "RunRecord",
    "SegMask",
    "SegmenterConfig",
    "Subject",
    "SubjectResult",
    "TeacherState",
    "TrainingConfig",
    "TrainingMonitor",
    "TranslationConfig",
    "TranslatorPair",
    "WeightSnapshot",
    "aggregate",
    "asd",
    "assemble_batch",
    "benchmark_spec",
    "build_discriminator",
    "build_segmenter",
    "dice",
    "ema_update",
    "generate_phantoms",
    "lr_at",
    "make_teacher",
    "rampup_weight",
    "run_ablation_suite",
    "run_stage1",
    "run_stage2",
    "split_dataset",
    "synthesize_domains",
    "train_dcam",
    "__version__",
]
