"""Evidential uncertainty-aware image classification on a LoRA-adapted
frozen transformer encoder, with threshold calibration, selective-prediction
evaluation, OOD detection, and gradient-based heatmaps."""

from .calibration import CalibrationInput, CalibrationReport, calibrate_threshold
from .data import (
    ClassDef,
    DatasetManifest,
    OODDef,
    SampleRecord,
    SplitAssignment,
    SyntheticSpec,
    default_synthetic_spec,
    generate_synthetic,
    load_manifest,
    patient_split,
    preprocess,
    save_manifest,
    split_records,
)
from .evidential import (
    DirichletOpinion,
    LossBreakdown,
    LossConfig,
    edl_loss,
    evidence_from_logits,
    kl_dirichlet_uniform,
    opinion_from_evidence,
)
from .gradcam import Heatmap, grad_cam, save_heatmap
from .metrics import (
    AssociationReport,
    CoverageCurve,
    EvaluationReport,
    OODReport,
    binary_auc,
    compute_metrics,
    coverage_curve,
    misclassification_association,
    ood_detection_rate,
)
from .modeling import (
    EncoderConfig,
    LoRAConfig,
    ModelBundle,
    build_model,
    freeze_base,
    inject_lora,
    load_bundle,
    load_pretrained_encoder,
    save_bundle,
)
from .training import ImageArrayDataset, TrainConfig, TrainReport, predict_dataset, train

__version__ = "0.1.0"
