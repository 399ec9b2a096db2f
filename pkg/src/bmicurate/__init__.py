"""Batch curation and evaluation pipeline for image-based BMI estimation."""

from .ingest import (
    BoundingBox,
    ImageRecord,
    KeypointSet,
    Measurement,
    compute_bmi,
    load_manifest,
    write_manifest,
)
from .person_filter import FilterVerdict, PersonFilterConfig, apply_person_filter, area_ratio
from .posture import (
    ClusterModel,
    PostureConfig,
    elbow_select,
    fit_kmeans,
    fit_pca,
    fit_posture_model,
    normalize_keypoints,
)
from .crops import CropRect, apply_crop, face_crop, full_body_crop, torso_crop
from .splitter import SplitAssignment, greedy_split, verify_disjoint
from .evaluation import (
    MetricsReport,
    PredictionRecord,
    PreprocessSpec,
    compute_metrics,
    load_model,
    preprocess,
)
from .pipeline import FilterReport, PipelineConfig, filter_accounting, run_pipeline

__version__ = "0.1.0"
