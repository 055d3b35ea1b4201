"""Language-grounded surgical video timelines.

Fine-tunes a dual image/text encoder on surgical gestures, then on surgical
phases, and turns per-frame phase predictions into a structured, narrated
timeline of the procedure.
"""

__version__ = "0.1.0"

from surgline.checkpoint import (
    Checkpoint,
    CheckpointError,
    file_sha256,
    load_checkpoint,
    load_into_module,
    module_arrays,
    save_checkpoint,
)
from surgline.encoders import (
    ClipBackboneEncoder,
    FreezePolicy,
    FreezeSummary,
    SurrogateEncoder,
    apply_freeze_policy,
    hash_token_ids,
    tower_depths,
)
from surgline.ingest import (
    AnnotationError,
    DatasetSplit,
    FrameRecord,
    LoadedDataset,
    SampledFrames,
    SplitError,
    VideoMeta,
    balance_downsample,
    balance_upsample,
    load_dataset,
    load_source_manifest,
    load_split,
    make_split,
    parse_gesture_transcript,
    parse_phase_annotation,
    sample_frames,
    save_dataset,
    save_split,
    split_records,
    synth_dataset,
)
from surgline.losses import (
    LossOutput,
    class_positive_mask,
    contrastive_loss,
    gradient_check,
    multi_positive_infonce,
    similarity_logits,
    standard_infonce,
)
from surgline.metrics import (
    ConfusionMatrix,
    MetricsReport,
    confusion,
    evaluate,
    write_confusion_csv,
    write_report_csv,
    write_report_json,
)
from surgline.timeline import (
    MajorityVoteSmoother,
    PhaseDiagram,
    Timeline,
    TimelineSegment,
    build_timeline,
    export_phase_diagram,
    format_hms,
    narrative_text,
    smooth_labels,
    timeline_from_truth,
)
from surgline.training import (
    LinearProbe,
    ProbeConfig,
    StageConfig,
    run_stage,
    stage_defaults,
    stage_preset,
    train_linear_probe,
)
from surgline.vocab import ClassVocabulary, VocabularyError, bundled_vocabulary, load_vocabulary
from surgline.zeroshot import (
    Prediction,
    PrototypeBank,
    ZeroShotFrameClassifier,
    build_prototypes,
    class_scores,
    encode_frames,
    predict_topk,
    read_predictions,
    write_predictions,
)

__all__ = [
    "__version__",
    # vocab
    "ClassVocabulary",
    "VocabularyError",
    "bundled_vocabulary",
    "load_vocabulary",
    # ingest
    "AnnotationError",
    "DatasetSplit",
    "FrameRecord",
    "LoadedDataset",
    "SampledFrames",
    "SplitError",
    "VideoMeta",
    "balance_downsample",
    "balance_upsample",
    "load_dataset",
    "load_source_manifest",
    "load_split",
    "make_split",
    "parse_gesture_transcript",
    "parse_phase_annotation",
    "sample_frames",
    "save_dataset",
    "save_split",
    "split_records",
    "synth_dataset",
    # losses
    "LossOutput",
    "class_positive_mask",
    "contrastive_loss",
    "gradient_check",
    "multi_positive_infonce",
    "similarity_logits",
    "standard_infonce",
    # encoders
    "ClipBackboneEncoder",
    "FreezePolicy",
    "FreezeSummary",
    "SurrogateEncoder",
    "apply_freeze_policy",
    "hash_token_ids",
    "tower_depths",
    # checkpoint
    "Checkpoint",
    "CheckpointError",
    "file_sha256",
    "load_checkpoint",
    "load_into_module",
    "module_arrays",
    "save_checkpoint",
    # training
    "LinearProbe",
    "ProbeConfig",
    "StageConfig",
    "run_stage",
    "stage_defaults",
    "stage_preset",
    "train_linear_probe",
    # zeroshot
    "Prediction",
    "PrototypeBank",
    "ZeroShotFrameClassifier",
    "build_prototypes",
    "class_scores",
    "encode_frames",
    "predict_topk",
    "read_predictions",
    "write_predictions",
    # metrics
    "ConfusionMatrix",
    "MetricsReport",
    "confusion",
    "evaluate",
    "write_confusion_csv",
    "write_report_csv",
    "write_report_json",
    # timeline
    "MajorityVoteSmoother",
    "PhaseDiagram",
    "Timeline",
    "TimelineSegment",
    "build_timeline",
    "export_phase_diagram",
    "format_hms",
    "narrative_text",
    "smooth_labels",
    "timeline_from_truth",
]
