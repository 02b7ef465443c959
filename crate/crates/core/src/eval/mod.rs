//! Video-level scoring, metrics, protocol runs, embedding export and saliency.

mod metrics;
mod protocol;
mod robustness;
mod score;

pub use metrics::{auc, compute_metrics, eer, MetricsReport, VideoScore, ACC_THRESHOLD};
pub use protocol::{
    pretrain_subset, run_protocol, PerturbationSet, ProtocolCell, ProtocolOutcome, ProtocolSettings, ProtocolSpec,
    RobustnessSummary, Variant,
};
pub use robustness::{
    evaluate_settings, kind_means, report_file_name, robustness_table, EvalSettings, RobustnessRow,
    ROBUSTNESS_TABLE_HEADER,
};
pub use score::{
    evaluation_clips, export_embeddings, saliency_map, score_manifest, score_video, video_embedding, EmbeddingLayer,
    DEFAULT_EVAL_CLIPS,
};
