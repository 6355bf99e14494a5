//! Metrics, ablation runs and cluster diagnostics.

mod ablation;
mod clusters;
mod metrics;

pub use ablation::{
    encode_all, evaluate_model, finetune_and_evaluate, pretrain_variant, run_ablations, run_variant,
    space_correspondence, ClusterView, ExampleConfig, Variant, VariantRun, TABLE3_VARIANTS, TABLE4_VARIANTS,
};
pub use clusters::{
    assign_cluster_groups, cluster_correspondence, export_projection, pca_2d, tsne_2d, ProjectionExport,
    ProjectionRow, Projector,
};
pub use metrics::{
    auc, mean_logloss, mean_std, reports_table, summarize, summary_table, MetricsReport, VariantSummary,
};
