//! Memorization checks, reflection metrics, snapshot series and
//! cross-network scoring of syntheses.

mod neighbors;
mod reflect;
mod report;

pub use neighbors::{embed, nearest_neighbor, quantile, Embedding, NNQueryResult, Space};
pub use reflect::{
    channel_means, permutation_scores, rank_sum, reflection_metrics, seam_discontinuity, GroupMetrics, ReflectionKind, ReflectionReport, BRG,
    CHANNEL_PERMUTATIONS,
};
pub use report::{generalization_score, percentile_of, snapshot_report, GeneralizationReport, SnapshotReport, SnapshotRow, UnitScore};
