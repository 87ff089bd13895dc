//! Evaluation: Recall@K and mean Recall@K for scene graphs, zero-shot and
//! long-tail breakdowns, role mAP for interactions, and prediction records.

pub mod recall;
pub mod records;
pub mod report;
pub mod role;

pub use recall::{
    dataset_recall, longtail_groups, longtail_groups_with, mean_recall_at_k, rank_triples, recall_at_k, recall_hits,
    sort_candidates, train_triple_set, zero_shot_filter, Candidate, Constraint, GroupThresholds, MeanRecall,
    PredicateGroups, RelImage, TripleMatchRule,
};
pub use records::{parse_records, records_to_string, Records};
pub use report::{constrain, evaluate, EvalSettings, MetricsReport, RECALL_KS, ZERO_SHOT_KS};
pub use role::{
    average_precision, hoi_detections, map_role, role_counts, HoiDetection, Interpolation, RoleKey, RoleMap, RoleRule,
    Scenario,
};
