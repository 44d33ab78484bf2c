//! Downstream evaluation: metrics, logistic probes, learning curves,
//! relatedness and note-level kNN checks.

pub mod curve;
pub mod knn;
pub mod metrics;
pub mod relatedness;
pub mod ridge;

pub use curve::{
    cell_seed, learning_curve, stratified_subsample, wide_and_deep, CurveConfig, CurveRecord, CurveSummary,
    LearningCurveResult, RepresentationTable,
};
pub use knn::{knn_note_eval, synthetic_note_eval, EvalNote, KnnConfig, NoteClass, NoteEvalReport, NoteEvalSet};
pub use metrics::{auroc, MicroCounts};
pub use relatedness::{relatedness_score, write_relatedness_csv, RelatednessResult, RelationSet};
pub use ridge::{fit_ridge_logistic, predict_proba, RidgeConfig, RidgeLogisticModel};
