//! Losses, the two-phase training loop, evaluation and drift detection.

mod detect;
mod eval;
mod loss;
mod trainer;

pub use detect::{
    calibrate_threshold, clean_distances, detect_decalibration, detection_study, drift_capture, DetectionConfig,
    DetectionSummary, intrinsic_distance, DriftVerdict, DRIFT_QUANTILE,
};
pub use eval::{
    evaluate, evaluate_model, measure_latency, reprojection_rmse, CameraEval, EvalConfig, EvalReport,
    LatencyStats,
};
pub use loss::{
    compound_loss, loss_diff, loss_geo, loss_reproj, record_loss, scale_table, LossBreakdown, LossWeights,
    Phase,
};
pub use trainer::{nominal_cameras, train, EpochRecord, TrainConfig, Trainer, BEHIND_CAMERA_PENALTY};
