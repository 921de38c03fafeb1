//! Evaluation: image metrics, transfer rollouts, embodiment leakage, action
//! probes and latent-recovery scores.

pub mod classifier;
pub mod error;
pub mod interface;
pub mod leakage;
pub mod metrics;
pub mod probe;
pub mod recovery;
pub mod regress;
pub mod transfer;

pub use classifier::{labeled_frames, token_frame, train_frame_classifier, ClassifierConfig, FrameClassifier};
pub use error::EvalError;
pub use interface::{a2l_codes, a2l_latent_mse, a2l_rollout_metrics};
pub use leakage::{leakage_eval, LeakageReport, LeakageResult, SourceRow};
pub use metrics::{image_metrics, mean_row, psnr, ssim_global, MetricRow, PSNR_CAP};
pub use probe::{action_probe, codes_and_actions, latent_sample, probe_codes, ProbeReport};
pub use recovery::{
    energy_distance, gather, latent_recovery_score, pushforward_test, LatentSample, PushforwardReport, RecoveryReport,
};
pub use regress::{fit_probe, fit_regressor, r_squared, FitConfig, Probe, Regressor};
pub use transfer::{evaluate_episodes, metric_csv, rollout_future_frames, EvalRow};
