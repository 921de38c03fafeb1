//! Numerical checks of latent-action identifiability: Bessel functions, the
//! vMF pushforward MGF, the GRL saddle, principal angles, the linear
//! inverse-dynamics lemma and pushforward equality across bodies.

pub mod angles;
pub mod bessel;
pub mod error;
pub mod experiment;
pub mod lemma;
pub mod mgf;
pub mod pushforward;
pub mod report;
pub mod saddle;

pub use angles::principal_angles;
pub use bessel::{bessel_i, bessel_ratio, log_bessel_i, recurrence_residual};
pub use error::TheoryError;
pub use experiment::VmfExperiment;
pub use lemma::{idm_lemma_check, linear_spec, LemmaConfig, LemmaReport};
pub use mgf::{mgf_closed_form, mgf_monte_carlo, mgf_probe_check, MgfReport};
pub use pushforward::{pushforward_and_transfer_check, PushforwardCheck};
pub use report::CheckReport;
pub use saddle::{saddle_train, SaddleConfig, SaddleReport};
