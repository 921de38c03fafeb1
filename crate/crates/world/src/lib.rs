//! Synthetic multi-embodiment worlds.
//!
//! Every embodiment shares a unified action `u ~ U[-1,1]^{d_u}` that is
//! realized as an embodiment-specific raw command `a = Q_e u + b_e`, drives a
//! state through `s' = m(s) + g(s)·W a`, and is observed as
//! `x = [squash(P s); code_e + lighting]`. Ground-truth `u` and `s` are kept
//! alongside each episode for analysis.

pub mod episode;
pub mod error;
pub mod process;
pub mod spec;
pub mod vmf;

pub use episode::{generate_dataset, generate_episode, DataCounts, Dataset, Record, Split, Trajectory};
pub use error::WorldError;
pub use process::{sample_unified_action, Frame};
pub use spec::{DgpConfig, DgpSpec, Squash, FRAME, GLYPH};
pub use vmf::vmf_sample;
