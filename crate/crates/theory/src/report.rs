use serde::Serialize;

/// One verification outcome as written by `scar verify`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub seeds: Vec<u64>,
}
