//! Embodiment leakage of cross-embodiment rollouts: latents inferred on a
//! source body drive the FDM from a target-body context, and an independent
//! frame classifier scores which body the predicted frames show.

use scar_core::ParamStore;
use scar_models::{EpisodeBatch, ScarModel};
use scar_world::{Dataset, DgpSpec, Split, Trajectory};
use serde::{Deserialize, Serialize};

use crate::classifier::{FrameClassifier, MIN_ACCURACY};
use crate::error::EvalError;
use crate::transfer::rollout_future_frames;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    #[serde(rename = "SourceProb")]
    pub source_prob: f64,
    #[serde(rename = "TargetProb")]
    pub target_prob: f64,
    #[serde(rename = "TargetShare")]
    pub target_share: f64,
    #[serde(rename = "TargetSource")]
    pub target_source: f64,
}

impl LeakageReport {
    pub fn from_probs(source_prob: f64, target_prob: f64) -> Self {
        let total = target_prob + source_prob;
        LeakageReport {
            source_prob,
            target_prob,
            target_share: if total > 0.0 { target_prob / total } else { 0.0 },
            target_source: target_prob - source_prob,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceRow {
    pub source: usize,
    pub pairs: usize,
    #[serde(flatten)]
    pub report: LeakageReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LeakageResult {
    #[serde(flatten)]
    pub mean: LeakageReport,
    pub target: usize,
    pub classifier_accuracy: f64,
    pub per_source: Vec<SourceRow>,
}

/// Mean probabilities of the `source` and `target` classes over the given frames.
pub fn class_probs(clf: &FrameClassifier, frames: &[scar_world::Frame], source: usize, target: usize) -> (f64, f64) {
    let p = clf.probs(frames);
    let n = frames.len().max(1) as f64;
    let (mut ps, mut pt) = (0.0, 0.0);
    for row in p.chunks(clf.classes) {
        ps += row[source];
        pt += row[target];
    }
    (ps / n, pt / n)
}

/// Pairs the first `pairs` source-train episodes of each source embodiment
/// with the target evaluation episodes. Probabilities are averaged over the
/// predicted frames of each source, then over sources.
pub fn leakage_eval(
    model: &ScarModel,
    store: &ParamStore,
    spec: &DgpSpec,
    ds: &Dataset,
    clf: &FrameClassifier,
    pairs: usize,
    seed: u64,
) -> Result<LeakageResult, EvalError> {
    if clf.val_accuracy < MIN_ACCURACY {
        return Err(EvalError::UnreliableClassifier(clf.val_accuracy));
    }
    let target = ds.target;
    let contexts: Vec<&Trajectory> = ds.trajectories(Split::EvalTarget).into_iter().take(pairs).collect();
    let mut per_source = Vec::new();
    for source in (0..ds.n_embodiments).filter(|e| *e != target) {
        let sources: Vec<&Trajectory> = ds
            .trajectories(Split::Train)
            .into_iter()
            .filter(|t| t.embodiment == source)
            .take(contexts.len())
            .collect();
        if sources.len() < contexts.len() || contexts.is_empty() {
            return Err(EvalError::NotEnoughData(format!("{} source episodes for {} contexts", sources.len(), contexts.len())));
        }
        let pred = rollout_future_frames(model, store, spec, &contexts, seed ^ source as u64, |b, offset| {
            let src = EpisodeBatch::new(&sources[offset..offset + b.b], &model.cfg)?;
            Ok(model.codes(store, &src)?)
        })?;
        let frames: Vec<_> = pred.into_iter().flatten().collect();
        let (ps, pt) = class_probs(clf, &frames, source, target);
        per_source.push(SourceRow {
            source,
            pairs: contexts.len(),
            report: LeakageReport::from_probs(ps, pt),
        });
    }
    let n = per_source.len() as f64;
    let ps = per_source.iter().map(|r| r.report.source_prob).sum::<f64>() / n;
    let pt = per_source.iter().map(|r| r.report.target_prob).sum::<f64>() / n;
    Ok(LeakageResult {
        mean: LeakageReport::from_probs(ps, pt),
        target,
        classifier_accuracy: clf.val_accuracy,
        per_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_hold() {
        let r = LeakageReport::from_probs(0.25, 0.5);
        assert_eq!(r.target_share, 0.5 / 0.75);
        assert_eq!(r.target_source, 0.25);
        let z = LeakageReport::from_probs(0.0, 0.0);
        assert_eq!(z.target_share, 0.0);
    }

    #[test]
    fn json_uses_table_names() {
        let s = serde_json::to_string(&LeakageReport::from_probs(0.1, 0.8)).unwrap();
        for k in ["SourceProb", "TargetProb", "TargetShare", "TargetSource"] {
            assert!(s.contains(&format!("\"{k}\"")), "{s}");
        }
    }
}
