use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use rand::Rng;
use scar_core::rng::stream;
use scar_eval::leakage::class_probs;
use scar_eval::*;
use scar_models::{CondSource, ModelConfig, ScarModel};
use scar_world::{generate_dataset, DataCounts, Dataset, DgpConfig, DgpSpec, Frame, Split, FRAME};

fn spec() -> &'static DgpSpec {
    static S: OnceLock<DgpSpec> = OnceLock::new();
    S.get_or_init(|| DgpSpec::build(DgpConfig::default()).unwrap())
}

fn dataset() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| generate_dataset(7, &DataCounts::default(), spec()).unwrap())
}

fn classifier() -> &'static FrameClassifier {
    static C: OnceLock<FrameClassifier> = OnceLock::new();
    C.get_or_init(|| {
        let t0 = Instant::now();
        let train = labeled_frames(dataset(), Split::Train, spec(), 4);
        let val = labeled_frames(dataset(), Split::Analysis, spec(), 4);
        let c = train_frame_classifier(&train, &val, 4, &ClassifierConfig::new(3)).unwrap();
        eprintln!("classifier: val acc {:.3} in {:?}", c.val_accuracy, t0.elapsed());
        c
    })
}

/// SSIM written out per pixel with two-pass statistics.
fn ssim_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma: f64 = a.iter().sum::<f64>() / n;
    let mb: f64 = b.iter().sum::<f64>() / n;
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let (c1, c2) = (1e-4, 9e-4);
    (2.0 * ma * mb + c1) * (2.0 * c + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

#[test]
fn constant_mean_image_has_near_zero_ssim() {
    let ds = dataset();
    let ep = &ds.trajectories(Split::EvalTarget)[0];
    let truth: Vec<Frame> = (0..ep.t).map(|i| token_frame(spec(), ep.x_row(i))).collect();
    let pred: Vec<Frame> = truth
        .iter()
        .map(|f| {
            let m = f.pixels.iter().sum::<f64>() / f.pixels.len() as f64;
            Frame { pixels: vec![m; FRAME * FRAME] }
        })
        .collect();
    let row = image_metrics(&pred, &truth).unwrap();
    let want = pred.iter().zip(&truth).map(|(p, t)| ssim_oracle(&p.pixels, &t.pixels)).sum::<f64>() / pred.len() as f64;
    assert!((row.ssim - want).abs() < 1e-12);
    assert!(row.ssim.abs() < 0.05, "{}", row.ssim);
}

proptest! {
    #[test]
    fn ssim_matches_oracle_and_is_bounded(seed in 0u64..500) {
        let mut rng = stream(seed, "ssim");
        let a: Vec<f64> = (0..FRAME * FRAME).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + rng.random_range(-0.3..0.3f64)).clamp(0.0, 1.0)).collect();
        let s = ssim_global(&a, &b);
        prop_assert!((s - ssim_oracle(&a, &b)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn psnr_is_exact_for_positive_mse(mse in 1e-6f64..1.0) {
        prop_assert_eq!(psnr(mse), 10.0 * (1.0 / mse).log10());
    }

    #[test]
    fn leakage_identities_hold_exactly(ps in 0.0f64..1.0, pt in 0.0f64..1.0) {
        prop_assume!(ps + pt > 0.0);
        let r = LeakageReport::from_probs(ps, pt);
        prop_assert_eq!(r.target_share, pt / (pt + ps));
        prop_assert_eq!(r.target_source, pt - ps);
        prop_assert!((0.0..=1.0).contains(&r.target_share));
    }
}

#[test]
fn table_row_arithmetic() {
    let r = LeakageReport::from_probs(0.1020, 0.8105);
    assert!((r.target_source - 0.7085).abs() < 1e-12);
    assert!((r.target_share - 0.8105 / 0.9125).abs() < 1e-15);
}

fn sample_with(z: impl Fn(&[f64], usize) -> Vec<f64>, d_z: usize) -> LatentSample {
    let mut rng = stream(5, "lat");
    let n = 800;
    let u: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let zs = u.chunks(2).zip(&labels).flat_map(|(r, &e)| z(r, e)).collect();
    LatentSample {
        z: zs,
        d_z,
        u,
        d_u: 2,
        labels,
        classes: 4,
    }
}

#[test]
fn recovery_identity_latent() {
    let rep = latent_recovery_score(&sample_with(|u, _| u.to_vec(), 2), 1).unwrap();
    assert!(rep.min_r2() > 0.99, "{rep:?}");
    assert!((rep.probe_accuracy - 0.25).abs() < 0.1, "{rep:?}");
    assert!(rep.mi_lower_bound < 0.05, "{rep:?}");
}

#[test]
fn recovery_one_hot_latent() {
    let rep = latent_recovery_score(
        &sample_with(
            |_, e| {
                let mut z = vec![0.0; 4];
                z[e] = 1.0;
                z
            },
            4,
        ),
        1,
    )
    .unwrap();
    for b in &rep.per_body {
        assert!(b.r2_z_to_u < 0.05, "{rep:?}");
    }
    assert!(rep.probe_accuracy > 0.99);
    assert!(rep.mi_lower_bound <= 4f64.ln() + 1e-9);
    assert!(rep.mi_lower_bound > 4f64.ln() - 0.1);
}

#[test]
fn pushforward_rejects_concat_control() {
    let concat = sample_with(
        |u, e| {
            let mut z = u.to_vec();
            z.extend((0..4).map(|k| if k == e { 1.0 } else { 0.0 }));
            z
        },
        6,
    );
    let rep = pushforward_test(&concat, 150, 199, 2).unwrap();
    assert!(!rep.passes());
    assert!(rep.max_statistic() > 0.5);
}

#[test]
fn probe_on_linear_channel_is_near_exact() {
    let mut rng = stream(9, "probe");
    let h = [0.7, -0.3, 0.2, 1.1, -0.5, 0.4];
    let make = |rng: &mut scar_core::rng::Stream, n: usize| {
        let u: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = u
            .chunks(2)
            .flat_map(|r| (0..3).map(move |i| h[2 * i] * r[0] + h[2 * i + 1] * r[1]))
            .collect();
        (u, a)
    };
    let (ut, at) = make(&mut rng, 160);
    let (ue, ae) = make(&mut rng, 400);
    let rep = probe_codes(&ut, &at, &ue, &ae, 2, 3, &FitConfig::linear(1)).unwrap();
    assert!(rep.eval_mse < 1e-4, "{rep:?}");
}

#[test]
fn probe_leaves_model_untouched() {
    let cfg = ModelConfig::default();
    let (model, store) = ScarModel::new(&cfg, CondSource::Latent, 4).unwrap();
    let before = store.checksum("");
    let ds = dataset();
    let train = ds.trajectories(Split::Train).into_iter().filter(|t| t.embodiment == ds.target).collect::<Vec<_>>();
    let eval = ds.trajectories(Split::EvalTarget);
    let rep = action_probe(&model, &store, &train, &eval, &FitConfig { steps: 50, ..FitConfig::mlp(1) }).unwrap();
    assert!(rep.train_mse.is_finite() && rep.eval_l1.is_finite());
    assert_eq!(store.checksum(""), before);
}

#[test]
fn classifier_is_reliable_and_reads_true_frames() {
    let clf = classifier();
    assert!(clf.val_accuracy >= 0.9, "{}", clf.val_accuracy);
    let ds = dataset();
    let frames: Vec<Frame> = ds
        .trajectories(Split::EvalTarget)
        .iter()
        .flat_map(|ep| (5..ep.t).map(|i| token_frame(spec(), ep.x_row(i))))
        .collect();
    let src = (ds.target + 1) % 4;
    let (ps, pt) = class_probs(clf, &frames, src, ds.target);
    assert!(pt > 0.9 && ps < 0.05, "target {pt} source {ps}");
}

#[test]
fn leakage_runs_on_untrained_model() {
    let cfg = ModelConfig::default();
    let (model, store) = ScarModel::new(&cfg, CondSource::Latent, 4).unwrap();
    let res = leakage_eval(&model, &store, spec(), dataset(), classifier(), 10, 1).unwrap();
    assert_eq!(res.per_source.len(), 3);
    for r in &res.per_source {
        assert!((0.0..=1.0).contains(&r.report.source_prob));
        assert!((0.0..=1.0).contains(&r.report.target_prob));
    }
    let mean_ps = res.per_source.iter().map(|r| r.report.source_prob).sum::<f64>() / 3.0;
    assert!((res.mean.source_prob - mean_ps).abs() < 1e-12);
}

#[test]
fn unreliable_classifier_is_refused() {
    let train = labeled_frames(dataset(), Split::Train, spec(), 8);
    let val = labeled_frames(dataset(), Split::Analysis, spec(), 8);
    let weak = train_frame_classifier(&train, &val, 4, &ClassifierConfig { steps: 0, ..ClassifierConfig::new(1) }).unwrap();
    let cfg = ModelConfig::default();
    let (model, store) = ScarModel::new(&cfg, CondSource::Latent, 4).unwrap();
    if weak.val_accuracy < 0.9 {
        assert!(matches!(
            leakage_eval(&model, &store, spec(), dataset(), &weak, 5, 1),
            Err(EvalError::UnreliableClassifier(_))
        ));
    }
}

#[test]
fn transfer_eval_shapes() {
    let cfg = ModelConfig::default();
    let (model, store) = ScarModel::new(&cfg, CondSource::Latent, 4).unwrap();
    let eps = dataset().trajectories(Split::EvalTarget);
    let rows = evaluate_episodes(&model, &store, spec(), &eps, 3).unwrap();
    assert_eq!(rows.len(), 50);
    for r in &rows {
        assert!(r.mse >= 0.0 && (-1.0..=1.0).contains(&r.ssim) && (-1.0..=1.0).contains(&r.ssim_l));
    }
    let again = evaluate_episodes(&model, &store, spec(), &eps, 3).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn pushforward_null_rejection_is_calibrated() {
    let reps = 40;
    let mut family_fails = 0;
    let mut rejections = 0;
    let mut total = 0;
    for s in 0..reps {
        let mut rng = stream(s, "null");
        let n = 800;
        let u: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let smp = LatentSample {
            z: u.clone(),
            d_z: 2,
            u,
            d_u: 2,
            labels,
            classes: 4,
        };
        let rep = pushforward_test(&smp, 150, 199, s).unwrap();
        rejections += rep.pairs.iter().filter(|p| p.p_value <= 0.05).count();
        total += rep.pairs.len();
        family_fails += usize::from(!rep.passes());
    }
    let rate = rejections as f64 / total as f64;
    assert!(rate < 0.1, "pairwise rejection rate {rate}");
    assert!(family_fails <= 6, "{family_fails}/{reps} family-wise rejections");
}
