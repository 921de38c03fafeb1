//! Single-frame embodiment classifier: three 3×3 convolution blocks of width
//! 32, 64 and 128 with ReLU, 2×2 max pooling after the first two, global
//! average pooling and a linear head.

use rand::Rng;
use scar_core::nn::{Ctx, Linear};
use scar_core::optim::{AdamConfig, AdamW};
use scar_core::rng::{stream, Stream};
use scar_core::{ParamId, ParamStore, Tape, Tensor, Var};
use scar_world::{Dataset, DgpSpec, Frame, Split, FRAME};

use crate::error::EvalError;

pub const MIN_ACCURACY: f64 = 0.9;
const WIDTHS: [usize; 3] = [32, 64, 128];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(seed: u64) -> Self {
        ClassifierConfig {
            steps: 150,
            batch: 32,
            lr: 2e-3,
            seed,
        }
    }
}

pub struct FrameClassifier {
    store: ParamStore,
    convs: Vec<(ParamId, ParamId)>,
    head: Linear,
    pub classes: usize,
    pub val_accuracy: f64,
}

fn frames_tensor(frames: &[&Frame]) -> Tensor {
    let mut data = Vec::with_capacity(frames.len() * FRAME * FRAME);
    for f in frames {
        data.extend_from_slice(&f.pixels);
    }
    Tensor::new(vec![frames.len(), 1, FRAME, FRAME], data).expect("frame size")
}

impl FrameClassifier {
    fn new(classes: usize, rng: &mut Stream) -> Self {
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in WIDTHS.iter().enumerate() {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
            let wid = store.add(format!("cls.c{i}.w"), Tensor::new(vec![cout, cin, 3, 3], w).expect("sized"));
            let bid = store.add(format!("cls.c{i}.b"), Tensor::zeros(&[cout]));
            convs.push((wid, bid));
            cin = cout;
        }
        let head = Linear::new(&mut store, "cls.head", cin, classes, 1.0, rng);
        FrameClassifier {
            store,
            convs,
            head,
            classes,
            val_accuracy: 0.0,
        }
    }

    fn logits<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            h = h.conv2d(cx.p(w), cx.p(b)).relu();
            if i < 2 {
                h = h.max_pool2();
            }
        }
        self.head.forward(cx, h.global_avg_pool())
    }

    /// Class probabilities, `classes` per frame.
    pub fn probs(&self, frames: &[Frame]) -> Vec<f64> {
        let mut out = Vec::with_capacity(frames.len() * self.classes);
        for chunk in frames.chunks(64) {
            let refs: Vec<&Frame> = chunk.iter().collect();
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &self.store).with_frozen("");
            out.extend(self.logits(&cx, cx.constant(&frames_tensor(&refs))).softmax_rows().value());
        }
        out
    }

    pub fn accuracy(&self, data: &[(Frame, usize)]) -> f64 {
        let frames: Vec<Frame> = data.iter().map(|(f, _)| f.clone()).collect();
        let p = self.probs(&frames);
        let hits = p
            .chunks(self.classes)
            .zip(data)
            .filter(|(row, (_, l))| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(i, _)| i)
                    == Some(*l)
            })
            .count();
        hits as f64 / data.len().max(1) as f64
    }
}

/// Trains on class-balanced minibatches and records validation accuracy.
pub fn train_frame_classifier(
    train: &[(Frame, usize)],
    val: &[(Frame, usize)],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<FrameClassifier, EvalError> {
    let by_class: Vec<Vec<&Frame>> = (0..classes)
        .map(|c| train.iter().filter(|(_, l)| *l == c).map(|(f, _)| f).collect())
        .collect();
    if by_class.iter().any(|v| v.is_empty()) || val.is_empty() {
        return Err(EvalError::NotEnoughData("classifier needs frames of every class".into()));
    }
    let mut clf = FrameClassifier::new(classes, &mut stream(cfg.seed, "cls/init"));
    let mut rng = stream(cfg.seed, "cls/batch");
    let mut opt = AdamW::new(vec![("cls.".into(), AdamConfig::new(cfg.lr, 0.0))]);
    for _ in 0..cfg.steps {
        let mut frames = Vec::with_capacity(cfg.batch);
        let mut labels = Vec::with_capacity(cfg.batch);
        for k in 0..cfg.batch {
            let c = k % classes;
            frames.push(by_class[c][rng.random_range(0..by_class[c].len())]);
            labels.push(c);
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &clf.store);
        let loss = clf.logits(&cx, cx.constant(&frames_tensor(&frames))).softmax_cross_entropy(&labels)?;
        tape.backward(loss).write_params(&tape, &mut clf.store);
        opt.step(&mut clf.store);
    }
    clf.val_accuracy = clf.accuracy(val);
    Ok(clf)
}

/// Frame of a latent token.
pub fn token_frame(spec: &DgpSpec, v: &[f64]) -> Frame {
    spec.frame_from_observation(&spec.decode(v)).0
}

/// Every `every`-th frame of every episode in `split`, labelled by embodiment.
pub fn labeled_frames(ds: &Dataset, split: Split, spec: &DgpSpec, every: usize) -> Vec<(Frame, usize)> {
    let mut out = Vec::new();
    for r in ds.split(split) {
        for i in (0..r.traj.t).step_by(every.max(1)) {
            out.push((token_frame(spec, r.traj.x_row(i)), r.traj.embodiment));
        }
    }
    out
}
