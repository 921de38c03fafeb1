use proptest::prelude::*;
use rand::Rng;
use scar_core::gradcheck::gradcheck_params;
use scar_core::nn::Ctx;
use scar_core::rng::stream;
use scar_core::{ParamStore, Tape, Tensor, TensorError};
use scar_models::fdm::{Cond, CondEncoder, Fdm};
use scar_models::*;

fn ks_pvalue(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        d = d.max((x - i as f64 / n).abs()).max(((i + 1) as f64 / n - x).abs());
    }
    // asymptotic Kolmogorov tail with the small-sample correction
    let lam = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut q = 0.0;
    for k in 1..100 {
        let k = k as f64;
        q += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lam * lam).exp();
    }
    q.clamp(0.0, 1.0)
}

#[test]
fn history_uniform_without_clean_forcing() {
    let mut rng = stream(1, "df-ks");
    let tau = diffusion_forcing_schedule(10_000, 17, 5, 0.0, &mut rng);
    let hist: Vec<f64> = tau.chunks(17).map(|s| s[2]).collect();
    assert!(ks_pvalue(hist) > 0.01);
}

#[test]
fn future_levels_unaffected_by_clean_forcing() {
    for p in [0.0, 0.5, 1.0] {
        let mut rng = stream(2, "df-ks-future");
        let tau = diffusion_forcing_schedule(10_000, 17, 5, p, &mut rng);
        let fut: Vec<f64> = tau.chunks(17).map(|s| s[11]).collect();
        assert!(ks_pvalue(fut) > 0.01, "p_clean {p}");
    }
}

proptest! {
    #[test]
    fn flow_batch_algebra_is_exact(
        v in prop::collection::vec(-5.0f64..5.0, 12),
        e in prop::collection::vec(-5.0f64..5.0, 12),
        tau in prop::collection::vec(0.0f64..=1.0, 4),
    ) {
        let fb = make_flow_target(&v, &e, &tau, 3, Schedule::Linear).unwrap();
        for r in 0..4 {
            for k in r * 3..r * 3 + 3 {
                prop_assert_eq!(fb.v_tilde[k], (1.0 - tau[r]) * v[k] + tau[r] * e[k]);
                prop_assert_eq!(fb.u_tau[k], e[k] - v[k]);
            }
        }
    }
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_v: 3,
        d_z: 2,
        d_a: 2,
        t: 5,
        f_hist: 2,
        fdm_hidden: 6,
        fdm_blocks: 2,
        cond_width: 4,
        time_width: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn fdm_forward_gradcheck() {
    let cfg = small_cfg();
    let mut rng = stream(3, "fdm-gc");
    for inst in 0..10 {
        let mut store = ParamStore::new();
        let fdm = Fdm::new(&mut store, &cfg, &mut rng);
        let enc = CondEncoder::new(&mut store, cfg.d_z, &cfg, &mut rng);
        // nonzero modulation so the conditioning path is exercised
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains("mod") {
                let n = store.get(id).numel();
                let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
                store.set_values(id, &vals).unwrap();
            }
        }
        let b = 2;
        let vt = store.add("x.v", Tensor::matrix(b * cfg.t, cfg.d_v, (0..b * cfg.t * cfg.d_v).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let z = store.add("x.z", Tensor::matrix(b * (cfg.t - 1), cfg.d_z, (0..b * (cfg.t - 1) * cfg.d_z).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let tau: Vec<f64> = (0..b * cfg.t).map(|_| rng.random_range(0.0..1.0)).collect();
        let target = Tensor::matrix(b * cfg.t, cfg.d_v, (0..b * cfg.t * cfg.d_v).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ids: Vec<_> = store.ids().collect();
        let err = gradcheck_params(
            |t, s| {
                let cx = Ctx::new(t, s);
                let c = enc.forward(&cx, cx.p(z), b, cfg.t).map_err(|e| TensorError::Invalid(e.to_string()))?;
                let out = fdm
                    .predict(&cx, cx.p(vt), &tau, Cond::Tokens(c), b)
                    .map_err(|e| TensorError::Invalid(e.to_string()))?;
                Ok(out.mse(cx.constant(&target)))
            },
            &store,
            &ids,
            1e-3,
            24,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "instance {inst}: {err}");
    }
}

fn tiny_dataset() -> (scar_world::DgpSpec, scar_world::Dataset) {
    let spec = scar_world::DgpSpec::build(scar_world::DgpConfig::default()).unwrap();
    let counts = scar_world::DataCounts {
        target_train: 4,
        source_train: 6,
        eval_target: 4,
        eval_transfer: 2,
        a2l: 6,
        analysis: 2,
    };
    let ds = scar_world::generate_dataset(5, &counts, &spec).unwrap();
    (spec, ds)
}

#[test]
fn loss_accounting_and_linearity() {
    let (_, ds) = tiny_dataset();
    let mc = ModelConfig::default();
    let (model, store) = ScarModel::new(&mc, CondSource::Latent, 2).unwrap();
    let pool = training_pool(&ds, Variant::ScarKlGrl);
    let batch = EpisodeBatch::new(&pool[..4], &mc).unwrap();
    let eval = |cfg: &TrainConfig| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let p = total_loss(&cx, &model, &batch, cfg, &mut stream(9, "loss")).unwrap();
        (p.total.item(), p.rec.item(), p.kl.map(|v| v.item()), p.grl.map(|v| v.item()))
    };
    let shared = TrainConfig::new(Variant::SharedLatent, 0);
    let (t, r, k, g) = eval(&shared);
    assert_eq!(t, r);
    assert!(k.is_none() && g.is_none());

    let mut cfg = TrainConfig::new(Variant::ScarKlGrl, 0);
    let (t1, r1, k1, g1) = eval(&cfg);
    assert_eq!(t1, r1 + cfg.beta * k1.unwrap() + cfg.lambda_adv * g1.unwrap());
    assert_eq!(r1, r);
    cfg.beta *= 2.0;
    let (t2, r2, k2, g2) = eval(&cfg);
    assert_eq!((r2, k2, g2), (r1, k1, g1));
    let contrib = |t: f64, r: f64, g: f64, lam: f64| t - r - lam * g;
    let (c1, c2) = (contrib(t1, r1, g1.unwrap(), cfg.lambda_adv), contrib(t2, r2, g2.unwrap(), cfg.lambda_adv));
    assert!((c2 - 2.0 * c1).abs() < 1e-12 * c1.abs().max(1.0));
}

#[test]
fn short_run_is_bit_reproducible() {
    let (_, ds) = tiny_dataset();
    let mc = ModelConfig::default();
    let mut cfg = TrainConfig::new(Variant::ScarKlGrl, 4);
    cfg.steps = 100;
    cfg.batch = 4;
    let run = || {
        let (model, store) = ScarModel::new(&mc, CondSource::Latent, 4).unwrap();
        let out = train_scar(&model, store, &cfg, &training_pool(&ds, cfg.variant)).unwrap();
        (out.store.checksum(""), out.log.rows.iter().map(|r| r.total).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    for r in run().1.iter().zip(&la) {
        assert_eq!(r.0, r.1);
    }
}

#[test]
fn variant_gating_in_logs() {
    let (_, ds) = tiny_dataset();
    let mc = ModelConfig::default();
    for v in [Variant::SharedLatent, Variant::ScarKl, Variant::ScarGrl, Variant::ScarKlGrl] {
        let mut cfg = TrainConfig::new(v, 1);
        cfg.steps = 3;
        cfg.batch = 2;
        let (model, store) = ScarModel::new(&mc, CondSource::Latent, 1).unwrap();
        let out = train_scar(&model, store, &cfg, &training_pool(&ds, v)).unwrap();
        for r in &out.log.rows {
            assert_eq!(r.kl.is_some(), v.uses_kl());
            assert_eq!(r.grl.is_some(), v.uses_grl());
            assert_eq!(r.total, r.rec + cfg.beta * r.kl.unwrap_or(0.0) + cfg.lambda_adv * r.grl.unwrap_or(0.0));
        }
        let csv = out.log.to_csv();
        assert!(csv.starts_with("step,L_total,L_rec,L_KL,L_GRL,grad_norm,wall_ms\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}

#[test]
fn raw_action_baseline_and_target_only_pool() {
    let (_, ds) = tiny_dataset();
    let mc = ModelConfig::default();
    let mut cfg = TrainConfig::new(Variant::GtAction, 1);
    cfg.steps = 5;
    cfg.batch = 2;
    let (model, store) = ScarModel::new(&mc, CondSource::RawAction, 1).unwrap();
    let out = train_scar(&model, store, &cfg, &training_pool(&ds, cfg.variant)).unwrap();
    // the IDM is not part of this model's computation
    assert!(out.store.iter().filter(|(n, _)| n.starts_with("idm.")).all(|(_, t)| t.grad().is_none()));
    assert_eq!(training_pool(&ds, Variant::TargetOnlyLatent).len(), 4);
    assert_eq!(training_pool(&ds, Variant::SharedLatent).len(), 4 + 3 * 6);
}

#[test]
fn pretrained_fdm_loads_and_only_fdm_moves() {
    let (_, ds) = tiny_dataset();
    let mc = ModelConfig::default();
    let mut cfg = TrainConfig::new(Variant::ScarKlGrl, 2);
    cfg.batch = 4;
    cfg.steps = 5;
    let (model, store) = ScarModel::new(&mc, CondSource::Latent, 2).unwrap();
    let before = store.clone();
    let pre = pretrain_fdm(&model, store, &cfg, &training_pool(&ds, cfg.variant), 20).unwrap();
    for prefix in ["idm.", "cond.", "disc."] {
        assert_eq!(pre.store.checksum(prefix), before.checksum(prefix));
    }
    assert_ne!(pre.store.checksum("fdm."), before.checksum("fdm."));
    let (model2, mut fresh) = ScarModel::new(&mc, CondSource::Latent, 7).unwrap();
    let n = fresh.load_matching(&pre.store.subset("fdm.")).unwrap();
    assert_eq!(n, pre.store.ids_with_prefix("fdm.").count());
    train_scar(&model2, fresh, &cfg, &training_pool(&ds, cfg.variant)).unwrap();
}

#[test]
fn a2l_training_leaves_idm_untouched() {
    let (_, ds) = tiny_dataset();
    let mc = ModelConfig::default();
    let (model, mut store) = ScarModel::new(&mc, CondSource::Latent, 3).unwrap();
    let a2l = A2l::new(&mut store, &mc, A2lMode::Sequence, &mut stream(3, "init/a2l")).unwrap();
    let pool = ds.trajectories(scar_world::Split::A2l);
    for ft in [false, true] {
        let mut cfg = A2lTrainConfig::new(3);
        cfg.steps = 5;
        cfg.batch = 3;
        cfg.finetune = ft;
        let out = train_a2l(&model, &a2l, store.clone(), &cfg, &pool).unwrap();
        assert_eq!(out.store.checksum("idm."), store.checksum("idm."));
        assert_eq!(out.store.checksum("disc."), store.checksum("disc."));
        assert_ne!(out.store.checksum("a2l."), store.checksum("a2l."));
        assert_eq!(out.store.checksum("fdm.") != store.checksum("fdm."), ft);
    }
}

#[test]
fn rollout_clamps_context() {
    let (_, ds) = tiny_dataset();
    let mc = ModelConfig::default();
    let (model, store) = ScarModel::new(&mc, CondSource::Latent, 3).unwrap();
    let eps = ds.trajectories(scar_world::Split::EvalTarget);
    let batch = EpisodeBatch::new(&eps, &mc).unwrap();
    let ctx = model.context(&batch);
    let codes = model.codes(&store, &batch).unwrap();
    let out = model.rollout(&store, &ctx, &codes, batch.b, &mut stream(0, "roll")).unwrap();
    let d = mc.d_v;
    for ep in 0..batch.b {
        let got = &out[ep * batch.f * d..(ep * batch.f + mc.f_hist) * d];
        assert_eq!(got, &ctx[ep * mc.f_hist * d..(ep + 1) * mc.f_hist * d]);
    }
}

#[test]
fn discriminator_contracts() {
    let mc = ModelConfig::default();
    let (model, mut store) = ScarModel::new(&mc, CondSource::Latent, 6).unwrap();
    let mut rng = stream(6, "disc");
    let n = 400;
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let random_z = Tensor::matrix(n, mc.d_z, (0..n * mc.d_z).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let ce = model.disc.loss(&cx, cx.constant(&random_z), &labels, 0.25).unwrap().item();
    assert!((ce - 4f64.ln()).abs() < 0.1, "{ce}");

    // gradient into z is the plain classifier gradient times -alpha
    let zleaf = tape.leaf(&random_z);
    let g_rev = tape.backward(model.disc.loss(&cx, zleaf, &labels, 0.25).unwrap());
    let tape2 = Tape::new();
    let cx2 = Ctx::new(&tape2, &store);
    let zleaf2 = tape2.leaf(&random_z);
    let plain = model.disc.mlp.forward(&cx2, zleaf2).softmax_cross_entropy(&labels).unwrap();
    let g_plain = tape2.backward(plain);
    for (a, b) in g_rev.get(zleaf).unwrap().iter().zip(g_plain.get(zleaf2).unwrap()) {
        assert_eq!(*a, -0.25 * b);
    }

    // z copying a one-hot of e is learnable to near-zero loss
    let onehot: Vec<f64> = labels
        .iter()
        .flat_map(|&e| (0..mc.d_z).map(move |k| if k == e { 1.0 } else { 0.0 }))
        .collect();
    let z = Tensor::matrix(n, mc.d_z, onehot).unwrap();
    let mut opt = scar_core::optim::AdamW::new(vec![("disc.".into(), scar_core::optim::AdamConfig::new(1e-2, 0.0))]);
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let l = model.disc.loss(&cx, cx.constant(&z), &labels, 0.25).unwrap();
        last = l.item();
        tape.backward(l).write_params(&tape, &mut store);
        opt.step(&mut store);
    }
    assert!(last < 0.01, "{last}");
}
