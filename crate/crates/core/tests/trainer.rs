//! Three-phase trainer: fix-set discipline, recomputation oracles, the Adam
//! oracle, short convergence runs, ablation logs, schedule, determinism and
//! resume.

use disentangle::checkpoint::Checkpoint;
use disentangle::factorgen::{build_dataset, Dataset, GeneratorConfig, NEUTRAL};
use disentangle::image::{Image, ImageShape};
use disentangle::losses::{self, LossWeights};
use disentangle::model::{
    compose, decode, discriminate, encode, encoder_layers, Mode, ModelBundle, ModelConfig, Problem, C_EXP, C_POSE,
    DISC, E_EXP, E_ID, E_POSE, G_DEC,
};
use disentangle::nn::{Adam, AdamConfig, Network};
use disentangle::trainer::{
    generator_objective, step_classifiers, step_discriminator, step_generator, Batch, MetricsRecord, TrainConfig,
    Trainer,
};
use disentangle::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset() -> Dataset {
    build_dataset(&GeneratorConfig {
        n_identities: 5,
        yaws: vec![0.0, 25.0, 45.0],
        num_expressions: 4,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn identity(seed: u64) -> Network<f32> {
    let mut net = Network::new(E_ID, encoder_layers(&ModelConfig::default(), 1));
    net.init(&mut ChaCha8Rng::seed_from_u64(seed));
    net.freeze();
    net
}

fn bundle(dataset: &Dataset, mode: Mode) -> ModelBundle<f32> {
    ModelBundle::new(ModelConfig::default(), Problem::of(dataset), mode, Some(identity(99)), 0).unwrap()
}

fn batch(dataset: &Dataset, bundle: &ModelBundle<f32>, indices: &[usize]) -> Batch<f32> {
    Batch::from_dataset(dataset, indices, bundle.e_id.as_ref()).unwrap()
}

/// Networks whose digests changed between two snapshots.
fn changed(before: &ModelBundle<f32>, after: &ModelBundle<f32>) -> Vec<&'static str> {
    [E_ID, E_POSE, E_EXP, G_DEC, DISC, C_POSE, C_EXP]
        .into_iter()
        .filter(|n| before.network(n).map(|x| x.digest()) != after.network(n).map(|x| x.digest()))
        .collect()
}

#[test]
fn each_step_changes_exactly_its_update_set() {
    let ds = small_dataset();
    let mut b = bundle(&ds, Mode::Ipd);
    let x = batch(&ds, &b, &(0..8).collect::<Vec<_>>());
    let w = LossWeights::default();
    let mut opt = Adam::new(AdamConfig::default());
    for _ in 0..3 {
        let before = b.clone();
        step_classifiers(&x, &mut b, &mut opt, 3e-3, &w).unwrap();
        assert_eq!(changed(&before, &b), [E_POSE, E_EXP, C_POSE, C_EXP]);

        let before = b.clone();
        let mut opt_d = Adam::new(AdamConfig::default());
        step_discriminator(&x, &mut b, &mut opt_d, 3e-3).unwrap();
        assert_eq!(changed(&before, &b), [DISC]);

        let before = b.clone();
        let mut opt_g = Adam::new(AdamConfig::default());
        step_generator(&x, &mut b, &mut opt_g, 3e-3, &w, true, true).unwrap();
        assert_eq!(changed(&before, &b), [E_POSE, E_EXP, G_DEC]);
    }
}

#[test]
fn id_only_steps_change_no_pose_networks() {
    let ds = small_dataset();
    let mut t = Trainer::new(TrainConfig::default(), bundle(&ds, Mode::IdOnly)).unwrap();
    let before = t.bundle.clone();
    let x = batch(&ds, &t.bundle, &[0, 5, 9, 13]);
    t.iterate(&x, 3e-3).unwrap();
    assert_eq!(changed(&before, &t.bundle), [E_EXP, G_DEC, DISC, C_EXP]);
    assert!(t.bundle.e_pose.is_none() && t.bundle.c_p.is_none());
}

#[test]
fn discriminator_loss_matches_recomputation() {
    let ds = small_dataset();
    let mut b = bundle(&ds, Mode::Ipd);
    let idx = [1, 6, 11, 20, 33];
    let x = batch(&ds, &b, &idx);
    let expected: f64 = idx
        .iter()
        .map(|&i| {
            let (logits, _) = discriminate(b.d().unwrap(), &ds.samples[i].image).unwrap();
            losses::cross_entropy(&logits, ds.samples[i].y_e).unwrap().0
        })
        .sum::<f64>()
        / idx.len() as f64;
    let report = step_discriminator(&x, &mut b, &mut Adam::new(AdamConfig::default()), 1e-3).unwrap();
    let got = report.d_real.unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn reconstruction_only_weights_reduce_to_loss_recon() {
    let ds = small_dataset();
    for mode in [Mode::Ipd, Mode::IdOnly] {
        let b = bundle(&ds, mode);
        // Neutral and non-neutral samples, so both recon branches appear.
        let idx = [0, 1, 2, 3, 12, 14];
        assert!(idx.iter().any(|&i| ds.samples[i].y_e == NEUTRAL));
        let x = batch(&ds, &b, &idx);
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 1.0, beta1: 0.0, beta2: 0.0 };
        let obj = generator_objective(&b, &x, &w, false, false).unwrap();

        let (mut ipe, mut ip, mut real, mut ys) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in &idx {
            let img = &ds.samples[i].image;
            let f_id = encode(b.e_id().unwrap(), img).unwrap();
            let f_exp = encode(&b.e_exp, img).unwrap();
            let (neutral, full) = match &b.e_pose {
                Some(e_pose) => {
                    let f_pose = encode(e_pose, img).unwrap();
                    (compose(&f_id, &f_pose, None).unwrap(), compose(&f_id, &f_pose, Some(&f_exp)).unwrap())
                }
                None => (f_id.clone(), compose(&f_id, &disentangle::model::Feature::zeros(64), Some(&f_exp)).unwrap()),
            };
            ip.push(decode(b.g_dec().unwrap(), &neutral).unwrap());
            ipe.push(decode(b.g_dec().unwrap(), &full).unwrap());
            real.push(img.clone());
            ys.push(ds.samples[i].y_e);
        }
        let expected = losses::loss_recon(&ipe, &ip, &real, &ys, NEUTRAL).unwrap();
        assert!((obj.value - expected).abs() < 1e-6, "{}: {} vs {expected}", mode.as_str(), obj.value);
        assert_eq!(obj.report.recon, Some(obj.value));
        assert!(obj.report.neu_fake.is_none() && obj.report.id.is_none());
    }
}

#[test]
fn reconstruction_decreases_monotonically_on_overfit_set() {
    let ds = small_dataset();
    let mut b = bundle(&ds, Mode::Ipd);
    let x = batch(&ds, &b, &(0..16).collect::<Vec<_>>());
    let w = LossWeights::default();
    let mut opt = Adam::new(AdamConfig::default());
    let mut recon = Vec::new();
    for _ in 0..51 {
        recon.push(step_generator(&x, &mut b, &mut opt, 1e-3, &w, true, true).unwrap().recon.unwrap());
    }
    for (k, pair) in recon.windows(2).enumerate() {
        assert!(pair[1] < pair[0], "recon rose at step {}: {} -> {}", k + 1, pair[0], pair[1]);
    }
}

/// Class `k` lights quadrant `k`; pose label `k % 2`.
fn separable_batch(b: &ModelBundle<f32>) -> Batch<f32> {
    let mut x = Vec::new();
    let (mut y_e, mut y_p) = (Vec::new(), Vec::new());
    for rep in 0..2 {
        for k in 0..4u32 {
            let mut px = vec![0.1f32 + 0.05 * rep as f32; 32 * 32];
            let (oy, ox) = ((k as usize / 2) * 16, (k as usize % 2) * 16);
            for y in oy..oy + 16 {
                for xx in ox..ox + 16 {
                    px[y * 32 + xx] = 0.9;
                }
            }
            x.push(Image::new(ImageShape::default(), px).unwrap().to_tensor());
            y_e.push(k);
            y_p.push(k % 2);
        }
    }
    let f_id = b.e_id.as_ref().map(|n| x.iter().map(|t| disentangle::model::Feature::from_tensor(n.forward(t).unwrap())).collect());
    Batch { x, y_e, y_p, f_id }
}

#[test]
fn classifier_loss_falls_below_log_k_on_separable_batch() {
    let ds = small_dataset();
    let mut b = bundle(&ds, Mode::Ipd);
    let x = separable_batch(&b);
    let mut opt = Adam::new(AdamConfig::default());
    let log_k = (ds.meta.num_expressions as f64).ln();
    let mut reached = None;
    for it in 0..200 {
        let mut r = step_classifiers(&x, &mut b, &mut opt, 3e-3, &LossWeights::default()).unwrap();
        r.finalize(&LossWeights::default()).unwrap();
        if r.c < log_k {
            reached = Some(it);
            break;
        }
    }
    assert!(reached.is_some(), "L_c stayed above log K = {log_k} for 200 iterations");
}

#[test]
fn adam_update_matches_independent_oracle() {
    let ds = small_dataset();
    let mut b = bundle(&ds, Mode::Baseline);
    let x = batch(&ds, &b, &[3, 7, 21, 40]);
    let w = LossWeights::default();
    let mut opt = Adam::new(AdamConfig::default());
    let lr = 3e-3;
    for _ in 0..4 {
        step_classifiers(&x, &mut b, &mut opt, lr, &w).unwrap();
    }
    let before = b.clone();
    let moments = opt.state.clone();
    let obj = disentangle::trainer::classifier_objective(&b, &x, &w).unwrap();
    disentangle::trainer::apply(&mut b, &mut opt, lr, &obj).unwrap();
    let t = opt.step as i32;
    assert_eq!(t, 5);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    for (name, grads) in &obj.grads {
        let old = before.network(name).unwrap();
        let new = b.network(name).unwrap();
        let m0 = &moments[*name];
        let mut slot = 0;
        for (li, layer) in old.layers.iter().enumerate() {
            for (pi, p) in layer.params.iter().enumerate() {
                for i in (0..p.data.len()).step_by(97) {
                    let g = grads.layers[li][pi][i] as f64;
                    let m = b1 * m0.m[slot][i] as f64 + (1.0 - b1) * g;
                    let v = b2 * m0.v[slot][i] as f64 + (1.0 - b2) * g * g;
                    let m_hat = m / (1.0 - b1.powi(t));
                    let v_hat = v / (1.0 - b2.powi(t));
                    let expected = p.data[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps);
                    let got = new.layers[li].params[pi].data[i] as f64;
                    assert!((got - expected).abs() <= 1e-6 * (1.0 + expected.abs()), "{name}.{li}.{pi}[{i}]: {got} vs {expected}");
                }
                slot += 1;
            }
        }
    }
}

#[test]
fn discriminator_accuracy_increases_on_fixed_data() {
    let ds = small_dataset();
    let mut b = bundle(&ds, Mode::Ipd);
    let idx: Vec<usize> = (0..ds.samples.len()).step_by(3).take(16).collect();
    let x = batch(&ds, &b, &idx);
    let accuracy = |b: &ModelBundle<f32>| {
        idx.iter().filter(|&&i| discriminate(b.d().unwrap(), &ds.samples[i].image).unwrap().1.argmax() as u32 == ds.samples[i].y_e).count()
            as f64
            / idx.len() as f64
    };
    let start = accuracy(&b);
    let mut opt = Adam::new(AdamConfig::default());
    for _ in 0..500 {
        step_discriminator(&x, &mut b, &mut opt, 1e-3).unwrap();
    }
    let end = accuracy(&b);
    assert!(end > start, "D accuracy {start} -> {end}");
}

fn short_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, ..TrainConfig::default() }
}

fn run_collect(trainer: &mut Trainer, ds: &Dataset) -> Vec<MetricsRecord> {
    let mut log = Vec::new();
    trainer
        .run(
            ds,
            &mut |r| {
                log.push(r.clone());
                Ok(())
            },
            &mut |_, _| Ok(()),
        )
        .unwrap();
    log
}

#[test]
fn ablation_logs_contain_only_their_terms() {
    let ds = small_dataset();
    let key_set = |mode: Mode| {
        let mut t = Trainer::new(short_config(1), bundle(&ds, mode)).unwrap();
        let log = run_collect(&mut t, &ds);
        let v = serde_json::to_value(&log[0]).unwrap();
        let mut keys: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        keys
    };
    assert_eq!(key_set(Mode::Baseline), ["c", "epoch", "exp_cls", "lr", "step"]);
    let id_only = key_set(Mode::IdOnly);
    assert!(!id_only.iter().any(|k| k == "pose_cls" || k == "confusion"), "{id_only:?}");
    assert!(id_only.iter().any(|k| k == "recon"));
    let ipd = key_set(Mode::Ipd);
    for k in ["recon", "id", "cos", "confusion", "pose_cls", "d_real", "neu_fake", "exp_fake", "g_prime", "g_total"] {
        assert!(ipd.iter().any(|x| x == k), "ipd log lacks {k}");
    }
}

#[test]
fn learning_rate_follows_step_schedule() {
    let cfg = TrainConfig::default();
    for e in 0..30 {
        let expected = 3e-3 * 0.1f64.powi((e / 10) as i32);
        assert!((cfg.lr_at(e) - expected).abs() <= 1e-18, "epoch {e}");
    }
    let ds = small_dataset();
    let cfg = TrainConfig { lr_decay_every: 1, ..short_config(3) };
    let mut t = Trainer::new(cfg.clone(), bundle(&ds, Mode::Baseline)).unwrap();
    for r in run_collect(&mut t, &ds) {
        assert_eq!(r.lr, cfg.lr * 0.1f64.powi(r.epoch as i32));
    }
}

#[test]
fn identical_runs_are_identical_and_identity_stays_frozen() {
    let ds = small_dataset();
    let run = || {
        let mut t = Trainer::new(short_config(2), bundle(&ds, Mode::Ipd)).unwrap();
        let log = run_collect(&mut t, &ds);
        (log, t.bundle.digests())
    };
    let (log_a, dig_a) = run();
    let (log_b, dig_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(dig_a, dig_b);
    let e_id = dig_a.iter().find(|(n, _)| n == E_ID).unwrap();
    assert_eq!(e_id.1, identity(99).digest());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let ds = small_dataset();
    let mut full = Trainer::new(short_config(2), bundle(&ds, Mode::Ipd)).unwrap();
    let full_log = run_collect(&mut full, &ds);

    let mut first = Trainer::new(short_config(1), bundle(&ds, Mode::Ipd)).unwrap();
    let mut log = run_collect(&mut first, &ds);
    let bytes = Checkpoint::from_trainer(&first).to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().trainer(Some(short_config(2))).unwrap();
    assert_eq!((resumed.epoch, resumed.step), (first.epoch, first.step));
    log.extend(run_collect(&mut resumed, &ds));

    assert_eq!(log, full_log);
    assert_eq!(resumed.bundle.digests(), full.bundle.digests());
    assert_eq!(resumed.optimizers, full.optimizers);
}

#[test]
fn mismatched_dataset_is_rejected_before_training() {
    let ds = small_dataset();
    let mut t = Trainer::new(short_config(1), bundle(&ds, Mode::Ipd)).unwrap();
    let other = build_dataset(&GeneratorConfig { n_identities: 5, num_expressions: 3, ..GeneratorConfig::default() }).unwrap();
    let before = t.bundle.clone();
    let err = t.run(&other, &mut |_| Ok(()), &mut |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    assert_eq!(t.bundle, before);
    assert_eq!(t.step, 0);
}

#[test]
fn invalid_config_is_rejected() {
    let ds = small_dataset();
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { weights: LossWeights { lambda4: -1.0, ..LossWeights::default() }, ..TrainConfig::default() },
    ] {
        assert!(matches!(Trainer::new(cfg, bundle(&ds, Mode::Ipd)), Err(Error::Config(_))));
    }
}

#[test]
fn ablation_switches_zero_their_weights() {
    let cfg = TrainConfig { use_confusion: false, use_cos: false, use_id_loss: false, use_discriminator: false, ..TrainConfig::default() };
    let w = cfg.effective_weights();
    assert_eq!((w.lambda1, w.lambda2, w.lambda3, w.beta1, w.beta2), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert_eq!(w.lambda4, 10.0);
}
