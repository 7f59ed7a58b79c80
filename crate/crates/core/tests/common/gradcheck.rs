//! Central finite-difference checks (h = 1e-4, f64) for every network and
//! every loss pathway of the training objectives. Shared by the `gradients`
//! tests and the acceptance run.

use disentangle::factorgen::NEUTRAL;
use disentangle::image::ImageShape;
use disentangle::losses::{self, LossWeights};
use disentangle::model::{
    architecture, classifier_layers, decoder_layers, encoder_layers, Mode, ModelBundle, ModelConfig, Problem, C_EXP,
    C_POSE, DISC, E_EXP, E_ID, E_POSE, G_DEC,
};
use disentangle::nn::{Grads, Network, ParamIndex, Tensor};
use disentangle::trainer::{classifier_objective, discriminator_objective, generator_objective, Batch, Objective};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const MIN_CLEAN: usize = 24;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn problem() -> Problem {
    Problem { shape: ImageShape::default(), num_expressions: 6, num_pose_buckets: 5 }
}

fn network(name: &str, layers: Vec<disentangle::nn::LayerKind>, seed: u64) -> Network<f64> {
    let mut net = Network::new(name, layers);
    net.init(&mut ChaCha8Rng::seed_from_u64(seed));
    net
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
}

/// Check `grads` against central differences of `f` on at least 20 sampled
/// parameters of `net`, always including the first and last entry of every
/// parameter tensor.
///
/// A parameter whose slopes over the four half-steps of `[-h, h]` bend
/// (non-zero second difference, which smooth curvature does not produce at
/// this scale) has a ReLU or L1 kink inside the stencil, where central differences say
/// nothing about the derivative at 0; such draws are skipped and not counted.
fn check_params(
    what: &str,
    net: &mut Network<f64>,
    grads: &Grads<f64>,
    rng: &mut ChaCha8Rng,
    tol: f64,
    mut f: impl FnMut(&Network<f64>) -> f64,
) {
    let all = net.param_indices();
    let mut order: Vec<ParamIndex> = all
        .iter()
        .enumerate()
        .filter(|(i, idx)| idx.offset == 0 || all.get(i + 1).map_or(true, |n| (n.layer, n.param) != (idx.layer, idx.param)))
        .map(|(_, idx)| *idx)
        .collect();
    let mut rest = all.clone();
    rest.shuffle(rng);
    order.extend(rest);
    let (mut clean, mut kinks, mut worst) = (0usize, 0usize, 0.0f64);
    let base = f(net);
    for idx in order {
        if clean >= MIN_CLEAN {
            break;
        }
        let orig = net.param(idx);
        let mut at = |dx: f64| {
            *net.param_mut(idx) = orig + dx;
            let v = f(net);
            *net.param_mut(idx) = orig;
            v
        };
        let fs = [at(-H), at(-H / 2.0), base, at(H / 2.0), at(H)];
        let numeric = (fs[4] - fs[0]) / (2.0 * H);
        let analytic = grads.layers[idx.layer][idx.param][idx.offset];
        let slopes: Vec<f64> = fs.windows(2).map(|w| (w[1] - w[0]) / (H / 2.0)).collect();
        let scale = slopes.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bend = slopes.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max);
        if scale > 1e-10 && bend > tol * scale {
            kinks += 1;
            continue;
        }
        let e = rel_err(analytic, numeric);
        assert!(e < tol, "{what} {idx:?}: analytic {analytic:e} vs numeric {numeric:e} (rel {e:e})");
        worst = worst.max(e);
        clean += 1;
    }
    assert!(clean >= MIN_CLEAN, "{what}: only {clean} differentiable parameters found ({kinks} kinks)");
    eprintln!("{what}: {clean} params, {kinks} kinks, worst relative error {worst:.2e}");
}

/// Random scalar projection of the output: analytic parameter gradients vs
/// central differences.
fn check_projection(what: &str, mut net: Network<f64>, input: Tensor<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_len = net.forward(&input).unwrap().len();
    let proj: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let trace = net.trace(&input).unwrap();
    let mut grads = net.zero_grads();
    net.backward_params(&trace, &Tensor::new(trace.output.shape().to_vec(), proj.clone()), &mut grads);
    let f = |n: &Network<f64>| n.forward(&input).unwrap().data().iter().zip(&proj).map(|(a, b)| a * b).sum();
    check_params(what, &mut net, &grads, &mut rng, TOL, f);
}

pub fn encoder_projection_gradients() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(vec![1, 32, 32], &mut rng);
    check_projection("encoder", network("enc", encoder_layers(&cfg, 1), 1), x, 11);
}

pub fn decoder_projection_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for instance_norm in [false, true] {
        let cfg = ModelConfig { instance_norm, ..ModelConfig::default() };
        let f = Tensor::new(vec![cfg.feature_dim], (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let net = network("dec", decoder_layers(&cfg, ImageShape::default()), 2);
        check_projection(if instance_norm { "decoder+in" } else { "decoder" }, net, f, 12);
    }
}

pub fn discriminator_projection_gradients() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(vec![1, 32, 32], &mut rng);
    let net = network("d", architecture(DISC, &cfg, &problem()).unwrap(), 3);
    check_projection("discriminator", net, x, 13);
}

pub fn classifier_gradients_meet_tighter_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = Tensor::new(vec![64], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut net = network("c", classifier_layers(64, 6), 4);
    let trace = net.trace(&f).unwrap();
    let (_, g) = losses::cross_entropy(trace.output.data(), 2).unwrap();
    let mut grads = net.zero_grads();
    net.backward_params(&trace, &Tensor::from_vec(g), &mut grads);
    let loss = |n: &Network<f64>| losses::cross_entropy(n.forward(&f).unwrap().data(), 2).unwrap().0;
    check_params("classifier", &mut net, &grads, &mut rng, 1e-4, loss);
}

pub fn decoded_mean_pixel_gradient_wrt_feature() {
    let cfg = ModelConfig::default();
    let net = network("dec", decoder_layers(&cfg, ImageShape::default()), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean = |v: &[f64]| {
        let out = net.forward(&Tensor::from_vec(v.to_vec())).unwrap();
        out.data().iter().sum::<f64>() / out.len() as f64
    };
    let trace = net.trace(&Tensor::from_vec(f.clone())).unwrap();
    let n = trace.output.len();
    let df = net.backward(&trace, &Tensor::new(trace.output.shape().to_vec(), vec![1.0 / n as f64; n]), None);
    for i in 0..f.len() {
        let (mut up, mut down) = (f.clone(), f.clone());
        up[i] += H;
        down[i] -= H;
        let numeric = (mean(&up) - mean(&down)) / (2.0 * H);
        let e = rel_err(df.data()[i], numeric);
        assert!(e < TOL, "component {i}: {} vs {numeric} (rel {e:e})", df.data()[i]);
    }
}

/// Gradient of a loss w.r.t. its input vector vs central differences.
fn check_input_grad(what: &str, x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
    for i in 0..x.len() {
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[i] += H;
        down[i] -= H;
        let numeric = (f(&up) - f(&down)) / (2.0 * H);
        let e = rel_err(grad[i], numeric);
        assert!(e < TOL, "{what}[{i}]: {} vs {numeric} (rel {e:e})", grad[i]);
    }
}

pub fn loss_input_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect() };
    let logits = vec(6);
    let (_, g) = losses::cross_entropy(&logits, 3).unwrap();
    check_input_grad("cross_entropy", &logits, &g, |l| losses::cross_entropy(l, 3).unwrap().0);
    let (_, g) = losses::confusion(&logits);
    check_input_grad("confusion", &logits, &g, |l| losses::confusion(l).0);

    let (a, b) = (vec(16), vec(16));
    let term = losses::abs_cosine(&a, &b).unwrap();
    check_input_grad("abs_cosine/a", &a, &term.grad_a, |v| losses::abs_cosine(v, &b).unwrap().value);
    check_input_grad("abs_cosine/b", &b, &term.grad_b, |v| losses::abs_cosine(&a, v).unwrap().value);
    let neg: Vec<f64> = b.iter().map(|v| -v).collect();
    let term = losses::abs_cosine(&a, &neg).unwrap();
    check_input_grad("abs_cosine/neg", &neg, &term.grad_b, |v| losses::abs_cosine(&a, v).unwrap().value);

    let (p, q) = (vec(32), vec(32));
    let (_, g) = losses::mean_abs_diff(&p, &q).unwrap();
    check_input_grad("mean_abs_diff", &p, &g, |v| losses::mean_abs_diff(v, &q).unwrap().0);

    let shape = vec![1, 4, 4];
    let t = |v: Vec<f64>| Tensor::new(shape.clone(), v);
    let (ipe, ip, x) = (vec(16), vec(16), vec(16));
    for y_e in [NEUTRAL, 3] {
        let (_, g_ipe, g_ip) = losses::recon_sample(&t(ipe.clone()), &t(ip.clone()), &t(x.clone()), y_e, NEUTRAL).unwrap();
        let recon = |a: &[f64], b: &[f64]| {
            losses::recon_sample(&t(a.to_vec()), &t(b.to_vec()), &t(x.clone()), y_e, NEUTRAL).unwrap().0
        };
        check_input_grad("recon/ipe", &ipe, g_ipe.data(), |v| recon(v, &ip));
        check_input_grad("recon/ip", &ip, g_ip.data(), |v| recon(&ipe, v));
    }
}

fn bundle(mode: Mode, seed: u64) -> ModelBundle<f64> {
    let cfg = ModelConfig::default();
    let mut identity = network(E_ID, encoder_layers(&cfg, 1), seed + 100);
    identity.freeze();
    ModelBundle::new(cfg, problem(), mode, Some(identity), seed).unwrap()
}

fn batch(bundle: &ModelBundle<f64>, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(vec![1, 32, 32], &mut rng)).collect();
    let f_id = bundle
        .e_id
        .as_ref()
        .map(|n| x.iter().map(|t| disentangle::model::Feature::from_tensor(n.forward(t).unwrap())).collect());
    Batch { y_e: vec![NEUTRAL, 2, 5], y_p: vec![0, 4, 2], x, f_id }
}

/// Check every network an objective carries gradients for.
fn check_objective(
    what: &str,
    mut bundle: ModelBundle<f64>,
    batch: &Batch<f64>,
    seed: u64,
    require_all: bool,
    objective: impl Fn(&ModelBundle<f64>, &Batch<f64>) -> Objective<f64>,
) {
    let obj = objective(&bundle, batch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, grads) in &obj.grads {
        assert!(!require_all || !grads.is_zero(), "{what}: no gradient for {name}");
        let mut net = bundle.network(name).unwrap().clone();
        let probe = |n: &Network<f64>| {
            let mut b = bundle.clone();
            *b.network_mut(name).unwrap() = n.clone();
            objective(&b, batch).value
        };
        check_params(&format!("{what}/{name}"), &mut net, grads, &mut rng, TOL, probe);
        *bundle.network_mut(name).unwrap() = net;
    }
}

pub fn classifier_objective_gradients() {
    let w = LossWeights::default();
    for mode in Mode::ALL {
        let b = bundle(mode, 7);
        let batch = batch(&b, 7);
        let expected: &[&str] = if mode.has_pose() { &[E_EXP, C_EXP, E_POSE, C_POSE] } else { &[E_EXP, C_EXP] };
        let obj = classifier_objective(&b, &batch, &w).unwrap();
        assert_eq!(obj.grads.iter().map(|(n, _)| *n).collect::<Vec<_>>(), expected);
        check_objective(&format!("classifier[{}]", mode.as_str()), b, &batch, 17, true, |b, x| {
            classifier_objective(b, x, &w).unwrap()
        });
    }
}

pub fn discriminator_objective_gradients() {
    let b = bundle(Mode::Ipd, 8);
    let batch = batch(&b, 8);
    check_objective("discriminator", b, &batch, 18, true, |b, x| discriminator_objective(b, x).unwrap());
}

pub fn generator_objective_gradients() {
    let w = LossWeights::default();
    for mode in [Mode::Ipd, Mode::IdOnly] {
        let b = bundle(mode, 9);
        let batch = batch(&b, 9);
        let names: Vec<&str> = generator_objective(&b, &batch, &w, true, true).unwrap().grads.iter().map(|g| g.0).collect();
        let mut expected = vec![E_EXP, G_DEC];
        if mode == Mode::Ipd {
            expected.push(E_POSE);
        }
        assert_eq!(names, expected);
        check_objective(&format!("generator[{}]", mode.as_str()), b, &batch, 19, true, |b, x| {
            generator_objective(b, x, &w, true, true).unwrap()
        });
    }
}

pub fn generator_objective_gradients_per_term() {
    // Each weighted term on its own, so a cancelling error cannot hide.
    let b = bundle(Mode::Ipd, 10);
    let batch = batch(&b, 10);
    let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, beta1: 0.0, beta2: 0.0 };
    let terms = [
        ("neu_fake", LossWeights { lambda1: 1.0, ..zero }, true, false),
        ("exp_fake", LossWeights { lambda2: 1.0, ..zero }, true, false),
        ("id", LossWeights { lambda3: 1.0, ..zero }, false, true),
        ("recon", LossWeights { lambda4: 1.0, ..zero }, false, false),
        ("confusion", LossWeights { beta2: 1.0, ..zero }, false, false),
    ];
    for (i, (term, w, use_d, use_id)) in terms.into_iter().enumerate() {
        check_objective(&format!("generator/{term}"), b.clone(), &batch, 20 + i as u64, false, |b, x| {
            generator_objective(b, x, &w, use_d, use_id).unwrap()
        });
    }
}

/// Every check above, for callers without a test harness.
pub const ALL: [(&str, fn()); 10] = [
    ("encoder projection", encoder_projection_gradients),
    ("decoder projection", decoder_projection_gradients),
    ("discriminator projection", discriminator_projection_gradients),
    ("classifier cross-entropy", classifier_gradients_meet_tighter_tolerance),
    ("decoder input", decoded_mean_pixel_gradient_wrt_feature),
    ("loss inputs", loss_input_gradients),
    ("classifier objective", classifier_objective_gradients),
    ("discriminator objective", discriminator_objective_gradients),
    ("generator objective", generator_objective_gradients),
    ("generator objective per term", generator_objective_gradients_per_term),
];
