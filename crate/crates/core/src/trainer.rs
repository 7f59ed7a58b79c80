//! Three-phase alternating optimization.
//!
//! Each iteration takes one batch through
//! 1. the classifier phase: `L_c + β1·L_cos` over {E_pose, C_p, E_exp, C_exp};
//! 2. the discriminator phase: real-image cross-entropy over {D};
//! 3. the generator phase: `λ1·L_neu + λ2·L_exp_fake + λ3·L_id + λ4·L_recon +
//!    β2·L_confusion` over {E_pose, E_exp, G_dec}.
//!
//! Each phase owns its own Adam instance. Everything outside a phase's update
//! set is left bit-identical; gradients still flow *through* D, C_p and the
//! frozen identity encoder to reach the networks being updated.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorgen::{Dataset, NEUTRAL};
use crate::losses::{self, LossReport, LossWeights};
use crate::model::{sum_features, Feature, Mode, ModelBundle, Problem};
use crate::model::{C_EXP, C_POSE, DISC, E_EXP, E_POSE, G_DEC};
use crate::nn::{Adam, AdamConfig, Grads, Network, Real, Tensor, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fold held out for evaluation; all other folds train.
    pub test_fold: u32,
    pub use_confusion: bool,
    pub use_cos: bool,
    pub use_id_loss: bool,
    pub use_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 3e-3,
            lr_decay: 0.1,
            lr_decay_every: 10,
            epochs: 30,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            test_fold: 0,
            use_confusion: true,
            use_cos: true,
            use_id_loss: true,
            use_discriminator: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("batch_size, epochs and lr_decay_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        self.weights.validate()
    }

    /// `lr · decay^⌊epoch / every⌋` for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_discriminator {
            w.lambda1 = 0.0;
            w.lambda2 = 0.0;
        }
        if !self.use_id_loss {
            w.lambda3 = 0.0;
        }
        if !self.use_cos {
            w.beta1 = 0.0;
        }
        if !self.use_confusion {
            w.beta2 = 0.0;
        }
        w
    }
}

/// Images and labels of one batch with the frozen identity features of the
/// real images already computed.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Vec<Tensor<T>>,
    pub y_e: Vec<u32>,
    pub y_p: Vec<u32>,
    pub f_id: Option<Vec<Feature<T>>>,
}

impl<T: Real> Batch<T> {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize], e_id: Option<&Network<T>>) -> Result<Self> {
        let x: Vec<Tensor<T>> = indices.iter().map(|&i| dataset.samples[i].image.to_tensor()).collect();
        let f_id = match e_id {
            Some(net) => Some(x.iter().map(|t| Ok(Feature::from_tensor(net.forward(t)?))).collect::<Result<_>>()?),
            None => None,
        };
        Ok(Self {
            y_e: indices.iter().map(|&i| dataset.samples[i].y_e).collect(),
            y_p: indices.iter().map(|&i| dataset.samples[i].y_p).collect(),
            x,
            f_id,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn identity(&self) -> Result<&[Feature<T>]> {
        self.f_id.as_deref().ok_or(Error::MissingNetwork(crate::model::E_ID))
    }
}

/// Value and parameter gradients of one phase's objective on one batch.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    /// The weighted scalar this phase minimizes.
    pub value: f64,
    pub report: LossReport,
    /// Gradients for exactly the networks this phase updates.
    pub grads: Vec<(&'static str, Grads<T>)>,
}

fn grads_for<'a, T: Real>(grads: &'a mut [(&'static str, Grads<T>)], name: &str) -> &'a mut Grads<T> {
    &mut grads.iter_mut().find(|(n, _)| *n == name).expect("update set contains network").1
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.into()))
    }
}

/// Phase 1 objective: `L_exp + L_pose + β1·L_cos`.
///
/// Baseline mode reduces this to `L_exp`.
pub fn classifier_objective<T: Real>(
    bundle: &ModelBundle<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
) -> Result<Objective<T>> {
    let n = batch.len();
    let scale = T::lit(1.0 / n as f64);
    let baseline = bundle.mode == Mode::Baseline;
    let mut grads = vec![(E_EXP, bundle.e_exp.zero_grads()), (C_EXP, bundle.c_exp.zero_grads())];
    if let (Some(e_pose), Some(c_p)) = (&bundle.e_pose, &bundle.c_p) {
        grads.push((E_POSE, e_pose.zero_grads()));
        grads.push((C_POSE, c_p.zero_grads()));
    }
    let (mut exp_cls, mut pose_cls, mut cos) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let te = bundle.e_exp.trace(&batch.x[i])?;
        let tc = bundle.c_exp.trace(&te.output)?;
        let (l_exp, g_logits) = losses::cross_entropy(tc.output.data(), batch.y_e[i])?;
        exp_cls += l_exp;
        let mut df_exp = bundle.c_exp.backward(&tc, &Tensor::from_vec(g_logits).scale(scale), Some(grads_for(&mut grads, C_EXP)));
        if !baseline {
            let f_id = &batch.identity()?[i];
            let term = losses::abs_cosine(&f_id.values, te.output.data())?;
            cos += term.value;
            let g = Tensor::from_vec(term.grad_b).scale(T::lit(weights.beta1 / n as f64));
            df_exp.add_assign(&g);
        }
        bundle.e_exp.backward_params(&te, &df_exp, grads_for(&mut grads, E_EXP));
        if let (Some(e_pose), Some(c_p)) = (&bundle.e_pose, &bundle.c_p) {
            let tp = e_pose.trace(&batch.x[i])?;
            let tcp = c_p.trace(&tp.output)?;
            let (l_pose, g_logits) = losses::cross_entropy(tcp.output.data(), batch.y_p[i])?;
            pose_cls += l_pose;
            let df_pose = c_p.backward(&tcp, &Tensor::from_vec(g_logits).scale(scale), Some(grads_for(&mut grads, C_POSE)));
            e_pose.backward_params(&tp, &df_pose, grads_for(&mut grads, E_POSE));
        }
    }
    let nf = n as f64;
    let mut report = LossReport { exp_cls: exp_cls / nf, ..Default::default() };
    if bundle.mode.has_pose() {
        report.pose_cls = Some(pose_cls / nf);
    }
    if !baseline {
        report.cos = Some(cos / nf);
    }
    let value = report.exp_cls + report.pose_cls.unwrap_or(0.0) + weights.beta1 * report.cos.unwrap_or(0.0);
    check_finite("classifier objective", value)?;
    Ok(Objective { value, report, grads })
}

/// Phase 2 objective: cross-entropy of D on real images.
pub fn discriminator_objective<T: Real>(bundle: &ModelBundle<T>, batch: &Batch<T>) -> Result<Objective<T>> {
    let d = bundle.d()?;
    let n = batch.len();
    let scale = T::lit(1.0 / n as f64);
    let mut grads = d.zero_grads();
    let mut total = 0.0;
    for i in 0..n {
        let trace = d.trace(&batch.x[i])?;
        let (l, g) = losses::cross_entropy(trace.output.data(), batch.y_e[i])?;
        total += l;
        d.backward_params(&trace, &Tensor::from_vec(g).scale(scale), &mut grads);
    }
    let value = total / n as f64;
    check_finite("d_real", value)?;
    let report = LossReport { d_real: Some(value), ..Default::default() };
    Ok(Objective { value, report, grads: vec![(DISC, grads)] })
}

/// Push a synthesized image through a non-updated network `net` and return
/// `(loss value, gradient w.r.t. the image)` for a per-sample loss on its output.
fn through<T: Real>(
    net: &Network<T>,
    image: &Tensor<T>,
    weight: f64,
    loss: impl FnOnce(&[T]) -> Result<(f64, Vec<T>)>,
) -> Result<(f64, Option<Tensor<T>>)> {
    let trace: Trace<T> = net.trace(image)?;
    let (v, g) = loss(trace.output.data())?;
    if weight == 0.0 {
        return Ok((v, None));
    }
    Ok((v, Some(net.backward(&trace, &Tensor::from_vec(g).scale(T::lit(weight)), None))))
}

/// Phase 3 objective: `λ1·L_neu + λ2·L_exp_fake + λ3·L_id + λ4·L_recon + β2·L_confusion`.
///
/// Terms switched off by the ablation flags carry zero weight and are
/// omitted from the report. `use_discriminator` and `use_id_loss` decide
/// whether the corresponding terms are evaluated at all.
pub fn generator_objective<T: Real>(
    bundle: &ModelBundle<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    use_discriminator: bool,
    use_id_loss: bool,
) -> Result<Objective<T>> {
    let dec = bundle.g_dec()?;
    let e_id = bundle.e_id()?;
    let f_ids = batch.identity()?;
    let d = if use_discriminator { Some(bundle.d()?) } else { None };
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut grads = vec![(E_EXP, bundle.e_exp.zero_grads()), (G_DEC, dec.zero_grads())];
    if let Some(e_pose) = &bundle.e_pose {
        grads.push((E_POSE, e_pose.zero_grads()));
    }
    let w = weights;
    let (mut neu, mut expf, mut id, mut recon, mut conf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let x = &batch.x[i];
        let f_id = &f_ids[i];
        let te = bundle.e_exp.trace(x)?;
        let f_exp = Feature::new(te.output.data().to_vec());
        let tp = match &bundle.e_pose {
            Some(e_pose) => Some(e_pose.trace(x)?),
            None => None,
        };
        let f_pose = tp.as_ref().map(|t| Feature::new(t.output.data().to_vec()));
        let f_ip = match &f_pose {
            Some(p) => sum_features(&[f_id, p])?,
            None => f_id.clone(),
        };
        let f_ipe = match &f_pose {
            Some(p) => sum_features(&[f_id, p, &f_exp])?,
            None => sum_features(&[f_id, &f_exp])?,
        };
        let t_ip = dec.trace(&f_ip.to_tensor())?;
        let t_ipe = dec.trace(&f_ipe.to_tensor())?;

        let (v, mut g_ipe, mut g_ip) = losses::recon_sample(&t_ipe.output, &t_ip.output, x, batch.y_e[i], NEUTRAL)?;
        recon += v;
        g_ipe = g_ipe.scale(T::lit(w.lambda4 * inv_n));
        g_ip = g_ip.scale(T::lit(w.lambda4 * inv_n));

        if let Some(d) = d {
            let (v, g) = through(d, &t_ip.output, w.lambda1 * inv_n, |l| losses::cross_entropy(l, NEUTRAL))?;
            neu += v;
            g.inspect(|g| g_ip.add_assign(g));
            let (v, g) = through(d, &t_ipe.output, w.lambda2 * inv_n, |l| losses::cross_entropy(l, batch.y_e[i]))?;
            expf += v;
            g.inspect(|g| g_ipe.add_assign(g));
        }
        if use_id_loss {
            let real = &f_id.values;
            for (out, acc) in [(&t_ipe.output, &mut g_ipe), (&t_ip.output, &mut g_ip)] {
                let (v, g) = through(e_id, out, w.lambda3 * inv_n, |f| losses::mean_abs_diff(f, real))?;
                id += v;
                g.inspect(|g| acc.add_assign(g));
            }
        }

        let df_ip = dec.backward(&t_ip, &g_ip, Some(grads_for(&mut grads, G_DEC)));
        let df_ipe = dec.backward(&t_ipe, &g_ipe, Some(grads_for(&mut grads, G_DEC)));
        let mut df_exp = df_ipe.clone();
        if let Some(c_p) = &bundle.c_p {
            let (v, g) = through(c_p, &te.output, w.beta2 * inv_n, |l| Ok(losses::confusion(l)))?;
            conf += v;
            g.inspect(|g| df_exp.add_assign(g));
        }
        bundle.e_exp.backward_params(&te, &df_exp, grads_for(&mut grads, E_EXP));
        if let (Some(e_pose), Some(tp)) = (&bundle.e_pose, &tp) {
            e_pose.backward_params(tp, &df_ip.add(&df_ipe), grads_for(&mut grads, E_POSE));
        }
    }
    let report = LossReport {
        recon: Some(recon * inv_n),
        id: use_id_loss.then_some(id * inv_n),
        confusion: bundle.mode.has_pose().then_some(conf * inv_n),
        neu_fake: use_discriminator.then_some(neu * inv_n),
        exp_fake: use_discriminator.then_some(expf * inv_n),
        ..Default::default()
    };
    let value = w.lambda1 * report.neu_fake.unwrap_or(0.0)
        + w.lambda2 * report.exp_fake.unwrap_or(0.0)
        + w.lambda3 * report.id.unwrap_or(0.0)
        + w.lambda4 * recon * inv_n
        + w.beta2 * report.confusion.unwrap_or(0.0);
    check_finite("generator objective", value)?;
    Ok(Objective { value, report, grads })
}

/// Apply one Adam update for the networks an objective carries gradients for.
pub fn apply<T: Real>(bundle: &mut ModelBundle<T>, opt: &mut Adam<T>, lr: f64, objective: &Objective<T>) -> Result<()> {
    let mut nets: Vec<Network<T>> = Vec::with_capacity(objective.grads.len());
    for (name, _) in &objective.grads {
        let slot = bundle.network_mut(name).ok_or(Error::MissingNetwork(name))?;
        nets.push(std::mem::replace(slot, Network::new(*name, Vec::new())));
    }
    let result = {
        let mut targets: Vec<(&mut Network<T>, &Grads<T>)> =
            nets.iter_mut().zip(&objective.grads).map(|(n, (_, g))| (n, g)).collect();
        opt.update(lr, &mut targets)
    };
    for net in nets {
        let name = net.name.clone();
        *bundle.network_mut(&name).expect("taken above") = net;
    }
    result
}

/// One classifier-phase update; returns the phase's report fragment.
pub fn step_classifiers<T: Real>(
    batch: &Batch<T>,
    bundle: &mut ModelBundle<T>,
    opt: &mut Adam<T>,
    lr: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    let obj = classifier_objective(bundle, batch, weights)?;
    apply(bundle, opt, lr, &obj)?;
    Ok(obj.report)
}

/// One discriminator-phase update.
pub fn step_discriminator<T: Real>(
    batch: &Batch<T>,
    bundle: &mut ModelBundle<T>,
    opt: &mut Adam<T>,
    lr: f64,
) -> Result<LossReport> {
    let obj = discriminator_objective(bundle, batch)?;
    apply(bundle, opt, lr, &obj)?;
    Ok(obj.report)
}

/// One generator-phase update.
pub fn step_generator<T: Real>(
    batch: &Batch<T>,
    bundle: &mut ModelBundle<T>,
    opt: &mut Adam<T>,
    lr: f64,
    weights: &LossWeights,
    use_discriminator: bool,
    use_id_loss: bool,
) -> Result<LossReport> {
    let obj = generator_objective(bundle, batch, weights, use_discriminator, use_id_loss)?;
    apply(bundle, opt, lr, &obj)?;
    Ok(obj.report)
}

fn merge(into: &mut LossReport, part: LossReport) {
    macro_rules! take {
        ($($f:ident),*) => { $( if part.$f.is_some() { into.$f = part.$f; } )* };
    }
    take!(recon, id, cos, confusion, pose_cls, d_real, neu_fake, exp_fake);
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Per-epoch means of the logged scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossReport,
}

/// Optimizer instances for the three phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub classifiers: Adam<f32>,
    pub discriminator: Adam<f32>,
    pub generator: Adam<f32>,
}

impl Optimizers {
    pub fn new(config: AdamConfig) -> Self {
        Self { classifiers: Adam::new(config), discriminator: Adam::new(config), generator: Adam::new(config) }
    }
}

/// Training state: everything needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle<f32>,
    pub optimizers: Optimizers,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub step: u64,
    identity_cache: HashMap<usize, Feature<f32>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, bundle: ModelBundle<f32>) -> Result<Self> {
        config.validate()?;
        let optimizers = Optimizers::new(config.adam);
        Ok(Self { config, bundle, optimizers, epoch: 0, step: 0, identity_cache: HashMap::new() })
    }

    /// Resume from saved state.
    pub fn resume(
        config: TrainConfig,
        bundle: ModelBundle<f32>,
        optimizers: Optimizers,
        epoch: usize,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, bundle, optimizers, epoch, step, identity_cache: HashMap::new() })
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let expected = Problem::of(dataset);
        if expected != self.bundle.problem {
            return Err(Error::Shape(format!(
                "dataset provides {expected:?} but the model was built for {:?}",
                self.bundle.problem
            )));
        }
        Ok(())
    }

    fn batch(&mut self, dataset: &Dataset, indices: &[usize]) -> Result<Batch<f32>> {
        let mut batch = Batch::from_dataset(dataset, indices, None)?;
        if let Some(e_id) = &self.bundle.e_id {
            let mut feats = Vec::with_capacity(indices.len());
            for (k, &i) in indices.iter().enumerate() {
                if !self.identity_cache.contains_key(&i) {
                    let f = Feature::from_tensor(e_id.forward(&batch.x[k])?);
                    self.identity_cache.insert(i, f);
                }
                feats.push(self.identity_cache[&i].clone());
            }
            batch.f_id = Some(feats);
        }
        Ok(batch)
    }

    /// One iteration of the three phases on the same batch.
    pub fn iterate(&mut self, batch: &Batch<f32>, lr: f64) -> Result<LossReport> {
        let cfg = &self.config;
        let weights = cfg.effective_weights();
        let opts = &mut self.optimizers;
        let mut report = step_classifiers(batch, &mut self.bundle, &mut opts.classifiers, lr, &weights)?;
        if self.bundle.mode.has_generator() {
            if cfg.use_discriminator {
                merge(&mut report, step_discriminator(batch, &mut self.bundle, &mut opts.discriminator, lr)?);
            }
            let part = step_generator(
                batch,
                &mut self.bundle,
                &mut opts.generator,
                lr,
                &weights,
                cfg.use_discriminator,
                cfg.use_id_loss,
            )?;
            merge(&mut report, part);
        }
        report.finalize(&weights)?;
        Ok(report)
    }

    /// Batches of the training indices for one epoch, in a seeded order.
    pub fn epoch_order(&self, train: &[usize], epoch: usize) -> Vec<usize> {
        let mut order = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Run one epoch, reporting every iteration to `on_step`.
    pub fn run_epoch(
        &mut self,
        dataset: &Dataset,
        train: &[usize],
        on_step: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        self.check_dataset(dataset)?;
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let order = self.epoch_order(train, epoch);
        let mut records = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch = self.batch(dataset, chunk)?;
            let report = self.iterate(&batch, lr)?;
            self.step += 1;
            let record = MetricsRecord { step: self.step, epoch, lr, report };
            on_step(&record)?;
            records.push(record.report);
        }
        self.epoch += 1;
        Ok(EpochSummary { epoch, lr, mean: mean_report(&records, &self.config.effective_weights())? })
    }

    /// Train until `config.epochs` epochs are complete.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        on_step: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
        on_epoch: &mut dyn FnMut(&Trainer, &EpochSummary) -> Result<()>,
    ) -> Result<Vec<EpochSummary>> {
        self.check_dataset(dataset)?;
        let (train, _) = dataset.split(self.config.test_fold)?;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut summaries = Vec::new();
        while self.epoch < self.config.epochs {
            let summary = self.run_epoch(dataset, &train, on_step)?;
            on_epoch(self, &summary)?;
            summaries.push(summary);
        }
        Ok(summaries)
    }
}

fn mean_report(records: &[LossReport], weights: &LossWeights) -> Result<LossReport> {
    let n = records.len() as f64;
    let avg = |f: fn(&LossReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = records.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut out = LossReport {
        recon: avg(|r| r.recon),
        id: avg(|r| r.id),
        cos: avg(|r| r.cos),
        confusion: avg(|r| r.confusion),
        exp_cls: records.iter().map(|r| r.exp_cls).sum::<f64>() / n,
        pose_cls: avg(|r| r.pose_cls),
        d_real: avg(|r| r.d_real),
        neu_fake: avg(|r| r.neu_fake),
        exp_fake: avg(|r| r.exp_fake),
        ..Default::default()
    };
    out.finalize(weights)?;
    Ok(out)
}
