//! The networks: frozen identity encoder, pose and expression encoders,
//! shared decoder, expression discriminator and the two linear classifiers.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorgen::Dataset;
use crate::image::{Image, ImageShape};
use crate::losses;
use crate::nn::{Adam, AdamConfig, LayerKind, Network, Real, Tensor};

/// Which parts of the framework are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Identity, pose and expression branches with decoder and discriminator.
    Ipd,
    /// No pose branch: features are identity + expression only.
    IdOnly,
    /// Expression encoder and classifier trained with cross-entropy alone.
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::IdOnly, Mode::Ipd];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ipd => "ipd",
            Mode::IdOnly => "id-only",
            Mode::Baseline => "baseline",
        }
    }

    pub fn has_pose(&self) -> bool {
        *self == Mode::Ipd
    }

    pub fn has_generator(&self) -> bool {
        *self != Mode::Baseline
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipd" => Ok(Mode::Ipd),
            "id-only" => Ok(Mode::IdOnly),
            "baseline" => Ok(Mode::Baseline),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected ipd, id-only or baseline)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Channel widths of the three stride-2 stages, shallow to deep.
    pub widths: [usize; 3],
    /// Instance normalization after each hidden transposed convolution.
    pub instance_norm: bool,
    pub leaky_slope: f64,
    /// Start the pose and expression encoders and the trunk of D from the
    /// pretrained identity encoder's weights instead of random init.
    pub warm_start: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { feature_dim: 64, widths: [16, 32, 64], instance_norm: false, leaky_slope: 0.2, warm_start: false }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.widths.contains(&0) {
            return Err(Error::Config("feature_dim and widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky_slope must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Sizes the networks are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub shape: ImageShape,
    pub num_expressions: usize,
    pub num_pose_buckets: usize,
}

impl Problem {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            shape: dataset.meta.shape,
            num_expressions: dataset.meta.num_expressions as usize,
            num_pose_buckets: dataset.meta.num_pose_buckets as usize,
        }
    }
}

pub fn encoder_layers(cfg: &ModelConfig, in_channels: usize) -> Vec<LayerKind> {
    let slope = cfg.leaky_slope;
    let [w0, w1, w2] = cfg.widths;
    let mut layers = Vec::new();
    for (cin, cout) in [(in_channels, w0), (w0, w1), (w1, w2)] {
        layers.push(LayerKind::Conv2d { cin, cout, kernel: 3, stride: 2, pad: 1 });
        layers.push(LayerKind::LeakyRelu { slope });
    }
    layers.push(LayerKind::GlobalAvgPool);
    layers.push(LayerKind::Linear { inputs: w2, outputs: cfg.feature_dim });
    layers
}

pub fn decoder_layers(cfg: &ModelConfig, shape: ImageShape) -> Vec<LayerKind> {
    let [w0, w1, w2] = cfg.widths;
    let (h0, v0) = (shape.height / 8, shape.width / 8);
    let mut layers = vec![
        LayerKind::Linear { inputs: cfg.feature_dim, outputs: w2 * h0 * v0 },
        LayerKind::Reshape { shape: vec![w2, h0, v0] },
        LayerKind::Relu,
    ];
    for (cin, cout) in [(w2, w1), (w1, w0)] {
        layers.push(LayerKind::ConvTranspose2d { cin, cout, kernel: 4, stride: 2, pad: 1 });
        if cfg.instance_norm {
            layers.push(LayerKind::InstanceNorm { channels: cout, eps: 1e-5 });
        }
        layers.push(LayerKind::Relu);
    }
    layers.push(LayerKind::ConvTranspose2d { cin: w0, cout: shape.channels, kernel: 4, stride: 2, pad: 1 });
    layers.push(LayerKind::Sigmoid);
    layers
}

pub fn discriminator_layers(cfg: &ModelConfig, shape: ImageShape, classes: usize) -> Vec<LayerKind> {
    let mut layers = encoder_layers(cfg, shape.channels);
    layers.push(LayerKind::LeakyRelu { slope: cfg.leaky_slope });
    layers.push(LayerKind::Linear { inputs: cfg.feature_dim, outputs: classes });
    layers
}

pub fn classifier_layers(inputs: usize, classes: usize) -> Vec<LayerKind> {
    vec![LayerKind::Linear { inputs, outputs: classes }]
}

fn build<T: Real>(name: &str, layers: Vec<LayerKind>, seed: u64, stream: u64) -> Network<T> {
    let mut net = Network::new(name, layers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    net.init(&mut rng);
    net
}

/// A real vector shared by identity, pose and expression features.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature<T> {
    pub values: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.values.clone())
    }

    pub fn from_tensor(t: Tensor<T>) -> Self {
        Self { values: t.into_data() }
    }
}

/// Holistic feature `f_id + f_pose (+ f_exp)`.
///
/// Each component is summed in ascending magnitude order so the result does
/// not depend on argument order, bit for bit.
pub fn compose<T: Real>(f_id: &Feature<T>, f_pose: &Feature<T>, f_exp: Option<&Feature<T>>) -> Result<Feature<T>> {
    let parts: Vec<&Feature<T>> = std::iter::once(f_id).chain(std::iter::once(f_pose)).chain(f_exp).collect();
    sum_features(&parts)
}

pub(crate) fn sum_features<T: Real>(parts: &[&Feature<T>]) -> Result<Feature<T>> {
    let dim = parts[0].dim();
    if let Some(bad) = parts.iter().find(|p| p.dim() != dim) {
        return Err(Error::Shape(format!("feature dimensions differ: {dim} vs {}", bad.dim())));
    }
    let mut terms = Vec::with_capacity(parts.len());
    let values = (0..dim)
        .map(|i| {
            terms.clear();
            terms.extend(parts.iter().map(|p| p.values[i]));
            terms.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.as_f64().total_cmp(&b.as_f64())));
            terms.iter().fold(T::zero(), |acc, &v| acc + v)
        })
        .collect();
    Ok(Feature { values })
}

/// Softmax probabilities over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub probabilities: Vec<f64>,
}

impl ClassDistribution {
    pub fn from_logits<T: Real>(logits: &[T]) -> Self {
        let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self { probabilities: exps.into_iter().map(|e| e / total).collect() }
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The five networks and two classifiers. Absent networks are `None` for
/// modes that do not use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub problem: Problem,
    pub mode: Mode,
    pub e_id: Option<Network<T>>,
    pub e_pose: Option<Network<T>>,
    pub e_exp: Network<T>,
    pub g_dec: Option<Network<T>>,
    pub d: Option<Network<T>>,
    pub c_p: Option<Network<T>>,
    pub c_exp: Network<T>,
}

pub const E_ID: &str = "e_id";
pub const E_POSE: &str = "e_pose";
pub const E_EXP: &str = "e_exp";
pub const G_DEC: &str = "g_dec";
pub const DISC: &str = "d";
pub const C_POSE: &str = "c_p";
pub const C_EXP: &str = "c_exp";

/// Layer list of the bundle network called `name`.
pub fn architecture(name: &str, config: &ModelConfig, problem: &Problem) -> Option<Vec<LayerKind>> {
    match name {
        E_ID | E_POSE | E_EXP => Some(encoder_layers(config, problem.shape.channels)),
        G_DEC => Some(decoder_layers(config, problem.shape)),
        DISC => Some(discriminator_layers(config, problem.shape, problem.num_expressions)),
        C_POSE => Some(classifier_layers(config.feature_dim, problem.num_pose_buckets)),
        C_EXP => Some(classifier_layers(config.feature_dim, problem.num_expressions)),
        _ => None,
    }
}

impl<T: Real> ModelBundle<T> {
    /// Freshly initialized networks for `mode`. `identity` is the pretrained
    /// identity encoder; it is required by modes with a generator (which keep
    /// it frozen as `e_id`) and by `warm_start`.
    pub fn new(
        config: ModelConfig,
        problem: Problem,
        mode: Mode,
        identity: Option<Network<T>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if problem.shape.height % 8 != 0 || problem.shape.width % 8 != 0 {
            return Err(Error::Shape(format!("image sides must be multiples of 8, got {:?}", problem.shape)));
        }
        let d = config.feature_dim;
        let enc = |name, stream| build(name, encoder_layers(&config, problem.shape.channels), seed, stream);
        let encoder = encoder_layers(&config, problem.shape.channels);
        if let Some(net) = &identity {
            if net.layers.iter().map(|l| &l.kind).ne(encoder.iter()) {
                return Err(Error::Shape("identity encoder architecture does not match model config".into()));
            }
        }
        if identity.is_none() && (mode.has_generator() || config.warm_start) {
            return Err(Error::MissingNetwork(E_ID));
        }
        let warm = |mut net: Network<T>| {
            if let (true, Some(src)) = (config.warm_start, &identity) {
                for (dst, src) in net.layers.iter_mut().zip(&src.layers) {
                    dst.params.clone_from(&src.params);
                }
            }
            net
        };
        let pose = mode.has_pose();
        let bundle = Self {
            e_pose: pose.then(|| warm(enc(E_POSE, 1))),
            e_exp: warm(enc(E_EXP, 2)),
            g_dec: mode.has_generator().then(|| build(G_DEC, decoder_layers(&config, problem.shape), seed, 3)),
            d: mode.has_generator().then(|| {
                warm(build(DISC, discriminator_layers(&config, problem.shape, problem.num_expressions), seed, 4))
            }),
            c_p: pose.then(|| build(C_POSE, classifier_layers(d, problem.num_pose_buckets), seed, 5)),
            c_exp: build(C_EXP, classifier_layers(d, problem.num_expressions), seed, 6),
            e_id: identity.filter(|_| mode.has_generator()).map(|mut net| {
                net.name = E_ID.into();
                net.freeze();
                net
            }),
            config,
            problem,
            mode,
        };
        Ok(bundle)
    }
    pub fn networks(&self) -> Vec<&Network<T>> {
        [&self.e_id, &self.e_pose]
            .into_iter()
            .flatten()
            .chain(std::iter::once(&self.e_exp))
            .chain([&self.g_dec, &self.d, &self.c_p].into_iter().flatten())
            .chain(std::iter::once(&self.c_exp))
            .collect()
    }

    pub fn network(&self, name: &str) -> Option<&Network<T>> {
        self.networks().into_iter().find(|n| n.name == name)
    }

    pub fn network_mut(&mut self, name: &str) -> Option<&mut Network<T>> {
        match name {
            E_ID => self.e_id.as_mut(),
            E_POSE => self.e_pose.as_mut(),
            E_EXP => Some(&mut self.e_exp),
            G_DEC => self.g_dec.as_mut(),
            DISC => self.d.as_mut(),
            C_POSE => self.c_p.as_mut(),
            C_EXP => Some(&mut self.c_exp),
            _ => None,
        }
    }

    pub fn digests(&self) -> Vec<(String, String)> {
        self.networks().into_iter().map(|n| (n.name.clone(), n.digest())).collect()
    }

    pub fn e_id(&self) -> Result<&Network<T>> {
        self.e_id.as_ref().ok_or(Error::MissingNetwork(E_ID))
    }

    pub fn e_pose(&self) -> Result<&Network<T>> {
        self.e_pose.as_ref().ok_or(Error::MissingNetwork(E_POSE))
    }

    pub fn g_dec(&self) -> Result<&Network<T>> {
        self.g_dec.as_ref().ok_or(Error::MissingNetwork(G_DEC))
    }

    pub fn d(&self) -> Result<&Network<T>> {
        self.d.as_ref().ok_or(Error::MissingNetwork(DISC))
    }

    pub fn c_p(&self) -> Result<&Network<T>> {
        self.c_p.as_ref().ok_or(Error::MissingNetwork(C_POSE))
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.shape() != self.problem.shape {
            return Err(Error::Shape(format!("image {:?}, model expects {:?}", image.shape(), self.problem.shape)));
        }
        Ok(())
    }

    /// Identity and pose features, and the neutral feature `f_id (+ f_pose)`.
    pub fn neutral_feature(&self, image: &Image) -> Result<Feature<T>> {
        let f_id = encode(self.e_id()?, image)?;
        match &self.e_pose {
            Some(e_pose) => compose(&f_id, &encode(e_pose, image)?, None),
            None => Ok(f_id),
        }
    }

    /// Expression logits through the inference path `C_exp(E_exp(x))`.
    pub fn predict(&self, image: &Image) -> Result<Vec<T>> {
        classify(&self.c_exp, &encode(&self.e_exp, image)?)
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            problem: self.problem,
            mode: self.mode,
            e_id: self.e_id.as_ref().map(Network::cast),
            e_pose: self.e_pose.as_ref().map(Network::cast),
            e_exp: self.e_exp.cast(),
            g_dec: self.g_dec.as_ref().map(Network::cast),
            d: self.d.as_ref().map(Network::cast),
            c_p: self.c_p.as_ref().map(Network::cast),
            c_exp: self.c_exp.cast(),
        }
    }
}

fn expect_shape<T: Real>(net: &Network<T>, image: &Image) -> Result<()> {
    match net.layers.first().map(|l| &l.kind) {
        Some(LayerKind::Conv2d { cin, .. }) if *cin == image.shape().channels => Ok(()),
        _ => Err(Error::Shape(format!("network `{}` cannot take image {:?}", net.name, image.shape()))),
    }
}

pub fn encode<T: Real>(encoder: &Network<T>, image: &Image) -> Result<Feature<T>> {
    expect_shape(encoder, image)?;
    Ok(Feature::from_tensor(encoder.forward(&image.to_tensor())?))
}

pub fn decode<T: Real>(decoder: &Network<T>, f: &Feature<T>) -> Result<Image> {
    Image::from_tensor(&decoder.forward(&f.to_tensor())?)
}

pub fn discriminate<T: Real>(d: &Network<T>, image: &Image) -> Result<(Vec<T>, ClassDistribution)> {
    expect_shape(d, image)?;
    let logits = d.forward(&image.to_tensor())?.into_data();
    let dist = ClassDistribution::from_logits(&logits);
    Ok((logits, dist))
}

pub fn classify<T: Real>(c: &Network<T>, f: &Feature<T>) -> Result<Vec<T>> {
    Ok(c.forward(&f.to_tensor())?.into_data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, lr: 3e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Network<f32>,
    /// Identity accuracy of encoder + head over the pretraining samples.
    pub accuracy: f64,
    pub digest: String,
}

/// Train an identity encoder with a temporary linear identity head on the
/// given samples, then discard the head and freeze the encoder.
pub fn pretrain_identity_encoder(
    dataset: &Dataset,
    indices: &[usize],
    model: &ModelConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    model.validate()?;
    if config.batch_size == 0 || config.epochs == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("pretraining needs batch_size, epochs and lr > 0".into()));
    }
    let mut ids: Vec<u32> = indices.iter().map(|&i| dataset.samples[i].identity_id()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Config(format!("pretraining needs at least 2 identities, got {}", ids.len())));
    }
    let label = |i: usize| ids.binary_search(&dataset.samples[i].identity_id()).expect("id present") as u32;
    let shape = dataset.meta.shape;
    let mut encoder: Network<f32> = build(E_ID, encoder_layers(model, shape.channels), config.seed, 0);
    let mut head: Network<f32> = build("id_head", classifier_layers(model.feature_dim, ids.len()), config.seed, 7);
    let mut opt = Adam::new(AdamConfig::default());
    let mut order = indices.to_vec();
    for epoch in 0..config.epochs {
        order.clone_from_slice(indices);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1000 + epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let mut g_enc = encoder.zero_grads();
            let mut g_head = head.zero_grads();
            for &i in batch {
                let te = encoder.trace(&dataset.samples[i].image.to_tensor())?;
                let th = head.trace(&te.output)?;
                let (loss, grad) = losses::cross_entropy(th.output.data(), label(i))?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("identity_ce".into()));
                }
                let df = head.backward(&th, &Tensor::from_vec(grad).scale(scale), Some(&mut g_head));
                encoder.backward_params(&te, &df, &mut g_enc);
            }
            opt.update(config.lr, &mut [(&mut encoder, &g_enc), (&mut head, &g_head)])?;
        }
    }
    let mut correct = 0;
    for &i in indices {
        let logits = head.forward(&encoder.forward(&dataset.samples[i].image.to_tensor())?)?;
        correct += usize::from(argmax(logits.data()) == label(i) as usize);
    }
    encoder.freeze();
    let digest = encoder.digest();
    Ok(PretrainOutcome { encoder, accuracy: correct as f64 / indices.len() as f64, digest })
}
