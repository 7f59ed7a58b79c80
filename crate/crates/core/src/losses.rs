//! Every loss term of the training objective, each callable on its own.
//!
//! Per-sample functions return the value together with the gradient with
//! respect to their differentiable inputs; the batch functions take means
//! over the batch. Values are accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{classify, Feature};
use crate::nn::{Grads, Network, Real, Tensor};

/// Guard for norms and probabilities.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Fake-neutral adversarial term.
    pub lambda1: f64,
    /// Fake-expression adversarial term.
    pub lambda2: f64,
    /// Identity consistency.
    pub lambda3: f64,
    /// Reconstruction.
    pub lambda4: f64,
    /// Identity/expression cosine similarity.
    pub beta1: f64,
    /// Pose confusion.
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.001, lambda2: 0.001, lambda3: 1.0, lambda4: 10.0, beta1: 0.5, beta2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.beta1, self.beta2];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")))
        }
    }
}

fn log_sum_exp<T: Real>(logits: &[T]) -> f64 {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| (v.as_f64() - lse).exp()).collect()
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy<T: Real>(logits: &[T], label: u32) -> Result<(f64, Vec<T>)> {
    let label = label as usize;
    if label >= logits.len() {
        return Err(Error::Domain(format!("label {label} out of range for {} classes", logits.len())));
    }
    let value = log_sum_exp(logits) - logits[label].as_f64();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((value, grad.into_iter().map(T::lit).collect()))
}

/// Cross-entropy against the uniform distribution,
/// `-(1/K) Σ_k log softmax(logits)_k`, with gradient `softmax - 1/K`.
pub fn confusion<T: Real>(logits: &[T]) -> (f64, Vec<T>) {
    let k = logits.len() as f64;
    let mean = logits.iter().map(|v| v.as_f64()).sum::<f64>() / k;
    let value = log_sum_exp(logits) - mean;
    let grad = softmax(logits).into_iter().map(|p| T::lit(p - 1.0 / k)).collect();
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineTerm<T> {
    pub value: f64,
    pub grad_a: Vec<T>,
    pub grad_b: Vec<T>,
    /// The norm product fell below [`EPS`] and the guard was used.
    pub degenerate: bool,
}

/// `|a·b| / max(‖a‖‖b‖, ε)`.
pub fn abs_cosine<T: Real>(a: &[T], b: &[T]) -> Result<CosineTerm<T>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let prod = na * nb;
    if prod < EPS {
        let s = dot.signum() / EPS;
        return Ok(CosineTerm {
            value: dot.abs() / EPS,
            grad_a: b.iter().map(|y| T::lit(s * y.as_f64())).collect(),
            grad_b: a.iter().map(|x| T::lit(s * x.as_f64())).collect(),
            degenerate: true,
        });
    }
    let cos = dot / prod;
    let sign = if cos > 0.0 {
        1.0
    } else if cos < 0.0 {
        -1.0
    } else {
        0.0
    };
    let grad = |u: &[T], v: &[T], nu: f64| -> Vec<T> {
        u.iter().zip(v).map(|(x, y)| T::lit(sign * (y.as_f64() / prod - cos * x.as_f64() / (nu * nu)))).collect()
    };
    Ok(CosineTerm { value: cos.abs(), grad_a: grad(a, b, na), grad_b: grad(b, a, nb), degenerate: false })
}

/// Mean absolute difference and its gradient with respect to `a`.
pub fn mean_abs_diff<T: Real>(a: &[T], b: &[T]) -> Result<(f64, Vec<T>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("L1 between lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let inv = T::lit(1.0 / n);
    let value = a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / n;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x > y {
                inv
            } else if x < y {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((value, grad))
}

/// One sample's reconstruction term: `|x_ipe - x| + 1[y_e = c] |x_ip - x|`
/// (means over pixels), with gradients for both synthesized images.
pub fn recon_sample<T: Real>(
    x_ipe: &Tensor<T>,
    x_ip: &Tensor<T>,
    x: &Tensor<T>,
    y_e: u32,
    neutral: u32,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if x_ipe.shape() != x.shape() || x_ip.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "reconstruction of {:?}/{:?} against {:?}",
            x_ipe.shape(),
            x_ip.shape(),
            x.shape()
        )));
    }
    let (v_ipe, g_ipe) = mean_abs_diff(x_ipe.data(), x.data())?;
    let (v_ip, g_ip) = if y_e == neutral {
        mean_abs_diff(x_ip.data(), x.data())?
    } else {
        (0.0, vec![T::zero(); x.len()])
    };
    Ok((v_ipe + v_ip, Tensor::new(x.shape().to_vec(), g_ipe), Tensor::new(x.shape().to_vec(), g_ip)))
}

fn check_batch(lens: &[usize]) -> Result<usize> {
    let n = lens[0];
    if n == 0 || lens.iter().any(|&l| l != n) {
        return Err(Error::Shape(format!("batch sizes differ or are empty: {lens:?}")));
    }
    Ok(n)
}

/// Batch-mean reconstruction loss.
pub fn loss_recon(x_fake_ipe: &[Image], x_fake_ip: &[Image], x: &[Image], y_e: &[u32], neutral: u32) -> Result<f64> {
    let n = check_batch(&[x_fake_ipe.len(), x_fake_ip.len(), x.len(), y_e.len()])?;
    let mut total = 0.0;
    for i in 0..n {
        let t = |img: &Image| img.to_tensor::<f64>();
        total += recon_sample(&t(&x_fake_ipe[i]), &t(&x_fake_ip[i]), &t(&x[i]), y_e[i], neutral)?.0;
    }
    Ok(total / n as f64)
}

/// Identity-consistency value with gradients for the synthesized images.
#[derive(Debug, Clone)]
pub struct IdentityTerm<T> {
    pub value: f64,
    pub grad_ipe: Vec<Tensor<T>>,
    pub grad_ip: Vec<Tensor<T>>,
    /// Gradient accumulated into the identity network's own parameters;
    /// all zeros because that network is frozen.
    pub network_grads: Grads<T>,
}

/// Batch mean of `|N(x_ipe) - N(x)| + |N(x_ip) - N(x)|` (means over feature
/// components). Gradients reach the synthesized images, never `N`.
pub fn loss_id<T: Real>(
    n: &Network<T>,
    x_fake_ipe: &[Tensor<T>],
    x_fake_ip: &[Tensor<T>],
    x: &[Tensor<T>],
) -> Result<IdentityTerm<T>> {
    let batch = check_batch(&[x_fake_ipe.len(), x_fake_ip.len(), x.len()])?;
    if n.is_trainable() {
        return Err(Error::Config(format!("identity network `{}` must be frozen", n.name)));
    }
    let scale = T::lit(1.0 / batch as f64);
    let mut network_grads = n.zero_grads();
    let mut out = IdentityTerm { value: 0.0, grad_ipe: Vec::new(), grad_ip: Vec::new(), network_grads: n.zero_grads() };
    for i in 0..batch {
        let real = n.forward(&x[i])?;
        for (fake, grads) in [(&x_fake_ipe[i], &mut out.grad_ipe), (&x_fake_ip[i], &mut out.grad_ip)] {
            let trace = n.trace(fake)?;
            let (v, g) = mean_abs_diff(trace.output.data(), real.data())?;
            out.value += v / batch as f64;
            grads.push(n.backward(&trace, &Tensor::from_vec(g).scale(scale), Some(&mut network_grads)));
        }
    }
    out.network_grads = network_grads;
    Ok(out)
}

/// Batch mean of `|cos(f_id, f_exp)|` and the number of guarded samples.
pub fn loss_cos<T: Real>(f_id: &[Feature<T>], f_exp: &[Feature<T>]) -> Result<(f64, usize)> {
    let n = check_batch(&[f_id.len(), f_exp.len()])?;
    let mut total = 0.0;
    let mut degenerate = 0;
    for (a, b) in f_id.iter().zip(f_exp) {
        let term = abs_cosine(&a.values, &b.values)?;
        total += term.value;
        degenerate += usize::from(term.degenerate);
    }
    Ok((total / n as f64, degenerate))
}

/// Batch-mean pose confusion of expression features under the pose classifier.
pub fn loss_confusion<T: Real>(c_p: &Network<T>, f_exp: &[Feature<T>]) -> Result<f64> {
    let n = check_batch(&[f_exp.len()])?;
    let mut total = 0.0;
    for f in f_exp {
        total += confusion(&classify(c_p, f)?).0;
    }
    Ok(total / n as f64)
}

/// Batch-mean cross-entropy.
pub fn loss_ce<T: Real>(logits: &[Vec<T>], labels: &[u32]) -> Result<f64> {
    let n = check_batch(&[logits.len(), labels.len()])?;
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        total += cross_entropy(l, y)?.0;
    }
    Ok(total / n as f64)
}

/// Scalar components entering the generator objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorTerms {
    pub neu_fake: f64,
    pub exp_fake: f64,
    pub id: f64,
    pub recon: f64,
    /// Classification loss `exp_cls + pose_cls`.
    pub c: f64,
    pub cos: f64,
    pub confusion: f64,
}

/// `(g_prime, g_total)` where
/// `g_prime = λ1·neu_fake + λ2·exp_fake + λ3·id + λ4·recon` and
/// `g_total = g_prime + c + β1·cos + β2·confusion`.
pub fn assemble_generator_loss(terms: &GeneratorTerms, w: &LossWeights) -> Result<(f64, f64)> {
    let named = [
        ("neu_fake", terms.neu_fake),
        ("exp_fake", terms.exp_fake),
        ("id", terms.id),
        ("recon", terms.recon),
        ("c", terms.c),
        ("cos", terms.cos),
        ("confusion", terms.confusion),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite((*name).into()));
    }
    let g_prime = w.lambda1 * terms.neu_fake + w.lambda2 * terms.exp_fake + w.lambda3 * terms.id + w.lambda4 * terms.recon;
    let g_total = g_prime + terms.c + w.beta1 * terms.cos + w.beta2 * terms.confusion;
    Ok((g_prime, g_total))
}

/// Per-term values of one training iteration. Terms a mode does not use are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<f64>,
    pub exp_cls: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose_cls: Option<f64>,
    pub c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_real: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neu_fake: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exp_fake: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_total: Option<f64>,
}

impl LossReport {
    pub fn generator_terms(&self) -> GeneratorTerms {
        GeneratorTerms {
            neu_fake: self.neu_fake.unwrap_or(0.0),
            exp_fake: self.exp_fake.unwrap_or(0.0),
            id: self.id.unwrap_or(0.0),
            recon: self.recon.unwrap_or(0.0),
            c: self.c,
            cos: self.cos.unwrap_or(0.0),
            confusion: self.confusion.unwrap_or(0.0),
        }
    }

    /// Fill `c`, and `g_prime`/`g_total` when the generator ran.
    pub fn finalize(&mut self, weights: &LossWeights) -> Result<()> {
        self.c = self.exp_cls + self.pose_cls.unwrap_or(0.0);
        if self.recon.is_some() {
            let (gp, gt) = assemble_generator_loss(&self.generator_terms(), weights)?;
            self.g_prime = Some(gp);
            self.g_total = Some(gt);
        } else if !self.c.is_finite() {
            return Err(Error::NonFinite("c".into()));
        }
        Ok(())
    }
}
