use super::real::{matmul, matmul_a_bt_acc, matmul_at_b, matmul_at_b_acc};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Hyperparameters of one layer; parameters live next to it in [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d { cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize },
    ConvTranspose2d { cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize },
    InstanceNorm { channels: usize, eps: f64 },
    Linear { inputs: usize, outputs: usize },
    LeakyRelu { slope: f64 },
    Relu,
    Sigmoid,
    GlobalAvgPool,
    Reshape { shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    fn zeros(name: &'static str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name, shape, data: vec![T::zero(); n] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub params: Vec<Param<T>>,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv { cols: Vec<T>, in_shape: [usize; 3], out_hw: (usize, usize) },
    ConvTranspose { input: Tensor<T>, out_hw: (usize, usize) },
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
    Linear { input: Tensor<T> },
    Act { input: Tensor<T> },
    Sigmoid { output: Tensor<T> },
    Shape { in_shape: Vec<usize> },
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfold `x [c, h, w]` into `cols [c*k*k, oh*ow]`.
fn im2col<T: Real>(
    x: &[T],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into an image of shape `[c, h, w]`.
fn col2im<T: Real>(
    cols: &[T],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] = x[base + ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn spatial(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Shape(format!("{what} expects [C, H, W] input, got {shape:?}"))),
    }
}

impl<T: Real> Layer<T> {
    pub fn new(kind: LayerKind) -> Self {
        let params = match &kind {
            LayerKind::Conv2d { cin, cout, kernel, .. } => vec![
                Param::zeros("weight", vec![*cout, cin * kernel * kernel]),
                Param::zeros("bias", vec![*cout]),
            ],
            LayerKind::ConvTranspose2d { cin, cout, kernel, .. } => vec![
                Param::zeros("weight", vec![*cin, cout * kernel * kernel]),
                Param::zeros("bias", vec![*cout]),
            ],
            LayerKind::InstanceNorm { channels, .. } => {
                let mut gamma = Param::zeros("gamma", vec![*channels]);
                gamma.data.fill(T::one());
                vec![gamma, Param::zeros("beta", vec![*channels])]
            }
            LayerKind::Linear { inputs, outputs } => vec![
                Param::zeros("weight", vec![*outputs, *inputs]),
                Param::zeros("bias", vec![*outputs]),
            ],
            _ => Vec::new(),
        };
        Self { kind, params }
    }

    /// Input fan-in used for weight initialization, `None` for parameter-free layers.
    pub fn fan_in(&self) -> Option<usize> {
        match &self.kind {
            LayerKind::Conv2d { cin, kernel, .. } => Some(cin * kernel * kernel),
            LayerKind::ConvTranspose2d { cin, kernel, stride, .. } => {
                Some((cin * kernel * kernel / (stride * stride)).max(1))
            }
            LayerKind::Linear { inputs, .. } => Some(*inputs),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        match &self.kind {
            &LayerKind::Conv2d { cin, cout, kernel, stride, pad } => {
                let in_shape = spatial(x.shape(), "conv2d")?;
                if in_shape[0] != cin || in_shape[1] + 2 * pad < kernel || in_shape[2] + 2 * pad < kernel {
                    return Err(Error::Shape(format!(
                        "conv2d expects {cin} channels, got input {:?}",
                        x.shape()
                    )));
                }
                let out_hw = (conv_out(in_shape[1], kernel, stride, pad), conv_out(in_shape[2], kernel, stride, pad));
                let cols = im2col(x.data(), in_shape, kernel, stride, pad, out_hw);
                let n = out_hw.0 * out_hw.1;
                let mut out = vec![T::zero(); cout * n];
                matmul(cout, cin * kernel * kernel, n, &self.params[0].data, &cols, &mut out);
                for (co, chunk) in out.chunks_mut(n).enumerate() {
                    let b = self.params[1].data[co];
                    chunk.iter_mut().for_each(|v| *v = *v + b);
                }
                Ok((Tensor::new(vec![cout, out_hw.0, out_hw.1], out), Cache::Conv { cols, in_shape, out_hw }))
            }
            &LayerKind::ConvTranspose2d { cin, cout, kernel, stride, pad } => {
                let [c, h, w] = spatial(x.shape(), "conv_transpose2d")?;
                if c != cin {
                    return Err(Error::Shape(format!(
                        "conv_transpose2d expects {cin} channels, got input {:?}",
                        x.shape()
                    )));
                }
                let oh = (h - 1) * stride + kernel - 2 * pad;
                let ow = (w - 1) * stride + kernel - 2 * pad;
                let rows = cout * kernel * kernel;
                let mut cols = vec![T::zero(); rows * h * w];
                matmul_at_b(rows, cin, h * w, &self.params[0].data, x.data(), &mut cols);
                let mut out = col2im(&cols, [cout, oh, ow], kernel, stride, pad, (h, w));
                for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    let b = self.params[1].data[co];
                    chunk.iter_mut().for_each(|v| *v = *v + b);
                }
                Ok((
                    Tensor::new(vec![cout, oh, ow], out),
                    Cache::ConvTranspose { input: x.clone(), out_hw: (oh, ow) },
                ))
            }
            &LayerKind::InstanceNorm { channels, eps } => {
                let [c, h, w] = spatial(x.shape(), "instance_norm")?;
                if c != channels {
                    return Err(Error::Shape(format!("instance_norm expects {channels} channels, got {c}")));
                }
                let n = h * w;
                let nt = T::lit(n as f64);
                let mut out = vec![T::zero(); c * n];
                let mut xhat = vec![T::zero(); c * n];
                let mut inv_std = vec![T::zero(); c];
                for ci in 0..c {
                    let src = &x.data()[ci * n..(ci + 1) * n];
                    let mean = src.iter().copied().sum::<T>() / nt;
                    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                    let is = (var + T::lit(eps)).sqrt().recip();
                    inv_std[ci] = is;
                    let (g, b) = (self.params[0].data[ci], self.params[1].data[ci]);
                    for i in 0..n {
                        let xh = (src[i] - mean) * is;
                        xhat[ci * n + i] = xh;
                        out[ci * n + i] = g * xh + b;
                    }
                }
                Ok((Tensor::new(vec![c, h, w], out), Cache::Norm { xhat, inv_std }))
            }
            &LayerKind::Linear { inputs, outputs } => {
                if x.len() != inputs {
                    return Err(Error::Shape(format!(
                        "linear layer expects {inputs} inputs, got shape {:?}",
                        x.shape()
                    )));
                }
                let mut out = self.params[1].data.clone();
                T::gemm(
                    outputs,
                    inputs,
                    1,
                    &self.params[0].data,
                    inputs as isize,
                    1,
                    x.data(),
                    1,
                    1,
                    T::one(),
                    &mut out,
                    1,
                    1,
                );
                Ok((Tensor::from_vec(out), Cache::Linear { input: x.clone() }))
            }
            &LayerKind::LeakyRelu { slope } => {
                let s = T::lit(slope);
                let out = x.map(|v| if v > T::zero() { v } else { v * s });
                Ok((out, Cache::Act { input: x.clone() }))
            }
            LayerKind::Relu => Ok((x.map(|v| v.max(T::zero())), Cache::Act { input: x.clone() })),
            LayerKind::Sigmoid => {
                let out = x.map(|v| T::one() / (T::one() + (-v).exp()));
                Ok((out.clone(), Cache::Sigmoid { output: out }))
            }
            LayerKind::GlobalAvgPool => {
                let [c, h, w] = spatial(x.shape(), "global_avg_pool")?;
                let n = T::lit((h * w) as f64);
                let out = x.data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() / n).collect::<Vec<_>>();
                debug_assert_eq!(out.len(), c);
                Ok((Tensor::from_vec(out), Cache::Shape { in_shape: x.shape().to_vec() }))
            }
            LayerKind::Reshape { shape } => {
                if shape.iter().product::<usize>() != x.len() {
                    return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", x.shape())));
                }
                Ok((x.clone().reshape(shape.clone()), Cache::Shape { in_shape: x.shape().to_vec() }))
            }
        }
    }

    /// Backpropagate `grad_out`. Parameter gradients are accumulated into
    /// `pgrads` when given; the input gradient is returned when `need_input`.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        grad_out: &Tensor<T>,
        pgrads: Option<&mut [Vec<T>]>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        match (&self.kind, cache) {
            (&LayerKind::Conv2d { cin, cout, kernel, stride, pad }, Cache::Conv { cols, in_shape, out_hw }) => {
                let n = out_hw.0 * out_hw.1;
                let kk = cin * kernel * kernel;
                let dy = grad_out.data();
                if let Some(pg) = pgrads {
                    matmul_a_bt_acc(cout, n, kk, dy, cols, &mut pg[0]);
                    for (co, chunk) in dy.chunks(n).enumerate() {
                        pg[1][co] = pg[1][co] + chunk.iter().copied().sum::<T>();
                    }
                }
                need_input.then(|| {
                    let mut dcols = vec![T::zero(); kk * n];
                    matmul_at_b(kk, cout, n, &self.params[0].data, dy, &mut dcols);
                    Tensor::new(in_shape.to_vec(), col2im(&dcols, *in_shape, kernel, stride, pad, *out_hw))
                })
            }
            (&LayerKind::ConvTranspose2d { cin, cout, kernel, stride, pad }, Cache::ConvTranspose { input, out_hw }) => {
                let [_, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
                let rows = cout * kernel * kernel;
                let dcols = im2col(grad_out.data(), [cout, out_hw.0, out_hw.1], kernel, stride, pad, (h, w));
                if let Some(pg) = pgrads {
                    matmul_a_bt_acc(cin, h * w, rows, input.data(), &dcols, &mut pg[0]);
                    for (co, chunk) in grad_out.data().chunks(out_hw.0 * out_hw.1).enumerate() {
                        pg[1][co] = pg[1][co] + chunk.iter().copied().sum::<T>();
                    }
                }
                need_input.then(|| {
                    let mut dx = vec![T::zero(); cin * h * w];
                    matmul(cin, rows, h * w, &self.params[0].data, &dcols, &mut dx);
                    Tensor::new(input.shape().to_vec(), dx)
                })
            }
            (LayerKind::InstanceNorm { .. }, Cache::Norm { xhat, inv_std }) => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let nt = T::lit(n as f64);
                let dy = grad_out.data();
                if let Some(pg) = pgrads {
                    for ci in 0..c {
                        let (mut dg, mut db) = (T::zero(), T::zero());
                        for i in ci * n..(ci + 1) * n {
                            dg = dg + dy[i] * xhat[i];
                            db = db + dy[i];
                        }
                        pg[0][ci] = pg[0][ci] + dg;
                        pg[1][ci] = pg[1][ci] + db;
                    }
                }
                need_input.then(|| {
                    let mut dx = vec![T::zero(); c * n];
                    for ci in 0..c {
                        let g = self.params[0].data[ci];
                        let range = ci * n..(ci + 1) * n;
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for i in range.clone() {
                            let dxh = dy[i] * g;
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[i];
                        }
                        for i in range {
                            let dxh = dy[i] * g;
                            dx[i] = inv_std[ci] / nt * (nt * dxh - s1 - xhat[i] * s2);
                        }
                    }
                    Tensor::new(grad_out.shape().to_vec(), dx)
                })
            }
            (&LayerKind::Linear { inputs, outputs }, Cache::Linear { input }) => {
                let dy = grad_out.data();
                if let Some(pg) = pgrads {
                    matmul_a_bt_acc(outputs, 1, inputs, dy, input.data(), &mut pg[0]);
                    for (b, &g) in pg[1].iter_mut().zip(dy) {
                        *b = *b + g;
                    }
                }
                need_input.then(|| {
                    let mut dx = vec![T::zero(); inputs];
                    matmul_at_b_acc(inputs, outputs, 1, &self.params[0].data, dy, &mut dx);
                    Tensor::new(input.shape().to_vec(), dx)
                })
            }
            (&LayerKind::LeakyRelu { slope }, Cache::Act { input }) => need_input.then(|| {
                let s = T::lit(slope);
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { g * s })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)
            }),
            (LayerKind::Relu, Cache::Act { input }) => need_input.then(|| {
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)
            }),
            (LayerKind::Sigmoid, Cache::Sigmoid { output }) => need_input.then(|| {
                let data =
                    output.data().iter().zip(grad_out.data()).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                Tensor::new(output.shape().to_vec(), data)
            }),
            (LayerKind::GlobalAvgPool, Cache::Shape { in_shape }) => need_input.then(|| {
                let hw = in_shape[1] * in_shape[2];
                let scale = T::lit(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(in_shape.iter().product());
                for &g in grad_out.data() {
                    dx.extend(std::iter::repeat(g * scale).take(hw));
                }
                Tensor::new(in_shape.clone(), dx)
            }),
            (LayerKind::Reshape { .. }, Cache::Shape { in_shape }) => {
                need_input.then(|| grad_out.clone().reshape(in_shape.clone()))
            }
            (kind, _) => unreachable!("cache does not belong to layer {kind:?}"),
        }
    }
}
