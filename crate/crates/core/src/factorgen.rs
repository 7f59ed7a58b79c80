//! Procedural face-like images with known identity, yaw and expression
//! factors, plus dataset assembly, pose bucketing and identity-disjoint folds.
//!
//! Geometry lives in a 32×32 reference frame (pixel centres at `i + 0.5`) and
//! is scaled to the requested raster size. Every pixel is the average of a
//! 4×4 grid of point samples, each painted by the last primitive covering it.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};

pub const NEUTRAL: u32 = 0;
pub const NUM_POSE_BUCKETS: usize = 5;
pub const MAX_YAW_DEG: f32 = 50.0;
/// Expressions the renderer knows: neutral, smile, surprise, sad, angry, laugh.
pub const MAX_EXPRESSIONS: usize = 6;
pub const GENERATOR_VERSION: u32 = 1;

const SUPERSAMPLE: usize = 4;
const BACKGROUND: f64 = 0.05;
/// Additive-recurrence steps for spreading identity parameters (powers of the
/// inverse of the real root of x^5 = x + 1).
const SPREAD: [f64; 4] = [0.856_674_883_854_5, 0.733_891_856_627_1, 0.628_706_721_037_8, 0.538_597_257_223_6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// Head width / height.
    pub aspect: f32,
    /// Half distance between the eye centres, reference pixels.
    pub eye_spacing: f32,
    /// Size multiplier for eyes and mouth.
    pub feature_scale: f32,
    /// Skin intensity in `(0, 1]`.
    pub intensity: f32,
}

impl IdentityParams {
    pub fn for_identity(identity_id: u32) -> Self {
        let u = SPREAD.map(|a| (0.5 + (identity_id as f64 + 1.0) * a).fract());
        Self {
            aspect: (0.70 + 0.25 * u[0]) as f32,
            eye_spacing: (3.4 + 1.8 * u[1]) as f32,
            feature_scale: (0.85 + 0.35 * u[2]) as f32,
            intensity: (0.45 + 0.50 * u[3]) as f32,
        }
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.aspect, self.eye_spacing, self.feature_scale, self.intensity]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorTuple {
    pub identity_id: u32,
    pub identity_params: IdentityParams,
    pub yaw_deg: f32,
    pub expression_id: u32,
}

impl FactorTuple {
    pub fn new(identity_id: u32, yaw_deg: f32, expression_id: u32) -> Self {
        Self { identity_id, identity_params: IdentityParams::for_identity(identity_id), yaw_deg, expression_id }
    }

    /// Odd identities look the other way; the image is the mirror of the even case.
    pub fn is_mirrored(&self) -> bool {
        self.identity_id % 2 == 1
    }
}

/// One filled shape in reference coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, lower_only: bool, value: f64 },
    /// Parabolic stroke: centreline `cy + bend * (1 - 2u²)` for `u = (x - cx) / half_width` in `[-1, 1]`.
    Curve { cx: f64, cy: f64, half_width: f64, bend: f64, thickness: f64, value: f64 },
    /// Straight stroke between two points, `thickness` measured vertically.
    Segment { x0: f64, y0: f64, x1: f64, y1: f64, thickness: f64, value: f64 },
}

impl Primitive {
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Ellipse { cx, cy, rx, ry, lower_only, .. } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0 && (!lower_only || y >= cy)
            }
            Primitive::Curve { cx, cy, half_width, bend, thickness, .. } => {
                let u = (x - cx) / half_width;
                u.abs() <= 1.0 && (y - (cy + bend * (1.0 - 2.0 * u * u))).abs() <= thickness
            }
            Primitive::Segment { x0, y0, x1, y1, thickness, .. } => {
                let t = (x - x0) / (x1 - x0);
                (0.0..=1.0).contains(&t) && (y - (y0 + t * (y1 - y0))).abs() <= thickness
            }
        }
    }

    fn value(&self) -> f64 {
        match *self {
            Primitive::Ellipse { value, .. } | Primitive::Curve { value, .. } | Primitive::Segment { value, .. } => {
                value
            }
        }
    }
}

/// Paint order of the primitives for a factor tuple, before mirroring.
///
/// Yaw slides the facial features sideways faster than the head outline,
/// foreshortens the far eye and the mouth, and grows the nose on the turned
/// side. Expression sets mouth shape and eye opening.
pub fn face_primitives(f: &FactorTuple) -> Vec<Primitive> {
    let p = f.identity_params;
    let (aspect, spacing, sc, skin) =
        (p.aspect as f64, p.eye_spacing as f64, p.feature_scale as f64, p.intensity as f64);
    let yaw = (f.yaw_deg as f64).to_radians();
    let (s, c) = (yaw.sin(), yaw.cos());
    let fx = 16.0 + 7.0 * s;
    let dark = 0.15 * skin;

    let mut prims = vec![Primitive::Ellipse {
        cx: 16.0 + 1.5 * s,
        cy: 16.5,
        rx: 12.0 * aspect,
        ry: 12.5,
        lower_only: false,
        value: skin,
    }];

    let eye_open = [1.0, 0.8, 1.5, 0.75, 0.6, 0.55][f.expression_id as usize];
    for (side, fore) in [(-1.0, 1.0 + 0.15 * s), (1.0, 1.0 - 0.35 * s)] {
        let ex = fx + side * spacing * c;
        prims.push(Primitive::Ellipse {
            cx: ex,
            cy: 13.0,
            rx: 1.6 * sc * fore,
            ry: 1.1 * sc * eye_open,
            lower_only: false,
            value: dark,
        });
        if f.expression_id == 4 {
            // Brows slanting down toward the nose.
            let (outer, inner) = (ex + side * 2.2 * sc, ex - side * 1.2 * sc);
            let (a, b) = if outer < inner { ((outer, 9.6), (inner, 11.0)) } else { ((inner, 11.0), (outer, 9.6)) };
            prims.push(Primitive::Segment { x0: a.0, y0: a.1, x1: b.0, y1: b.1, thickness: 0.55, value: dark });
        }
    }

    prims.push(Primitive::Ellipse {
        cx: fx + 2.0 * s,
        cy: 17.5,
        rx: 0.8 + 1.2 * s,
        ry: 1.6,
        lower_only: false,
        value: 0.7 * skin,
    });

    let mouth = 0.2 * skin;
    let half_width = 4.2 * sc * c;
    let thickness = 0.75 * sc;
    prims.push(match f.expression_id {
        0 => Primitive::Curve { cx: fx, cy: 22.5, half_width, bend: 0.0, thickness, value: mouth },
        1 => Primitive::Curve { cx: fx, cy: 22.5, half_width, bend: 1.2, thickness, value: mouth },
        2 => Primitive::Ellipse { cx: fx, cy: 23.0, rx: 2.0 * sc * c, ry: 2.8 * sc, lower_only: false, value: mouth },
        3 => Primitive::Curve { cx: fx, cy: 22.5, half_width, bend: -1.2, thickness, value: mouth },
        4 => Primitive::Curve { cx: fx, cy: 22.5, half_width: 0.7 * half_width, bend: 0.0, thickness, value: mouth },
        _ => Primitive::Ellipse { cx: fx, cy: 21.5, rx: half_width, ry: 3.2 * sc, lower_only: true, value: mouth },
    });
    prims
}

/// Rasterize a factor tuple. Pure: identical inputs give bit-identical pixels.
pub fn render(factors: &FactorTuple, shape: ImageShape) -> Result<Image> {
    if !(0.0..=MAX_YAW_DEG).contains(&factors.yaw_deg) {
        return Err(Error::Domain(format!("yaw {}° outside [0, {MAX_YAW_DEG}]", factors.yaw_deg)));
    }
    if factors.expression_id as usize >= MAX_EXPRESSIONS {
        return Err(Error::Domain(format!("unknown expression id {}", factors.expression_id)));
    }
    if shape.channels != 1 && shape.channels != 3 {
        return Err(Error::Shape(format!("{} channels; expected 1 or 3", shape.channels)));
    }
    let prims = face_primitives(factors);
    let ImageShape { height, width, channels } = shape;
    let (sx, sy) = (32.0 / width as f64, 32.0 / height as f64);
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut gray = vec![0.0f64; height * width];
    for py in 0..height {
        for px in 0..width {
            let mut acc = 0.0;
            for ky in 0..SUPERSAMPLE {
                let y = (py as f64 + (ky as f64 + 0.5) / SUPERSAMPLE as f64) * sy;
                let sample = |kx: usize| {
                    let x = (px as f64 + (kx as f64 + 0.5) / SUPERSAMPLE as f64) * sx;
                    prims.iter().rev().find(|p| p.covers(x, y)).map_or(BACKGROUND, Primitive::value)
                };
                // Outer/inner pairs keep the sum bit-identical under mirroring.
                let mut row = 0.0;
                for kx in 0..SUPERSAMPLE / 2 {
                    row += sample(kx) + sample(SUPERSAMPLE - 1 - kx);
                }
                acc += row;
            }
            gray[py * width + px] = acc / norm;
        }
    }
    let tint: &[f64] = if channels == 1 { &[1.0] } else { &[1.0, 0.82, 0.68] };
    let mut pixels = Vec::with_capacity(shape.len());
    for &t in tint {
        pixels.extend(gray.iter().map(|&g| (g * t).clamp(0.0, 1.0) as f32));
    }
    let img = Image::new(shape, pixels)?;
    Ok(if factors.is_mirrored() { img.mirrored() } else { img })
}

/// Table-style |yaw| buckets: `[0,10) [10,20) [20,30) [30,40) [40,∞)`.
pub fn pose_bucket(yaw_deg: f32) -> Result<u32> {
    if yaw_deg.is_nan() || yaw_deg < 0.0 {
        return Err(Error::Domain(format!("yaw {yaw_deg} must be non-negative")));
    }
    Ok(((yaw_deg / 10.0).floor() as u32).min(NUM_POSE_BUCKETS as u32 - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_identities: u32,
    pub yaws: Vec<f32>,
    pub num_expressions: u32,
    pub n_folds: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Std of additive Gaussian pixel noise, seeded per sample.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            yaws: vec![0.0, 15.0, 25.0, 35.0, 45.0],
            num_expressions: 4,
            n_folds: 5,
            height: 32,
            width: 32,
            channels: 1,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_identities < 2 {
            return bad(format!("n_identities = {} but at least 2 are required", self.n_identities));
        }
        if self.n_folds < 2 {
            return bad(format!("n_folds = {} but at least 2 are required", self.n_folds));
        }
        if self.n_identities < self.n_folds {
            return bad(format!("n_identities = {} is smaller than n_folds = {}", self.n_identities, self.n_folds));
        }
        if !(2..=MAX_EXPRESSIONS as u32).contains(&self.num_expressions) {
            return bad(format!("num_expressions must be in 2..={MAX_EXPRESSIONS}"));
        }
        if self.yaws.is_empty() || self.yaws.iter().any(|y| !(0.0..=MAX_YAW_DEG).contains(y)) {
            return bad(format!("yaws must be a non-empty list within [0, {MAX_YAW_DEG}]"));
        }
        if self.height < 8 || self.width < 8 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad("height and width must be multiples of 8, at least 8".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub factors: FactorTuple,
    pub image: Image,
    pub y_e: u32,
    pub y_p: u32,
    pub fold: u32,
}

impl LabeledSample {
    pub fn identity_id(&self) -> u32 {
        self.factors.identity_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub version: u32,
    pub shape: ImageShape,
    pub num_expressions: u32,
    pub num_pose_buckets: u32,
    pub seed: u64,
    pub n_folds: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<LabeledSample>,
}

/// Full factorial identities × yaws × expressions, identity-major order.
pub fn build_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let shape = config.shape();
    let folds = identity_folds(config.n_identities, config.n_folds, config.seed);
    let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).expect("validated std"));
    let mut samples = Vec::new();
    for id in 0..config.n_identities {
        for &yaw in &config.yaws {
            for expr in 0..config.num_expressions {
                let factors = FactorTuple::new(id, yaw, expr);
                let mut image = render(&factors, shape)?;
                if let Some(noise) = &noise {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(samples.len() as u64);
                    let pixels =
                        image.pixels().iter().map(|&v| (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                    image = Image::new(shape, pixels.collect())?;
                }
                samples.push(LabeledSample { factors, image, y_e: expr, y_p: pose_bucket(yaw)?, fold: folds[id as usize] });
            }
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            version: GENERATOR_VERSION,
            shape,
            num_expressions: config.num_expressions,
            num_pose_buckets: NUM_POSE_BUCKETS as u32,
            seed: config.seed,
            n_folds: config.n_folds,
        },
        samples,
    })
}

/// Fold of every identity: a seeded permutation dealt round-robin.
fn identity_folds(n_identities: u32, n_folds: u32, seed: u64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n_identities).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f01d));
    let mut folds = vec![0; n_identities as usize];
    for (rank, id) in order.into_iter().enumerate() {
        folds[id as usize] = rank as u32 % n_folds;
    }
    folds
}

const MAGIC: &[u8; 8] = b"FACTDS01";

impl Dataset {
    /// `(train, test)` sample indices for one fold.
    pub fn split(&self, test_fold: u32) -> Result<(Vec<usize>, Vec<usize>)> {
        if test_fold >= self.meta.n_folds {
            return Err(Error::Config(format!("test fold {test_fold} but dataset has {} folds", self.meta.n_folds)));
        }
        Ok((0..self.samples.len()).partition(|&i| self.samples[i].fold != test_fold))
    }

    /// Sample count per pose bucket over the given indices.
    pub fn bucket_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.meta.num_pose_buckets as usize];
        for &i in indices {
            hist[self.samples[i].y_p as usize] += 1;
        }
        hist
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut out = Vec::with_capacity(64 + self.samples.len() * (40 + 4 * m.shape.len()));
        out.extend_from_slice(MAGIC);
        for v in [m.version, m.shape.height as u32, m.shape.width as u32, m.shape.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&m.num_expressions.to_le_bytes());
        out.extend_from_slice(&m.num_pose_buckets.to_le_bytes());
        out.extend_from_slice(&m.seed.to_le_bytes());
        out.extend_from_slice(&m.n_folds.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.factors.identity_id.to_le_bytes());
            for p in s.factors.identity_params.as_array() {
                out.extend_from_slice(&p.to_le_bytes());
            }
            out.extend_from_slice(&s.factors.yaw_deg.to_le_bytes());
            for v in [s.factors.expression_id, s.y_e, s.y_p, s.fold] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for p in s.image.pixels() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != GENERATOR_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let shape = ImageShape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let num_expressions = r.u32()?;
        let num_pose_buckets = r.u32()?;
        let seed = r.u64()?;
        let n_folds = r.u32()?;
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let identity_id = r.u32()?;
            let identity_params =
                IdentityParams { aspect: r.f32()?, eye_spacing: r.f32()?, feature_scale: r.f32()?, intensity: r.f32()? };
            let yaw_deg = r.f32()?;
            let (expression_id, y_e, y_p, fold) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let pixels = (0..shape.len()).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            samples.push(LabeledSample {
                factors: FactorTuple { identity_id, identity_params, yaw_deg, expression_id },
                image: Image::new(shape, pixels)?,
                y_e,
                y_p,
                fold,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last sample".into()));
        }
        Ok(Self {
            meta: DatasetMeta { version, shape, num_expressions, num_pose_buckets, seed, n_folds },
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    /// A u32 length followed by that many UTF-8 bytes.
    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
}
