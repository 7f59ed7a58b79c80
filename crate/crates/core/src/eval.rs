//! Accuracy reports, synthesis panels, orthogonality statistics and
//! embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorgen::{render, Dataset, FactorTuple, NEUTRAL, NUM_POSE_BUCKETS};
use crate::image::Image;
use crate::losses;
use crate::model::{argmax, compose, decode, encode, sum_features, Mode, ModelBundle};
use crate::nn::Real;

/// Yaw thresholds of the test subsets: all samples, then `|yaw| > t`.
pub const SUBSET_THRESHOLDS: [Option<f32>; 5] = [None, Some(10.0), Some(20.0), Some(30.0), Some(40.0)];

pub fn subset_name(threshold: Option<f32>) -> String {
    match threshold {
        None => "All".into(),
        Some(t) => format!(">{t}°"),
    }
}

pub fn bucket_name(bucket: usize) -> String {
    if bucket + 1 == NUM_POSE_BUCKETS {
        format!(">{}°", bucket * 10)
    } else {
        format!("{}-{}°", bucket * 10, bucket * 10 + 10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub name: String,
    pub count: usize,
    pub correct: usize,
    /// Absent for empty subsets.
    pub accuracy: Option<f64>,
}

impl Accuracy {
    fn new(name: String, count: usize, correct: usize) -> Self {
        let accuracy = (count > 0).then(|| correct as f64 / count as f64);
        Self { name, count, correct, accuracy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Orthogonality {
    pub mean_abs_cos: f64,
    pub max_abs_cos: f64,
    pub count: usize,
    /// Pairs where a feature norm fell below the guard.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub per_class: Vec<Accuracy>,
    /// Row = true class, column = predicted class; nonempty rows sum to 1.
    pub confusion: Vec<Vec<f64>>,
    /// All, >10°, >20°, >30°, >40°.
    pub subsets: Vec<Accuracy>,
    pub buckets: Vec<Accuracy>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub orthogonality: Option<Orthogonality>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub neutral_score: Option<f64>,
}

impl EvalReport {
    pub fn subset(&self, threshold: Option<f32>) -> Option<&Accuracy> {
        let name = subset_name(threshold);
        self.subsets.iter().find(|s| s.name == name)
    }
}

/// Accuracy tables for given predictions on `indices`.
pub fn score_predictions(
    mode: Mode,
    dataset: &Dataset,
    indices: &[usize],
    predictions: &[usize],
) -> Result<EvalReport> {
    if indices.len() != predictions.len() {
        return Err(Error::Shape(format!("{} samples but {} predictions", indices.len(), predictions.len())));
    }
    let k = dataset.meta.num_expressions as usize;
    let mut counts = vec![vec![0usize; k]; k];
    let mut subsets = vec![(0usize, 0usize); SUBSET_THRESHOLDS.len()];
    let mut buckets = vec![(0usize, 0usize); NUM_POSE_BUCKETS];
    for (&i, &pred) in indices.iter().zip(predictions) {
        let s = &dataset.samples[i];
        if pred >= k {
            return Err(Error::Domain(format!("prediction {pred} outside {k} classes")));
        }
        let hit = usize::from(pred == s.y_e as usize);
        counts[s.y_e as usize][pred] += 1;
        for (slot, t) in subsets.iter_mut().zip(SUBSET_THRESHOLDS) {
            if t.map_or(true, |t| s.factors.yaw_deg.abs() > t) {
                slot.0 += 1;
                slot.1 += hit;
            }
        }
        let b = &mut buckets[s.y_p as usize];
        b.0 += 1;
        b.1 += hit;
    }
    let per_class = (0..k).map(|c| Accuracy::new(format!("{c}"), counts[c].iter().sum(), counts[c][c])).collect();
    let confusion = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 }).collect()
        })
        .collect();
    let correct: usize = (0..k).map(|c| counts[c][c]).sum();
    Ok(EvalReport {
        mode,
        count: indices.len(),
        accuracy: (!indices.is_empty()).then(|| correct as f64 / indices.len() as f64),
        per_class,
        confusion,
        subsets: subsets.iter().zip(SUBSET_THRESHOLDS).map(|(&(n, c), t)| Accuracy::new(subset_name(t), n, c)).collect(),
        buckets: buckets.iter().enumerate().map(|(b, &(n, c))| Accuracy::new(bucket_name(b), n, c)).collect(),
        orthogonality: None,
        neutral_score: None,
    })
}

/// Full evaluation on `indices`: inference through `C_exp(E_exp(x))`, plus
/// orthogonality and the neutral-synthesis score where the mode allows.
pub fn evaluate<T: Real>(bundle: &ModelBundle<T>, dataset: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    let predictions = indices
        .iter()
        .map(|&i| Ok(argmax(&bundle.predict(&dataset.samples[i].image)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = score_predictions(bundle.mode, dataset, indices, &predictions)?;
    if bundle.e_id.is_some() && !indices.is_empty() {
        report.orthogonality = Some(orthogonality_report(bundle, dataset, indices)?);
    }
    if bundle.g_dec.is_some() && !indices.is_empty() {
        report.neutral_score = Some(neutral_synthesis_score(bundle, dataset, indices)?);
    }
    Ok(report)
}

/// Mean and max of `|cos(f_id, f_exp)|` over `indices`.
pub fn orthogonality_report<T: Real>(
    bundle: &ModelBundle<T>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Orthogonality> {
    let e_id = bundle.e_id()?;
    let pairs = indices
        .iter()
        .map(|&i| {
            let image = &dataset.samples[i].image;
            Ok((encode(e_id, image)?.values, encode(&bundle.e_exp, image)?.values))
        })
        .collect::<Result<Vec<_>>>()?;
    orthogonality_of(&pairs)
}

pub fn orthogonality_of<T: Real>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<Orthogonality> {
    let (mut sum, mut max, mut degenerate) = (0.0f64, 0.0f64, 0);
    for (a, b) in pairs {
        let term = losses::abs_cosine(a, b)?;
        sum += term.value;
        max = max.max(term.value);
        degenerate += usize::from(term.degenerate);
    }
    let mean_abs_cos = if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 };
    Ok(Orthogonality { mean_abs_cos, max_abs_cos: max, count: pairs.len(), degenerate })
}

/// Noise-free neutral render of `identity` at `yaw`.
pub fn neutral_render(dataset: &Dataset, identity: u32, yaw: f32) -> Result<Image> {
    render(&FactorTuple::new(identity, yaw, NEUTRAL), dataset.meta.shape)
}

/// The identity a sample's synthesized neutral is compared against: drawn
/// uniformly from the dataset's other identities, seeded by dataset seed and
/// sample index so every subset sees the same pairing.
pub fn comparison_identity(dataset: &Dataset, index: usize) -> Result<u32> {
    let mut ids: Vec<u32> = dataset.samples.iter().map(|s| s.identity_id()).collect();
    ids.sort_unstable();
    ids.dedup();
    let own = dataset.samples[index].identity_id();
    ids.retain(|&id| id != own);
    if ids.is_empty() {
        return Err(Error::Domain("neutral-synthesis score needs at least 2 identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dataset.meta.seed ^ 0x6e65_7574);
    rng.set_stream(index as u64);
    Ok(ids[rng.gen_range(0..ids.len())])
}

/// Fraction of samples whose synthesized neutral is strictly L1-closer to
/// the ground-truth neutral render of their own identity than to that of
/// [`comparison_identity`], both at the sample's yaw.
pub fn neutral_synthesis_score<T: Real>(bundle: &ModelBundle<T>, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let dec = bundle.g_dec()?;
    let mut hits = 0;
    for &i in indices {
        let s = &dataset.samples[i];
        let fake = decode(dec, &bundle.neutral_feature(&s.image)?)?;
        let own = neutral_render(dataset, s.identity_id(), s.factors.yaw_deg)?;
        let other = neutral_render(dataset, comparison_identity(dataset, i)?, s.factors.yaw_deg)?;
        hits += usize::from(fake.l1(&own)? < fake.l1(&other)?);
    }
    Ok(hits as f64 / indices.len().max(1) as f64)
}

/// Which feature combination a panel image decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelKind {
    Real,
    Id,
    IdPose,
    IdPoseExp,
}

impl PanelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PanelKind::Real => "real",
            PanelKind::Id => "id",
            PanelKind::IdPose => "id_pose",
            PanelKind::IdPoseExp => "id_pose_exp",
        }
    }
}

/// `[x, decode(f_id), decode(f_id + f_pose), decode(f_id + f_pose + f_exp)]`.
///
/// Without a pose branch the third image is omitted and the last one
/// decodes `f_id + f_exp`.
pub fn synthesis_panel<T: Real>(bundle: &ModelBundle<T>, x: &Image) -> Result<Vec<(PanelKind, Image)>> {
    bundle.check_image(x)?;
    let dec = bundle.g_dec()?;
    let f_id = encode(bundle.e_id()?, x)?;
    let f_exp = encode(&bundle.e_exp, x)?;
    let mut panel = vec![(PanelKind::Real, x.clone()), (PanelKind::Id, decode(dec, &f_id)?)];
    let full = match &bundle.e_pose {
        Some(e_pose) => {
            let f_pose = encode(e_pose, x)?;
            panel.push((PanelKind::IdPose, decode(dec, &compose(&f_id, &f_pose, None)?)?));
            compose(&f_id, &f_pose, Some(&f_exp))?
        }
        None => sum_features(&[&f_id, &f_exp])?,
    };
    panel.push((PanelKind::IdPoseExp, decode(dec, &full)?));
    Ok(panel)
}

/// Write a panel as `{sample}_{kind}.pgm` (`.ppm` for colour) under `dir`.
pub fn write_panel(dir: &Path, sample: usize, panel: &[(PanelKind, Image)]) -> Result<Vec<PathBuf>> {
    panel
        .iter()
        .map(|(kind, image)| {
            let ext = if image.shape().channels == 1 { "pgm" } else { "ppm" };
            let path = dir.join(format!("{sample}_{}.{ext}", kind.as_str()));
            image.write_pnm(&path)?;
            Ok(path)
        })
        .collect()
}

/// One exported expression embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub index: usize,
    pub identity_id: u32,
    pub y_e: u32,
    pub y_p: u32,
    pub f_exp: Vec<f32>,
}

/// `f_exp` of every dataset sample, in dataset order.
pub fn export_embeddings(bundle: &ModelBundle<f32>, dataset: &Dataset) -> Result<Vec<EmbeddingRow>> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            Ok(EmbeddingRow {
                index,
                identity_id: s.identity_id(),
                y_e: s.y_e,
                y_p: s.y_p,
                f_exp: encode(&bundle.e_exp, &s.image)?.values,
            })
        })
        .collect()
}

/// Tab-separated rows `index identity y_e y_p f_0 … f_{d-1}` after a `#`
/// header line; components in scientific notation with 9 significant digits.
pub fn write_embeddings(rows: &[EmbeddingRow], mut out: impl Write) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.f_exp.len());
    let mut header = String::from("# index\tidentity\ty_e\ty_p");
    (0..d).for_each(|i| write!(header, "\tf{i}").expect("string write"));
    writeln!(out, "{header}")?;
    for r in rows {
        let mut line = format!("{}\t{}\t{}\t{}", r.index, r.identity_id, r.y_e, r.y_p);
        r.f_exp.iter().for_each(|v| write!(line, "\t{v:.8e}").expect("string write"));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_embeddings(input: impl BufRead) -> Result<Vec<EmbeddingRow>> {
    let bad = |n: usize| Error::Format(format!("embedding line {n} is malformed"));
    let mut rows = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let mut int = || fields.next().and_then(|f| f.parse::<u64>().ok()).ok_or_else(|| bad(n + 1));
        let (index, identity_id, y_e, y_p) = (int()? as usize, int()? as u32, int()? as u32, int()? as u32);
        let f_exp = fields.map(|f| f.parse::<f32>().map_err(|_| bad(n + 1))).collect::<Result<_>>()?;
        rows.push(EmbeddingRow { index, identity_id, y_e, y_p, f_exp });
    }
    Ok(rows)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Between-class / within-class distance ratio of embeddings grouped by
/// expression label: mean Euclidean distance between class centroids over
/// the mean distance of each row to its own class centroid.
///
/// `None` with fewer than two classes or zero within-class spread.
pub fn class_separation_ratio(rows: &[EmbeddingRow]) -> Option<f64> {
    let mut groups: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let (sum, n) = groups.entry(r.y_e).or_insert_with(|| (vec![0.0; r.f_exp.len()], 0));
        sum.iter_mut().zip(&r.f_exp).for_each(|(s, &v)| *s += v as f64);
        *n += 1;
    }
    let centroids: BTreeMap<u32, Vec<f64>> =
        groups.into_iter().map(|(c, (sum, n))| (c, sum.into_iter().map(|s| s / n as f64).collect())).collect();
    if centroids.len() < 2 {
        return None;
    }
    let within = rows
        .iter()
        .map(|r| distance(&r.f_exp.iter().map(|&v| v as f64).collect::<Vec<_>>(), &centroids[&r.y_e]))
        .sum::<f64>()
        / rows.len() as f64;
    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let mut between = 0.0;
    let mut pairs = 0;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            between += distance(cs[i], cs[j]);
            pairs += 1;
        }
    }
    (within > 0.0).then(|| between / pairs as f64 / within)
}

/// Plain-text subset table: one row per subset, one accuracy column (in
/// percent) per labelled report. The count column comes from the first report.
pub fn format_table(columns: &[(&str, &EvalReport)]) -> String {
    let mut out = format!("{:<8} {:>6}", "subset", "count");
    for (label, _) in columns {
        write!(out, " {label:>10}").expect("string write");
    }
    out.push('\n');
    for (row, threshold) in SUBSET_THRESHOLDS.iter().enumerate() {
        let count = columns.first().map_or(0, |(_, r)| r.subsets[row].count);
        // Pad by characters, not bytes: the degree sign is two bytes.
        let name = subset_name(*threshold);
        write!(out, "{name}{} {count:>6}", " ".repeat(8usize.saturating_sub(name.chars().count()))).expect("string write");
        for (_, report) in columns {
            match report.subsets[row].accuracy {
                Some(a) => write!(out, " {:>10.2}", 100.0 * a),
                None => write!(out, " {:>10}", "-"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}
