use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use disentangle::checkpoint::Checkpoint;
use disentangle::eval::{self, bucket_name, EvalReport};
use disentangle::factorgen::{build_dataset, Dataset, NUM_POSE_BUCKETS};
use disentangle::model::{pretrain_identity_encoder, Mode, ModelBundle, Problem};
use disentangle::trainer::{MetricsRecord, TrainConfig, Trainer};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Split};

/// Exit status 2 for `Usage`, 1 for `Runtime`.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<disentangle::Error> for Failure {
    fn from(e: disentangle::Error) -> Self {
        use disentangle::Error;
        match e {
            Error::Config(_) | Error::MissingNetwork(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn require(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found at {}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::from)
}

fn echo_config(cfg: &RunConfig, dir: &Path, command: &str) -> Outcome {
    create_dir(dir)?;
    let path = dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let path = cfg.dataset_path();
    require(&path, "dataset")?;
    Ok(Dataset::load(&path).with_context(|| format!("reading {}", path.display()))?)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint, Failure> {
    require(path, what)?;
    Ok(Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?)
}

fn split_indices(cfg: &RunConfig, dataset: &Dataset, split: Split) -> Result<Vec<usize>, Failure> {
    let (train, test) = dataset.split(cfg.train.test_fold)?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
        Split::All => (0..dataset.samples.len()).collect(),
    })
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn generate(cfg: &RunConfig) -> Outcome {
    echo_config(cfg, &cfg.paths.out, "generate")?;
    let dataset = build_dataset(&cfg.generator)?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    dataset.save(&path).with_context(|| format!("writing {}", path.display()))?;
    let all: Vec<usize> = (0..dataset.samples.len()).collect();
    let hist = dataset.bucket_histogram(&all);
    println!("{:<7} {:<8} {:>7} {:>7}", "bucket", "yaw", "count", "share");
    for (b, &n) in hist.iter().enumerate().take(NUM_POSE_BUCKETS) {
        let share = 100.0 * n as f64 / all.len() as f64;
        println!("{b:<7} {:<8} {n:>7} {share:>6.1}%", bucket_name(b).replace('°', ""));
    }
    println!("{:<16} {:>7}", "total", hist.iter().sum::<usize>());
    println!("wrote {} ({} samples, sha256 {})", path.display(), all.len(), sha256_file(&path)?);
    Ok(())
}

pub fn pretrain_id(cfg: &RunConfig) -> Outcome {
    let dataset = load_dataset(cfg)?;
    echo_config(cfg, &cfg.paths.out, "pretrain-id")?;
    let (train, _) = dataset.split(cfg.train.test_fold)?;
    let outcome = pretrain_identity_encoder(&dataset, &train, &cfg.model, &cfg.pretrain)?;
    let path = cfg.identity_path();
    Checkpoint::identity(&outcome, &cfg.model, Problem::of(&dataset))
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("identity accuracy {:.4} on {} training samples", outcome.accuracy, train.len());
    println!("wrote {} (e_id digest {})", path.display(), outcome.digest);
    Ok(())
}

/// Drop log lines past `step` so a resumed run continues a consistent log.
fn truncate_log(path: &Path, step: u64) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let record: MetricsRecord = serde_json::from_str(&line).context("parsing metrics log")?;
        if record.step <= step {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Outcome {
    let dataset = load_dataset(cfg)?;
    let needs_identity = cfg.mode.has_generator() || cfg.model.warm_start;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path, "resume checkpoint")?;
            let stored = ck.header.train.clone().ok_or_else(|| Failure::Usage("checkpoint has no training state".into()))?;
            if ck.header.mode != Some(cfg.mode) || ck.header.model != cfg.model {
                return Err(Failure::Usage("resume checkpoint was trained with a different mode or model config".into()));
            }
            if (TrainConfig { epochs: cfg.train.epochs, ..stored }) != cfg.train {
                return Err(Failure::Usage("resume checkpoint was trained with a different train config".into()));
            }
            ck.trainer(Some(cfg.train.clone()))?
        }
        None => {
            let identity = if needs_identity {
                let ck = load_checkpoint(&cfg.identity_path(), "identity checkpoint (run `pretrain-id` first)")?;
                Some(ck.identity_encoder()?)
            } else {
                None
            };
            let bundle = ModelBundle::new(cfg.model.clone(), Problem::of(&dataset), cfg.mode, identity, cfg.seed)?;
            Trainer::new(cfg.train.clone(), bundle)?
        }
    };
    trainer.check_dataset(&dataset)?;
    let dir = cfg.run_dir();
    echo_config(cfg, &dir, "train")?;
    let e_id_before = trainer.bundle.e_id.as_ref().map(|n| n.digest());
    let log_path = dir.join("metrics.log");
    if resume.is_some() {
        truncate_log(&log_path, trainer.step)?;
    } else {
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    }
    let log_file = fs::OpenOptions::new().create(true).append(true).open(&log_path).context("opening metrics log")?;
    let log = RefCell::new(BufWriter::new(log_file));
    let total = trainer.config.epochs;
    let result = trainer.run(
        &dataset,
        &mut |record| {
            let line = serde_json::to_string(record).expect("metrics serialize");
            writeln!(log.borrow_mut(), "{line}")?;
            Ok(())
        },
        &mut |t, summary| {
            let ck_path = dir.join(format!("epoch_{:03}.ckpt", t.epoch));
            Checkpoint::from_trainer(t).save(&ck_path)?;
            log.borrow_mut().flush()?;
            let g = summary.mean.g_total.map_or(String::new(), |g| format!(" g_total {g:.4}"));
            println!("epoch {}/{total} lr {:.1e} c {:.4}{g}", t.epoch, summary.lr, summary.mean.c);
            Ok(())
        },
    );
    result?;
    log.into_inner().flush().context("writing metrics log")?;
    if trainer.bundle.e_id.as_ref().map(|n| n.digest()) != e_id_before {
        return Err(Failure::Runtime(anyhow::anyhow!("identity encoder changed during training")));
    }
    let final_path = dir.join("final.ckpt");
    Checkpoint::from_trainer(&trainer).save(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn model_for_eval(cfg: &RunConfig) -> Result<(Dataset, ModelBundle<f32>, PathBuf), Failure> {
    let ck_path = cfg.checkpoint_path();
    require(&ck_path, "model checkpoint")?;
    let dataset = load_dataset(cfg)?;
    let bundle = load_checkpoint(&ck_path, "model checkpoint")?.bundle()?;
    if bundle.problem != Problem::of(&dataset) {
        return Err(Failure::Usage("checkpoint was trained on a differently shaped dataset".into()));
    }
    let dir = cfg.paths.out.join(bundle.mode.as_str());
    Ok((dataset, bundle, dir))
}

fn describe(report: &EvalReport) -> String {
    let mut out = String::new();
    let pct = |a: Option<f64>| a.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
    out.push_str(&format!("mode {} on {} samples: accuracy {}\n", report.mode, report.count, pct(report.accuracy)));
    out.push_str("per pose bucket:\n");
    for b in &report.buckets {
        out.push_str(&format!("  {:<8} {:>5} {:>8}\n", b.name, b.count, pct(b.accuracy)));
    }
    out.push_str("per class:\n");
    for c in &report.per_class {
        out.push_str(&format!("  {:<8} {:>5} {:>8}\n", c.name, c.count, pct(c.accuracy)));
    }
    out.push_str("confusion (rows true, columns predicted):\n");
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        out.push_str(&format!("  {}\n", cells.join(" ")));
    }
    if let Some(o) = &report.orthogonality {
        out.push_str(&format!("|cos(f_id, f_exp)| mean {:.4} max {:.4}\n", o.mean_abs_cos, o.max_abs_cos));
    }
    if let Some(s) = report.neutral_score {
        out.push_str(&format!("neutral-synthesis score {s:.4}\n"));
    }
    out
}

pub fn eval(cfg: &RunConfig) -> Outcome {
    let (dataset, bundle, dir) = model_for_eval(cfg)?;
    let indices = split_indices(cfg, &dataset, cfg.eval.split)?;
    let report = eval::evaluate(&bundle, &dataset, &indices)?;
    // Final checkpoints of the other modes, when present, become extra table columns.
    let mut columns: Vec<(Mode, EvalReport)> = Vec::new();
    for mode in Mode::ALL {
        if mode == bundle.mode {
            columns.push((mode, report.clone()));
            continue;
        }
        let path = cfg.paths.out.join(mode.as_str()).join("final.ckpt");
        if path.is_file() {
            let other = load_checkpoint(&path, "model checkpoint")?.bundle()?;
            if other.problem == bundle.problem {
                columns.push((mode, eval::evaluate(&other, &dataset, &indices)?));
            }
        }
    }
    let labelled: Vec<(&str, &EvalReport)> = columns.iter().map(|(m, r)| (m.as_str(), r)).collect();
    let table = eval::format_table(&labelled);
    echo_config(cfg, &dir, "eval")?;
    let text = format!("{table}\n{}", describe(&report));
    fs::write(dir.join("eval.txt"), &text).context("writing eval.txt")?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(dir.join("eval.json"), json + "\n").context("writing eval.json")?;
    print!("{text}");
    Ok(())
}

pub fn synthesize(cfg: &RunConfig) -> Outcome {
    let (dataset, bundle, dir) = model_for_eval(cfg)?;
    if !bundle.mode.has_generator() {
        return Err(Failure::Usage(format!("mode {} has no decoder to synthesize with", bundle.mode)));
    }
    let indices = split_indices(cfg, &dataset, cfg.eval.split)?;
    echo_config(cfg, &dir, "synthesize")?;
    let panel_dir = dir.join("panels");
    create_dir(&panel_dir)?;
    let mut written = 0;
    for &i in indices.iter().take(cfg.eval.panels) {
        let panel = eval::synthesis_panel(&bundle, &dataset.samples[i].image)?;
        written += eval::write_panel(&panel_dir, i, &panel)?.len();
    }
    println!("wrote {written} images to {}", panel_dir.display());
    Ok(())
}

pub fn export_embeddings(cfg: &RunConfig) -> Outcome {
    let (dataset, bundle, dir) = model_for_eval(cfg)?;
    let rows = eval::export_embeddings(&bundle, &dataset)?;
    echo_config(cfg, &dir, "export-embeddings")?;
    let path = dir.join("embeddings.tsv");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    eval::write_embeddings(&rows, &mut out)?;
    out.flush().context("writing embeddings")?;
    let ratio = eval::class_separation_ratio(&rows).map_or("-".into(), |r| format!("{r:.4}"));
    println!("wrote {} rows to {} (between/within class ratio {ratio})", rows.len(), path.display());
    Ok(())
}
