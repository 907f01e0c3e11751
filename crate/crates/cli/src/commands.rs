use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use revhrnet::analyzer::{analyze, compare};
use revhrnet::dataio::{class_color, generate_synthetic, load_image, load_split, Split};
use revhrnet::netpbm::{write_pgm, write_ppm};
use revhrnet::spec::check_divisible;
use revhrnet::trainer::{evaluate, train, LogRecord};
use revhrnet::{load_checkpoint, ArchitectureSpec, Result, SegError, SegModel};

use crate::config::{RunConfig, Sidecar};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.jsonl";

#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainOverrides {
    /// Dataset directory (overrides the config).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Seed for parameter initialisation.
    #[arg(long)]
    pub init_seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.dataset {
            // Flag paths are relative to the working directory.
            cfg.dataset = Some(std::path::absolute(d).unwrap_or_else(|_| d.clone()));
        }
        let t = &mut cfg.train;
        t.steps = self.steps.unwrap_or(t.steps);
        t.seed = self.seed.unwrap_or(t.seed);
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.eval_every = self.eval_every.unwrap_or(t.eval_every);
        cfg.model.init_seed = self.init_seed.unwrap_or(cfg.model.init_seed);
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SegError::io(dir, e))
}

pub fn generate(seed: u64, count: usize, size: usize, classes: usize, out: &Path) -> Result<()> {
    let m = generate_synthetic(seed, count, size, classes, out)?;
    println!(
        "wrote {} samples ({size}x{size}, {classes} classes) to {}",
        m.splits.train.len(),
        out.display()
    );
    Ok(())
}

pub fn train_cmd(config: &Path, out: &Path, overrides: &TrainOverrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.train.validate()?;
    let manifest = cfg.manifest()?;
    let spec = cfg.spec()?;
    if spec.decoder.num_classes != manifest.num_classes {
        return Err(SegError::Invalid(format!(
            "model.num_classes {} but the dataset has {}",
            spec.decoder.num_classes, manifest.num_classes
        )));
    }
    let mut model = SegModel::<f32>::build(&spec, cfg.model.init_seed)?;

    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    Sidecar {
        architecture: spec,
        mean: manifest.mean,
        std: manifest.std,
    }
    .save(&ckpt)?;
    let log_path = out.join(LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(|e| SegError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_path = Some(ckpt.clone());
    let result = train(&mut model, &manifest, &train_cfg, &mut log);
    log.flush().map_err(|e| SegError::io(&log_path, e))?;
    let outcome = result?;
    if let Some(LogRecord::Header { streams, .. }) = outcome.records.first() {
        eprintln!("trained {} steps over {streams} streams", train_cfg.steps);
    }
    println!("{}", serde_json::to_string(&outcome.final_metrics)?);
    Ok(())
}

pub fn eval_cmd(config: &Path, checkpoint: &Path, split: Split, dataset: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(d) = dataset {
        cfg.dataset = Some(std::path::absolute(d).unwrap_or_else(|_| d.to_path_buf()));
    }
    let manifest = cfg.manifest()?;
    let spec = cfg.spec()?;
    let mut model = SegModel::<f32>::build(&spec, cfg.model.init_seed)?;
    load_checkpoint(&mut model, checkpoint)?;
    let samples = load_split::<f32>(&manifest, split)?;
    if samples.is_empty() {
        return Err(SegError::Invalid(format!("split {split} is empty")));
    }
    let report = evaluate(&model, &samples, cfg.train.batch_size, manifest.ignore_index)?.report()?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn load_trained(checkpoint: &Path) -> Result<(SegModel<f32>, Sidecar)> {
    let sidecar = Sidecar::load(checkpoint)?;
    let mut model = SegModel::<f32>::build(&sidecar.architecture, 0)?;
    load_checkpoint(&mut model, checkpoint)?;
    Ok((model, sidecar))
}

pub fn predict(checkpoint: &Path, image: &Path, out: &Path, color: Option<&Path>) -> Result<()> {
    let (model, sc) = load_trained(checkpoint)?;
    let (input, (h, w)) = load_image::<f32>(image, sc.mean, sc.std)?;
    let labels = model.predict(&input)?;
    let pw = input.shape()[3];
    let cropped: Vec<u8> = (0..h)
        .flat_map(|y| labels[y * pw..y * pw + w].iter().map(|&c| c as u8))
        .collect();
    write_pgm(out, w, h, &cropped)?;
    if let Some(path) = color {
        let rgb: Vec<u8> = cropped.iter().flat_map(|&c| class_color(u32::from(c))).collect();
        write_ppm(path, w, h, &rgb)?;
    }
    Ok(())
}

pub fn dump_features(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let (model, sc) = load_trained(checkpoint)?;
    let (input, _) = load_image::<f32>(image, sc.mean, sc.std)?;
    for path in model.dump_feature_maps(&input, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn config_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn analysis_spec(config: &Path) -> Result<ArchitectureSpec> {
    RunConfig::load(config)?.spec()
}

pub fn analyze_cmd(config: &Path, other: Option<&Path>, size: (usize, usize), json: bool) -> Result<()> {
    check_divisible(size.0, size.1)?;
    let a = analysis_spec(config)?;
    let text = match other {
        None => {
            let r = analyze(&a, size)?;
            if json { serde_json::to_string_pretty(&r)? } else { r.to_table() }
        }
        Some(path) => {
            let b = analysis_spec(path)?;
            let r = compare(&config_name(config), &a, &config_name(path), &b, size)?;
            if json { serde_json::to_string_pretty(&r)? } else { r.to_table() }
        }
    };
    println!("{text}");
    Ok(())
}
