//! Training drivers: dataset loading, the iteration loop, `metrics.jsonl`,
//! periodic checkpoints and resume.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use guided_inpaint_core::train::{LocSample, LocTrainer, SynthSample, SynthTrainer};
use guided_inpaint_core::Error;
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{train_hash, RunConfig};
use crate::dataset::{check_resolution, load_split};
use crate::error::{data, io_at, CliError, CliResult};
use crate::io::ensure_dir;

pub const METRICS: &str = "metrics.jsonl";
pub const LATEST: &str = "latest.ckpt";

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

/// Appends iteration records, dropping any at or beyond `start` that a
/// previous session wrote after its last checkpoint.
struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn open(dir: &Path, start: u64) -> CliResult<Self> {
        let path = dir.join(METRICS);
        let mut kept = Vec::new();
        if start > 0 && path.is_file() {
            let f = File::open(&path).map_err(io_at(&path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io_at(&path))?;
                let it = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("iteration").and_then(|i| i.as_u64()));
                if it.is_some_and(|i| i < start) {
                    kept.push(line);
                }
            }
        }
        let mut out = BufWriter::new(File::create(&path).map_err(io_at(&path))?);
        for line in kept {
            writeln!(out, "{line}").map_err(io_at(&path))?;
        }
        Ok(Self { path, out })
    }

    fn push(&mut self, record: serde_json::Value) -> CliResult<()> {
        writeln!(self.out, "{record}").map_err(io_at(&self.path))
    }

    fn flush(&mut self) -> CliResult<()> {
        self.out.flush().map_err(io_at(&self.path))
    }
}

fn save(dir: &Path, ck: &Checkpoint) -> CliResult<PathBuf> {
    let path = dir.join(format!("ckpt-{}.ckpt", ck.header.iteration));
    ck.save(&path)?;
    ck.save(&dir.join(LATEST))?;
    Ok(path)
}

fn open_resume(path: &Path, cfg: &RunConfig) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| data(format!("refusing to resume: {e}")))?;
    let expected = train_hash(&cfg.train);
    if ck.header.config_hash != expected {
        return Err(data(format!(
            "refusing to resume from {}: config hash {} differs from the current {expected}",
            path.display(),
            ck.header.config_hash
        )));
    }
    Ok(ck)
}

fn numeric(e: Error, last_good: &Option<PathBuf>) -> CliError {
    match e {
        Error::NonFinite(m) => CliError::Numeric { message: m, last_good: last_good.clone() },
        other => CliError::Core(other),
    }
}

fn prepare(cfg: &RunConfig, args: &TrainArgs) -> CliResult<Vec<(String, guided_inpaint_core::TrainingExample)>> {
    cfg.validate()?;
    ensure_dir(&args.out)?;
    cfg.echo(&args.out)?;
    let examples = load_split(&args.data, &args.split)?;
    check_resolution(&examples, cfg.train.model.resolution)?;
    Ok(examples)
}

pub fn train_loc(cfg: &RunConfig, args: &TrainArgs) -> CliResult<LocTrainer<f32>> {
    let examples = prepare(cfg, args)?;
    let samples: Vec<LocSample<f32>> = examples
        .iter()
        .map(|(_, ex)| LocSample::from_example(&cfg.train.model, ex))
        .collect::<Result<_, _>>()?;
    let (mut trainer, mut last_good) = match &args.resume {
        Some(p) => {
            let mut t = checkpoint::restore_loc(&open_resume(p, cfg)?)?;
            t.config = cfg.train.clone();
            (t, Some(p.clone()))
        }
        None => (LocTrainer::<f32>::new(cfg.train.clone())?, None),
    };
    let mut log = MetricsLog::open(&args.out, trainer.iteration)?;
    let every = cfg.train.checkpoint_interval;
    while trainer.iteration < cfg.train.max_iterations {
        let s = trainer.step(&samples).map_err(|e| {
            let _ = log.flush();
            numeric(e, &last_good)
        })?;
        log.push(json!({ "iteration": s.iteration, "loss": s.loss }))?;
        if s.iteration % 100 == 0 {
            log::info!("loc iteration {} loss {:.6}", s.iteration, s.loss);
        }
        if trainer.iteration % every == 0 {
            log.flush()?;
            last_good = Some(save(&args.out, &checkpoint::loc_checkpoint(&trainer))?);
        }
    }
    log.flush()?;
    if trainer.iteration % every != 0 || last_good.is_none() {
        save(&args.out, &checkpoint::loc_checkpoint(&trainer))?;
    }
    Ok(trainer)
}

pub fn train_synth(cfg: &RunConfig, args: &TrainArgs, pretrained: Option<&Path>) -> CliResult<SynthTrainer<f32>> {
    let examples = prepare(cfg, args)?;
    let samples: Vec<SynthSample<f32>> = examples
        .iter()
        .map(|(_, ex)| SynthSample::from_example(&cfg.train.model, ex))
        .collect::<Result<_, _>>()?;
    let (mut trainer, mut last_good) = match &args.resume {
        Some(p) => {
            let ck = open_resume(p, cfg)?;
            let mut t = checkpoint::restore_synth(&ck)?;
            t.config = cfg.train.clone();
            if pretrained.is_some() {
                log::warn!("--pretrained ignored when resuming; weights come from the checkpoint");
            }
            (t, Some(p.clone()))
        }
        None => {
            let mut t = SynthTrainer::<f32>::new(cfg.train.clone())?;
            if let Some(w) = pretrained {
                checkpoint::apply_pretrained(&Checkpoint::load(w)?, &mut t)?;
            }
            (t, None)
        }
    };
    let frozen = checkpoint::frozen_fingerprint(&trainer);
    let mut log = MetricsLog::open(&args.out, trainer.iteration)?;
    let every = cfg.train.checkpoint_interval;
    let checkpoint = |t: &SynthTrainer<f32>| -> CliResult<PathBuf> {
        if checkpoint::frozen_fingerprint(t) != frozen {
            return Err(CliError::Core(Error::Incompatible("frozen parameters changed during training".into())));
        }
        save(&args.out, &checkpoint::synth_checkpoint(t))
    };
    while trainer.iteration < cfg.train.max_iterations {
        let s = trainer.step(&samples).map_err(|e| {
            let _ = log.flush();
            numeric(e, &last_good)
        })?;
        let update = s.lambda_update.as_ref().map(|u| json!({ "layer_means": u.layer_means, "lambdas": u.lambdas }));
        log.push(json!({
            "iteration": s.iteration,
            "g_loss": s.g_loss,
            "perceptual": s.perceptual,
            "adversarial": s.adversarial,
            "d_loss": s.d_loss,
            "per_layer": s.per_layer,
            "lambdas": s.lambdas,
            "lambda_update": update,
        }))?;
        if s.iteration % 100 == 0 {
            log::info!("synth iteration {} g_loss {:.6} d_loss {:?}", s.iteration, s.g_loss, s.d_loss);
        }
        if trainer.iteration % every == 0 {
            log.flush()?;
            last_good = Some(checkpoint(&trainer)?);
        }
    }
    log.flush()?;
    if trainer.iteration % every != 0 || last_good.is_none() {
        checkpoint(&trainer)?;
    }
    Ok(trainer)
}

/// Parsed `metrics.jsonl`.
pub fn read_metrics(dir: &Path) -> CliResult<Vec<serde_json::Value>> {
    let path = dir.join(METRICS);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| data(format!("{}: {e}", path.display()))))
        .collect()
}
