//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use guided_inpaint_core::domain::{make_incomplete, normalize};
use guided_inpaint_core::eval::{evaluate_method, inpaint, local_context_matching, HoleFiller, Method, MetricRegion, Models};
use guided_inpaint_core::locnet::LocNet;
use guided_inpaint_core::scenes::random_scene;
use guided_inpaint_core::synthnet::SynthNet;
use guided_inpaint_core::{AffineTransform, HoleSpec, ImageTensor, ModelConfig};
use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::checkpoint::{self, Checkpoint, Kind};
use crate::config::{hash_json, RunConfig};
use crate::dataset::{build_corpus, check_resolution, load_split};
use crate::error::{data, usage, CliResult};
use crate::io::{self, ensure_dir};
use crate::report::{markdown, write_reports};
use crate::training::{train_loc, train_synth, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "guided-inpaint", version, about = "Guided image inpainting: data generation, training, inference, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedurally generated RGB images to use as a source corpus.
    GenScenes(GenScenesArgs),
    /// Build a synthetic training corpus from a directory of images.
    GenData(GenDataArgs),
    /// Train the localization network.
    TrainLoc(TrainCmdArgs),
    /// Train the synthesis network (and its critic).
    TrainSynth(TrainSynthArgs),
    /// Predict the guidance alignment transform for one image.
    PredictLoc(PredictLocArgs),
    /// Fill the hole of one image using a guidance image.
    Infer(InferArgs),
    /// Evaluate restoration metrics of one or more methods on a corpus split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file with optional `train`, `datagen`, `lcm` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Examples generated per source image.
    #[arg(long)]
    pub pairs: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainCmdArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainSynthArgs {
    #[command(flatten)]
    pub train: TrainCmdArgs,
    /// Weights container with VGG-16 tensors for the guidance branch and
    /// the perception network.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImageInputs {
    #[arg(long)]
    pub image: PathBuf,
    /// Gray PNG, hole where the value is at least 128.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub guidance: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictLocArgs {
    #[command(flatten)]
    pub inputs: ImageInputs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Transform file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LocSource {
    /// Localization network (needs a loc checkpoint).
    Net,
    /// Local context matching.
    Lcm,
    /// Transform file (`--transform`, or `transform.txt` beside the image).
    Gt,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub inputs: ImageInputs,
    #[arg(long, value_enum)]
    pub loc: LocSource,
    /// Checkpoints; their kind decides their role.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// One of ours, cut_paste, lcm+ours, gt-align+ours; repeatable.
    #[arg(long, required = true)]
    pub method: Vec<String>,
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics over the whole image instead of the hole.
    #[arg(long)]
    pub whole_image: bool,
    #[command(flatten)]
    pub common: Common,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenScenes(a) => gen_scenes(&a),
        Command::GenData(a) => gen_data(&a),
        Command::TrainLoc(a) => {
            let (cfg, targs) = train_setup(&a)?;
            let t = train_loc(&cfg, &targs)?;
            log::info!("localization training finished at iteration {}", t.iteration);
            Ok(())
        }
        Command::TrainSynth(a) => {
            let (cfg, targs) = train_setup(&a.train)?;
            let t = train_synth(&cfg, &targs, a.pretrained.as_deref())?;
            log::info!("synthesis training finished at iteration {}", t.iteration);
            Ok(())
        }
        Command::PredictLoc(a) => predict_loc(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn require_dir(flag: &str, path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(data(format!("{flag}: directory {} does not exist", path.display())))
    }
}

fn require_file(flag: &str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(data(format!("{flag}: file {} does not exist", path.display())))
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    if let Some(p) = &common.config {
        require_file("--config", p)?;
    }
    let cfg = RunConfig::load(common.config.as_deref())?.with_seed(common.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn gen_scenes(a: &GenScenesArgs) -> CliResult<()> {
    if a.size < 8 {
        return Err(usage("--size must be at least 8"));
    }
    ensure_dir(&a.out)?;
    for i in 0..a.count {
        let img = random_scene(a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), a.size, a.size);
        io::save_rgb(&a.out.join(format!("scene{i:05}.png")), &io::unit_to_rgb(&img))?;
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    require_dir("--images", &a.images)?;
    require_dir("--targets", &a.targets)?;
    let cfg = load_config(&a.common)?;
    ensure_dir(&a.out)?;
    let records = build_corpus(&a.images, &a.targets, &a.out, &a.split, a.pairs, &cfg.datagen)?;
    cfg.echo(&a.out)?;
    log::info!("wrote {} examples to {}", records.len(), a.out.join(&a.split).display());
    Ok(())
}

fn train_setup(a: &TrainCmdArgs) -> CliResult<(RunConfig, TrainArgs)> {
    require_dir("--data", &a.data)?;
    if let Some(r) = &a.resume {
        require_file("--resume", r)?;
    }
    let cfg = load_config(&a.common)?;
    Ok((cfg, TrainArgs { data: a.data.clone(), split: a.split.clone(), out: a.out.clone(), resume: a.resume.clone() }))
}

/// Networks restored from `--ckpt` files.
#[derive(Default)]
pub struct LoadedModels {
    pub localizer: Option<LocNet<f32>>,
    pub synthesizer: Option<SynthNet<f32>>,
    pub hashes: Vec<String>,
}

impl LoadedModels {
    pub fn load(paths: &[PathBuf]) -> CliResult<Self> {
        let mut m = Self::default();
        for p in paths {
            require_file("--ckpt", p)?;
            let ck = Checkpoint::load(p)?;
            m.hashes.push(ck.header.config_hash.clone());
            match ck.header.kind {
                Kind::Loc if m.localizer.is_none() => m.localizer = Some(checkpoint::restore_loc(&ck)?.net),
                Kind::Synth if m.synthesizer.is_none() => m.synthesizer = Some(checkpoint::restore_synth(&ck)?.generator),
                k => return Err(usage(format!("--ckpt {}: unexpected or duplicate {k:?} checkpoint", p.display()))),
            }
        }
        Ok(m)
    }

    /// The resolution the loaded networks were built for, if any.
    pub fn model(&self) -> CliResult<Option<ModelConfig>> {
        let a = self.localizer.as_ref().map(|n| *n.config());
        let b = self.synthesizer.as_ref().map(|n| *n.config());
        match (a, b) {
            (Some(x), Some(y)) if x.resolution != y.resolution => {
                Err(usage(format!("checkpoints disagree on resolution: {} vs {}", x.resolution, y.resolution)))
            }
            (x, y) => Ok(x.or(y)),
        }
    }
}

/// An inference request brought to network resolution.
pub struct Prepared {
    pub original: RgbImage,
    pub hole_full: HoleSpec,
    pub incomplete: ImageTensor,
    pub guidance: ImageTensor,
    pub hole: HoleSpec,
}

/// Loads image, mask and guidance and resizes them to `side x side` when
/// needed (mask by nearest neighbour). Hole pixels of the image are
/// discarded.
pub fn prepare_inputs(inputs: &ImageInputs, side: usize) -> CliResult<Prepared> {
    require_file("--image", &inputs.image)?;
    require_file("--mask", &inputs.mask)?;
    require_file("--guidance", &inputs.guidance)?;
    let original = io::load_rgb(&inputs.image)?;
    let mask = io::load_mask_gray(&inputs.mask)?;
    if mask.dimensions() != original.dimensions() {
        return Err(data(format!(
            "--mask is {:?} but --image is {:?}",
            mask.dimensions(),
            original.dimensions()
        )));
    }
    let s = side as u32;
    let small_mask =
        if mask.dimensions() == (s, s) { mask.clone() } else { imageops::resize(&mask, s, s, FilterType::Nearest) };
    let hole = io::gray_to_hole(&small_mask)?;
    let image = normalize(&io::rgb_to_unit(&io::resize_rgb(&original, s, s))?);
    let guidance = normalize(&io::rgb_to_unit(&io::resize_rgb(&io::load_rgb(&inputs.guidance)?, s, s))?);
    Ok(Prepared { hole_full: io::gray_to_hole(&mask)?, incomplete: make_incomplete(&image, &hole), guidance, hole, original })
}

fn resolution(models: &LoadedModels, cfg: &RunConfig) -> CliResult<usize> {
    Ok(models.model()?.map(|m| m.resolution).unwrap_or(cfg.train.model.resolution))
}

fn predict_loc(a: &PredictLocArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let models = LoadedModels::load(std::slice::from_ref(&a.ckpt))?;
    let net = models.localizer.as_ref().ok_or_else(|| usage("--ckpt must be a localization checkpoint"))?;
    let p = prepare_inputs(&a.inputs, resolution(&models, &cfg)?)?;
    let t = net.predict_transform(&p.incomplete, &p.guidance, &p.hole)?;
    io::write_transform(&a.out, &t)
}

/// Localize, align, synthesize and composite at network resolution.
pub fn infer_network(
    p: &Prepared,
    loc: LocSource,
    transform_file: Option<&Path>,
    models: &LoadedModels,
    cfg: &RunConfig,
) -> CliResult<ImageTensor> {
    let synth = models.synthesizer.as_ref().ok_or_else(|| usage("infer needs a synthesis checkpoint (--ckpt)"))?;
    let t: AffineTransform = match loc {
        LocSource::Gt => {
            let path = transform_file.ok_or_else(|| usage("--loc gt needs --transform"))?;
            require_file("--transform", path)?;
            io::read_transform(path)?
        }
        LocSource::Lcm => local_context_matching(&p.incomplete, &p.guidance, &p.hole, cfg.lcm.context_width, &cfg.lcm.scales)?.transform,
        LocSource::Net => {
            let net = models.localizer.as_ref().ok_or_else(|| usage("--loc net needs a localization checkpoint (--ckpt)"))?;
            net.predict_transform(&p.incomplete, &p.guidance, &p.hole)?
        }
    };
    Ok(inpaint(&p.incomplete, &p.guidance, &p.hole, &t, synth as &dyn HoleFiller)?)
}

fn infer(a: &InferArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    let models = LoadedModels::load(&a.ckpt)?;
    let side = resolution(&models, &cfg)?;
    let p = prepare_inputs(&a.inputs, side)?;
    let sidecar = a.transform.clone().or_else(|| a.inputs.image.parent().map(|d| d.join("transform.txt")));
    let out = infer_network(&p, a.loc, sidecar.as_deref(), &models, &cfg)?;
    let mut rgb = io::quantize(&out);
    let (w, h) = p.original.dimensions();
    if (w, h) != rgb.dimensions() {
        // Back to input resolution; known pixels come from the input.
        let up = imageops::resize(&rgb, w, h, FilterType::Triangle);
        rgb = RgbImage::from_fn(w, h, |x, y| {
            if p.hole_full.contains(x as usize, y as usize) {
                *up.get_pixel(x, y)
            } else {
                *p.original.get_pixel(x, y)
            }
        });
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    io::save_rgb(&a.out, &rgb)
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    require_dir("--data", &a.data)?;
    let cfg = load_config(&a.common)?;
    let methods: Vec<Method> =
        a.method.iter().map(|m| Method::parse(m).map_err(|e| usage(format!("--method: {e}")))).collect::<CliResult<_>>()?;
    let models = LoadedModels::load(&a.ckpt)?;
    for m in &methods {
        if m.needs_localizer() && models.localizer.is_none() {
            return Err(usage(format!("method {} needs a localization checkpoint (--ckpt)", m.label())));
        }
        if m.needs_synthesizer() && models.synthesizer.is_none() {
            return Err(usage(format!("method {} needs a synthesis checkpoint (--ckpt)", m.label())));
        }
    }
    let examples = load_split(&a.data, &a.split)?;
    if let Some(mc) = models.model()? {
        check_resolution(&examples, mc.resolution)?;
    }
    let region = if a.whole_image { MetricRegion::Whole } else { MetricRegion::Hole };
    let view = Models::<f32> {
        localizer: models.localizer.as_ref(),
        filler: models.synthesizer.as_ref().map(|s| s as &dyn HoleFiller),
        lcm: cfg.lcm.clone(),
        region,
    };
    let hash = hash_json(&(&cfg, &models.hashes));
    let reports =
        methods.iter().map(|&m| evaluate_method(&examples, m, &view, &hash)).collect::<Result<Vec<_>, _>>()?;
    ensure_dir(&a.out)?;
    cfg.echo(&a.out)?;
    write_reports(&a.out, &reports)?;
    print!("{}", markdown(&reports));
    Ok(())
}
