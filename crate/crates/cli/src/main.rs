//! `spd`: synthetic scenes, ground truth, training, prediction, evaluation
//! and the band ablation from the command line.
//!
//! Every subcommand takes `--config <file.toml>` and `--seed`. Values are
//! resolved as built-in defaults, then the file, then explicit flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use spd_core::gt::{build_target, PointAnnotationSet};
use spd_core::model::ModelKind;
use spd_core::sensor::{generate_scene, BandSubset, SceneConfig};
use spd_core::train::{
    ablate_bands, ablation_table, evaluate, load_scenes, predict, split_scenes, Checkpoint, LabeledScene,
    TrainConfig, Trainer,
};

/// Bad user input; exits with status 2 like core validation errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "spd", version, about = "Sub-pixel object counting on multispectral rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with annotations and targets.
    Synth(SynthArgs),
    /// Build density and mask rasters from a point annotation file.
    Gt(GtArgs),
    /// Train a model on a scene directory.
    Train(TrainArgs),
    /// Predict density and mask rasters for one image.
    Predict(PredictArgs),
    /// Score a checkpoint on a scene directory.
    Eval(EvalArgs),
    /// Train and score one model per band subset.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// TOML file with values for this subcommand; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes; scene i uses seed + i.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Starting point before the config file: coconut or car.
    #[arg(long, default_value = "coconut")]
    preset: String,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    object_density: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match args.preset.as_str() {
        "coconut" => SceneConfig::coconut_like(),
        "car" => SceneConfig::car_like(),
        other => return Err(invalid(format!("unknown preset {other:?}, expected coconut or car"))),
    };
    if let Some(path) = &args.common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        // the file overrides the preset field by field
        let mut table = toml::Table::try_from(&cfg).map_err(|e| invalid(e.to_string()))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        table.extend(file);
        cfg = table.try_into().map_err(|e: toml::de::Error| invalid(format!("{}: {e}", path.display())))?;
    }
    set(&mut cfg.scene_h, args.height);
    set(&mut cfg.scene_w, args.width);
    set(&mut cfg.k, args.k);
    set(&mut cfg.object_density, args.object_density);
    set(&mut cfg.noise_sigma, args.noise_sigma);
    set(&mut cfg.seed, args.common.seed);
    for i in 0..args.count {
        let scene = generate_scene(&cfg.clone().with_seed(cfg.seed + i))?;
        let stem = format!("scene_{i:03}");
        scene.save(&args.out, &stem)?;
        println!(
            "{stem}: {} objects, {} clutter, {}x{} px, {} bands",
            scene.annotations.len(),
            scene.clutter_points.len(),
            scene.image.h,
            scene.image.w,
            scene.image.bands.len()
        );
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(default)]
struct GtConfig {
    k: usize,
    gsd_m: f64,
}

impl Default for GtConfig {
    fn default() -> Self {
        Self { k: 10, gsd_m: 10.0 }
    }
}

#[derive(Args)]
struct GtArgs {
    #[command(flatten)]
    common: Common,
    /// Point annotation file.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Ground sampling distance written into the output rasters.
    #[arg(long)]
    gsd_m: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Output file stem; defaults to the annotation file stem.
    #[arg(long)]
    stem: Option<String>,
}

fn gt(args: GtArgs) -> Result<()> {
    let mut cfg: GtConfig = load_config(args.common.config.as_deref())?;
    set(&mut cfg.k, args.k);
    set(&mut cfg.gsd_m, args.gsd_m);
    let annotations = PointAnnotationSet::load(&args.annotations)?;
    let target = build_target(&annotations, cfg.k)?;
    let stem = match args.stem {
        Some(s) => s,
        None => args
            .annotations
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid("cannot derive an output stem; pass --stem"))?
            .to_string(),
    };
    fs::create_dir_all(&args.out)?;
    target.save(&args.out, &stem, cfg.gsd_m)?;
    println!(
        "{stem}: {} points, density sum {:.6}, {} mask pixels",
        annotations.len(),
        target.count(),
        target.mask.data.iter().filter(|&&v| v == 1).count()
    );
    Ok(())
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    arch: Option<ModelKind>,
    #[arg(long)]
    bands: Option<BandSubset>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_split_fraction: Option<f64>,
    #[arg(long)]
    stem_width: Option<usize>,
    #[arg(long)]
    bottleneck_width: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
}

fn train_config(common: &Common, flags: TrainFlags) -> Result<TrainConfig> {
    let mut c: TrainConfig = load_config(common.config.as_deref())?;
    set(&mut c.arch, flags.arch);
    set(&mut c.band_subset, flags.bands);
    set(&mut c.patch_size, flags.patch_size);
    set(&mut c.batch_size, flags.batch_size);
    set(&mut c.steps, flags.steps);
    set(&mut c.learning_rate, flags.learning_rate);
    set(&mut c.checkpoint_every, flags.checkpoint_every);
    set(&mut c.eval_split_fraction, flags.eval_split_fraction);
    set(&mut c.stem_width, flags.stem_width);
    set(&mut c.bottleneck_width, flags.bottleneck_width);
    set(&mut c.num_blocks, flags.num_blocks);
    set(&mut c.seed, common.seed);
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

/// Scenes of one split, chosen by the same seeded shuffle training used.
fn select(scenes: Vec<LabeledScene>, split: Split, fraction: f64, seed: u64) -> Result<Vec<LabeledScene>> {
    if split == Split::All {
        return Ok(scenes);
    }
    let s = split_scenes(scenes.len(), fraction, seed)?;
    let idx = match split {
        Split::Train => s.train,
        Split::Val => s.val,
        Split::Test => s.test,
        Split::All => unreachable!(),
    };
    Ok(idx.into_iter().map(|i| scenes[i].clone()).collect())
}

fn load_data(dir: &Path, k: usize) -> Result<Vec<LabeledScene>> {
    let scenes = load_scenes(dir, k)?;
    if scenes.is_empty() {
        return Err(invalid(format!("no scenes found in {}", dir.display())));
    }
    Ok(scenes)
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: TrainFlags,
    /// Scene directory written by `synth` (or in the same layout).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; periodic snapshots go next to it as `<path>.<step>`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the per-step loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn train(args: TrainArgs) -> Result<()> {
    let scenes = load_data(&args.data, args.k)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let c = &ckpt.config;
            let set = select(scenes, Split::Train, c.eval_split_fraction, c.seed)?;
            Trainer::resume(ckpt, &set)?
        }
        None => {
            let config = train_config(&args.common, args.flags)?;
            let set = select(scenes, Split::Train, config.eval_split_fraction, config.seed)?;
            Trainer::new(config, &set)?
        }
    };
    let out = args.out.clone();
    let trace = trainer.run(|ckpt| {
        let path = PathBuf::from(format!("{}.{}", out.display(), ckpt.step));
        ckpt.save(&path)?;
        eprintln!("step {}: saved {}", ckpt.step, path.display());
        Ok(())
    })?;
    trainer.checkpoint().save(&args.out)?;
    if let Some(path) = &args.trace {
        let start = trainer.step - trace.len() as u64;
        let mut csv = String::from("step,semantic,density,total\n");
        for (i, l) in trace.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{}\n", start + i as u64, l.semantic, l.density, l.total));
        }
        fs::write(path, csv)?;
    }
    if let Some(last) = trace.last() {
        println!(
            "step {}: semantic {:.5} density {:.5} total {:.5}",
            trainer.step, last.semantic, last.density, last.total
        );
    }
    println!("saved {}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output stem; defaults to the image file stem.
    #[arg(long)]
    stem: Option<String>,
}

fn predict_cmd(args: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let image = spd_core::raster::RasterGrid::load(&args.image)?;
    let pred = predict(&ckpt, &image)?;
    let stem = match args.stem {
        Some(s) => s,
        None => args
            .image
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid("cannot derive an output stem; pass --stem"))?
            .to_string(),
    };
    fs::create_dir_all(&args.out)?;
    let (density, mask) = pred.to_rasters(image.gsd_m)?;
    density.save(args.out.join(format!("{stem}.pred_density.spdr")))?;
    mask.save(args.out.join(format!("{stem}.pred_mask.spdr")))?;
    let count: f64 = pred.density.data.iter().map(|&v| (v as f64).max(0.0)).sum();
    println!("{stem}: predicted count {count:.2}");
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which scenes to score, using the checkpoint's split seed and fraction.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let seed = args.common.seed.unwrap_or(ckpt.config.seed);
    let scenes = select(load_data(&args.data, args.k)?, args.split, ckpt.config.eval_split_fraction, seed)?;
    let report = evaluate(&ckpt, &scenes)?;
    print!("{}", report.to_key_value());
    if let Some(path) = &args.json {
        fs::write(path, report.to_json())?;
    }
    Ok(())
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    data: PathBuf,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn ablate(args: AblateArgs) -> Result<()> {
    let config = train_config(&args.common, args.flags)?;
    let scenes = load_data(&args.data, args.k)?;
    let (f, s) = (config.eval_split_fraction, config.seed);
    let train_set = select(scenes.clone(), Split::Train, f, s)?;
    let test_set = select(scenes, Split::Test, f, s)?;
    if test_set.is_empty() {
        return Err(invalid("the test split is empty; add scenes or raise eval_split_fraction"));
    }
    let rows = ablate_bands(&config, &train_set, &test_set)?;
    print!("{}", ablation_table(&rows));
    if let Some(path) = &args.json {
        fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Gt(a) => gt(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<Invalid>().is_some()
            || e.downcast_ref::<spd_core::Error>().is_some_and(|e| e.is_validation())
    });
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    spd_core::parallel::init_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
