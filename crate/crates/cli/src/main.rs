//! Command-line interface for the sketch-guided inpainting toolkit.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sketchfill_cli::checkpoint::load_model;
use sketchfill_cli::config::TrainConfig;
use sketchfill_cli::dataset::{gray_to_tensor, rgb_to_tensor};
use sketchfill_cli::dump::dump_features;
use sketchfill_cli::eval::{evaluate, write_report};
use sketchfill_cli::infer::{infer_image, load_rgb8, save_rgb8, DEFAULT_CFG_SCALE, DEFAULT_STEPS};
use sketchfill_cli::metrics::MetricMode;
use sketchfill_cli::train::train;
use sketchfill_core::schedule::build_schedule;
use sketchfill_datagen::io::{load_corpus, load_gray, load_mask, save_corpus};
use sketchfill_datagen::{read_manifest, run_datagen, synth_corpus, DatagenConfig};

#[derive(Parser)]
#[command(name = "sketchfill", about = "Sketch-guided inpainting of partially corrupted objects", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instance-mask corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        canvas: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build four-tuple training data from a corpus directory.
    Datagen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tuples generated per corpus sample.
        #[arg(long, default_value_t = 1)]
        per_sample: usize,
        #[arg(long, default_value_t = 5)]
        dilation_levels: usize,
        #[arg(long, default_value_t = 4)]
        blur_levels: usize,
        #[arg(long, default_value_t = 0.5)]
        coverage_min: f64,
        #[arg(long, default_value_t = 0.6)]
        coverage_max: f64,
        #[arg(long, default_value_t = 0.1)]
        canny_low: f64,
        #[arg(long, default_value_t = 0.3)]
        canny_high: f64,
    },
    /// Train the adapters on a four-tuple manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML config file; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the desk-scale defaults instead of the full-size ones.
        #[arg(long, default_value_t = true)]
        toy: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Inpaint one masked image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        masked_image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Sketch PNG; an all-black image means text-only guidance.
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_CFG_SCALE)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference over a manifest and report reconstruction metrics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "masked")]
        mode: MetricMode,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_CFG_SCALE)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export channel-averaged feature maps for one input.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        masked_image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        #[arg(long, default_value_t = 500)]
        timestep: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Three comma-separated probabilities: partial,segmentation,bbox.
    #[arg(long, value_parser = parse_mix)]
    mask_mix: Option<Mix>,
    #[arg(long)]
    text_dropout: Option<f64>,
    #[arg(long)]
    sketch_dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    t_count: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Noise schedule family: linear or cosine.
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<sketchfill_core::schedule::ScheduleKind>,
    #[arg(long)]
    latent_size: Option<usize>,
    #[arg(long)]
    identity_vae: Option<bool>,
    #[arg(long)]
    vae_steps: Option<usize>,
    #[arg(long)]
    vae_batch: Option<usize>,
    #[arg(long)]
    vae_learning_rate: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

fn parse_schedule(s: &str) -> Result<sketchfill_core::schedule::ScheduleKind, String> {
    match s {
        "linear" => Ok(sketchfill_core::schedule::ScheduleKind::Linear),
        "cosine" => Ok(sketchfill_core::schedule::ScheduleKind::Cosine),
        other => Err(format!("unknown schedule `{other}` (linear|cosine)")),
    }
}

#[derive(Clone)]
struct Mix([f64; 3]);

fn parse_mix(s: &str) -> Result<Mix, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err("expected three comma-separated probabilities".into());
    }
    Ok(Mix([parts[0], parts[1], parts[2]]))
}

fn parse_mode(s: &str) -> Result<MetricMode, String> {
    match s {
        "masked" => Ok(MetricMode::Masked),
        "whole" => Ok(MetricMode::Whole),
        other => Err(format!("unknown mode `{other}` (masked|whole)")),
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(learning_rate);
        set!(batch_size);
        set!(steps);
        set!(text_dropout);
        set!(sketch_dropout);
        set!(seed);
        set!(init_seed);
        set!(t_count);
        set!(beta_start);
        set!(beta_end);
        set!(schedule);
        set!(latent_size);
        set!(identity_vae);
        set!(vae_steps);
        set!(vae_batch);
        set!(vae_learning_rate);
        set!(log_every);
        set!(checkpoint_every);
        if let Some(Mix(m)) = self.mask_mix.clone() {
            cfg.mask_mix = m;
        }
    }
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var("SKETCHFILL_DEVICE") {
        Ok(v) if v == "cpu" || v.is_empty() => Ok(()),
        Ok(v) => bail!("SKETCHFILL_DEVICE={v} is not supported; only `cpu` is available"),
        Err(_) => Ok(()),
    }
}

fn main() -> anyhow::Result<()> {
    check_device()?;
    let cli = Cli::parse();
    match cli.command {
        Command::SynthCorpus {
            out,
            count,
            canvas,
            seed,
        } => {
            let samples = synth_corpus(count, canvas, seed)?;
            save_corpus(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Datagen {
            corpus,
            out,
            seed,
            per_sample,
            dilation_levels,
            blur_levels,
            coverage_min,
            coverage_max,
            canny_low,
            canny_high,
        } => {
            let cfg = DatagenConfig {
                dilation_levels,
                blur_levels,
                coverage_min,
                coverage_max,
                canny_low,
                canny_high,
            };
            let samples = load_corpus(&corpus)?;
            let records = run_datagen(&samples, &cfg, &out, seed, per_sample)?;
            println!(
                "wrote {} tuples and manifest.jsonl to {}",
                records.len(),
                out.display()
            );
        }
        Command::Train {
            manifest,
            out,
            config,
            toy,
            overrides,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| path.display().to_string())?;
                    TrainConfig::from_toml(&text)?
                }
                None if toy => TrainConfig::toy(),
                None => TrainConfig::default(),
            };
            overrides.apply(&mut cfg);
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("train_config.toml"), cfg.to_toml())?;
            train(&cfg, &manifest, &out)?;
        }
        Command::Infer {
            checkpoint,
            masked_image,
            mask,
            sketch,
            caption,
            steps,
            cfg_scale,
            seed,
            out,
        } => {
            let ck = sketchfill_cli::checkpoint::Checkpoint::load(&checkpoint)?;
            let tc = ck.train_config.clone().unwrap_or_default();
            let model = ck.into_model()?;
            let sched = build_schedule(tc.t_count, tc.beta_start, tc.beta_end, tc.schedule)?;
            let img = load_rgb8(&masked_image)?;
            let pm = load_mask(&mask)?;
            let sk = load_gray(&sketch)?;
            let result = infer_image(&model, &sched, &img, &pm, &sk, &caption, steps, cfg_scale, seed)?;
            save_rgb8(&out, &result)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            mode,
            steps,
            cfg_scale,
            seed,
            out,
        } => {
            let ck = sketchfill_cli::checkpoint::Checkpoint::load(&checkpoint)?;
            let tc = ck.train_config.clone().unwrap_or_default();
            let model = ck.into_model()?;
            let sched = build_schedule(tc.t_count, tc.beta_start, tc.beta_end, tc.schedule)?;
            let records = read_manifest(&manifest)?;
            let dir = manifest
                .parent()
                .context("manifest path has no parent directory")?;
            let report = evaluate(
                &model, &sched, dir, &records, mode, steps, cfg_scale, seed, &[],
            )?;
            write_report(&out, &report)?;
            println!(
                "evaluated {} samples ({} skipped): mean masked L2 {:.6}, mean SSIM {:.4}",
                report.aggregate.samples,
                report.aggregate.skipped,
                report.aggregate.mean_l2,
                report.aggregate.mean_ssim
            );
        }
        Command::DumpFeatures {
            checkpoint,
            masked_image,
            mask,
            sketch,
            caption,
            timestep,
            seed,
            out_dir,
        } => {
            let model = load_model(&checkpoint)?;
            let img = sketchfill_datagen::io::load_rgb(&masked_image)?;
            let pm = load_mask(&mask)?;
            let sk = load_gray(&sketch)?;
            let cond = model.make_conditioning(
                &rgb_to_tensor(&img),
                &gray_to_tensor(&pm.map(|&v| v as f64)),
                &gray_to_tensor(&sk),
                &caption,
            )?;
            let files = dump_features(&model, &cond, timestep, seed, &out_dir)?;
            println!("wrote {} maps to {}", files.len(), out_dir.display());
        }
    }
    Ok(())
}
