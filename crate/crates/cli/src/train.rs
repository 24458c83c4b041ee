//! Training loop: VAE pretraining, adapter optimization with the
//! configured mask-type mix, loss logging and periodic checkpoints.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use sketchfill_core::model::{DropoutProbs, InpaintModel};
use sketchfill_core::optim::Adam;
use sketchfill_core::schedule::{build_schedule, NoiseSchedule};
use sketchfill_core::vae::{pretrain_vae, TrainedVae, VaeMode};
use sketchfill_core::Rng64;
use sketchfill_datagen::read_manifest;

use crate::checkpoint::{save_model, RngState};
use crate::config::{draw_mask_type, TrainConfig};
use crate::dataset::{build_cache, load_samples, make_batch, CachedSample};

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    /// Mean loss over the first 10 steps.
    pub initial_loss: f64,
    /// Mean loss over the last 100 steps.
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub mask_type_counts: [usize; 3],
}

/// Per-image tensors extracted for VAE pretraining (clean images only).
fn vae_corpus(samples: &[crate::dataset::LoadedSample]) -> (Vec<sketchfill_core::Tensor>, Vec<sketchfill_core::Tensor>) {
    let images: Vec<_> = samples
        .iter()
        .map(|s| {
            let sh = s.image.shape();
            s.image.clone().reshape(&[sh[1], sh[2], sh[3]])
        })
        .collect();
    // hold out every fourth image for validation when there are enough
    if images.len() >= 4 {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if i % 4 == 3 {
                val.push(img.clone());
            } else {
                train.push(img.clone());
            }
        }
        (train, val)
    } else {
        (images.clone(), images)
    }
}

pub fn train(cfg: &TrainConfig, manifest_path: &Path, out_dir: &Path) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let manifest_dir = manifest_path
        .parent()
        .context("manifest path has no parent directory")?;
    let records = read_manifest(manifest_path)?;
    if records.is_empty() {
        bail!("manifest {} is empty", manifest_path.display());
    }
    let samples = load_samples(manifest_dir, &records)?;

    let model_cfg = cfg.model_config();
    let trained_vae: Option<TrainedVae> = if model_cfg.vae_mode == VaeMode::Conv {
        let (train_imgs, val_imgs) = vae_corpus(&samples);
        println!(
            "pretraining vae: {} steps on {} images",
            cfg.vae_steps,
            train_imgs.len()
        );
        let t = pretrain_vae(
            model_cfg.unet.latent_channels,
            &train_imgs,
            &val_imgs,
            cfg.vae_steps,
            cfg.vae_batch,
            cfg.vae_learning_rate,
            cfg.seed ^ 0x7661_6531,
        )?;
        println!(
            "vae ready: val mse {:.6}, latent scale {:.4}",
            t.val_error, t.latent_scale
        );
        Some(t)
    } else {
        None
    };

    let mut model = InpaintModel::new(&model_cfg, trained_vae.as_ref())?;
    model.partition_parameters()?;
    let sched = build_schedule(cfg.t_count, cfg.beta_start, cfg.beta_end, cfg.schedule)?;
    let cache = build_cache(&model, &samples)?;

    let outcome = run_training_loop(&mut model, &sched, &cache, cfg, out_dir, trained_vae.as_ref())?;
    Ok(outcome)
}

/// The optimization loop over an already-assembled model and cache.
pub fn run_training_loop(
    model: &mut InpaintModel,
    sched: &NoiseSchedule,
    cache: &[CachedSample],
    cfg: &TrainConfig,
    out_dir: &Path,
    trained_vae: Option<&TrainedVae>,
) -> anyhow::Result<TrainOutcome> {
    let dropout = DropoutProbs {
        text: cfg.text_dropout,
        sketch: cfg.sketch_dropout,
    };
    let mut rng = Rng64::seed_from(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    opt.beta2 = cfg.adam_beta2;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut mask_type_counts = [0usize; 3];

    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.below(cache.len());
            let ty = draw_mask_type(&cfg.mask_mix, &mut rng);
            mask_type_counts[ty] += 1;
            picks.push((idx, ty));
        }
        let batch = make_batch(model, cache, &picks);
        let (loss, grads) = model.training_step(&batch, sched, &mut rng, &dropout)?;
        if !loss.is_finite() {
            bail!(
                "training aborted at step {step}: non-finite loss on batch [{}]",
                batch.ids.join(", ")
            );
        }
        opt.step(&mut model.store, &grads);
        losses.push(loss);

        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            println!("step {step:>6}  loss {loss:.6}");
        }
        if cfg.checkpoint_every > 0 && step > 0 && step % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("step_{step:06}.ckpt"));
            save_model(
                model,
                &path,
                Some(cfg),
                step as u64,
                Some(RngState::capture(&rng)),
                trained_vae.map(|t| t.val_error),
            )?;
        }
    }

    let checkpoint_path = out_dir.join("final.ckpt");
    save_model(
        model,
        &checkpoint_path,
        Some(cfg),
        cfg.steps as u64,
        Some(RngState::capture(&rng)),
        trained_vae.map(|t| t.val_error),
    )?;

    let head = losses.iter().take(10).copied().collect::<Vec<_>>();
    let tail_n = losses.len().min(100);
    let tail = &losses[losses.len() - tail_n..];
    let initial_loss = if head.is_empty() {
        0.0
    } else {
        head.iter().sum::<f64>() / head.len() as f64
    };
    let final_loss = if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    println!(
        "training done: initial loss {initial_loss:.6}, final loss {final_loss:.6}, checkpoint {}",
        checkpoint_path.display()
    );
    Ok(TrainOutcome {
        checkpoint_path,
        initial_loss,
        final_loss,
        losses,
        mask_type_counts,
    })
}
