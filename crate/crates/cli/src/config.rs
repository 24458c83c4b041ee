//! Training configuration with a TOML on-disk form.
//!
//! `serialize -> parse -> serialize` is byte-identical; field order follows
//! the struct declaration.

use serde::{Deserialize, Serialize};
use sketchfill_core::error::{Error, Result};
use sketchfill_core::model::ModelConfig;
use sketchfill_core::schedule::ScheduleKind;
use sketchfill_core::unet::UNetConfig;
use sketchfill_core::vae::VaeMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam second-moment decay; short toy runs use a shorter memory.
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Draw probabilities for (partial, segmentation, bounding-box) masks.
    pub mask_mix: [f64; 3],
    pub text_dropout: f64,
    pub sketch_dropout: f64,
    pub seed: u64,
    pub init_seed: u64,
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub latent_size: usize,
    /// Treat inputs as latents directly (fast tests; no VAE).
    pub identity_vae: bool,
    pub vae_steps: usize,
    pub vae_batch: usize,
    pub vae_learning_rate: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            adam_beta2: 0.999,
            batch_size: 16,
            steps: 10_000,
            mask_mix: [0.6, 0.3, 0.1],
            text_dropout: 0.1,
            sketch_dropout: 0.1,
            seed: 0,
            init_seed: 0,
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            schedule: ScheduleKind::Linear,
            latent_size: 64,
            identity_vae: false,
            vae_steps: 400,
            vae_batch: 4,
            vae_learning_rate: 2e-3,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 128x128 images, 16x16x4 latents, batch 4.
    /// The learning rate is raised to suit a from-scratch toy run.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 2000,
            learning_rate: 2e-3,
            latent_size: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mask_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::parameter(
                "mask_mix",
                format!("probabilities sum to {sum}, expected 1.0"),
            ));
        }
        if self.mask_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::parameter("mask_mix", "negative probability"));
        }
        for (name, p) in [("text_dropout", self.text_dropout), ("sketch_dropout", self.sketch_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter {
                    field: if name == "text_dropout" { "text_dropout" } else { "sketch_dropout" },
                    detail: format!("{p} outside [0, 1]"),
                });
            }
        }
        if self.batch_size == 0 {
            return Err(Error::parameter("batch_size", "must be >= 1"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut unet = UNetConfig::toy();
        unet.latent_size = self.latent_size;
        if self.identity_vae {
            // diffusion runs directly over RGB pixels at latent resolution
            unet.latent_channels = 3;
        }
        ModelConfig {
            unet,
            vae_mode: if self.identity_vae {
                VaeMode::Identity
            } else {
                VaeMode::Conv
            },
            init_seed: self.init_seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)
            .map_err(|e| Error::Value(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Draws a mask-type index (0 partial, 1 segmentation, 2 bounding box).
pub fn draw_mask_type(mix: &[f64; 3], rng: &mut sketchfill_core::Rng64) -> usize {
    let u = rng.uniform();
    if u < mix[0] {
        0
    } else if u < mix[0] + mix[1] {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sketchfill_core::Rng64;

    #[test]
    fn toml_roundtrip_is_byte_identical() {
        for cfg in [TrainConfig::default(), TrainConfig::toy()] {
            let s1 = cfg.to_toml();
            let parsed = TrainConfig::from_toml(&s1).unwrap();
            let s2 = parsed.to_toml();
            assert_eq!(s1, s2);
            assert_eq!(cfg, parsed);
        }
    }

    #[test]
    fn mask_mix_must_sum_to_one() {
        let mut cfg = TrainConfig::toy();
        cfg.mask_mix = [0.5, 0.3, 0.1];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("mask_mix"), "{err}");
    }

    #[test]
    fn mask_type_frequencies_match_mix() {
        let mix = [0.6, 0.3, 0.1];
        let mut rng = Rng64::seed_from(3);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            counts[draw_mask_type(&mix, &mut rng)] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            assert!(
                (freq - mix[i]).abs() <= 0.02,
                "type {i}: {freq} vs {}",
                mix[i]
            );
        }
    }
}
