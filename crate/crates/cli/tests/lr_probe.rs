//! Learning-rate probe for the toy overfit run; run explicitly with
//! `-- --ignored --nocapture`.

use sketchfill_cli::config::TrainConfig;
use sketchfill_cli::dataset::{build_cache, load_samples};
use sketchfill_cli::train::run_training_loop;
use sketchfill_core::model::InpaintModel;
use sketchfill_core::schedule::build_schedule;
use sketchfill_core::vae::pretrain_vae;
use sketchfill_datagen::io::save_corpus;
use sketchfill_datagen::{run_datagen, synth_corpus, DatagenConfig};

#[test]
#[ignore]
fn probe_learning_rates() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_corpus(16, 128, 2024).unwrap();
    save_corpus(&dir.path().join("c"), &samples).unwrap();
    let data = dir.path().join("d");
    let records = run_datagen(&samples, &DatagenConfig::default(), &data, 7, 1).unwrap();
    let loaded = load_samples(&data, &records).unwrap();

    let imgs: Vec<_> = loaded
        .iter()
        .map(|s| {
            let sh = s.image.shape().to_vec();
            s.image.clone().reshape(&[sh[1], sh[2], sh[3]])
        })
        .collect();
    let vae = pretrain_vae(4, &imgs, &imgs, 300, 4, 2e-3, 11 ^ 0x7661_6531).unwrap();
    println!("vae val {:.5} scale {:.3}", vae.val_error, vae.latent_scale);

    for (lr, beta2) in [(2e-3_f64, 0.99_f64), (5e-3, 0.99), (3e-3, 0.999)] {
        let mut cfg = TrainConfig::toy();
        cfg.seed = 11;
        cfg.learning_rate = lr;
        cfg.adam_beta2 = beta2;
        cfg.steps = 1600;
        cfg.log_every = 100;
        cfg.checkpoint_every = 0;
        let model_cfg = cfg.model_config();
        let mut model = InpaintModel::new(&model_cfg, Some(&vae)).unwrap();
        let sched =
            build_schedule(cfg.t_count, cfg.beta_start, cfg.beta_end, cfg.schedule).unwrap();
        let cache = build_cache(&model, &loaded).unwrap();
        let out_dir = dir.path().join(format!("lr{lr}_b{beta2}"));
        std::fs::create_dir_all(&out_dir).unwrap();
        println!("--- lr {lr} beta2 {beta2} ---");
        let outcome =
            run_training_loop(&mut model, &sched, &cache, &cfg, &out_dir, Some(&vae)).unwrap();
        let tail = &outcome.losses[outcome.losses.len() - 100..];
        println!(
            "lr {lr} beta2 {beta2}: initial {:.4}, loss@1600 (mean last 100) {:.4}",
            outcome.initial_loss,
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
}
