//! Rough per-step timing probe; run explicitly with `-- --ignored`.

use sketchfill_cli::config::TrainConfig;
use sketchfill_cli::dataset::{build_cache, load_samples, make_batch};
use sketchfill_core::model::{DropoutProbs, InpaintModel};
use sketchfill_core::optim::Adam;
use sketchfill_core::sampler::GuidedDenoiser;
use sketchfill_core::schedule::build_schedule;
use sketchfill_core::vae::pretrain_vae;
use sketchfill_core::Rng64;
use sketchfill_datagen::io::save_corpus;
use sketchfill_datagen::{run_datagen, synth_corpus, DatagenConfig};

#[test]
#[ignore]
fn time_one_training_step() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_corpus(4, 128, 1).unwrap();
    save_corpus(&dir.path().join("c"), &samples).unwrap();
    let records = run_datagen(&samples, &DatagenConfig::default(), &dir.path().join("d"), 1, 1).unwrap();
    let loaded = load_samples(&dir.path().join("d"), &records).unwrap();

    let cfg = TrainConfig::toy();
    let model_cfg = cfg.model_config();
    let t0 = std::time::Instant::now();
    let imgs: Vec<_> = loaded
        .iter()
        .map(|s| {
            let sh = s.image.shape().to_vec();
            s.image.clone().reshape(&[sh[1], sh[2], sh[3]])
        })
        .collect();
    let vae = pretrain_vae(4, &imgs, &imgs, 50, 4, 2e-3, 9).unwrap();
    println!("vae pretrain 50 steps: {:?}", t0.elapsed());

    let mut model = InpaintModel::new(&model_cfg, Some(&vae)).unwrap();
    let sched = build_schedule(cfg.t_count, cfg.beta_start, cfg.beta_end, cfg.schedule).unwrap();
    let cache = build_cache(&model, &loaded).unwrap();
    let mut rng = Rng64::seed_from(5);
    let mut opt = Adam::new(cfg.learning_rate);
    let drop = DropoutProbs::default();

    // warm up, then time
    let picks: Vec<(usize, usize)> = (0..4).map(|i| (i % cache.len(), i % 3)).collect();
    let batch = make_batch(&model, &cache, &picks);
    let (_, g) = model.training_step(&batch, &sched, &mut rng, &drop).unwrap();
    opt.step(&mut model.store, &g);

    let t1 = std::time::Instant::now();
    let n = 10;
    for _ in 0..n {
        let batch = make_batch(&model, &cache, &picks);
        let (_, grads) = model.training_step(&batch, &sched, &mut rng, &drop).unwrap();
        opt.step(&mut model.store, &grads);
    }
    let per = t1.elapsed() / n;
    println!("per training step: {per:?} -> 2000 steps ~ {:?}", per * 2000);

    let t2 = std::time::Instant::now();
    let cond = sketchfill_core::model::Conditioning {
        text_embedding: batch.text.clone(),
        masked_latent: batch.masked_latent.clone(),
        mask_pyramid: batch.pyramid.clone(),
        sketch: batch.sketch.clone(),
        text_null: false,
        sketch_null: false,
    };
    let z = sketchfill_core::Tensor::randn(&[4, 4, 16, 16], &mut rng);
    let _ = model.denoise(&z, &[500, 400, 300, 200], &cond, false).unwrap();
    println!("one denoise eval (batch 4): {:?}", t2.elapsed());
}
