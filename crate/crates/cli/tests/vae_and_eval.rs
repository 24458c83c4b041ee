//! VAE pretraining quality, evaluation bookkeeping and training aborts.

use sketchfill_cli::config::TrainConfig;
use sketchfill_cli::dataset::{build_cache, load_samples};
use sketchfill_cli::eval::evaluate;
use sketchfill_cli::metrics::MetricMode;
use sketchfill_cli::train::run_training_loop;
use sketchfill_core::model::InpaintModel;
use sketchfill_core::schedule::{build_schedule, ScheduleKind};
use sketchfill_core::tensor::Tensor;
use sketchfill_core::vae::{pretrain_vae, ToyVae, VaeMode};
use sketchfill_core::{ParamStore, Rng64};
use sketchfill_datagen::io::save_corpus;
use sketchfill_datagen::{run_datagen, synth_corpus, DatagenConfig};

fn image_tensors(n: usize, seed: u64) -> Vec<Tensor> {
    synth_corpus(n, 128, seed)
        .unwrap()
        .into_iter()
        .map(|s| {
            let (h, w, _) = s.image.dim();
            let mut data = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = s.image[(y, x, c)];
                    }
                }
            }
            Tensor::new(&[3, h, w], data)
        })
        .collect()
}

#[test]
fn vae_heldout_reconstruction_within_recorded_error() {
    // train on one synthetic draw, validate on another, test on a third
    let train_imgs = image_tensors(12, 1);
    let val_imgs = image_tensors(4, 2);
    let heldout = image_tensors(4, 3);

    let trained = pretrain_vae(4, &train_imgs, &val_imgs, 300, 4, 2e-3, 5).unwrap();
    assert!(trained.val_error < 0.05, "vae failed to learn: {}", trained.val_error);

    let mut ps = ParamStore::new();
    let mut rng = Rng64::seed_from(0);
    let vae = ToyVae::new(&mut ps, VaeMode::Conv, 4, &mut rng, Some(&trained)).unwrap();
    let mut err_sum = 0.0;
    let mut count = 0usize;
    for img in &heldout {
        let batched = img.clone().reshape(&[1, 3, 128, 128]);
        let z = vae.encode(&ps, &batched).unwrap();
        let rec = vae.decode(&ps, &z).unwrap();
        let d = rec.sub(&batched).unwrap();
        err_sum += d.data().iter().map(|v| v * v).sum::<f64>();
        count += d.len();
    }
    let heldout_err = err_sum / count as f64;
    assert!(
        heldout_err <= trained.val_error * 1.10,
        "held-out mse {heldout_err} exceeds recorded {} + 10%",
        trained.val_error
    );
}

#[test]
fn evaluate_counts_skipped_samples() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_corpus(3, 128, 4).unwrap();
    save_corpus(&dir.path().join("c"), &samples).unwrap();
    let data = dir.path().join("d");
    let mut records =
        run_datagen(&samples, &DatagenConfig::default(), &data, 1, 1).unwrap();
    // break one ground-truth reference
    records[1].image = "missing.png".to_string();

    let model = InpaintModel::new(&sketchfill_core::model::ModelConfig::toy(), None).unwrap();
    let sched = build_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
    let report = evaluate(
        &model,
        &sched,
        &data,
        &records,
        MetricMode::Masked,
        2,
        1.0,
        0,
        &[],
    )
    .unwrap();
    assert_eq!(report.aggregate.samples, 2);
    assert_eq!(report.aggregate.skipped, 1);
}

#[test]
fn nan_loss_aborts_with_batch_ids() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_corpus(2, 128, 6).unwrap();
    save_corpus(&dir.path().join("c"), &samples).unwrap();
    let data = dir.path().join("d");
    let records = run_datagen(&samples, &DatagenConfig::default(), &data, 1, 1).unwrap();
    let loaded = load_samples(&data, &records).unwrap();

    let mut cfg = TrainConfig::toy();
    cfg.steps = 1;
    cfg.batch_size = 2;
    // an untrained VAE is fine here; the loss only needs to be computable
    let model_cfg = cfg.model_config();
    let mut model = InpaintModel::new(&model_cfg, None).unwrap();
    // poison one adapter weight; the loss becomes non-finite immediately
    let id = model.store.lookup("mie.stem.w").unwrap();
    let mut bad = model.store.value(id).clone();
    bad.data_mut()[0] = f64::NAN;
    model.store.set(id, bad);

    let sched = build_schedule(cfg.t_count, cfg.beta_start, cfg.beta_end, cfg.schedule).unwrap();
    let cache = build_cache(&model, &loaded).unwrap();
    let err = run_training_loop(&mut model, &sched, &cache, &cfg, dir.path(), None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("non-finite loss"), "{msg}");
    assert!(
        msg.contains(&records[0].id) || msg.contains(&records[1].id),
        "diagnostic lacks batch ids: {msg}"
    );
}
