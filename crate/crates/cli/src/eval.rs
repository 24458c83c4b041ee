//! Evaluation over a manifest: per-sample inference, built-in metrics over
//! the corrupted region, optional external metric plug-ins, and a
//! line-delimited report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sketchfill_core::model::InpaintModel;
use sketchfill_core::schedule::NoiseSchedule;
use sketchfill_datagen::io::{load_gray, load_mask, load_rgb};
use sketchfill_datagen::ManifestRecord;

use crate::infer::{f64_to_rgb8, infer_image, rgb8_to_f64};
use crate::metrics::{region_mse, region_ssim, MetricMode, PerceptualMetric, Psnr};

#[derive(Debug, Clone, Serialize)]
pub struct SampleReport {
    pub id: String,
    pub l2: f64,
    pub psnr: Psnr,
    pub ssim: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub samples: usize,
    pub skipped: usize,
    pub mean_l2: f64,
    pub mean_ssim: f64,
    /// Mean over finite PSNR values; the count of infinite ones is separate.
    pub mean_finite_psnr: f64,
    pub infinite_psnr_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleReport>,
    pub aggregate: AggregateReport,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &InpaintModel,
    sched: &NoiseSchedule,
    manifest_dir: &Path,
    records: &[ManifestRecord],
    mode: MetricMode,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    plugins: &[Box<dyn PerceptualMetric>],
) -> anyhow::Result<EvalReport> {
    let mut per_sample = Vec::new();
    let mut skipped = 0usize;
    for (i, rec) in records.iter().enumerate() {
        let gt_path = manifest_dir.join(&rec.image);
        let gt = match load_rgb(&gt_path) {
            Ok(g) => g,
            Err(_) => {
                eprintln!("skipping {}: ground truth missing", rec.id);
                skipped += 1;
                continue;
            }
        };
        let masked = f64_to_rgb8(&load_rgb(&manifest_dir.join(&rec.masked_image))?);
        let pm = load_mask(&manifest_dir.join(&rec.partial_mask))?;
        let sketch = load_gray(&manifest_dir.join(&rec.partial_sketch))?;
        let out = infer_image(
            model,
            sched,
            &masked,
            &pm,
            &sketch,
            &rec.caption,
            steps,
            cfg_scale,
            seed.wrapping_add(i as u64),
        )?;
        let out_f = rgb8_to_f64(&out);
        let l2 = region_mse(&out_f, &gt, &pm, mode);
        let ssim = region_ssim(&out_f, &gt, &pm, mode);
        let mut external = BTreeMap::new();
        for p in plugins {
            external.insert(p.name().to_string(), p.compute(&out_f, &gt, &rec.caption));
        }
        per_sample.push(SampleReport {
            id: rec.id.clone(),
            l2,
            psnr: Psnr::from_mse(l2),
            ssim,
            external,
        });
    }

    let n = per_sample.len().max(1);
    let mean_l2 = per_sample.iter().map(|s| s.l2).sum::<f64>() / n as f64;
    let mean_ssim = per_sample.iter().map(|s| s.ssim).sum::<f64>() / n as f64;
    let finite: Vec<f64> = per_sample
        .iter()
        .filter_map(|s| match s.psnr {
            Psnr::Finite(v) => Some(v),
            _ => None,
        })
        .collect();
    let aggregate = AggregateReport {
        samples: per_sample.len(),
        skipped,
        mean_l2,
        mean_ssim,
        mean_finite_psnr: if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        infinite_psnr_count: per_sample.len() - finite.len(),
    };
    Ok(EvalReport {
        per_sample,
        aggregate,
    })
}

/// One JSON line per sample, then one aggregate line.
pub fn write_report(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path)?;
    for s in &report.per_sample {
        writeln!(f, "{}", serde_json::to_string(s)?)?;
    }
    writeln!(f, "{}", serde_json::to_string(&report.aggregate)?)?;
    Ok(())
}
