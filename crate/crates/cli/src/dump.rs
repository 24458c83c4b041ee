//! Feature-map export: channel-averaged grayscale images of the per-scale
//! fusion intermediates for one input and timestep.
//!
//! The visual mask is written as 8-bit with [0,1] mapped to [0,255]. The
//! context/modulation/output trio shares one symmetric 16-bit mapping so
//! `out - context = modulation` survives quantization.

use std::path::Path;

use anyhow::Context;
use ndarray::Array2;
use sketchfill_core::fusion::ScaleTrace;
use sketchfill_core::graph::Graph;
use sketchfill_core::model::{Conditioning, InpaintModel};
use sketchfill_core::tensor::Tensor;
use sketchfill_core::Rng64;

/// Channel-averaged `[h, w]` map of a `[1, c, h, w]` grid.
pub fn channel_mean(t: &Tensor) -> Array2<f64> {
    let (_, c, h, w) = t.dims4();
    let mut out: Array2<f64> = Array2::zeros((h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y, x)] += t.data()[(ch * h + y) * w + x];
            }
        }
    }
    out.map(|&v| v / c as f64)
}

fn save_gray16(path: &Path, map: &Array2<f64>, scale: f64) -> anyhow::Result<()> {
    let (h, w) = map.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (32768.0 + map[(y, x)] * scale).round().clamp(0.0, 65535.0) as u16;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).with_context(|| path.display().to_string())
}

fn save_gray8_unit(path: &Path, map: &Array2<f64>) -> anyhow::Result<()> {
    let (h, w) = map.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[(y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).with_context(|| path.display().to_string())
}

fn max_abs(maps: &[&Array2<f64>]) -> f64 {
    maps.iter()
        .flat_map(|m| m.iter())
        .fold(0.0_f64, |a, &v| a.max(v.abs()))
        .max(1e-12)
}

/// Exported tensors for one scale, pre-averaged over channels.
pub struct DumpedScale {
    pub context: Array2<f64>,
    pub sketch_features: Array2<f64>,
    pub fused: Array2<f64>,
    pub visual_mask: Array2<f64>,
    pub vm_gamma: Array2<f64>,
    pub vm_beta: Array2<f64>,
    pub modulation: Array2<f64>,
    pub output: Array2<f64>,
}

pub fn trace_to_maps(g: &Graph, tr: &ScaleTrace) -> DumpedScale {
    let vm = channel_mean(g.value(tr.vm));
    let gamma_mean = g.value(tr.gamma).mean();
    let beta_mean = g.value(tr.beta).mean();
    DumpedScale {
        context: channel_mean(g.value(tr.n_hat)),
        sketch_features: channel_mean(g.value(tr.sketch_feat)),
        fused: channel_mean(g.value(tr.fused)),
        vm_gamma: vm.map(|&v| v * gamma_mean),
        vm_beta: vm.map(|&v| v * beta_mean),
        visual_mask: vm,
        modulation: channel_mean(g.value(tr.modulated)),
        output: channel_mean(g.value(tr.out)),
    }
}

/// Runs one noise-prediction pass at timestep `t` and writes every scale's
/// maps under `out_dir` as `scale{i}_{name}.png`.
pub fn dump_features(
    model: &InpaintModel,
    cond: &Conditioning,
    t: usize,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let batch = cond.masked_latent.shape()[0];
    let mut rng = Rng64::seed_from(seed);
    let z_t = Tensor::randn(cond.masked_latent.shape(), &mut rng);

    let mut g = Graph::new(&model.store);
    let zv = g.constant(z_t);
    let mut traces: Vec<ScaleTrace> = Vec::new();
    model.predict_eps(&mut g, zv, &vec![t; batch], cond, false, Some(&mut traces))?;

    let mut written = Vec::new();
    for (i, tr) in traces.iter().enumerate() {
        let maps = trace_to_maps(&g, tr);
        let scale16 = 32767.0 / max_abs(&[&maps.context, &maps.modulation, &maps.output]);
        let aux16 = 32767.0
            / max_abs(&[
                &maps.sketch_features,
                &maps.fused,
                &maps.vm_gamma,
                &maps.vm_beta,
            ]);
        let entries: Vec<(&str, &Array2<f64>, Option<f64>)> = vec![
            ("context", &maps.context, Some(scale16)),
            ("sketch", &maps.sketch_features, Some(aux16)),
            ("fused", &maps.fused, Some(aux16)),
            ("vm", &maps.visual_mask, None),
            ("vm_gamma", &maps.vm_gamma, Some(aux16)),
            ("vm_beta", &maps.vm_beta, Some(aux16)),
            ("modulation", &maps.modulation, Some(scale16)),
            ("output", &maps.output, Some(scale16)),
        ];
        for (name, map, scale) in entries {
            let path = out_dir.join(format!("scale{}_{name}.png", i + 1));
            match scale {
                Some(sc) => save_gray16(&path, map, sc)?,
                None => save_gray8_unit(&path, map)?,
            }
            written.push(path);
        }
    }
    Ok(written)
}
