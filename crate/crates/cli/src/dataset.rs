//! Manifest-backed training data: image/tensor conversion, the three mask
//! variants (partial, segmentation, bounding box) and a latent cache.

use std::path::Path;

use anyhow::{bail, Context};
use ndarray::{Array2, Array3};
use sketchfill_core::mie::downsample_mask_by;
use sketchfill_core::model::{InpaintModel, PreparedBatch};
use sketchfill_core::tensor::Tensor;
use sketchfill_core::unet::NUM_SCALES;
use sketchfill_datagen::io::{load_gray, load_mask, load_rgb};
use sketchfill_datagen::morph::{bbox_complement, Mask};
use sketchfill_datagen::ManifestRecord;

/// `[h, w, 3]` ndarray image -> `[1, 3, h, w]` tensor.
pub fn rgb_to_tensor(img: &Array3<f64>) -> Tensor {
    let (h, w, _) = img.dim();
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = img[(y, x, c)];
            }
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

pub fn tensor_to_rgb(t: &Tensor) -> Array3<f64> {
    let (_, c, h, w) = t.dims4();
    assert_eq!(c, 3);
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out[(y, x, ch)] = t.data()[(ch * h + y) * w + x];
            }
        }
    }
    out
}

pub fn gray_to_tensor(img: &Array2<f64>) -> Tensor {
    let (h, w) = img.dim();
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = img[(y, x)];
        }
    }
    Tensor::new(&[1, 1, h, w], data)
}

pub fn mask_to_tensor(m: &Mask) -> Tensor {
    gray_to_tensor(&m.map(|&v| v as f64))
}

/// One mask flavor with its matching inputs.
#[derive(Debug, Clone)]
pub struct MaskVariant {
    /// `[1,1,H,W]` binary, 0 = corrupted.
    pub pm: Tensor,
    /// `[1,1,H,W]` partial sketch for this mask.
    pub sketch: Tensor,
    /// `[1,3,H,W]` image with corrupted pixels zeroed.
    pub masked_image: Tensor,
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub caption: String,
    /// `[1,3,H,W]` clean image.
    pub image: Tensor,
    pub variants: [MaskVariant; 3],
}

fn apply_mask(image: &Tensor, pm: &Tensor) -> Tensor {
    let (_, c, h, w) = image.dims4();
    let mut out = image.clone();
    for ch in 0..c {
        for i in 0..h * w {
            out.data_mut()[ch * h * w + i] *= pm.data()[i];
        }
    }
    out
}

/// Loads every manifest record and derives the segmentation and
/// bounding-box variants from the instance mask and the full sketch.
pub fn load_samples(manifest_dir: &Path, records: &[ManifestRecord]) -> anyhow::Result<Vec<LoadedSample>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let image_arr = load_rgb(&manifest_dir.join(&rec.image))
            .with_context(|| format!("sample {}", rec.id))?;
        let m0 = load_mask(&manifest_dir.join(&rec.instance_mask))?;
        let sketch_full = load_gray(&manifest_dir.join(&rec.sketch))?;
        let pm_partial = load_mask(&manifest_dir.join(&rec.partial_mask))?;
        let ps_partial = load_gray(&manifest_dir.join(&rec.partial_sketch))?;

        if m0.iter().all(|&v| v == 0) {
            bail!("sample {}: empty instance mask", rec.id);
        }
        let image = rgb_to_tensor(&image_arr);

        // full-object sketch: (1 - pm) * m0 * s with pm = complement(m0 or bbox)
        // reduces to m0 * s in both cases
        let object_sketch = {
            let mut s = sketch_full.clone();
            for ((y, x), v) in s.indexed_iter_mut() {
                *v *= m0[(y, x)] as f64;
            }
            s
        };

        let seg_pm = m0.map(|&v| 1 - v);
        let box_pm = bbox_complement(&m0)?;

        let mk = |pm: &Mask, sk: &Array2<f64>| {
            let pm_t = mask_to_tensor(pm);
            MaskVariant {
                masked_image: apply_mask(&image, &pm_t),
                sketch: gray_to_tensor(sk),
                pm: pm_t,
            }
        };
        let variants = [
            mk(&pm_partial, &ps_partial),
            mk(&seg_pm, &object_sketch),
            mk(&box_pm, &object_sketch),
        ];
        out.push(LoadedSample {
            id: rec.id.clone(),
            caption: rec.caption.clone(),
            image,
            variants,
        });
    }
    Ok(out)
}

/// Latent-space cache of one sample under a specific model.
#[derive(Debug, Clone)]
pub struct CachedSample {
    pub id: String,
    pub z0: Tensor,
    /// `[tokens, dim]`
    pub text: Tensor,
    pub variants: [CachedVariant; 3],
}

#[derive(Debug, Clone)]
pub struct CachedVariant {
    pub masked_latent: Tensor,
    pub pyramid: [Tensor; NUM_SCALES],
    pub sketch: Tensor,
    pub pm_image: Tensor,
}

/// Encodes every sample once; training batches then assemble from slices.
pub fn build_cache(model: &InpaintModel, samples: &[LoadedSample]) -> anyhow::Result<Vec<CachedSample>> {
    let factor = model.cfg.image_factor();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let z0 = model.vae.encode(&model.store, &s.image)?;
        let text = model.text.encode(&model.store, &s.caption);
        let mut variants = Vec::with_capacity(3);
        for v in &s.variants {
            let masked_latent = model.vae.encode(&model.store, &v.masked_image)?;
            let pyramid = downsample_mask_by(&v.pm, factor)?;
            variants.push(CachedVariant {
                masked_latent,
                pyramid,
                sketch: v.sketch.clone(),
                pm_image: v.pm.clone(),
            });
        }
        out.push(CachedSample {
            id: s.id.clone(),
            z0,
            text,
            variants: variants.try_into().map_err(|_| anyhow::anyhow!("variant count"))?,
        });
    }
    Ok(out)
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let inner = parts[0].shape().to_vec();
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&inner[1..]);
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
    for p in parts {
        assert_eq!(p.shape(), &inner[..], "stack shape mismatch");
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

fn stack_text(parts: &[&Tensor]) -> Tensor {
    let inner = parts[0].shape().to_vec(); // [tokens, dim]
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[parts.len(), inner[0], inner[1]], data)
}

/// Assembles a [`PreparedBatch`] from cached samples and per-sample mask
/// type indices.
pub fn make_batch(
    model: &InpaintModel,
    cache: &[CachedSample],
    picks: &[(usize, usize)],
) -> PreparedBatch {
    let ids = picks.iter().map(|&(i, _)| cache[i].id.clone()).collect();
    let z0: Vec<&Tensor> = picks.iter().map(|&(i, _)| &cache[i].z0).collect();
    let text: Vec<&Tensor> = picks.iter().map(|&(i, _)| &cache[i].text).collect();
    let masked: Vec<&Tensor> = picks
        .iter()
        .map(|&(i, v)| &cache[i].variants[v].masked_latent)
        .collect();
    let sketch: Vec<&Tensor> = picks
        .iter()
        .map(|&(i, v)| &cache[i].variants[v].sketch)
        .collect();
    let mut pyramid = Vec::with_capacity(NUM_SCALES);
    for level in 0..NUM_SCALES {
        let parts: Vec<&Tensor> = picks
            .iter()
            .map(|&(i, v)| &cache[i].variants[v].pyramid[level])
            .collect();
        pyramid.push(stack(&parts));
    }
    PreparedBatch {
        ids,
        z0: stack(&z0),
        text: stack_text(&text),
        null_text: model.text.null_sequence(&model.store),
        masked_latent: stack(&masked),
        pyramid: pyramid.try_into().unwrap(),
        sketch: stack(&sketch),
    }
}
