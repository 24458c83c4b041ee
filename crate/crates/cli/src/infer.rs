//! Inference: encode inputs, run the guided sampler, decode, and composite
//! so that visible pixels pass through bit-for-bit.

use ndarray::{Array2, Array3};

use anyhow::bail;
use sketchfill_core::model::InpaintModel;
use sketchfill_core::sampler::ddim_sample;
use sketchfill_core::schedule::NoiseSchedule;
use sketchfill_datagen::morph::Mask;

use crate::dataset::{gray_to_tensor, rgb_to_tensor, tensor_to_rgb};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 7.5;

/// 8-bit image in `[h, w, 3]` layout.
pub type Rgb8 = Array3<u8>;

pub fn rgb8_to_f64(img: &Rgb8) -> Array3<f64> {
    img.map(|&v| v as f64 / 255.0)
}

pub fn f64_to_rgb8(img: &Array3<f64>) -> Rgb8 {
    img.map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Full inference pass over 8-bit inputs. The output keeps every visible
/// pixel (`pm = 1`) bit-for-bit from the masked input and fills the
/// corrupted region from the decoded sample.
pub fn infer_image(
    model: &InpaintModel,
    sched: &NoiseSchedule,
    masked_image: &Rgb8,
    pm: &Mask,
    sketch: &Array2<f64>,
    caption: &str,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> anyhow::Result<Rgb8> {
    let (h, w, _) = masked_image.dim();
    let expected = model.cfg.image_size();
    if h != expected || w != expected {
        bail!("input is {h}x{w}, model expects {expected}x{expected}");
    }
    if pm.dim() != (h, w) || sketch.dim() != (h, w) {
        bail!("mask/sketch resolution does not match the image");
    }

    // zero the corrupted region before encoding, whatever the input held
    let mut masked_f = rgb8_to_f64(masked_image);
    for ((y, x), &m) in pm.indexed_iter() {
        if m == 0 {
            for c in 0..3 {
                masked_f[(y, x, c)] = 0.0;
            }
        }
    }
    let masked_t = rgb_to_tensor(&masked_f);
    let pm_t = gray_to_tensor(&pm.map(|&v| v as f64));
    let sketch_t = gray_to_tensor(sketch);
    let cond = model.make_conditioning(&masked_t, &pm_t, &sketch_t, caption)?;

    let z0 = ddim_sample(model, &cond, sched, steps, cfg_scale, seed)?;
    let decoded = model.vae.decode(&model.store, &z0)?;
    let gen8 = f64_to_rgb8(&tensor_to_rgb(&decoded));

    let mut out = Rgb8::zeros((h, w, 3));
    for ((y, x), &m) in pm.indexed_iter() {
        for c in 0..3 {
            out[(y, x, c)] = if m == 1 {
                masked_image[(y, x, c)]
            } else {
                gen8[(y, x, c)]
            };
        }
    }
    Ok(out)
}

pub fn rgb8_from_array(img: &Array3<f64>) -> Rgb8 {
    f64_to_rgb8(img)
}

pub fn save_rgb8(path: &std::path::Path, img: &Rgb8) -> anyhow::Result<()> {
    let (h, w, _) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([img[(y, x, 0)], img[(y, x, 1)], img[(y, x, 2)]]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb8(path: &std::path::Path) -> anyhow::Result<Rgb8> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Rgb8::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                out[(y as usize, x as usize, c)] = p.0[c];
            }
        }
    }
    Ok(out)
}
