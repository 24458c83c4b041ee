//! PNG round-tripping for images, masks and sketches, plus corpus
//! directory layout.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{DatagenError, Result};
use crate::morph::Mask;
use crate::synth::InstanceSample;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut buf = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(image[(y, x, 0)]),
                    to_u8(image[(y, x, 1)]),
                    to_u8(image[(y, x, 2)]),
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| DatagenError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| DatagenError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                out[(y as usize, x as usize, c)] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn save_gray(path: &Path, gray: &Array2<f64>) -> Result<()> {
    let (h, w) = gray.dim();
    let mut buf = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(gray[(y, x)])]));
        }
    }
    buf.save(path).map_err(|e| DatagenError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| DatagenError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            out[(y as usize, x as usize)] = img.get_pixel(x, y).0[0] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    save_gray(path, &mask.map(|&v| v as f64))
}

/// Loads a mask PNG, binarizing at half intensity.
pub fn load_mask(path: &Path) -> Result<Mask> {
    Ok(load_gray(path)?.map(|&v| u8::from(v >= 0.5)))
}

/// Corpus directory layout: `images/{id}.png`, `masks/{id}.png` and
/// `captions.txt` with tab-separated `id<TAB>caption` lines.
pub fn save_corpus(dir: &Path, samples: &[InstanceSample]) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| DatagenError::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| DatagenError::io(&masks, e))?;
    let mut captions = String::new();
    for s in samples {
        save_rgb(&images.join(format!("{}.png", s.id)), &s.image)?;
        save_mask(&masks.join(format!("{}.png", s.id)), &s.mask)?;
        captions.push_str(&format!("{}\t{}\n", s.id, s.caption));
    }
    let cap_path = dir.join("captions.txt");
    std::fs::write(&cap_path, captions).map_err(|e| DatagenError::io(&cap_path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Vec<InstanceSample>> {
    let cap_path = dir.join("captions.txt");
    let text = std::fs::read_to_string(&cap_path).map_err(|e| DatagenError::io(&cap_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line.split_once('\t').ok_or(DatagenError::Ingest {
            line: lineno + 1,
            detail: "expected `id<TAB>caption`".into(),
        })?;
        let image = load_rgb(&dir.join("images").join(format!("{id}.png")))?;
        let mask = load_mask(&dir.join("masks").join(format!("{id}.png")))?;
        out.push(InstanceSample {
            id: id.to_string(),
            image,
            mask,
            caption: caption.to_string(),
        });
    }
    Ok(out)
}
