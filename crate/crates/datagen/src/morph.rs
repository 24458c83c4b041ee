//! Binary-mask morphology: distance transforms, the dilation ladder and
//! blurred blends between adjacent dilation levels.
//!
//! Masks are `Array2<u8>` with 1 = object. Dilation uses a square
//! structuring element, realized exactly by thresholding the chessboard
//! (Chebyshev) distance transform, and is clipped to the instance bounding
//! box so the top of the ladder converges to the box itself.

use ndarray::{Array2, Array3};

use crate::error::{DatagenError, Result};

pub type Mask = Array2<u8>;

/// Inclusive bounding box (y0, x0, y1, x1) of the nonzero pixels.
pub fn bbox(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
    let mut any = false;
    for ((y, x), &v) in mask.indexed_iter() {
        if v != 0 {
            any = true;
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y);
            x1 = x1.max(x);
        }
    }
    any.then_some((y0, x0, y1, x1))
}

pub fn mask_area(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v != 0).count()
}

/// Complement of the bounding box: 0 inside the box, 1 outside. The
/// convention matches partial masks (0 marks the corrupted region).
pub fn bbox_complement(mask: &Mask) -> Result<Mask> {
    let (y0, x0, y1, x1) =
        bbox(mask).ok_or_else(|| DatagenError::Value("empty instance mask".into()))?;
    let mut out = Array2::ones(mask.dim());
    for y in y0..=y1 {
        for x in x0..=x1 {
            out[(y, x)] = 0;
        }
    }
    Ok(out)
}

/// Chessboard (Chebyshev) distance to the nearest nonzero pixel; two-pass
/// chamfer scan, exact for this metric.
pub fn chebyshev_distance(mask: &Mask) -> Array2<u32> {
    let (h, w) = mask.dim();
    let inf = u32::MAX / 2;
    let mut d = Array2::from_elem((h, w), inf);
    for ((y, x), &v) in mask.indexed_iter() {
        if v != 0 {
            d[(y, x)] = 0;
        }
    }
    // forward
    for y in 0..h {
        for x in 0..w {
            let mut best = d[(y, x)];
            if y > 0 {
                best = best.min(d[(y - 1, x)] + 1);
                if x > 0 {
                    best = best.min(d[(y - 1, x - 1)] + 1);
                }
                if x + 1 < w {
                    best = best.min(d[(y - 1, x + 1)] + 1);
                }
            }
            if x > 0 {
                best = best.min(d[(y, x - 1)] + 1);
            }
            d[(y, x)] = best;
        }
    }
    // backward
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut best = d[(y, x)];
            if y + 1 < h {
                best = best.min(d[(y + 1, x)] + 1);
                if x > 0 {
                    best = best.min(d[(y + 1, x - 1)] + 1);
                }
                if x + 1 < w {
                    best = best.min(d[(y + 1, x + 1)] + 1);
                }
            }
            if x + 1 < w {
                best = best.min(d[(y, x + 1)] + 1);
            }
            d[(y, x)] = best;
        }
    }
    d
}

/// Largest pixel gap between the mask and its bounding box.
pub fn box_gap(mask: &Mask) -> Result<u32> {
    let (y0, x0, y1, x1) =
        bbox(mask).ok_or_else(|| DatagenError::Value("empty instance mask".into()))?;
    let dist = chebyshev_distance(mask);
    let mut r = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            r = r.max(dist[(y, x)]);
        }
    }
    Ok(r)
}

/// Dilates with a square structuring element of side
/// `k_d = 1 + 2 * d * ceil(r_box / D)`, clipped to the bounding box.
/// `d = 0` returns the mask unchanged; `d = D` fills the box.
pub fn dilate_mask(m0: &Mask, d: usize, dilation_levels: usize) -> Result<Mask> {
    if dilation_levels == 0 {
        return Err(DatagenError::parameter("D", "must be >= 1"));
    }
    if d > dilation_levels {
        return Err(DatagenError::parameter(
            "d",
            format!("{d} out of range [0, {dilation_levels}]"),
        ));
    }
    let r_box = box_gap(m0)?;
    let step = (r_box as f64 / dilation_levels as f64).ceil() as u32;
    let radius = d as u32 * step;
    Ok(dilate_clipped(m0, radius))
}

fn dilate_clipped(m0: &Mask, radius: u32) -> Mask {
    let (y0, x0, y1, x1) = bbox(m0).expect("caller validated non-empty mask");
    let dist = chebyshev_distance(m0);
    let mut out = Array2::zeros(m0.dim());
    for y in y0..=y1 {
        for x in x0..=x1 {
            if dist[(y, x)] <= radius {
                out[(y, x)] = 1;
            }
        }
    }
    out
}

/// The full dilation ladder `m_0..m_D` from one distance transform.
pub fn dilation_ladder(m0: &Mask, dilation_levels: usize) -> Result<Vec<Mask>> {
    if dilation_levels == 0 {
        return Err(DatagenError::parameter("D", "must be >= 1"));
    }
    let r_box = box_gap(m0)?;
    let step = (r_box as f64 / dilation_levels as f64).ceil() as u32;
    Ok((0..=dilation_levels)
        .map(|d| dilate_clipped(m0, d as u32 * step))
        .collect())
}

fn support_subset(inner: &Mask, outer: &Mask) -> bool {
    inner
        .iter()
        .zip(outer.iter())
        .all(|(&a, &b)| a == 0 || b != 0)
}

fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = (k as f64 / 4.0).max(0.5);
    let r = (k / 2) as isize;
    let mut kern: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kern.iter().sum();
    for v in &mut kern {
        *v /= sum;
    }
    kern
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur_2d(field: &Array2<f64>, k: usize) -> Array2<f64> {
    if k <= 1 {
        return field.clone();
    }
    let kern = gaussian_kernel(k);
    let r = (k / 2) as isize;
    let (h, w) = field.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kern.iter().enumerate() {
                let sx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * field[(y, sx)];
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kern.iter().enumerate() {
                let sy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[(sy, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Blurred convex blend between two nested masks. `s = 0` returns `m_d`
/// bitwise, `s = S` returns `m_d1` bitwise; in between the blend
/// `s/S * m_d1 + (1 - s/S) * m_d` is Gaussian-blurred with kernel size
/// `k_s` and thresholded at 0.5.
pub fn blend_masks(m_d: &Mask, m_d1: &Mask, s: usize, blur_levels: usize, k_s: usize) -> Result<Mask> {
    if blur_levels == 0 {
        return Err(DatagenError::parameter("S", "must be >= 1"));
    }
    if s > blur_levels {
        return Err(DatagenError::parameter(
            "s",
            format!("{s} out of range [0, {blur_levels}]"),
        ));
    }
    if m_d.dim() != m_d1.dim() {
        return Err(DatagenError::shape(
            "blend_masks",
            format!("{:?} vs {:?}", m_d.dim(), m_d1.dim()),
        ));
    }
    if !support_subset(m_d, m_d1) {
        return Err(DatagenError::Value(
            "blend_masks: m_d support must lie inside m_d1".into(),
        ));
    }
    if s == 0 {
        return Ok(m_d.clone());
    }
    if s == blur_levels {
        return Ok(m_d1.clone());
    }
    let alpha = s as f64 / blur_levels as f64;
    let field = ndarray::Zip::from(m_d)
        .and(m_d1)
        .map_collect(|&a, &b| alpha * b as f64 + (1.0 - alpha) * a as f64);
    let blurred = gaussian_blur_2d(&field, k_s);
    Ok(blurred.map(|&v| u8::from(v > 0.5)))
}

/// The whole set `{m_{d,s}}`: `D * S` interior entries plus the terminal
/// dilation, with the endpoint identities `m_{d,0} = m_d` and
/// `m_{d,S} = m_{d+1}` holding bitwise.
#[derive(Debug, Clone)]
pub struct MaskLadder {
    pub dilation_levels: usize,
    pub blur_levels: usize,
    pub dilations: Vec<Mask>,
}

impl MaskLadder {
    pub fn build(m0: &Mask, dilation_levels: usize, blur_levels: usize) -> Result<Self> {
        Ok(MaskLadder {
            dilation_levels,
            blur_levels,
            dilations: dilation_ladder(m0, dilation_levels)?,
        })
    }

    /// Default blur kernel schedule.
    pub fn kernel_for(s: usize) -> usize {
        2 * s + 1
    }

    /// `m_{d,s}`; requires `d < D` unless `s = 0`.
    pub fn entry(&self, d: usize, s: usize) -> Result<Mask> {
        if d == self.dilation_levels {
            if s != 0 {
                return Err(DatagenError::parameter(
                    "s",
                    "terminal dilation has no blur levels".to_string(),
                ));
            }
            return Ok(self.dilations[d].clone());
        }
        blend_masks(
            &self.dilations[d],
            &self.dilations[d + 1],
            s,
            self.blur_levels,
            Self::kernel_for(s),
        )
    }

    /// All distinct (d, s) index pairs, for uniform selection.
    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for d in 0..self.dilation_levels {
            for s in 0..self.blur_levels {
                v.push((d, s));
            }
        }
        v.push((self.dilation_levels, 0));
        v
    }
}

/// Intersection-over-union of two masks.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x != 0 && y != 0 {
            inter += 1.0;
        }
        if x != 0 || y != 0 {
            union += 1.0;
        }
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Rasterized bounding-box mask (1 inside the box).
pub fn bbox_mask(mask: &Mask) -> Result<Mask> {
    let c = bbox_complement(mask)?;
    Ok(c.map(|&v| 1 - v))
}

/// RGB image (`[h, w, 3]`) with every channel zeroed where `pm = 0`.
pub fn apply_mask_rgb(image: &Array3<f64>, pm: &Mask) -> Array3<f64> {
    let mut out = image.clone();
    for ((y, x), &m) in pm.indexed_iter() {
        if m == 0 {
            for c in 0..3 {
                out[(y, x, c)] = 0.0;
            }
        }
    }
    out
}
