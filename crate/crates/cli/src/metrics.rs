//! Built-in reconstruction metrics and the external-metric plug-in slot.
//!
//! Masked-region metrics restrict to pixels where `pm = 0` (the corrupted
//! region); whole-image mode uses every pixel. PSNR of a zero-error
//! reconstruction is reported as a distinguished `"inf"` token.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// PSNR with an explicit infinity sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Psnr {
    Finite(f64),
    Infinite(String),
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse <= 0.0 {
            Psnr::Infinite("inf".to_string())
        } else {
            Psnr::Finite(10.0 * (1.0 / mse).log10())
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    /// Only pixels where the partial mask is 0.
    Masked,
    /// Every pixel.
    Whole,
}

fn region_iter<'a>(
    pm: &'a Array2<u8>,
    mode: MetricMode,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let (h, w) = pm.dim();
    (0..h)
        .flat_map(move |y| (0..w).map(move |x| (y, x)))
        .filter(move |&(y, x)| match mode {
            MetricMode::Masked => pm[(y, x)] == 0,
            MetricMode::Whole => true,
        })
}

/// Mean squared error over the selected region, averaged over channels.
pub fn region_mse(pred: &Array3<f64>, gt: &Array3<f64>, pm: &Array2<u8>, mode: MetricMode) -> f64 {
    assert_eq!(pred.dim(), gt.dim());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (y, x) in region_iter(pm, mode) {
        for c in 0..3 {
            let d = pred[(y, x, c)] - gt[(y, x, c)];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn clamp_get(f: &Array2<f64>, y: isize, x: isize) -> f64 {
    let (h, w) = f.dim();
    f[(
        y.clamp(0, h as isize - 1) as usize,
        x.clamp(0, w as isize - 1) as usize,
    )]
}

/// Per-pixel SSIM map of two single-channel images in [0,1], Gaussian
/// 11x11 window (sigma 1.5), replicated borders.
pub fn ssim_map(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.dim(), b.dim());
    let (h, w) = a.dim();
    let k = ssim_kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let wgt = k[(dy + r) as usize] * k[(dx + r) as usize];
                    let va = clamp_get(a, y as isize + dy, x as isize + dx);
                    let vb = clamp_get(b, y as isize + dy, x as isize + dx);
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            out[(y, x)] = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    out
}

/// Mean SSIM over the selected region, averaged over RGB channels.
pub fn region_ssim(pred: &Array3<f64>, gt: &Array3<f64>, pm: &Array2<u8>, mode: MetricMode) -> f64 {
    let (h, w, _) = pred.dim();
    let mut total = 0.0;
    for c in 0..3 {
        let mut pa = Array2::zeros((h, w));
        let mut ga = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                pa[(y, x)] = pred[(y, x, c)];
                ga[(y, x)] = gt[(y, x, c)];
            }
        }
        let map = ssim_map(&pa, &ga);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (y, x) in region_iter(pm, mode) {
            sum += map[(y, x)];
            n += 1;
        }
        total += if n == 0 { 1.0 } else { sum / n as f64 };
    }
    total / 3.0
}

/// Chi-square p-value for a 3-category goodness-of-fit test (2 degrees of
/// freedom, where the CDF has the closed form `1 - exp(-x/2)`).
pub fn chi_square_p_3cat(counts: &[usize; 3], probs: &[f64; 3]) -> f64 {
    let n: usize = counts.iter().sum();
    let mut x = 0.0;
    for i in 0..3 {
        let expected = probs[i] * n as f64;
        let d = counts[i] as f64 - expected;
        x += d * d / expected;
    }
    (-x / 2.0).exp()
}

/// Slot for externally supplied perceptual metrics. None ship built in;
/// registered plug-ins appear in evaluation reports under their names.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn compute(&self, pred: &Array3<f64>, gt: &Array3<f64>, caption: &str) -> f64;
}
