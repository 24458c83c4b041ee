//! Partial-sketch composition and the pluggable sketch-generator registry.
//!
//! Only the built-in edge-detector generator ships; learned sketch styles
//! register through [`SketchRegistry::register`] behind the same signature.

use ndarray::{Array2, Array3};

use crate::canny::canny_sketch;
use crate::error::{DatagenError, Result};
use crate::morph::Mask;

/// `(1 - pm) * m0 * s` elementwise: the sketch restricted to the corrupted
/// part of the original instance.
pub fn partial_sketch(pm: &Mask, m0: &Mask, s: &Array2<f64>) -> Result<Array2<f64>> {
    if pm.dim() != m0.dim() || pm.dim() != s.dim() {
        return Err(DatagenError::shape(
            "partial_sketch",
            format!("pm {:?}, m0 {:?}, s {:?}", pm.dim(), m0.dim(), s.dim()),
        ));
    }
    let mut out = Array2::zeros(s.dim());
    for ((y, x), &sv) in s.indexed_iter() {
        out[(y, x)] = (1.0 - pm[(y, x)] as f64) * m0[(y, x)] as f64 * sv;
    }
    Ok(out)
}

pub type SketchGeneratorFn = Box<dyn Fn(&Array3<f64>) -> Result<Array2<f64>> + Send + Sync>;

/// Named sketch generators; one is drawn per four-tuple.
pub struct SketchRegistry {
    entries: Vec<(String, SketchGeneratorFn)>,
}

impl SketchRegistry {
    /// Registry with the built-in edge-detector generator.
    pub fn builtin(canny_low: f64, canny_high: f64) -> Self {
        let mut r = SketchRegistry { entries: Vec::new() };
        r.register(
            "canny",
            Box::new(move |img| canny_sketch(img, canny_low, canny_high)),
        );
        r
    }

    pub fn register(&mut self, name: &str, f: SketchGeneratorFn) {
        self.entries.push((name.to_string(), f));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn generate(&self, idx: usize, image: &Array3<f64>) -> Result<Array2<f64>> {
        (self.entries[idx].1)(image)
    }
}
