//! Four-tuple assembly: ladder selection, partial masking, sketch
//! composition and the masked image, fully reproducible from (id, seed).

use sketchfill_core::Rng64;

use crate::bezier::{bezier_partial_mask, ScanDirection};
use crate::canny::canny_sketch;
use crate::error::{DatagenError, Result};
use crate::morph::{apply_mask_rgb, mask_area, MaskLadder, Mask};
use crate::sketch::{partial_sketch, SketchRegistry};
use crate::synth::InstanceSample;
use ndarray::{Array2, Array3};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatagenConfig {
    pub dilation_levels: usize,
    pub blur_levels: usize,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            dilation_levels: 5,
            blur_levels: 4,
            coverage_min: 0.5,
            coverage_max: 0.6,
            canny_low: 0.1,
            canny_high: 0.3,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub d: usize,
    pub s: usize,
    pub direction: ScanDirection,
    pub sketch_type: String,
    pub coverage: f64,
    pub seed: u64,
    pub fallback: bool,
}

/// One training sample: masked image, partial mask (0 = corrupted), partial
/// sketch and caption, plus how it was produced.
#[derive(Debug, Clone)]
pub struct FourTuple {
    pub id: String,
    pub masked_image: Array3<f64>,
    pub partial_mask: Mask,
    pub partial_sketch: Array2<f64>,
    /// The full-image sketch the partial sketch was cut from.
    pub sketch: Array2<f64>,
    pub caption: String,
    pub provenance: Provenance,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325_u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Runs the full three-step pipeline on one instance sample. The RNG stream
/// is derived from `(seed, id)`, so a (sample, seed) pair always produces
/// the same tuple.
pub fn build_four_tuple(
    sample: &InstanceSample,
    cfg: &DatagenConfig,
    registry: &SketchRegistry,
    seed: u64,
) -> Result<FourTuple> {
    if mask_area(&sample.mask) == 0 {
        return Err(DatagenError::Degenerate {
            id: sample.id.clone(),
            reason: "instance mask is empty".into(),
        });
    }
    if registry.is_empty() {
        return Err(DatagenError::Value("no sketch generators registered".into()));
    }
    let mut rng = Rng64::derive(seed, fnv1a(sample.id.as_bytes()));

    // mask generation: dilation ladder + blur blending, one entry selected
    let ladder = MaskLadder::build(&sample.mask, cfg.dilation_levels, cfg.blur_levels)?;
    let pairs = ladder.index_pairs();
    let (d, s) = pairs[rng.below(pairs.len())];
    let selected = ladder.entry(d, s)?;
    if mask_area(&selected) == 0 {
        return Err(DatagenError::Degenerate {
            id: sample.id.clone(),
            reason: format!("ladder entry ({d},{s}) vanished after blending"),
        });
    }

    // partial masking: directional curve sweep to a random coverage target
    let direction = ScanDirection::ALL[rng.below(4)];
    let coverage_target = rng.uniform_in(cfg.coverage_min, cfg.coverage_max);
    let outcome = bezier_partial_mask(&selected, direction, coverage_target, &mut rng)?;

    // sketch generation and partial-sketch composition
    let sketch_idx = rng.below(registry.len());
    let sketch = registry.generate(sketch_idx, &sample.image)?;
    let ps = partial_sketch(&outcome.pm, &sample.mask, &sketch)?;

    let masked_image = apply_mask_rgb(&sample.image, &outcome.pm);

    Ok(FourTuple {
        id: sample.id.clone(),
        masked_image,
        partial_mask: outcome.pm,
        partial_sketch: ps,
        sketch,
        caption: sample.caption.clone(),
        provenance: Provenance {
            d,
            s,
            direction,
            sketch_type: registry.name(sketch_idx).to_string(),
            coverage: outcome.coverage,
            seed,
            fallback: outcome.fallback,
        },
    })
}

/// Convenience wrapper that extracts the built-in sketch for one image.
pub fn full_sketch(image: &Array3<f64>, cfg: &DatagenConfig) -> Result<Array2<f64>> {
    canny_sketch(image, cfg.canny_low, cfg.canny_high)
}
