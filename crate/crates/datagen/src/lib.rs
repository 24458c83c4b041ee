//! Dataset preparation for sketch-guided partial-object inpainting.
//!
//! Builds four-tuple training samples (masked image, partial mask, partial
//! sketch, caption) from instance-annotated images:
//!
//! 1. mask generation — a dilation ladder over the instance mask, with
//!    Gaussian-blurred blends between adjacent levels;
//! 2. partial masking — a random cubic curve swept across the selected mask
//!    in one of four directions until 50-60% of it is covered, reversed
//!    into a partial mask with 0 marking corrupted pixels;
//! 3. partial sketch — an edge sketch of the clean image restricted to the
//!    corrupted object region via `(1 - pm) * m0 * s`.
//!
//! A synthetic corpus generator stands in for instance-annotated datasets;
//! real corpora load through the same directory layout.

pub mod bezier;
pub mod canny;
pub mod error;
pub mod io;
pub mod manifest;
pub mod morph;
pub mod pipeline;
pub mod sketch;
pub mod synth;

pub use bezier::{bezier_partial_mask, sweep_partial_mask, PartialMaskOutcome, ScanDirection, SweepCurve};
pub use canny::canny_sketch;
pub use error::{DatagenError, Result};
pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use morph::{blend_masks, dilate_mask, Mask, MaskLadder};
pub use pipeline::{build_four_tuple, DatagenConfig, FourTuple, Provenance};
pub use sketch::{partial_sketch, SketchRegistry};
pub use synth::{synth_corpus, InstanceSample};

use rayon::prelude::*;
use std::path::Path;

/// Generates `per_sample` tuples for every corpus sample, writes all PNGs
/// and the manifest under `out_dir`, and returns the records. Tuple
/// pipelines run in parallel; the manifest is written once at the end.
pub fn run_datagen(
    corpus: &[InstanceSample],
    cfg: &DatagenConfig,
    out_dir: &Path,
    seed: u64,
    per_sample: usize,
) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| DatagenError::io(out_dir, e))?;
    let registry = SketchRegistry::builtin(cfg.canny_low, cfg.canny_high);
    let jobs: Vec<(usize, usize)> = (0..corpus.len())
        .flat_map(|i| (0..per_sample).map(move |k| (i, k)))
        .collect();
    let results: Vec<Result<ManifestRecord>> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let sample = &corpus[i];
            let tuple_id = format!("{}-{k:02}", sample.id);
            let mut renamed = sample.clone();
            renamed.id = tuple_id.clone();
            let tuple = build_four_tuple(&renamed, cfg, &registry, seed)?;
            manifest::emit_tuple(out_dir, sample, &tuple, &tuple_id)
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(DatagenError::Degenerate { id, reason }) => {
                eprintln!("skipping {id}: {reason}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        eprintln!("{skipped} sample(s) skipped");
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
