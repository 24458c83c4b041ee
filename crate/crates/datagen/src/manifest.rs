//! Line-delimited dataset manifest.
//!
//! One JSON record per line, UTF-8, fields in the fixed order below. Paths
//! are relative to the manifest's directory.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bezier::ScanDirection;
use crate::error::{DatagenError, Result};
use crate::io::{save_gray, save_mask, save_rgb};
use crate::pipeline::FourTuple;
use crate::synth::InstanceSample;

/// Field order is part of the on-disk format; serde keeps declaration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub instance_mask: String,
    pub sketch: String,
    pub masked_image: String,
    pub partial_mask: String,
    pub partial_sketch: String,
    pub caption: String,
    pub d: usize,
    pub s: usize,
    pub direction: ScanDirection,
    pub sketch_type: String,
    pub coverage: f64,
    pub seed: u64,
    pub fallback: bool,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| DatagenError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| DatagenError::Value(format!("manifest serialization: {e}")))?;
        writeln!(f, "{line}").map_err(|e| DatagenError::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| DatagenError::io(path, e))?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatagenError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DatagenError::Ingest {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes one tuple's PNGs under `out_dir` and returns its manifest record.
/// The clean image and instance mask are stored alongside so training can
/// rebuild alternative mask types.
pub fn emit_tuple(
    out_dir: &Path,
    sample: &InstanceSample,
    tuple: &FourTuple,
    tuple_id: &str,
) -> Result<ManifestRecord> {
    let files = [
        ("image", format!("{tuple_id}_image.png")),
        ("instance_mask", format!("{tuple_id}_m0.png")),
        ("sketch", format!("{tuple_id}_sketch.png")),
        ("masked_image", format!("{tuple_id}_masked.png")),
        ("partial_mask", format!("{tuple_id}_pm.png")),
        ("partial_sketch", format!("{tuple_id}_ps.png")),
    ];
    save_rgb(&out_dir.join(&files[0].1), &sample.image)?;
    save_mask(&out_dir.join(&files[1].1), &sample.mask)?;
    save_gray(&out_dir.join(&files[2].1), &tuple.sketch)?;
    save_rgb(&out_dir.join(&files[3].1), &tuple.masked_image)?;
    save_mask(&out_dir.join(&files[4].1), &tuple.partial_mask)?;
    save_gray(&out_dir.join(&files[5].1), &tuple.partial_sketch)?;
    Ok(ManifestRecord {
        id: tuple_id.to_string(),
        image: files[0].1.clone(),
        instance_mask: files[1].1.clone(),
        sketch: files[2].1.clone(),
        masked_image: files[3].1.clone(),
        partial_mask: files[4].1.clone(),
        partial_sketch: files[5].1.clone(),
        caption: tuple.caption.clone(),
        d: tuple.provenance.d,
        s: tuple.provenance.s,
        direction: tuple.provenance.direction,
        sketch_type: tuple.provenance.sketch_type.clone(),
        coverage: tuple.provenance.coverage,
        seed: tuple.provenance.seed,
        fallback: tuple.provenance.fallback,
    })
}
