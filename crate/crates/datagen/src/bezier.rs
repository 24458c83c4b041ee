//! Partial-mask generation by sweeping a curve across the selected mask.
//!
//! A cubic curve spanning the two edges perpendicular to the scan direction
//! is translated rigidly along the scan axis. The swept region accumulates
//! mask pixels in order of their per-pixel entry offsets, and the sweep
//! stops at the first offset where the accumulated coverage reaches the
//! target, so the overshoot is at most one entry event (one pixel, or one
//! tie group of a straight line's scanline).
//!
//! The result is reversed into the partial mask convention: `pm = 0` on the
//! swept portion of the mask (the corrupted region), 1 elsewhere.

use ndarray::Array2;
use sketchfill_core::Rng64;

use crate::error::{DatagenError, Result};
use crate::morph::{mask_area, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScanDirection {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::LeftToRight,
        ScanDirection::RightToLeft,
        ScanDirection::TopToBottom,
        ScanDirection::BottomToTop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScanDirection::LeftToRight => "left_to_right",
            ScanDirection::RightToLeft => "right_to_left",
            ScanDirection::TopToBottom => "top_to_bottom",
            ScanDirection::BottomToTop => "bottom_to_up",
        }
    }

    fn horizontal(&self) -> bool {
        matches!(self, ScanDirection::LeftToRight | ScanDirection::RightToLeft)
    }
}

/// The curve swept across the mask.
#[derive(Debug, Clone)]
pub enum SweepCurve {
    /// Degenerate curve aligned with the start edge (a plain scan).
    StraightLine,
    /// Cubic with control points in canvas coordinates (x, y).
    Cubic([(f64, f64); 4]),
}

impl SweepCurve {
    /// Random cubic spanning the two edges perpendicular to the scan
    /// direction; interior control points are uniform over the canvas.
    pub fn random(direction: ScanDirection, h: usize, w: usize, rng: &mut Rng64) -> Self {
        let (hf, wf) = (h as f64 - 1.0, w as f64 - 1.0);
        let p = |rng: &mut Rng64| (rng.uniform_in(0.0, wf), rng.uniform_in(0.0, hf));
        if direction.horizontal() {
            // spans top edge to bottom edge
            let p0 = (rng.uniform_in(0.0, wf), 0.0);
            let p3 = (rng.uniform_in(0.0, wf), hf);
            SweepCurve::Cubic([p0, p(rng), p(rng), p3])
        } else {
            let p0 = (0.0, rng.uniform_in(0.0, hf));
            let p3 = (wf, rng.uniform_in(0.0, hf));
            SweepCurve::Cubic([p0, p(rng), p(rng), p3])
        }
    }

    fn eval(pts: &[(f64, f64); 4], t: f64) -> (f64, f64) {
        let u = 1.0 - t;
        let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
        let mut x = 0.0;
        let mut y = 0.0;
        for i in 0..4 {
            x += b[i] * pts[i].0;
            y += b[i] * pts[i].1;
        }
        (x, y)
    }

    /// Per-row (horizontal scans) or per-column (vertical scans) boundary
    /// coordinate of the curve in its initial position. `maximal` selects
    /// the crossing farthest along the scan axis.
    fn boundary(&self, direction: ScanDirection, h: usize, w: usize, maximal: bool) -> Vec<f64> {
        let lanes = if direction.horizontal() { h } else { w };
        match self {
            SweepCurve::StraightLine => vec![0.0; lanes],
            SweepCurve::Cubic(pts) => {
                let init = if maximal { f64::NEG_INFINITY } else { f64::INFINITY };
                let mut b = vec![init; lanes];
                let samples = 8 * (h + w);
                for i in 0..=samples {
                    let t = i as f64 / samples as f64;
                    let (x, y) = Self::eval(pts, t);
                    let (lane, coord) = if direction.horizontal() {
                        (y.round().clamp(0.0, (h - 1) as f64) as usize, x)
                    } else {
                        (x.round().clamp(0.0, (w - 1) as f64) as usize, y)
                    };
                    b[lane] = if maximal { b[lane].max(coord) } else { b[lane].min(coord) };
                }
                // defensive fill for lanes the sampling skipped
                let mut last = 0.0;
                for v in b.iter_mut() {
                    if v.is_finite() {
                        last = *v;
                    } else {
                        *v = last;
                    }
                }
                b
            }
        }
    }
}

/// A generated partial mask with its bookkeeping.
#[derive(Debug, Clone)]
pub struct PartialMaskOutcome {
    /// 0 = corrupted (swept object region), 1 = visible.
    pub pm: Mask,
    /// `|corrupted ∩ mask| / |mask|`.
    pub coverage: f64,
    pub direction: ScanDirection,
    /// True when the curve was replaced by a straight-line scan.
    pub fallback: bool,
}

/// Per-pixel entry offset of each mask pixel for the given curve and
/// direction: the translation at which the sweeping curve first covers it.
fn entry_offsets(
    mask: &Mask,
    direction: ScanDirection,
    curve: &SweepCurve,
) -> Vec<(f64, (usize, usize))> {
    let (h, w) = mask.dim();
    let maximal = matches!(
        direction,
        ScanDirection::LeftToRight | ScanDirection::TopToBottom
    );
    let b = curve.boundary(direction, h, w, maximal);
    let mut offsets = Vec::with_capacity(mask_area(mask));
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let off = match direction {
            ScanDirection::LeftToRight => x as f64 - b[y],
            ScanDirection::RightToLeft => b[y] - x as f64,
            ScanDirection::TopToBottom => y as f64 - b[x],
            ScanDirection::BottomToTop => b[x] - y as f64,
        };
        offsets.push((off, (y, x)));
    }
    offsets
}

/// Sweeps an explicit curve. See [`bezier_partial_mask`] for the random
/// entry point.
pub fn sweep_partial_mask(
    mask: &Mask,
    direction: ScanDirection,
    coverage_target: f64,
    curve: &SweepCurve,
) -> Result<PartialMaskOutcome> {
    if !(0.5..=0.6).contains(&coverage_target) {
        return Err(DatagenError::parameter(
            "coverage_target",
            format!("{coverage_target} outside [0.50, 0.60]"),
        ));
    }
    let n = mask_area(mask);
    if n == 0 {
        return Err(DatagenError::Value("sweep over an empty mask".into()));
    }
    let mut offsets = entry_offsets(mask, direction, curve);
    offsets.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let k = (coverage_target * n as f64).ceil() as usize;
    let k = k.clamp(1, n);
    let stop = offsets[k - 1].0;

    let mut pm: Mask = Array2::ones(mask.dim());
    let mut covered = 0usize;
    for &(off, (y, x)) in &offsets {
        if off <= stop {
            pm[(y, x)] = 0;
            covered += 1;
        }
    }
    Ok(PartialMaskOutcome {
        pm,
        coverage: covered as f64 / n as f64,
        direction,
        fallback: matches!(curve, SweepCurve::StraightLine),
    })
}

/// Random-curve partial masking. Draws a cubic spanning the perpendicular
/// edges; if the sweep overshoots the target by more than one percentage
/// point (a mask too thin for curve-order granularity), it falls back to a
/// straight-line scan and flags the outcome.
pub fn bezier_partial_mask(
    mask: &Mask,
    direction: ScanDirection,
    coverage_target: f64,
    rng: &mut Rng64,
) -> Result<PartialMaskOutcome> {
    let (h, w) = mask.dim();
    let curve = SweepCurve::random(direction, h, w, rng);
    let first = sweep_partial_mask(mask, direction, coverage_target, &curve)?;
    if first.coverage <= coverage_target + 0.01 {
        return Ok(first);
    }
    let mut fallback =
        sweep_partial_mask(mask, direction, coverage_target, &SweepCurve::StraightLine)?;
    fallback.fallback = true;
    Ok(fallback)
}
