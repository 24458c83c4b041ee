//! Synthetic instance-mask corpus: one primitive object per image on a
//! textured background, with the exact rasterized mask and a templated
//! caption naming shape, color and pose.

use ndarray::{Array2, Array3};
use sketchfill_core::Rng64;

use crate::error::{DatagenError, Result};
use crate::morph::Mask;

#[derive(Debug, Clone)]
pub struct InstanceSample {
    pub id: String,
    /// `[h, w, 3]`, values in [0,1].
    pub image: Array3<f64>,
    /// 1 = object pixel.
    pub mask: Mask,
    pub caption: String,
}

const COLORS: [(&str, [f64; 3]); 3] = [
    ("red", [0.82, 0.18, 0.16]),
    ("green", [0.18, 0.70, 0.25]),
    ("blue", [0.18, 0.32, 0.80]),
];

#[derive(Clone, Copy)]
enum Shape {
    Oval,
    Polygon(usize),
    Blob,
}

impl Shape {
    fn word(&self) -> String {
        match self {
            Shape::Oval => "oval".to_string(),
            Shape::Polygon(k) => format!("{k}-sided polygon"),
            Shape::Blob => "bird-like blob".to_string(),
        }
    }
}

fn rotate(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

fn inside_ellipse(dx: f64, dy: f64, a: f64, b: f64, theta: f64) -> bool {
    let (rx, ry) = rotate(dx, dy, theta);
    (rx / a) * (rx / a) + (ry / b) * (ry / b) <= 1.0
}

fn inside_polygon(dx: f64, dy: f64, verts: &[(f64, f64)]) -> bool {
    // convex, vertices in angular order: all cross products one-signed
    let n = verts.len();
    let mut sign = 0.0_f64;
    for i in 0..n {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % n];
        let cross = (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

fn inside_triangle(dx: f64, dy: f64, v: &[(f64, f64); 3]) -> bool {
    inside_polygon(dx, dy, v)
}

/// Smooth value noise in [0,1] from a few sine waves.
fn texture(x: f64, y: f64, phase: f64) -> f64 {
    let v = (0.11 * x + phase).sin() + (0.07 * y - 1.3 * phase).cos()
        + (0.05 * (x + y) + 2.0 * phase).sin();
    (v / 3.0 + 1.0) / 2.0
}

/// Generates `n` samples on a `canvas x canvas` grid.
pub fn synth_corpus(n: usize, canvas: usize, seed: u64) -> Result<Vec<InstanceSample>> {
    if n < 1 {
        return Err(DatagenError::parameter("n", "must be >= 1"));
    }
    if canvas < 64 {
        return Err(DatagenError::parameter("canvas", "must be >= 64"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng64::derive(seed, i as u64);
        out.push(generate_one(&format!("synth{i:04}"), canvas, &mut rng));
    }
    Ok(out)
}

fn generate_one(id: &str, canvas: usize, rng: &mut Rng64) -> InstanceSample {
    let c = canvas as f64;
    // background
    let bg_kind = rng.below(2);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let bg_a = [
        rng.uniform_in(0.25, 0.55),
        rng.uniform_in(0.25, 0.55),
        rng.uniform_in(0.25, 0.55),
    ];
    let bg_b = [
        rng.uniform_in(0.45, 0.75),
        rng.uniform_in(0.45, 0.75),
        rng.uniform_in(0.45, 0.75),
    ];

    // object
    let (color_word, color) = COLORS[rng.below(COLORS.len())];
    let shape = match rng.below(3) {
        0 => Shape::Oval,
        1 => Shape::Polygon(3 + rng.below(4)),
        _ => Shape::Blob,
    };
    let pose_idx = rng.below(3);
    let (pose_word, theta) = match pose_idx {
        0 => ("upright", 0.0),
        1 => ("tilted left", 25.0_f64.to_radians()),
        _ => ("tilted right", -25.0_f64.to_radians()),
    };
    let cx = rng.uniform_in(0.35 * c, 0.65 * c);
    let cy = rng.uniform_in(0.35 * c, 0.65 * c);
    let a = rng.uniform_in(0.18 * c, 0.28 * c);
    let b = rng.uniform_in(0.12 * c, 0.22 * c);

    let poly_verts: Vec<(f64, f64)> = match shape {
        Shape::Polygon(k) => (0..k)
            .map(|j| {
                let ang = theta + 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                let r = a * rng.uniform_in(0.65, 1.0);
                (r * ang.cos(), r * ang.sin())
            })
            .collect(),
        _ => Vec::new(),
    };
    // blob parts: body ellipse, head circle along the major axis, tail triangle
    let (head_off_x, head_off_y) = rotate(0.9 * a, 0.0, -theta);
    let head_r = 0.45 * b;
    let tail: [(f64, f64); 3] = {
        let (tx, ty) = rotate(-1.3 * a, 0.0, -theta);
        let (ux, uy) = rotate(-0.5 * a, 0.35 * b, -theta);
        let (vx, vy) = rotate(-0.5 * a, -0.35 * b, -theta);
        [(tx, ty), (ux, uy), (vx, vy)]
    };

    let mut image = Array3::zeros((canvas, canvas, 3));
    let mut mask: Mask = Array2::zeros((canvas, canvas));
    for y in 0..canvas {
        for x in 0..canvas {
            let (xf, yf) = (x as f64, y as f64);
            let t = texture(xf, yf, phase);
            for ch in 0..3 {
                let base = if bg_kind == 0 {
                    bg_a[ch] + (bg_b[ch] - bg_a[ch]) * (xf + yf) / (2.0 * c)
                } else {
                    bg_a[ch] + (bg_b[ch] - bg_a[ch]) * t
                };
                image[(y, x, ch)] = base.clamp(0.0, 1.0);
            }
            let (dx, dy) = (xf - cx, yf - cy);
            let inside = match shape {
                Shape::Oval => inside_ellipse(dx, dy, a, b, theta),
                Shape::Polygon(_) => inside_polygon(dx, dy, &poly_verts),
                Shape::Blob => {
                    inside_ellipse(dx, dy, a, b, theta)
                        || {
                            let (ddx, ddy) = (dx - head_off_x, dy - head_off_y);
                            ddx * ddx + ddy * ddy <= head_r * head_r
                        }
                        || inside_triangle(dx, dy, &tail)
                }
            };
            if inside {
                mask[(y, x)] = 1;
                let shade = 0.82 + 0.18 * t;
                for ch in 0..3 {
                    image[(y, x, ch)] = (color[ch] * shade).clamp(0.0, 1.0);
                }
            }
        }
    }
    debug_assert!(mask.iter().any(|&v| v != 0));

    let caption = format!("a {color_word} {} {pose_word}", shape.word());
    InstanceSample {
        id: id.to_string(),
        image,
        mask,
        caption,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morph::mask_area;

    #[test]
    fn corpus_has_nonempty_exact_masks() {
        let samples = synth_corpus(16, 96, 7).unwrap();
        assert_eq!(samples.len(), 16);
        for s in &samples {
            assert!(mask_area(&s.mask) > 0, "{} empty", s.id);
            // mask marks exactly the object-colored region: object pixels
            // carry the palette color times a shade in [0.82, 1.0]
            for ((y, x), &m) in s.mask.indexed_iter() {
                if m == 1 {
                    let px = [s.image[(y, x, 0)], s.image[(y, x, 1)], s.image[(y, x, 2)]];
                    let matches_palette = COLORS.iter().any(|(_, c)| {
                        let mut ratio = None;
                        (0..3).all(|ch| {
                            if c[ch] == 0.0 {
                                return px[ch] == 0.0;
                            }
                            let r = px[ch] / c[ch];
                            match ratio {
                                None => {
                                    ratio = Some(r);
                                    (0.8..=1.0001).contains(&r)
                                }
                                Some(prev) => (r - prev).abs() < 1e-9,
                            }
                        })
                    });
                    assert!(matches_palette, "{} pixel ({y},{x}) = {px:?}", s.id);
                }
            }
        }
    }

    #[test]
    fn captions_mention_the_generated_color() {
        let samples = synth_corpus(24, 96, 11).unwrap();
        for s in &samples {
            let has_color = COLORS.iter().any(|(w, _)| s.caption.contains(w));
            assert!(has_color, "caption `{}` names no palette color", s.caption);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_corpus(4, 96, 3).unwrap();
        let b = synth_corpus(4, 96, 3).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn parameter_validation() {
        assert!(matches!(
            synth_corpus(0, 96, 1),
            Err(DatagenError::Parameter { .. })
        ));
    }
}
