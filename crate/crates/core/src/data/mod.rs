//! Procedural two-domain detection benchmark.
//!
//! Scenes hold 1-5 anti-aliased shapes (circle, square, triangle) on a
//! textured background. The target domain applies a photometric-only
//! shift (fog thickening toward the image top, contrast, hue rotation,
//! noise), so a source scene and its target counterpart at the same seed
//! have identical annotations. Target labels exist on disk for
//! evaluation; training never reads them.

mod io;

pub use io::{
    read_manifest, read_ppm, read_split, write_benchmark, write_ppm, write_split, AnnotationRecord,
    DatasetManifest, ObjectRecord, Split,
};

use autodiff::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ShiftConfig;
use crate::matching::{iou, GroundTruth};
use crate::params::sample_normal;

/// One synthetic image with annotations and a domain label
/// (0 = source, 1 = target).
#[derive(Debug, Clone)]
pub struct Scene {
    /// (3, H, W) floats in [0, 1].
    pub image: Tensor,
    pub annotations: GroundTruth,
    pub domain: u8,
    pub seed: u64,
}

const MAX_OBJECTS: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    /// Half extent in pixels (circumradius for the triangle).
    size: f64,
    color: [f64; 3],
}

impl Shape {
    fn bbox(&self, h: usize, w: usize) -> [f64; 4] {
        let (bw, bh, cy) = match self.class {
            // Circle and square: tight box is 2 * size.
            0 | 1 => (2.0 * self.size, 2.0 * self.size, self.cy),
            // Upward equilateral triangle with circumradius size.
            _ => (
                3.0f64.sqrt() * self.size,
                1.5 * self.size,
                self.cy - 0.25 * self.size,
            ),
        };
        [
            self.cx / w as f64,
            cy / h as f64,
            bw / w as f64,
            bh / h as f64,
        ]
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.class {
            0 => dx * dx + dy * dy <= self.size * self.size,
            1 => dx.abs() <= self.size && dy.abs() <= self.size,
            _ => {
                // Half-plane test against the three triangle edges.
                let r = self.size;
                let v = [
                    (self.cx, self.cy - r),
                    (self.cx - 0.866_025_403_784_438_6 * r, self.cy + 0.5 * r),
                    (self.cx + 0.866_025_403_784_438_6 * r, self.cy + 0.5 * r),
                ];
                let mut sign = 0i8;
                for i in 0..3 {
                    let (x1, y1) = v[i];
                    let (x2, y2) = v[(i + 1) % 3];
                    let cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
                    let s = if cross >= 0.0 { 1 } else { -1 };
                    if sign == 0 {
                        sign = s;
                    } else if sign != s {
                        return false;
                    }
                }
                true
            }
        }
    }
}

/// Renders one scene. The same seed always produces the same geometry,
/// so a target scene differs from its source twin only photometrically.
pub fn generate_scene(seed: u64, domain: u8, shift: &ShiftConfig, size: (usize, usize)) -> Scene {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Textured background: base tone plus two gratings and a vertical ramp.
    let base: [f64; 3] = [
        rng.gen_range(0.25..0.55),
        rng.gen_range(0.25..0.55),
        rng.gen_range(0.25..0.55),
    ];
    let freq_a: f64 = rng.gen_range(0.05..0.25);
    let freq_b: f64 = rng.gen_range(0.05..0.25);
    let phase_a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_b: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp: f64 = rng.gen_range(-0.06..0.06);

    let shapes = sample_shapes(&mut rng, h, w);

    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let tex = 0.04 * ((x as f64 * freq_a + phase_a).sin() + (y as f64 * freq_b + phase_b).sin())
                + ramp * (y as f64 / h as f64 - 0.5);
            let mut px = [
                (base[0] + tex).clamp(0.0, 1.0),
                (base[1] + tex).clamp(0.0, 1.0),
                (base[2] + tex).clamp(0.0, 1.0),
            ];
            for shape in &shapes {
                let coverage = coverage_at(shape, x, y);
                if coverage > 0.0 {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - coverage) + shape.color[c] * coverage;
                    }
                }
            }
            for c in 0..3 {
                image[c * h * w + y * w + x] = px[c];
            }
        }
    }

    if domain == 1 {
        apply_shift(&mut image, h, w, shift, seed);
    }

    let annotations = GroundTruth {
        classes: shapes.iter().map(|s| s.class).collect(),
        boxes: shapes.iter().map(|s| s.bbox(h, w)).collect(),
    };
    Scene {
        image: Tensor::new(vec![3, h, w], image).expect("image shape"),
        annotations,
        domain,
        seed,
    }
}

fn sample_shapes(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Shape> {
    const PALETTE: [[f64; 3]; 6] = [
        [0.92, 0.20, 0.16],
        [0.13, 0.62, 0.92],
        [0.97, 0.82, 0.12],
        [0.16, 0.80, 0.38],
        [0.85, 0.30, 0.85],
        [0.95, 0.55, 0.10],
    ];
    let count = rng.gen_range(1..=MAX_OBJECTS);
    // Shape extents scale with the canvas so small debug images stay valid.
    let cap = ((w.min(h) as f64 / 2.0 - 1.5) / 1.05).min(14.0).max(2.0);
    let lo = (cap * 0.6).max(1.5);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..20 {
            let size = rng.gen_range(lo..cap);
            let margin = size * 1.05 + 1.0;
            let shape = Shape {
                class: rng.gen_range(0..3),
                cx: rng.gen_range(margin..w as f64 - margin),
                cy: rng.gen_range(margin..h as f64 - margin),
                size,
                color: PALETTE[rng.gen_range(0..PALETTE.len())],
            };
            let bbox = shape.bbox(h, w);
            let overlaps = shapes
                .iter()
                .any(|other| iou(bbox, other.bbox(h, w)) > 0.2);
            if !overlaps {
                shapes.push(shape);
                break;
            }
        }
    }
    if shapes.is_empty() {
        // Rejection can only fail when the canvas is crowded; a fresh
        // scene always fits at least one centered shape.
        shapes.push(Shape {
            class: rng.gen_range(0..3),
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            size: lo,
            color: PALETTE[0],
        });
    }
    shapes
}

/// 2x2 supersampled coverage of a shape over one pixel.
fn coverage_at(shape: &Shape, x: usize, y: usize) -> f64 {
    let mut hits = 0;
    for &sy in &[0.25, 0.75] {
        for &sx in &[0.25, 0.75] {
            if shape.contains(x as f64 + sx, y as f64 + sy) {
                hits += 1;
            }
        }
    }
    hits as f64 / 4.0
}

/// Photometric shift for the target domain. Each stage is skipped
/// entirely at its neutral setting so an identity shift is bit-exact.
fn apply_shift(image: &mut [f64], h: usize, w: usize, shift: &ShiftConfig, seed: u64) {
    if shift.fog_density > 0.0 {
        for y in 0..h {
            // Depth grows toward the image top, like distant scenery.
            let depth = 1.0 - y as f64 / (h - 1) as f64;
            let atten = (-shift.fog_density * depth).exp();
            for x in 0..w {
                for c in 0..3 {
                    let idx = c * h * w + y * w + x;
                    image[idx] = image[idx] * atten + shift.haze_color[c] * (1.0 - atten);
                }
            }
        }
    }
    if shift.contrast_scale != 1.0 {
        for v in image.iter_mut() {
            *v = (*v - 0.5) * shift.contrast_scale + 0.5;
        }
    }
    if shift.hue_rotation != 0.0 {
        let m = hue_rotation_matrix(shift.hue_rotation);
        let plane = h * w;
        for i in 0..plane {
            let rgb = [image[i], image[plane + i], image[2 * plane + i]];
            for c in 0..3 {
                image[c * plane + i] = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
            }
        }
    }
    if shift.noise_std > 0.0 {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for v in image.iter_mut() {
            *v += sample_normal(&mut noise_rng) * shift.noise_std;
        }
    }
    if !shift.is_identity() {
        for v in image.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Rotation of RGB space around the gray axis by `theta` radians.
fn hue_rotation_matrix(theta: f64) -> [[f64; 3]; 3] {
    let c = theta.cos();
    let s = theta.sin();
    let a = 1.0 / 3.0f64.sqrt();
    let t = (1.0 - c) / 3.0;
    [
        [c + t, t - s * a, t + s * a],
        [t + s * a, c + t, t - s * a],
        [t - s * a, t + s * a, c + t],
    ]
}
