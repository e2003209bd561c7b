//! Seeded synthetic color images and translating clips.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::PlanarImage;
use crate::video::FlowField;

fn color(rng: &mut impl Rng) -> [f64; 3] {
    // Saturated hues: one channel high, one low, one anywhere.
    let mut c = [rng.random_range(200.0..255.0), rng.random_range(0.0..60.0), rng.random_range(0.0..255.0)];
    let k = rng.random_range(0..3);
    c.rotate_left(k);
    if rng.random_bool(0.5) {
        c.swap(0, 1);
    }
    c
}

/// Color canvas: gradient background, flat disks and rectangles, one
/// sinusoidal texture, mild noise, rounded to 8-bit levels.
pub fn color_image(h: usize, w: usize, rng: &mut impl Rng) -> PlanarImage {
    let corners = [color(rng), color(rng), color(rng), color(rng)];
    let mut img = PlanarImage::from_fn(h, w, 3, |y, x, c| {
        let (fy, fx) = (y as f64 / h.max(2) as f64, x as f64 / w.max(2) as f64);
        let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
        let bottom = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
        top * (1.0 - fy) + bottom * fy
    });
    let scale = h.min(w) as f64;
    for _ in 0..rng.random_range(3..9) {
        let col = color(rng);
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let r = rng.random_range(0.08..0.3) * scale;
        let disk = rng.random_bool(0.5);
        let (ry, rx) = (r * rng.random_range(0.4..1.0), r * rng.random_range(0.4..1.0));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if disk { dy * dy + dx * dx <= r * r } else { dy.abs() <= ry && dx.abs() <= rx };
                if inside {
                    for (c, &v) in col.iter().enumerate() {
                        *img.at_mut(y, x, c) = v;
                    }
                }
            }
        }
    }
    let (fy, fx) = (rng.random_range(0.05..0.4), rng.random_range(0.05..0.4));
    let ch = rng.random_range(0..3);
    let amp = rng.random_range(10.0..40.0);
    let noise = Normal::new(0.0, 2.0).expect("valid sigma");
    for y in 0..h {
        for x in 0..w {
            *img.at_mut(y, x, ch) += amp * (fy * y as f64 + fx * x as f64).sin();
            for c in 0..3 {
                let v = img.at(y, x, c) + noise.sample(rng);
                *img.at_mut(y, x, c) = v.round().clamp(0.0, 255.0);
            }
        }
    }
    img
}

pub fn color_dataset(n: usize, h: usize, w: usize, seed: u64) -> Vec<PlanarImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| color_image(h, w, &mut rng)).collect()
}

/// 16-bit canvas: a color canvas under a smooth exposure ramp that pushes
/// part of the range past the 8-bit white point.
pub fn hdr_image(h: usize, w: usize, rng: &mut impl Rng) -> PlanarImage {
    let base = color_image(h, w, rng);
    let (gy, gx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, 64.0).expect("valid sigma");
    let mut img = PlanarImage::from_fn(h, w, 3, |y, x, c| {
        let t = gy * (y as f64 / h.max(2) as f64 - 0.5) + gx * (x as f64 / w.max(2) as f64 - 0.5);
        base.at(y, x, c) * 257.0 * 2f64.powf(t)
    });
    for v in img.data.iter_mut() {
        *v = (*v + noise.sample(rng)).round().clamp(0.0, 65535.0);
    }
    img.with_bit_depth(16)
}

/// Tangent-space normal map of a random bump field, stored as
/// `255 (n + 1) / 2` and rounded.
pub fn normal_map(h: usize, w: usize, rng: &mut impl Rng) -> PlanarImage {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(4..12))
        .map(|_| {
            let s = h.min(w) as f64;
            (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(0.05..0.25) * s, rng.random_range(-1.0..1.0) * s * 0.3)
        })
        .collect();
    let grad = |y: f64, x: f64| {
        let (mut gy, mut gx) = (0.0, 0.0);
        for &(cy, cx, r, a) in &bumps {
            let e = a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp();
            gy -= e * (y - cy) / (r * r);
            gx -= e * (x - cx) / (r * r);
        }
        (gy, gx)
    };
    PlanarImage::from_fn(h, w, 3, |y, x, c| {
        let (gy, gx) = grad(y as f64 + 0.5, x as f64 + 0.5);
        let norm = (gx * gx + gy * gy + 1.0).sqrt();
        let n = [-gx / norm, -gy / norm, 1.0 / norm][c];
        (255.0 * (n + 1.0) / 2.0).round()
    })
}

/// `frames` crops of one canvas, moving by `(dy, dx)` pixels per frame, with
/// the matching constant flows.
pub fn translating_clip(
    h: usize,
    w: usize,
    frames: usize,
    (dy, dx): (isize, isize),
    rng: &mut impl Rng,
) -> (Vec<PlanarImage>, Vec<FlowField>) {
    let span = frames.saturating_sub(1);
    let (my, mx) = (dy.unsigned_abs() * span, dx.unsigned_abs() * span);
    let canvas = color_image(h + my, w + mx, rng);
    let clip = (0..frames)
        .map(|t| {
            // Content moves by +d, so the window moves by -d.
            let y0 = if dy >= 0 { my - dy as usize * t } else { dy.unsigned_abs() * t };
            let x0 = if dx >= 0 { mx - dx as usize * t } else { dx.unsigned_abs() * t };
            canvas.crop(y0, x0, h, w).expect("window inside canvas")
        })
        .collect();
    let flows = (0..span).map(|_| FlowField::translation(h, w, dy as f64, dx as f64)).collect();
    (clip, flows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_range() {
        let a = color_dataset(3, 32, 40, 7);
        let b = color_dataset(3, 32, 40, 7);
        assert_eq!(a, b);
        assert!(a.iter().all(|im| im.data.iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0)));
        assert_ne!(a[0], color_dataset(1, 32, 40, 8)[0]);
    }

    #[test]
    fn hdr_and_normal_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hdr = hdr_image(16, 16, &mut rng);
        assert_eq!(hdr.bit_depth, 16);
        assert!(hdr.data.iter().any(|&v| v > 255.0 * 257.0 * 0.5));
        let n = normal_map(16, 16, &mut rng);
        for y in 0..16 {
            for x in 0..16 {
                let v: Vec<f64> = (0..3).map(|c| n.at(y, x, c) / 127.5 - 1.0).collect();
                assert!(v[2] > 0.0);
                assert!((v.iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn clip_frames_are_shifted_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (clip, flows) = translating_clip(16, 24, 3, (1, -2), &mut rng);
        assert_eq!((clip.len(), flows.len()), (3, 2));
        for t in 1..3 {
            for y in 1..16 {
                for x in 0..22 {
                    assert_eq!(clip[t].at(y, x, 0), clip[t - 1].at(y - 1, x + 2, 0));
                }
            }
        }
    }
}
