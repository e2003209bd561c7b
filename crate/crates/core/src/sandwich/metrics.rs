//! Distortion measures, rate-distortion points and Pareto frontiers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::PlanarImage;

/// Reported value for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `d`-bit PSNR over all samples: `10 log10((2^d - 1)^2 n / |S - S'|^2)`,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr_dbit(s: &PlanarImage, r: &PlanarImage, d: u8) -> Result<f64> {
    if !(1..=32).contains(&d) {
        return Err(invalid(format!("bit depth {d} out of range")));
    }
    let sse = s.sse(r)?;
    Ok(psnr_from_sse(sse, s.data.len(), d))
}

pub fn psnr_from_sse(sse: f64, samples: usize, d: u8) -> f64 {
    if sse == 0.0 {
        return PSNR_CAP_DB;
    }
    let peak = ((1u64 << d) - 1) as f64;
    (10.0 * (peak * peak * samples as f64 / sse).log10()).min(PSNR_CAP_DB)
}

/// Unit-sphere completion of a tangent-space normal.
pub fn normals_postprocess_baseline(nx: f64, ny: f64) -> f64 {
    (1.0 - nx * nx - ny * ny).max(0.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Proxy,
    Actual,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Proxy => "proxy",
            Provenance::Actual => "actual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    /// Bits per source pixel.
    pub rate: f64,
    /// PSNR in dB.
    pub psnr: f64,
    pub provenance: Provenance,
    pub lambda: f64,
    pub stepsize: f64,
}

impl RdPoint {
    fn dominates(&self, other: &RdPoint) -> bool {
        self.rate <= other.rate && self.psnr >= other.psnr && (self.rate < other.rate || self.psnr > other.psnr)
    }
}

/// Points not dominated by any other (no lower-or-equal rate with higher-or-equal
/// PSNR, strictly better in one), sorted by rate.
pub fn pareto(points: &[RdPoint]) -> Vec<RdPoint> {
    let mut front: Vec<RdPoint> = points.iter().filter(|p| !points.iter().any(|q| q.dominates(p))).cloned().collect();
    front.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(a.psnr.total_cmp(&b.psnr)));
    front
}

/// Best PSNR on `curve` among points with rate at most `rate`.
pub fn best_psnr_at_or_below(curve: &[RdPoint], rate: f64) -> Option<f64> {
    curve.iter().filter(|p| p.rate <= rate).map(|p| p.psnr).max_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(rate: f64, psnr: f64) -> RdPoint {
        RdPoint { rate, psnr, provenance: Provenance::Actual, lambda: 0.0, stepsize: 1.0 }
    }

    #[test]
    fn full_scale_error_is_zero_db() {
        for d in [8u8, 16] {
            let peak = ((1u64 << d) - 1) as f64;
            let a = PlanarImage::filled(4, 5, 3, 0.0);
            let b = PlanarImage::filled(4, 5, 3, peak);
            assert_eq!(psnr_dbit(&a, &b, d).unwrap(), 0.0);
            assert_eq!(psnr_dbit(&a, &a, d).unwrap(), PSNR_CAP_DB);
        }
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let d = if trial % 2 == 0 { 8 } else { 16 };
            let peak = if d == 8 { 255.0 } else { 65535.0 };
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let a = PlanarImage::from_fn(h, w, 3, |_, _, _| rng.random_range(0.0..peak));
            let b = PlanarImage::from_fn(h, w, 3, |_, _, _| rng.random_range(0.0..peak));
            let mut mse = 0.0;
            for (x, y) in a.data.iter().zip(&b.data) {
                mse += (x - y) * (x - y);
            }
            mse /= (3 * h * w) as f64;
            let direct = 20.0 * peak.log10() - 10.0 * mse.log10();
            assert!((psnr_dbit(&a, &b, d).unwrap() - direct).abs() <= 1e-9);
        }
    }

    #[test]
    fn normals_completion() {
        assert_eq!(normals_postprocess_baseline(0.0, 0.0), 1.0);
        assert_eq!(normals_postprocess_baseline(1.0, 0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (theta, phi) = (rng.random_range(0.0..std::f64::consts::FRAC_PI_2), rng.random_range(0.0..std::f64::consts::TAU));
            let n = (theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            assert!((normals_postprocess_baseline(n.0, n.1) - n.2).abs() < 1e-12);
        }
    }

    #[test]
    fn pareto_examples() {
        let front = pareto(&[pt(1.0, 30.0), pt(2.0, 35.0), pt(1.5, 29.0)]);
        assert_eq!(front, vec![pt(1.0, 30.0), pt(2.0, 35.0)]);
        assert_eq!(pareto(&[pt(1.0, 1.0)]), vec![pt(1.0, 1.0)]);
    }

    proptest! {
        #[test]
        fn pareto_is_idempotent_and_complete(pts in prop::collection::vec((0.0f64..4.0, 10.0f64..50.0), 1..30)) {
            let points: Vec<RdPoint> = pts.iter().map(|&(r, p)| pt(r, p)).collect();
            let front = pareto(&points);
            prop_assert_eq!(pareto(&front), front.clone());
            for a in &front {
                prop_assert!(!front.iter().any(|b| b.dominates(a)));
            }
            for p in &points {
                let dominated = points.iter().any(|q| q.dominates(p));
                prop_assert_eq!(!dominated, front.contains(p));
            }
        }
    }
}
