//! Codelength-constrained vector quantizer design, the entropy-constrained
//! baseline it generalises, and small exhaustive oracles.
//!
//! Distortion is squared error; expectations are over the weighted empirical
//! distribution of the samples.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Weighted point set in `dim` dimensions. Weights are normalised to sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, points: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(invalid(format!("{} values do not form {dim}-dimensional samples", points.len())));
        }
        let n = points.len() / dim;
        let weights = weights.unwrap_or_else(|| vec![1.0; n]);
        if weights.len() != n {
            return Err(invalid(format!("{n} samples but {} weights", weights.len())));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || points.iter().any(|v| !v.is_finite()) {
            return Err(invalid("samples and weights must be finite, weights non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("sample weights sum to zero"));
        }
        Ok(Samples { dim, points, weights: weights.iter().map(|w| w / total).collect() })
    }

    /// One sample per line, comma separated; with `weighted` the last column
    /// is the weight. Blank lines and `#` comments are skipped.
    pub fn from_csv(text: &str, weighted: bool) -> Result<Self> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut dim = None;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| invalid(format!("line {}: {e}", no + 1))))
                .collect::<Result<Vec<f64>>>()?;
            if weighted {
                weights.push(vals.pop().ok_or_else(|| invalid(format!("line {}: missing weight", no + 1)))?);
            }
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(invalid(format!("line {}: expected {d} values, got {}", no + 1, vals.len())))
                }
                _ => {}
            }
            points.extend(vals);
        }
        Samples::new(dim.unwrap_or(0), points, weighted.then_some(weights))
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kraft sum of a codelength list.
pub fn kraft_sum(lengths: &[u32]) -> f64 {
    lengths.iter().map(|&l| 2f64.powi(-(l as i32))).sum()
}

pub fn check_kraft(lengths: &[u32]) -> Result<()> {
    let s = kraft_sum(lengths);
    if lengths.is_empty() || s > 1.0 + 1e-12 {
        return Err(Error::Kraft(s));
    }
    Ok(())
}

/// Reproductions, per-cell codelengths (integers for a codelength-constrained
/// codec, ideal lengths for ECVQ) and the multiplier. The encoder is implied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VqCodec {
    pub dim: usize,
    pub reproductions: Vec<f64>,
    pub codelengths: Vec<f64>,
    pub lambda: f64,
}

impl VqCodec {
    pub fn k(&self) -> usize {
        self.codelengths.len()
    }

    pub fn reproduction(&self, k: usize) -> &[f64] {
        &self.reproductions[k * self.dim..(k + 1) * self.dim]
    }

    /// `(cell, cost)` minimising `|x - beta_k|^2 + lambda len_k`; lowest index on ties.
    pub fn encode(&self, x: &[f64]) -> (usize, f64) {
        nearest(x, &self.reproductions, &self.codelengths, self.lambda, self.dim)
    }

    /// `(D, R, J)` of the implied encoder on `samples`.
    pub fn evaluate(&self, samples: &Samples) -> (f64, f64, f64) {
        let (mut d, mut r) = (0.0, 0.0);
        for i in 0..samples.len() {
            let x = samples.point(i);
            let (k, _) = self.encode(x);
            d += samples.weights[i] * sq_dist(x, self.reproduction(k));
            r += samples.weights[i] * self.codelengths[k];
        }
        (d, r, d + self.lambda * r)
    }
}

fn nearest(x: &[f64], beta: &[f64], lengths: &[f64], lambda: f64, dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, len) in lengths.iter().enumerate() {
        if !len.is_finite() {
            continue;
        }
        let cost = sq_dist(x, &beta[k * dim..(k + 1) * dim]) + lambda * len;
        if cost < best.1 {
            best = (k, cost);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignStatus {
    Converged,
    CapReached,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterStats {
    pub d: f64,
    pub r: f64,
    pub j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignReport {
    pub iterations: Vec<IterStats>,
    pub status: DesignStatus,
    /// `permutation[k]` is the index into the supplied codelength list used by cell `k`.
    pub permutation: Vec<usize>,
    pub warnings: Vec<String>,
}

impl DesignReport {
    pub fn final_j(&self) -> f64 {
        self.iterations.last().map_or(f64::INFINITY, |s| s.j)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Reproductions at `k` distinct samples drawn with this seed.
    Samples { seed: u64 },
    /// Explicit `K x dim` reproductions.
    Given(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub lambda: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_cap")]
    pub max_iters: usize,
}

fn default_eps() -> f64 {
    1e-9
}

fn default_cap() -> usize {
    10_000
}

impl DesignConfig {
    pub fn new(lambda: f64) -> Self {
        DesignConfig { lambda, eps: default_eps(), max_iters: default_cap() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.eps > 0.0) {
            return Err(invalid(format!("convergence threshold must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

enum LengthRule<'a> {
    /// Re-use the sorted multiset: `sorted[i]` goes to the i-th most probable cell.
    Constrained { sorted: &'a [(u32, usize)] },
    /// `-log2 p(k)`, infinite for empty cells.
    Ideal,
    /// Lengths never change.
    Fixed,
}

fn initial_reproductions(samples: &Samples, k: usize, init: &Init) -> Result<Vec<f64>> {
    match init {
        Init::Given(beta) => {
            if beta.len() != k * samples.dim {
                return Err(invalid(format!("initial codebook needs {} values, got {}", k * samples.dim, beta.len())));
            }
            Ok(beta.clone())
        }
        Init::Samples { seed } => {
            let n = samples.len();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut picks = sample_indices(&mut rng, n, k.min(n)).into_vec();
            while picks.len() < k {
                picks.push(picks[picks.len() % n]);
            }
            Ok(picks.iter().flat_map(|&i| samples.point(i).to_vec()).collect())
        }
    }
}

/// Sample-parallel encode with results in sample order.
fn encode_all(samples: &Samples, beta: &[f64], lengths: &[f64], lambda: f64) -> Vec<(usize, f64)> {
    (0..samples.len()).into_par_iter().map(|i| nearest(samples.point(i), beta, lengths, lambda, samples.dim)).collect()
}

fn lloyd(
    samples: &Samples,
    mut beta: Vec<f64>,
    mut lengths: Vec<f64>,
    rule: LengthRule<'_>,
    cfg: &DesignConfig,
) -> (VqCodec, DesignReport) {
    let (dim, k, n) = (samples.dim, lengths.len(), samples.len());
    let mut iterations: Vec<IterStats> = Vec::new();
    let mut permutation: Vec<usize> = match &rule {
        LengthRule::Constrained { sorted } => {
            // Cell k starts with the k-th supplied length.
            let mut p = vec![0; k];
            for &(_, orig) in sorted.iter() {
                p[orig] = orig;
            }
            p
        }
        _ => (0..k).collect(),
    };
    let mut status = DesignStatus::CapReached;
    let mut prev_j = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let assign = encode_all(samples, &beta, &lengths, cfg.lambda);
        let mut mass = vec![0.0; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            mass[c] += samples.weights[i];
        }
        match &rule {
            LengthRule::Constrained { sorted } => {
                // Most probable first; lowest index on ties.
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
                for (rank, &cell) in order.iter().enumerate() {
                    lengths[cell] = sorted[rank].0 as f64;
                    permutation[cell] = sorted[rank].1;
                }
            }
            LengthRule::Ideal => {
                for (len, &p) in lengths.iter_mut().zip(&mass) {
                    *len = if p > 0.0 { -p.log2() } else { f64::INFINITY };
                }
            }
            LengthRule::Fixed => {}
        }
        let mut sums = vec![0.0; k * dim];
        for (i, &(c, _)) in assign.iter().enumerate() {
            let w = samples.weights[i];
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(samples.point(i)) {
                *s += w * x;
            }
        }
        for c in 0..k {
            if mass[c] > 0.0 {
                for j in 0..dim {
                    beta[c * dim + j] = sums[c * dim + j] / mass[c];
                }
            }
        }
        let mut contrib: Vec<(f64, usize)> = assign
            .iter()
            .enumerate()
            .map(|(i, &(c, _))| (sq_dist(samples.point(i), &beta[c * dim..(c + 1) * dim]) + cfg.lambda * lengths[c], i))
            .collect();
        let (mut d, mut r) = (0.0, 0.0);
        for (i, &(c, _)) in assign.iter().enumerate() {
            d += samples.weights[i] * sq_dist(samples.point(i), &beta[c * dim..(c + 1) * dim]);
            r += samples.weights[i] * lengths[c];
        }
        // Reseed empty cells that can still be used at the worst-served samples.
        let empty: Vec<usize> = (0..k).filter(|&c| mass[c] == 0.0 && lengths[c].is_finite()).collect();
        if !empty.is_empty() {
            contrib.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (slot, &c) in empty.iter().enumerate() {
                let i = contrib[slot % n].1;
                beta[c * dim..(c + 1) * dim].copy_from_slice(samples.point(i));
            }
        }
        let j = d + cfg.lambda * r;
        iterations.push(IterStats { d, r, j });
        let improving = if j > 0.0 { (prev_j - j) / j > cfg.eps } else { false };
        prev_j = j;
        if !improving {
            status = DesignStatus::Converged;
            break;
        }
    }
    let codec = VqCodec { dim, reproductions: beta, codelengths: lengths, lambda: cfg.lambda };
    (codec, DesignReport { iterations, status, permutation, warnings: Vec::new() })
}

fn size_warning(samples: &Samples, k: usize) -> Vec<String> {
    if k > samples.len() {
        vec![format!("{k} cells for {} samples: at most {} cells can be non-empty", samples.len(), samples.len())]
    } else {
        Vec::new()
    }
}

/// Codelength-constrained design: every iteration reassigns the supplied
/// codelength multiset to cells in order of decreasing probability.
pub fn design_ccvq(samples: &Samples, codelengths: &[u32], cfg: &DesignConfig, init: &Init) -> Result<(VqCodec, DesignReport)> {
    cfg.validate()?;
    check_kraft(codelengths)?;
    let k = codelengths.len();
    let beta = initial_reproductions(samples, k, init)?;
    let mut sorted: Vec<(u32, usize)> = codelengths.iter().copied().zip(0..).collect();
    sorted.sort();
    let lengths = codelengths.iter().map(|&l| l as f64).collect();
    let (codec, mut report) = lloyd(samples, beta, lengths, LengthRule::Constrained { sorted: &sorted }, cfg);
    report.warnings = size_warning(samples, k);
    Ok((codec, report))
}

/// Best of `starts` seeded runs of [`design_ccvq`].
pub fn design_ccvq_multistart(
    samples: &Samples,
    codelengths: &[u32],
    cfg: &DesignConfig,
    starts: usize,
    seed: u64,
) -> Result<(VqCodec, DesignReport)> {
    let runs = (0..starts.max(1) as u64)
        .map(|s| design_ccvq(samples, codelengths, cfg, &Init::Samples { seed: seed.wrapping_add(s) }))
        .collect::<Result<Vec<_>>>()?;
    Ok(runs.into_iter().min_by(|a, b| a.1.final_j().total_cmp(&b.1.final_j())).expect("at least one start"))
}

/// Entropy-constrained design with ideal codelengths `-log2 p(k)`.
/// `lengths` seeds the first encoding step (uniform `log2 K` when `None`).
pub fn design_ecvq(
    samples: &Samples,
    k: usize,
    cfg: &DesignConfig,
    init: &Init,
    lengths: Option<Vec<f64>>,
) -> Result<(VqCodec, DesignReport)> {
    cfg.validate()?;
    if k == 0 {
        return Err(invalid("need at least one cell"));
    }
    let beta = initial_reproductions(samples, k, init)?;
    let lengths = lengths.unwrap_or_else(|| vec![(k as f64).log2(); k]);
    if lengths.len() != k {
        return Err(invalid(format!("{k} cells but {} initial lengths", lengths.len())));
    }
    let (codec, mut report) = lloyd(samples, beta, lengths, LengthRule::Ideal, cfg);
    report.warnings = size_warning(samples, k);
    Ok((codec, report))
}

/// `D(p || q)` in bits with `q(k) = 2^-len[perm[k]]`.
pub fn rate_penalty(p: &[f64], codelengths: &[u32], perm: &[usize]) -> Result<f64> {
    check_kraft(codelengths)?;
    if p.len() != perm.len() || perm.len() != codelengths.len() {
        return Err(invalid("distribution, permutation and codelengths differ in size"));
    }
    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < 0.0) {
        return Err(invalid("p is not a probability distribution"));
    }
    Ok(p.iter()
        .zip(perm)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &j)| pk * (pk.log2() + codelengths[j] as f64))
        .sum())
}

/// Permutation giving the shortest lengths to the most probable cells, and
/// its expected rate `sum p(k) len[perm[k]]`.
pub fn best_permutation(p: &[f64], codelengths: &[u32]) -> (Vec<usize>, f64) {
    let mut cells: Vec<usize> = (0..p.len()).collect();
    cells.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut lens: Vec<usize> = (0..codelengths.len()).collect();
    lens.sort_by_key(|&j| (codelengths[j], j));
    let mut perm = vec![0; p.len()];
    for (&c, &j) in cells.iter().zip(&lens) {
        perm[c] = j;
    }
    let rate = p.iter().zip(&perm).map(|(&pk, &j)| pk * codelengths[j] as f64).sum();
    (perm, rate)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

pub const ORACLE_STARTS: u64 = 16;

/// Exhaustive search for tiny instances: every assignment of the supplied
/// lengths to cells, each refined by fixed-length Lloyd iterations from
/// [`ORACLE_STARTS`] seeded starts. Returns the best codec and its Lagrangian.
pub fn brute_force_oracle(samples: &Samples, codelengths: &[u32], cfg: &DesignConfig) -> Result<(VqCodec, f64)> {
    cfg.validate()?;
    check_kraft(codelengths)?;
    let k = codelengths.len();
    if k > 4 || samples.len() > 64 {
        return Err(invalid(format!("oracle is limited to K <= 4 and 64 samples (got K = {k}, {} samples)", samples.len())));
    }
    let mut best: Option<(VqCodec, f64)> = None;
    for perm in permutations(k) {
        let lengths: Vec<f64> = perm.iter().map(|&j| codelengths[j] as f64).collect();
        for seed in 0..ORACLE_STARTS {
            let beta = initial_reproductions(samples, k, &Init::Samples { seed })?;
            let (codec, report) = lloyd(samples, beta, lengths.clone(), LengthRule::Fixed, cfg);
            let j = report.final_j();
            if best.as_ref().is_none_or(|b| j < b.1) {
                best = Some((codec, j));
            }
        }
    }
    Ok(best.expect("at least one permutation"))
}
