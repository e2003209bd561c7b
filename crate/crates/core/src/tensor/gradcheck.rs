//! Central finite-difference checks of analytic gradients.
//!
//! Each trial draws a random direction `v` over all inputs and compares the
//! analytic directional derivative `<grad f, v>` with
//! `(f(x + h v) - f(x - h v)) / 2h`. The perturbed evaluations replay the
//! stop-gradient constants recorded at `x`; a trial whose stencil straddles a
//! kink (a ReLU or |x| sign change) is redrawn, or optionally evaluated on
//! the recorded branch.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{NodeId, Tape, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub trials: usize,
    pub step: f64,
    /// Redraw budget for directions that cross a kink.
    pub max_redraws: usize,
    /// Evaluate the perturbed points on the recorded branches of piecewise
    /// ops instead of redrawing directions that cross a kink. For large
    /// graphs where almost every direction crosses some ReLU.
    pub freeze_kinks: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { trials: 100, step: 1e-4, max_redraws: 1000, freeze_kinks: false }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub redrawn: usize,
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale.max(1e-10)
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F, tape: &mut Tape<f64>) -> Result<(Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(invalid("gradient check needs a scalar function"));
    }
    Ok((ids, root))
}

pub fn check_gradients<F, R>(
    inputs: &[Tensor<f64>],
    f: F,
    cfg: &GradCheck,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
    R: Rng,
{
    let mut base = Tape::recording();
    let (ids, root) = evaluate(inputs, &f, &mut base)?;
    base.backward(root)?;
    let grads: Vec<Tensor<f64>> = ids.iter().map(|&id| base.grad_tensor(id)).collect();
    let log = base.take_log();

    let h = cfg.step;
    let mut errors = Vec::with_capacity(cfg.trials);
    let mut redrawn = 0;
    while errors.len() < cfg.trials {
        let direction: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let norm = direction.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(invalid("gradient check over empty inputs"));
        }
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .zip(&direction)
                .map(|(t, d)| {
                    let data = t.data().iter().zip(d).map(|(&x, &v)| x + sign * h * v / norm).collect();
                    Tensor::from_vec(t.shape(), data).expect("same shape")
                })
                .collect()
        };
        let replay = |log: &super::StopGradLog<f64>| {
            if cfg.freeze_kinks {
                Tape::replaying_frozen(log.clone())
            } else {
                Tape::replaying(log.clone())
            }
        };
        let mut plus = replay(&log);
        let (_, rp) = evaluate(&shifted(1.0), &f, &mut plus)?;
        let mut minus = replay(&log);
        let (_, rm) = evaluate(&shifted(-1.0), &f, &mut minus)?;
        if plus.kink_crossed() || minus.kink_crossed() {
            redrawn += 1;
            if redrawn > cfg.max_redraws {
                return Err(invalid("gradient check: too many directions cross a kink"));
            }
            continue;
        }
        let numeric = (plus.value(rp).item() - minus.value(rm).item()) / (2.0 * h);
        let analytic: f64 = grads
            .iter()
            .zip(&direction)
            .map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / norm;
        errors.push(relative_error(analytic, numeric));
    }
    let max_rel_error = errors.iter().cloned().fold(0.0, f64::max);
    let mean_rel_error = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok(GradCheckReport { trials: errors.len(), max_rel_error, mean_rel_error, redrawn })
}

