//! Gradient descent with halving backtracking, shared by the inner latent
//! fit of the training losses and by every editing job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagekit::Image;

/// How the first trial step of each iteration is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StepRule {
    /// Same trial step every iteration.
    Fixed { step: f64 },
    /// `relaxation * (f - lower_bound) / |g|^2`, the Polyak step for
    /// objectives with a known lower bound. Relaxations in (1, 2) help on
    /// sharp nonsmooth objectives such as L1 residuals.
    Polyak { lower_bound: f64, relaxation: f64 },
    /// Adam moments on top of `step`; no monotonicity guarantee, so no
    /// backtracking either.
    Adam { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub rule: StepRule,
    /// Halvings tried before an iteration gives up and the run stops.
    pub max_halvings: usize,
    /// When false the first trial step is always taken and the result
    /// carries the best iterate seen.
    pub backtrack: bool,
}

impl DescentConfig {
    pub fn fixed(step: f64) -> Self {
        DescentConfig { rule: StepRule::Fixed { step }, max_halvings: 40, backtrack: true }
    }

    pub fn polyak(lower_bound: f64, relaxation: f64) -> Self {
        DescentConfig { rule: StepRule::Polyak { lower_bound, relaxation }, max_halvings: 40, backtrack: true }
    }

    /// Default for L1 latent fits: relaxed Polyak with backtracking.
    pub fn map_default() -> Self {
        Self::polyak(0.0, 1.3)
    }

    /// Relaxed Polyak steps without backtracking.
    pub fn polyak_relaxed(lower_bound: f64, relaxation: f64) -> Self {
        DescentConfig { rule: StepRule::Polyak { lower_bound, relaxation }, max_halvings: 0, backtrack: false }
    }

    pub fn adam(step: f64) -> Self {
        DescentConfig { rule: StepRule::Adam { step }, max_halvings: 0, backtrack: false }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.rule {
            StepRule::Fixed { step } | StepRule::Adam { step } => step.is_finite() && step > 0.0,
            StepRule::Polyak { lower_bound, relaxation } => lower_bound.is_finite() && relaxation > 0.0 && relaxation < 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("bad step rule {:?}", self.rule)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentResult {
    pub x: Image<f64>,
    /// Objective at the start, then after every accepted step. Without
    /// backtracking the trace may go up; `x` is still the best iterate.
    pub values: Vec<f64>,
    pub iterations: usize,
    /// True when an iteration found no acceptable step or a zero gradient.
    pub stalled: bool,
}

impl DescentResult {
    pub fn accepted_steps(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    /// Objective at the returned iterate, the lowest seen.
    pub fn final_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Minimizes `f` starting from `x0` for at most `iters` iterations.
///
/// `f` returns the objective and its gradient. When `mask` is given the
/// gradient is multiplied by it before every step, so samples with zero
/// weight never move.
pub fn descend<F>(x0: Image<f64>, mask: Option<&Image<f64>>, iters: usize, cfg: &DescentConfig, f: F) -> Result<DescentResult>
where
    F: FnMut(&Image<f64>) -> Result<(f64, Image<f64>)>,
{
    descend_observed(x0, mask, iters, cfg, f, |_, _| {})
}

/// [`descend`] that calls `on_accept(iteration, value)` after every accepted
/// step.
pub fn descend_observed<F, O>(
    x0: Image<f64>,
    mask: Option<&Image<f64>>,
    iters: usize,
    cfg: &DescentConfig,
    mut f: F,
    mut on_accept: O,
) -> Result<DescentResult>
where
    F: FnMut(&Image<f64>) -> Result<(f64, Image<f64>)>,
    O: FnMut(usize, f64),
{
    if let Some(m) = mask {
        x0.check_same_dims(m, "descent mask")?;
    }
    let (mut fx, mut g) = f(&x0)?;
    if !fx.is_finite() {
        return Err(Error::InvalidParam(format!("objective is {fx} at the start")));
    }
    let mut x = x0;
    let mut values = vec![fx];
    let mut best: Option<(f64, Image<f64>)> = None;
    let mut stalled = false;
    let mut iterations = 0;
    let (mut m1, mut m2) = (Image::zeros(x.width(), x.height(), x.channels()), Image::zeros(x.width(), x.height(), x.channels()));
    while iterations < iters {
        iterations += 1;
        if let Some(m) = mask {
            g = g.zip_map(m, |a, b| a * b)?;
        }
        let gn = g.norm_sq();
        if gn == 0.0 {
            stalled = true;
            break;
        }
        let (dir, mut t) = match cfg.rule {
            StepRule::Fixed { step } => (None, step),
            StepRule::Polyak { lower_bound, relaxation } => (None, relaxation * (fx - lower_bound).max(0.0) / gn),
            StepRule::Adam { step } => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                m1 = m1.zip_map(&g, |m, gg| b1 * m + (1.0 - b1) * gg)?;
                m2 = m2.zip_map(&g, |v, gg| b2 * v + (1.0 - b2) * gg * gg)?;
                let c1 = 1.0 - b1.powi(iterations as i32);
                let c2 = 1.0 - b2.powi(iterations as i32);
                (Some(m1.zip_map(&m2, |m, v| (m / c1) / ((v / c2).sqrt() + eps))?), step)
            }
        };
        let dir = dir.as_ref().unwrap_or(&g);
        let mut accepted = None;
        let tries = if cfg.backtrack { cfg.max_halvings + 1 } else { 1 };
        for _ in 0..tries {
            if t <= 0.0 {
                break;
            }
            let mut trial = x.clone();
            trial.axpy(-t, dir)?;
            let (ft, gt) = f(&trial)?;
            if !ft.is_finite() {
                break;
            }
            if !cfg.backtrack || ft <= fx {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, ft, gt)) = accepted else {
            stalled = true;
            break;
        };
        if !cfg.backtrack && ft > fx && best.as_ref().map_or(true, |(bv, _)| fx < *bv) {
            best = Some((fx, x.clone()));
        }
        x = trial;
        fx = ft;
        g = gt;
        values.push(fx);
        on_accept(iterations, fx);
    }
    if let Some((bv, bx)) = best {
        if bv < fx {
            x = bx;
        }
    }
    Ok(DescentResult { x, values, iterations, stalled })
}
