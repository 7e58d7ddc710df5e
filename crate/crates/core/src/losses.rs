//! Training losses: range, structure tensor, latent-fit and a toy WGAN-GP
//! with a linear critic.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cem::CemOperator;
use crate::diffengine::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::generator::Parameterization;
use crate::imagekit::{BoundaryMode, Image, RegionMask};
use crate::kernel::Kernel;
use crate::optim::{descend, DescentConfig, DescentResult};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Floor for the normalization divisor.
pub const NORMALIZE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub range: f64,
    pub structure: f64,
    pub map: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { range: 5000.0, structure: 1.0, map: 100.0, gp: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.range, self.structure, self.map, self.gp];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParam(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// `(1/N) * sum |x - clip(x)|`
pub fn range_loss(x: &Image<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let excess: f64 = x.data().iter().map(|&v| (v - v.clamp(0.0, 1.0)).abs()).sum();
    excess / x.len() as f64
}

pub fn range_loss_on_tape(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let c = tape.clip(x)?;
    let d = tape.sub(x, c)?;
    let a = tape.abs(d)?;
    tape.reduce_mean(a)
}

/// Symmetric 2x2 tensor `[[s11, s12], [s12, s22]]`; index 1 is horizontal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructureTensor {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl StructureTensor {
    pub fn new(s11: f64, s12: f64, s22: f64) -> Self {
        StructureTensor { s11, s12, s22 }
    }

    pub fn entries(&self) -> [f64; 3] {
        [self.s11, self.s12, self.s22]
    }

    pub fn from_entries(e: [f64; 3]) -> Self {
        StructureTensor::new(e[0], e[1], e[2])
    }

    pub fn scaled(&self, s: f64) -> Self {
        StructureTensor::new(self.s11 * s, self.s12 * s, self.s22 * s)
    }

    pub fn trace(&self) -> f64 {
        self.s11 + self.s22
    }

    /// Eigenvalues, largest first.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let m = 0.5 * self.trace();
        let r = (0.25 * (self.s11 - self.s22).powi(2) + self.s12 * self.s12).sqrt();
        (m + r, m - r)
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.eigenvalues().1 >= -tol
    }

    /// Angle of the dominant eigenvector in `(-pi/2, pi/2]`, measured from
    /// the horizontal axis towards increasing row index.
    pub fn dominant_angle(&self) -> f64 {
        0.5 * (2.0 * self.s12).atan2(self.s11 - self.s22)
    }

    /// Maps entries of a composed tensor onto the control-signal range:
    /// diagonal `[0, 1] -> [-1, 1]` via `2s - 1`, off-diagonal
    /// `[-1/2, 1/2] -> [-1, 1]` via `2s`.
    pub fn to_control(&self) -> [f64; 3] {
        [2.0 * self.s11 - 1.0, 2.0 * self.s12, 2.0 * self.s22 - 1.0]
    }

    /// Inverse of [`Self::to_control`].
    pub fn from_control(z: [f64; 3]) -> Self {
        StructureTensor::new(0.5 * (z[0] + 1.0), 0.5 * z[1], 0.5 * (z[2] + 1.0))
    }
}

fn luma_weights(channels: usize) -> Result<Vec<f64>> {
    match channels {
        1 => Ok(vec![1.0]),
        3 => Ok(LUMA.to_vec()),
        c => Err(Error::InvalidDims(format!("structure tensor needs 1 or 3 channels, got {c}"))),
    }
}

/// Central differences `(dx, dy)` of the luma plane, replicating edges.
pub fn luma_gradients(x: &Image<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let wts = luma_weights(x.channels())?;
    let (w, h) = (x.width(), x.height());
    let lum: Vec<f64> = (0..w * h)
        .map(|i| wts.iter().enumerate().map(|(c, wt)| wt * x.plane(c)[i]).sum())
        .collect();
    let mut dx = vec![0.0; w * h];
    let mut dy = vec![0.0; w * h];
    for yy in 0..h {
        for xx in 0..w {
            let (l, r) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
            let (u, d) = (yy.saturating_sub(1), (yy + 1).min(h - 1));
            dx[yy * w + xx] = 0.5 * (lum[yy * w + r] - lum[yy * w + l]);
            dy[yy * w + xx] = 0.5 * (lum[d * w + xx] - lum[u * w + xx]);
        }
    }
    Ok((dx, dy))
}

/// Mask-weighted sum of gradient outer products over the luma plane.
pub fn compute_st(x: &Image<f64>, region: &RegionMask) -> Result<StructureTensor> {
    region.check_dims(x.width(), x.height())?;
    if region.is_empty() {
        return Err(Error::EmptyRegion("structure tensor over an empty mask".into()));
    }
    let (dx, dy) = luma_gradients(x)?;
    let mut s = StructureTensor::default();
    for (i, &m) in region.weights().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        s.s11 += m * dx[i] * dx[i];
        s.s12 += m * dx[i] * dy[i];
        s.s22 += m * dy[i] * dy[i];
    }
    Ok(s)
}

/// The three tensor entries of node `x`, recorded on the tape.
pub fn structure_tensor_on_tape(tape: &mut Tape, x: NodeId, region: &RegionMask) -> Result<[NodeId; 3]> {
    let (w, h, c) = tape.value(x).dims();
    region.check_dims(w, h)?;
    if region.is_empty() {
        return Err(Error::EmptyRegion("structure tensor over an empty mask".into()));
    }
    let wts = luma_weights(c)?;
    let lum = if c == 1 {
        x
    } else {
        let full = crate::imagekit::Rect::new(0, 0, w, h);
        let mut acc = None;
        for (ch, wt) in wts.iter().enumerate() {
            let s = tape.slice(x, full, ch, ch + 1)?;
            let s = tape.scale(s, *wt)?;
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        acc.expect("three channels")
    };
    let kx = Arc::new(Kernel::new(1, 3, vec![0.5, 0.0, -0.5])?);
    let ky = Arc::new(Kernel::new(3, 1, vec![0.5, 0.0, -0.5])?);
    let gx = tape.conv2d(lum, kx, BoundaryMode::Replicate)?;
    let gy = tape.conv2d(lum, ky, BoundaryMode::Replicate)?;
    let m = tape.constant(Image::from_vec(w, h, 1, region.weights().to_vec())?);
    let mut entry = |a: NodeId, b: NodeId| -> Result<NodeId> {
        let p = tape.mul(a, b)?;
        let p = tape.mul(p, m)?;
        tape.reduce_sum(p)
    };
    Ok([entry(gx, gx)?, entry(gx, gy)?, entry(gy, gy)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    /// Off-diagonal `l1 * l2 * sin(t) cos(t)`.
    #[default]
    Product,
    /// `R diag(l1, l2) R^T`, off-diagonal `(l1 - l2) sin(t) cos(t)`.
    Eigen,
}

/// Desired tensor from two magnitudes and an orientation.
pub fn compose_sd(l1: f64, l2: f64, theta: f64, mode: ComposeMode) -> Result<StructureTensor> {
    let unit = 0.0..=1.0;
    if !unit.contains(&l1) || !unit.contains(&l2) || !(0.0..=TAU).contains(&theta) {
        return Err(Error::InvalidParam(format!(
            "knobs out of range: l1={l1}, l2={l2}, theta={theta}"
        )));
    }
    let (s, c) = theta.sin_cos();
    let off = match mode {
        ComposeMode::Product => l1 * l2 * s * c,
        ComposeMode::Eigen => (l1 - l2) * s * c,
    };
    Ok(StructureTensor::new(l1 * c * c + l2 * s * s, off, l1 * s * s + l2 * c * c))
}

/// `sum_n |dx[n] * dy[n]|` over the luma gradients of `x`, floored.
pub fn normalization_divisor(x: &Image<f64>) -> Result<f64> {
    let (dx, dy) = luma_gradients(x)?;
    let d: f64 = dx.iter().zip(&dy).map(|(a, b)| (a * b).abs()).sum();
    Ok(d.max(NORMALIZE_FLOOR))
}

pub fn normalize_st(s: &StructureTensor, x: &Image<f64>) -> Result<StructureTensor> {
    Ok(s.scaled(normalization_divisor(x)?.recip()))
}

/// Per-entry `(P5, P95)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileCalibration {
    pub s11: [f64; 2],
    pub s12: [f64; 2],
    pub s22: [f64; 2],
}

impl Default for PercentileCalibration {
    /// The identity map of [`adjust_sd`].
    fn default() -> Self {
        PercentileCalibration { s11: [-1.0, 1.0], s12: [-1.0, 1.0], s22: [-1.0, 1.0] }
    }
}

impl PercentileCalibration {
    pub fn entries(&self) -> [[f64; 2]; 3] {
        [self.s11, self.s12, self.s22]
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries().iter().any(|[p5, p95]| !(p5 <= p95)) {
            return Err(Error::Calibration(format!("P5 above P95 in {self:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Calibration(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// `(P95 - P5)/2 * s + (P95 + P5)/2` per entry.
pub fn adjust_sd(sd: &StructureTensor, cal: &PercentileCalibration) -> StructureTensor {
    let e = sd.entries();
    let p = cal.entries();
    StructureTensor::from_entries(std::array::from_fn(|i| {
        let [p5, p95] = p[i];
        (p95 - p5) / 2.0 * e[i] + (p95 + p5) / 2.0
    }))
}

/// The adjusted target for knob values: compose, move to the control range,
/// then stretch onto the calibrated percentiles.
pub fn struct_target(l1: f64, l2: f64, theta: f64, mode: ComposeMode, cal: &PercentileCalibration) -> Result<StructureTensor> {
    let sd = compose_sd(l1, l2, theta, mode)?;
    Ok(adjust_sd(&StructureTensor::from_entries(sd.to_control()), cal))
}

/// `sum |normalized S(x_hat) - target|` over the three unique entries.
pub fn struct_loss_with_target(x_hat: &Image<f64>, x: &Image<f64>, target: &StructureTensor) -> Result<f64> {
    let full = RegionMask::full(x_hat.width(), x_hat.height());
    let s = normalize_st(&compute_st(x_hat, &full)?, x)?;
    Ok(s.entries().iter().zip(target.entries()).map(|(a, b)| (a - b).abs()).sum())
}

pub fn struct_loss(
    x_hat: &Image<f64>,
    x: &Image<f64>,
    l1: f64,
    l2: f64,
    theta: f64,
    mode: ComposeMode,
    cal: &PercentileCalibration,
) -> Result<f64> {
    struct_loss_with_target(x_hat, x, &struct_target(l1, l2, theta, mode, cal)?)
}

pub fn struct_loss_on_tape(tape: &mut Tape, x_hat: NodeId, x: &Image<f64>, target: &StructureTensor) -> Result<NodeId> {
    let (w, h, _) = tape.value(x_hat).dims();
    let entries = structure_tensor_on_tape(tape, x_hat, &RegionMask::full(w, h))?;
    let inv = normalization_divisor(x)?.recip();
    let mut acc: Option<NodeId> = None;
    for (e, t) in entries.iter().zip(target.entries()) {
        let n = tape.scale(*e, inv)?;
        let d = tape.offset(n, -t)?;
        let a = tape.abs(d)?;
        acc = Some(match acc {
            None => a,
            Some(s) => tape.add(s, a)?,
        });
    }
    Ok(acc.expect("three entries"))
}

/// Linear-interpolation percentile of sorted data at `pos = p/100 * (n-1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical `(P5, P95)` of each entry over normalized tensors.
pub fn calibrate_percentiles(samples: &[StructureTensor]) -> Result<PercentileCalibration> {
    if samples.len() < 2 {
        return Err(Error::Calibration(format!("need at least 2 images, got {}", samples.len())));
    }
    let pair = |i: usize| -> [f64; 2] {
        let mut v: Vec<f64> = samples.iter().map(|s| s.entries()[i]).collect();
        v.sort_by(f64::total_cmp);
        [percentile(&v, 5.0), percentile(&v, 95.0)]
    };
    Ok(PercentileCalibration { s11: pair(0), s12: pair(1), s22: pair(2) })
}

/// Normalized full-image tensor of each HR image. With a generator, the
/// tensor is measured on its output for `y = degrade(x)` and a random
/// uniform control signal, and still normalized by `x`.
pub fn calibrate_from_images(
    images: &[Image<f64>],
    generator: Option<(&Parameterization, &Kernel<f64>, usize)>,
    seed: u64,
) -> Result<PercentileCalibration> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(images.len());
    for x in images {
        let measured = match generator {
            None => x.clone(),
            Some((psi, k, factor)) => {
                let op = CemOperator::new(k.clone(), factor, x.width(), x.height(), BoundaryMode::Periodic)?;
                let y = op.degrade(x)?;
                let ch = psi.latent_channels(x.channels());
                let vals: Vec<f64> = (0..ch).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let z = Image::from_fn(x.width(), x.height(), ch, |c, _, _| vals[c]);
                psi.synthesize(&y, &z, &op)?
            }
        };
        let full = RegionMask::full(x.width(), x.height());
        samples.push(normalize_st(&compute_st(&measured, &full)?, x)?);
    }
    calibrate_percentiles(&samples)
}

#[derive(Debug, Clone)]
pub struct MapFit {
    pub z: Image<f64>,
    pub value: f64,
    /// Value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// `mean |x_hat(z) - x|` and its gradient in `z`.
pub fn map_objective(
    psi: &Parameterization,
    y: &Image<f64>,
    x: &Image<f64>,
    op: &Arc<CemOperator<f64>>,
    z: &Image<f64>,
) -> Result<(f64, Image<f64>)> {
    let mut tape = Tape::new();
    let zn = tape.leaf(z.clone());
    let xh = psi.on_tape(&mut tape, y, zn, op)?;
    let xn = tape.constant(x.clone());
    let d = tape.sub(xh, xn)?;
    let a = tape.abs(d)?;
    let r = tape.reduce_mean(a)?;
    tape.backward(r)?;
    let g = tape.grad(zn).cloned().unwrap_or_else(|| Image::zeros(z.width(), z.height(), z.channels()));
    Ok((tape.scalar_value(r), g))
}

/// Inner minimization `min_z mean |psi(y, z) - x|` from `z0`.
pub fn map_loss(
    psi: &Parameterization,
    y: &Image<f64>,
    x: &Image<f64>,
    op: &Arc<CemOperator<f64>>,
    z0: &Image<f64>,
    iters: usize,
    cfg: &DescentConfig,
) -> Result<MapFit> {
    x.check_same_dims(&Image::zeros(op.hr_dims().0, op.hr_dims().1, x.channels()), "ground truth")?;
    cfg.validate()?;
    let r = descend(z0.clone(), None, iters, cfg, |z| map_objective(psi, y, x, op, z))?;
    let value = r.final_value();
    let DescentResult { x: z, values, .. } = r;
    Ok(MapFit { z, value, trace: values })
}

/// `D(x) = <w, x> + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCritic {
    pub w: Image<f64>,
    pub b: f64,
}

impl LinearCritic {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        LinearCritic { w: Image::zeros(width, height, channels), b: 0.0 }
    }

    pub fn score(&self, x: &Image<f64>) -> Result<f64> {
        Ok(self.w.dot(x)? + self.b)
    }

    /// `lambda_gp * (|w| - 1)^2`; the critic's input gradient is `w`
    /// everywhere so the interpolate does not matter.
    pub fn penalty(&self, gp: f64) -> f64 {
        gp * (self.w.norm_sq().sqrt() - 1.0).powi(2)
    }

    /// Gradient of `lossD` in `w`.
    pub fn loss_grad(&self, real: &Image<f64>, fake: &Image<f64>, gp: f64) -> Result<Image<f64>> {
        let mut g = fake.sub(real)?;
        let n = self.w.norm_sq().sqrt();
        if n > 0.0 {
            g.axpy(2.0 * gp * (n - 1.0) / n, &self.w)?;
        }
        Ok(g)
    }
}

/// `(lossD, lossG) = (D(fake) - D(real) + penalty, -D(fake))`.
pub fn critic_losses(critic: &LinearCritic, real: &Image<f64>, fake: &Image<f64>, gp: f64) -> Result<(f64, f64)> {
    let (dr, df) = (critic.score(real)?, critic.score(fake)?);
    Ok((df - dr + critic.penalty(gp), -df))
}

/// Number of consecutive correct batches required.
pub const GATE_WINDOW: usize = 10;

/// True iff the last ten batch outcomes are all correct.
pub fn credibility_gate(history: &[bool]) -> bool {
    history.len() >= GATE_WINDOW && history[history.len() - GATE_WINDOW..].iter().all(|&b| b)
}

/// Rolling record of whether the critic scored real above fake.
#[derive(Debug, Clone, Default)]
pub struct CredibilityGate {
    recent: VecDeque<bool>,
}

impl CredibilityGate {
    pub fn record(&mut self, correct: bool) {
        if self.recent.len() == GATE_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(correct);
    }

    pub fn is_open(&self) -> bool {
        let v: Vec<bool> = self.recent.iter().copied().collect();
        credibility_gate(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv: f64,
    pub range: f64,
    pub structure: f64,
    pub map: f64,
}

/// `adv + w_range * range + w_struct * structure + w_map * map`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.adv + w.range * c.range + w.structure * c.structure + w.map * c.map
}
