//! Interactive exploration sessions: the latent behind the current output,
//! edit jobs that optimize it, knob edits, undo and diversity metrics.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cem::CemOperator;
use crate::diffengine::{NodeId, Tape};
use crate::edit::{diversity_objective, sum_scalars, tv_on_tape, EditJobSpec, JobOptimizer, PreparedObjective, ANCHOR_WEIGHT};
use crate::error::{Error, Result};
use crate::generator::{GeneratorParams, Parameterization};
use crate::imagekit::{load_png, save_png, BoundaryMode, Image, RegionMask};
use crate::kernel::{load_kernel, save_kernel};
use crate::losses::{compose_sd, range_loss_on_tape, ComposeMode, StructureTensor};
use crate::optim::{descend, descend_observed, DescentConfig};

pub const HISTORY_LIMIT: usize = 64;
pub const DEFAULT_TAU: f64 = 0.01;

/// Weight of the out-of-range penalty that keeps diverse alternatives
/// inside `[0, 1]`; it outweighs the per-sample pull of up to 7 rivals.
const ALT_RANGE_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub history_limit: usize,
    /// Weight of the smoothness prior on the nullspace part of a direct
    /// latent. Unused for network sessions.
    pub tau: f64,
    pub compose: ComposeMode,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { history_limit: HISTORY_LIMIT, tau: DEFAULT_TAU, compose: ComposeMode::default() }
    }
}

/// Result of one edit job.
#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub latent: Image<f64>,
    pub x_hat: Image<f64>,
    /// Regularized objective at the start of the job.
    pub initial: f64,
    /// Regularized objective after every accepted step.
    pub trace: Vec<f64>,
    pub stalled: bool,
}

/// Everything a job needs, detached from the session so it can run while
/// the session stays readable.
#[derive(Debug, Clone)]
pub struct EditJob {
    y: Image<f64>,
    op: Arc<CemOperator<f64>>,
    psi: Parameterization,
    latent0: Image<f64>,
    objective: PreparedObjective,
    mask: Image<f64>,
    steps: usize,
    cfg: DescentConfig,
    tau: f64,
}

/// Objective plus, for direct latents, `tau * TV(P_N n)`.
fn regularized(
    tape: &mut Tape,
    psi: &Parameterization,
    y: &Image<f64>,
    op: &Arc<CemOperator<f64>>,
    latent: NodeId,
    objective: &PreparedObjective,
    tau: f64,
) -> Result<NodeId> {
    let x = psi.on_tape(tape, y, latent, op)?;
    let obj = objective.build(tape, x)?;
    if !matches!(psi, Parameterization::Direct) || tau == 0.0 {
        return Ok(obj);
    }
    let pn = tape.cem_linear(latent, op.clone())?;
    let tv = tv_on_tape(tape, pn)?;
    let r = tape.scale(tv, tau)?;
    tape.add(obj, r)
}

fn value_and_grad(
    latent: &Image<f64>,
    build: impl FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<(f64, Image<f64>)> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(latent.clone());
    let root = build(&mut tape, leaf)?;
    tape.backward(root)?;
    let g = tape.grad(leaf).cloned().unwrap_or_else(|| Image::zeros(latent.width(), latent.height(), latent.channels()));
    Ok((tape.scalar_value(root), g))
}

impl EditJob {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Regularized objective at `latent`.
    pub fn objective_at(&self, latent: &Image<f64>) -> Result<f64> {
        Ok(value_and_grad(latent, |t, l| regularized(t, &self.psi, &self.y, &self.op, l, &self.objective, self.tau))?.0)
    }

    /// Runs the descent; `progress(step, value)` fires after every accepted
    /// step.
    pub fn run(&self, progress: impl FnMut(usize, f64)) -> Result<EditOutcome> {
        let f = |n: &Image<f64>| {
            value_and_grad(n, |t, l| regularized(t, &self.psi, &self.y, &self.op, l, &self.objective, self.tau))
        };
        let r = descend_observed(self.latent0.clone(), Some(&self.mask), self.steps, &self.cfg, f, progress)?;
        let x_hat = self.psi.synthesize(&self.y, &r.x, &self.op)?;
        Ok(EditOutcome { initial: r.values[0], trace: r.values[1..].to_vec(), stalled: r.stalled, latent: r.x, x_hat })
    }
}

/// Settings for [`Session::diverse_alternatives`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityOptions {
    pub n: usize,
    pub anchored: bool,
    #[serde(default = "default_alt_steps")]
    pub steps: usize,
    #[serde(default = "default_alt_step")]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Amplitude of the uniform starting perturbation; consecutive pairs get
    /// opposite perturbations.
    #[serde(default = "default_init")]
    pub init_scale: f64,
}

fn default_alt_steps() -> usize {
    20
}

fn default_alt_step() -> f64 {
    0.01
}

fn default_mu() -> f64 {
    ANCHOR_WEIGHT
}

fn default_init() -> f64 {
    0.05
}

impl DiversityOptions {
    pub fn new(n: usize, anchored: bool) -> Self {
        DiversityOptions {
            n,
            anchored,
            steps: default_alt_steps(),
            step_size: default_alt_step(),
            seed: 0,
            mu: default_mu(),
            init_scale: default_init(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alternative {
    pub latent: Image<f64>,
    pub x_hat: Image<f64>,
}

/// One exploration session over a fixed LR input.
#[derive(Debug, Clone)]
pub struct Session {
    y: Image<f64>,
    op: Arc<CemOperator<f64>>,
    psi: Parameterization,
    latent: Image<f64>,
    x_hat: Image<f64>,
    history: VecDeque<Image<f64>>,
    alternatives: Vec<Alternative>,
    busy: bool,
    config: SessionConfig,
}

impl Session {
    /// Starts from the zero latent.
    pub fn new(y: Image<f64>, op: Arc<CemOperator<f64>>, psi: Parameterization, config: SessionConfig) -> Result<Self> {
        let (lw, lh) = op.lr_dims();
        if (y.width(), y.height()) != (lw, lh) {
            return Err(Error::InvalidDims(format!("LR image {}x{} for an operator expecting {lw}x{lh}", y.width(), y.height())));
        }
        if config.history_limit == 0 || !(config.tau >= 0.0) {
            return Err(Error::InvalidParam(format!("bad session config {config:?}")));
        }
        if let Parameterization::Network(p) = &psi {
            if p.factor != op.factor() || p.channels != y.channels() {
                return Err(Error::InvalidParam(format!(
                    "generator is x{} with {} channels, session x{} with {}",
                    p.factor,
                    p.channels,
                    op.factor(),
                    y.channels()
                )));
            }
        }
        let (w, h) = op.hr_dims();
        let latent = Image::zeros(w, h, psi.latent_channels(y.channels()));
        let x_hat = psi.synthesize(&y, &latent, &op)?;
        Ok(Session { y, op, psi, latent, x_hat, history: VecDeque::new(), alternatives: Vec::new(), busy: false, config })
    }

    pub fn y(&self) -> &Image<f64> {
        &self.y
    }

    pub fn op(&self) -> &Arc<CemOperator<f64>> {
        &self.op
    }

    pub fn parameterization(&self) -> &Parameterization {
        &self.psi
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.psi, Parameterization::Direct)
    }

    pub fn latent(&self) -> &Image<f64> {
        &self.latent
    }

    pub fn x_hat(&self) -> &Image<f64> {
        &self.x_hat
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        self.op.hr_dims()
    }

    pub fn alternatives(&self) -> &[Alternative] {
        &self.alternatives
    }

    /// L-infinity and RMS of `degrade(x_hat) - y`.
    pub fn consistency(&self) -> Result<(f64, f64)> {
        self.op.residual(&self.x_hat, &self.y)
    }

    fn install(&mut self, latent: Image<f64>) -> Result<()> {
        let x_hat = self.psi.synthesize(&self.y, &latent, &self.op)?;
        self.latent = latent;
        self.x_hat = x_hat;
        if cfg!(debug_assertions) && self.op.boundary() == BoundaryMode::Periodic {
            let (linf, _) = self.consistency()?;
            debug_assert!(linf <= 1e-6, "inconsistent output, residual {linf}");
        }
        Ok(())
    }

    fn push_history(&mut self) {
        self.history.push_back(self.latent.clone());
        while self.history.len() > self.config.history_limit {
            self.history.pop_front();
        }
    }

    fn ensure_idle(&self) -> Result<()> {
        if self.busy {
            Err(Error::Busy)
        } else {
            Ok(())
        }
    }

    /// Replaces the latent, recording the old one for undo.
    pub fn set_latent(&mut self, latent: Image<f64>) -> Result<()> {
        self.ensure_idle()?;
        latent.check_same_dims(&self.latent, "latent")?;
        self.push_history();
        self.install(latent)
    }

    /// Writes the knob tensor into the control signal inside `region`.
    pub fn set_knobs(&mut self, region: &RegionMask, l1: f64, l2: f64, theta: f64) -> Result<&Image<f64>> {
        self.ensure_idle()?;
        if self.is_direct() {
            return Err(Error::InvalidParam("knobs drive a generator's control signal; this session is direct".into()));
        }
        let (w, h) = self.hr_dims();
        region.check_dims(w, h).map_err(|e| Error::InvalidParam(e.to_string()))?;
        if region.is_empty() {
            return Err(Error::EmptyRegion("knob region".into()));
        }
        let z = compose_sd(l1, l2, theta, self.config.compose)?.to_control();
        let mut latent = self.latent.clone();
        for yy in 0..h {
            for xx in 0..w {
                if region.is_set(xx, yy) {
                    for (c, v) in z.iter().enumerate() {
                        latent.set(c, yy, xx, *v);
                    }
                }
            }
        }
        self.push_history();
        self.install(latent)?;
        Ok(&self.x_hat)
    }

    /// Tensor encoded by the control signal at one pixel.
    pub fn knobs_at(&self, x: usize, y: usize) -> Result<StructureTensor> {
        if self.is_direct() {
            return Err(Error::InvalidParam("direct sessions carry no control signal".into()));
        }
        Ok(StructureTensor::from_control([self.latent.get(0, y, x), self.latent.get(1, y, x), self.latent.get(2, y, x)]))
    }

    pub fn undo(&mut self) -> Result<&Image<f64>> {
        self.ensure_idle()?;
        let prev = self.history.pop_back().ok_or(Error::NothingToUndo)?;
        self.install(prev)?;
        Ok(&self.x_hat)
    }

    /// Marks the session busy, records history and resolves the objective
    /// against the current output.
    pub fn begin_job(&mut self, spec: &EditJobSpec) -> Result<EditJob> {
        self.ensure_idle()?;
        if !(spec.step_size > 0.0 && spec.step_size.is_finite()) {
            return Err(Error::InvalidParam(format!("step size must be positive, got {}", spec.step_size)));
        }
        let (w, h) = self.hr_dims();
        let region = spec.region.to_mask(w, h)?;
        let latent_region = match &spec.latent_region {
            Some(r) => r.to_mask(w, h)?,
            None => region.clone(),
        };
        let objective = PreparedObjective::prepare(&spec.tool, &region, &self.x_hat, &self.op, &self.y)?;
        let c = self.latent.channels();
        let mask = Image::from_fn(w, h, c, |_, yy, xx| latent_region.weight(xx, yy));
        let cfg = match spec.optimizer {
            JobOptimizer::Fixed => DescentConfig::fixed(spec.step_size),
            JobOptimizer::Polyak => DescentConfig::map_default(),
            JobOptimizer::PolyakRelaxed => DescentConfig::polyak_relaxed(0.0, 1.6),
            JobOptimizer::Adam => DescentConfig::adam(spec.step_size),
        };
        let job = EditJob {
            y: self.y.clone(),
            op: self.op.clone(),
            psi: self.psi.clone(),
            latent0: self.latent.clone(),
            objective,
            mask,
            steps: spec.steps,
            cfg,
            tau: self.config.tau,
        };
        self.push_history();
        self.busy = true;
        Ok(job)
    }

    /// Installs a finished job's latent, or drops the history entry of a
    /// failed one. Clears the busy flag either way.
    pub fn finish_job(&mut self, outcome: Result<EditOutcome>) -> Result<EditOutcome> {
        self.busy = false;
        match outcome {
            Ok(o) => {
                self.latent = o.latent.clone();
                self.x_hat = o.x_hat.clone();
                Ok(o)
            }
            Err(e) => {
                self.history.pop_back();
                Err(e)
            }
        }
    }

    /// Runs an edit job to completion.
    pub fn run_edit(&mut self, spec: &EditJobSpec) -> Result<EditOutcome> {
        let job = self.begin_job(spec)?;
        let out = job.run(|_, _| {});
        self.finish_job(out)
    }

    /// Optimizes `n` perturbed copies of the latent jointly for mutual L1
    /// distance. The results are kept for [`Self::adopt`].
    pub fn diverse_alternatives(&mut self, opts: &DiversityOptions) -> Result<&[Alternative]> {
        self.ensure_idle()?;
        if !(2..=8).contains(&opts.n) {
            return Err(Error::InvalidParam(format!("alternatives: n must be in [2, 8], got {}", opts.n)));
        }
        if !(opts.step_size > 0.0) || !(opts.mu >= 0.0) || !(opts.init_scale >= 0.0) {
            return Err(Error::InvalidParam(format!("bad alternative options {opts:?}")));
        }
        let (w, h, c) = self.latent.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut starts = Vec::with_capacity(opts.n);
        let mut last = Image::zeros(w, h, c);
        for i in 0..opts.n {
            let pert = if i % 2 == 1 {
                last.scale(-1.0)
            } else {
                Image::from_fn(w, h, c, |_, _, _| rng.gen_range(-opts.init_scale..=opts.init_scale))
            };
            starts.push(self.latent.add(&pert)?);
            last = pert;
        }
        let refs: Vec<&Image<f64>> = starts.iter().collect();
        let stacked = Image::concat_channels(&refs)?;
        let anchor = opts.anchored.then(|| (self.x_hat.clone(), opts.mu));
        let (psi, y, op, tau) = (&self.psi, &self.y, &self.op, self.config.tau);
        let build = |tape: &mut Tape, all: NodeId| -> Result<NodeId> {
            let mut outs = Vec::with_capacity(opts.n);
            let mut extra = Vec::new();
            for i in 0..opts.n {
                let li = tape.slice(all, crate::imagekit::Rect::new(0, 0, w, h), i * c, (i + 1) * c)?;
                let xi = psi.on_tape(tape, y, li, op)?;
                let r = range_loss_on_tape(tape, xi)?;
                extra.push(tape.scale(r, ALT_RANGE_WEIGHT * (w * h * c) as f64)?);
                if matches!(psi, Parameterization::Direct) && tau > 0.0 {
                    let pn = tape.cem_linear(li, op.clone())?;
                    let tv = tv_on_tape(tape, pn)?;
                    extra.push(tape.scale(tv, tau)?);
                }
                outs.push(xi);
            }
            let d = diversity_objective(tape, &outs, anchor.as_ref().map(|(a, m)| (a, *m)))?;
            extra.push(d);
            sum_scalars(tape, &extra)
        };
        let cfg = DescentConfig::fixed(opts.step_size);
        let r = descend(stacked, None, opts.steps, &cfg, |x| value_and_grad(x, |t, l| build(t, l)))?;
        let mut alts = Vec::with_capacity(opts.n);
        for i in 0..opts.n {
            let latent = Image::from_fn(w, h, c, |ch, yy, xx| r.x.get(i * c + ch, yy, xx));
            let x_hat = self.psi.synthesize(&self.y, &latent, &self.op)?;
            alts.push(Alternative { latent, x_hat });
        }
        self.alternatives = alts;
        Ok(&self.alternatives)
    }

    /// Makes alternative `index` the current state.
    pub fn adopt(&mut self, index: usize) -> Result<&Image<f64>> {
        let alt = self
            .alternatives
            .get(index)
            .ok_or_else(|| Error::InvalidParam(format!("no alternative {index}")))?
            .latent
            .clone();
        self.set_latent(alt)?;
        Ok(&self.x_hat)
    }

    /// Writes `y.png`, `y.bin`, `kernel.json`, `latent.bin`, `xhat.png` and
    /// `session.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        save_png(&self.y, dir.join("y.png"))?;
        save_raster(&self.y, dir.join("y.bin"))?;
        save_kernel(self.op.kernel(), dir.join("kernel.json"))?;
        save_raster(&self.latent, dir.join("latent.bin"))?;
        save_png(&self.x_hat, dir.join("xhat.png"))?;
        let (w, h) = self.hr_dims();
        let meta = SessionFile {
            factor: self.op.factor(),
            hr_width: w,
            hr_height: h,
            boundary: self.op.boundary(),
            generator: match &self.psi {
                Parameterization::Network(p) => Some((**p).clone()),
                Parameterization::Direct => None,
            },
            config: self.config,
        };
        fs::write(dir.join("session.json"), serde_json::to_string_pretty(&meta).expect("session metadata serializes"))?;
        Ok(())
    }

    /// Reads a directory written by [`Self::export`]. `y.bin` is preferred
    /// over `y.png` when present; the latent is restored when present.
    pub fn import(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("session.json"))?;
        let meta: SessionFile =
            serde_json::from_str(&text).map_err(|e| Error::InvalidParam(format!("session.json: {e}")))?;
        let y = if dir.join("y.bin").exists() { load_raster(dir.join("y.bin"))? } else { load_png(dir.join("y.png"))? };
        let kernel = load_kernel(dir.join("kernel.json"), false)?;
        let op = Arc::new(CemOperator::new(kernel, meta.factor, meta.hr_width, meta.hr_height, meta.boundary)?);
        let psi = match meta.generator {
            Some(p) => {
                p.validate()?;
                Parameterization::Network(Arc::new(p))
            }
            None => Parameterization::Direct,
        };
        let mut s = Session::new(y, op, psi, meta.config)?;
        let lp = dir.join("latent.bin");
        if lp.exists() {
            let latent = load_raster(lp)?;
            latent.check_same_dims(&s.latent, "stored latent")?;
            s.install(latent)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionFile {
    factor: usize,
    hr_width: usize,
    hr_height: usize,
    boundary: BoundaryMode,
    generator: Option<GeneratorParams>,
    config: SessionConfig,
}

const RASTER_MAGIC: &[u8; 4] = b"CEMZ";

/// `CEMZ`, then width, height and channels as little-endian `u32`, then the
/// planar samples as little-endian `f64`.
pub fn encode_raster(img: &Image<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * img.len());
    out.extend_from_slice(RASTER_MAGIC);
    for d in [img.width(), img.height(), img.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<Image<f64>> {
    if bytes.len() < 16 || &bytes[..4] != RASTER_MAGIC {
        return Err(Error::Io("not a CEMZ raster".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 8 * w * h * c {
        return Err(Error::Io(format!("CEMZ raster {w}x{h}x{c} has {} payload bytes", body.len())));
    }
    let data = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Image::from_vec(w, h, c, data)
}

pub fn save_raster(img: &Image<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_raster(img))?;
    Ok(())
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Image<f64>> {
    decode_raster(&fs::read(path)?)
}

/// Spread of a set of outputs after projection onto the nullspace, on the
/// 0-255 scale, with optional errors against a reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    /// Mean over samples of the population standard deviation across
    /// outputs.
    pub sigma: f64,
    pub rmse: Vec<f64>,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
}

pub fn diversity_metric(outputs: &[Image<f64>], op: &CemOperator<f64>, reference: Option<&Image<f64>>) -> Result<DiversityReport> {
    if outputs.len() < 2 {
        return Err(Error::InvalidParam(format!("diversity needs at least 2 outputs, got {}", outputs.len())));
    }
    for o in &outputs[1..] {
        o.check_same_dims(&outputs[0], "diversity outputs")?;
    }
    let proj = outputs.iter().map(|o| op.project_nullspace(o)).collect::<Result<Vec<_>>>()?;
    let n = proj.len() as f64;
    let len = proj[0].len();
    let mut acc = 0.0;
    for i in 0..len {
        // offsets from the first output, so identical outputs give exactly zero
        let base = proj[0].data()[i];
        let m = proj.iter().map(|p| p.data()[i] - base).sum::<f64>() / n;
        let var = proj.iter().map(|p| (p.data()[i] - base - m).powi(2)).sum::<f64>() / n;
        acc += var.sqrt();
    }
    let sigma = 255.0 * acc / len as f64;
    let (rmse_v, rmse_mean, rmse_std) = match reference {
        None => (Vec::new(), None, None),
        Some(r) => {
            let v = outputs.iter().map(|o| rmse(o, r)).collect::<Result<Vec<_>>>()?;
            let m = v.iter().sum::<f64>() / n;
            let s = (v.iter().map(|e| (e - m).powi(2)).sum::<f64>() / n).sqrt();
            (v, Some(m), Some(s))
        }
    };
    Ok(DiversityReport { sigma, rmse: rmse_v, rmse_mean, rmse_std })
}

/// Root mean squared error on the 0-255 scale.
pub fn rmse(x_hat: &Image<f64>, x: &Image<f64>) -> Result<f64> {
    Ok(255.0 * x_hat.rms_diff(x)?)
}

/// `20 log10(255 / rmse)`; `+inf` for identical images.
pub fn psnr(x_hat: &Image<f64>, x: &Image<f64>) -> Result<f64> {
    let e = rmse(x_hat, x)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 20.0 * (255.0 / e).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::{PeriodAxis, RegionSpec, ToolSpec};
    use crate::imagekit::Rect;
    use crate::kernel::bicubic_kernel;
    use crate::oracle::DenseOracle;
    use std::f64::consts::FRAC_PI_4;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn op(n: usize) -> Arc<CemOperator<f64>> {
        Arc::new(CemOperator::new(bicubic_kernel(2), 2, n, n, BoundaryMode::Periodic).unwrap())
    }

    fn direct(n: usize, seed: u64) -> Session {
        Session::new(random_image(n / 2, n / 2, 3, seed), op(n), Parameterization::Direct, SessionConfig::default()).unwrap()
    }

    fn network(n: usize, seed: u64, zero_z: bool) -> Session {
        let psi = Parameterization::Network(Arc::new(GeneratorParams::toy(2, 3, seed, zero_z)));
        Session::new(random_image(n / 2, n / 2, 3, seed), op(n), psi, SessionConfig::default()).unwrap()
    }

    /// Session on `degrade(x)` and a scribble asking for `x` inside a rect.
    fn feasible_scribble(n: usize, seed: u64, steps: usize) -> (Session, EditJobSpec) {
        let x = random_image(n, n, 3, seed);
        let o = op(n);
        let y = o.degrade(&x).unwrap();
        let s = Session::new(y, o, Parameterization::Direct, SessionConfig::default()).unwrap();
        let r = Rect::new(n / 4, n / 3, n / 2, n / 4);
        let mut colors = Vec::new();
        for yy in r.y..r.y + r.height {
            for xx in r.x..r.x + r.width {
                colors.push((0..3).map(|c| x.get(c, yy, xx)).collect());
            }
        }
        let region = RegionSpec::Rect { x: r.x, y: r.y, width: r.width, height: r.height };
        (s, EditJobSpec::new(ToolSpec::Scribble { color: None, colors: Some(colors) }, region, steps, 0.5))
    }

    #[test]
    fn fresh_session_is_consistent() {
        let s = direct(16, 1);
        assert!(s.consistency().unwrap().0 <= 1e-8);
        assert_eq!(s.latent().dims(), (16, 16, 3));
        assert!(Session::new(random_image(5, 8, 3, 1), op(16), Parameterization::Direct, SessionConfig::default()).is_err());
    }

    #[test]
    fn zero_step_job_changes_nothing() {
        let (mut s, spec) = feasible_scribble(16, 2, 0);
        let before = s.x_hat().clone();
        let out = s.run_edit(&spec).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(s.x_hat(), &before);
    }

    #[test]
    fn scribble_job_on_direct_session() {
        let (mut s, spec) = feasible_scribble(32, 3, 200);
        let before = s.latent().clone();
        let out = s.run_edit(&spec).unwrap();
        let last = *out.trace.last().unwrap();
        assert!(last <= 0.5 * out.initial, "{} -> {last}", out.initial);
        assert!(out.trace.len() <= 200);
        assert!(std::iter::once(out.initial).chain(out.trace.iter().copied()).collect::<Vec<_>>().windows(2).all(|w| w[1] <= w[0]));
        assert!(s.consistency().unwrap().0 <= 1e-8);
        assert_eq!(s.history_len(), 1);
        let r = Rect::new(8, 10, 16, 8);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if !r.contains(x, y) {
                        assert_eq!(s.latent().get(c, y, x), before.get(c, y, x));
                    }
                }
            }
        }
        s.undo().unwrap();
        assert_eq!(s.latent(), &before);
    }

    #[test]
    fn periodicity_job_reaches_zero_on_stripes() {
        let n = 32;
        let x = Image::from_fn(n, n, 1, |_, _, xx| if xx % 4 < 2 { 0.8 } else { 0.2 });
        let o = Arc::new(CemOperator::new(bicubic_kernel(2), 2, n, n, BoundaryMode::Periodic).unwrap());
        let y = o.degrade(&x).unwrap();
        let mut s = Session::new(y, o, Parameterization::Direct, SessionConfig { tau: 0.0, ..SessionConfig::default() }).unwrap();
        let spec = EditJobSpec {
            optimizer: JobOptimizer::PolyakRelaxed,
            ..EditJobSpec::new(ToolSpec::Periodicity { axes: vec![PeriodAxis::horizontal(4)] }, RegionSpec::All, 300, 1.0)
        };
        let obj = PreparedObjective::prepare(&spec.tool, &RegionMask::full(n, n), s.x_hat(), s.op(), s.y()).unwrap();
        // the zero latent reproduces the stripes' high band, already periodic
        assert!(obj.evaluate(s.x_hat()).unwrap() < 1e-12);

        s.set_latent(random_image(n, n, 1, 21).map(|v| 0.2 * v)).unwrap();
        let before = obj.evaluate(s.x_hat()).unwrap();
        assert!(before > 10.0);
        s.run_edit(&spec).unwrap();
        let after = obj.evaluate(s.x_hat()).unwrap();
        assert!(after < 1e-6, "{before} -> {after}");
        assert!(s.consistency().unwrap().0 < 1e-8);
    }

    #[test]
    fn busy_and_failed_jobs() {
        let mut s = direct(16, 4);
        let spec = EditJobSpec::new(
            ToolSpec::Scribble { color: Some(vec![0.9, 0.2, 0.1]), colors: None },
            RegionSpec::Rect { x: 2, y: 2, width: 4, height: 4 },
            5,
            0.5,
        );
        let job = s.begin_job(&spec).unwrap();
        assert!(s.is_busy());
        assert!(matches!(s.begin_job(&spec), Err(Error::Busy)));
        assert!(matches!(s.undo(), Err(Error::Busy)));
        let out = job.run(|_, _| {});
        s.finish_job(out).unwrap();
        assert!(!s.is_busy());

        let bad = EditJobSpec::new(ToolSpec::Variance { delta: 0.1 }, RegionSpec::Rect { x: 0, y: 0, width: 3, height: 3 }, 5, 0.5);
        assert!(matches!(s.run_edit(&bad), Err(Error::EmptyRegion(_))));
        assert!(!s.is_busy());
        assert_eq!(s.history_len(), 1);
    }

    #[test]
    fn knobs() {
        let mut d = direct(16, 5);
        assert!(d.set_knobs(&RegionMask::full(16, 16), 0.5, 0.5, 1.0).is_err());

        let mut z = network(16, 6, true);
        let before = z.x_hat().clone();
        z.set_knobs(&RegionMask::full(16, 16), 0.9, 0.1, 2.0).unwrap();
        assert!(z.x_hat().max_abs_diff(&before).unwrap() < 1e-12);

        let mut s = network(16, 7, false);
        let lat0 = s.latent().clone();
        let region = RegionMask::from_rect(16, 16, Rect::new(3, 4, 5, 6)).unwrap();
        s.set_knobs(&region, 1.0, 1.0, FRAC_PI_4).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    if !region.is_set(x, y) {
                        assert_eq!(s.latent().get(c, y, x).to_bits(), lat0.get(c, y, x).to_bits());
                    }
                }
            }
        }
        let want = compose_sd(1.0, 1.0, FRAC_PI_4, ComposeMode::Product).unwrap();
        let got = s.knobs_at(4, 5).unwrap();
        for (a, b) in got.entries().iter().zip(want.entries()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(s.consistency().unwrap().0 <= 1e-8);
        assert!(s.set_knobs(&RegionMask::full(8, 8), 0.5, 0.5, 0.0).is_err());
        assert!(s.set_knobs(&region, 1.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn undo_semantics() {
        let mut s = network(16, 8, false);
        assert!(matches!(s.undo(), Err(Error::NothingToUndo)));
        let (l0, x0) = (s.latent().clone(), s.x_hat().clone());
        let full = RegionMask::full(16, 16);
        s.set_knobs(&full, 0.2, 0.7, 1.0).unwrap();
        let l1 = s.latent().clone();
        s.set_knobs(&full, 0.9, 0.3, 4.0).unwrap();
        s.undo().unwrap();
        assert_eq!(s.latent(), &l1);
        s.undo().unwrap();
        assert_eq!(s.latent(), &l0);
        assert_eq!(s.x_hat(), &x0);
        assert!(matches!(s.undo(), Err(Error::NothingToUndo)));
    }

    #[test]
    fn history_is_bounded() {
        let cfg = SessionConfig { history_limit: 3, ..SessionConfig::default() };
        let mut s = Session::new(random_image(8, 8, 3, 9), op(16), Parameterization::Direct, cfg).unwrap();
        for k in 0..5 {
            s.set_latent(Image::filled(16, 16, 3, k as f64 * 0.01)).unwrap();
        }
        assert_eq!(s.history_len(), 3);
    }

    #[test]
    fn alternatives() {
        let mut s = direct(16, 10);
        assert!(s.diverse_alternatives(&DiversityOptions::new(1, false)).is_err());
        assert!(s.diverse_alternatives(&DiversityOptions::new(9, false)).is_err());
        let cur = s.x_hat().clone();
        let spread = |alts: &[Alternative]| -> f64 {
            alts.iter().map(|a| a.x_hat.sub(&cur).unwrap().data().iter().map(|v| v.abs()).sum::<f64>()).sum()
        };
        let free = s.diverse_alternatives(&DiversityOptions::new(2, false)).unwrap().to_vec();
        let d: f64 = free[0].x_hat.sub(&free[1].x_hat).unwrap().data().iter().map(|v| v.abs()).sum();
        assert!(d > 0.0);
        for a in &free {
            assert!(s.op().degrade(&a.x_hat).unwrap().max_abs_diff(s.y()).unwrap() <= 1e-8);
        }
        let anchored = s.diverse_alternatives(&DiversityOptions::new(2, true)).unwrap().to_vec();
        assert!(spread(&anchored) < spread(&free), "{} vs {}", spread(&anchored), spread(&free));
        s.adopt(1).unwrap();
        assert_eq!(s.latent(), &anchored[1].latent);
        assert_eq!(s.history_len(), 1);
        assert!(s.adopt(5).is_err());
    }

    #[test]
    fn diversity_metric_examples() {
        let o = op(8);
        let x = random_image(8, 8, 3, 11);
        let same = diversity_metric(&[x.clone(), x.clone()], &o, None).unwrap();
        assert_eq!(same.sigma, 0.0);

        let perp = o.project_perp(&random_image(8, 8, 3, 12)).unwrap();
        let report = diversity_metric(&[x.clone(), x.add(&perp).unwrap()], &o, Some(&x)).unwrap();
        assert!(report.sigma <= 1e-8, "{}", report.sigma);
        assert_eq!(report.rmse.len(), 2);
        assert_eq!(report.rmse[0], 0.0);

        let outs: Vec<Image<f64>> = (0..3).map(|k| random_image(8, 8, 3, 13 + k)).collect();
        let dense = DenseOracle::build(&bicubic_kernel(2), 2, 8, 8).unwrap();
        let proj: Vec<Image<f64>> = outs.iter().map(|u| dense.project_nullspace(u).unwrap()).collect();
        let mut acc = 0.0;
        for i in 0..proj[0].len() {
            let vals: Vec<f64> = proj.iter().map(|p| p.data()[i]).collect();
            let m = vals.iter().sum::<f64>() / 3.0;
            acc += (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        }
        let want = 255.0 * acc / proj[0].len() as f64;
        let got = diversity_metric(&outs, &o, None).unwrap().sigma;
        assert!((got - want).abs() <= 1e-8, "{got} {want}");
        assert!(diversity_metric(&outs[..1], &o, None).is_err());
        assert!(diversity_metric(&[outs[0].clone(), random_image(4, 4, 3, 1)], &o, None).is_err());
    }

    #[test]
    fn rmse_and_psnr() {
        let x = random_image(6, 5, 3, 14);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let shifted = x.map(|v| v + 1.0 / 255.0);
        assert!((rmse(&shifted, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((psnr(&shifted, &x).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        let other = random_image(6, 5, 3, 15);
        let brute = (x.data().iter().zip(other.data()).map(|(a, b)| (255.0 * (a - b)).powi(2)).sum::<f64>() / 90.0).sqrt();
        assert!((rmse(&x, &other).unwrap() - brute).abs() < 1e-9);
        assert!(rmse(&x, &random_image(5, 5, 3, 1)).is_err());
    }

    #[test]
    fn raster_round_trip() {
        let img = random_image(5, 3, 2, 16);
        let bytes = encode_raster(&img);
        assert_eq!(&bytes[..4], b"CEMZ");
        assert_eq!(bytes.len(), 16 + 8 * 30);
        assert_eq!(decode_raster(&bytes).unwrap(), img);
        assert!(decode_raster(b"NOPE000000000000").is_err());
        assert!(decode_raster(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = network(16, 17, false);
        s.set_knobs(&RegionMask::full(16, 16), 0.3, 0.6, 1.2).unwrap();
        s.export(dir.path()).unwrap();
        for f in ["y.png", "kernel.json", "latent.bin", "xhat.png", "session.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let t = Session::import(dir.path()).unwrap();
        assert_eq!(t.latent(), s.latent());
        assert!(t.x_hat().max_abs_diff(s.x_hat()).unwrap() < 1e-12);
        assert!(!t.is_direct());
    }
}
