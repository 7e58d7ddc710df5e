//! Toy adversarial training loop: linear WGAN-GP critic, credibility gate
//! and the weighted generator loss, on random crops of a few images.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cem::CemOperator;
use crate::diffengine::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::generator::{generate, generate_on_tape, ControlSignal, GeneratorParams, Parameterization, Z_CHANNELS};
use crate::imagekit::{BoundaryMode, Image, Rect};
use crate::kernel::Kernel;
use crate::losses::{
    adjust_sd, map_loss, range_loss_on_tape, struct_loss_on_tape, total_loss, CredibilityGate, LinearCritic,
    LossComponents, LossWeights, PercentileCalibration, StructureTensor,
};
use crate::optim::DescentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Side of the square HR crops; a multiple of the factor.
    pub crop: usize,
    pub factor: usize,
    pub generator_lr: f64,
    pub critic_lr: f64,
    /// Inner iterations of the latent fit behind the map term.
    pub map_iters: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50,
            crop: 16,
            factor: 2,
            generator_lr: 1e-3,
            critic_lr: 0.05,
            map_iters: 10,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.factor == 0 || self.crop == 0 || self.crop % self.factor != 0 {
            return Err(Error::InvalidParam(format!("crop {} must be a positive multiple of factor {}", self.crop, self.factor)));
        }
        if !(self.generator_lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(Error::InvalidParam("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss_d: f64,
    /// True when the critic scored the real crop above the fake one.
    pub correct: bool,
    pub gate_open: bool,
    /// Generator loss terms; `None` while the gate is closed.
    pub components: Option<LossComponents>,
    pub loss_g: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: GeneratorParams,
    pub critic: LinearCritic,
    pub history: Vec<TrainStep>,
}

impl TrainReport {
    pub fn generator_steps(&self) -> usize {
        self.history.iter().filter(|s| s.loss_g.is_some()).count()
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &GeneratorParams) -> Self {
        let shapes: Vec<usize> = params.layers.iter().flat_map(|l| [l.weights.len(), l.bias.len()]).collect();
        Adam { m: shapes.iter().map(|&n| vec![0.0; n]).collect(), v: shapes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    fn step(&mut self, params: &mut GeneratorParams, grads: &[Vec<f64>], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        let slots = params.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias]);
        for (k, p) in slots.enumerate() {
            for (i, w) in p.iter_mut().enumerate() {
                let g = grads[k][i];
                self.m[k][i] = b1 * self.m[k][i] + (1.0 - b1) * g;
                self.v[k][i] = b2 * self.v[k][i] + (1.0 - b2) * g * g;
                *w -= lr * (self.m[k][i] / c1) / ((self.v[k][i] / c2).sqrt() + eps);
            }
        }
    }
}

fn random_crop(images: &[Image<f64>], side: usize, rng: &mut ChaCha8Rng) -> Result<Image<f64>> {
    let img = &images[rng.gen_range(0..images.len())];
    let (w, h) = (img.width(), img.height());
    let x0 = rng.gen_range(0..=w - side);
    let y0 = rng.gen_range(0..=h - side);
    img.crop(Rect::new(x0, y0, side, side))
}

fn add_grads(tape: &Tape, layers: &[(NodeId, NodeId)], acc: &mut [Vec<f64>]) {
    for (k, &(w, b)) in layers.iter().enumerate() {
        for (slot, node) in [(2 * k, w), (2 * k + 1, b)] {
            if let Some(g) = tape.grad(node) {
                for (a, v) in acc[slot].iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
    }
}

/// Trains `init` for `cfg.steps` critic steps. The generator only moves on
/// steps where the gate is open, by one Adam step on
/// `adv + w_range * range + w_struct * structure + w_map * map`.
pub fn train_toy(
    images: &[Image<f64>],
    kernel: &Kernel<f64>,
    init: GeneratorParams,
    cal: &PercentileCalibration,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    init.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidParam("training needs at least one image".into()));
    }
    for img in images {
        if img.width() < cfg.crop || img.height() < cfg.crop || img.channels() != init.channels {
            return Err(Error::InvalidDims(format!(
                "training image {:?} cannot give {}x{}x{} crops",
                img.dims(),
                cfg.crop,
                cfg.crop,
                init.channels
            )));
        }
    }
    if init.factor != cfg.factor {
        return Err(Error::InvalidParam(format!("generator factor {} but training factor {}", init.factor, cfg.factor)));
    }
    let op = Arc::new(CemOperator::new(kernel.clone(), cfg.factor, cfg.crop, cfg.crop, BoundaryMode::Periodic)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut critic = LinearCritic::zeros(cfg.crop, cfg.crop, params.channels);
    let mut gate = CredibilityGate::default();
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(cfg.steps);
    let w = &cfg.weights;

    for step in 0..cfg.steps {
        let x = random_crop(images, cfg.crop, &mut rng)?;
        let y = op.degrade(&x)?;
        let control: [f64; Z_CHANNELS] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let z = Image::from_fn(cfg.crop, cfg.crop, Z_CHANNELS, |c, _, _| control[c]);
        let fake = generate(&params, &y, &ControlSignal::from_image(z.clone())?, &op)?.x_hat;

        let (loss_d, _) = crate::losses::critic_losses(&critic, &x, &fake, w.gp)?;
        let g = critic.loss_grad(&x, &fake, w.gp)?;
        critic.w.axpy(-cfg.critic_lr, &g)?;
        let correct = critic.score(&x)? > critic.score(&fake)?;
        gate.record(correct);
        let gate_open = gate.is_open();

        let (components, loss_g) = if gate_open {
            let target = adjust_sd(&StructureTensor::from_entries(control), cal);
            let psi = Parameterization::Network(Arc::new(params.clone()));
            let fit = map_loss(&psi, &y, &x, &op, &z, cfg.map_iters, &DescentConfig::map_default())?;

            let mut tape = Tape::new();
            let zn = tape.constant(z);
            let gen = generate_on_tape(&params, &y, zn, &op, &mut tape, true)?;
            let wn = tape.constant(critic.w.clone());
            let prod = tape.mul(gen.x_hat, wn)?;
            let score = tape.reduce_sum(prod)?;
            let adv = tape.scale(score, -1.0)?;
            let range = range_loss_on_tape(&mut tape, gen.x_hat)?;
            let structure = struct_loss_on_tape(&mut tape, gen.x_hat, &x, &target)?;
            let zs = tape.constant(fit.z);
            let gen_map = generate_on_tape(&params, &y, zs, &op, &mut tape, true)?;
            let xn = tape.constant(x.clone());
            let d = tape.sub(gen_map.x_hat, xn)?;
            let a = tape.abs(d)?;
            let map = tape.reduce_mean(a)?;

            let terms = [(adv, 1.0), (range, w.range), (structure, w.structure), (map, w.map)];
            let mut total = tape.scalar(-critic.b);
            for (n, wt) in terms {
                let s = tape.scale(n, wt)?;
                total = tape.add(total, s)?;
            }
            tape.backward(total)?;
            let c = LossComponents {
                adv: tape.scalar_value(adv) - critic.b,
                range: tape.scalar_value(range),
                structure: tape.scalar_value(structure),
                map: tape.scalar_value(map),
            };
            let mut grads: Vec<Vec<f64>> = params.layers.iter().flat_map(|l| [vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]]).collect();
            add_grads(&tape, &gen.layers, &mut grads);
            add_grads(&tape, &gen_map.layers, &mut grads);
            adam.step(&mut params, &grads, cfg.generator_lr);
            (Some(c), Some(total_loss(&c, w)))
        } else {
            (None, None)
        };
        history.push(TrainStep { step, loss_d, correct, gate_open, components, loss_g });
    }
    Ok(TrainReport { params, critic, history })
}
