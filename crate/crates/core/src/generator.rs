//! The toy generator `psi(y, z)`: a few periodic conv layers whose every
//! input gets the control signal concatenated (area-downscaled for layers
//! that run at LR), wrapped by the CEM so the output is always consistent.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cem::CemOperator;
use crate::diffengine::{conv_layer_forward, NodeId, Tape, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::imagekit::{area_downscale, conv2d, upsample, BoundaryMode, Image};
use crate::kernel::{interpolation_kernel, Kernel};

/// Channel count of the control signal.
pub const Z_CHANNELS: usize = 3;

/// Three-channel HR raster steering the generator. Values nominally lie in
/// `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    image: Image<f64>,
}

impl ControlSignal {
    pub fn zeros(width: usize, height: usize) -> Self {
        ControlSignal { image: Image::zeros(width, height, Z_CHANNELS) }
    }

    pub fn from_image(image: Image<f64>) -> Result<Self> {
        if image.channels() != Z_CHANNELS {
            return Err(Error::InvalidDims(format!(
                "control signal needs {Z_CHANNELS} channels, got {}",
                image.channels()
            )));
        }
        Ok(ControlSignal { image })
    }

    /// Uniform samples in `[-1, 1]`.
    pub fn random(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Image::from_fn(width, height, Z_CHANNELS, |_, _, _| rng.gen_range(-1.0..=1.0));
        ControlSignal { image }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn image(&self) -> &Image<f64> {
        &self.image
    }

    pub fn image_mut(&mut self) -> &mut Image<f64> {
        &mut self.image
    }

    pub fn into_image(self) -> Image<f64> {
        self.image
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Feature channels in, not counting the concatenated control signal.
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    /// `cout x (cin + 3) x ksize x ksize`, control-signal inputs last.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub leaky: bool,
    /// Runs on the LR grid. LR layers must precede HR layers.
    pub at_lr: bool,
}

impl LayerParams {
    fn in_channels(&self) -> usize {
        self.cin + Z_CHANNELS
    }

    fn weight_index(&self, o: usize, i: usize, a: usize, b: usize) -> usize {
        ((o * self.in_channels() + i) * self.ksize + a) * self.ksize + b
    }

    fn validate(&self) -> Result<()> {
        let need = self.cout * self.in_channels() * self.ksize * self.ksize;
        if self.ksize % 2 == 0 || self.weights.len() != need || self.bias.len() != self.cout {
            return Err(Error::InvalidDims(format!(
                "layer {}->{} k{}: {} weights (need {need}), {} biases",
                self.cin,
                self.cout,
                self.ksize,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    /// Passes feature channel `o` straight through.
    fn identity(ch: usize, at_lr: bool) -> Self {
        let mut l = LayerParams {
            cin: ch,
            cout: ch,
            ksize: 1,
            weights: vec![0.0; ch * (ch + Z_CHANNELS)],
            bias: vec![0.0; ch],
            leaky: false,
            at_lr,
        };
        for o in 0..ch {
            let i = l.weight_index(o, o, 0, 0);
            l.weights[i] = 1.0;
        }
        l
    }

    fn random(cin: usize, cout: usize, leaky: bool, at_lr: bool, zero_z: bool, rng: &mut ChaCha8Rng) -> Self {
        let ksize = 3;
        let fan_in = ((cin + Z_CHANNELS) * ksize * ksize) as f64;
        let scale = fan_in.sqrt().recip();
        let mut l = LayerParams {
            cin,
            cout,
            ksize,
            weights: vec![0.0; cout * (cin + Z_CHANNELS) * ksize * ksize],
            bias: vec![0.0; cout],
            leaky,
            at_lr,
        };
        for o in 0..cout {
            for i in 0..cin + Z_CHANNELS {
                for a in 0..ksize {
                    for b in 0..ksize {
                        let w = if zero_z && i >= cin { 0.0 } else { rng.gen_range(-scale..scale) };
                        let idx = l.weight_index(o, i, a, b);
                        l.weights[idx] = w;
                    }
                }
            }
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub factor: usize,
    /// Channels of `y` and of the output.
    pub channels: usize,
    pub layers: Vec<LayerParams>,
    /// Adds the bicubic upsampling of `y` to the last layer's output.
    pub skip: bool,
}

impl GeneratorParams {
    /// Delta layers, no nonlinearity, no skip: `x_inc` is the bicubic
    /// upsampling of `y`.
    pub fn identity(factor: usize, channels: usize) -> Self {
        GeneratorParams {
            factor,
            channels,
            layers: vec![
                LayerParams::identity(channels, true),
                LayerParams::identity(channels, false),
                LayerParams::identity(channels, false),
            ],
            skip: false,
        }
    }

    /// Three 3x3 layers with 16 hidden channels: one on the LR grid, two on
    /// the HR grid, leaky ReLU between, bicubic skip. With `zero_z` the
    /// control-signal weights start at zero.
    pub fn toy(factor: usize, channels: usize, seed: u64, zero_z: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 16;
        GeneratorParams {
            factor,
            channels,
            layers: vec![
                LayerParams::random(channels, hidden, true, true, zero_z, &mut rng),
                LayerParams::random(hidden, hidden, true, false, zero_z, &mut rng),
                LayerParams::random(hidden, channels, false, false, zero_z, &mut rng),
            ],
            skip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.channels == 0 || self.layers.is_empty() {
            return Err(Error::InvalidDims("generator needs a factor, channels and layers".into()));
        }
        let mut ch = self.channels;
        let mut seen_hr = false;
        for (k, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if l.cin != ch {
                return Err(Error::InvalidDims(format!("layer {k} expects {} channels, gets {ch}", l.cin)));
            }
            if l.at_lr && seen_hr {
                return Err(Error::InvalidDims(format!("LR layer {k} follows an HR layer")));
            }
            seen_hr |= !l.at_lr;
            ch = l.cout;
        }
        if ch != self.channels {
            return Err(Error::InvalidDims(format!("last layer emits {ch} channels, need {}", self.channels)));
        }
        Ok(())
    }

    /// Zeroes every weight that reads the control signal.
    pub fn zero_z_weights(&mut self) {
        for l in &mut self.layers {
            for o in 0..l.cout {
                for i in l.cin..l.in_channels() {
                    for a in 0..l.ksize {
                        for b in 0..l.ksize {
                            let idx = l.weight_index(o, i, a, b);
                            l.weights[idx] = 0.0;
                        }
                    }
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: GeneratorParams =
            serde_json::from_str(text).map_err(|e| Error::InvalidParam(format!("generator params: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub x_inc: Image<f64>,
    pub x_hat: Image<f64>,
}

/// `(2f-1)`-square kernel whose top-left `f x f` quadrant is `1/f^2`, so
/// that blurring then decimating averages aligned `f x f` blocks.
pub fn area_kernel(factor: usize) -> Kernel<f64> {
    let n = 2 * factor - 1;
    let v = 1.0 / (factor * factor) as f64;
    let taps = (0..n * n).map(|k| if k / n < factor && k % n < factor { v } else { 0.0 }).collect();
    Kernel::new(n, n, taps).expect("area kernel is well formed")
}

/// Periodic cubic interpolation onto the `factor`-times finer grid; LR
/// samples land on HR samples whose coordinates are multiples of `factor`.
pub fn bicubic_upsample(img: &Image<f64>, factor: usize) -> Image<f64> {
    conv2d(&upsample(img, factor), &interpolation_kernel(factor), BoundaryMode::Periodic)
}

fn check_inputs(params: &GeneratorParams, y: &Image<f64>, z: &Image<f64>, op: &CemOperator<f64>) -> Result<()> {
    params.validate()?;
    let f = params.factor;
    if op.factor() != f {
        return Err(Error::InvalidDims(format!("generator factor {f}, operator factor {}", op.factor())));
    }
    if y.channels() != params.channels {
        return Err(Error::InvalidDims(format!("y has {} channels, generator {}", y.channels(), params.channels)));
    }
    if z.channels() != Z_CHANNELS || (z.width(), z.height()) != (y.width() * f, y.height() * f) {
        return Err(Error::InvalidDims(format!(
            "control signal {:?} does not match y {:?} at factor {f}",
            z.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Runs the generator and the CEM.
pub fn generate(
    params: &GeneratorParams,
    y: &Image<f64>,
    z: &ControlSignal,
    op: &CemOperator<f64>,
) -> Result<GeneratorOutput> {
    let z = z.image();
    check_inputs(params, y, z, op)?;
    let f = params.factor;
    let z_lr = area_downscale(z, f)?;
    let mut feat = y.clone();
    let mut at_lr = true;
    for l in &params.layers {
        if at_lr && !l.at_lr {
            feat = bicubic_upsample(&feat, f);
            at_lr = false;
        }
        let zz = if l.at_lr { &z_lr } else { z };
        let input = Image::concat_channels(&[&feat, zz])?;
        let mut out = conv_layer_forward(&input, &l.weights, &l.bias, l.cout, l.ksize);
        if l.leaky {
            out = out.map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v });
        }
        feat = out;
    }
    if at_lr {
        feat = bicubic_upsample(&feat, f);
    }
    if params.skip {
        feat = feat.add(&bicubic_upsample(y, f))?;
    }
    let x_hat = op.cem_apply(&feat, y)?;
    Ok(GeneratorOutput { x_inc: feat, x_hat })
}

/// Node ids of a generator recorded on a tape.
#[derive(Debug, Clone)]
pub struct GeneratorNodes {
    pub x_inc: NodeId,
    pub x_hat: NodeId,
    /// `(weights, bias)` per layer.
    pub layers: Vec<(NodeId, NodeId)>,
}

/// Records [`generate`] on `tape`, reading the control signal from node
/// `z`. Layer parameters become leaves when `param_leaves` is set.
pub fn generate_on_tape(
    params: &GeneratorParams,
    y: &Image<f64>,
    z: NodeId,
    op: &Arc<CemOperator<f64>>,
    tape: &mut Tape,
    param_leaves: bool,
) -> Result<GeneratorNodes> {
    check_inputs(params, y, tape.value(z), op)?;
    let f = params.factor;
    let interp = Arc::new(interpolation_kernel::<f64>(f));
    let yn = tape.constant(y.clone());
    let z_blur = tape.conv2d(z, Arc::new(area_kernel(f)), BoundaryMode::Periodic)?;
    let z_lr = tape.downsample(z_blur, f)?;
    let up = |tape: &mut Tape, n: NodeId| -> Result<NodeId> {
        let u = tape.upsample(n, f)?;
        tape.conv2d(u, interp.clone(), BoundaryMode::Periodic)
    };
    let mut feat = yn;
    let mut at_lr = true;
    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        if at_lr && !l.at_lr {
            feat = up(tape, feat)?;
            at_lr = false;
        }
        let wimg = Image::from_vec(l.weights.len(), 1, 1, l.weights.clone())?;
        let bimg = Image::from_vec(l.bias.len(), 1, 1, l.bias.clone())?;
        let (w, b) = if param_leaves {
            (tape.leaf(wimg), tape.leaf(bimg))
        } else {
            (tape.constant(wimg), tape.constant(bimg))
        };
        layers.push((w, b));
        let input = tape.concat(&[feat, if l.at_lr { z_lr } else { z }])?;
        let mut out = tape.conv_layer(input, w, b, l.cout, l.ksize)?;
        if l.leaky {
            out = tape.leaky_relu(out, LEAKY_SLOPE)?;
        }
        feat = out;
    }
    if at_lr {
        feat = up(tape, feat)?;
    }
    if params.skip {
        let s = up(tape, yn)?;
        feat = tape.add(feat, s)?;
    }
    let x_hat = cem_on_tape(tape, feat, y, op)?;
    Ok(GeneratorNodes { x_inc: feat, x_hat, layers })
}

/// `cem_apply(x, y)` recorded as `cem_linear(x) + cem_apply(0, y)`.
pub fn cem_on_tape(tape: &mut Tape, x: NodeId, y: &Image<f64>, op: &Arc<CemOperator<f64>>) -> Result<NodeId> {
    let lin = tape.cem_linear(x, op.clone())?;
    let (w, h) = op.hr_dims();
    let rep = op.cem_apply(&Image::zeros(w, h, y.channels()), y)?;
    let rep = tape.constant(rep);
    tape.add(lin, rep)
}

/// Network-free parameterization: the latent `n` is projected directly.
pub fn direct_param(y: &Image<f64>, n: &Image<f64>, op: &CemOperator<f64>) -> Result<Image<f64>> {
    op.cem_apply(n, y)
}

/// What a latent raster drives: the toy network through its control signal,
/// or the CEM directly.
#[derive(Debug, Clone)]
pub enum Parameterization {
    Network(Arc<GeneratorParams>),
    Direct,
}

impl Parameterization {
    /// Channels of the latent for an LR image with `y_channels` channels.
    pub fn latent_channels(&self, y_channels: usize) -> usize {
        match self {
            Parameterization::Network(_) => Z_CHANNELS,
            Parameterization::Direct => y_channels,
        }
    }

    pub fn synthesize(&self, y: &Image<f64>, latent: &Image<f64>, op: &CemOperator<f64>) -> Result<Image<f64>> {
        match self {
            Parameterization::Network(p) => {
                Ok(generate(p, y, &ControlSignal::from_image(latent.clone())?, op)?.x_hat)
            }
            Parameterization::Direct => direct_param(y, latent, op),
        }
    }

    /// Records `x_hat(latent)` on `tape` and returns its node.
    pub fn on_tape(&self, tape: &mut Tape, y: &Image<f64>, latent: NodeId, op: &Arc<CemOperator<f64>>) -> Result<NodeId> {
        match self {
            Parameterization::Network(p) => Ok(generate_on_tape(p, y, latent, op, tape, false)?.x_hat),
            Parameterization::Direct => cem_on_tape(tape, latent, y, op),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::grad_check;
    use crate::kernel::bicubic_kernel;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn op(n: usize) -> Arc<CemOperator<f64>> {
        Arc::new(CemOperator::new(bicubic_kernel(2), 2, n, n, BoundaryMode::Periodic).unwrap())
    }

    #[test]
    fn area_kernel_matches_block_average() {
        let img = random_image(12, 9, 2, 1);
        for f in [1, 3] {
            let via = crate::imagekit::downsample(&conv2d(&img, &area_kernel(f), BoundaryMode::Periodic), f).unwrap();
            assert!(via.max_abs_diff(&area_downscale(&img, f).unwrap()).unwrap() < 1e-14);
        }
    }

    #[test]
    fn zero_z_weights_make_output_independent_of_z() {
        let p = GeneratorParams::toy(2, 3, 5, true);
        let y = random_image(8, 8, 3, 2);
        let a = generate(&p, &y, &ControlSignal::random(16, 16, 1), &op(16)).unwrap();
        let b = generate(&p, &y, &ControlSignal::random(16, 16, 2), &op(16)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_stack_is_bicubic_upsampling() {
        let p = GeneratorParams::identity(2, 3);
        let y = random_image(8, 8, 3, 3);
        let out = generate(&p, &y, &ControlSignal::random(16, 16, 4), &op(16)).unwrap();
        assert!(out.x_inc.max_abs_diff(&bicubic_upsample(&y, 2)).unwrap() < 1e-14);
    }

    #[test]
    fn bicubic_upsampling_keeps_lr_samples() {
        let y = random_image(6, 5, 1, 5);
        let up = bicubic_upsample(&y, 3);
        let back = crate::imagekit::downsample(&up, 3).unwrap();
        assert!(back.max_abs_diff(&y).unwrap() < 1e-14);
    }

    #[test]
    fn output_is_consistent_for_any_params() {
        let o = op(16);
        let y = random_image(8, 8, 3, 6);
        for seed in 0..3 {
            let p = GeneratorParams::toy(2, 3, seed, false);
            let out = generate(&p, &y, &ControlSignal::random(16, 16, seed + 10), &o).unwrap();
            let (linf, _) = o.residual(&out.x_hat, &y).unwrap();
            assert!(linf <= 1e-8, "{linf}");
        }
    }

    #[test]
    fn tape_matches_direct_evaluation() {
        let o = op(16);
        let p = GeneratorParams::toy(2, 3, 7, false);
        let y = random_image(8, 8, 3, 8);
        let z = ControlSignal::random(16, 16, 9);
        let direct = generate(&p, &y, &z, &o).unwrap();
        let mut t = Tape::new();
        let zn = t.leaf(z.image().clone());
        let nodes = generate_on_tape(&p, &y, zn, &o, &mut t, false).unwrap();
        assert!(t.value(nodes.x_inc).max_abs_diff(&direct.x_inc).unwrap() <= 1e-12);
        assert!(t.value(nodes.x_hat).max_abs_diff(&direct.x_hat).unwrap() <= 1e-12);
    }

    #[test]
    fn gradient_wrt_z_checks() {
        let k = Kernel::gaussian(0.9, 1).unwrap();
        let o = Arc::new(CemOperator::new(k, 2, 8, 8, BoundaryMode::Periodic).unwrap());
        let p = GeneratorParams::toy(2, 1, 11, false);
        let y = random_image(4, 4, 1, 12);
        let rep = grad_check(
            |t, z| {
                let n = generate_on_tape(&p, &y, z, &o, t, false)?;
                t.sum_squares(n.x_hat)
            },
            &ControlSignal::random(8, 8, 13).into_image(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }

    #[test]
    fn perp_component_has_no_gradient() {
        let o = op(16);
        let p = GeneratorParams::toy(2, 3, 14, false);
        let y = random_image(8, 8, 3, 15);
        let c = random_image(16, 16, 3, 16);
        let z = ControlSignal::random(16, 16, 17);
        let mut t = Tape::new();
        let zn = t.leaf(z.into_image());
        let n = generate_on_tape(&p, &y, zn, &o, &mut t, false).unwrap();
        let pn = t.cem_linear(n.x_hat, o.clone()).unwrap();
        let perp = t.sub(n.x_hat, pn).unwrap();
        let cn = t.constant(c);
        let d = t.sub(perp, cn).unwrap();
        let r = t.sum_squares(d).unwrap();
        t.backward(r).unwrap();
        assert!(t.grad(zn).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn zeroed_z_weights_give_zero_gradient() {
        let o = op(16);
        let p = GeneratorParams::toy(2, 3, 18, true);
        let y = random_image(8, 8, 3, 19);
        let mut t = Tape::new();
        let zn = t.leaf(ControlSignal::random(16, 16, 20).into_image());
        let n = generate_on_tape(&p, &y, zn, &o, &mut t, false).unwrap();
        let r = t.sum_squares(n.x_hat).unwrap();
        t.backward(r).unwrap();
        assert_eq!(t.grad(zn).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn direct_param_cases() {
        let o = op(16);
        let x = random_image(16, 16, 3, 21);
        let y = o.degrade(&x).unwrap();
        let rep = direct_param(&y, &Image::zeros(16, 16, 3), &o).unwrap();
        assert!(rep.max_abs_diff(&o.orthogonal_rep(&y).unwrap()).unwrap() == 0.0);
        assert!(direct_param(&y, &x, &o).unwrap().max_abs_diff(&x).unwrap() <= 1e-8);
        let out = direct_param(&y, &random_image(16, 16, 3, 22), &o).unwrap();
        assert!(o.residual(&out, &y).unwrap().0 <= 1e-8);
        assert!(direct_param(&y, &Image::zeros(8, 16, 3), &o).is_err());
    }

    #[test]
    fn params_json_round_trip_and_validation() {
        let p = GeneratorParams::toy(3, 1, 23, true);
        assert_eq!(GeneratorParams::from_json(&p.to_json()).unwrap(), p);
        let mut bad = p.clone();
        bad.layers[1].bias.pop();
        assert!(GeneratorParams::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn mismatched_z_rejected() {
        let p = GeneratorParams::identity(2, 3);
        let y = random_image(8, 8, 3, 24);
        assert!(matches!(
            generate(&p, &y, &ControlSignal::zeros(14, 16), &op(16)),
            Err(Error::InvalidDims(_))
        ));
    }
}
