//! Every differentiable loss and edit objective, run through central
//! differences on random inputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cem::CemOperator;
use crate::diffengine::{grad_check, NodeId, Tape};
use crate::edit::*;
use crate::error::{Error, Result};
use crate::generator::{ControlSignal, GeneratorParams, Parameterization};
use crate::imagekit::{BoundaryMode, Image, Rect, RegionMask};
use crate::kernel::bicubic_kernel;
use crate::losses::{critic_losses, range_loss_on_tape, struct_loss_on_tape, LinearCritic, StructureTensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Builder<'a> = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId> + 'a>;

fn uniform(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> Image<f64> {
    Image::from_fn(w, h, c, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Checks all objectives on random `n x n` RGB inputs; `n` must be even and
/// at least 8.
pub fn check_all(n: usize, seed: u64, tol: f64) -> Result<Vec<CheckOutcome>> {
    if n < 8 || n % 2 != 0 {
        return Err(Error::InvalidParam(format!("gradient checks need an even size >= 8, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = uniform(n, n, 3, &mut rng);
    // spills outside [0, 1] so the range penalty is active
    let leaf = uniform(n, n, 3, &mut rng).map(|v| 1.5 * v - 0.25);
    let gt = uniform(n, n, 3, &mut rng);
    let other = uniform(n, n, 3, &mut rng);
    let region = RegionMask::from_rect(n, n, Rect::new(1, 1, n - 2, n - 2))?;
    let soft = RegionMask::from_weights(n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let src = Arc::new(source_patches(&x0, &region, PatchVariant::Plain)?);
    let src_v = Arc::new(source_patches(&x0, &region, PatchVariant::VariancePreserving)?);
    let scribble = Scribble::solid(region.clone(), &[0.1, 0.5, 0.9])?;
    let bright = Scribble::of_kind(region.clone(), ScribbleKind::Brighten);
    let dark = Scribble::of_kind(region.clone(), ScribbleKind::Darken);
    let tvmin = Scribble::of_kind(soft, ScribbleKind::TvMin);
    let target = StructureTensor::new(0.3, -0.1, 0.5);
    let imprint_rect = Rect::new(n / 4, n / 6, n / 2, n / 2);
    let op = Arc::new(CemOperator::new(bicubic_kernel(2), 2, n, n, BoundaryMode::Periodic)?);
    let y = op.degrade(&gt)?;
    let net = Parameterization::Network(Arc::new(GeneratorParams::toy(2, 3, seed ^ 0x5eed, false)));
    let z_leaf = ControlSignal::random(n, n, seed.wrapping_add(1)).into_image();
    let axes = [PeriodAxis::horizontal(3), PeriodAxis::vertical(4)];

    let on_x: Vec<(&'static str, Builder)> = vec![
        ("range", Box::new(|t, x| range_loss_on_tape(t, x))),
        ("structure", Box::new(|t, x| struct_loss_on_tape(t, x, &gt, &target))),
        ("variance", Box::new(|t, x| variance_objective(t, x, &x0, &region, 0.02))),
        ("magnitude", Box::new(|t, x| magnitude_objective(t, x, &x0, &region, 1.7))),
        ("scribble", Box::new(|t, x| scribble_objective(t, x, &scribble))),
        ("brighten", Box::new(|t, x| brightness_objective(t, x, &x0, &bright, 1.3))),
        ("darken", Box::new(|t, x| brightness_objective(t, x, &x0, &dark, 0.7))),
        ("local_tv", Box::new(|t, x| local_tv_objective(t, x, &tvmin))),
        ("imprint", Box::new(|t, x| imprint_objective(t, x, &x0, imprint_rect))),
        ("patch_plain", Box::new(|t, x| patch_collection_objective(t, x, &x0, &region, src.clone(), PatchVariant::Plain))),
        (
            "patch_variance",
            Box::new(|t, x| patch_collection_objective(t, x, &x0, &region, src_v.clone(), PatchVariant::VariancePreserving)),
        ),
        ("periodicity", Box::new(|t, x| periodicity_objective(t, x, &region, &axes))),
        (
            "diversity",
            Box::new(|t, x| {
                let o = t.constant(other.clone());
                let s = t.scale(x, 0.5)?;
                diversity_objective(t, &[x, s, o], Some((&x0, ANCHOR_WEIGHT)))
            }),
        ),
        ("tv", Box::new(|t, x| tv_on_tape(t, x))),
    ];
    let on_z: Vec<(&'static str, Builder)> = vec![
        (
            "map",
            Box::new(|t, z| {
                let xh = net.on_tape(t, &y, z, &op)?;
                let g = t.constant(gt.clone());
                let d = t.sub(xh, g)?;
                let a = t.abs(d)?;
                t.reduce_mean(a)
            }),
        ),
        (
            "direct_prior",
            Box::new(|t, z| {
                let pn = t.cem_linear(z, op.clone())?;
                tv_on_tape(t, pn)
            }),
        ),
    ];

    let mut out = Vec::new();
    for (list, at) in [(&on_x, &leaf), (&on_z, &z_leaf)] {
        for (name, b) in list {
            let rep = grad_check(b, at, FD_STEP, tol)?;
            out.push(CheckOutcome { name, max_rel_error: rep.max_rel_error, passed: rep.passed });
        }
    }

    // the critic update is closed form, so it is compared with differences directly
    let real = uniform(n, n, 3, &mut rng);
    let fake = uniform(n, n, 3, &mut rng);
    let critic = LinearCritic { w: uniform(n, n, 3, &mut rng).map(|v| v - 0.5), b: 0.2 };
    let gp = 10.0;
    let analytic = critic.loss_grad(&real, &fake, gp)?;
    let mut worst: f64 = 0.0;
    for i in 0..critic.w.len() {
        let mut p = critic.clone();
        p.w.data_mut()[i] += FD_STEP;
        let mut m = critic.clone();
        m.w.data_mut()[i] -= FD_STEP;
        let fd = (critic_losses(&p, &real, &fake, gp)?.0 - critic_losses(&m, &real, &fake, gp)?.0) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
    }
    out.push(CheckOutcome { name: "wgan_critic", max_rel_error: worst, passed: worst <= tol });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_pass_on_small_inputs() {
        let r = check_all(8, 3, 1e-4).unwrap();
        assert_eq!(r.len(), 17);
        for c in &r {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn odd_sizes_are_rejected() {
        assert!(check_all(9, 0, 1e-4).is_err());
        assert!(check_all(6, 0, 1e-4).is_err());
    }
}
