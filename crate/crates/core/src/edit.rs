//! Editing objectives. Every builder takes the node holding the current
//! output image and returns a scalar node; constants captured at job start
//! (the starting image, baselines, source patches) are passed in explicitly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cem::CemOperator;
use crate::diffengine::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::imagekit::{resize_bicubic, Image, Rect, RegionMask};

pub const PATCH_SIZE: usize = 6;

/// Default weight of the anchoring term in [`diversity_objective`].
pub const ANCHOR_WEIGHT: f64 = 0.1;

/// Strided grid of 6x6 patches restricted to a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub row_stride: usize,
    pub col_stride: usize,
}

impl PatchGrid {
    pub fn new(row_stride: usize, col_stride: usize) -> Result<Self> {
        if row_stride == 0 || col_stride == 0 {
            return Err(Error::InvalidParam("patch strides must be at least 1".into()));
        }
        Ok(PatchGrid { row_stride, col_stride })
    }

    pub fn uniform(stride: usize) -> Result<Self> {
        Self::new(stride, stride)
    }

    /// Patches fully inside `region`, on a grid anchored at the region's
    /// bounding box.
    pub fn positions(&self, region: &RegionMask) -> Vec<Rect> {
        let Some(bb) = region.bbox() else { return Vec::new() };
        let mut out = Vec::new();
        let mut y = bb.y;
        while y + PATCH_SIZE <= bb.y + bb.height {
            let mut x = bb.x;
            while x + PATCH_SIZE <= bb.x + bb.width {
                let r = Rect::new(x, y, PATCH_SIZE, PATCH_SIZE);
                if region.covers(r) {
                    out.push(r);
                }
                x += self.col_stride;
            }
            y += self.row_stride;
        }
        out
    }

    fn nonempty_positions(&self, region: &RegionMask, what: &str) -> Result<Vec<Rect>> {
        let p = self.positions(region);
        if p.is_empty() {
            return Err(Error::EmptyRegion(format!("{what}: no full 6x6 patch inside the region")));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScribbleKind {
    Color,
    Brighten,
    Darken,
    TvMin,
}

/// A user stroke: selected pixels plus, for color strokes, the target color
/// of every selected pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Scribble {
    pub mask: RegionMask,
    pub kind: ScribbleKind,
    /// Full-size target raster; only masked pixels are read. Present for
    /// [`ScribbleKind::Color`].
    pub colors: Option<Image<f64>>,
}

impl Scribble {
    pub fn color(mask: RegionMask, colors: Image<f64>) -> Result<Self> {
        mask.check_dims(colors.width(), colors.height())?;
        if colors.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParam("scribble colors must lie in [0,1]".into()));
        }
        Ok(Scribble { mask, kind: ScribbleKind::Color, colors: Some(colors) })
    }

    /// One color for every masked pixel.
    pub fn solid(mask: RegionMask, rgb: &[f64]) -> Result<Self> {
        let (w, h) = (mask.width(), mask.height());
        let colors = Image::from_fn(w, h, rgb.len(), |c, _, _| rgb[c]);
        Self::color(mask, colors)
    }

    pub fn of_kind(mask: RegionMask, kind: ScribbleKind) -> Self {
        Scribble { mask, kind, colors: None }
    }
}

fn check_mask(x: &Image<f64>, mask: &RegionMask, what: &str) -> Result<()> {
    mask.check_dims(x.width(), x.height())?;
    if mask.is_empty() {
        return Err(Error::EmptyRegion(what.into()));
    }
    Ok(())
}

/// Mask weights repeated over `channels`.
fn mask_image(mask: &RegionMask, channels: usize) -> Image<f64> {
    Image::from_fn(mask.width(), mask.height(), channels, |_, y, x| mask.weight(x, y))
}

/// Sum of scalar nodes.
pub fn sum_scalars(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    match nodes {
        [] => Ok(tape.scalar(0.0)),
        [one] => Ok(*one),
        many => {
            let c = tape.concat(many)?;
            tape.reduce_sum(c)
        }
    }
}

/// `sum_mask w * |x - target|`
fn masked_l1(tape: &mut Tape, x: NodeId, target: &Image<f64>, mask: &RegionMask) -> Result<NodeId> {
    let t = tape.constant(target.clone());
    let d = tape.sub(x, t)?;
    let a = tape.abs(d)?;
    let w = tape.constant(mask_image(mask, target.channels()));
    let m = tape.mul(a, w)?;
    tape.reduce_sum(m)
}

fn patch_node(tape: &mut Tape, x: NodeId, r: Rect) -> Result<NodeId> {
    let c = tape.value(x).channels();
    tape.slice(x, r, 0, c)
}

/// Population variance of every sample of a patch.
fn patch_variance(img: &Image<f64>, r: Rect) -> Result<f64> {
    let p = img.crop(r)?;
    let n = p.len() as f64;
    let m = p.sum() / n;
    Ok(p.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

fn centered(img: &Image<f64>, r: Rect) -> Result<Vec<f64>> {
    let p = img.crop(r)?;
    let m = p.sum() / p.len() as f64;
    Ok(p.data().iter().map(|v| v - m).collect())
}

/// `sum_patches (var(p) - (var(p0) + delta))^2` over a stride-1 grid.
pub fn variance_objective(tape: &mut Tape, x: NodeId, x0: &Image<f64>, region: &RegionMask, delta: f64) -> Result<NodeId> {
    check_mask(x0, region, "variance region")?;
    let grid = PatchGrid::uniform(1)?;
    let mut terms = Vec::new();
    for r in grid.nonempty_positions(region, "variance")? {
        let target = patch_variance(x0, r)? + delta;
        let p = patch_node(tape, x, r)?;
        let v = tape.variance(p)?;
        let d = tape.offset(v, -target)?;
        terms.push(tape.square(d)?);
    }
    sum_scalars(tape, &terms)
}

/// `sum_patches |(p - mean p) - factor (p0 - mean p0)|^2` over a stride-4
/// grid.
pub fn magnitude_objective(tape: &mut Tape, x: NodeId, x0: &Image<f64>, region: &RegionMask, factor: f64) -> Result<NodeId> {
    check_mask(x0, region, "magnitude region")?;
    let grid = PatchGrid::uniform(4)?;
    let mut terms = Vec::new();
    for r in grid.nonempty_positions(region, "magnitude")? {
        let c0 = centered(x0, r)?;
        let target = Image::from_vec(r.width, r.height, x0.channels(), c0.iter().map(|v| factor * v).collect())?;
        let p = patch_node(tape, x, r)?;
        let pc = tape.center(p)?;
        let t = tape.constant(target);
        let d = tape.sub(pc, t)?;
        terms.push(tape.sum_squares(d)?);
    }
    sum_scalars(tape, &terms)
}

/// `sum_mask |x - color|`
pub fn scribble_objective(tape: &mut Tape, x: NodeId, s: &Scribble) -> Result<NodeId> {
    let colors = match (s.kind, &s.colors) {
        (ScribbleKind::Color, Some(c)) => c,
        (ScribbleKind::Color, None) => return Err(Error::InvalidParam("color scribble without colors".into())),
        (k, _) => return Err(Error::InvalidParam(format!("scribble objective needs a color stroke, got {k:?}"))),
    };
    colors.check_same_dims(tape.value(x), "scribble colors")?;
    check_mask(colors, &s.mask, "scribble mask")?;
    masked_l1(tape, x, colors, &s.mask)
}

/// `sum_mask |x - clip(x0 * factor)|`
pub fn brightness_objective(tape: &mut Tape, x: NodeId, x0: &Image<f64>, s: &Scribble, factor: f64) -> Result<NodeId> {
    if !matches!(s.kind, ScribbleKind::Brighten | ScribbleKind::Darken) {
        return Err(Error::InvalidParam(format!("brightness objective needs brighten or darken, got {:?}", s.kind)));
    }
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidParam(format!("brightness factor must be positive, got {factor}")));
    }
    check_mask(x0, &s.mask, "brightness mask")?;
    let target = x0.map(|v| (v * factor).clamp(0.0, 1.0));
    masked_l1(tape, x, &target, &s.mask)
}

/// Overlap of the raster with itself shifted by `(dx, dy)`: the rectangle
/// of pixels `p` with `p + (dx, dy)` also inside.
fn shift_overlap(w: usize, h: usize, dx: isize, dy: isize) -> Option<(Rect, Rect)> {
    let (adx, ady) = (dx.unsigned_abs(), dy.unsigned_abs());
    if adx >= w || ady >= h {
        return None;
    }
    let (ow, oh) = (w - adx, h - ady);
    let a = Rect::new(if dx < 0 { adx } else { 0 }, if dy < 0 { ady } else { 0 }, ow, oh);
    let b = Rect::new((a.x as isize + dx) as usize, (a.y as isize + dy) as usize, ow, oh);
    Some((a, b))
}

/// `sum_p pair_w(p) * |x_p - x_{p + shift}|` over the pixels whose pair
/// weight is nonzero. `None` when no pair exists.
fn shifted_pair_l1(tape: &mut Tape, x: NodeId, region: &RegionMask, dx: isize, dy: isize) -> Result<Option<NodeId>> {
    let (w, h, c) = tape.value(x).dims();
    let Some((a, b)) = shift_overlap(w, h, dx, dy) else { return Ok(None) };
    let pair = Image::from_fn(a.width, a.height, 1, |_, y, xx| {
        region.weight(a.x + xx, a.y + y) * region.weight(b.x + xx, b.y + y)
    });
    if pair.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let weights = Image::from_fn(a.width, a.height, c, |_, y, xx| pair.get(0, y, xx));
    let pa = tape.slice(x, a, 0, c)?;
    let pb = tape.slice(x, b, 0, c)?;
    let d = tape.sub(pa, pb)?;
    let ad = tape.abs(d)?;
    let wn = tape.constant(weights);
    let m = tape.mul(ad, wn)?;
    Ok(Some(tape.reduce_sum(m)?))
}

/// Sum over masked pixels of `|x_p - x_q|` for each of the 8 neighbors `q`
/// that is also masked. Each unordered pair is counted twice.
pub fn local_tv_objective(tape: &mut Tape, x: NodeId, s: &Scribble) -> Result<NodeId> {
    if s.kind != ScribbleKind::TvMin {
        return Err(Error::InvalidParam(format!("local TV needs a tv_min stroke, got {:?}", s.kind)));
    }
    let (w, h, _) = tape.value(x).dims();
    s.mask.check_dims(w, h)?;
    if s.mask.is_empty() {
        return Err(Error::EmptyRegion("tv_min mask".into()));
    }
    let mut terms = Vec::new();
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if (dx, dy) == (0, 0) {
                continue;
            }
            if let Some(t) = shifted_pair_l1(tape, x, &s.mask, dx, dy)? {
                terms.push(t);
            }
        }
    }
    sum_scalars(tape, &terms)
}

/// Integer shift of a rectangle, checked against the raster bounds.
pub fn shifted_rect(rect: Rect, offset: (isize, isize), width: usize, height: usize) -> Result<Rect> {
    let x = rect.x as isize + offset.0;
    let y = rect.y as isize + offset.1;
    let out = (x >= 0 && y >= 0).then(|| Rect::new(x as usize, y as usize, rect.width, rect.height));
    match out {
        Some(r) if r.fits_in(width, height) => Ok(r),
        _ => Err(Error::InvalidParam(format!("{rect:?} shifted by {offset:?} leaves {width}x{height}"))),
    }
}

/// Pastes `content`, resized to `rect`, at `rect + offset` in a copy of
/// `x_hat` and projects the result onto the consistent set.
pub fn imprint_baseline(
    op: &CemOperator<f64>,
    y: &Image<f64>,
    x_hat: &Image<f64>,
    content: &Image<f64>,
    rect: Rect,
    offset: (isize, isize),
) -> Result<Image<f64>> {
    let placed = shifted_rect(rect, offset, x_hat.width(), x_hat.height())?;
    if content.channels() != x_hat.channels() {
        return Err(Error::InvalidDims(format!(
            "imprint content has {} channels, image {}",
            content.channels(),
            x_hat.channels()
        )));
    }
    let resized = resize_bicubic(content, placed.width, placed.height)?;
    let mut canvas = x_hat.clone();
    canvas.paste(&resized, placed.y, placed.x)?;
    op.cem_apply(&canvas, y)
}

/// `|(x - baseline) restricted to rect|_1`
pub fn imprint_objective(tape: &mut Tape, x: NodeId, baseline: &Image<f64>, rect: Rect) -> Result<NodeId> {
    baseline.check_same_dims(tape.value(x), "imprint baseline")?;
    let target = baseline.crop(rect)?;
    let p = patch_node(tape, x, rect)?;
    let t = tape.constant(target);
    let d = tape.sub(p, t)?;
    tape.l1(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchVariant {
    #[default]
    Plain,
    VariancePreserving,
}

const NORM_EPS: f64 = 1e-12;

/// Mean-removed stride-2 patches of `source_img` inside `source`, scaled to
/// unit variance for the variance-preserving variant.
pub fn source_patches(source_img: &Image<f64>, source: &RegionMask, variant: PatchVariant) -> Result<Vec<Vec<f64>>> {
    check_mask(source_img, source, "patch source region")?;
    let grid = PatchGrid::uniform(2)?;
    grid.nonempty_positions(source, "patch source")?
        .into_iter()
        .map(|r| {
            let c = centered(source_img, r)?;
            Ok(match variant {
                PatchVariant::Plain => c,
                PatchVariant::VariancePreserving => {
                    let var = c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64;
                    let s = (var + NORM_EPS).sqrt();
                    c.into_iter().map(|v| v / s).collect()
                }
            })
        })
        .collect()
}

/// Each stride-4 target patch, mean-removed, is pulled toward its nearest
/// source patch. The variance-preserving variant matches unit-variance
/// patches and adds `(var(t) - var(t0))^2` per target.
pub fn patch_collection_objective(
    tape: &mut Tape,
    x: NodeId,
    x0: &Image<f64>,
    target: &RegionMask,
    sources: Arc<Vec<Vec<f64>>>,
    variant: PatchVariant,
) -> Result<NodeId> {
    check_mask(x0, target, "patch target region")?;
    if sources.is_empty() {
        return Err(Error::EmptyRegion("no source patches".into()));
    }
    let grid = PatchGrid::uniform(4)?;
    let mut terms = Vec::new();
    for r in grid.nonempty_positions(target, "patch target")? {
        let p = patch_node(tape, x, r)?;
        let pc = tape.center(p)?;
        match variant {
            PatchVariant::Plain => terms.push(tape.min_distance(pc, sources.clone())?),
            PatchVariant::VariancePreserving => {
                let var = tape.variance(p)?;
                let ve = tape.offset(var, NORM_EPS)?;
                let sd = tape.sqrt(ve)?;
                let pn = tape.div(pc, sd)?;
                terms.push(tape.min_distance(pn, sources.clone())?);
                let d = tape.offset(var, -patch_variance(x0, r)?)?;
                terms.push(tape.square(d)?);
            }
        }
    }
    sum_scalars(tape, &terms)
}

/// A translation direction and its period in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodAxis {
    pub direction: [f64; 2],
    pub period: usize,
}

impl PeriodAxis {
    pub fn horizontal(period: usize) -> Self {
        PeriodAxis { direction: [1.0, 0.0], period }
    }

    pub fn vertical(period: usize) -> Self {
        PeriodAxis { direction: [0.0, 1.0], period }
    }

    /// Pixel shift `round(period * direction)`.
    pub fn shift(&self) -> Result<(isize, isize)> {
        let [dx, dy] = self.direction;
        let n = (dx * dx + dy * dy).sqrt();
        if self.period == 0 || !((n - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidParam(format!("period axis needs a unit direction and period >= 1: {self:?}")));
        }
        let p = self.period as f64;
        Ok(((p * dx).round() as isize, (p * dy).round() as isize))
    }
}

/// `sum_axes |(x - shift(x)) restricted to region ∩ shifted region|_1`
pub fn periodicity_objective(tape: &mut Tape, x: NodeId, region: &RegionMask, axes: &[PeriodAxis]) -> Result<NodeId> {
    let (w, h, _) = tape.value(x).dims();
    region.check_dims(w, h)?;
    if axes.is_empty() || axes.len() > 2 {
        return Err(Error::InvalidParam(format!("periodicity takes one or two axes, got {}", axes.len())));
    }
    let bin = region.binarized();
    let mut terms = Vec::new();
    for a in axes {
        let (dx, dy) = a.shift()?;
        match shifted_pair_l1(tape, x, &bin, dx, dy)? {
            Some(t) => terms.push(t),
            None => return Err(Error::InvalidParam(format!("region does not overlap its translate by {:?}", (dx, dy)))),
        }
    }
    sum_scalars(tape, &terms)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Integer lag in `2..=extent/2` maximizing the correlation between the
/// region and its translate along `direction`, ties to the smallest lag.
/// `extent` is the bounding-box length along the direction.
pub fn estimate_period(x: &Image<f64>, region: &RegionMask, direction: [f64; 2]) -> Result<usize> {
    check_mask(x, region, "period region")?;
    let bb = region.bbox().expect("nonempty mask");
    let [ux, uy] = direction;
    let n = (ux * ux + uy * uy).sqrt();
    if !((n - 1.0).abs() <= 1e-6) {
        return Err(Error::InvalidParam(format!("direction {direction:?} is not a unit vector")));
    }
    let extent = {
        let ex = if ux.abs() > 1e-9 { (bb.width as f64 / ux.abs()).floor() } else { f64::INFINITY };
        let ey = if uy.abs() > 1e-9 { (bb.height as f64 / uy.abs()).floor() } else { f64::INFINITY };
        ex.min(ey) as usize
    };
    if extent < 4 {
        return Err(Error::InvalidParam(format!("region extent {extent} too short to search lags")));
    }
    let luma = x.luma();
    let samples: Vec<f64> = (0..x.height())
        .flat_map(|yy| (0..x.width()).map(move |xx| (xx, yy)))
        .filter(|&(xx, yy)| region.is_set(xx, yy))
        .map(|(xx, yy)| luma.get(0, yy, xx))
        .collect();
    let first = samples[0];
    if samples.iter().all(|&v| v == first) {
        return Err(Error::Estimation("region has zero variance".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for lag in 2..=extent / 2 {
        let (dx, dy) = ((lag as f64 * ux).round() as isize, (lag as f64 * uy).round() as isize);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for yy in 0..x.height() as isize {
            for xx in 0..x.width() as isize {
                let (qx, qy) = (xx + dx, yy + dy);
                if qx < 0 || qy < 0 || qx >= x.width() as isize || qy >= x.height() as isize {
                    continue;
                }
                if region.is_set(xx as usize, yy as usize) && region.is_set(qx as usize, qy as usize) {
                    a.push(luma.get(0, yy as usize, xx as usize));
                    b.push(luma.get(0, qy as usize, qx as usize));
                }
            }
        }
        if a.len() < 2 {
            continue;
        }
        if let Some(r) = pearson(&a, &b) {
            if best.map_or(true, |(br, _)| r > br + 1e-12) {
                best = Some((r, lag));
            }
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| Error::Estimation("no lag has a defined correlation".into()))
}

/// `-sum_{i<j} |x_i - x_j|_1`, plus `mu * sum_i |x_i - anchor|_1` when
/// anchored.
pub fn diversity_objective(tape: &mut Tape, outputs: &[NodeId], anchor: Option<(&Image<f64>, f64)>) -> Result<NodeId> {
    if outputs.len() < 2 {
        return Err(Error::InvalidParam(format!("diversity needs at least 2 outputs, got {}", outputs.len())));
    }
    let mut pairs = Vec::new();
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            let d = tape.sub(outputs[i], outputs[j])?;
            pairs.push(tape.l1(d)?);
        }
    }
    let spread = sum_scalars(tape, &pairs)?;
    let neg = tape.scale(spread, -1.0)?;
    let Some((cur, mu)) = anchor else { return Ok(neg) };
    let c = tape.constant(cur.clone());
    let mut dists = Vec::new();
    for &o in outputs {
        let d = tape.sub(o, c)?;
        dists.push(tape.l1(d)?);
    }
    let total = sum_scalars(tape, &dists)?;
    let anchored = tape.scale(total, mu)?;
    tape.add(neg, anchored)
}

/// Anisotropic total variation with forward differences, no wraparound.
pub fn tv_on_tape(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let (w, h, _) = tape.value(x).dims();
    let full = RegionMask::full(w, h);
    let mut terms = Vec::new();
    for (dx, dy) in [(1, 0), (0, 1)] {
        if let Some(t) = shifted_pair_l1(tape, x, &full, dx, dy)? {
            terms.push(t);
        }
    }
    sum_scalars(tape, &terms)
}

/// Selection carried in a job spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegionSpec {
    All,
    Rect { x: usize, y: usize, width: usize, height: usize },
    Polygon { points: Vec<[f64; 2]> },
    Circle { cx: f64, cy: f64, radius: f64 },
    /// Alternating unset/set run lengths in raster order.
    Rle { runs: Vec<usize> },
}

impl RegionSpec {
    pub fn to_mask(&self, width: usize, height: usize) -> Result<RegionMask> {
        match self {
            RegionSpec::All => Ok(RegionMask::full(width, height)),
            RegionSpec::Rect { x, y, width: w, height: h } => RegionMask::from_rect(width, height, Rect::new(*x, *y, *w, *h)),
            RegionSpec::Polygon { points } => {
                let v: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
                RegionMask::from_polygon(width, height, &v)
            }
            RegionSpec::Circle { cx, cy, radius } => Ok(RegionMask::from_circle(width, height, *cx, *cy, *radius)),
            RegionSpec::Rle { runs } => RegionMask::from_rle(width, height, runs),
        }
    }
}

/// Raw pixels in planar layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelData {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PixelData {
    pub fn to_image(&self) -> Result<Image<f64>> {
        Image::from_vec(self.width, self.height, self.channels, self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprintContent {
    /// Copy of a rectangle of the image at job start.
    Rect(Rect),
    Pixels(PixelData),
}

/// Tool name and its parameters, `{"tool": ..., "params": {...}}` on the
/// wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", content = "params", rename_all = "snake_case")]
pub enum ToolSpec {
    /// One color for the whole stroke, or one per selected pixel in raster
    /// order.
    Scribble {
        #[serde(default)]
        color: Option<Vec<f64>>,
        #[serde(default)]
        colors: Option<Vec<Vec<f64>>>,
    },
    Brighten { factor: f64 },
    Darken { factor: f64 },
    TvMin {},
    Variance { delta: f64 },
    Magnitude { factor: f64 },
    Imprint {
        content: ImprintContent,
        target: Rect,
        #[serde(default)]
        offset: (isize, isize),
    },
    PatchCollection {
        source: RegionSpec,
        #[serde(default)]
        variant: PatchVariant,
    },
    /// Axes with `period = 0` are estimated from the job-start image.
    Periodicity { axes: Vec<PeriodAxis> },
}

impl ToolSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ToolSpec::Scribble { .. } => "scribble",
            ToolSpec::Brighten { .. } => "brighten",
            ToolSpec::Darken { .. } => "darken",
            ToolSpec::TvMin {} => "tv_min",
            ToolSpec::Variance { .. } => "variance",
            ToolSpec::Magnitude { .. } => "magnitude",
            ToolSpec::Imprint { .. } => "imprint",
            ToolSpec::PatchCollection { .. } => "patch_collection",
            ToolSpec::Periodicity { .. } => "periodicity",
        }
    }
}

fn default_step_size() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJobSpec {
    #[serde(flatten)]
    pub tool: ToolSpec,
    pub region: RegionSpec,
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    /// Latent samples allowed to move; defaults to `region`.
    #[serde(default)]
    pub latent_region: Option<RegionSpec>,
    #[serde(default)]
    pub optimizer: JobOptimizer,
}

/// Step rule of an edit job. `Fixed` and `Polyak` backtrack, so accepted
/// steps never increase the objective; the other two may go up on the way
/// and install the best iterate they saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobOptimizer {
    /// `step_size` as the first trial of every iteration.
    #[default]
    Fixed,
    /// Relaxed Polyak steps against the lower bound 0 that every edit
    /// objective has; `step_size` is ignored.
    Polyak,
    /// Polyak steps with relaxation 1.6 and no backtracking. Much faster
    /// than `Polyak` on exactly attainable L1 targets such as periodicity.
    PolyakRelaxed,
    Adam,
}

impl EditJobSpec {
    pub fn new(tool: ToolSpec, region: RegionSpec, steps: usize, step_size: f64) -> Self {
        EditJobSpec { tool, region, steps, step_size, latent_region: None, optimizer: JobOptimizer::Fixed }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: EditJobSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidParam(format!("edit spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("edit spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParam("steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidParam(format!("step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// An objective with its job-start constants resolved, ready to be wired
/// onto a tape any number of times.
#[derive(Debug, Clone)]
pub enum PreparedObjective {
    Scribble(Scribble),
    Brightness { scribble: Scribble, x0: Image<f64>, factor: f64 },
    LocalTv(Scribble),
    Variance { x0: Image<f64>, region: RegionMask, delta: f64 },
    Magnitude { x0: Image<f64>, region: RegionMask, factor: f64 },
    Imprint { baseline: Image<f64>, rect: Rect },
    PatchCollection { x0: Image<f64>, target: RegionMask, sources: Arc<Vec<Vec<f64>>>, variant: PatchVariant },
    Periodicity { region: RegionMask, axes: Vec<PeriodAxis> },
}

impl PreparedObjective {
    /// Resolves `tool` against the image at job start.
    pub fn prepare(
        tool: &ToolSpec,
        region: &RegionMask,
        x0: &Image<f64>,
        op: &CemOperator<f64>,
        y: &Image<f64>,
    ) -> Result<Self> {
        let (w, h, ch) = x0.dims();
        region.check_dims(w, h)?;
        Ok(match tool {
            ToolSpec::Scribble { color, colors } => {
                let s = match (color, colors) {
                    (Some(rgb), None) => {
                        if rgb.len() != ch {
                            return Err(Error::InvalidParam(format!("color has {} entries for {ch} channels", rgb.len())));
                        }
                        Scribble::solid(region.clone(), rgb)?
                    }
                    (None, Some(list)) => {
                        let mut img = x0.clip01();
                        let set: Vec<(usize, usize)> = (0..h)
                            .flat_map(|yy| (0..w).map(move |xx| (xx, yy)))
                            .filter(|&(xx, yy)| region.is_set(xx, yy))
                            .collect();
                        if list.len() != set.len() || list.iter().any(|c| c.len() != ch) {
                            return Err(Error::InvalidParam(format!(
                                "{} colors for {} selected pixels of {ch} channels",
                                list.len(),
                                set.len()
                            )));
                        }
                        for ((xx, yy), c) in set.into_iter().zip(list) {
                            for (k, v) in c.iter().enumerate() {
                                img.set(k, yy, xx, *v);
                            }
                        }
                        Scribble::color(region.clone(), img)?
                    }
                    _ => return Err(Error::InvalidParam("scribble takes exactly one of color, colors".into())),
                };
                PreparedObjective::Scribble(s)
            }
            ToolSpec::Brighten { factor } | ToolSpec::Darken { factor } => {
                let kind = if matches!(tool, ToolSpec::Brighten { .. }) { ScribbleKind::Brighten } else { ScribbleKind::Darken };
                if !(*factor > 0.0) {
                    return Err(Error::InvalidParam(format!("brightness factor must be positive, got {factor}")));
                }
                PreparedObjective::Brightness { scribble: Scribble::of_kind(region.clone(), kind), x0: x0.clone(), factor: *factor }
            }
            ToolSpec::TvMin {} => PreparedObjective::LocalTv(Scribble::of_kind(region.clone(), ScribbleKind::TvMin)),
            ToolSpec::Variance { delta } => PreparedObjective::Variance { x0: x0.clone(), region: region.clone(), delta: *delta },
            ToolSpec::Magnitude { factor } => PreparedObjective::Magnitude { x0: x0.clone(), region: region.clone(), factor: *factor },
            ToolSpec::Imprint { content, target, offset } => {
                let content = match content {
                    ImprintContent::Rect(r) => x0.crop(*r)?,
                    ImprintContent::Pixels(p) => p.to_image()?,
                };
                let baseline = imprint_baseline(op, y, x0, &content, *target, *offset)?;
                let rect = shifted_rect(*target, *offset, w, h)?;
                PreparedObjective::Imprint { baseline, rect }
            }
            ToolSpec::PatchCollection { source, variant } => {
                let src = source.to_mask(w, h)?;
                let sources = Arc::new(source_patches(x0, &src, *variant)?);
                PreparedObjective::PatchCollection { x0: x0.clone(), target: region.clone(), sources, variant: *variant }
            }
            ToolSpec::Periodicity { axes } => {
                let axes = axes
                    .iter()
                    .map(|a| {
                        if a.period > 0 {
                            return Ok(*a);
                        }
                        Ok(PeriodAxis { direction: a.direction, period: estimate_period(x0, region, a.direction)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                PreparedObjective::Periodicity { region: region.clone(), axes }
            }
        })
    }

    pub fn build(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            PreparedObjective::Scribble(s) => scribble_objective(tape, x, s),
            PreparedObjective::Brightness { scribble, x0, factor } => brightness_objective(tape, x, x0, scribble, *factor),
            PreparedObjective::LocalTv(s) => local_tv_objective(tape, x, s),
            PreparedObjective::Variance { x0, region, delta } => variance_objective(tape, x, x0, region, *delta),
            PreparedObjective::Magnitude { x0, region, factor } => magnitude_objective(tape, x, x0, region, *factor),
            PreparedObjective::Imprint { baseline, rect } => imprint_objective(tape, x, baseline, *rect),
            PreparedObjective::PatchCollection { x0, target, sources, variant } => {
                patch_collection_objective(tape, x, x0, target, sources.clone(), *variant)
            }
            PreparedObjective::Periodicity { region, axes } => periodicity_objective(tape, x, region, axes),
        }
    }

    /// Objective value at `x` without keeping the tape.
    pub fn evaluate(&self, x: &Image<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let n = tape.constant(x.clone());
        let r = self.build(&mut tape, n)?;
        Ok(tape.scalar_value(r))
    }
}
