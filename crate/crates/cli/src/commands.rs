use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cemx_core::cem::CemOperator;
use cemx_core::edit::EditJobSpec;
use cemx_core::explorer::{diversity_metric, load_raster, psnr, rmse, save_raster, Session, SessionConfig};
use cemx_core::generator::{bicubic_upsample, generate, ControlSignal, GeneratorParams, Parameterization};
use cemx_core::gradcheck::check_all;
use cemx_core::imagekit::{load_image, save_image, BoundaryMode, Image};
use cemx_core::kernel::{bicubic_kernel, invert_composed, load_kernel, save_kernel, Kernel};
use cemx_core::losses::{calibrate_from_images, PercentileCalibration};
use cemx_core::training::{train_toy, TrainConfig};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::*;

/// What a command prints. `failure` is reported after the output, for
/// commands that still have something to show when they fail.
pub struct Output {
    pub json: Value,
    pub text: String,
    pub failure: Option<CliError>,
}

impl Output {
    fn ok(json: Value, text: String) -> CliResult<Self> {
        Ok(Output { json, text, failure: None })
    }
}

pub fn run(cli: &Cli) -> CliResult<Output> {
    let seed = cli.seed;
    match &cli.command {
        Command::Cem(CemCmd::Apply { lr, cand, weights, op, out }) => cem_apply(lr, cand.as_deref(), weights.as_deref(), op, out),
        Command::Cem(CemCmd::Check { lr, hr, op, tol }) => cem_check(lr, hr, op, *tol),
        Command::Kernel(KernelCmd::Bicubic { scale, out }) => kernel_bicubic(*scale, out),
        Command::Kernel(KernelCmd::Invert { kernel, scale, grid, eps, no_normalize, report }) => {
            kernel_invert(kernel, *scale, *grid, *eps, !no_normalize, *report)
        }
        Command::Session(SessionCmd::Init { lr, op, mode, weights, tau, out }) => {
            session_init(lr, op, *mode, weights.as_deref(), *tau, out, seed)
        }
        Command::Edit(EditCmd::Run { session, spec, out }) => edit_run(session, spec, out.as_deref().unwrap_or(session)),
        Command::Metrics(a) => metrics(a),
        Command::Calibrate(a) => calibrate(a, seed),
        Command::Train(TrainCmd::Toy(a)) => train(a, seed),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Serve(a) => serve(a),
    }
}

fn is_raster(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("bin"))
}

fn load_img(path: &Path) -> CliResult<Image<f64>> {
    if !path.exists() {
        return Err(CliError::Data(format!("{}: no such file", path.display())));
    }
    Ok(if is_raster(path) { load_raster(path)? } else { load_image(path)? })
}

fn save_img(img: &Image<f64>, path: &Path) -> CliResult<()> {
    if is_raster(path) {
        save_raster(img, path)?
    } else {
        save_image(img, path)?
    }
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ["png", "pgm", "bin"].contains(&e.to_ascii_lowercase().as_str()))
}

/// Images in a directory sorted by name, or the path itself when it is a file.
fn list_images(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let rd = std::fs::read_dir(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no png, pgm or bin images", path.display())));
    }
    Ok(files)
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<Image<f64>>> {
    paths.iter().map(|p| load_img(p)).collect()
}

fn kernel_for(path: Option<&Path>, scale: usize, normalize: bool) -> CliResult<Kernel<f64>> {
    if scale == 0 {
        return Err(CliError::Usage("--scale must be at least 1".into()));
    }
    Ok(match path {
        Some(p) => load_kernel(p, normalize)?,
        None => bicubic_kernel(scale),
    })
}

fn operator(a: &OperatorArgs, hr_w: usize, hr_h: usize) -> CliResult<CemOperator<f64>> {
    let k = kernel_for(a.kernel.as_deref(), a.scale, !a.no_normalize)?;
    Ok(CemOperator::new(k, a.scale, hr_w, hr_h, a.boundary)?)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// `(linf, rms, interior linf)`; the interior value only for replicate.
fn residuals(op: &CemOperator<f64>, x: &Image<f64>, y: &Image<f64>) -> CliResult<(f64, f64, Option<f64>)> {
    let (linf, rms) = op.residual(x, y)?;
    let interior = match op.boundary() {
        BoundaryMode::Periodic => None,
        BoundaryMode::Replicate => Some(op.residual_with_margin(x, y, op.interior_margin_lr())?.0),
    };
    Ok((linf, rms, interior))
}

fn cem_apply(lr: &Path, cand: Option<&Path>, weights: Option<&Path>, a: &OperatorArgs, out: &Path) -> CliResult<Output> {
    let y = load_img(lr)?;
    let (w, h) = (y.width() * a.scale, y.height() * a.scale);
    let op = operator(a, w, h)?;
    let (x_inc, source) = match (cand, weights) {
        (Some(p), _) => (load_img(p)?, "candidate"),
        (None, Some(wp)) => {
            let params = GeneratorParams::load(wp)?;
            (generate(&params, &y, &ControlSignal::zeros(w, h), &op)?.x_inc, "generator")
        }
        (None, None) => (bicubic_upsample(&y, a.scale), "bicubic"),
    };
    let x_hat = op.cem_apply(&x_inc, &y)?;
    let (linf, rms, interior) = residuals(&op, &x_hat, &y)?;
    save_img(&x_hat, out)?;
    let stored = if is_raster(out) { linf } else { residuals(&op, &load_img(out)?, &y)?.0 };
    let mut text = format!("wrote {} ({w}x{h}, from {source})\nlinf {linf:.3e}\nrms {rms:.3e}\n", out.display());
    if let Some(i) = interior {
        let _ = writeln!(text, "interior linf {i:.3e}");
    }
    if !is_raster(out) {
        let _ = writeln!(text, "stored linf {stored:.3e} (8-bit)");
    }
    if op.floored_bins() > 0 {
        let _ = writeln!(text, "warning: {} spectrum bins floored", op.floored_bins());
    }
    Output::ok(
        json!({
            "out": out.display().to_string(), "width": w, "height": h, "source": source,
            "linf": linf, "rms": rms, "interior_linf": interior, "stored_linf": stored,
            "floored_bins": op.floored_bins(),
        }),
        text,
    )
}

fn cem_check(lr: &Path, hr: &Path, a: &OperatorArgs, tol: Option<f64>) -> CliResult<Output> {
    let y = load_img(lr)?;
    let x = load_img(hr)?;
    if (x.width(), x.height()) != (y.width() * a.scale, y.height() * a.scale) {
        return Err(CliError::Data(format!(
            "HR {}x{} is not {}x the LR {}x{}",
            x.width(),
            x.height(),
            a.scale,
            y.width(),
            y.height()
        )));
    }
    let op = operator(a, x.width(), x.height())?;
    let (linf, rms, interior) = residuals(&op, &x, &y)?;
    let mut text = format!("linf {linf:.3e}\nrms {rms:.3e}\n");
    if let Some(i) = interior {
        let _ = writeln!(text, "interior linf {i:.3e}");
    }
    let within = tol.map(|t| linf <= t);
    let failure = match (tol, within) {
        (Some(t), Some(false)) => Some(CliError::Numeric(format!("residual {linf:.3e} exceeds tolerance {t:.1e}"))),
        _ => None,
    };
    Ok(Output {
        json: json!({ "linf": linf, "rms": rms, "interior_linf": interior, "tol": tol, "within_tol": within }),
        text,
        failure,
    })
}

fn kernel_bicubic(scale: usize, out: &Path) -> CliResult<Output> {
    let k = kernel_for(None, scale, true)?;
    save_kernel(&k, out)?;
    Output::ok(
        json!({ "out": out.display().to_string(), "rows": k.rows(), "cols": k.cols(), "sum": k.sum() }),
        format!("wrote {} ({}x{} taps)\n", out.display(), k.rows(), k.cols()),
    )
}

fn kernel_invert(path: &Path, scale: usize, grid: usize, eps: f64, normalize: bool, report: bool) -> CliResult<Output> {
    if grid == 0 {
        return Err(CliError::Usage("--grid must be positive".into()));
    }
    if !(eps > 0.0) {
        return Err(CliError::Usage("--eps must be positive".into()));
    }
    let k = kernel_for(Some(path), scale, normalize)?;
    let inv = invert_composed(&k, scale, grid, grid, eps)?;
    let gains: Vec<f64> = inv.spectrum().iter().map(|z| z.norm()).collect();
    let max_gain = inv.max_gain();
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let mut text = format!("inverse filter on {grid}x{grid} grid, {} floored bins\n", inv.floored_bins());
    if report {
        let _ = writeln!(text, "kernel {}x{}, sum {:.6}", k.rows(), k.cols(), k.sum());
        let _ = writeln!(text, "floor {:.3e}", inv.eps());
        let _ = writeln!(text, "gain min {min_gain:.6e} max {max_gain:.6e} ratio {:.3e}", max_gain / min_gain);
    }
    Output::ok(
        json!({
            "grid": grid, "floored_bins": inv.floored_bins(), "floor": inv.eps(),
            "min_gain": min_gain, "max_gain": max_gain, "kernel_sum": k.sum(),
        }),
        text,
    )
}

fn session_init(
    lr: &Path,
    a: &OperatorArgs,
    mode: SessionMode,
    weights: Option<&Path>,
    tau: Option<f64>,
    out: &Path,
    seed: u64,
) -> CliResult<Output> {
    let y = load_img(lr)?;
    let (w, h) = (y.width() * a.scale, y.height() * a.scale);
    let op = Arc::new(operator(a, w, h)?);
    let psi = match (mode, weights) {
        (SessionMode::Direct, Some(_)) => return Err(CliError::Usage("--weights needs --mode generator".into())),
        (SessionMode::Direct, None) => Parameterization::Direct,
        (SessionMode::Generator, Some(p)) => Parameterization::Network(Arc::new(GeneratorParams::load(p)?)),
        (SessionMode::Generator, None) => Parameterization::Network(Arc::new(GeneratorParams::toy(a.scale, y.channels(), seed, false))),
    };
    let mut config = SessionConfig::default();
    if let Some(t) = tau {
        config.tau = t;
    }
    let s = Session::new(y, op, psi, config)?;
    s.export(out)?;
    let (linf, rms) = s.consistency()?;
    Output::ok(
        json!({
            "out": out.display().to_string(), "width": w, "height": h, "scale": a.scale,
            "mode": if s.is_direct() { "direct" } else { "generator" }, "linf": linf, "rms": rms,
        }),
        format!("wrote session {} ({w}x{h})\n", out.display()),
    )
}

fn edit_run(dir: &Path, spec_path: &Path, out: &Path) -> CliResult<Output> {
    let mut s = Session::import(dir)?;
    let text = std::fs::read_to_string(spec_path).map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let spec = EditJobSpec::from_json(&text)?;
    let outcome = s.run_edit(&spec)?;
    s.export(out)?;
    let (linf, rms) = s.consistency()?;
    let last = outcome.trace.last().copied().unwrap_or(outcome.initial);
    Output::ok(
        json!({
            "out": out.display().to_string(), "initial": outcome.initial, "final": last,
            "accepted_steps": outcome.trace.len(), "stalled": outcome.stalled, "linf": linf, "rms": rms,
        }),
        format!(
            "objective {:.6e} -> {last:.6e} in {} steps{}\nlinf {linf:.3e}\nrms {rms:.3e}\n",
            outcome.initial,
            outcome.trace.len(),
            if outcome.stalled { " (stalled)" } else { "" }
        ),
    )
}

fn metrics(a: &MetricsArgs) -> CliResult<Output> {
    let files = list_images(&a.outputs)?;
    let outs = load_all(&files)?;
    let reference = a.reference.as_deref().map(load_img).transpose()?;
    match a.metric {
        Metric::Rmse | Metric::Psnr => {
            let r = reference.ok_or_else(|| CliError::Usage("--ref is required for rmse and psnr".into()))?;
            let f = if a.metric == Metric::Rmse { rmse } else { psnr };
            let name = if a.metric == Metric::Rmse { "rmse" } else { "psnr" };
            let mut text = String::new();
            let mut rows = Vec::new();
            for (p, img) in files.iter().zip(&outs) {
                let v = f(img, &r)?;
                let _ = writeln!(text, "{} {name} {v:.6}", file_name(p));
                rows.push(json!({ "file": file_name(p), name: v }));
            }
            let vals: Vec<f64> = rows.iter().map(|r| r[name].as_f64().unwrap_or(f64::NAN)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let _ = writeln!(text, "mean {name} {mean:.6}");
            Output::ok(json!({ "metric": name, "outputs": rows, "mean": mean }), text)
        }
        Metric::Diversity => {
            let scale = a.scale.ok_or_else(|| CliError::Usage("--scale is required for diversity".into()))?;
            let (w, h) = (outs[0].width(), outs[0].height());
            let k = kernel_for(a.kernel.as_deref(), scale, !a.no_normalize)?;
            let op = CemOperator::new(k, scale, w, h, a.boundary)?;
            let rep = diversity_metric(&outs, &op, reference.as_ref())?;
            let mut text = format!("sigma {:.6} over {} outputs\n", rep.sigma, outs.len());
            if let (Some(m), Some(s)) = (rep.rmse_mean, rep.rmse_std) {
                let _ = writeln!(text, "rmse mean {m:.6} std {s:.6}");
            }
            Output::ok(
                json!({
                    "metric": "diversity", "sigma": rep.sigma, "count": outs.len(),
                    "files": files.iter().map(|p| file_name(p)).collect::<Vec<_>>(),
                    "rmse": rep.rmse, "rmse_mean": rep.rmse_mean, "rmse_std": rep.rmse_std,
                }),
                text,
            )
        }
    }
}

fn calibrate(a: &CalibrateArgs, seed: u64) -> CliResult<Output> {
    let images = load_all(&list_images(&a.images)?)?;
    let cal = match &a.weights {
        None => calibrate_from_images(&images, None, seed)?,
        Some(wp) => {
            let params = GeneratorParams::load(wp)?;
            let scale = a.scale.unwrap_or(params.factor);
            let k = kernel_for(a.kernel.as_deref(), scale, !a.no_normalize)?;
            let psi = Parameterization::Network(Arc::new(params));
            calibrate_from_images(&images, Some((&psi, &k, scale)), seed)?
        }
    };
    std::fs::write(&a.out, cal.to_json()).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let mut text = format!("wrote {} from {} images\n", a.out.display(), images.len());
    for (name, [lo, hi]) in ["s11", "s12", "s22"].iter().zip(cal.entries()) {
        let _ = writeln!(text, "{name} p5 {lo:.6e} p95 {hi:.6e}");
    }
    Output::ok(json!({ "out": a.out.display().to_string(), "images": images.len(), "calibration": cal }), text)
}

fn train(a: &TrainToyArgs, seed: u64) -> CliResult<Output> {
    let images = load_all(&list_images(&a.images)?)?;
    let kernel = kernel_for(a.kernel.as_deref(), a.scale, !a.no_normalize)?;
    let init = match &a.weights {
        Some(p) => GeneratorParams::load(p)?,
        None => GeneratorParams::toy(a.scale, images[0].channels(), seed, true),
    };
    let cal = match &a.calibration {
        Some(p) => PercentileCalibration::from_json(
            &std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        )?,
        None => PercentileCalibration::default(),
    };
    let cfg = TrainConfig {
        steps: a.steps,
        crop: a.crop,
        factor: a.scale,
        generator_lr: a.generator_lr,
        critic_lr: a.critic_lr,
        map_iters: a.map_iters,
        seed,
        ..TrainConfig::default()
    };
    let report = train_toy(&images, &kernel, init, &cal, &cfg)?;
    report.params.save(&a.out)?;
    if let Some(h) = &a.history {
        let doc = serde_json::to_string_pretty(&report.history).expect("history serializes");
        std::fs::write(h, doc).map_err(|e| CliError::Data(format!("{}: {e}", h.display())))?;
    }
    let opened = report.history.iter().find(|s| s.gate_open).map(|s| s.step);
    let last_d = report.history.last().map(|s| s.loss_d);
    let last_g = report.history.iter().rev().find_map(|s| s.loss_g);
    let mut text = format!(
        "wrote {} after {} steps, {} generator updates\n",
        a.out.display(),
        report.history.len(),
        report.generator_steps()
    );
    match opened {
        Some(s) => {
            let _ = writeln!(text, "gate opened at step {s}");
        }
        None => text.push_str("gate never opened\n"),
    }
    if let Some(d) = last_d {
        let _ = writeln!(text, "final critic loss {d:.6e}");
    }
    if let Some(g) = last_g {
        let _ = writeln!(text, "final generator loss {g:.6e}");
    }
    Output::ok(
        json!({
            "out": a.out.display().to_string(), "steps": report.history.len(),
            "generator_steps": report.generator_steps(), "gate_opened_at": opened,
            "final_loss_d": last_d, "final_loss_g": last_g,
        }),
        text,
    )
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> CliResult<Output> {
    if !a.all && a.only.is_none() {
        return Err(CliError::Usage("pass --all or --only NAME".into()));
    }
    let mut checks = check_all(a.size, seed, a.tol)?;
    if let Some(f) = &a.only {
        checks.retain(|c| c.name.contains(f.as_str()));
        if checks.is_empty() {
            return Err(CliError::Usage(format!("no objective matches {f:?}")));
        }
    }
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "{:<16} {:.3e} {}", c.name, c.max_rel_error, if c.passed { "PASS" } else { "FAIL" });
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let _ = writeln!(text, "{} of {} passed, worst {worst:.3e}", checks.len() - failed.len(), checks.len());
    let failure = (!failed.is_empty())
        .then(|| CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))));
    Ok(Output {
        json: json!({ "tol": a.tol, "size": a.size, "worst": worst, "passed": failed.is_empty(), "checks": checks }),
        text,
        failure,
    })
}

fn serve(a: &ServeArgs) -> CliResult<Output> {
    let addr = a.addr.clone().unwrap_or_else(cemx_service::addr_from_env);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(format!("runtime: {e}")))?;
    rt.block_on(cemx_service::serve(&addr)).map_err(|e| CliError::Data(format!("serve {addr}: {e}")))?;
    Output::ok(json!({ "addr": addr }), String::new())
}
