use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lgnk::datagen::{gen_fitzhugh_nagumo, gen_navier_stokes, read_dataset, write_dataset, Dataset, Pde};
use lgnk::generator::Variant;
use lgnk::gradtape::check_gradients;
use lgnk::model::{load_checkpoint, ModelConfig, ModelParams};
use lgnk::physics::render::{
    render_bench, render_energy, render_fit, render_spectrum, render_universality, write_files,
};
use lgnk::physics::{bench_time, compare_universality, fit_dissipation, rollout_energy, spectrum_report};
use lgnk::train::{evaluate, sweep_channels, train_loop, transfer_finetune, TrainMode, TrainOutcome};
use serde::Serialize;

use crate::config::{output_dir, parse_config, usage, RunConfig};
use crate::{Command, ConfigArgs};

pub fn run(cmd: Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::GenData { cfg } => gen_data(&cfg),
        Command::Train { cfg, data } => train(&cfg, data.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, &split, &out),
        Command::Spectra { checkpoint, out } => Ok(render_spectrum(&spectrum_report(&load(&checkpoint)?)?, &out)?),
        Command::FitDissipation { checkpoint, out } => Ok(render_fit(&fit_dissipation(&load(&checkpoint)?)?, &out)?),
        Command::Compare { a, b, out } => compare(&a, &b, &out),
        Command::Rollout {
            checkpoint,
            data,
            steps,
            samples,
            out,
        } => rollout(&checkpoint, &data, steps, samples, &out),
        Command::BenchTime {
            checkpoint,
            data,
            horizons,
            out,
        } => bench(&checkpoint, &data, &horizons, &out),
        Command::Transfer {
            cfg,
            checkpoint,
            mode,
            data,
        } => transfer(&cfg, &checkpoint, &mode, data.as_deref()),
        Command::Ablate { cfg, variant, data } => ablate(&cfg, &variant, data.as_deref()),
        Command::SweepR { cfg, r_list, data } => sweep(&cfg, &r_list, data.as_deref()),
        Command::CheckGrad {
            cfg,
            tiny,
            seed,
            h,
            tol,
        } => check_grad(&cfg, tiny, seed, h, tol),
    }
}

fn load_config(args: &ConfigArgs) -> Result<(RunConfig, PathBuf)> {
    let cfg = parse_config(args.config.as_deref(), &args.sets)?;
    let out = output_dir(args.out.as_deref(), Some(&cfg))?;
    Ok((cfg, out))
}

fn load(path: &Path) -> Result<ModelParams> {
    Ok(load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?.params)
}

fn generate(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    Ok(match &d.pde {
        Pde::NavierStokes(p) => gen_navier_stokes(p, d.count, d.n_train)?,
        Pde::FitzhughNagumo(p) => gen_fitzhugh_nagumo(p, d.count, d.n_train)?,
    })
}

fn dataset(path: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match path {
        Some(p) => read_dataset(p).with_context(|| format!("loading dataset {}", p.display())),
        None => generate(cfg),
    }
}

fn json_file<T: Serialize>(name: &'static str, value: &T) -> Result<(&'static str, String)> {
    Ok((name, serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes the resolved configuration next to the run outputs.
fn record_config(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut resolved = cfg.clone();
    resolved.output_dir = Some(out.to_path_buf());
    Ok(write_files(out, &[json_file("config.json", &resolved)?])?)
}

fn gen_data(args: &ConfigArgs) -> Result<Vec<PathBuf>> {
    let (cfg, out) = load_config(args)?;
    let ds = generate(&cfg)?;
    let mut files = record_config(&cfg, &out)?;
    files.extend(write_dataset(&out.join("dataset.lgnk"), &ds)?);
    Ok(files)
}

fn summary_line(outcome: &TrainOutcome) {
    if let Some(last) = outcome.log.rows.last() {
        println!(
            "final test_l2 {:.6}  best {:.6} at epoch {}  max Re(lambda) {:.6e}",
            last.test_l2, outcome.best_test_l2, outcome.best_epoch, last.max_re_lambda
        );
    }
}

fn train(args: &ConfigArgs, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (cfg, out) = load_config(args)?;
    let ds = dataset(data, &cfg)?;
    let mut files = record_config(&cfg, &out)?;
    let outcome = train_loop(&cfg.model, &cfg.train, &ds, Some(&out))?;
    summary_line(&outcome);
    files.extend(outcome.files);
    Ok(files)
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    count: usize,
    relative_l2: f64,
}

fn eval(checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let params = load(checkpoint)?;
    let ds = read_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let idx = match split {
        "train" => &ds.manifest.train,
        "test" => &ds.manifest.test,
        other => return Err(usage(format!("--split must be train or test, got {:?}", other))),
    };
    if idx.is_empty() {
        bail!("split {} is empty", split);
    }
    let relative_l2 = evaluate(&params, &ds, idx)?;
    println!("{} relative L2 {:.6} over {} trajectories", split, relative_l2, idx.len());
    let report = EvalReport {
        split: split.to_string(),
        count: idx.len(),
        relative_l2,
    };
    Ok(write_files(out, &[json_file("eval.json", &report)?])?)
}

fn compare(a: &Path, b: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let rep = compare_universality(&load(a)?, &load(b)?)?;
    println!(
        "cosine(S) {:.4}  R2 singvals {:.4}  R2 sorted d {:.4}  R2 sorted alpha {:.4}",
        rep.cosine_sim_s, rep.r2_singvals, rep.r2_sorted_d, rep.r2_sorted_alpha
    );
    Ok(render_universality(&rep, out)?)
}

fn rollout(checkpoint: &Path, data: &Path, steps: usize, samples: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let params = load(checkpoint)?;
    let ds = read_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let idx: Vec<usize> = ds.manifest.test.iter().copied().take(samples).collect();
    Ok(render_energy(&rollout_energy(&params, &ds, &idx, steps)?, out)?)
}

fn bench(checkpoint: &Path, data: &Path, horizons: &[f64], out: &Path) -> Result<Vec<PathBuf>> {
    let params = load(checkpoint)?;
    let ds = read_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let index = ds.manifest.test.first().or(ds.manifest.train.first()).copied().unwrap_or(0);
    let frames = ds.window(index, 0, params.config.t_in)?;
    let rows = bench_time(&params, &frames, horizons)?;
    for r in &rows {
        println!("horizon {:>6}  {:.3} ms  {} expm calls", r.horizon, r.wall_ms, r.expm_calls);
    }
    Ok(render_bench(&rows, out)?)
}

#[derive(Serialize)]
struct TransferReport {
    mode: TrainMode,
    pretrained: PathBuf,
    best_epoch: usize,
    best_test_l2: f64,
    final_test_l2: f64,
}

fn transfer(args: &ConfigArgs, checkpoint: &Path, mode: &str, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mode: TrainMode = mode.parse().map_err(|e: lgnk::Error| usage(e.to_string()))?;
    if mode == TrainMode::Scratch {
        return Err(usage("--mode must be freeze_s or transfer_all"));
    }
    let (cfg, out) = load_config(args)?;
    let pre = load(checkpoint)?;
    let ds = dataset(data, &cfg)?;
    let mut files = record_config(&cfg, &out)?;
    let outcome = transfer_finetune(&pre, mode, &ds, &cfg.train, None, Some(&out))?;
    summary_line(&outcome);
    let report = TransferReport {
        mode,
        pretrained: checkpoint.to_path_buf(),
        best_epoch: outcome.best_epoch,
        best_test_l2: outcome.best_test_l2,
        final_test_l2: outcome.log.rows.last().map_or(f64::NAN, |r| r.test_l2),
    };
    files.extend(outcome.files);
    files.extend(write_files(&out, &[json_file("transfer.json", &report)?])?);
    Ok(files)
}

#[derive(Serialize)]
struct AblationReport {
    variant: Variant,
    eigenvalues: usize,
    max_re: f64,
    max_abs_re: f64,
    max_abs_im: f64,
    /// `-min softplus(d)`; absent when the variant has no structural bound.
    stability_bound: Option<f64>,
    final_test_l2: f64,
}

fn ablate(args: &ConfigArgs, variant: &str, data: Option<&Path>) -> Result<Vec<PathBuf>> {
    let variant: Variant = variant.parse().map_err(|e: lgnk::Error| usage(e.to_string()))?;
    let (mut cfg, out) = load_config(args)?;
    cfg.model.variant = variant;
    let ds = dataset(data, &cfg)?;
    let mut files = record_config(&cfg, &out)?;
    let outcome = train_loop(&cfg.model, &cfg.train, &ds, Some(&out))?;
    summary_line(&outcome);
    files.extend(outcome.files);
    let rep = spectrum_report(&outcome.params)?;
    let gen = outcome.params.generator();
    let report = AblationReport {
        variant,
        eigenvalues: rep.rows.len(),
        max_re: rep.summary.max_re,
        max_abs_re: rep.rows.iter().map(|p| p.lambda.re.abs()).fold(0.0, f64::max),
        max_abs_im: rep.rows.iter().map(|p| p.lambda.im.abs()).fold(0.0, f64::max),
        stability_bound: variant.is_stable().then(|| 0.0 - gen.min_base_damping()),
        final_test_l2: outcome.log.rows.last().map_or(f64::NAN, |r| r.test_l2),
    };
    println!(
        "{}: max Re {:.3e}  max |Re| {:.3e}  max |Im| {:.3e}",
        variant.name(),
        report.max_re,
        report.max_abs_re,
        report.max_abs_im
    );
    files.extend(render_spectrum(&rep, &out)?);
    files.extend(write_files(&out, &[json_file("ablation.json", &report)?])?);
    Ok(files)
}

fn sweep(args: &ConfigArgs, r_list: &[usize], data: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (cfg, out) = load_config(args)?;
    if r_list.contains(&0) {
        return Err(usage("--r-list entries must be positive"));
    }
    let ds = dataset(data, &cfg)?;
    let mut files = record_config(&cfg, &out)?;
    let (rows, trained) = sweep_channels(r_list, &cfg.model, &cfg.train, &ds, Some(&out))?;
    files.extend(trained);
    let mut csv = String::from("r,test_l2,best_test_l2,fit_r2\n");
    for r in &rows {
        println!("r {:>3}  test_l2 {:.6}  fit R2 {:.4}", r.r, r.test_l2, r.fit_r2);
        csv.push_str(&format!("{},{:e},{:e},{:e}\n", r.r, r.test_l2, r.best_test_l2, r.fit_r2));
    }
    files.extend(write_files(&out, &[("sweep.csv", csv)])?);
    Ok(files)
}

fn check_grad(args: &ConfigArgs, tiny: bool, seed: u64, h: f64, tol: f64) -> Result<Vec<PathBuf>> {
    if !(h > 0.0 && tol >= 0.0) {
        return Err(usage("--h must be positive and --tol non-negative"));
    }
    let model = if tiny {
        ModelConfig::tiny()
    } else {
        parse_config(args.config.as_deref(), &args.sets)?.model
    };
    let report = check_gradients(&model, seed, h, tol)?;
    for t in &report.tensors {
        println!(
            "{:<36} checked {:>5}  below resolution {:>5}  max rel err {:.3e}",
            t.path, t.checked, t.below_resolution, t.rel_err
        );
    }
    println!("max rel err {:.3e} (tol {:.1e})", report.max_rel_err, tol);
    let files = match &args.out {
        Some(out) => write_files(out, &[json_file("grad_report.json", &report)?])?,
        None => Vec::new(),
    };
    if !report.passed {
        for f in &files {
            println!("wrote {}", f.display());
        }
        bail!("gradient check failed: max rel err {:.3e} > {:.1e}", report.max_rel_err, tol);
    }
    Ok(files)
}
