//! The four commands. Each validates its paths before any computation and
//! writes only files with fixed names inside the output directory.

use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use odekernel::estimate::Prepared;
use odekernel::rng::derive_seed;
use odekernel::study::{
    collect_estimates, median, run_replicate, summarize, Methods, ReplicateOutcome,
    SimulationConfig,
};
use odekernel::{
    add_noise, integrate_rk4, FitResult, LambdaPath, ModelSpec, ObservationSet, ParamRole,
};
use rayon::prelude::*;

use crate::config::{LambdaChoice, RunConfig};
use crate::error::{CliError, Result};
use crate::io::{read_dataset, write_dataset, write_series, write_table, write_text};

/// Replicates per batch in `benchmark`; finished batches are on disk before
/// the next one starts.
const BATCH: usize = 16;

fn prepare_out(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}

fn check_readable(path: &Path) -> Result<()> {
    File::open(path)
        .map(|_| ())
        .map_err(|e| CliError::io(path, e))
}

fn role_name(role: ParamRole) -> &'static str {
    match role {
        ParamRole::Theta => "theta",
        ParamRole::Beta => "beta",
        ParamRole::Latent => "latent",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Files written by `simulate`.
#[derive(Debug, Clone)]
pub struct SimulatedFiles {
    pub data: PathBuf,
    pub truth: PathBuf,
    pub truth_params: PathBuf,
}

pub fn simulate(config: &RunConfig) -> Result<SimulatedFiles> {
    let grid = config.grid()?;
    let m = config.model_states()?;
    let model = config.model(m, (grid.first(), grid.last()))?;
    if config.params.len() != model.n_params() {
        return Err(CliError::schema(format!(
            "config: model `{}` takes {} params, got {}",
            config.model,
            model.n_params(),
            config.params.len()
        )));
    }
    if config.x0.len() != m {
        return Err(CliError::schema(format!(
            "config: need {m} values in `x0`, got {}",
            config.x0.len()
        )));
    }
    if !(config.sigma >= 0.0 && config.sigma.is_finite()) {
        return Err(CliError::schema(format!(
            "config: sigma must be >= 0, got {}",
            config.sigma
        )));
    }
    let out = prepare_out(config)?;
    let files = SimulatedFiles {
        data: out.join(format!("{}.csv", config.name)),
        truth: out.join(format!("{}.truth.csv", config.name)),
        truth_params: out.join(format!("{}.truth.params.csv", config.name)),
    };

    let truth = integrate_rk4(
        model.as_ref(),
        &config.params,
        &config.x0,
        &grid,
        config.substeps,
    )?;
    // Replicate 0 of a benchmark with the same seed sees the same noise.
    let obs = add_noise(&truth, &grid, config.sigma, derive_seed(config.seed, 0))?;
    let clean = ObservationSet::new(grid.clone(), truth, None)?;

    write_dataset(&files.data, &obs)?;
    write_dataset(&files.truth, &clean)?;
    let info = model.params();
    let rows = info
        .iter()
        .zip(&config.params)
        .map(|(p, v)| vec![p.name.clone(), v.to_string()])
        .chain(
            config
                .x0
                .iter()
                .enumerate()
                .map(|(j, v)| vec![format!("x0_{}", j + 1), v.to_string()]),
        );
    write_table(&files.truth_params, &["name", "value"], rows)?;
    Ok(files)
}

struct Loaded {
    obs: ObservationSet,
    model: Box<dyn ModelSpec>,
}

fn load(config: &RunConfig) -> Result<(Loaded, PathBuf)> {
    let data = config.data_path()?;
    check_readable(&data)?;
    let out = prepare_out(config)?;
    let obs = read_dataset(&data)?;
    let grid = obs.grid();
    let model = config.model(obs.n_states(), (grid.first(), grid.last()))?;
    Ok((Loaded { obs, model }, out))
}

/// Fits at the configured λ, or at the minimum-AIC λ over the grid.
pub fn fit(config: &RunConfig) -> Result<FitResult> {
    let rkhs = config.rkhs()?;
    let choice = config.lambda_choice()?;
    let (loaded, out) = load(config)?;
    let prep = Prepared::new(loaded.model.as_ref(), &loaded.obs, &rkhs)?;
    let result = match choice {
        LambdaChoice::Fixed(lambda) => {
            let fit = prep.fit(lambda, &rkhs)?;
            write_fit(&out, &loaded.obs, &fit, "fixed", rkhs.level)?;
            fit
        }
        LambdaChoice::Aic(grid) => {
            let path = prep.select_lambda(&grid, &rkhs)?;
            write_lambda_path(&out, &path)?;
            let label = format!("minimum AIC over {} values", grid.len());
            write_fit(&out, &loaded.obs, path.best_fit(), &label, rkhs.level)?;
            path.into_best()
        }
    };
    if result.converged {
        Ok(result)
    } else {
        Err(CliError::NotConverged)
    }
}

/// Fits every λ of the grid (or the single λ given) and keeps the minimum AIC.
pub fn select_lambda(config: &RunConfig) -> Result<LambdaPath> {
    let rkhs = config.rkhs()?;
    let grid = match config.lambda_choice()? {
        LambdaChoice::Fixed(l) => vec![l],
        LambdaChoice::Aic(grid) => grid,
    };
    let (loaded, out) = load(config)?;
    let prep = Prepared::new(loaded.model.as_ref(), &loaded.obs, &rkhs)?;
    let path = prep.select_lambda(&grid, &rkhs)?;
    write_lambda_path(&out, &path)?;
    let label = format!("minimum AIC over {} values", grid.len());
    write_fit(&out, &loaded.obs, path.best_fit(), &label, rkhs.level)?;
    if path.best_fit().converged {
        Ok(path)
    } else {
        Err(CliError::NotConverged)
    }
}

fn write_lambda_path(out: &Path, path: &LambdaPath) -> Result<()> {
    let rows = path.fits.iter().enumerate().map(|(i, f)| {
        vec![
            f.lambda.to_string(),
            f.objective.to_string(),
            f.sum_df().to_string(),
            f.aic.to_string(),
            u8::from(f.converged).to_string(),
            u8::from(i == path.best).to_string(),
        ]
    });
    write_table(
        &out.join("lambda_path.csv"),
        &[
            "lambda",
            "objective",
            "sum_df",
            "aic",
            "converged",
            "selected",
        ],
        rows,
    )
}

fn write_fit(
    out: &Path,
    obs: &ObservationSet,
    fit: &FitResult,
    lambda_label: &str,
    level: f64,
) -> Result<()> {
    let times = obs.grid().times();
    write_series(&out.join("fitted_states.csv"), times, &fit.states, None)?;
    if let Some(eta) = &fit.latent {
        let rows = times
            .iter()
            .zip(eta.iter())
            .map(|(t, v)| vec![t.to_string(), v.to_string()]);
        write_table(&out.join("latent.csv"), &["time", "eta"], rows)?;
    }

    let rows = fit.param_info.iter().zip(&fit.wald).map(|(p, w)| {
        vec![
            p.name.clone(),
            role_name(p.role).to_string(),
            w.estimate.to_string(),
            opt(w.stderr),
            opt(w.lower),
            opt(w.upper),
        ]
    });
    write_table(
        &out.join("params.csv"),
        &["name", "role", "estimate", "stderr", "lower", "upper"],
        rows,
    )?;

    let rows = (0..fit.sigma2.len()).map(|j| {
        vec![
            (j + 1).to_string(),
            fit.sigma2[j].to_string(),
            fit.df[j].to_string(),
            fit.surrogate_smoothing[j].to_string(),
        ]
    });
    write_table(
        &out.join("equations.csv"),
        &["equation", "sigma2", "df", "surrogate_smoothing"],
        rows,
    )?;

    let summary = [
        ("model", fit.model.clone()),
        ("lambda", fit.lambda.to_string()),
        ("objective", fit.objective.to_string()),
        ("sum_df", fit.sum_df().to_string()),
        ("aic", fit.aic.to_string()),
        ("converged", u8::from(fit.converged).to_string()),
        ("iterations", fit.iterations.to_string()),
        ("gradient_norm", fit.gradient_norm.to_string()),
    ];
    write_table(
        &out.join("summary.csv"),
        &["key", "value"],
        summary.iter().map(|(k, v)| vec![k.to_string(), v.clone()]),
    )?;

    write_text(
        &out.join("report.txt"),
        &fit_report(obs, fit, lambda_label, level),
    )
}

fn fit_report(obs: &ObservationSet, fit: &FitResult, lambda_label: &str, level: f64) -> String {
    let mut s = String::new();
    let level = 100.0 * level;
    let _ = writeln!(s, "model           {}", fit.model);
    let _ = writeln!(
        s,
        "observations    {} times x {} state(s)",
        obs.n_times(),
        obs.n_states()
    );
    let _ = writeln!(s, "lambda          {:e} ({lambda_label})", fit.lambda);
    let _ = writeln!(s, "objective       {:.6e}", fit.objective);
    let _ = writeln!(s, "aic             {:.6e}", fit.aic);
    let _ = writeln!(s, "total df        {:.4}", fit.sum_df());
    let status = if fit.converged {
        "converged"
    } else {
        "not converged"
    };
    let _ = writeln!(
        s,
        "optimizer       {status}, {} iterations, gradient norm {:.3e}",
        fit.iterations, fit.gradient_norm
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<14} {:<7} {:>14} {:>12} {:>14} {:>14}",
        "parameter",
        "role",
        "estimate",
        "stderr",
        format!("{level:.0}% lower"),
        format!("{level:.0}% upper")
    );
    let cell = |v: Option<f64>, w: usize| match v {
        Some(v) => format!("{v:>w$.6}"),
        None => format!("{:>w$}", "-"),
    };
    for (p, w) in fit.param_info.iter().zip(&fit.wald) {
        let _ = writeln!(
            s,
            "{:<14} {:<7} {:>14.6} {} {} {}",
            p.name,
            role_name(p.role),
            w.estimate,
            cell(w.stderr, 12),
            cell(w.lower, 14),
            cell(w.upper, 14)
        );
    }
    if let Some(note) = &fit.covariance_note {
        let _ = writeln!(s, "intervals unavailable: {note}");
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<9} {:>14} {:>10} {:>14}",
        "equation", "sigma2", "df", "smoothing"
    );
    for j in 0..fit.sigma2.len() {
        let _ = writeln!(
            s,
            "{:<9} {:>14.6e} {:>10.4} {:>14.3e}",
            j + 1,
            fit.sigma2[j],
            fit.df[j],
            fit.surrogate_smoothing[j]
        );
    }
    s
}

/// Outputs of `benchmark`.
#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub outcomes: Vec<ReplicateOutcome>,
    pub truth: Vec<f64>,
}

pub fn benchmark(config: &RunConfig) -> Result<BenchmarkResult> {
    if config.times.is_some() {
        return Err(CliError::schema(
            "config: benchmark needs a uniform grid (`t_start`, `t_end`, `n`)",
        ));
    }
    let grid = config.grid()?;
    let m = config.model_states()?;
    let model = config.model(m, (grid.first(), grid.last()))?;
    if config.params.len() != model.n_params() || config.x0.len() != m {
        return Err(CliError::schema(format!(
            "config: model `{}` needs {} params and {m} x0 values",
            config.model,
            model.n_params()
        )));
    }
    if config.replicates == 0 {
        return Err(CliError::schema("config: replicates must be at least 1"));
    }
    let sim = SimulationConfig {
        params: config.params.clone(),
        x0: config.x0.clone(),
        t_start: grid.first(),
        t_end: grid.last(),
        n: grid.len(),
        sigma: config.sigma,
        replicates: config.replicates,
        seed: config.seed,
        substeps: config.substeps,
    };
    sim.validate()?;
    let (use_rkhs, use_mle) = config.methods()?;
    let mut rkhs = config.rkhs()?;
    rkhs.covariance = false;
    let lambda_grid = match config.lambda_choice()? {
        LambdaChoice::Fixed(l) => {
            rkhs.lambda = l;
            None
        }
        LambdaChoice::Aic(grid) => Some(grid),
    };
    let methods = Methods {
        rkhs: use_rkhs.then_some((rkhs, lambda_grid)),
        mle: use_mle.then(|| config.optimizer()).transpose()?,
    };
    let out = prepare_out(config)?;

    let info = model.params();
    let mut header: Vec<String> = [
        "replicate",
        "seed",
        "method",
        "converged",
        "lambda",
        "error",
    ]
    .map(String::from)
    .to_vec();
    header.extend(info.iter().map(|p| p.name.clone()));
    let replicates_path = out.join("replicates.csv");
    let csv_err = |e: csv::Error| CliError::schema(format!("{}: {e}", replicates_path.display()));
    let mut writer = csv::Writer::from_path(&replicates_path).map_err(csv_err)?;
    writer.write_record(&header).map_err(csv_err)?;
    writer
        .flush()
        .map_err(|e| CliError::io(&replicates_path, e))?;

    let start = Instant::now();
    let mut outcomes = Vec::with_capacity(config.replicates);
    for batch in (0..config.replicates).collect::<Vec<_>>().chunks(BATCH) {
        let done: Vec<ReplicateOutcome> = batch
            .par_iter()
            .map(|&i| run_replicate(model.as_ref(), &sim, &methods, i))
            .collect::<odekernel::Result<_>>()?;
        for o in &done {
            for (name, method) in [("rkhs", &o.rkhs), ("mle", &o.mle)] {
                let Some(method) = method else { continue };
                let mut row = vec![
                    o.index.to_string(),
                    o.seed.to_string(),
                    name.to_string(),
                    u8::from(method.converged).to_string(),
                    opt(method.lambda),
                    method.error.clone().unwrap_or_default(),
                ];
                match &method.params {
                    Some(p) => row.extend(p.iter().map(f64::to_string)),
                    None => row.extend(std::iter::repeat_n(String::new(), info.len())),
                }
                writer.write_record(&row).map_err(csv_err)?;
            }
        }
        writer
            .flush()
            .map_err(|e| CliError::io(&replicates_path, e))?;
        outcomes.extend(done);
    }
    let elapsed = start.elapsed().as_secs_f64();

    let truth = config.params.clone();
    let mut tables = Vec::new();
    for (name, pick) in [("rkhs", use_rkhs), ("mle", use_mle)] {
        if !pick {
            continue;
        }
        let estimates = collect_estimates(&outcomes, |o| {
            if name == "rkhs" {
                o.rkhs.as_ref()
            } else {
                o.mle.as_ref()
            }
        });
        tables.push((name, summarize(&estimates, &truth)));
    }
    let rows = tables.iter().flat_map(|(name, summary)| {
        summary.iter().enumerate().map(|(k, s)| {
            vec![
                name.to_string(),
                info[k].name.clone(),
                truth[k].to_string(),
                s.count.to_string(),
                s.mse.to_string(),
                s.sd_squared_error.to_string(),
                s.mean_abs_error.to_string(),
                s.sd_abs_error.to_string(),
            ]
        })
    });
    write_table(
        &out.join("benchmark.csv"),
        &[
            "method",
            "parameter",
            "truth",
            "count",
            "mse",
            "mse_sd",
            "mean_abs_error",
            "mean_abs_error_sd",
        ],
        rows,
    )?;

    let mut report = String::new();
    let _ = writeln!(report, "model           {}", config.model);
    let _ = writeln!(
        report,
        "design          n = {}, sigma = {}, {} replicates, seed {}",
        grid.len(),
        config.sigma,
        config.replicates,
        config.seed
    );
    let _ = writeln!(report);
    let _ = writeln!(report, "mean squared error (sd)");
    let mut line = format!("{:<8}", "method");
    for p in &info {
        line.push_str(&format!(" {:>22}", p.name));
    }
    let _ = writeln!(report, "{}", line.trim_end());
    for (name, summary) in &tables {
        let mut line = format!("{name:<8}");
        for s in summary {
            line.push_str(&format!(
                " {:>22}",
                format!("{:.4} ({:.4})", s.mse, s.sd_squared_error)
            ));
        }
        let _ = writeln!(report, "{line}");
    }
    let _ = writeln!(report);
    let _ = writeln!(report, "mean absolute error (sd)");
    for (name, summary) in &tables {
        let mut line = format!("{name:<8}");
        for s in summary {
            line.push_str(&format!(
                " {:>22}",
                format!("{:.4} ({:.4})", s.mean_abs_error, s.sd_abs_error)
            ));
        }
        let _ = writeln!(report, "{line}");
    }
    let failures: Vec<String> = tables
        .iter()
        .filter(|(_, s)| s.first().is_some_and(|s| s.count < config.replicates))
        .map(|(name, s)| {
            format!(
                "{name}: {} of {} replicates failed",
                config.replicates - s[0].count,
                config.replicates
            )
        })
        .collect();
    for f in failures {
        let _ = writeln!(report, "{f}");
    }

    if config.timing {
        let seconds = |pick: fn(&ReplicateOutcome) -> Option<f64>| -> Vec<f64> {
            outcomes.iter().filter_map(pick).collect()
        };
        let rkhs_s = seconds(|o| o.rkhs.as_ref().map(|m| m.seconds));
        let mle_s = seconds(|o| o.mle.as_ref().map(|m| m.seconds));
        let rows = outcomes.iter().map(|o| {
            vec![
                o.index.to_string(),
                opt(o.rkhs.as_ref().map(|m| m.seconds)),
                opt(o.mle.as_ref().map(|m| m.seconds)),
            ]
        });
        write_table(
            &out.join("timing.csv"),
            &["replicate", "rkhs_seconds", "mle_seconds"],
            rows,
        )?;
        let _ = writeln!(report);
        let _ = writeln!(report, "wall clock      {elapsed:.2} s total");
        if !rkhs_s.is_empty() {
            let _ = writeln!(report, "median rkhs     {:.4} s", median(&rkhs_s));
        }
        if !mle_s.is_empty() {
            let _ = writeln!(report, "median mle      {:.4} s", median(&mle_s));
        }
        if !rkhs_s.is_empty() && !mle_s.is_empty() {
            let _ = writeln!(
                report,
                "mle / rkhs      {:.2}",
                median(&mle_s) / median(&rkhs_s)
            );
        }
    }
    write_text(&out.join("report.txt"), &report)?;
    Ok(BenchmarkResult { outcomes, truth })
}
