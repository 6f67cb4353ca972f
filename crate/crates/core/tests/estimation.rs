//! End-to-end estimation on simulated systems.

use nalgebra::DVector;
use odekernel::estimate::Prepared;
use odekernel::models::parameter_blocks;
use odekernel::optimizer::minimize_blocks;
use odekernel::smoother::fit_surrogate;
use odekernel::study::{collect_estimates, run_study, summarize, Methods, SimulationConfig};
use odekernel::{
    add_noise, fit_rkhs, integrate_rk4, model_exponential, model_lotka_volterra, model_tf_network,
    ModelSpec, OperatorMatrix, OptimizerConfig, RkhsConfig, Smoothing, SplineBasis, TimeGrid,
    VariancePolicy,
};

const LV_TRUTH: [f64; 4] = [0.2, 0.35, 0.7, 0.4];

fn lv_sim(n: usize, sigma: f64, replicates: usize, seed: u64) -> SimulationConfig {
    SimulationConfig {
        params: LV_TRUTH.to_vec(),
        x0: vec![1.0, 2.0],
        t_start: 0.0,
        t_end: 30.0,
        n,
        sigma,
        replicates,
        seed,
        substeps: 20,
    }
}

fn exp_sim(replicates: usize, seed: u64) -> SimulationConfig {
    SimulationConfig {
        params: vec![-2.0],
        x0: vec![-1.0],
        t_start: 0.0,
        t_end: 2.0,
        n: 10,
        sigma: 0.25,
        replicates,
        seed,
        substeps: 20,
    }
}

/// `max_j ‖P_θ̂j x̂_j − f_j‖ / scale_j` for a fit.
fn ode_residuals(
    fit: &odekernel::FitResult,
    grid: &TimeGrid,
    y: &nalgebra::DMatrix<f64>,
) -> Vec<(f64, f64, f64)> {
    let diff = odekernel::DifferenceOperator::new(grid, odekernel::Stencil::Central).unwrap();
    (0..fit.theta.len())
        .map(|j| {
            let op = OperatorMatrix::new(&fit.theta[j], &diff).unwrap();
            let x: DVector<f64> = fit.states.row(j).transpose();
            let r = (op.apply(&x) - &fit.forcing[j]).norm();
            (r, fit.forcing[j].norm(), y.row(j).norm())
        })
        .collect()
}

#[test]
fn large_lambda_forces_ode_solutions() {
    let grid = TimeGrid::uniform(0.0, 30.0, 35).unwrap();
    let lv = model_lotka_volterra();
    let truth = integrate_rk4(&lv, &LV_TRUTH, &[1.0, 2.0], &grid, 20).unwrap();
    let obs = add_noise(&truth, &grid, 0.0, 0).unwrap();
    let config = RkhsConfig {
        lambda: 1e8,
        variance: VariancePolicy::Known(vec![0.01]),
        covariance: false,
        ..Default::default()
    };
    let fit = fit_rkhs(&lv, &obs, &config).unwrap();
    for (j, (r, f, _)) in ode_residuals(&fit, &grid, obs.states())
        .into_iter()
        .enumerate()
    {
        assert!(r <= 1e-3 * f, "equation {j}: {r} vs {f}");
    }

    let grid = TimeGrid::uniform(0.0, 2.0, 10).unwrap();
    let truth = integrate_rk4(&model_exponential(), &[-2.0], &[-1.0], &grid, 20).unwrap();
    let obs = add_noise(&truth, &grid, 0.0, 0).unwrap();
    let config = RkhsConfig {
        lambda: 1e8,
        variance: VariancePolicy::Known(vec![0.0625]),
        covariance: false,
        ..Default::default()
    };
    let fit = fit_rkhs(&model_exponential(), &obs, &config).unwrap();
    let (r, _, y) = ode_residuals(&fit, &grid, obs.states())[0];
    assert!(r <= 1e-3 * y, "{r} vs {y}");
}

#[test]
fn lotka_volterra_surrogate_tracks_the_solution() {
    let grid = TimeGrid::uniform(0.0, 30.0, 100).unwrap();
    let truth = integrate_rk4(&model_lotka_volterra(), &LV_TRUTH, &[1.0, 2.0], &grid, 20).unwrap();
    let obs = add_noise(&truth, &grid, 0.0, 0).unwrap();
    let basis = SplineBasis::at_grid(&grid).unwrap();
    let s = fit_surrogate(&obs, &basis, None, &Smoothing::default()).unwrap();
    // Compare on a dense grid against a finer reference solution.
    let dense = TimeGrid::uniform(0.0, 30.0, 991).unwrap();
    let reference =
        integrate_rk4(&model_lotka_volterra(), &LV_TRUTH, &[1.0, 2.0], &dense, 4).unwrap();
    let fitted = s.eval(dense.times()).unwrap();
    let err = (fitted.row(0) - reference.row(0)).amax();
    assert!(err <= 0.05, "{err}");
}

#[test]
fn noiseless_lotka_volterra_beats_the_noisy_table_row() {
    let grid = TimeGrid::uniform(0.0, 30.0, 100).unwrap();
    let truth = integrate_rk4(&model_lotka_volterra(), &LV_TRUTH, &[1.0, 2.0], &grid, 20).unwrap();
    let obs = add_noise(&truth, &grid, 0.0, 0).unwrap();
    let config = RkhsConfig {
        covariance: false,
        ..Default::default()
    };
    let fit = fit_rkhs(&model_lotka_volterra(), &obs, &config).unwrap();
    let bound = [0.0002, 0.0007, 0.0031, 0.0014];
    for k in 0..4 {
        let se = (fit.params[k] - LV_TRUTH[k]).powi(2);
        assert!(se < bound[k], "parameter {k}: {} (se {se})", fit.params[k]);
    }
}

#[test]
fn lotka_volterra_block_fit_matches_joint_fit() {
    let grid = TimeGrid::uniform(0.0, 30.0, 35).unwrap();
    let lv = model_lotka_volterra();
    let truth = integrate_rk4(&lv, &LV_TRUTH, &[1.0, 2.0], &grid, 20).unwrap();
    let obs = add_noise(&truth, &grid, 0.1, 3).unwrap();
    let base = RkhsConfig {
        covariance: false,
        ..Default::default()
    };
    let blocks = fit_rkhs(&lv, &obs, &base).unwrap();
    let joint = fit_rkhs(
        &lv,
        &obs,
        &RkhsConfig {
            separate_blocks: false,
            ..base
        },
    )
    .unwrap();
    assert!((blocks.objective - joint.objective).abs() <= 1e-6 * joint.objective.max(1.0));
    for k in 0..4 {
        assert!((blocks.params[k] - joint.params[k]).abs() <= 1e-4, "{k}");
    }
}

#[test]
fn decoupled_blocks_equal_independent_fits() {
    let f = |b: usize, p: &[f64]| match b {
        0 => (p[0] - 1.5).powi(2) + 0.1 * p[0].powi(4),
        _ => (p[1] + 2.0).powi(2),
    };
    let blocks = vec![vec![0], vec![1]];
    let config = OptimizerConfig::default();
    let joint = minimize_blocks(&blocks, 2, &f, &config).unwrap();
    let a = odekernel::optimizer::minimize(&|q: &[f64]| f(0, &[q[0], 0.0]), 1, &config).unwrap();
    let b = odekernel::optimizer::minimize(&|q: &[f64]| f(1, &[0.0, q[0]]), 1, &config).unwrap();
    assert!((joint.params[0] - a.best[0]).abs() < 1e-6);
    assert!((joint.params[1] - b.best[0]).abs() < 1e-6);
}

#[test]
fn separability_detection() {
    assert_eq!(parameter_blocks(&model_lotka_volterra()).len(), 2);
    let tf = model_tf_network(4, true, (0.0, 10.0)).unwrap();
    let blocks = parameter_blocks(&tf);
    assert_eq!(blocks.len(), 1);
    assert_eq!(blocks[0].1.len(), tf.n_params());
}

#[test]
fn penalized_estimator_beats_baseline_on_average() {
    let sim = exp_sim(50, 17);
    let methods = Methods {
        rkhs: Some((
            RkhsConfig {
                variance: VariancePolicy::Known(vec![0.0625]),
                covariance: false,
                ..Default::default()
            },
            Some(odekernel::default_lambda_grid()),
        )),
        mle: Some(OptimizerConfig::default()),
    };
    let out = run_study(&model_exponential(), &sim, &methods).unwrap();
    let rkhs = summarize(&collect_estimates(&out, |o| o.rkhs.as_ref()), &[-2.0]);
    let mle = summarize(&collect_estimates(&out, |o| o.mle.as_ref()), &[-2.0]);
    assert_eq!(rkhs[0].count, 50);
    assert_eq!(mle[0].count, 50);
    assert!(
        rkhs[0].mean_abs_error < mle[0].mean_abs_error,
        "{} vs {}",
        rkhs[0].mean_abs_error,
        mle[0].mean_abs_error
    );
}

#[test]
fn noiseless_round_trip_recovers_parameters() {
    let config = RkhsConfig {
        covariance: false,
        ..Default::default()
    };
    let grid = TimeGrid::uniform(0.0, 2.0, 100).unwrap();
    let truth = integrate_rk4(&model_exponential(), &[-2.0], &[-1.0], &grid, 20).unwrap();
    let obs = add_noise(&truth, &grid, 0.0, 0).unwrap();
    let fit = fit_rkhs(&model_exponential(), &obs, &config).unwrap();
    assert!((fit.params[0] + 2.0).abs() < 1e-2, "{:?}", fit.params);

    let grid = TimeGrid::uniform(0.0, 30.0, 100).unwrap();
    let truth = integrate_rk4(&model_lotka_volterra(), &LV_TRUTH, &[1.0, 2.0], &grid, 20).unwrap();
    let obs = add_noise(&truth, &grid, 0.0, 0).unwrap();
    let fit = fit_rkhs(&model_lotka_volterra(), &obs, &config).unwrap();
    for k in 0..4 {
        assert!(
            (fit.params[k] - LV_TRUTH[k]).abs() < 1e-2,
            "{:?}",
            fit.params
        );
    }
}

#[test]
fn lambda_path_is_finite_and_consistent() {
    let sim = exp_sim(1, 4);
    let (_, obs) = odekernel::study::simulate_replicate(&model_exponential(), &sim, 0).unwrap();
    let config = RkhsConfig {
        covariance: false,
        ..Default::default()
    };
    let model = model_exponential();
    let prep = Prepared::new(&model, &obs, &config).unwrap();
    let path = prep
        .select_lambda(&odekernel::default_lambda_grid(), &config)
        .unwrap();
    assert_eq!(path.fits.len(), 13);
    for fit in &path.fits {
        assert!(fit.aic.is_finite());
        assert!(
            (fit.aic - (2.0 * fit.objective + 2.0 * fit.sum_df())).abs()
                < 1e-9 * fit.aic.abs().max(1.0)
        );
        assert!(fit.df.iter().all(|d| *d > 0.0 && *d <= 10.0));
    }
    let best = path.best_fit();
    assert!(path.fits.iter().all(|f| f.aic >= best.aic));
    let single = prep.select_lambda(&[best.lambda], &config).unwrap();
    assert_eq!(single.best_fit().params, best.params);
}

#[test]
fn wald_intervals_cover_estimates() {
    let sim = lv_sim(35, 0.1, 1, 8);
    let (_, obs) = odekernel::study::simulate_replicate(&model_lotka_volterra(), &sim, 0).unwrap();
    let fit = fit_rkhs(&model_lotka_volterra(), &obs, &RkhsConfig::default()).unwrap();
    let cov = fit.covariance.as_ref().expect("covariance");
    assert!((cov - cov.transpose()).amax() <= 1e-12 * cov.amax());
    for w in &fit.wald {
        let (lo, hi) = (w.lower.unwrap(), w.upper.unwrap());
        assert!(lo < w.estimate && w.estimate < hi);
        let half = 0.5 * (hi - lo);
        assert!((half / w.stderr.unwrap() - 1.959964).abs() < 1e-4);
    }
}

#[test]
fn table_row_is_reproduced_at_small_scale() {
    let sim = lv_sim(35, 0.1, 20, 5);
    let methods = Methods {
        rkhs: Some((
            RkhsConfig {
                covariance: false,
                ..Default::default()
            },
            None,
        )),
        mle: None,
    };
    let out = run_study(&model_lotka_volterra(), &sim, &methods).unwrap();
    let s = summarize(&collect_estimates(&out, |o| o.rkhs.as_ref()), &LV_TRUTH);
    let table = [0.0002, 0.0007, 0.0031, 0.0014];
    for k in 0..4 {
        // Twenty replicates: a loose order-of-magnitude band.
        assert!(s[k].mse < 10.0 * table[k], "{k}: {}", s[k].mse);
    }
}
