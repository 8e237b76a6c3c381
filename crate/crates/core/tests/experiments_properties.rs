use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pdmplab::event_engine::{cost_sandwich_report, EnvelopeConfig, EventStrategy};
use pdmplab::experiments::{
    bps_lambda_path, check_signflip_lemma, fit_log_log_slope, mean_se, run_drift_diagnostic, run_refresh_balance, run_scaling_study, run_trajectory_gap, start_on_ray,
    ExperimentSpec, RefreshSetting,
};
use pdmplab::potentials::{GaussianPotential, PotentialConfig, PotentialRef};
use pdmplab::rng::stream;
use pdmplab::samplers::{simulate, RefreshPolicy, RunOptions, Sampler, SamplerKind};
use pdmplab::Error;

fn gaussian(rows: Vec<Vec<f64>>) -> PotentialConfig {
    PotentialConfig::Gaussian { precision: rows }
}

fn base_spec(sampler: SamplerKind) -> ExperimentSpec {
    ExperimentSpec {
        sampler,
        potential: gaussian(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        eps_grid: vec![1e-2, 1e-3, 1e-4, 1e-5],
        refresh: RefreshSetting::Fixed { rho: 1.0 },
        gamma: 0.1,
        replicas: 200,
        horizon: 1e3,
        seed: 99,
        start: None,
        start_level: 2.0,
        engine: None,
        band_localized: false,
    }
}

#[test]
fn bps_rate_integral_scales_like_root_eps() {
    let p: PotentialRef = Arc::new(GaussianPotential::isotropic(2));
    let x0 = DVector::from_vec(vec![2.0, 0.0]);
    let v0 = DVector::from_vec(vec![0.0, 1.0]);
    let horizon = 1.0;
    let mut points = Vec::new();
    for (i, eps) in [1e-2, 1e-3, 1e-4, 1e-5].into_iter().enumerate() {
        let sampler = Sampler::new(SamplerKind::Bps, p.clone(), eps, EventStrategy::Exact).unwrap();
        let integrals: Vec<f64> = (0..100)
            .map(|j| {
                let mut rng = stream(5, &[i as u64, j]);
                let opts = RunOptions { horizon, record_events: true, ..Default::default() };
                let r = simulate(&sampler, None, x0.clone(), Some(v0.clone()), RefreshPolicy::None, &opts, &mut rng).unwrap();
                let path = bps_lambda_path(p.as_ref(), &x0, &v0, &r.events, horizon).unwrap();
                check_signflip_lemma(&path, 1.0, 1.0, 0.05).unwrap().int_abs
            })
            .collect();
        let (m, se) = mean_se(&integrals);
        points.push((eps, m, se));
    }
    let fit = fit_log_log_slope(&points).unwrap();
    assert!((fit.slope - 0.5).abs() <= 0.15, "slope {}", fit.slope);
}

#[test]
fn zigzag_tangency_coordinate_flips_scale_like_inverse_root_eps() {
    // start on d_2 U = 0 with H diagonally dominant
    let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let x0 = h.clone().lu().solve(&DVector::from_vec(vec![2.0, 0.0])).unwrap();
    let mut spec = base_spec(SamplerKind::ZigZag);
    spec.potential = gaussian(vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
    spec.eps_grid = vec![1e-3, 1e-4, 1e-5];
    spec.refresh = RefreshSetting::None;
    spec.replicas = 100;
    spec.horizon = 0.3;
    spec.start = Some(x0.iter().copied().collect());
    spec.band_localized = true;
    let r = run_scaling_study(&spec).unwrap();
    let scaled: Vec<f64> = spec
        .eps_grid
        .iter()
        .enumerate()
        .map(|(i, eps)| {
            let rows = &r.rows[i * spec.replicas..(i + 1) * spec.replicas];
            let mean = rows.iter().map(|row| row.coordinate_events[1] as f64).sum::<f64>() / rows.len() as f64;
            eps.sqrt() * mean
        })
        .collect();
    let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0f64), |a, &s| (a.0.min(s), a.1.max(s)));
    assert!(lo > 0.0 && hi / lo <= 5.0, "{scaled:?}");
}

#[test]
fn thinning_cost_ratio_is_bounded_in_the_band() {
    let p: PotentialRef = Arc::new(GaussianPotential::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap());
    let strategy = EventStrategy::Thinning(EnvelopeConfig::default());
    let sampler = Sampler::new(SamplerKind::Bps, p.clone(), 1e-3, strategy).unwrap();
    let counters: Vec<_> = (0..200)
        .map(|j| {
            let mut rng = stream(17, &[j]);
            let angle = 2.0 * PI * j as f64 / 200.0;
            let x0 = start_on_ray(p.as_ref(), &DVector::from_vec(vec![angle.cos(), angle.sin()]), 2.0).unwrap();
            let g = p.grad(&x0);
            let v0 = DVector::from_vec(vec![-g[1], g[0]]) / g.norm();
            let opts = RunOptions { horizon: 1.0, ..Default::default() };
            simulate(&sampler, None, x0, Some(v0), RefreshPolicy::None, &opts, &mut rng).unwrap().counters
        })
        .collect();
    let s = cost_sandwich_report(&counters).unwrap();
    assert_eq!(s.runs_used, 200);
    assert!(s.ratio_low >= 1.0);
    println!("{s:?}");
    assert!(s.ratio_high / s.ratio_low <= 10.0, "{s:?}");
}

/// One step of the high-refresh BPS moves on average by `E[rho T_1 B+ W]`,
/// which for Gaussian `W` is `-sqrt(2/pi) n`.
#[test]
fn high_refresh_displacement_rate_matches_reflected_refresh_mean() {
    let eps: f64 = 1e-6;
    let p: PotentialRef = Arc::new(GaussianPotential::isotropic(2));
    let sampler = Sampler::new(SamplerKind::Bps, p.clone(), eps, EventStrategy::Exact).unwrap();
    let x0 = DVector::from_vec(vec![0.0, 2.0]);
    let dt = 0.25;
    let mut mean = DVector::zeros(2);
    let replicas = 200;
    for j in 0..replicas {
        let mut rng = stream(23, &[j]);
        let opts = RunOptions { horizon: dt, ..Default::default() };
        let r = simulate(&sampler, None, x0.clone(), None, RefreshPolicy::Rate(eps.powf(-0.5)), &opts, &mut rng).unwrap();
        mean += (&r.final_state.x - &x0) / dt;
    }
    mean /= replicas as f64;
    let target = (2.0 / PI).sqrt();
    assert!(mean[0].abs() < 0.05 * target);
    assert!((-mean[1] - target).abs() <= 0.05 * target, "{mean:?}");
}

#[test]
fn scaling_study_is_reproducible_across_thread_counts() {
    let mut spec = base_spec(SamplerKind::Bps);
    spec.replicas = 30;
    spec.eps_grid = vec![1e-2, 1e-3];
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_scaling_study(&spec).unwrap());
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| run_scaling_study(&spec).unwrap());
    assert_eq!(one.rows, four.rows);
    assert_eq!(one.summary, four.summary);
    spec.seed += 1;
    assert_ne!(run_scaling_study(&spec).unwrap().rows, one.rows);
}

#[test]
fn fixed_refresh_slope_interval_is_narrow() {
    let r = run_scaling_study(&base_spec(SamplerKind::Bps)).unwrap();
    let fit = r.slope.unwrap();
    assert!(fit.ci_hi - fit.ci_lo <= 0.2, "{fit:?}");
    assert!(r.summary.iter().all(|s| s.included && s.hit_fraction >= 0.95));
    for row in &r.rows {
        assert_eq!(row.jumps_flip, 0);
        assert!(row.deriv_evals >= row.jumps_bounce);
    }
}

#[test]
fn invalid_specs_name_the_field() {
    let field = |s: ExperimentSpec| match s.validate() {
        Err(Error::Configuration(m)) => m,
        other => panic!("expected a configuration error, got {other:?}"),
    };
    let mut s = base_spec(SamplerKind::Bps);
    s.eps_grid = vec![1e-3, 1e-2];
    assert!(field(s).starts_with("eps_grid"));
    let mut s = base_spec(SamplerKind::Bps);
    s.gamma = 0.0;
    assert!(field(s).starts_with("gamma"));
    let mut s = base_spec(SamplerKind::Bps);
    s.start = Some(vec![1.0]);
    assert!(field(s).starts_with("start"));
    let mut s = base_spec(SamplerKind::Bps);
    s.potential = gaussian(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
    assert!(field(s).starts_with("potential"));
    let mut s = base_spec(SamplerKind::Fec);
    s.replicas = 2;
    assert!(matches!(run_trajectory_gap(&s), Err(Error::Configuration(m)) if m.starts_with("sampler")));
    let mut s = base_spec(SamplerKind::Bps);
    s.refresh = RefreshSetting::Tuned { exponent: 0.25 };
    assert!(matches!(run_trajectory_gap(&s), Err(Error::Configuration(m)) if m.starts_with("refresh")));
}

#[test]
fn potential_value_at_default_start() {
    let s = base_spec(SamplerKind::Fec);
    let p = s.potential.build().unwrap();
    let x0 = s.start_point(p.as_ref()).unwrap();
    assert!((p.value(&x0) - 2.0).abs() < 1e-12);
}

#[test]
fn refresh_balance_minimum_sits_near_quarter_power() {
    let mut spec = base_spec(SamplerKind::Bps);
    spec.eps_grid = vec![1e-4];
    spec.replicas = 200;
    let grid: Vec<f64> = (0..9).map(|k| 10f64.powf(k as f64 / 4.0)).collect();
    let r = run_refresh_balance(&spec, &grid).unwrap();
    for row in &r.rows {
        println!("{:>8.3} bounces {:>8.2} refreshes {:>8.2} total {:>8.2} +/- {:.2}", row.rho, row.mean_bounces, row.mean_refreshes, row.mean_total, row.se_total);
    }
    let best = &r.rows[r.argmin];
    assert!((best.rho.log10() - 1.0).abs() <= 0.25 + 1e-9, "argmin rho {}", best.rho);
    assert!((1.0 / 3.0..=3.0).contains(&best.bounces_per_refresh), "{}", best.bounces_per_refresh);
    assert!(r.rows[0].mean_total > best.mean_total && r.rows[8].mean_total > best.mean_total);
}

#[test]
fn jump_chains_contract_exp_potential() {
    let p: PotentialRef = Arc::new(GaussianPotential::isotropic(2));
    let band = pdmplab::potentials::BandSpec::new(0.5).unwrap();
    for kind in [SamplerKind::Fec, SamplerKind::Coordinate] {
        let d = run_drift_diagnostic(kind, &p, &band, 1e-2, 20, 2000, 31).unwrap();
        assert_eq!(d.points.len(), 20);
        assert!(d.beta_hat > 0.0, "{kind:?} {}", d.beta_hat);
        let rare = run_drift_diagnostic(kind, &p, &band, 1e-3, 20, 500, 37).unwrap();
        assert_eq!(rare.tail_frequency, 0.0);
        assert!(rare.tail_bound < 1e-100);
    }
    assert!(matches!(
        run_drift_diagnostic(SamplerKind::Bps, &p, &band, 1e-2, 2, 10, 1),
        Err(Error::Configuration(_))
    ));
}
