use locksim::bath::{effective_t2, narrowing_tau_c, sample_realization, BathModel, BathParams};
use locksim::units::khz_to_rad_per_s as khz;

#[test]
fn gauss_markov_long_correlation_statistics() {
    let tau_c = 1e-3;
    let p = BathParams::new(khz(10.0), tau_c, BathModel::GaussMarkov).unwrap();
    let dt = p.max_grid_dt();
    let lag = (tau_c / dt).round() as usize;
    let n_real = 10_000u64;

    let (mut var, mut cov) = (0.0, 0.0);
    let mut count = 0.0;
    let probe = [0usize, 250, 500, 999];
    let mut sums = [0.0f64; 4];
    for s in 0..n_real {
        let r = sample_realization(&p, 0.1, dt, 7, s).unwrap();
        let x = r.samples();
        for (k, &i) in probe.iter().enumerate() {
            sums[k] += x[i];
        }
        // A handful of pairs per realization keeps them nearly independent.
        for start in (0..x.len() - lag).step_by(200) {
            var += x[start] * x[start];
            cov += x[start] * x[start + lag];
            count += 1.0;
        }
    }
    let d2 = p.delta_rms * p.delta_rms;
    assert!((var / count / d2 - 1.0).abs() < 0.05, "variance ratio {}", var / count / d2);
    let rho = cov / var;
    assert!((rho / (-1.0f64).exp() - 1.0).abs() < 0.10, "lag-tau_c correlation {rho}");

    // Stationary mean: zero within 3 sigma / sqrt(N) at every probed time.
    let bound = 3.0 * p.delta_rms / (n_real as f64).sqrt();
    for s in sums {
        assert!((s / n_real as f64).abs() <= bound);
    }
}

#[test]
fn narrowing_seed_for_fifty_microseconds() {
    let tau_c = narrowing_tau_c(50e-6, khz(10.0), BathModel::GaussMarkov);
    assert!((tau_c * 1e6 - 5.066).abs() < 1e-3, "{tau_c}");
    let p = BathParams::new(khz(10.0), tau_c, BathModel::GaussMarkov).unwrap();
    assert!((effective_t2(&p).unwrap() - 50e-6).abs() < 1e-12);

    let p2 = BathParams::new(khz(20.0), tau_c, BathModel::GaussMarkov).unwrap();
    assert!((effective_t2(&p2).unwrap() * 4.0 - 50e-6).abs() < 1e-12);
}

#[test]
fn telegraph_is_bounded_and_stationary() {
    let p = BathParams::new(khz(10.0), 5e-6, BathModel::TwoStateTelegraph).unwrap();
    let n = 4000;
    let mut sum_mid = 0.0;
    for s in 0..n {
        let r = sample_realization(&p, 100e-6, p.max_grid_dt(), 3, s).unwrap();
        assert!(r.samples().iter().all(|x| x.abs() == p.delta_rms));
        sum_mid += r.samples()[100];
    }
    assert!((sum_mid / n as f64).abs() <= 3.0 * p.delta_rms / (n as f64).sqrt());
}

#[test]
fn streams_differ_and_repeat() {
    let p = BathParams::new(khz(10.0), 5e-6, BathModel::GaussMarkov).unwrap();
    let a = sample_realization(&p, 50e-6, 0.5e-6, 1, 4).unwrap();
    let b = sample_realization(&p, 50e-6, 0.5e-6, 1, 4).unwrap();
    let c = sample_realization(&p, 50e-6, 0.5e-6, 1, 5).unwrap();
    assert_eq!(a.samples(), b.samples());
    assert_ne!(a.samples(), c.samples());
}
