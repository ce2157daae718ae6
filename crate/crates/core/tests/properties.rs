use divrisk_core::data::{select_universe, Observation, ReturnsPanel, UniverseSnapshot};
use divrisk_core::linalg::Matrix;
use divrisk_core::riskmodels::{
    estimate, shrink_beta, shrink_log_variances, Covariance, FactorModel, ModelKind, RiskModel,
};
use divrisk_core::strategies::{max_diversification, min_variance, risk_parity, StrategyConfig};
use divrisk_core::synthetic::{generate_synthetic_panel, SyntheticSpec};
use divrisk_core::YearMonth;
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("A{i:03}")).collect()
}

fn snapshot(n: usize, t: usize, returns: &[f64]) -> UniverseSnapshot {
    let window = Matrix::from_row_major(n, t, returns[..n * t].to_vec());
    UniverseSnapshot::new(YearMonth::new(2010, 1).unwrap(), ids(n), window, vec![1.0; n]).unwrap()
}

fn factor(b: Vec<f64>, d: Vec<f64>, sigma_f2: f64) -> RiskModel {
    let n = b.len();
    let cov = Covariance::Factor(FactorModel { sigma_f2, beta_hat: b.clone(), omega_hat2: d.clone(), b, d });
    RiskModel::new(ids(n), cov).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn factor_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (25usize..60).prop_flat_map(|n| {
        (prop::collection::vec(0.2f64..1.8, n), prop::collection::vec(0.0005f64..0.02, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shrunk_beta_moves_a_third_toward_one(b in -5.0f64..5.0) {
        let s = shrink_beta(b).unwrap();
        prop_assert!(((s - 1.0) - (b - 1.0) * 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn log_shrinkage_keeps_mean_log(v in prop::collection::vec(1e-6f64..1.0, 1..50)) {
        let out = shrink_log_variances(&v).unwrap();
        let m_in = v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64;
        let m_out = out.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64;
        prop_assert!((m_in - m_out).abs() < 1e-12);
        // ordering is preserved
        for (i, j) in (0..v.len()).zip(1..v.len()) {
            prop_assert_eq!(v[i] < v[j], out[i] < out[j]);
        }
    }

    #[test]
    fn matvec_matches_materialized(
        n in 2usize..40,
        t in 24usize..40,
        r in prop::collection::vec(-0.3f64..0.3, 40 * 40),
        mkt in prop::collection::vec(-0.2f64..0.2, 40),
        x in prop::collection::vec(-1.0f64..1.0, 40),
    ) {
        let snap = snapshot(n, t, &r);
        let cases = ModelKind::ALL.map(|k| (k, false)).into_iter().chain([(ModelKind::ShrunkSample, true)]);
        for (kind, repair) in cases {
            let model = match estimate(kind, &snap, &mkt[..t], None, repair) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let dense = model.materialize(4096).unwrap();
            let fast = model.cov_matvec(&x[..n]).unwrap();
            prop_assert!(rel_err(&fast, &dense.matvec(&x[..n])) <= 1e-10);
            prop_assert!(dense.is_symmetric(0.0));
        }
    }

    #[test]
    fn capped_weights_are_feasible((b, d) in factor_inputs(), cap in 0.05f64..0.2) {
        let model = factor(b, d, 0.002);
        let cfg = StrategyConfig { weight_cap: cap, ..StrategyConfig::default() };
        for w in [min_variance(&model, &cfg).unwrap(), max_diversification(&model, &cfg).unwrap()] {
            let total: f64 = w.weights().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-8);
            prop_assert!(w.weights().iter().all(|x| *x >= 0.0 && *x <= cap + 1e-10));
        }
    }

    #[test]
    fn permuting_assets_permutes_weights((b, d) in factor_inputs(), seed in any::<u64>()) {
        let n = b.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates from a splitmix sequence
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            perm.swap(i, (z ^ (z >> 31)) as usize % (i + 1));
        }
        let base = factor(b.clone(), d.clone(), 0.002);
        let moved = factor(perm.iter().map(|&i| b[i]).collect(), perm.iter().map(|&i| d[i]).collect(), 0.002);
        let cfg = StrategyConfig { rp_upper: 1e6, ..StrategyConfig::default() };
        type Solve = fn(&RiskModel, &StrategyConfig) -> Result<divrisk_core::strategies::PortfolioWeights, divrisk_core::strategies::StrategyError>;
        for solve in [min_variance as Solve, max_diversification, risk_parity] {
            let w0 = solve(&base, &cfg).unwrap();
            let w1 = solve(&moved, &cfg).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((w1.weights()[k] - w0.weights()[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn risk_parity_ignores_scale((b, d) in factor_inputs(), c in 0.01f64..100.0) {
        let cfg = StrategyConfig { rp_upper: 1e6, ..StrategyConfig::default() };
        let w0 = risk_parity(&factor(b.clone(), d.clone(), 0.002), &cfg).unwrap();
        let w1 = risk_parity(&factor(b, d.iter().map(|x| x * c).collect(), 0.002 * c), &cfg).unwrap();
        prop_assert!(rel_err(w1.weights(), w0.weights()) <= 1e-6);
    }
}

/// Rewrites every observation dated at or after `cut`.
fn perturb_from(panel: &ReturnsPanel, cut: YearMonth, salt: f64) -> ReturnsPanel {
    let obs: Vec<Observation> = panel
        .observations()
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if o.date >= cut {
                o.excess_return = -o.excess_return + salt;
                o.market_cap = o.market_cap * 7.0 + salt.abs();
            }
            o
        })
        .collect();
    ReturnsPanel::from_observations(obs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn snapshot_ignores_the_future(offset in 36i32..60, salt in -0.5f64..0.5) {
        let spec = SyntheticSpec { n_assets: 30, n_months: 72, start: YearMonth::new(2000, 1).unwrap(), seed: 5, ..SyntheticSpec::default() };
        let (panel, _, _) = generate_synthetic_panel(&spec).unwrap();
        let date = spec.start.add_months(offset);
        let a = select_universe(&panel, date, 36, 20).unwrap();
        let b = select_universe(&perturb_from(&panel, date, salt), date, 36, 20).unwrap();
        prop_assert_eq!(a, b);
    }
}
