mod common;

use common::*;
use histboost::baselearners::*;
use histboost::boostcore::*;
use histboost::fdgrid::{trapezoid_weights, truncate_history, HistoryLimits, TimeGrid};
use histboost::linalg::sym_eigen;
use histboost::simgen::{self, Scenario, SimParams};
use histboost::splines::{
    difference_penalty, double_sum_to_zero_transform, sum_to_zero_transform, MarginalBasis,
};
use histboost::uncertainty::{replicate_rng, resample_weights};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sorted_points() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..10.0_f64, 2..30).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        v
    })
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).0.into_iter().fold(f64::INFINITY, f64::min)
}

fn light() -> ProptestConfig {
    ProptestConfig::with_cases(12)
}

proptest! {
    #[test]
    fn trapezoid_weights_sum_to_range(points in sorted_points()) {
        prop_assume!(points.len() >= 2);
        let w = trapezoid_weights(&points).unwrap();
        let range = points[points.len() - 1] - points[0];
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - range).abs() <= 1e-12 * range.max(1.0));
        prop_assert!(w.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn truncation_is_idempotent_and_monotone(
        points in sorted_points(),
        delta in 0.0..2.0_f64,
        t in 0.0..10.0_f64,
        dt in 0.0..3.0_f64,
    ) {
        prop_assume!(points.len() >= 2);
        let grid = TimeGrid::new(points.clone()).unwrap();
        let lim = HistoryLimits::Lead { delta };
        let ones = vec![1.0; points.len()];
        let once = truncate_history(&ones, &grid, &lim, t);
        prop_assert_eq!(&truncate_history(&once, &grid, &lim, t), &once);
        let later = truncate_history(&ones, &grid, &lim, t + dt);
        prop_assert!(once.iter().zip(&later).all(|(a, b)| *a <= *b));
    }

    #[test]
    fn bspline_rows_are_a_sparse_partition_of_unity(
        k in 2usize..12,
        deg in 0usize..4,
        lo in -5.0..5.0_f64,
        width in 0.1..10.0_f64,
        u in 0.0..=1.0_f64,
    ) {
        prop_assume!(deg < k);
        let basis = MarginalBasis::equidistant(lo, lo + width, k, deg).unwrap();
        let row = basis.eval_row(lo + u * width).unwrap();
        prop_assert!(row.iter().all(|v| *v >= -1e-14));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= deg + 1);
    }

    #[test]
    fn difference_penalty_null_space_is_polynomials(k in 3usize..14, order in 1usize..3, coefs in prop::collection::vec(-3.0..3.0_f64, 3)) {
        prop_assume!(order < k);
        let p = difference_penalty(k, order).unwrap();
        prop_assert!(min_eigenvalue(&p) >= -1e-9);
        let poly = DVector::from_fn(k, |i, _| (0..order).map(|e| coefs[e] * (i as f64).powi(e as i32)).sum::<f64>());
        prop_assert!((&p * &poly).amax() <= 1e-9 * poly.amax().max(1.0));
        let bump = DVector::from_fn(k, |i, _| (i as f64).powi(order as i32));
        prop_assert!(bump.dot(&(&p * &bump)) > 1e-6);
    }

    #[test]
    fn sum_to_zero_transform_is_orthonormal_null_space(psi in prop::collection::vec(0.05..5.0_f64, 2..9)) {
        let c = sum_to_zero_transform(&psi).unwrap();
        prop_assert_eq!(c.z.shape(), (psi.len(), psi.len() - 1));
        prop_assert!((&c.constraints * &c.z).amax() <= 1e-12);
        let eye = DMatrix::<f64>::identity(c.z.ncols(), c.z.ncols());
        prop_assert!((c.z.transpose() * &c.z - eye).amax() <= 1e-12);
    }

    #[test]
    fn double_sum_to_zero_transform_is_orthonormal_null_space(
        eta in 2usize..5,
        phi in 2usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = DMatrix::from_fn(eta, phi, |_, _| rng.random_range(0.1..3.0));
        let c = double_sum_to_zero_transform(&psi).unwrap();
        prop_assert_eq!(c.z.ncols(), (eta - 1) * (phi - 1));
        prop_assert!((&c.constraints * &c.z).amax() <= 1e-12);
        let eye = DMatrix::<f64>::identity(c.z.ncols(), c.z.ncols());
        prop_assert!((c.z.transpose() * &c.z - eye).amax() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(light())]

    #[test]
    fn historical_design_matches_brute_force(seed in any::<u64>(), kx in 2usize..5, kt in 2usize..5, delta in 0.0..0.2_f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 3, 6, 7, 2, 2);
        let x = &ds.functional[0];
        let sb = MarginalBasis::equidistant(x.grid.first(), x.grid.last(), kx, 1).unwrap();
        let (tlo, thi) = ds.time_range();
        let tb = MarginalBasis::equidistant(tlo, thi, kt, 1).unwrap();
        let lim = HistoryLimits::Lead { delta };
        prop_assume!(historical_design(x, &lim, &tb, &sb, &ds).is_ok());
        let fast = historical_design(x, &lim, &tb, &sb, &ds).unwrap();
        let brute = brute_historical(&ds, delta, kx, kt, 1, 1);
        prop_assert!(max_diff(&fast, &brute) <= 1e-10);
    }

    #[test]
    fn learner_penalties_are_psd(seed in any::<u64>(), lambda in 1e-3..1e3_f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 12, 6, 8, 3, 2);
        let lim = HistoryLimits::Lead { delta: 0.05 };
        let b = Some(BasisSize::cubic(4, 1));
        let specs = [
            LearnerSpec::intercept(),
            LearnerSpec::historical("h", "x", lim).with_bases(b, b),
            LearnerSpec::historical("hz", "x", lim).with_bases(b, b).with_family(Family::FactorHistorical).with_factors(["z1"]),
            LearnerSpec::historical("hzz", "x", lim)
                .with_bases(b, b)
                .with_family(Family::DoublyVaryingHistorical)
                .with_factors(["z1", "z2"]),
        ];
        for spec in &specs {
            let mut l = BaseLearner::build(spec, &ds).unwrap();
            l.lambda = lambda;
            let p = l.penalty().unwrap();
            prop_assert!((&p - p.transpose()).amax() <= 1e-12 * p.amax().max(1.0));
            prop_assert!(min_eigenvalue(&p) >= -1e-9 * p.amax().max(1.0));
        }
    }

    #[test]
    fn risk_path_is_non_increasing(seed in any::<u64>(), nu in 0.05..=1.0_f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 12, 8, 10, 3, 2);
        let lim = HistoryLimits::Lead { delta: 0.05 };
        let b = Some(BasisSize::cubic(4, 1));
        let specs = [
            LearnerSpec::intercept(),
            LearnerSpec::historical("h", "x", lim).with_bases(b, b),
            LearnerSpec::historical("hz", "x", lim).with_bases(b, b).with_family(Family::FactorHistorical).with_factors(["z1"]),
        ];
        let cfg = BoostConfig { nu, mstop: 150, folds: 0, df: 3.0, ..Default::default() };
        let model = boost(&ds, &specs, &cfg).unwrap();
        prop_assert!(model.risk.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15));
    }

    #[test]
    fn negative_gradient_matches_finite_differences(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 5, 7, 6, 2, 2);
        let n = ds.n_obs();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ups = ds.obs_integration_weights();
        let w = vec![1.0; ds.n_curves()];
        let u = negative_gradient(Loss::SquaredError, &ds, &h).unwrap();
        let off = ds.offsets();
        let nc = ds.n_curves() as f64;
        for _ in 0..20 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps = 1e-5;
            let shift = |sgn: f64| h.iter().zip(&v).map(|(a, b)| a + sgn * eps * b).collect::<Vec<_>>();
            let fd = (empirical_risk(&ds, &shift(1.0), Loss::SquaredError, &w, &ups).unwrap()
                - empirical_risk(&ds, &shift(-1.0), Loss::SquaredError, &w, &ups).unwrap())
                / (2.0 * eps);
            let mut analytic = 0.0;
            for i in 0..ds.n_curves() {
                for k in off[i]..off[i + 1] {
                    analytic -= w[i] * ups[k] * u[k] * v[k] / nc;
                }
            }
            prop_assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0));
        }
    }

    #[test]
    fn learner_order_does_not_change_selection(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 12, 8, 10, 3, 2);
        let lim = HistoryLimits::Lead { delta: 0.05 };
        let b = Some(BasisSize::cubic(4, 1));
        let specs = vec![
            LearnerSpec::intercept(),
            LearnerSpec::historical("h", "x", lim).with_bases(b, b),
            LearnerSpec::historical("hz", "x", lim).with_bases(b, b).with_family(Family::FactorHistorical).with_factors(["z1"]),
        ];
        let reversed: Vec<LearnerSpec> = specs.iter().rev().cloned().collect();
        let cfg = BoostConfig { nu: 0.3, mstop: 60, folds: 0, df: 3.0, ..Default::default() };
        let a = boost(&ds, &specs, &cfg).unwrap();
        let r = boost(&ds, &reversed, &cfg).unwrap();
        let relabelled: Vec<usize> = r.selection.iter().map(|j| specs.len() - 1 - j).collect();
        prop_assert_eq!(&a.selection, &relabelled);
    }

    #[test]
    fn unreachable_coefficients_never_enter_predictions(seed in any::<u64>(), bump in -100.0..100.0_f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 6, 8, 10, 2, 2);
        let b = Some(BasisSize::cubic(5, 1));
        let spec = LearnerSpec::historical("h", "x", HistoryLimits::Lead { delta: 0.2 }).with_bases(b, b);
        let cfg = BoostConfig { nu: 0.5, mstop: 20, folds: 0, df: 3.0, ..Default::default() };
        let model = boost(&ds, &[spec], &cfg).unwrap();
        let design = model.learners[0].design(&ds).unwrap();
        let dead: Vec<usize> = (0..design.ncols()).filter(|&c| design.column(c).iter().all(|v| *v == 0.0)).collect();
        prop_assume!(!dead.is_empty());
        let mut perturbed = model.clone();
        for &c in &dead {
            perturbed.theta[c] += bump;
        }
        prop_assert_eq!(model.predict(&ds).unwrap().total, perturbed.predict(&ds).unwrap().total);
    }

    #[test]
    fn constrained_factor_surfaces_are_centred(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 14, 8, 10, 3, 2);
        let lim = HistoryLimits::Lead { delta: 0.05 };
        let b = Some(BasisSize::cubic(4, 1));
        let specs = [
            LearnerSpec::intercept(),
            LearnerSpec::historical("hz", "x", lim).with_bases(b, b).with_family(Family::FactorHistorical).with_factors(["z1"]),
        ];
        let cfg = BoostConfig { nu: 0.5, mstop: 40, folds: 0, df: 3.0, ..Default::default() };
        let model = boost(&ds, &specs, &cfg).unwrap();
        let grid: Vec<f64> = (0..50).map(|k| k as f64 / 49.0).collect();
        let surf = model.coefficient_surface(1, &grid, &grid).unwrap();
        let psi = ds.categorical("z1").unwrap().psi();
        let mut total = DMatrix::zeros(grid.len(), grid.len());
        for (v, p) in surf.values.iter().zip(&psi) {
            total += v * *p;
        }
        prop_assert!(total.amax() <= 1e-8);
    }

    #[test]
    fn bootstrap_weights_are_pure_in_seed_and_replicate(seed in any::<u64>(), r in 0usize..50) {
        let sim = simgen::gen_multimodal(10, 8, 1.0, 5, 1).unwrap();
        let unit = ResamplingUnit::Curve;
        let a = resample_weights(&sim.dataset, &unit, &mut replicate_rng(seed, r)).unwrap();
        let b = resample_weights(&sim.dataset, &unit, &mut replicate_rng(seed, r)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.iter().sum::<f64>(), sim.dataset.n_curves() as f64);
        prop_assert!(a.iter().all(|w| w.fract() == 0.0));
    }

    #[test]
    fn simulation_is_deterministic_and_hits_the_snr(seed in any::<u64>(), snr in 0.1..10.0_f64) {
        let p = SimParams { n: 8, d: 12, snr, seed, ..Default::default() };
        let a = simgen::simulate(Scenario::Multimodal, &p).unwrap();
        let b = simgen::simulate(Scenario::Multimodal, &p).unwrap();
        prop_assert_eq!(&a.dataset, &b.dataset);
        let xi = &a.linear_predictor;
        let mean = xi.iter().sum::<f64>() / xi.len() as f64;
        let sd = (xi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (xi.len() as f64 - 1.0)).sqrt();
        prop_assert!((sd / a.sigma - snr).abs() <= 1e-10 * snr);
    }
}
