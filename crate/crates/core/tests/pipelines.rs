use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapeuq::bem::{assemble, BoundaryDensity, CausalOperator, OperatorKind};
use shapeuq::benchmark::{circle_boundary, default_probes, default_velocity, DiskBenchmark};
use shapeuq::fem::{FluxRecovery, TimeGrid};
use shapeuq::kinematics::{RadialCutoff, TrigonometricField, VelocityField, ZeroField};
use shapeuq::moments::{CorrelationTensor, PayloadKind, ProbeStatistics, SampleEnsemble};
use shapeuq::verification::{
    a_prime_fd_check, crosscheck_bem_fem, derivative_rates, kinematics_rates, BemResolution, DerivativeProblem,
    StudyStatus,
};
use shapeuq::Point;

#[test]
fn zero_velocity_gives_zero_differences() {
    let r = DiskBenchmark::new(4, 8).solve_reference().unwrap();
    let p = DerivativeProblem::new(&r, Arc::new(ZeroField), FluxRecovery::Variational);
    let report = derivative_rates(&p, &[0.1, 0.05, 0.025]).unwrap();
    for s in &report.studies {
        assert!(s.errors.iter().all(|e| *e == 0.0), "{}: {:?}", s.name, s.errors);
        assert_eq!(s.status, StudyStatus::DegeneratePass, "{}", s.name);
    }
    assert!(report.passed());
}

#[test]
fn coarse_mesh_flags_the_floor() {
    let r = DiskBenchmark::new(4, 16).solve_reference().unwrap();
    let v = Arc::new(default_velocity().unwrap());
    let p = DerivativeProblem::new(&r, v, FluxRecovery::Variational);
    let report = derivative_rates(&p, &[0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125]).unwrap();
    let quotient = report.studies.iter().find(|s| s.name.ends_with("- z in L2(H1)")).unwrap();
    assert!(quotient.floor_at.is_some(), "{}", quotient.summary());
    // the triplet has no floor: the difference itself keeps shrinking
    assert!(report.studies[0].floor_at.is_none());
}

#[test]
fn crosscheck_improves_under_refinement() {
    let v = default_velocity().unwrap();
    let deviation = |rings: usize, steps: usize, elements: usize| {
        let r = DiskBenchmark::new(rings, steps).solve_reference().unwrap();
        let res = BemResolution { elements, steps };
        crosscheck_bem_fem(&r, &v, res, FluxRecovery::Variational, &default_probes()).unwrap().max_rel_deviation
    };
    let coarse = deviation(8, 32, 32);
    let fine = deviation(16, 64, 64);
    assert!(fine < coarse, "{fine} vs {coarse}");
    assert!(fine <= 0.05);
}

#[test]
fn identity_field_kinematics_are_exact_at_first_order() {
    // V = x near the origin: γ = (1 + ε)², so (γ − 1)/ε − div V = ε exactly
    let v = shapeuq::kinematics::AffineField::<2>::identity(0.5, 1.0);
    let grid = [0.1, 0.01, 0.001];
    let studies = kinematics_rates(&v, &grid).unwrap();
    let first_order = &studies[1];
    assert!((first_order.errors[0] - 0.1).abs() < 0.05, "{:?}", first_order.errors);
    assert!(first_order.passed());
}

fn small_operator() -> &'static CausalOperator {
    static OP: OnceLock<CausalOperator> = OnceLock::new();
    OP.get_or_init(|| assemble(&circle_boundary(8).unwrap(), TimeGrid::new(1.0, 6).unwrap(), OperatorKind::SingleLayer).unwrap())
}

fn density(values: &[f64]) -> BoundaryDensity {
    BoundaryDensity::from_values(6, 8, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn a_prime_matches_differences_for_random_fields(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = TrigonometricField::<2>::random(&mut rng, 3, 0.5, 3.0, RadialCutoff::new(Point::<2>::zeros(), 0.5, 1.0));
        prop_assert!(a_prime_fd_check(&v, 50, 1e-6, seed).unwrap() <= 1e-4);
        prop_assert!(v.support_radius() > 0.0);
    }

    #[test]
    fn single_layer_is_linear_and_causal(
        x in prop::collection::vec(-1.0f64..1.0, 48),
        y in prop::collection::vec(-1.0f64..1.0, 48),
        a in -2.0f64..2.0,
        k in 1usize..6,
    ) {
        let op = small_operator();
        let (dx, dy) = (density(&x), density(&y));
        let lhs = op.apply(&dx.combine(a, &dy, 1.0).unwrap()).unwrap();
        let rhs = op.apply(&dx).unwrap().combine(a, &op.apply(&dy).unwrap(), 1.0).unwrap();
        let scale = rhs.values().iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (l, r) in lhs.values().iter().zip(rhs.values()) {
            prop_assert!((l - r).abs() <= 1e-12 * scale);
        }
        // zeroing the density from interval k on leaves earlier outputs unchanged
        let mut cut = x.clone();
        cut[k * 8..].iter_mut().for_each(|v| *v = 0.0);
        let full = op.apply(&dx).unwrap();
        let part = op.apply(&density(&cut)).unwrap();
        prop_assert_eq!(&full.values()[..k * 8], &part.values()[..k * 8]);
    }

    #[test]
    fn sample_covariance_is_symmetric_psd(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 3..30)) {
        let mut ens = SampleEnsemble::new(PayloadKind::ProbeValues);
        for (i, r) in rows.iter().enumerate() {
            ens.push(i as u64, r.clone()).unwrap();
        }
        let stats = ProbeStatistics::from_ensemble(&ens).unwrap();
        let check = |c: &CorrelationTensor| {
            let trace: f64 = c.diagonal().iter().sum();
            c.asymmetry() == 0.0 && c.min_eigenvalue() >= -1e-10 * trace.max(1e-300)
        };
        prop_assert!(check(&stats.covariance));
        prop_assert!(check(&stats.correlation));
    }
}
