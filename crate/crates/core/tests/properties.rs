use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slm_core::design::{
    baseline_design, centered_order, grid_frequency, score_exact, score_lanczos, DesignKind,
};
use slm_core::linops::{
    adjoint_mismatch, make_finite_difference_2d, make_haar_wavelet_2d, make_identity,
    make_isotropic_tv_2d, make_partial_orthotransform_2d, make_row_select, make_stack,
    DenseOperator, Direction,
};
use slm_core::potentials::{fenchel_gap, log_grid, BoundCoefficients, PotentialSpec, WarmStart};
use slm_core::variance::{exact_variances_dense, lanczos_variances, DensePosterior};
use slm_core::varinf::{run_double_loop, Bounding, OuterOptions, VarianceSource};
use slm_core::{ModelSpec, Operator};

fn matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let g = matrix(n, n, seed);
    &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
}

fn op(m: DMatrix<f64>) -> Operator {
    std::sync::Arc::new(DenseOperator::new(m))
}

fn potential() -> impl Strategy<Value = PotentialSpec> {
    prop_oneof![
        (0.3f64..5.0).prop_map(|t| PotentialSpec::laplace(t).unwrap()),
        (1.0f64..6.0, 0.3f64..5.0).prop_map(|(nu, t)| PotentialSpec::student_t(nu, t).unwrap()),
    ]
}

/// Type A coefficients; Student's t carries its concave slope in `z2`.
fn coefficients(p: &PotentialSpec, z1: f64, z2: f64) -> BoundCoefficients {
    BoundCoefficients::type_a(z1, if p.is_log_concave() { 0.0 } else { z2 })
}

fn hstar(p: &PotentialSpec, s: f64, bc: &BoundCoefficients) -> slm_core::PenaltyEval {
    p.h_star(s, bc, &mut WarmStart::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn penalty_curvature_is_nonnegative(p in potential(), z1 in 1e-3f64..10.0, z2 in 1e-2f64..5.0, s in -20.0f64..20.0) {
        let e = hstar(&p, s, &coefficients(&p, z1, z2));
        prop_assert!(e.rho >= 0.0, "rho = {} at s = {s}", e.rho);
        prop_assert!(e.hstar.is_finite());
    }

    #[test]
    fn penalty_derivatives_match_differences(
        p in potential(),
        z1 in 1e-2f64..10.0,
        z2 in 1e-2f64..5.0,
        mag in 0.05f64..5.0,
        neg in any::<bool>(),
    ) {
        let s = if neg { -mag } else { mag };
        let bc = coefficients(&p, z1, z2);
        let h = 1e-4 * mag;
        let (lo, mid, hi) = (hstar(&p, s - h, &bc), hstar(&p, s, &bc), hstar(&p, s + h, &bc));
        let theta_fd = (hi.hstar - lo.hstar) / (2.0 * h);
        let rho_fd = (hi.theta - lo.theta) / (2.0 * h);
        prop_assert!((theta_fd - mid.theta).abs() <= 1e-6 * (1.0 + mid.theta.abs()),
            "theta {} vs {theta_fd}", mid.theta);
        prop_assert!((rho_fd - mid.rho).abs() <= 1e-5 * (1.0 + mid.rho.abs()),
            "rho {} vs {rho_fd}", mid.rho);
        prop_assert!((mid.theta_tilde - mid.theta / s).abs() <= 1e-10 * (1.0 + mid.theta_tilde.abs()));
    }

    #[test]
    fn fenchel_bound_is_tight_from_above(p in potential(), x in 1e-4f64..1e3) {
        let gap = fenchel_gap(&p, x, &log_grid(1e-8, 1e8, 2001)).unwrap();
        prop_assert!(gap >= -1e-9 && gap.is_finite(), "gap {gap}");
    }

    #[test]
    fn baseline_designs_are_valid(
        width in 2usize..40,
        seed in 0u64..1000,
        frac in 0.0f64..1.0,
        init_frac in 0.0f64..0.5,
    ) {
        let n_init = (init_frac * width as f64) as usize;
        let init: Vec<usize> = centered_order(width).into_iter().take(n_init).collect();
        let count = ((width - n_init) as f64 * frac) as usize;
        for kind in [DesignKind::LowPass, DesignKind::Equispaced, DesignKind::RandomVd] {
            let d = baseline_design(kind, width, count, &init, seed).unwrap();
            prop_assert_eq!(d.len(), count);
            prop_assert!(d.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(d.iter().all(|c| *c < width && !init.contains(c)));
            prop_assert_eq!(&d, &baseline_design(kind, width, count, &init, seed).unwrap());
        }
        prop_assert!(baseline_design(DesignKind::LowPass, width, width - n_init + 1, &init, seed).is_err());
    }

    #[test]
    fn centered_fold_is_a_permutation(width in 1usize..64) {
        let order = centered_order(width);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..width).collect::<Vec<_>>());
        for (f, &c) in order.iter().enumerate() {
            prop_assert_eq!(grid_frequency(c, width), f);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn operators_pass_adjoint_probes(h in 1usize..9, w in 2usize..9, seed in 0u64..1000, pick in 0usize..8) {
        let side = 1usize << (1 + pick % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops: Vec<Operator> = vec![
            make_finite_difference_2d(h, w, Direction::Horizontal).unwrap(),
            make_finite_difference_2d(w, h.max(1), Direction::Vertical).unwrap(),
            make_isotropic_tv_2d(h.max(2), w).unwrap().0,
            make_haar_wavelet_2d(side, side, 1).unwrap(),
            make_partial_orthotransform_2d(h, w, (0..w).filter(|c| c % 2 == pick % 2).collect()).unwrap(),
            make_row_select(make_identity(h * w), (0..h * w).step_by(1 + pick).collect()).unwrap(),
            make_stack(vec![make_identity(h * w), make_finite_difference_2d(h, w, Direction::Horizontal).unwrap()],
                vec![0.5, 2.0]).unwrap(),
        ];
        for o in &ops {
            prop_assert!(adjoint_mismatch(o.as_ref(), 5, &mut rng) <= 1e-10);
        }
    }

    #[test]
    fn lanczos_underestimates_monotonically(
        n in 2usize..18,
        q in 1usize..10,
        seed in 0u64..1000,
    ) {
        let a = spd(n, seed);
        let b = matrix(q, n, seed + 1);
        let (aop, bop) = (op(a.clone()), op(b));
        let exact = exact_variances_dense(&a, bop.as_ref()).unwrap();
        let mut prev = vec![0.0; q];
        for k in 1..=n {
            let (z, _) = lanczos_variances(aop.as_ref(), bop.as_ref(), k, true, seed).unwrap();
            for i in 0..q {
                prop_assert!(z[i] + 1e-12 >= prev[i], "k = {k}: {} < {}", z[i], prev[i]);
                prop_assert!(z[i] <= exact[i] + 1e-8, "k = {k}: {} > exact {}", z[i], exact[i]);
            }
            prev = z;
        }
        for i in 0..q {
            prop_assert!((prev[i] - exact[i]).abs() <= 1e-6 * exact[i].max(1e-12));
        }
    }

    #[test]
    fn lanczos_scores_stay_below_exact(
        n in 2usize..16,
        m in 1usize..6,
        sigma2 in 1e-2f64..1.0,
        seed in 0u64..1000,
    ) {
        let a = spd(n, seed);
        let cand = op(matrix(m, n, seed + 1));
        let post = DensePosterior::from_matrix(a.clone()).unwrap();
        let exact = score_exact(cand.as_ref(), &post, sigma2).unwrap();
        prop_assert!(exact >= 0.0);
        let ident = make_identity(n);
        let mut prev = 0.0;
        for k in 1..=n {
            let (_, fact) = lanczos_variances(op(a.clone()).as_ref(), ident.as_ref(), k, true, seed).unwrap();
            let s = score_lanczos(cand.as_ref(), &fact, sigma2).unwrap();
            prop_assert!(s + 1e-10 >= prev && s <= exact + 1e-8 * (1.0 + exact), "k = {k}: {s} vs exact {exact}");
            prev = s;
        }
        prop_assert!((prev - exact).abs() <= 1e-6 * (1.0 + exact));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn double_loop_descends(
        n in 3usize..12,
        m in 1usize..10,
        seed in 0u64..1000,
        tau in 0.5f64..4.0,
        type_b in any::<bool>(),
    ) {
        let x = op(matrix(m, n, seed));
        let y: Vec<f64> = matrix(m, 1, seed + 1).iter().map(|v| 2.0 * v).collect();
        let b = make_finite_difference_2d(1, n, Direction::Horizontal).unwrap();
        let pots = vec![PotentialSpec::laplace(tau).unwrap(); b.rows()];
        let model = ModelSpec::scalar(x, b, y, 0.1, pots).unwrap();
        let bounding = if type_b { Bounding::TypeB } else { Bounding::TypeA };
        let st = run_double_loop(&model, bounding, VarianceSource::Exact, &OuterOptions::default()).unwrap();
        for w in st.phi_history.windows(2) {
            prop_assert!(w[1].1 <= w[0].1 + 1e-8 * (1.0 + w[0].1.abs()), "{:?}", st.phi_history);
        }
        prop_assert!(st.gamma.iter().all(|g| *g > 0.0 && g.is_finite()));
    }
}
