//! Cross-module behavior of the full estimation pipeline.

use msir::baselines::fit_sir;
use msir::dimension::{permutation_test, PermutationOptions};
use msir::simbench::{Method, SimModel, SimulationSpec};
use msir::{fit_msir, Dataset, GmmOptions, MsirOptions, Response, SliceSpec, Treatment};
use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn random_regression(n: usize, p: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, p), |_| normal(&mut rng));
    let y = Array1::from_shape_fn(n, |i| {
        x[[i, 0]] + 0.5 * x[[i, 1 % p]] * x[[i, 1 % p]] + 0.3 * normal(&mut rng)
    });
    Dataset::new(x, Response::Numeric(y)).unwrap()
}

#[test]
fn msir_with_single_components_matches_directly_coded_sir() {
    for seed in 0..3u64 {
        let data = random_regression(150 + 40 * seed as usize, 4, 900 + seed);
        let opts = MsirOptions {
            gmm: GmmOptions {
                max_components: 1,
                ..GmmOptions::default()
            },
            seed,
            ..MsirOptions::default()
        };
        let mfit = fit_msir(&data, &opts).unwrap();
        let sfit = fit_sir(&data, SliceSpec::Auto, Treatment::Auto).unwrap();
        assert_eq!(mfit.d_max, sfit.d_max);
        for (a, b) in mfit.eigenvalues.iter().zip(sfit.eigenvalues.iter()) {
            assert!((a - b).abs() < 1e-9, "eigenvalue gap {}", (a - b).abs());
        }
        for (a, b) in mfit.basis.iter().zip(sfit.basis.iter()) {
            assert!((a - b).abs() < 1e-9, "direction gap {}", (a - b).abs());
        }
    }
}

#[test]
fn pure_noise_response_has_smaller_leading_eigenvalue_than_signal() {
    // paired comparison: same predictors, y either independent noise or the
    // symmetric single-index signal at matching (n, p)
    let n = 200;
    let p = 5;
    let seeds = 40u64;
    let mut wins = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + seed);
        let x = Array2::from_shape_fn((n, p), |_| normal(&mut rng));
        let y_noise = Array1::from_shape_fn(n, |_| normal(&mut rng));
        let y_signal = Array1::from_shape_fn(n, |i| {
            let t = 0.5 * (x[[i, 0]] - x[[i, 1]]);
            t * t + 0.5 * normal(&mut rng)
        });
        let opts = MsirOptions {
            seed,
            ..MsirOptions::default()
        };
        let noise_fit = fit_msir(
            &Dataset::new(x.clone(), Response::Numeric(y_noise)).unwrap(),
            &opts,
        )
        .unwrap();
        let signal_fit = fit_msir(
            &Dataset::new(x, Response::Numeric(y_signal)).unwrap(),
            &opts,
        )
        .unwrap();
        if noise_fit.eigenvalues[0] < signal_fit.eigenvalues[0] {
            wins += 1;
        }
    }
    assert!(
        wins * 100 >= 95 * seeds as usize,
        "signal eigenvalue larger in only {wins}/{seeds} paired draws"
    );
}

#[test]
fn permutation_test_is_reproducible() {
    let data = random_regression(120, 3, 77);
    let opts = PermutationOptions {
        fit: MsirOptions {
            seed: 5,
            ..MsirOptions::default()
        },
        n_perms: 29,
        max_d: Some(1),
        exhaustive: true,
        ..PermutationOptions::default()
    };
    let a = permutation_test(&data, &opts).unwrap();
    let b = permutation_test(&data, &opts).unwrap();
    assert_eq!(a.p_values, b.p_values);
    assert_eq!(a.d_perm, b.d_perm);
    let pvals = a.p_values.unwrap();
    assert!(pvals.iter().all(|&p| p > 0.0 && p <= 1.0));
    // tail statistics non-increasing in d
    for w in a.lambda_stats.windows(2) {
        assert!(w[0] >= w[1] - 1e-9);
    }
}

#[test]
fn chi_square_test_applies_to_slice_mean_fits_only() {
    // strong one-direction linear signal: the asymptotic test should keep
    // d = 1 and produce valid p-values
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 400;
    let x = Array2::from_shape_fn((n, 4), |_| normal(&mut rng));
    let y = Array1::from_shape_fn(n, |i| 2.0 * x[[i, 0]] + 0.2 * normal(&mut rng));
    let data = Dataset::new(x, Response::Numeric(y)).unwrap();
    let sfit = fit_sir(&data, SliceSpec::Fixed(8), Treatment::Auto).unwrap();
    let test = msir::dimension::sir_chi_square_test(&sfit, 0.05).unwrap();
    assert_eq!(test.d_hat, 1, "p-values {:?}", test.p_values);
    assert!(test.p_values.iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!(test.dof[0], 4 * 7); // (p - 0)(H - 0 - 1)

    // a mixture fit with multi-component slices is rejected
    let mfit = fit_msir(&data, &MsirOptions::default()).unwrap();
    if mfit.slice_mixtures.iter().any(|m| m.k() > 1) {
        assert!(msir::dimension::sir_chi_square_test(&mfit, 0.05).is_err());
    }
}

#[test]
fn slice_count_sweep_degrades_past_the_default() {
    // accuracy is roughly stable for small H and falls apart once slices get
    // too thin to carry mixtures
    let reps = 24;
    let specs: Vec<SimulationSpec> = [3usize, 4, 5, 10]
        .iter()
        .map(|&h| {
            let mut spec = SimulationSpec::new(SimModel::Model1, 100, 5);
            spec.sigma = 0.1;
            spec.reps = reps;
            spec.seed = 31_415;
            spec.h = Some(h);
            spec.methods = vec![Method::Msir];
            spec
        })
        .collect();
    let result = msir::simbench::run_grid(&specs).unwrap();
    let mean_for = |h: usize| {
        let vals: Vec<f64> = result
            .rows
            .iter()
            .filter(|r| r.h == h && !r.angle_deg.is_nan())
            .map(|r| r.angle_deg)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let stable = [mean_for(3), mean_for(4), mean_for(5)];
    let thin = mean_for(10);
    let worst_stable = stable.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        thin > worst_stable,
        "H=10 mean angle {thin:.1} not worse than small-H means {stable:?}"
    );
}
