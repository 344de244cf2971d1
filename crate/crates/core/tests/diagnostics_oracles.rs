//! Independent oracles for the diagnostic quantities: brute-force grid
//! search for the transfer-case optimum, exhaustive subset enumeration for
//! the finite-population memory-error variance, a tractable quadratic
//! objective for the bound ledger, and statistical unbiasedness trials.

use nccl_core::diagnostics::{
    b_unbiasedness_trial, compute_gamma, compute_gamma_scalars, full_gradient,
    gamma_quadratic_min, memory_error_variance, optimal_beta_gamma, sigma_f_sq_estimate,
    bound_ledger, BiasCoeffs, BoundsParams, Probe, StepRecord,
};
use nccl_core::linalg;
use nccl_core::memory::MemoryScheme;
use nccl_core::nn::{loss_and_grad, Activation, MlpSpec};
use nccl_core::optimizer::GradPair;
use nccl_core::rng::{gauss, stream_rng};
use nccl_core::tasks::{make_gaussian_blobs, Example};

use rand::Rng;

fn random_transfer_pair(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> GradPair {
    let f: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
    let mut g: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
    let lambda: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
    if lambda <= 0.0 {
        for v in &mut g {
            *v = -*v;
        }
    }
    GradPair::new(f, g).unwrap()
}

#[test]
fn beta_star_matches_grid_search_smoke() {
    // the full 1000-pair sweep at step 1e-5 runs in the acceptance suite;
    // this is a faster sanity pass over 100 pairs
    let mut rng = stream_rng(606, "grid");
    let mut checked = 0;
    while checked < 100 {
        let gp = random_transfer_pair(&mut rng, 6);
        let alpha = rng.gen_range(0.01..0.2);
        let l = rng.gen_range(0.5..1.5);
        if alpha * l >= 1.0 {
            continue;
        }
        let (beta_star, _) = optimal_beta_gamma(alpha, l, &gp).unwrap();
        if beta_star >= 2.0 * alpha || beta_star <= 0.0 {
            continue;
        }
        checked += 1;
        let step = 1e-5;
        let n = (2.0 * alpha / step) as usize;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=n {
            let beta = k as f64 * step;
            let g = compute_gamma(alpha, beta, l, &gp);
            if g < best.0 {
                best = (g, beta);
            }
        }
        assert!(
            (best.1 - beta_star).abs() < 2e-5,
            "grid minimizer {} vs closed form {beta_star}",
            best.1
        );
        let gamma_at_star = compute_gamma(alpha, beta_star, l, &gp);
        assert!((best.0 - gamma_at_star).abs() < 1e-9);
        // the companion closed-form value differs from the grid minimum by a
        // factor of (1 - alpha L) lambda; both are reported, never asserted
        // equal
        let qmin = gamma_quadratic_min(alpha, l, &gp).unwrap();
        assert!((gamma_at_star - qmin).abs() < 1e-12);
    }
}

#[test]
fn finite_population_variance_matches_exhaustive_enumeration() {
    // n_f = 10, m_p = 3: enumerate all 120 memories of a fixed dataset at a
    // fixed point and compare the empirical variance of the memory-mean
    // gradient error with the closed form
    let p = make_gaussian_blobs(2, 3, 5, 2.5, 77).unwrap();
    assert_eq!(p.len(), 10);
    let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh).unwrap();
    let mut init_rng = stream_rng(8, "init");
    let x = spec.init_params(&mut init_rng);

    let grads: Vec<Vec<f64>> = p
        .iter()
        .map(|e| loss_and_grad(&x, &spec, std::slice::from_ref(e)).unwrap().grad)
        .collect();
    let d = grads[0].len();
    let full: Vec<f64> = (0..d)
        .map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / 10.0)
        .collect();

    let mut acc = 0.0;
    let mut count = 0usize;
    for a in 0..10 {
        for b in (a + 1)..10 {
            for c in (b + 1)..10 {
                let mean: Vec<f64> = (0..d)
                    .map(|j| (grads[a][j] + grads[b][j] + grads[c][j]) / 3.0)
                    .collect();
                acc += linalg::norm_sq(&linalg::sub(&mean, &full));
                count += 1;
            }
        }
    }
    assert_eq!(count, 120);
    let empirical = acc / 120.0;

    let sigma_sq = sigma_f_sq_estimate(&x, &spec, &p).unwrap();
    let closed = memory_error_variance(10, 3, sigma_sq).unwrap();
    assert!(
        (empirical - closed).abs() < 1e-9,
        "enumerated {empirical} vs closed form {closed}"
    );
}

#[test]
fn sigma_estimate_examples() {
    let spec = MlpSpec::new(vec![2, 4, 2], Activation::Relu).unwrap();
    let mut init_rng = stream_rng(3, "init");
    let x = spec.init_params(&mut init_rng);
    // identical examples have zero gradient variance
    let e = Example::new(vec![0.5, -0.5], 1, 0);
    let same = vec![e.clone(), e.clone(), e.clone()];
    assert!(sigma_f_sq_estimate(&x, &spec, &same).unwrap() < 1e-30);

    // two distinct examples: deviations are +-(g1 - g2)/2, so the variance
    // is ||g1 - g2||^2 / 4 (the centered two-point case)
    let e2 = Example::new(vec![-1.0, 0.25], 0, 0);
    let two = vec![e.clone(), e2.clone()];
    let g1 = loss_and_grad(&x, &spec, std::slice::from_ref(&e)).unwrap().grad;
    let g2 = loss_and_grad(&x, &spec, std::slice::from_ref(&e2)).unwrap().grad;
    let want = linalg::norm_sq(&linalg::sub(&g1, &g2)) / 4.0;
    let got = sigma_f_sq_estimate(&x, &spec, &two).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!(got >= 0.0);
}

#[test]
fn full_gradient_mean_invariance() {
    let spec = MlpSpec::new(vec![3, 5, 3], Activation::Relu).unwrap();
    let mut init_rng = stream_rng(4, "init");
    let x = spec.init_params(&mut init_rng);
    let p = make_gaussian_blobs(3, 3, 4, 2.0, 5).unwrap();

    // single example equals the per-example gradient
    let single = full_gradient(&x, &spec, &p[..1]).unwrap();
    let direct = loss_and_grad(&x, &spec, &p[..1]).unwrap().grad;
    assert_eq!(single, direct);

    // duplicating the dataset leaves the mean gradient unchanged
    let doubled: Vec<Example> = p.iter().chain(p.iter()).cloned().collect();
    let a = full_gradient(&x, &spec, &p).unwrap();
    let b = full_gradient(&x, &spec, &doubled).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }

    // the mean of per-example gradients matches
    let mut mean = vec![0.0; x.len()];
    for e in &p {
        let g = loss_and_grad(&x, &spec, std::slice::from_ref(e)).unwrap().grad;
        for (m, gv) in mean.iter_mut().zip(&g) {
            *m += gv / p.len() as f64;
        }
    }
    for (u, v) in a.iter().zip(&mean) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn gamma_sign_structure() {
    let mut rng = stream_rng(909, "signs");
    let mut seen_interference = 0;
    while seen_interference < 300 {
        let d = 6;
        let f: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let g: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let gp = GradPair::new(f, g).unwrap();
        if gp.lambda() > 0.0 {
            continue;
        }
        seen_interference += 1;
        let alpha: f64 = rng.gen_range(0.05..1.0);
        let l: f64 = rng.gen_range(0.1..(1.0 / alpha).min(10.0));
        assert!(alpha * l <= 1.0);
        let beta: f64 = rng.gen_range(0.0..0.5);
        assert!(compute_gamma(alpha, beta, l, &gp) >= 0.0);
    }
    // negative forgetting needs positive transfer
    let witness = compute_gamma_scalars(0.5, 0.2, 1.0, 1.0, 1.0);
    assert!(witness < 0.0);
}

#[test]
fn agem_projection_reduces_gamma() {
    // the forgetting term evaluated on the projected surrogate never exceeds
    // the raw one, strictly smaller under interference
    let mut rng = stream_rng(4242, "reduction");
    let beta = 0.1;
    let l = 1.0;
    let mut checked = 0;
    while checked < 1000 {
        let d = 8;
        let f: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let g: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let gp = GradPair::new(f.clone(), g).unwrap();
        if gp.lambda() > 0.0 {
            continue;
        }
        checked += 1;
        let surrogate = nccl_core::optimizer::agem_surrogate(&gp).unwrap();
        let gp_proj = GradPair::new(f, surrogate).unwrap();
        let gamma_raw = compute_gamma(0.0, beta, l, &gp);
        let gamma_proj = compute_gamma(0.0, beta, l, &gp_proj);
        assert!(gamma_proj <= gamma_raw + 1e-12);
        if gp.lambda() < -1e-9 {
            assert!(gamma_proj < gamma_raw);
        }
    }
}

/// Finite-sum quadratic: `f_i(x) = 0.5 ||x - a_i||^2`, smoothness constant 1,
/// full gradient `x - mean(a)`, gradient variance independent of `x`.
struct Quadratic {
    anchors: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl Quadratic {
    fn new(n: usize, d: usize, seed: u64) -> Self {
        let mut r = stream_rng(seed, "anchors");
        let anchors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| gauss(&mut r)).collect())
            .collect();
        let mean = (0..d)
            .map(|j| anchors.iter().map(|a| a[j]).sum::<f64>() / n as f64)
            .collect();
        Quadratic { anchors, mean }
    }

    fn sigma_sq(&self) -> f64 {
        self.anchors
            .iter()
            .map(|a| linalg::norm_sq(&linalg::sub(a, &self.mean)))
            .sum::<f64>()
            / self.anchors.len() as f64
    }

    fn full_grad(&self, x: &[f64]) -> Vec<f64> {
        linalg::sub(x, &self.mean)
    }
}

#[test]
fn bound_ledger_holds_on_pure_sgd_quadratic() {
    // 20 seeded pure-f SGD runs with known constants: the smallest observed
    // full-gradient norm can never exceed the computed bound
    let (n, d, t_steps, batch, c) = (40usize, 5usize, 200usize, 10usize, 1.0f64);
    let quad = Quadratic::new(n, d, 13);
    let sigma_sq = quad.sigma_sq();
    let alpha = c / (t_steps as f64).sqrt();

    for seed in 0..20u64 {
        let mut r = stream_rng(seed, "sgd");
        let mut x: Vec<f64> = vec![1.0; d];
        let x0 = x.clone();
        let delta_f = 0.5 * linalg::norm_sq(&linalg::sub(&x0, &quad.mean));
        let mut records: Vec<StepRecord> = Vec::new();
        for t in 0..t_steps {
            let full = quad.full_grad(&x);
            records.push(StepRecord {
                t,
                alpha,
                beta: 0.0,
                lambda: 0.0,
                gamma: 0.0,
                b_est: None,
                grad_f_norm_sq: 0.0,
                grad_g_norm_sq: 0.0,
                loss_f_batch: None,
                loss_g_batch: 0.0,
                ifo_total: ((t + 1) * batch) as u64,
                replay: true,
                degenerate: false,
                mem_current_fraction: None,
                probe: Some(Probe {
                    f_full: 0.0,
                    grad_f_full_norm_sq: linalg::norm_sq(&full),
                    sigma_f_sq: sigma_sq,
                    per_task: Vec::new(),
                }),
            });
            // batch gradient: x - mean of a uniformly drawn batch
            let mut gsum = vec![0.0; d];
            for _ in 0..batch {
                let a = &quad.anchors[r.gen_range(0..n)];
                for (s, (xv, av)) in gsum.iter_mut().zip(x.iter().zip(a)) {
                    *s += xv - av;
                }
            }
            for (xv, s) in x.iter_mut().zip(&gsum) {
                *xv -= alpha * s / batch as f64;
            }
        }
        let bp = BoundsParams::new(delta_f, sigma_sq, 1.0, c, t_steps).unwrap();
        let report = bound_ledger(&records, &bp);
        assert!(
            !report.violated,
            "seed {seed}: observed {:?} above bound {}",
            report.observed_min_grad_norm_sq, report.rhs
        );
    }
}

#[test]
fn unbiasedness_trials_on_desk_dataset() {
    let p = make_gaussian_blobs(3, 4, 20, 3.0, 55).unwrap(); // 60 items
    let spec = MlpSpec::new(vec![4, 6, 3], Activation::Relu).unwrap();
    let mut init_rng = stream_rng(71, "init");
    let x = spec.init_params(&mut init_rng);
    let mut g_rng = stream_rng(72, "gradg");
    let grad_g: Vec<f64> = (0..x.len()).map(|_| gauss(&mut g_rng)).collect();
    let coeffs = BiasCoeffs {
        alpha: 0.1,
        beta: 0.1,
        l: 1.0,
    };

    for scheme in [MemoryScheme::Ring, MemoryScheme::Reservoir] {
        let report =
            b_unbiasedness_trial(&x, &spec, &p, 10, scheme, 300, 5, coeffs, &grad_g, 2001)
                .unwrap();
        assert!(
            report.within(4.0),
            "{scheme:?}: mean {} stderr {}",
            report.mean_b,
            report.stderr
        );
    }
}

#[test]
fn unbiasedness_with_full_coverage_memory_is_exact() {
    // memory spanning all of P with an exhaustive batch leaves no
    // estimation error beyond float summation order
    let p = make_gaussian_blobs(2, 3, 8, 2.0, 4).unwrap(); // 16 items
    let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
    let mut init_rng = stream_rng(9, "init");
    let x = spec.init_params(&mut init_rng);
    let grad_g = vec![1.0; x.len()];
    let coeffs = BiasCoeffs {
        alpha: 0.2,
        beta: 0.1,
        l: 1.0,
    };
    let report = b_unbiasedness_trial(
        &x,
        &spec,
        &p,
        p.len(),
        MemoryScheme::Ring,
        50,
        p.len(),
        coeffs,
        &grad_g,
        31,
    )
    .unwrap();
    assert!(report.mean_b.abs() < 1e-12, "mean {}", report.mean_b);
}
