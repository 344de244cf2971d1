//! Per-step and aggregate theoretical diagnostics: the forgetting term, the
//! memory-bias term, their optima, the finite-population variance of the
//! memory error, and the convergence-bound ledger.

use crate::error::{Error, Result};
use crate::linalg;
use crate::memory::{MemoryScheme, ReplayMemory};
use crate::nn::{self, HeadSelect, MlpSpec, ParamVector};
use crate::optimizer::GradPair;
use crate::rng;
use crate::tasks::Example;

use rand::seq::SliceRandom;

/// Full-gradient probe of the previous set taken during a run.
#[derive(Debug, Clone)]
pub struct Probe {
    /// Mean loss over the whole previous set.
    pub f_full: f64,
    /// Squared norm of the full previous-set gradient.
    pub grad_f_full_norm_sq: f64,
    /// Per-example gradient variance around the full gradient, at this point.
    pub sigma_f_sq: f64,
    /// The same quantities restricted to each earlier task.
    pub per_task: Vec<TaskProbe>,
}

#[derive(Debug, Clone)]
pub struct TaskProbe {
    pub task_id: usize,
    pub grad_norm_sq: f64,
    pub loss: f64,
}

/// One iteration of a continual run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Inner product of the two batch gradients (0 when no replay happened).
    pub lambda: f64,
    /// Forgetting term of this step.
    pub gamma: f64,
    /// Memory-bias term, present only when full previous-set gradients are
    /// enabled and a memory batch was drawn.
    pub b_est: Option<f64>,
    pub grad_f_norm_sq: f64,
    pub grad_g_norm_sq: f64,
    pub loss_f_batch: Option<f64>,
    pub loss_g_batch: f64,
    /// Cumulative incremental-first-order-oracle count: the sum of batch
    /// sizes consumed by the algorithm up to and including this step.
    pub ifo_total: u64,
    /// Whether a memory batch was drawn this step.
    pub replay: bool,
    /// Whether a zero-gradient degenerate case forced the fallback rates.
    pub degenerate: bool,
    /// Fraction of memory slots holding current-task items (reservoir audit).
    pub mem_current_fraction: Option<f64>,
    pub probe: Option<Probe>,
}

/// Forgetting term from the stored scalars:
/// `(beta^2 L / 2) ||grad_g||^2 - beta (1 - alpha L) <grad_f, grad_g>`.
pub fn compute_gamma_scalars(
    alpha: f64,
    beta: f64,
    l: f64,
    lambda: f64,
    norm_g_sq: f64,
) -> f64 {
    0.5 * beta * beta * l * norm_g_sq - beta * (1.0 - alpha * l) * lambda
}

/// Forgetting term of one step.
pub fn compute_gamma(alpha: f64, beta: f64, l: f64, gp: &GradPair) -> f64 {
    compute_gamma_scalars(alpha, beta, l, gp.lambda(), gp.norm_g_sq())
}

/// Memory-bias term:
/// `(L alpha^2 - alpha) <grad_f_full, e> + beta <grad_g, e>` where `e` is the
/// memory-batch gradient error against the full previous-set gradient.
pub fn compute_b(
    alpha: f64,
    beta: f64,
    l: f64,
    grad_f_full: &[f64],
    grad_g: &[f64],
    e: &[f64],
) -> f64 {
    (l * alpha * alpha - alpha) * linalg::dot(grad_f_full, e) + beta * linalg::dot(grad_g, e)
}

/// Closed forms of the transfer-case optimum:
/// `beta* = (1 - alpha L) lambda / (L ||grad_g||^2)` with the companion
/// value `-(1 - alpha L) lambda / (2 L ||grad_g||^2)`. The companion value
/// differs from the quadratic's true minimum (see [`gamma_quadratic_min`])
/// by a factor of `(1 - alpha L) lambda`; reports expose both rather than
/// reconciling them.
pub fn optimal_beta_gamma(alpha: f64, l: f64, gp: &GradPair) -> Result<(f64, f64)> {
    if gp.norm_g_sq() == 0.0 {
        return Err(Error::DegenerateGradient(
            "optimal beta undefined for a zero current-task gradient".into(),
        ));
    }
    let beta_star = (1.0 - alpha * l) * gp.lambda() / (l * gp.norm_g_sq());
    let gamma_star = -(1.0 - alpha * l) * gp.lambda() / (2.0 * l * gp.norm_g_sq());
    Ok((beta_star, gamma_star))
}

/// True minimum value of `beta -> gamma(beta)`, i.e. the forgetting term
/// evaluated at `beta*`: `-(1 - alpha L)^2 lambda^2 / (2 L ||grad_g||^2)`.
pub fn gamma_quadratic_min(alpha: f64, l: f64, gp: &GradPair) -> Result<f64> {
    if gp.norm_g_sq() == 0.0 {
        return Err(Error::DegenerateGradient(
            "quadratic minimum undefined for a zero current-task gradient".into(),
        ));
    }
    let num = (1.0 - alpha * l) * gp.lambda();
    Ok(-num * num / (2.0 * l * gp.norm_g_sq()))
}

/// Exact mean gradient over a whole dataset.
pub fn full_gradient(params: &ParamVector, spec: &MlpSpec, p: &[Example]) -> Result<Vec<f64>> {
    full_gradient_head(params, spec, p, HeadSelect::Single)
}

pub fn full_gradient_head(
    params: &ParamVector,
    spec: &MlpSpec,
    p: &[Example],
    head: HeadSelect,
) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::EmptyBatch("full_gradient"));
    }
    Ok(nn::loss_and_grad_head(params, spec, p, head)?.grad)
}

/// Population variance of the per-example gradients around the full
/// gradient at the given point, summed over coordinates.
pub fn sigma_f_sq_estimate(params: &ParamVector, spec: &MlpSpec, p: &[Example]) -> Result<f64> {
    sigma_f_sq_estimate_head(params, spec, p, HeadSelect::Single)
}

pub fn sigma_f_sq_estimate_head(
    params: &ParamVector,
    spec: &MlpSpec,
    p: &[Example],
    head: HeadSelect,
) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyBatch("sigma_f_sq_estimate"));
    }
    let full = nn::loss_and_grad_head(params, spec, p, head)?.grad;
    let mut acc = 0.0;
    for e in p {
        let g = nn::loss_and_grad_head(params, spec, std::slice::from_ref(e), head)?.grad;
        acc += linalg::norm_sq(&linalg::sub(&g, &full));
    }
    Ok(acc / p.len() as f64)
}

/// Finite-population variance of the memory-mean gradient error when an
/// `m_p`-subset is drawn uniformly without replacement from `n_f` items:
/// `(n_f - m_p) / ((n_f - 1) m_p) * sigma_f_sq`.
pub fn memory_error_variance(n_f: usize, m_p: usize, sigma_f_sq: f64) -> Result<f64> {
    if n_f < 2 {
        return Err(Error::Usage("need at least two previous items".into()));
    }
    if m_p == 0 || m_p > n_f {
        return Err(Error::Usage(format!(
            "memory size {m_p} out of range 1..={n_f}"
        )));
    }
    Ok((n_f - m_p) as f64 / ((n_f - 1) as f64 * m_p as f64) * sigma_f_sq)
}

/// Inputs of the telescoped convergence bound. `delta_f` and `sigma_f_sq`
/// are pointwise estimates of quantities defined as suprema, so the reported
/// bound is approximate in that respect.
#[derive(Debug, Clone)]
pub struct BoundsParams {
    pub delta_f: f64,
    pub sigma_f_sq: f64,
    pub l: f64,
    pub c: f64,
    pub t: usize,
    /// `1 / (1 - L alpha / 2)` with `alpha = c / sqrt(T)`.
    pub a: f64,
}

impl BoundsParams {
    pub fn new(delta_f: f64, sigma_f_sq: f64, l: f64, c: f64, t: usize) -> Result<Self> {
        if t == 0 || c <= 0.0 || l <= 0.0 {
            return Err(Error::InvalidConfig(
                "bound needs positive c, L and step count".into(),
            ));
        }
        let alpha = c / (t as f64).sqrt();
        if alpha >= 2.0 / l {
            return Err(Error::InvalidConfig(format!(
                "alpha = c/sqrt(T) = {alpha} must stay below 2/L = {}",
                2.0 / l
            )));
        }
        Ok(BoundsParams {
            delta_f,
            sigma_f_sq,
            l,
            c,
            t,
            a: 1.0 / (1.0 - l * alpha / 2.0),
        })
    }
}

/// The two sides of the telescoped bound over one run.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// `(A / sqrt(T)) (delta_f + sum gamma) / c` part of the bound.
    pub term_gap: f64,
    /// `(A / sqrt(T)) (L c sigma_f^2 / 2)` part of the bound.
    pub term_noise: f64,
    /// Right-hand side: `term_gap + term_noise`.
    pub rhs: f64,
    pub sum_gamma: f64,
    pub n_steps: usize,
    /// Smallest probed full-gradient squared norm, when probes ran.
    pub observed_min_grad_norm_sq: Option<f64>,
    /// Whether the observed minimum exceeds the bound.
    pub violated: bool,
}

impl BoundReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "bound ledger over {} steps\n  sum of forgetting terms: {:.6e}\n  gap term:   {:.6e}\n  noise term: {:.6e}\n  rhs bound:  {:.6e}\n",
            self.n_steps, self.sum_gamma, self.term_gap, self.term_noise, self.rhs
        ));
        match self.observed_min_grad_norm_sq {
            Some(v) => s.push_str(&format!(
                "  observed min ||grad f||^2: {:.6e}\n  bound {}\n",
                v,
                if self.violated { "VIOLATED" } else { "holds" }
            )),
            None => s.push_str("  no full-gradient probes recorded\n"),
        }
        s.push_str("  note: delta_f and sigma_f^2 are pointwise estimates of supremum quantities\n");
        s
    }
}

/// Compute both sides of the telescoped bound from a run's records:
/// the right-hand side `(A/sqrt(T)) ((delta_f + sum gamma)/c + L c sigma^2/2)`
/// against the smallest probed full-gradient squared norm.
pub fn bound_ledger(records: &[StepRecord], bp: &BoundsParams) -> BoundReport {
    let sum_gamma: f64 = records.iter().map(|r| r.gamma).sum();
    let scale = bp.a / (bp.t as f64).sqrt();
    let term_gap = scale * (bp.delta_f + sum_gamma) / bp.c;
    let term_noise = scale * bp.l * bp.c * bp.sigma_f_sq / 2.0;
    let rhs = term_gap + term_noise;
    let observed_min = records
        .iter()
        .filter_map(|r| r.probe.as_ref().map(|p| p.grad_f_full_norm_sq))
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        });
    BoundReport {
        term_gap,
        term_noise,
        rhs,
        sum_gamma,
        n_steps: records.len(),
        observed_min_grad_norm_sq: observed_min,
        violated: observed_min.is_some_and(|v| v > rhs),
    }
}

/// Sample mean and standard error of the memory-bias term over independently
/// resampled memories.
#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub mean_b: f64,
    pub stderr: f64,
    pub n_trials: usize,
}

impl UnbiasednessReport {
    /// Whether the mean is within `k` standard errors of zero.
    pub fn within(&self, k: f64) -> bool {
        self.mean_b.abs() <= k * self.stderr
    }
}

/// Coefficients entering the memory-bias term during a trial.
#[derive(Debug, Clone, Copy)]
pub struct BiasCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub l: f64,
}

/// Resample the memory `n_trials` times at a fixed point and measure the
/// memory-bias term each time. Ring trials re-shuffle the previous set (its
/// stream order is random per episode) and take the FIFO tail; reservoir
/// trials keep the offer order fixed and let the replacement randomness vary.
#[allow(clippy::too_many_arguments)]
pub fn b_unbiasedness_trial(
    x: &ParamVector,
    spec: &MlpSpec,
    p: &[Example],
    m: usize,
    scheme: MemoryScheme,
    n_trials: usize,
    batch_size: usize,
    coeffs: BiasCoeffs,
    grad_g: &[f64],
    seed: u64,
) -> Result<UnbiasednessReport> {
    if p.is_empty() {
        return Err(Error::EmptyBatch("b_unbiasedness_trial"));
    }
    if n_trials < 2 {
        return Err(Error::Usage("need at least two trials".into()));
    }
    let grad_full = full_gradient(x, spec, p)?;
    let mut values = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let mut r = rng::stream_rng(seed, &format!("bias-trial/{trial}"));
        let mut mem = ReplayMemory::new(scheme, m)?;
        match scheme {
            MemoryScheme::Ring => {
                let mut order: Vec<usize> = (0..p.len()).collect();
                order.shuffle(&mut r);
                for i in order {
                    mem.ring_offer(&p[i]);
                }
            }
            MemoryScheme::Reservoir => {
                for e in p {
                    mem.reservoir_offer(e, &mut r);
                }
            }
        }
        let batch = mem.sample_batch(batch_size, &mut r)?;
        let grad_i = nn::loss_and_grad(x, spec, &batch.examples)?.grad;
        let e_t = linalg::sub(&grad_i, &grad_full);
        values.push(compute_b(
            coeffs.alpha,
            coeffs.beta,
            coeffs.l,
            &grad_full,
            grad_g,
            &e_t,
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(UnbiasednessReport {
        mean_b: mean,
        stderr: (var / n).sqrt(),
        n_trials,
    })
}

/// Crude smoothness-constant estimate: the largest gradient-difference ratio
/// over random probe directions around the given point.
pub fn estimate_l(
    params: &ParamVector,
    spec: &MlpSpec,
    sample: &[Example],
    head: HeadSelect,
    seed: u64,
) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptyBatch("estimate_l"));
    }
    let mut r = rng::stream_rng(seed, "estimate-l");
    let g0 = nn::loss_and_grad_head(params, spec, sample, head)?.grad;
    let mut best: f64 = 0.0;
    for probe in 0..64 {
        let radius = if probe % 2 == 0 { 0.01 } else { 0.1 };
        let dir: Vec<f64> = (0..params.len()).map(|_| rng::gauss(&mut r)).collect();
        let scale = radius / linalg::norm(&dir);
        let moved: Vec<f64> = params
            .values()
            .iter()
            .zip(&dir)
            .map(|(v, d)| v + scale * d)
            .collect();
        let p2 = params.with_values(moved)?;
        let g1 = nn::loss_and_grad_head(&p2, spec, sample, head)?.grad;
        let ratio = linalg::norm(&linalg::sub(&g1, &g0)) / radius;
        best = best.max(ratio);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(f: Vec<f64>, g: Vec<f64>) -> GradPair {
        GradPair::new(f, g).unwrap()
    }

    #[test]
    fn gamma_hand_values() {
        // beta = 0 kills both terms
        assert_eq!(compute_gamma_scalars(0.3, 0.0, 2.0, 5.0, 7.0), 0.0);
        // alpha = 1/L zeroes the cross term: L=2, beta=0.1, ||g||^2=4
        let g = compute_gamma_scalars(0.5, 0.1, 2.0, 123.0, 4.0);
        assert!((g - 0.04).abs() < 1e-15);
        // transfer can push gamma negative: L=1, alpha=0.5, beta=0.2, lambda=1
        let g = compute_gamma_scalars(0.5, 0.2, 1.0, 1.0, 1.0);
        assert!((g - (-0.08)).abs() < 1e-15);
    }

    #[test]
    fn gamma_from_pair_matches_scalars() {
        let gp = pair(vec![1.0, 2.0], vec![-0.5, 0.25]);
        let a = compute_gamma(0.1, 0.05, 1.5, &gp);
        let b = compute_gamma_scalars(0.1, 0.05, 1.5, gp.lambda(), gp.norm_g_sq());
        assert_eq!(a, b);
    }

    #[test]
    fn b_hand_values() {
        // e = 0 -> B = 0
        assert_eq!(
            compute_b(0.2, 0.3, 1.0, &[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0]),
            0.0
        );
        // alpha = 0: B = beta <g, e>
        let b = compute_b(0.0, 0.1, 1.0, &[9.0, 9.0], &[1.0, 0.0], &[2.0, 0.0]);
        assert!((b - 0.2).abs() < 1e-15);
        // alpha = 1/L zeroes the first coefficient
        let b1 = compute_b(0.5, 0.1, 2.0, &[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]);
        let b2 = compute_b(0.5, 0.1, 2.0, &[7.0, -3.0], &[1.0, 0.0], &[1.0, 1.0]);
        assert!((b1 - b2).abs() < 1e-15);
    }

    #[test]
    fn optimal_beta_gamma_hand_values() {
        // alpha=0.5, L=1, lambda=1, ||g||^2=1
        let gp = pair(vec![1.0, 0.0], vec![1.0, 0.0]);
        let (beta_star, gamma_star) = optimal_beta_gamma(0.5, 1.0, &gp).unwrap();
        assert!((beta_star - 0.5).abs() < 1e-15);
        assert!((gamma_star - (-0.25)).abs() < 1e-15);
        // the companion closed-form value differs from the true minimum
        let qmin = gamma_quadratic_min(0.5, 1.0, &gp).unwrap();
        assert!((qmin - (-0.125)).abs() < 1e-15);
        assert!(
            (compute_gamma(0.5, beta_star, 1.0, &gp) - qmin).abs() < 1e-15,
            "gamma at beta* is the quadratic minimum"
        );
    }

    #[test]
    fn optimal_beta_gamma_zero_transfer() {
        let gp = pair(vec![1.0, 0.0], vec![0.0, 1.0]);
        let (beta_star, gamma_star) = optimal_beta_gamma(0.1, 1.0, &gp).unwrap();
        assert_eq!(beta_star, 0.0);
        assert_eq!(gamma_star, 0.0);
    }

    #[test]
    fn memory_variance_closed_form() {
        assert_eq!(memory_error_variance(10, 10, 3.0).unwrap(), 0.0);
        let v = memory_error_variance(10, 1, 3.0).unwrap();
        assert!((v - 3.0).abs() < 1e-15); // (9/9) * sigma^2
        assert!(memory_error_variance(1, 1, 1.0).is_err());
        assert!(memory_error_variance(10, 0, 1.0).is_err());
        assert!(memory_error_variance(10, 11, 1.0).is_err());
    }

    #[test]
    fn ledger_empty_run_reduces_to_constant_terms() {
        let bp = BoundsParams::new(2.0, 0.5, 1.0, 1.0, 100).unwrap();
        let report = bound_ledger(&[], &bp);
        let scale = bp.a / 10.0;
        assert!((report.rhs - scale * (2.0 / 1.0 + 0.5 / 2.0)).abs() < 1e-12);
        assert!(report.observed_min_grad_norm_sq.is_none());
        assert!(!report.violated);
    }

    #[test]
    fn ledger_c_scaling() {
        let mut bp = BoundsParams::new(2.0, 0.5, 1.0, 1.0, 400).unwrap();
        let r1 = bound_ledger(&[], &bp);
        // doubling c with A held fixed halves the gap term, doubles the noise term
        bp.c = 2.0;
        let r2 = bound_ledger(&[], &bp);
        assert!((r2.term_gap - r1.term_gap / 2.0).abs() < 1e-12);
        assert!((r2.term_noise - r1.term_noise * 2.0).abs() < 1e-12);
    }

    #[test]
    fn bounds_params_rejects_oversized_alpha() {
        // c/sqrt(T) = 2.5 > 2/L = 2
        assert!(BoundsParams::new(1.0, 1.0, 1.0, 25.0, 100).is_err());
    }
}
