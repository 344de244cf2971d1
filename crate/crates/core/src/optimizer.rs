//! The two-gradient continual update and its step-size policies.
//!
//! Each step takes a memory batch gradient and a stream batch gradient and
//! moves the parameters by `x - alpha * grad_f - beta * grad_g`. The policies
//! differ only in how they pick `(alpha, beta)` from the gradient pair:
//!
//! * `finetune`    - alpha = 0, beta fixed; no memory at all.
//! * `er_fixed`    - both rates fixed at the base step size.
//! * `agem`        - projection of the current-task gradient away from the
//!   memory gradient, realized as an adaptive alpha.
//! * `nccl`        - interference inflates alpha, transfer picks the
//!   forgetting-optimal beta clipped below `alpha * (1 - delta)`.
//! * `nccl_betamax` - as `nccl` with a fixed clipping bound `beta_max`
//!   instead of the sub-alpha constraint.

use std::fmt;
use std::str::FromStr;

use crate::diagnostics::{self, Probe, StepRecord, TaskProbe};
use crate::error::{Error, Result};
use crate::linalg;
use crate::memory::{Minibatch, ReplayMemory, StreamCursor};
use crate::nn::{self, HeadSelect, MlpSpec, ParamVector};
use crate::rng;
use crate::tasks::Example;

/// The two batch gradients of one step with their cached inner product
/// (the transfer/interference indicator) and squared norms.
#[derive(Debug, Clone)]
pub struct GradPair {
    grad_f: Vec<f64>,
    grad_g: Vec<f64>,
    lambda: f64,
    norm_f_sq: f64,
    norm_g_sq: f64,
}

impl GradPair {
    pub fn new(grad_f: Vec<f64>, grad_g: Vec<f64>) -> Result<Self> {
        if grad_f.len() != grad_g.len() {
            return Err(Error::ShapeMismatch {
                what: "GradPair",
                expected: grad_f.len(),
                got: grad_g.len(),
            });
        }
        let lambda = linalg::dot(&grad_f, &grad_g);
        let norm_f_sq = linalg::norm_sq(&grad_f);
        let norm_g_sq = linalg::norm_sq(&grad_g);
        Ok(GradPair {
            grad_f,
            grad_g,
            lambda,
            norm_f_sq,
            norm_g_sq,
        })
    }

    pub fn grad_f(&self) -> &[f64] {
        &self.grad_f
    }

    pub fn grad_g(&self) -> &[f64] {
        &self.grad_g
    }

    /// Inner product of the two gradients: positive means transfer,
    /// negative means interference.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn norm_f_sq(&self) -> f64 {
        self.norm_f_sq
    }

    pub fn norm_g_sq(&self) -> f64 {
        self.norm_g_sq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Finetune,
    ErFixed,
    Agem,
    Nccl,
    NcclBetamax,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Finetune => "finetune",
            PolicyKind::ErFixed => "er_fixed",
            PolicyKind::Agem => "agem",
            PolicyKind::Nccl => "nccl",
            PolicyKind::NcclBetamax => "nccl_betamax",
        }
    }

    pub fn uses_memory(&self) -> bool {
        !matches!(self, PolicyKind::Finetune)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(PolicyKind::Finetune),
            "er_fixed" => Ok(PolicyKind::ErFixed),
            "agem" => Ok(PolicyKind::Agem),
            "nccl" => Ok(PolicyKind::Nccl),
            "nccl_betamax" => Ok(PolicyKind::NcclBetamax),
            other => Err(Error::InvalidConfig(format!(
                "unknown policy {other:?}; expected finetune, er_fixed, agem, nccl or nccl_betamax"
            ))),
        }
    }
}

/// Step-size policy configuration.
#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    /// Base step size alpha (a c/sqrt(T) schedule is realized by the caller).
    pub base_alpha: f64,
    /// Margin keeping the transfer-case beta strictly below alpha.
    pub delta: f64,
    /// Smoothness constant estimate used by the adaptive rates.
    pub l_estimate: f64,
    /// Fixed transfer-case clipping bound for `nccl_betamax`.
    pub beta_max: Option<f64>,
}

impl PolicyConfig {
    pub fn new(policy: PolicyKind, base_alpha: f64) -> Self {
        PolicyConfig {
            policy,
            base_alpha,
            delta: 0.01,
            l_estimate: 1.0,
            beta_max: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l_estimate > 0.0 && self.l_estimate.is_finite()) {
            return Err(Error::InvalidConfig("L estimate must be positive".into()));
        }
        if !(self.base_alpha >= 0.0 && self.base_alpha.is_finite()) {
            return Err(Error::InvalidConfig("alpha must be nonnegative".into()));
        }
        if self.base_alpha > 2.0 / self.l_estimate {
            return Err(Error::InvalidConfig(format!(
                "alpha {} violates the step-size bound 0 < alpha <= 2/L = {} required for the \
                 per-step descent guarantee",
                self.base_alpha,
                2.0 / self.l_estimate
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig("delta must lie in (0, 1)".into()));
        }
        if let Some(bm) = self.beta_max {
            if !(bm > 0.0 && bm.is_finite()) {
                return Err(Error::InvalidConfig("beta_max must be positive".into()));
            }
        }
        if self.policy == PolicyKind::NcclBetamax && self.beta_max.is_none() {
            return Err(Error::InvalidConfig(
                "policy nccl_betamax requires beta_max".into(),
            ));
        }
        Ok(())
    }
}

/// The two step sizes chosen for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub alpha: f64,
    pub beta: f64,
    pub policy_tag: PolicyKind,
    /// Set when a zero-gradient degenerate case forced the fallback
    /// `(base_alpha, 0)` instead of the policy formula.
    pub degenerate: bool,
}

impl StepSizes {
    fn plain(alpha: f64, beta: f64, policy_tag: PolicyKind) -> Self {
        StepSizes {
            alpha,
            beta,
            policy_tag,
            degenerate: false,
        }
    }
}

/// Fine-tune: never replays, plain SGD on the current task.
pub fn policy_finetune(cfg: &PolicyConfig) -> StepSizes {
    StepSizes::plain(0.0, cfg.base_alpha, PolicyKind::Finetune)
}

/// Fixed-rate experience replay: both rates equal the base step size,
/// independent of the gradients.
pub fn policy_er_fixed(cfg: &PolicyConfig) -> StepSizes {
    StepSizes::plain(cfg.base_alpha, cfg.base_alpha, PolicyKind::ErFixed)
}

/// A-GEM as an adaptive step size. In the transfer case (`lambda >= 0`,
/// ties included so the projection never divides by zero) no memory step is
/// taken; in the interference case `alpha = -base * lambda / ||grad_f||^2`
/// so the combined update equals a single step along the projected
/// current-task gradient.
pub fn policy_agem(gp: &GradPair, cfg: &PolicyConfig) -> Result<StepSizes> {
    if gp.lambda() >= 0.0 {
        return Ok(StepSizes::plain(0.0, cfg.base_alpha, PolicyKind::Agem));
    }
    if gp.norm_f_sq() == 0.0 {
        return Err(Error::DegenerateGradient(
            "agem projection undefined for a zero memory gradient".into(),
        ));
    }
    let alpha = -cfg.base_alpha * gp.lambda() / gp.norm_f_sq();
    Ok(StepSizes::plain(alpha, cfg.base_alpha, PolicyKind::Agem))
}

/// The projected current-task gradient used by A-GEM in the interference
/// case: `grad_g - (lambda / ||grad_f||^2) grad_f`.
pub fn agem_surrogate(gp: &GradPair) -> Result<Vec<f64>> {
    if gp.norm_f_sq() == 0.0 {
        return Err(Error::DegenerateGradient(
            "projection undefined for a zero memory gradient".into(),
        ));
    }
    let scale = gp.lambda() / gp.norm_f_sq();
    Ok(gp
        .grad_g()
        .iter()
        .zip(gp.grad_f())
        .map(|(g, f)| g - scale * f)
        .collect())
}

fn nccl_rates(gp: &GradPair, cfg: &PolicyConfig, clip: f64, tag: PolicyKind) -> Result<StepSizes> {
    let alpha = cfg.base_alpha;
    let l = cfg.l_estimate;
    if gp.lambda() > 0.0 {
        if gp.norm_g_sq() == 0.0 {
            return Err(Error::DegenerateGradient(
                "transfer rate undefined for a zero current-task gradient".into(),
            ));
        }
        let beta_star = (1.0 - alpha * l) * gp.lambda() / (l * gp.norm_g_sq());
        let beta = clip.min(beta_star).max(0.0);
        Ok(StepSizes::plain(alpha, beta, tag))
    } else {
        if gp.norm_f_sq() == 0.0 {
            return Err(Error::DegenerateGradient(
                "interference rate undefined for a zero memory gradient".into(),
            ));
        }
        let alpha_t = alpha * (1.0 - gp.lambda() / gp.norm_f_sq());
        Ok(StepSizes::plain(alpha_t, alpha, tag))
    }
}

/// Adaptive rates: interference (`lambda <= 0`) inflates alpha and keeps
/// `beta = alpha`; transfer (`lambda > 0`) keeps alpha and picks the
/// forgetting-optimal beta clipped at `alpha * (1 - delta)`.
pub fn policy_nccl(gp: &GradPair, cfg: &PolicyConfig) -> Result<StepSizes> {
    let clip = cfg.base_alpha * (1.0 - cfg.delta);
    nccl_rates(gp, cfg, clip, PolicyKind::Nccl)
}

/// As [`policy_nccl`] but the transfer-case clip is the fixed bound
/// `beta_max`; the sub-alpha constraint is deliberately not enforced.
pub fn policy_nccl_betamax(gp: &GradPair, cfg: &PolicyConfig) -> Result<StepSizes> {
    let beta_max = cfg.beta_max.ok_or_else(|| {
        Error::InvalidConfig("policy nccl_betamax requires beta_max".into())
    })?;
    nccl_rates(gp, cfg, beta_max, PolicyKind::NcclBetamax)
}

/// Dispatch on the configured policy.
pub fn step_sizes(gp: &GradPair, cfg: &PolicyConfig) -> Result<StepSizes> {
    match cfg.policy {
        PolicyKind::Finetune => Ok(policy_finetune(cfg)),
        PolicyKind::ErFixed => Ok(policy_er_fixed(cfg)),
        PolicyKind::Agem => policy_agem(gp, cfg),
        PolicyKind::Nccl => policy_nccl(gp, cfg),
        PolicyKind::NcclBetamax => policy_nccl_betamax(gp, cfg),
    }
}

/// As [`step_sizes`] but degenerate zero-gradient cases fall back to
/// `(base_alpha, 0)` with the step flagged instead of erroring.
pub fn step_sizes_or_flagged(gp: &GradPair, cfg: &PolicyConfig) -> Result<StepSizes> {
    match step_sizes(gp, cfg) {
        Ok(s) => Ok(s),
        Err(Error::DegenerateGradient(_)) => Ok(StepSizes {
            alpha: cfg.base_alpha,
            beta: 0.0,
            policy_tag: cfg.policy,
            degenerate: true,
        }),
        Err(e) => Err(e),
    }
}

/// One update of the two-gradient rule:
/// `x - alpha * grad_f - beta * grad_g`. The input is untouched.
pub fn apply_update(x: &ParamVector, gp: &GradPair, s: &StepSizes) -> Result<ParamVector> {
    if gp.grad_f().len() != x.len() {
        return Err(Error::ShapeMismatch {
            what: "apply_update",
            expected: x.len(),
            got: gp.grad_f().len(),
        });
    }
    let values = x
        .values()
        .iter()
        .zip(gp.grad_f())
        .zip(gp.grad_g())
        .map(|((xv, fv), gv)| xv - s.alpha * fv - s.beta * gv)
        .collect();
    x.with_values(values)
}

/// Runtime knobs for a continual run over one current task.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub batch_memory: usize,
    pub batch_stream: usize,
    /// Probe the full previous-task gradient every this many steps
    /// (0 disables probing). The final step is always probed.
    pub probe_interval: usize,
    /// Estimate the memory-bias term every step whenever the previous set is
    /// at most this large; otherwise only at probe steps.
    pub bias_every_step_max_p: usize,
    pub head: HeadSelect,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            batch_memory: 10,
            batch_stream: 10,
            probe_interval: 10,
            bias_every_step_max_p: 5000,
            head: HeadSelect::Single,
        }
    }
}

/// Mean loss and gradient over several previous tasks, with per-task parts.
fn previous_full(
    x: &ParamVector,
    spec: &MlpSpec,
    previous_tasks: &[&[Example]],
    head: HeadSelect,
) -> Result<(f64, Vec<f64>, Vec<TaskProbe>)> {
    let total: usize = previous_tasks.iter().map(|t| t.len()).sum();
    let mut grad = vec![0.0; x.len()];
    let mut loss = 0.0;
    let mut per_task = Vec::with_capacity(previous_tasks.len());
    for task in previous_tasks {
        let lg = nn::loss_and_grad_head(x, spec, task, head)?;
        let w = task.len() as f64 / total as f64;
        for (acc, g) in grad.iter_mut().zip(&lg.grad) {
            *acc += w * g;
        }
        loss += w * lg.loss;
        per_task.push(TaskProbe {
            task_id: task.first().map(|e| e.task_id).unwrap_or(0),
            grad_norm_sq: linalg::norm_sq(&lg.grad),
            loss: lg.loss,
        });
    }
    Ok((loss, grad, per_task))
}

/// Run the continual update over one current task: sample a memory batch and
/// a stream batch, compute the policy rates, apply the update, and let the
/// reservoir absorb the stream. Returns the final parameters and one record
/// per step. A ring memory is left untouched during the run (the caller
/// offers the finished task afterwards); an empty memory falls back to plain
/// current-task SGD at the base rate.
#[allow(clippy::too_many_arguments)]
pub fn run_continual(
    params: &ParamVector,
    spec: &MlpSpec,
    current: &[Example],
    previous_tasks: &[&[Example]],
    mut memory: Option<&mut ReplayMemory>,
    cfg: &PolicyConfig,
    opts: &RunOptions,
    seed: u64,
) -> Result<(ParamVector, Vec<StepRecord>)> {
    cfg.validate()?;
    if opts.batch_stream == 0 || opts.batch_memory == 0 {
        return Err(Error::InvalidConfig("batch sizes must be positive".into()));
    }
    let mut x = params.clone();
    let mut records: Vec<StepRecord> = Vec::new();
    let mut cursor = StreamCursor::new(current);
    let mut batch_rng = rng::stream_rng(seed, "memory-batch");
    let mut reservoir_rng = rng::stream_rng(seed, "reservoir");
    let p_len: usize = previous_tasks.iter().map(|t| t.len()).sum();
    let bias_every_step = p_len > 0 && p_len <= opts.bias_every_step_max_p;
    let current_task_id = current.first().map(|e| e.task_id).unwrap_or(0);
    let mut ifo_total: u64 = 0;
    let mut t: usize = 0;

    while let Some(jt) = cursor.next_batch(opts.batch_stream) {
        let lg_g = nn::loss_and_grad_head(&x, spec, &jt.examples, opts.head)?;

        let it: Option<Minibatch> = if cfg.policy.uses_memory() {
            match memory.as_deref() {
                Some(mem) => match mem.sample_batch(opts.batch_memory, &mut batch_rng) {
                    Ok(b) => Some(b),
                    Err(Error::EmptyMemory) => None,
                    Err(e) => return Err(e),
                },
                None => None,
            }
        } else {
            None
        };
        ifo_total += jt.examples.len() as u64
            + it.as_ref().map_or(0, |b| b.examples.len() as u64);
        // composition of the memory the batch was drawn from, pre-absorption
        let mem_current_fraction = memory
            .as_deref()
            .filter(|_| cfg.policy.uses_memory())
            .map(|m| m.task_fraction(current_task_id));

        let (gp, sizes, loss_f_batch) = match &it {
            Some(batch) => {
                let lg_f = nn::loss_and_grad_head(&x, spec, &batch.examples, opts.head)?;
                let gp = GradPair::new(lg_f.grad, lg_g.grad.clone())?;
                let sizes = step_sizes_or_flagged(&gp, cfg)?;
                (gp, sizes, Some(lg_f.loss))
            }
            None => {
                // no replay available: plain SGD on the stream batch
                let gp = GradPair::new(vec![0.0; x.len()], lg_g.grad.clone())?;
                let sizes = StepSizes {
                    alpha: 0.0,
                    beta: cfg.base_alpha,
                    policy_tag: cfg.policy,
                    degenerate: false,
                };
                (gp, sizes, None)
            }
        };

        let gamma = diagnostics::compute_gamma(sizes.alpha, sizes.beta, cfg.l_estimate, &gp);

        let last_step = cursor.remaining() == 0;
        let probe_now = opts.probe_interval > 0
            && p_len > 0
            && (t.is_multiple_of(opts.probe_interval) || last_step);
        let need_full = p_len > 0 && (probe_now || (bias_every_step && it.is_some()));

        let mut b_est = None;
        let mut probe = None;
        if need_full {
            let (f_full, grad_full, per_task) =
                previous_full(&x, spec, previous_tasks, opts.head)?;
            if it.is_some() {
                let e_t = linalg::sub(gp.grad_f(), &grad_full);
                b_est = Some(diagnostics::compute_b(
                    sizes.alpha,
                    sizes.beta,
                    cfg.l_estimate,
                    &grad_full,
                    gp.grad_g(),
                    &e_t,
                ));
            }
            if probe_now {
                let flat: Vec<Example> = previous_tasks.concat();
                probe = Some(Probe {
                    f_full,
                    grad_f_full_norm_sq: linalg::norm_sq(&grad_full),
                    sigma_f_sq: diagnostics::sigma_f_sq_estimate_head(
                        &x, spec, &flat, opts.head,
                    )?,
                    per_task,
                });
            }
        }

        x = apply_update(&x, &gp, &sizes)?;

        if cfg.policy.uses_memory() {
            if let Some(mem) = memory.as_deref_mut() {
                if mem.scheme() == crate::memory::MemoryScheme::Reservoir {
                    for e in &jt.examples {
                        mem.reservoir_offer(e, &mut reservoir_rng);
                    }
                }
            }
        }

        records.push(StepRecord {
            t,
            alpha: sizes.alpha,
            beta: sizes.beta,
            lambda: gp.lambda(),
            gamma,
            b_est,
            grad_f_norm_sq: gp.norm_f_sq(),
            grad_g_norm_sq: gp.norm_g_sq(),
            loss_f_batch,
            loss_g_batch: lg_g.loss,
            ifo_total,
            replay: it.is_some(),
            degenerate: sizes.degenerate,
            mem_current_fraction,
            probe,
        });
        t += 1;
    }

    Ok((x, records))
}
