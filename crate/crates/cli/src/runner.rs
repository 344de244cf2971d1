//! Multi-seed experiment orchestration: build the stream, run the continual
//! update task by task, evaluate after each task, and emit every artifact as
//! deterministic CSV.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use nccl_core::diagnostics::{self, BoundsParams, StepRecord};
use nccl_core::memory::{MemoryScheme, ReplayMemory};
use nccl_core::metrics::{evaluate, AccuracyMatrix};
use nccl_core::nn::{HeadSelect, MlpSpec, ParamVector};
use nccl_core::optimizer::{run_continual, PolicyConfig, PolicyKind, RunOptions};
use nccl_core::rng::{derive_seed, stream_rng};
use nccl_core::tasks::{
    holdout_split, load_csv, load_idx, make_gaussian_blobs, make_permuted_tasks, make_split_tasks,
    shuffled, Example, TaskStream,
};

use crate::config::{DatasetCfg, RunConfig, TaskKind};
use crate::error::{CliError, Result};
use crate::output::{fmt_f, probes_csv, steps_csv, write_atomic};

/// Aggregate results of one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub avg_accuracy: f64,
    pub forgetting: Option<f64>,
    pub sum_gamma: f64,
    pub mean_abs_b: Option<f64>,
    pub total_ifo: u64,
    /// Smallest probed squared gradient norm on the first task, over all
    /// later-task training runs.
    pub min_probe_first_task: Option<f64>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outcomes: Vec<SeedOutcome>,
    pub failures: Vec<(u64, String)>,
}

impl RunSummary {
    pub fn mean_std(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    }
}

/// Resolve the output directory against `NCCL_OUT_ROOT` when relative.
pub fn resolve_out_dir(cfg_dir: &Path) -> PathBuf {
    if cfg_dir.is_absolute() {
        return cfg_dir.to_path_buf();
    }
    match std::env::var_os("NCCL_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(cfg_dir),
        None => cfg_dir.to_path_buf(),
    }
}

fn build_base_dataset(cfg: &RunConfig, seed: u64) -> Result<Vec<Example>> {
    match &cfg.dataset {
        DatasetCfg::Blobs {
            classes,
            dim,
            per_class,
            separation,
        } => Ok(make_gaussian_blobs(
            *classes,
            *dim,
            *per_class,
            *separation,
            derive_seed(seed, "data"),
        )?),
        DatasetCfg::Idx { images, labels } => Ok(load_idx(images, labels)?),
        DatasetCfg::Csv { path } => Ok(load_csv(path)?),
    }
}

fn build_stream(cfg: &RunConfig, base: &[Example], seed: u64) -> Result<TaskStream> {
    let task_seed = derive_seed(seed, "tasks");
    match cfg.task_kind {
        TaskKind::Permuted { count } => Ok(make_permuted_tasks(base, count, task_seed)?),
        TaskKind::Split { classes_per_task } => {
            Ok(make_split_tasks(base, classes_per_task, task_seed)?)
        }
    }
}

struct ModelLayout {
    spec: MlpSpec,
    head: HeadSelect,
    /// Split tasks in single-head mode fold the per-task labels back into
    /// global class indices.
    globalize_labels: Option<usize>,
}

fn model_layout(cfg: &RunConfig, base: &[Example], n_tasks: usize) -> Result<ModelLayout> {
    let input_dim = base
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| CliError::Runtime("empty dataset".into()))?;
    let n_classes = base.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let (out_dim, head, globalize) = match (cfg.task_kind, cfg.multi_head) {
        (TaskKind::Permuted { .. }, false) => (n_classes, HeadSelect::Single, None),
        (TaskKind::Permuted { .. }, true) => (
            n_classes * n_tasks,
            HeadSelect::PerTask {
                classes_per_task: n_classes,
            },
            None,
        ),
        (TaskKind::Split { classes_per_task }, true) => (
            classes_per_task * n_tasks,
            HeadSelect::PerTask { classes_per_task },
            None,
        ),
        (TaskKind::Split { classes_per_task }, false) => (
            classes_per_task * n_tasks,
            HeadSelect::Single,
            Some(classes_per_task),
        ),
    };
    let mut widths = Vec::with_capacity(cfg.hidden.len() + 2);
    widths.push(input_dim);
    widths.extend_from_slice(&cfg.hidden);
    widths.push(out_dim);
    Ok(ModelLayout {
        spec: MlpSpec::new(widths, cfg.activation)?,
        head,
        globalize_labels: globalize,
    })
}

fn globalize(examples: &mut [Example], classes_per_task: usize) {
    for e in examples.iter_mut() {
        e.label += e.task_id * classes_per_task;
    }
}

fn run_one_seed(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<SeedOutcome> {
    let seed_dir = out_dir.join(format!("seed_{seed}"));
    let base = build_base_dataset(cfg, seed)?;
    let stream = build_stream(cfg, &base, seed)?;
    let n_tasks = stream.n_tasks();
    let layout = model_layout(cfg, &base, n_tasks)?;

    // per-task holdout split
    let mut trains: Vec<Vec<Example>> = Vec::with_capacity(n_tasks);
    let mut tests: Vec<Vec<Example>> = Vec::with_capacity(n_tasks);
    for k in 0..n_tasks {
        let (mut train, mut test) =
            holdout_split(stream.task(k), cfg.test_fraction, derive_seed(seed, &format!("holdout/{k}")));
        if let Some(cpt) = layout.globalize_labels {
            globalize(&mut train, cpt);
            globalize(&mut test, cpt);
        }
        if train.is_empty() || test.is_empty() {
            return Err(CliError::Runtime(format!(
                "task {k} train/test split came out empty; adjust tasks.test_fraction"
            )));
        }
        trains.push(train);
        tests.push(test);
    }

    let mut init_rng = stream_rng(seed, "init");
    let mut params: ParamVector = layout.spec.init_params(&mut init_rng);

    let l_estimate = if cfg.estimate_l {
        let sample = &trains[0][..trains[0].len().min(256)];
        diagnostics::estimate_l(
            &params,
            &layout.spec,
            sample,
            layout.head,
            derive_seed(seed, "estimate-l"),
        )?
        .max(1e-6)
    } else {
        cfg.l_estimate
    };

    let mut memory = if cfg.policy.uses_memory() {
        Some(ReplayMemory::with_options(
            cfg.memory_scheme,
            cfg.memory_capacity,
            cfg.memory_per_class,
        )?)
    } else {
        None
    };

    let mut matrix = AccuracyMatrix::new();
    let mut sum_gamma = 0.0;
    let mut abs_b: Vec<f64> = Vec::new();
    let mut total_ifo = 0u64;
    let mut min_probe_first: Option<f64> = None;

    for k in 0..n_tasks {
        // pass order: one shuffle per epoch, concatenated
        let mut pass: Vec<Example> = Vec::with_capacity(trains[k].len() * cfg.epochs);
        for epoch in 0..cfg.epochs {
            pass.extend(shuffled(
                &trains[k],
                seed,
                &format!("pass/{k}/{epoch}"),
            ));
        }
        let steps_planned = pass.len().div_ceil(cfg.batch_stream);
        let alpha_eff = cfg.alpha_for_steps(steps_planned);
        if alpha_eff > 2.0 / l_estimate {
            return Err(CliError::Runtime(format!(
                "task {k}: alpha {alpha_eff} exceeds 2/L = {} (L = {l_estimate})",
                2.0 / l_estimate
            )));
        }
        let policy_cfg = PolicyConfig {
            policy: cfg.policy,
            base_alpha: alpha_eff,
            delta: cfg.delta,
            l_estimate,
            beta_max: cfg.beta_max,
        };
        let opts = RunOptions {
            batch_memory: cfg.batch_memory,
            batch_stream: cfg.batch_stream,
            probe_interval: cfg.probe_interval,
            bias_every_step_max_p: 5000,
            head: layout.head,
        };
        let previous_refs: Vec<&[Example]> =
            trains[..k].iter().map(|t| t.as_slice()).collect();
        let (next_params, records) = run_continual(
            &params,
            &layout.spec,
            &pass,
            &previous_refs,
            memory.as_mut(),
            &policy_cfg,
            &opts,
            derive_seed(seed, &format!("run/{k}")),
        )?;
        params = next_params;

        // the episodic ring absorbs the finished task (frozen during it)
        if let Some(mem) = memory.as_mut() {
            if mem.scheme() == MemoryScheme::Ring {
                for e in &pass {
                    mem.ring_offer(e);
                }
            }
        }

        sum_gamma += records.iter().map(|r| r.gamma).sum::<f64>();
        abs_b.extend(records.iter().filter_map(|r| r.b_est).map(f64::abs));
        total_ifo += records.last().map_or(0, |r| r.ifo_total);
        for r in &records {
            if let Some(p) = &r.probe {
                for tp in &p.per_task {
                    if tp.task_id == 0 {
                        min_probe_first = Some(match min_probe_first {
                            Some(v) => v.min(tp.grad_norm_sq),
                            None => tp.grad_norm_sq,
                        });
                    }
                }
            }
        }

        write_atomic(
            &seed_dir.join(format!("steps_task{k}.csv")),
            &steps_csv(&records),
        )?;
        if k > 0 {
            write_atomic(
                &seed_dir.join(format!("probes_task{k}.csv")),
                &probes_csv(&records, k),
            )?;
            if let Some((text, csv)) = task_ledger(&records, alpha_eff, l_estimate) {
                write_atomic(&seed_dir.join(format!("ledger_task{k}.txt")), &text)?;
                write_atomic(&seed_dir.join(format!("ledger_task{k}.csv")), &csv)?;
            }
        }

        let test_refs: Vec<&[Example]> = tests[..=k].iter().map(|t| t.as_slice()).collect();
        let row = evaluate(&params, &layout.spec, &test_refs, layout.head)?;
        matrix.push_row(row)?;
    }

    write_atomic(&seed_dir.join("accuracy.csv"), &matrix.to_csv())?;
    if let Some(mem) = &memory {
        write_atomic(&seed_dir.join("memory_final.csv"), &mem.snapshot_csv())?;
    }

    Ok(SeedOutcome {
        seed,
        avg_accuracy: matrix.average_accuracy()?,
        forgetting: matrix.forgetting().ok(),
        sum_gamma,
        mean_abs_b: if abs_b.is_empty() {
            None
        } else {
            Some(abs_b.iter().sum::<f64>() / abs_b.len() as f64)
        },
        total_ifo,
        min_probe_first_task: min_probe_first,
    })
}

/// Bound bookkeeping for one task run as (text report, one-row CSV);
/// `None` when the estimates cannot be formed (no probes, or the step size
/// sits on the 2/L boundary).
fn task_ledger(
    records: &[StepRecord],
    alpha_eff: f64,
    l_estimate: f64,
) -> Option<(String, String)> {
    let probes: Vec<_> = records.iter().filter_map(|r| r.probe.as_ref()).collect();
    if probes.is_empty() {
        return None;
    }
    let f_first = probes.first()?.f_full;
    let f_min = probes.iter().map(|p| p.f_full).fold(f64::INFINITY, f64::min);
    let sigma_max = probes.iter().map(|p| p.sigma_f_sq).fold(0.0, f64::max);
    let t = records.len();
    let c = alpha_eff * (t as f64).sqrt();
    let bp = BoundsParams::new((f_first - f_min).max(0.0), sigma_max, l_estimate, c, t).ok()?;
    let report = diagnostics::bound_ledger(records, &bp);
    let csv = format!(
        "n_steps,delta_f_est,sigma_f_sq_est,l,c,sum_gamma,term_gap,term_noise,rhs,observed_min_grad_norm_sq,violated\n{},{},{},{},{},{},{},{},{},{},{}\n",
        report.n_steps,
        fmt_f(bp.delta_f),
        fmt_f(bp.sigma_f_sq),
        fmt_f(bp.l),
        fmt_f(bp.c),
        fmt_f(report.sum_gamma),
        fmt_f(report.term_gap),
        fmt_f(report.term_noise),
        fmt_f(report.rhs),
        report
            .observed_min_grad_norm_sq
            .map(fmt_f)
            .unwrap_or_default(),
        report.violated,
    );
    Some((report.render(), csv))
}

/// One row per seed plus aggregate mean/std rows. A missing metric (e.g.
/// forgetting on a single-task stream) is written as `undefined`.
pub fn summary_csv(policy: PolicyKind, outcomes: &[SeedOutcome]) -> String {
    let mut out = String::from(
        "seed,policy,avg_accuracy,forgetting,sum_gamma,mean_abs_b,total_ifo,min_probe_first_task\n",
    );
    let fmt_maybe = |v: Option<f64>| v.map(fmt_f).unwrap_or_else(|| "undefined".into());
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            o.seed,
            policy.name(),
            fmt_f(o.avg_accuracy),
            fmt_maybe(o.forgetting),
            fmt_f(o.sum_gamma),
            fmt_maybe(o.mean_abs_b),
            o.total_ifo,
            fmt_maybe(o.min_probe_first_task),
        ));
    }
    let col = |f: &dyn Fn(&SeedOutcome) -> Option<f64>| -> Vec<f64> {
        outcomes.iter().filter_map(f).collect()
    };
    for (tag, pick) in [("mean", 0usize), ("std", 1usize)] {
        let stat = |vals: Vec<f64>| -> String {
            if vals.len() != outcomes.len() || vals.is_empty() {
                "undefined".into()
            } else {
                let (m, s) = RunSummary::mean_std(&vals);
                fmt_f(if pick == 0 { m } else { s })
            }
        };
        out.push_str(&format!(
            "{tag},{},{},{},{},{},{},{}\n",
            policy.name(),
            stat(col(&|o| Some(o.avg_accuracy))),
            stat(col(&|o| o.forgetting)),
            stat(col(&|o| Some(o.sum_gamma))),
            stat(col(&|o| o.mean_abs_b)),
            stat(col(&|o| Some(o.total_ifo as f64))),
            stat(col(&|o| o.min_probe_first_task)),
        ));
    }
    out
}

/// Run every seed (in parallel worker slots), write per-seed artifacts and
/// the cross-seed summary. Individual seed failures are logged and reported;
/// the run only fails when every seed fails.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(&cfg.out_dir);
    write_atomic(&out_dir.join("config.txt"), &cfg.render())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    let results: Vec<(u64, Result<SeedOutcome>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| (seed, run_one_seed(cfg, seed, &out_dir)))
            .collect()
    });

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if outcomes.is_empty() {
        return Err(CliError::Runtime(format!(
            "all {} seeds failed; first error: {}",
            cfg.seeds.len(),
            failures
                .first()
                .map(|(_, e)| e.as_str())
                .unwrap_or("unknown")
        )));
    }
    write_atomic(&out_dir.join("summary.csv"), &summary_csv(cfg.policy, &outcomes))?;
    Ok(RunSummary {
        out_dir,
        outcomes,
        failures,
    })
}

/// Run several policy configs over the same dataset and seeds and emit one
/// comparison row per policy.
pub fn compare_policies(cfgs: &[RunConfig], out_dir: &Path) -> Result<String> {
    if cfgs.is_empty() {
        return Err(CliError::Config("compare needs at least one config".into()));
    }
    for c in &cfgs[1..] {
        if !cfgs[0].shares_experiment_with(c) {
            return Err(CliError::Config(
                "compare requires configs sharing dataset, tasks, model, batches and seeds"
                    .into(),
            ));
        }
    }
    let mut table = String::from(
        "policy,n_seeds,avg_accuracy_mean,avg_accuracy_std,forgetting_mean,forgetting_std,\
         sum_gamma_mean,sum_gamma_std,mean_abs_b_mean\n",
    );
    for (i, cfg) in cfgs.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.out_dir = out_dir.join(format!("{i}_{}", cfg.policy.name()));
        let summary = run_experiment(&sub)?;
        let acc: Vec<f64> = summary.outcomes.iter().map(|o| o.avg_accuracy).collect();
        let fgt: Vec<f64> = summary.outcomes.iter().filter_map(|o| o.forgetting).collect();
        let gam: Vec<f64> = summary.outcomes.iter().map(|o| o.sum_gamma).collect();
        let babs: Vec<f64> = summary.outcomes.iter().filter_map(|o| o.mean_abs_b).collect();
        let (acc_m, acc_s) = RunSummary::mean_std(&acc);
        let (gam_m, gam_s) = RunSummary::mean_std(&gam);
        let fgt_stat = if fgt.len() == summary.outcomes.len() && !fgt.is_empty() {
            let (m, s) = RunSummary::mean_std(&fgt);
            (fmt_f(m), fmt_f(s))
        } else {
            ("undefined".into(), "undefined".into())
        };
        let b_mean = if babs.is_empty() {
            "undefined".into()
        } else {
            fmt_f(babs.iter().sum::<f64>() / babs.len() as f64)
        };
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            cfg.policy.name(),
            summary.outcomes.len(),
            fmt_f(acc_m),
            fmt_f(acc_s),
            fgt_stat.0,
            fgt_stat.1,
            fmt_f(gam_m),
            fmt_f(gam_s),
            b_mean,
        ));
    }
    write_atomic(&out_dir.join("comparison.csv"), &table)?;
    Ok(table)
}
