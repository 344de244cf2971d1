//! Flat key-value run configuration with dotted sections, file plus CLI
//! overrides. Unknown keys are rejected by name; every value error carries
//! its key path.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nccl_core::memory::MemoryScheme;
use nccl_core::nn::Activation;
use nccl_core::optimizer::PolicyKind;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetCfg {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Permuted { count: usize },
    Split { classes_per_task: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetCfg,
    pub task_kind: TaskKind,
    pub test_fraction: f64,
    pub multi_head: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub memory_scheme: MemoryScheme,
    pub memory_capacity: usize,
    pub memory_per_class: bool,
    pub policy: PolicyKind,
    /// Base step size; mutually exclusive with `c`.
    pub alpha: Option<f64>,
    /// Schedule constant: per task, `alpha = c / sqrt(T)`.
    pub c: Option<f64>,
    pub delta: f64,
    pub l_estimate: f64,
    pub estimate_l: bool,
    pub beta_max: Option<f64>,
    pub batch_stream: usize,
    pub batch_memory: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub probe_interval: usize,
    /// Parallel seed workers; 0 means available parallelism.
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetCfg::Blobs {
                classes: 4,
                dim: 8,
                per_class: 250,
                separation: 6.0,
            },
            task_kind: TaskKind::Permuted { count: 3 },
            test_fraction: 0.2,
            multi_head: false,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            memory_scheme: MemoryScheme::Reservoir,
            memory_capacity: 200,
            memory_per_class: false,
            policy: PolicyKind::Nccl,
            alpha: None,
            c: None,
            delta: 0.01,
            l_estimate: 1.0,
            estimate_l: false,
            beta_max: None,
            batch_stream: 10,
            batch_memory: 10,
            epochs: 1,
            seeds: vec![1, 2, 3, 4, 5],
            probe_interval: 10,
            workers: 0,
            out_dir: PathBuf::from("out/run"),
        }
    }
}

fn bad<T>(key: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(CliError::Config(format!("{key}: {msg}")))
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().or_else(|e| bad(key, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bad(key, format!("expected true/false, got {other:?}")),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().or_else(|e| bad(key, e)))
        .collect()
}

impl RunConfig {
    /// Apply one dotted `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.kind" => {
                self.dataset = match value.trim() {
                    "blobs" => DatasetCfg::Blobs {
                        classes: 4,
                        dim: 8,
                        per_class: 250,
                        separation: 6.0,
                    },
                    "idx" => DatasetCfg::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                    },
                    "csv" => DatasetCfg::Csv {
                        path: PathBuf::new(),
                    },
                    other => return bad(key, format!("expected blobs/idx/csv, got {other:?}")),
                };
            }
            "dataset.classes" => match &mut self.dataset {
                DatasetCfg::Blobs { classes, .. } => *classes = parse_num(key, value)?,
                _ => return bad(key, "only valid for dataset.kind = blobs"),
            },
            "dataset.dim" => match &mut self.dataset {
                DatasetCfg::Blobs { dim, .. } => *dim = parse_num(key, value)?,
                _ => return bad(key, "only valid for dataset.kind = blobs"),
            },
            "dataset.per_class" => match &mut self.dataset {
                DatasetCfg::Blobs { per_class, .. } => *per_class = parse_num(key, value)?,
                _ => return bad(key, "only valid for dataset.kind = blobs"),
            },
            "dataset.separation" => match &mut self.dataset {
                DatasetCfg::Blobs { separation, .. } => *separation = parse_num(key, value)?,
                _ => return bad(key, "only valid for dataset.kind = blobs"),
            },
            "dataset.images" => match &mut self.dataset {
                DatasetCfg::Idx { images, .. } => *images = PathBuf::from(value.trim()),
                _ => return bad(key, "only valid for dataset.kind = idx"),
            },
            "dataset.labels" => match &mut self.dataset {
                DatasetCfg::Idx { labels, .. } => *labels = PathBuf::from(value.trim()),
                _ => return bad(key, "only valid for dataset.kind = idx"),
            },
            "dataset.path" => match &mut self.dataset {
                DatasetCfg::Csv { path } => *path = PathBuf::from(value.trim()),
                _ => return bad(key, "only valid for dataset.kind = csv"),
            },
            "tasks.kind" => {
                self.task_kind = match value.trim() {
                    "permuted" => TaskKind::Permuted { count: 3 },
                    "split" => TaskKind::Split {
                        classes_per_task: 2,
                    },
                    other => return bad(key, format!("expected permuted/split, got {other:?}")),
                };
            }
            "tasks.count" => match &mut self.task_kind {
                TaskKind::Permuted { count } => *count = parse_num(key, value)?,
                _ => return bad(key, "only valid for tasks.kind = permuted"),
            },
            "tasks.classes_per_task" => match &mut self.task_kind {
                TaskKind::Split { classes_per_task } => *classes_per_task = parse_num(key, value)?,
                _ => return bad(key, "only valid for tasks.kind = split"),
            },
            "tasks.test_fraction" => self.test_fraction = parse_num(key, value)?,
            "tasks.head" => {
                self.multi_head = match value.trim() {
                    "single" => false,
                    "multi" => true,
                    other => return bad(key, format!("expected single/multi, got {other:?}")),
                };
            }
            "model.hidden" => self.hidden = parse_list(key, value)?,
            "model.activation" => {
                self.activation = match value.trim() {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    other => return bad(key, format!("expected relu/tanh, got {other:?}")),
                };
            }
            "memory.scheme" => {
                self.memory_scheme = match value.trim() {
                    "ring" => MemoryScheme::Ring,
                    "reservoir" => MemoryScheme::Reservoir,
                    other => return bad(key, format!("expected ring/reservoir, got {other:?}")),
                };
            }
            "memory.capacity" => self.memory_capacity = parse_num(key, value)?,
            "memory.per_class" => self.memory_per_class = parse_bool(key, value)?,
            "policy.name" => {
                self.policy = PolicyKind::from_str(value.trim())
                    .map_err(|e| CliError::Config(format!("{key}: {e}")))?;
            }
            "policy.alpha" => self.alpha = Some(parse_num(key, value)?),
            "policy.c" => self.c = Some(parse_num(key, value)?),
            "policy.delta" => self.delta = parse_num(key, value)?,
            "policy.l_estimate" => self.l_estimate = parse_num(key, value)?,
            "policy.estimate_l" => self.estimate_l = parse_bool(key, value)?,
            "policy.beta_max" => self.beta_max = Some(parse_num(key, value)?),
            "run.batch_stream" => self.batch_stream = parse_num(key, value)?,
            "run.batch_memory" => self.batch_memory = parse_num(key, value)?,
            "run.epochs" => self.epochs = parse_num(key, value)?,
            "run.seeds" => self.seeds = parse_list(key, value)?,
            "run.probe_interval" => self.probe_interval = parse_num(key, value)?,
            "run.workers" => self.workers = parse_num(key, value)?,
            "run.out_dir" => self.out_dir = PathBuf::from(value.trim()),
            unknown => {
                return Err(CliError::Config(format!("unknown key `{unknown}`")));
            }
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line = match line.find(" #") {
                Some(pos) => line[..pos].trim(),
                None => line,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", idx + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// The effective base step size for a task of `steps` iterations.
    pub fn alpha_for_steps(&self, steps: usize) -> f64 {
        match (self.alpha, self.c) {
            (Some(a), _) => a,
            (None, Some(c)) => c / (steps.max(1) as f64).sqrt(),
            (None, None) => 0.1,
        }
    }

    pub fn effective_alpha_fixed(&self) -> Option<f64> {
        match (self.alpha, self.c) {
            (Some(a), _) => Some(a),
            (None, None) => Some(0.1),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_stream == 0 || self.batch_memory == 0 {
            return bad("run.batch_stream", "batch sizes must be at least 1");
        }
        if self.epochs == 0 {
            return bad("run.epochs", "must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("run.seeds", "need at least one seed");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("tasks.test_fraction", "must lie strictly inside (0, 1)");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("policy.delta", "must lie strictly inside (0, 1)");
        }
        if self.l_estimate <= 0.0 {
            return bad("policy.l_estimate", "must be positive");
        }
        if self.alpha.is_some() && self.c.is_some() {
            return bad("policy.alpha", "set either policy.alpha or policy.c, not both");
        }
        if let Some(a) = self.effective_alpha_fixed() {
            if a <= 0.0 {
                return bad("policy.alpha", "must be positive");
            }
            if a > 2.0 / self.l_estimate {
                return bad(
                    "policy.alpha",
                    format!(
                        "{a} violates the step-size precondition 0 < alpha <= 2/L = {} \
                         (L estimate {})",
                        2.0 / self.l_estimate,
                        self.l_estimate
                    ),
                );
            }
        }
        if let Some(c) = self.c {
            if c <= 0.0 {
                return bad("policy.c", "must be positive");
            }
        }
        if self.policy.uses_memory() && self.memory_capacity == 0 {
            return bad("memory.capacity", "must be at least 1 for replay policies");
        }
        if self.policy == PolicyKind::NcclBetamax && self.beta_max.is_none() {
            return bad("policy.beta_max", "required for policy nccl_betamax");
        }
        if let Some(bm) = self.beta_max {
            if bm <= 0.0 {
                return bad("policy.beta_max", "must be positive");
            }
        }
        match self.task_kind {
            TaskKind::Permuted { count: 0 } => {
                return bad("tasks.count", "need at least one task")
            }
            TaskKind::Split {
                classes_per_task: 0,
            } => {
                return bad("tasks.classes_per_task", "must be at least 1")
            }
            _ => {}
        }
        if let DatasetCfg::Blobs {
            classes,
            dim,
            per_class,
            separation,
        } = &self.dataset
        {
            if *classes == 0 || *dim == 0 || *per_class == 0 {
                return bad("dataset.classes", "blob dimensions must be positive");
            }
            if *separation < 0.0 {
                return bad("dataset.separation", "must be nonnegative");
            }
        }
        Ok(())
    }

    /// Stable echo of every resolved key, for the run directory.
    pub fn render(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DatasetCfg::Blobs {
                classes,
                dim,
                per_class,
                separation,
            } => {
                s.push_str("dataset.kind = blobs\n");
                let _ = writeln!(s, "dataset.classes = {classes}");
                let _ = writeln!(s, "dataset.dim = {dim}");
                let _ = writeln!(s, "dataset.per_class = {per_class}");
                let _ = writeln!(s, "dataset.separation = {separation}");
            }
            DatasetCfg::Idx { images, labels } => {
                s.push_str("dataset.kind = idx\n");
                let _ = writeln!(s, "dataset.images = {}", images.display());
                let _ = writeln!(s, "dataset.labels = {}", labels.display());
            }
            DatasetCfg::Csv { path } => {
                s.push_str("dataset.kind = csv\n");
                let _ = writeln!(s, "dataset.path = {}", path.display());
            }
        }
        match self.task_kind {
            TaskKind::Permuted { count } => {
                s.push_str("tasks.kind = permuted\n");
                let _ = writeln!(s, "tasks.count = {count}");
            }
            TaskKind::Split { classes_per_task } => {
                s.push_str("tasks.kind = split\n");
                let _ = writeln!(s, "tasks.classes_per_task = {classes_per_task}");
            }
        }
        let _ = writeln!(s, "tasks.test_fraction = {}", self.test_fraction);
        let _ = writeln!(s, "tasks.head = {}", if self.multi_head { "multi" } else { "single" });
        let hidden: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "model.hidden = {}", hidden.join(","));
        let _ = writeln!(
            s,
            "model.activation = {}",
            match self.activation {
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
            }
        );
        let _ = writeln!(s, "memory.scheme = {}", self.memory_scheme.name());
        let _ = writeln!(s, "memory.capacity = {}", self.memory_capacity);
        let _ = writeln!(s, "memory.per_class = {}", self.memory_per_class);
        let _ = writeln!(s, "policy.name = {}", self.policy.name());
        if let Some(a) = self.alpha {
            let _ = writeln!(s, "policy.alpha = {a}");
        }
        if let Some(c) = self.c {
            let _ = writeln!(s, "policy.c = {c}");
        }
        if self.alpha.is_none() && self.c.is_none() {
            s.push_str("policy.alpha = 0.1\n");
        }
        let _ = writeln!(s, "policy.delta = {}", self.delta);
        let _ = writeln!(s, "policy.l_estimate = {}", self.l_estimate);
        let _ = writeln!(s, "policy.estimate_l = {}", self.estimate_l);
        if let Some(bm) = self.beta_max {
            let _ = writeln!(s, "policy.beta_max = {bm}");
        }
        let _ = writeln!(s, "run.batch_stream = {}", self.batch_stream);
        let _ = writeln!(s, "run.batch_memory = {}", self.batch_memory);
        let _ = writeln!(s, "run.epochs = {}", self.epochs);
        let seeds: Vec<String> = self.seeds.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "run.seeds = {}", seeds.join(","));
        let _ = writeln!(s, "run.probe_interval = {}", self.probe_interval);
        let _ = writeln!(s, "run.workers = {}", self.workers);
        let _ = writeln!(s, "run.out_dir = {}", self.out_dir.display());
        s
    }

    /// Two configs are comparable when everything but memory and policy
    /// settings agrees (same data, tasks, model, seeds, batching).
    pub fn shares_experiment_with(&self, other: &RunConfig) -> bool {
        self.dataset == other.dataset
            && self.task_kind == other.task_kind
            && self.test_fraction == other.test_fraction
            && self.multi_head == other.multi_head
            && self.hidden == other.hidden
            && self.activation == other.activation
            && self.batch_stream == other.batch_stream
            && self.batch_memory == other.batch_memory
            && self.epochs == other.epochs
            && self.seeds == other.seeds
            && self.probe_interval == other.probe_interval
    }
}
