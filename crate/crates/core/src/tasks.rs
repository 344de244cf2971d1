//! Non-stationary task streams: dataset ingestion, permuted-feature and
//! split-class task construction, and the previous/current partition at an
//! observation point.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// One labelled data point in the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize, task_id: usize) -> Self {
        Example {
            features,
            label,
            task_id,
        }
    }
}

/// An ordered sequence of task datasets. `observation_task` marks the task
/// boundary currently treated as the observation point: tasks before it form
/// the previous set, tasks from it on form the current set.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Vec<Example>>,
    observation_task: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<Vec<Example>>) -> Result<Self> {
        if tasks.is_empty() || tasks.iter().any(|t| t.is_empty()) {
            return Err(Error::Usage("every task in a stream must be nonempty".into()));
        }
        let observation_task = if tasks.len() > 1 { 1 } else { 0 };
        Ok(TaskStream {
            tasks,
            observation_task,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, k: usize) -> &[Example] {
        &self.tasks[k]
    }

    pub fn tasks(&self) -> &[Vec<Example>] {
        &self.tasks
    }

    pub fn observation_task(&self) -> usize {
        self.observation_task
    }

    /// Total number of examples across tasks.
    pub fn total_len(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    /// Split the stream at a task boundary into the previous set (all tasks
    /// before the boundary) and the current set (the rest). Also records the
    /// boundary as the stream's observation point.
    pub fn partition_at(&mut self, task_boundary: usize) -> Result<(Vec<Example>, Vec<Example>)> {
        if task_boundary < 1 || task_boundary >= self.tasks.len() {
            return Err(Error::Usage(format!(
                "task boundary {task_boundary} out of range 1..{}",
                self.tasks.len()
            )));
        }
        self.observation_task = task_boundary;
        let previous = self.tasks[..task_boundary].concat();
        let current = self.tasks[task_boundary..].concat();
        Ok((previous, current))
    }
}

/// A seed-derived bijection on feature indices.
#[derive(Debug, Clone)]
pub struct PermutationSpec {
    pub seed: u64,
    pub dimension: usize,
}

impl PermutationSpec {
    /// The permutation as a lookup table: output `i` takes input `table[i]`.
    pub fn generate(&self) -> Vec<usize> {
        let mut table: Vec<usize> = (0..self.dimension).collect();
        let mut r = rng::stream_rng(self.seed, "feature-permutation");
        table.shuffle(&mut r);
        table
    }
}

fn apply_permutation(features: &[f64], table: &[usize]) -> Vec<f64> {
    table.iter().map(|&src| features[src]).collect()
}

/// Build a permuted-feature stream: task 0 is the base dataset unchanged,
/// task k applies a seed-derived random permutation to the feature indices.
/// Labels are untouched.
pub fn make_permuted_tasks(base: &[Example], n_tasks: usize, seed: u64) -> Result<TaskStream> {
    if n_tasks < 1 {
        return Err(Error::Usage("need at least one task".into()));
    }
    if base.is_empty() {
        return Err(Error::Usage("base dataset is empty".into()));
    }
    let dim = base[0].features.len();
    let mut tasks = Vec::with_capacity(n_tasks);
    for k in 0..n_tasks {
        let task: Vec<Example> = if k == 0 {
            base.iter()
                .map(|e| Example::new(e.features.clone(), e.label, 0))
                .collect()
        } else {
            let table = PermutationSpec {
                seed: rng::derive_seed(seed, &format!("permute-task/{k}")),
                dimension: dim,
            }
            .generate();
            base.iter()
                .map(|e| Example::new(apply_permutation(&e.features, &table), e.label, k))
                .collect()
        };
        tasks.push(task);
    }
    TaskStream::new(tasks)
}

/// Build a split-class stream: the distinct classes (sorted) are chunked into
/// groups of `classes_per_task`; task k holds exactly the examples of group k
/// with labels remapped to `0..classes_per_task` for the multi-head setting.
/// Within-task order is shuffled by the seed.
pub fn make_split_tasks(base: &[Example], classes_per_task: usize, seed: u64) -> Result<TaskStream> {
    if classes_per_task < 1 {
        return Err(Error::Usage("classes_per_task must be positive".into()));
    }
    let mut classes: Vec<usize> = base.iter().map(|e| e.label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Usage("base dataset is empty".into()));
    }
    if !classes.len().is_multiple_of(classes_per_task) {
        return Err(Error::Usage(format!(
            "{} distinct classes not divisible by classes_per_task {}",
            classes.len(),
            classes_per_task
        )));
    }
    let n_tasks = classes.len() / classes_per_task;
    let mut tasks = vec![Vec::new(); n_tasks];
    for e in base {
        let pos = classes.binary_search(&e.label).expect("label seen above");
        let k = pos / classes_per_task;
        tasks[k].push(Example::new(e.features.clone(), pos % classes_per_task, k));
    }
    for (k, task) in tasks.iter_mut().enumerate() {
        let mut r = rng::stream_rng(seed, &format!("split-shuffle/{k}"));
        task.shuffle(&mut r);
    }
    TaskStream::new(tasks)
}

/// Synthetic desk-scale dataset: class k is an isotropic unit Gaussian
/// centred at a seed-derived mean of norm `separation`.
pub fn make_gaussian_blobs(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    if separation < 0.0 {
        return Err(Error::Usage("separation must be nonnegative".into()));
    }
    if n_classes == 0 || dim == 0 {
        return Err(Error::Usage("n_classes and dim must be positive".into()));
    }
    let mut means = Vec::with_capacity(n_classes);
    let mut mean_rng = rng::stream_rng(seed, "blob-means");
    for _ in 0..n_classes {
        let raw: Vec<f64> = (0..dim).map(|_| rng::gauss(&mut mean_rng)).collect();
        let n = crate::linalg::norm(&raw);
        means.push(if n == 0.0 {
            vec![0.0; dim]
        } else {
            raw.iter().map(|v| v / n * separation).collect()
        });
    }
    let mut out = Vec::with_capacity(n_classes * n_per_class);
    for (label, mean) in means.iter().enumerate() {
        let mut r = rng::stream_rng(seed, &format!("blob-class/{label}"));
        for _ in 0..n_per_class {
            let features: Vec<f64> = mean.iter().map(|m| m + rng::gauss(&mut r)).collect();
            out.push(Example::new(features, label, 0));
        }
    }
    Ok(out)
}

/// Deterministic holdout split: each example lands in the test set with
/// probability `test_fraction` under the seed; train keeps stream order.
pub fn holdout_split(
    examples: &[Example],
    test_fraction: f64,
    seed: u64,
) -> (Vec<Example>, Vec<Example>) {
    let mut r = rng::stream_rng(seed, "holdout");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in examples {
        if r.gen::<f64>() < test_fraction {
            test.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, test)
}

/// Shuffle a task's examples into the i.i.d. pass order for one epoch.
pub fn shuffled(examples: &[Example], seed: u64, stream: &str) -> Vec<Example> {
    let mut out = examples.to_vec();
    let mut r = rng::stream_rng(seed, stream);
    out.shuffle(&mut r);
    out
}

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

struct IdxReader {
    bytes: Vec<u8>,
    pos: usize,
    path: String,
}

impl IdxReader {
    fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(IdxReader {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        })
    }

    fn err(&self, message: String) -> Error {
        Error::IdxFormat {
            offset: self.pos as u64,
            message: format!("{} ({})", message, self.path),
        }
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(self.err("truncated while reading u32".into()));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn read_payload(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated payload: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Load an IDX image/label file pair (the MNIST container format) into
/// examples with pixel features scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Example>> {
    let mut img = IdxReader::open(images_path)?;
    let magic = img.read_u32_be()?;
    if magic != IDX_MAGIC_IMAGES {
        img.pos = 0;
        return Err(img.err(format!(
            "bad image magic {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x}"
        )));
    }
    let n_images = img.read_u32_be()? as usize;
    let rows = img.read_u32_be()? as usize;
    let cols = img.read_u32_be()? as usize;
    let pixels = img.read_payload(n_images * rows * cols)?.to_vec();

    let mut lab = IdxReader::open(labels_path)?;
    let magic = lab.read_u32_be()?;
    if magic != IDX_MAGIC_LABELS {
        lab.pos = 0;
        return Err(lab.err(format!(
            "bad label magic {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x}"
        )));
    }
    let n_labels = lab.read_u32_be()? as usize;
    if n_labels != n_images {
        return Err(lab.err(format!(
            "label count {n_labels} does not match image count {n_images}"
        )));
    }
    let labels = lab.read_payload(n_labels)?.to_vec();

    let dim = rows * cols;
    let out = (0..n_images)
        .map(|i| {
            let features = pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| p as f64 / 255.0)
                .collect();
            Example::new(features, labels[i] as usize, 0)
        })
        .collect();
    Ok(out)
}

/// Load a dataset CSV with header `feature_0,...,feature_{d-1},label`.
pub fn load_csv(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::CsvFormat {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let d = headers.len().saturating_sub(1);
    if d == 0 || headers[d] != *"label" {
        return Err(Error::CsvFormat {
            line: 1,
            message: "expected header feature_0,...,label".into(),
        });
    }
    for (i, h) in headers.iter().take(d).enumerate() {
        if h != format!("feature_{i}") {
            return Err(Error::CsvFormat {
                line: 1,
                message: format!("expected column feature_{i}, found {h}"),
            });
        }
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        let record = record.map_err(|e| Error::CsvFormat {
            line,
            message: e.to_string(),
        })?;
        if record.len() != d + 1 {
            return Err(Error::CsvFormat {
                line,
                message: format!("expected {} fields, got {}", d + 1, record.len()),
            });
        }
        let mut features = Vec::with_capacity(d);
        for j in 0..d {
            features.push(record[j].trim().parse::<f64>().map_err(|e| Error::CsvFormat {
                line,
                message: format!("feature_{j}: {e}"),
            })?);
        }
        let label = record[d].trim().parse::<usize>().map_err(|e| Error::CsvFormat {
            line,
            message: format!("label: {e}"),
        })?;
        out.push(Example::new(features, label, 0));
    }
    Ok(out)
}
