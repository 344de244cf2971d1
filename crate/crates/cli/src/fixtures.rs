//! Test-fixture generation: tiny IDX image/label pairs and a dataset CSV,
//! written deterministically from a seed.

use std::path::Path;

use nccl_core::rng::derive_seed;
use nccl_core::tasks::make_gaussian_blobs;

use crate::error::Result;
use crate::output::{fmt_f, write_atomic};

fn idx_images_bytes(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + pixels.len());
    b.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    b.extend_from_slice(&n.to_be_bytes());
    b.extend_from_slice(&rows.to_be_bytes());
    b.extend_from_slice(&cols.to_be_bytes());
    b.extend_from_slice(pixels);
    b
}

fn idx_labels_bytes(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + labels.len());
    b.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| crate::error::CliError::Runtime(format!("mkdir: {e}")))?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| crate::error::CliError::Runtime(format!("write {}: {e}", path.display())))
}

/// Write the fixture set into `dir`: a valid 4x4 IDX pair derived from
/// blobs, a deliberately corrupt IDX header, and a dataset CSV.
pub fn gen_fixtures(dir: &Path, seed: u64) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let data = make_gaussian_blobs(3, 16, 8, 5.0, derive_seed(seed, "fixture-blobs"))?;

    // quantize features into pixel bytes
    let lo = data
        .iter()
        .flat_map(|e| e.features.iter())
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = data
        .iter()
        .flat_map(|e| e.features.iter())
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let pixels: Vec<u8> = data
        .iter()
        .flat_map(|e| e.features.iter().map(|&v| ((v - lo) * scale) as u8))
        .collect();
    let labels: Vec<u8> = data.iter().map(|e| e.label as u8).collect();

    let images_path = dir.join("fixture_images.idx");
    write_bytes(&images_path, &idx_images_bytes(data.len() as u32, 4, 4, &pixels))?;
    written.push(images_path.display().to_string());

    let labels_path = dir.join("fixture_labels.idx");
    write_bytes(&labels_path, &idx_labels_bytes(&labels))?;
    written.push(labels_path.display().to_string());

    let mut bad = idx_images_bytes(1, 2, 2, &[0, 0, 0, 0]);
    bad[3] = 0x42; // wrong magic on purpose
    let bad_path = dir.join("fixture_bad_magic.idx");
    write_bytes(&bad_path, &bad)?;
    written.push(bad_path.display().to_string());

    let mut csv = String::from("feature_0,feature_1,label\n");
    let small = make_gaussian_blobs(2, 2, 6, 3.0, derive_seed(seed, "fixture-csv"))?;
    for e in &small {
        csv.push_str(&format!(
            "{},{},{}\n",
            fmt_f(e.features[0]),
            fmt_f(e.features[1]),
            e.label
        ));
    }
    let csv_path = dir.join("fixture_dataset.csv");
    write_atomic(&csv_path, &csv)?;
    written.push(csv_path.display().to_string());

    Ok(written)
}
