//! The binary's user-facing contract: exit codes, error naming, fixture
//! generation, dataset ingestion paths, and the compare table.

use std::path::Path;
use std::process::Command;

use nccl_cli::config::{DatasetCfg, RunConfig, TaskKind};
use nccl_cli::runner::{compare_policies, run_experiment};
use nccl_cli::fixtures::gen_fixtures;

use nccl_core::memory::MemoryScheme;
use nccl_core::optimizer::PolicyKind;
use nccl_core::tasks::load_idx;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nccl")
}

fn tiny_blobs(policy: PolicyKind, out: &Path) -> RunConfig {
    RunConfig {
        dataset: DatasetCfg::Blobs {
            classes: 4,
            dim: 8,
            per_class: 40,
            separation: 5.0,
        },
        policy,
        alpha: Some(0.1),
        seeds: vec![1, 2],
        memory_capacity: 50,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn unknown_config_key_exits_1_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "policy.betta_max = 0.5\n").unwrap();
    let out = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("betta_max"), "{stderr}");
}

#[test]
fn oversized_alpha_exits_1_citing_the_bound() {
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .env("NCCL_OUT_ROOT", root.path())
        .args(["run", "--alpha", "5.0", "--seeds", "1", "--out", "unused"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("2/L"), "{stderr}");
}

#[test]
fn missing_dataset_file_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .env("NCCL_OUT_ROOT", root.path())
        .args([
            "run",
            "--seeds",
            "1",
            "--out",
            "unused",
            "--set",
            "dataset.kind=idx",
            "--set",
            "dataset.images=/nonexistent/images.idx",
            "--set",
            "dataset.labels=/nonexistent/labels.idx",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn single_task_stream_marks_forgetting_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_blobs(PolicyKind::Nccl, &dir.path().join("one"));
    cfg.task_kind = TaskKind::Permuted { count: 1 };
    cfg.seeds = vec![1];
    run_experiment(&cfg).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("one/summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    assert!(row.split(',').nth(3).unwrap() == "undefined", "{row}");
}

#[test]
fn compare_emits_one_row_per_policy_and_identical_configs_match() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_blobs(PolicyKind::ErFixed, &dir.path().join("unused_a"));
    let b = tiny_blobs(PolicyKind::ErFixed, &dir.path().join("unused_b"));
    let table = compare_policies(&[a, b], &dir.path().join("cmp")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    // identical configs under two slots produce identical statistics
    assert_eq!(rows[0], rows[1]);

    let single = tiny_blobs(PolicyKind::Agem, &dir.path().join("unused_c"));
    let table = compare_policies(std::slice::from_ref(&single), &dir.path().join("cmp1")).unwrap();
    assert_eq!(table.lines().count(), 2); // header + one row
}

#[test]
fn compare_rejects_mismatched_experiments() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_blobs(PolicyKind::ErFixed, &dir.path().join("a"));
    let mut b = tiny_blobs(PolicyKind::Nccl, &dir.path().join("b"));
    b.seeds = vec![7];
    let err = compare_policies(&[a, b], &dir.path().join("cmp")).unwrap_err();
    assert!(err.to_string().contains("sharing"), "{err}");
}

#[test]
fn fixtures_round_trip_through_the_idx_loader() {
    let dir = tempfile::tempdir().unwrap();
    let written = gen_fixtures(dir.path(), 7).unwrap();
    assert_eq!(written.len(), 4);
    let examples = load_idx(
        &dir.path().join("fixture_images.idx"),
        &dir.path().join("fixture_labels.idx"),
    )
    .unwrap();
    assert_eq!(examples.len(), 24);
    assert!(examples.iter().all(|e| e.features.len() == 16));
    assert!(examples
        .iter()
        .all(|e| e.features.iter().all(|&v| (0.0..=1.0).contains(&v))));
    // the corrupt fixture is rejected
    assert!(load_idx(
        &dir.path().join("fixture_bad_magic.idx"),
        &dir.path().join("fixture_labels.idx"),
    )
    .is_err());
}

#[test]
fn run_ingests_idx_and_csv_datasets() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixtures(dir.path(), 7).unwrap();

    let cfg = RunConfig {
        dataset: DatasetCfg::Idx {
            images: dir.path().join("fixture_images.idx"),
            labels: dir.path().join("fixture_labels.idx"),
        },
        task_kind: TaskKind::Permuted { count: 2 },
        policy: PolicyKind::ErFixed,
        alpha: Some(0.1),
        seeds: vec![1],
        memory_capacity: 10,
        batch_stream: 4,
        batch_memory: 4,
        test_fraction: 0.25,
        out_dir: dir.path().join("idx_run"),
        ..RunConfig::default()
    };
    run_experiment(&cfg).unwrap();
    assert!(dir.path().join("idx_run/summary.csv").exists());

    let cfg = RunConfig {
        dataset: DatasetCfg::Csv {
            path: dir.path().join("fixture_dataset.csv"),
        },
        task_kind: TaskKind::Permuted { count: 2 },
        policy: PolicyKind::Finetune,
        alpha: Some(0.1),
        seeds: vec![1],
        batch_stream: 2,
        batch_memory: 2,
        test_fraction: 0.3,
        out_dir: dir.path().join("csv_run"),
        ..RunConfig::default()
    };
    run_experiment(&cfg).unwrap();
    assert!(dir.path().join("csv_run/summary.csv").exists());
}

#[test]
fn split_stream_runs_in_both_head_modes() {
    let dir = tempfile::tempdir().unwrap();
    for (multi, name) in [(true, "multi"), (false, "single")] {
        let mut cfg = tiny_blobs(PolicyKind::Nccl, &dir.path().join(name));
        cfg.task_kind = TaskKind::Split {
            classes_per_task: 2,
        };
        cfg.multi_head = multi;
        cfg.seeds = vec![1];
        let summary = run_experiment(&cfg).unwrap();
        let acc = summary.outcomes[0].avg_accuracy;
        assert!(
            acc > 0.5,
            "{name}-head split run should classify well, got {acc}"
        );
    }
}

#[test]
fn per_class_ring_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_blobs(PolicyKind::Nccl, &dir.path().join("ring"));
    cfg.memory_scheme = MemoryScheme::Ring;
    cfg.memory_per_class = true;
    cfg.seeds = vec![1];
    run_experiment(&cfg).unwrap();
    let snapshot =
        std::fs::read_to_string(dir.path().join("ring/seed_1/memory_final.csv")).unwrap();
    // capacity split across the 4 classes: roughly balanced per-class counts
    let mut counts = [0usize; 4];
    for line in snapshot.lines().skip(1) {
        let label: usize = line.split(',').nth(3).unwrap().parse().unwrap();
        counts[label] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "per-class ring unbalanced: {counts:?}");
}

#[test]
fn diagnose_subcommand_exits_zero_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin())
        .args(["diagnose", "--seed", "777", "--out"])
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let report = std::fs::read_to_string(dir.path().join("d/diagnose_report.txt")).unwrap();
    assert!(report.contains("pass"));
    for csv in ["unbiasedness.csv", "reservoir.csv", "variance.csv", "beta_star.csv"] {
        assert!(dir.path().join("d").join(csv).exists(), "{csv} missing");
    }
}

#[test]
fn summary_is_recomputable_from_per_seed_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_blobs(PolicyKind::Nccl, &dir.path().join("r"));
    run_experiment(&cfg).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("r/summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let per_seed: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0].parse::<u64>().is_ok()).collect();

    for row in &per_seed {
        let seed = row[0];
        // sum_gamma recomputes from the gamma column of every steps file
        let mut sum_gamma = 0.0f64;
        let mut last_ifo_total = 0u64;
        for k in 0..3 {
            let steps = std::fs::read_to_string(
                dir.path().join(format!("r/seed_{seed}/steps_task{k}.csv")),
            )
            .unwrap();
            for line in steps.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                sum_gamma += cols[4].parse::<f64>().unwrap();
            }
            last_ifo_total += steps
                .lines()
                .last()
                .unwrap()
                .split(',')
                .nth(8)
                .unwrap()
                .parse::<u64>()
                .unwrap();
        }
        let reported: f64 = row[4].parse().unwrap();
        assert!(
            (sum_gamma - reported).abs() <= 1e-10 * reported.abs().max(1.0),
            "seed {seed}: steps files give {sum_gamma}, summary says {reported}"
        );
        assert_eq!(last_ifo_total, row[6].parse::<u64>().unwrap());

        // avg accuracy recomputes from the accuracy matrix's final row
        let acc = std::fs::read_to_string(
            dir.path().join(format!("r/seed_{seed}/accuracy.csv")),
        )
        .unwrap();
        let last: Vec<f64> = acc
            .lines()
            .last()
            .unwrap()
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        let avg = last.iter().sum::<f64>() / last.len() as f64;
        let reported: f64 = row[2].parse().unwrap();
        assert!((avg - reported).abs() < 1e-12);
    }

    // the mean row matches the per-seed rows it claims to aggregate
    let mean_row = rows.iter().find(|r| r[0] == "mean").unwrap();
    let accs: Vec<f64> = per_seed.iter().map(|r| r[2].parse().unwrap()).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - mean_row[2].parse::<f64>().unwrap()).abs() < 1e-12);
}

#[test]
fn ledger_csv_mirrors_the_text_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_blobs(PolicyKind::Nccl, &dir.path().join("lg"));
    run_experiment(&cfg).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("lg/seed_1/ledger_task1.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("lg/seed_1/ledger_task1.txt")).unwrap();
    let cols: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let rhs: f64 = cols[8].parse().unwrap();
    assert!(rhs.is_finite());
    let violated: bool = cols[10].parse().unwrap();
    assert_eq!(violated, text.contains("VIOLATED"));
}

#[test]
fn betamax_policy_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_blobs(PolicyKind::NcclBetamax, &dir.path().join("bm"));
    cfg.beta_max = Some(0.5);
    cfg.seeds = vec![1];
    let summary = run_experiment(&cfg).unwrap();
    assert_eq!(summary.outcomes.len(), 1);
    // with the big clip, some transfer steps may take beta above alpha
    let steps =
        std::fs::read_to_string(dir.path().join("bm/seed_1/steps_task1.csv")).unwrap();
    assert!(steps.lines().count() > 1);
}

#[test]
fn schedule_constant_sets_alpha_per_task_length() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_blobs(PolicyKind::Finetune, &dir.path().join("sched"));
    cfg.alpha = None;
    cfg.c = Some(0.8);
    cfg.seeds = vec![1];
    run_experiment(&cfg).unwrap();
    let steps = std::fs::read_to_string(dir.path().join("sched/seed_1/steps_task0.csv")).unwrap();
    let first = steps.lines().nth(1).unwrap();
    let beta: f64 = first.split(',').nth(2).unwrap().parse().unwrap();
    let t = steps.lines().count() as f64 - 1.0;
    assert!(
        (beta - 0.8 / t.sqrt()).abs() < 1e-12,
        "beta {beta} vs c/sqrt(T) with T = {t}"
    );
}

#[test]
fn estimate_l_option_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_blobs(PolicyKind::Nccl, &dir.path().join("estl"));
    cfg.estimate_l = true;
    cfg.alpha = Some(0.01); // stay under 2/L for the estimated constant
    cfg.seeds = vec![1];
    run_experiment(&cfg).unwrap();
}
