use std::path::Path;

use symvae_cli::checkpoint::{load_models, read_container};
use symvae_cli::run::{prepare, run_complete, run_sample_limiting, run_train};
use symvae_cli::{HarnessError, RunConfig};

fn tabular_config(out: &Path, seed: u64) -> RunConfig {
    let text = format!(
        r#"
seed = {seed}
output_dir = "{}"

[scenario]
variant = "unsupervised"
data = "categorical:6x1"
latent = ["categorical:3x1"]

[model]
hidden = []

[training]
steps = 600
alpha = 0.05
eval_every = 100
checkpoint_every = 200

[dataset]
source = {{ synthetic_tabular = {{ n = 100 }} }}

[chain]
burn_in = 500
n_samples = 50000
"#,
        out.display()
    );
    RunConfig::parse(&text, Path::new("inline.toml")).unwrap()
}

#[test]
fn tabular_demo_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tabular_config(dir.path(), 5);
    let o = run_train(&cfg).unwrap();
    for f in ["metrics.csv", "checkpoint_200.bin", "checkpoint_400.bin", "checkpoint_600.bin", "final.bin", "report.txt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,player,utility,grad_norm,kl_fwd,kl_rev,accuracy");
    assert_eq!(lines.len(), 1 + 2 * 6);
    assert!(lines[1].starts_with("100,decoder,"));
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("consistency trajectory"));
    assert!(report.contains("kl_rev_initial") && report.contains("kl_rev_final"));
    assert_eq!(o.trajectory.len(), 7);
    let steps: Vec<u64> = o.trajectory.iter().map(|t| t.0).collect();
    assert_eq!(steps, vec![0, 100, 200, 300, 400, 500, 600]);
    for (step, d) in &o.trajectory[1..] {
        assert!(report.contains(&format!("{step},{:.6e}", d.kl_rev)));
    }
    let mut m = prepare(&cfg).unwrap().models;
    load_models(&dir.path().join("final.bin"), &mut m).unwrap();
    assert_eq!(m, o.models);
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_train(&tabular_config(a.path(), 9)).unwrap();
    run_train(&tabular_config(b.path(), 9)).unwrap();
    run_train(&tabular_config(c.path(), 10)).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    for f in ["metrics.csv", "checkpoint_200.bin", "final.bin", "report.txt"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert_ne!(read(a.path(), "metrics.csv"), read(c.path(), "metrics.csv"));
}

#[test]
fn unwritable_output_directory_is_reported_with_its_path() {
    let file = tempfile::NamedTempFile::new().unwrap();
    let out = file.path().join("nested");
    let e = run_train(&tabular_config(&out, 1)).unwrap_err();
    assert!(matches!(e, HarnessError::Io { .. }));
    assert!(e.to_string().contains(&out.display().to_string()), "{e}");
}

#[test]
fn limiting_chain_dump_matches_the_exact_stationary_law() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tabular_config(dir.path(), 2);
    run_train(&cfg).unwrap();
    let o = run_sample_limiting(&cfg, None).unwrap();
    assert!(o.stationary_tv.unwrap() < 0.02, "{:?}", o.stationary_tv);
    let segs = read_container(&dir.path().join("samples.bin")).unwrap();
    let names: Vec<&str> = segs.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, vec!["x", "z0"]);
    assert_eq!(segs[0].dims, vec![50_000, 1]);
    assert!(segs[0].data.iter().all(|v| (0.0..6.0).contains(v) && v.fract() == 0.0));
    let csv = std::fs::read_to_string(dir.path().join("chain.csv")).unwrap();
    assert!(csv.starts_with("sweep,variable,flip_rate\n"));
    assert!(csv.lines().count() > 50_000);
    assert!(dir.path().join("chain_report.txt").is_file());
    // An explicit checkpoint that does not exist is an error naming it.
    let missing = dir.path().join("nope.bin");
    let e = run_sample_limiting(&cfg, Some(&missing)).unwrap_err();
    assert!(e.to_string().contains("nope.bin"));
}

#[test]
fn completion_reports_accuracies_and_rejects_unlabelled_runs() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
seed = 4
output_dir = "{}"

[scenario]
variant = "triple_game"
data = "gaussian:9"
latent = ["categorical:2x1"]
prior = "fixed"
segmentation = "categorical:2x9"
gibbs_sweeps = 1

[model]
hidden = []

[training]
steps = 400
batch_size = 8
alpha = 0.02
eval_every = 100
checkpoint_every = 0

[dataset]
source = {{ synthetic_grid = {{ grid = 3, labels = 2, block = 3, noise = 0.3, n = 220 }} }}
train_fraction = 0.9

[chain]
burn_in = 10
n_samples = 40
completions = 10
"#,
        dir.path().display()
    );
    let cfg = RunConfig::parse(&text, Path::new("inline.toml")).unwrap();
    run_train(&cfg).unwrap();
    assert!(!dir.path().join("checkpoint_400.bin").exists());
    let o = run_complete(&cfg, None).unwrap();
    assert_eq!(o.records, 10);
    assert!(o.accuracy_full > 0.9, "{o:?}");
    assert!((0.0..=1.0).contains(&o.accuracy_masked));
    assert!(o.chance > 0.4 && o.chance < 0.65);
    let csv = std::fs::read_to_string(dir.path().join("completion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let unlabelled = tabular_config(dir.path(), 1);
    assert!(matches!(run_complete(&unlabelled, None), Err(HarnessError::Validation { .. })));
}

#[test]
fn class_split_run_reports_heldout_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
seed = 2
output_dir = "{}"

[scenario]
variant = "hierarchical"
data = "gaussian:4"
latent = ["categorical:2x1"]
classes = 2
labelled = true
labelled_encoder_weight = 0.0

[model]
hidden = [8]

[training]
steps = 1500
alpha = 0.02
eval_every = 500
checkpoint_every = 0

[dataset]
source = {{ synthetic_mixture = {{ components = 2, dim = 4, separation = 10.0, n = 600 }} }}
"#,
        dir.path().display()
    );
    let cfg = RunConfig::parse(&text, Path::new("inline.toml")).unwrap();
    let o = run_train(&cfg).unwrap();
    assert!(o.trajectory.is_empty());
    assert!(o.accuracy.unwrap() > 0.9, "{:?}", o.accuracy);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(last.starts_with("1500,") && !last.ends_with(','), "{last}");
}
