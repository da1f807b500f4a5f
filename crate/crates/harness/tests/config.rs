use std::path::Path;

use symvae::efcore::FamilyDescriptor;
use symvae_cli::config::{AlgorithmName, DatasetSource, GradientName, ModeName, PriorName, VariantName};
use symvae_cli::{load_config, HarnessError, RunConfig};

const MINIMAL: &str = r#"
seed = 3

[scenario]
variant = "unsupervised"
data = "categorical:8x1"
latent = ["categorical:4x1"]

[dataset]
source = { synthetic_tabular = { n = 50 } }
"#;

fn parse(text: &str) -> Result<RunConfig, HarnessError> {
    RunConfig::parse(text, Path::new("test.toml"))
}

#[test]
fn minimal_config_gets_documented_defaults() {
    let c = parse(MINIMAL).unwrap();
    assert_eq!(c.seed, 3);
    assert_eq!(c.output_dir, Path::new("out"));
    assert_eq!(c.scenario.variant, VariantName::Unsupervised);
    assert_eq!(c.scenario.data, FamilyDescriptor::Categorical { k: 8, sites: 1 });
    assert_eq!(c.scenario.prior, PriorName::Learned);
    assert_eq!(c.scenario.gibbs_sweeps, 4);
    assert_eq!(c.scenario.labelled_encoder_weight, 1.0);
    assert_eq!(c.model.hidden, vec![64, 64]);
    let t = &c.training;
    assert_eq!((t.steps, t.batch_size, t.model_draws, t.n_mc), (1000, 32, 32, 1));
    assert_eq!((t.alpha, t.eval_every, t.checkpoint_every), (0.05, 100, 1000));
    assert_eq!((t.mode, t.algorithm, t.gradient), (ModeName::Parallel, AlgorithmName::Nash, GradientName::MonteCarlo));
    assert_eq!(c.dataset.train_fraction, 0.8);
    assert_eq!(c.dataset.labelled_fraction, 1.0);
    assert_eq!(c.dataset.source, DatasetSource::SyntheticTabular(symvae_cli::config::TabularParams { n: 50 }));
    assert_eq!((c.chain.burn_in, c.chain.n_samples, c.chain.thinning), (1000, 10_000, 1));
}

#[test]
fn negative_alpha_is_rejected_by_name() {
    let text = format!("{MINIMAL}\n[training]\nalpha = -1.0\n");
    let e = parse(&text).unwrap_err();
    assert!(matches!(&e, HarnessError::Validation { field, .. } if field == "alpha"), "{e}");
    assert!(e.to_string().contains("alpha"));
}

#[test]
fn canonical_form_round_trips() {
    for path in ["unsupervised_tabular", "class_split", "triple_grid"] {
        let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{path}.toml"));
        let c = load_config(&file).unwrap();
        let text = c.to_canonical();
        let again = parse(&text).unwrap();
        assert_eq!(c, again, "{path}");
        assert_eq!(text, again.to_canonical());
    }
    let c = parse(MINIMAL).unwrap();
    assert_eq!(parse(&c.to_canonical()).unwrap(), c);
}

#[test]
fn unknown_keys_are_rejected_with_position() {
    let text = MINIMAL.replace("latent = [", "latnet = 3\nlatent = [");
    match parse(&text).unwrap_err() {
        HarnessError::Parse { line, column, message, .. } => {
            assert_eq!((line, column), (7, 1), "{message}");
            assert!(message.contains("latnet"), "{message}");
        }
        e => panic!("{e}"),
    }
    let text = format!("{MINIMAL}\n[training]\nstep = 5\n");
    assert!(matches!(parse(&text), Err(HarnessError::Parse { .. })));
}

#[test]
fn seed_is_mandatory() {
    let text = MINIMAL.replace("seed = 3", "");
    let e = parse(&text).unwrap_err();
    assert!(e.to_string().contains("seed"), "{e}");
}

#[test]
fn syntax_errors_carry_line_and_column() {
    let text = MINIMAL.replace("seed = 3", "seed = = 3");
    match parse(&text).unwrap_err() {
        HarnessError::Parse { line, column, .. } => assert_eq!((line, column), (2, 8)),
        e => panic!("{e}"),
    }
}

#[test]
fn bad_family_descriptor_is_a_parse_error() {
    let text = MINIMAL.replace("categorical:8x1", "categorical:1x1");
    assert!(matches!(parse(&text), Err(HarnessError::Parse { .. })));
}

#[test]
fn dataset_and_scenario_must_agree() {
    let mixture = r#"
seed = 1
[scenario]
variant = "hierarchical"
data = "gaussian:5"
latent = ["categorical:2x1"]
classes = 3
labelled = true
[model]
hidden = [8]
[dataset]
source = { synthetic_mixture = { components = 3, dim = 6, separation = 4.0, n = 100 } }
"#;
    assert!(matches!(parse(mixture), Err(HarnessError::Validation { field, .. }) if field == "data"));
    let ok = mixture.replace("gaussian:5", "gaussian:6");
    parse(&ok).unwrap();
    let idx = MINIMAL
        .replace("categorical:8x1", "bernoulli:4")
        .replace("{ synthetic_tabular = { n = 50 } }", "{ idx_images = { images = \"x.idx\", threshold = 1.0 } }");
    assert!(matches!(parse(&idx), Err(HarnessError::Validation { field, .. }) if field == "threshold"));
    let bad_split = format!("{MINIMAL}train_fraction = 0.0\n");
    assert!(matches!(parse(&bad_split), Err(HarnessError::Validation { field, .. }) if field == "train_fraction"));
    let cadence = format!("{MINIMAL}\n[training]\neval_every = 30\ncheckpoint_every = 100\n");
    assert!(matches!(parse(&cadence), Err(HarnessError::Validation { field, .. }) if field == "checkpoint_every"));
}

#[test]
fn scenario_errors_are_validation_errors() {
    let text = MINIMAL.replace("variant = \"unsupervised\"", "variant = \"triple_game\"");
    assert!(matches!(parse(&text), Err(HarnessError::Validation { field, .. }) if field == "scenario"));
}

#[test]
fn missing_file_names_the_path() {
    let e = load_config(Path::new("/nonexistent/run.toml")).unwrap_err();
    assert!(e.to_string().contains("/nonexistent/run.toml"));
}
