//! Run orchestration: training, limiting-chain sampling and completion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symvae::chain::{
    complete_partial, sample_limiting, stationary_distribution, tabular_kernel, ChainOptions, ChainSpec, Clamp,
    PartialObservation, StationaryEstimate,
};
use symvae::efcore::{FamilyDescriptor, Value};
use symvae::equilibrium::{
    build_models, factor_names, train, Assignment, EmpiricalData, Evaluation, MetricsLog, ModelSet, Scenario, Stream,
    TrainConfig, TrainerState, Var, Variant,
};
use symvae::tabular_oracle::{consistency_diagnostics, model_joints, ConsistencyDiagnostics, SUPPORT_CAP};

use crate::checkpoint::{load_models, save_models, write_container, Segment};
use crate::config::{DatasetSource, RunConfig};
use crate::data::{self, SampleStore};
use crate::error::{io_err, HarnessError, Result, Stage};

const DATA_STREAM: u64 = 101;
const INIT_STREAM: u64 = 102;
const CHAIN_STREAM: u64 = 103;
const MASK_STREAM: u64 = 104;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn load_dataset(cfg: &RunConfig) -> Result<SampleStore> {
    let mut rng = stream_rng(cfg.seed, DATA_STREAM);
    let family = cfg.scenario.data;
    match &cfg.dataset.source {
        DatasetSource::SyntheticMixture(p) => data::synth_mixture(p, p.n, &mut rng),
        DatasetSource::SyntheticGrid(p) => data::synth_grid(p, p.n, &mut rng),
        DatasetSource::SyntheticTabular(p) => data::synth_tabular(family, p.n, &mut rng),
        DatasetSource::IdxImages(p) => {
            let mut store = data::load_idx(&p.images, family, p.threshold)?;
            if let Some(l) = &p.labels {
                let labels = data::load_idx_labels(l)?;
                if labels.len() != store.len() {
                    return Err(HarnessError::Validation {
                        field: "labels".into(),
                        message: format!("{} labels for {} images", labels.len(), store.len()),
                    });
                }
                store.labels = Some(labels);
            }
            if let Some(n) = p.limit {
                store = store.split_at(n).0;
            }
            Ok(store)
        }
    }
}

/// Everything a run needs before the first update.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub models: ModelSet,
    pub train: SampleStore,
    pub test: SampleStore,
    pub data: EmpiricalData,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let scenario = cfg.scenario()?;
    let store = load_dataset(cfg)?;
    let n_train = ((store.len() as f64) * cfg.dataset.train_fraction).floor() as usize;
    let (train, test) = store.split_at(n_train.max(1));
    let data = data::training_streams(&scenario, &train, cfg.dataset.labelled_fraction)?;
    let models = build_models(&scenario, &cfg.architecture(), &mut stream_rng(cfg.seed, INIT_STREAM)).stage("equilibrium")?;
    Ok(Prepared { scenario, models, train, test, data })
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
}

/// Metrics computed at evaluation points.
#[derive(Debug, Clone)]
pub struct Evaluator {
    xs: Vec<Value>,
    zs: Vec<Value>,
    tabular: bool,
    /// Encoder factor whose argmax predicts the held-out labels.
    classifier: Option<String>,
    test_x: Vec<Value>,
    test_labels: Vec<usize>,
}

impl Evaluator {
    pub fn new(p: &Prepared) -> Self {
        let o = &p.scenario.options;
        let size = |f: FamilyDescriptor| f.support_size().unwrap_or(u128::MAX);
        let tabular = matches!(p.scenario.variant, Variant::Unsupervised | Variant::SemiSupervisedMixed | Variant::MarginalsOnly)
            && o.latent.len() == 1
            && size(o.data).saturating_mul(size(o.latent[0])) <= SUPPORT_CAP as u128;
        let classifier = match (p.scenario.variant, o.classes) {
            (Variant::Hierarchical, Some(_)) => Some(factor_names::ENC_C.to_string()),
            (Variant::SemiSupervisedMixed, _) => Some(factor_names::enc(0)),
            _ => None,
        };
        let labels = p.test.labels.clone();
        Self {
            xs: p.data.records(Stream::X).iter().map(|r| r[0].clone()).collect(),
            zs: p.data.records(Stream::Z).iter().map(|r| r[0].clone()).collect(),
            tabular,
            classifier: classifier.filter(|_| labels.is_some()),
            test_x: p.test.x.clone(),
            test_labels: labels.unwrap_or_default(),
        }
    }

    pub fn consistency(&self, models: &ModelSet) -> Result<Option<ConsistencyDiagnostics>> {
        if !self.tabular {
            return Ok(None);
        }
        let j = model_joints(models, &self.xs, &self.zs).stage("tabular_oracle")?;
        Ok(Some(consistency_diagnostics(&j.p, &j.q, j.nx, j.nz).stage("tabular_oracle")?))
    }

    /// Fraction of held-out records whose label is the encoder's most
    /// probable class.
    pub fn accuracy(&self, models: &ModelSet) -> Result<Option<f64>> {
        let Some(name) = &self.classifier else { return Ok(None) };
        if self.test_x.is_empty() {
            return Ok(None);
        }
        let u = models.use_of(name).stage("equilibrium")?;
        let mut hits = 0;
        for (x, &l) in self.test_x.iter().zip(&self.test_labels) {
            let mut asg = Assignment::new();
            asg.set(Var::X, x.clone());
            let eta = models.natural_params(&u, &asg).stage("equilibrium")?;
            hits += usize::from(argmax(&eta.0) == l);
        }
        Ok(Some(hits as f64 / self.test_x.len() as f64))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: ModelSet,
    pub metrics: MetricsLog,
    /// Consistency diagnostics at step 0 and every evaluation point.
    pub trajectory: Vec<(u64, ConsistencyDiagnostics)>,
    pub accuracy: Option<f64>,
    pub out_dir: PathBuf,
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    // Fail early, with the directory in the message, when it is not writable.
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(io_err(dir))?;
    std::fs::remove_file(&probe).map_err(io_err(&probe))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn trainer(cfg: &RunConfig, p: &Prepared) -> Result<TrainerState> {
    let mut st = TrainerState::new(p.scenario.clone(), p.models.clone(), cfg.training.alpha, cfg.seed).stage("equilibrium")?;
    st.mode = cfg.update_mode();
    st.n_mc = cfg.training.n_mc;
    st.source = cfg.gradient_source();
    Ok(st)
}

/// Trains the configured scenario and writes `metrics.csv`,
/// `checkpoint_<step>.bin`, `final.bin` and `report.txt`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = cfg.output_dir.clone();
    create_out_dir(&out)?;
    let p = prepare(cfg)?;
    let eval = Evaluator::new(&p);
    let mut st = trainer(cfg, &p)?;
    let t = &cfg.training;
    let mut trajectory = Vec::new();
    if let Some(d) = eval.consistency(&st.models)? {
        trajectory.push((0, d));
    }
    let chunk = if t.checkpoint_every == 0 { t.steps } else { t.checkpoint_every };
    let mut log = MetricsLog::default();
    let mut failure = None;
    while st.step < t.steps {
        let steps = chunk.min(t.steps - st.step);
        let tc = TrainConfig {
            steps,
            batch_size: (t.batch_size > 0).then_some(t.batch_size),
            model_draws: t.model_draws,
            eval_every: t.eval_every,
            algorithm: cfg.algorithm(),
        };
        let part = train(&mut st, &p.data, &tc, |s| {
            let diag = eval.consistency(&s.models);
            let acc = eval.accuracy(&s.models);
            match (diag, acc) {
                (Ok(d), Ok(a)) => {
                    if let Some(d) = d {
                        trajectory.push((s.step, d));
                    }
                    Ok(Evaluation { kl_fwd: d.map(|d| d.kl_fwd), kl_rev: d.map(|d| d.kl_rev), accuracy: a })
                }
                (Err(e), _) | (_, Err(e)) => {
                    let msg = e.to_string();
                    failure = Some(e);
                    Err(symvae::Error::Configuration(msg))
                }
            }
        });
        let part = match (part, failure.take()) {
            (_, Some(e)) => return Err(e),
            (r, None) => r.stage("equilibrium")?,
        };
        log.rows.extend(part.rows);
        if t.checkpoint_every > 0 && st.step % t.checkpoint_every == 0 {
            save_models(&out.join(format!("checkpoint_{}.bin", st.step)), &st.models)?;
        }
    }
    write(&out.join("metrics.csv"), &log.to_csv())?;
    save_models(&out.join("final.bin"), &st.models)?;
    let accuracy = eval.accuracy(&st.models)?;
    let outcome = TrainOutcome { models: st.models.clone(), metrics: log, trajectory, accuracy, out_dir: out.clone() };
    write(&out.join("report.txt"), &train_report(cfg, &st, &outcome))?;
    Ok(outcome)
}

fn train_report(cfg: &RunConfig, st: &TrainerState, o: &TrainOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant: {:?}", st.scenario.variant);
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "steps: {}", st.step);
    for (p, name) in st.models.players.iter().enumerate() {
        let _ = writeln!(s, "utility[{name}]: {:.6e}", st.utility_estimates[p]);
    }
    if let Some(a) = o.accuracy {
        let _ = writeln!(s, "heldout_accuracy: {a:.6}");
    }
    if let (Some(first), Some(last)) = (o.trajectory.first(), o.trajectory.last()) {
        let _ = writeln!(s, "kl_rev_initial: {:.6e}", first.1.kl_rev);
        let _ = writeln!(s, "kl_rev_final: {:.6e}", last.1.kl_rev);
        let _ = writeln!(s, "kl_rev_ratio: {:.6e}", last.1.kl_rev / first.1.kl_rev);
        let _ = writeln!(s, "tv_mixture_initial: {:.6e}", first.1.tv_mixture);
        let _ = writeln!(s, "tv_mixture_final: {:.6e}", last.1.tv_mixture);
        let _ = writeln!(s, "\nconsistency trajectory");
        let _ = writeln!(s, "step,kl_rev,kl_fwd,tv_mixture");
        for (step, d) in &o.trajectory {
            let _ = writeln!(s, "{step},{:.6e},{:.6e},{:.6e}", d.kl_rev, d.kl_fwd, d.tv_mixture);
        }
    }
    s
}

/// Models from `checkpoint`, else from `<output_dir>/final.bin` when present,
/// else freshly initialized.
pub fn trained_models(cfg: &RunConfig, p: &Prepared, checkpoint: Option<&Path>) -> Result<ModelSet> {
    let mut models = p.models.clone();
    let fallback = cfg.output_dir.join("final.bin");
    match checkpoint {
        Some(c) => load_models(c, &mut models)?,
        None if fallback.exists() => load_models(&fallback, &mut models)?,
        None => {}
    }
    Ok(models)
}

fn chain_options(cfg: &RunConfig, keep_samples: bool) -> ChainOptions {
    ChainOptions { burn_in: cfg.chain.burn_in, n_samples: cfg.chain.n_samples, thinning: cfg.chain.thinning, keep_samples }
}

#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub estimate: StationaryEstimate,
    /// TV between the sampled data marginal and the exact stationary one,
    /// for enumerable alternating chains.
    pub stationary_tv: Option<f64>,
}

/// Samples the limiting chain and writes `samples.bin` and `chain.csv`.
pub fn run_sample_limiting(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ChainOutcome> {
    let out = cfg.output_dir.clone();
    create_out_dir(&out)?;
    let p = prepare(cfg)?;
    let models = trained_models(cfg, &p, checkpoint)?;
    let spec = ChainSpec::limiting(&p.scenario, &models).stage("chain")?;
    let mut rng = stream_rng(cfg.seed, CHAIN_STREAM);
    let (samples, estimate) = sample_limiting(&models, &spec, &chain_options(cfg, true), &mut rng).stage("chain")?;
    let mut segments = Vec::new();
    for var in spec.sampled_vars() {
        let sites = models.family(var).stage("chain")?.site_count();
        let mut data = Vec::with_capacity(samples.len() * sites);
        for a in &samples {
            let v = a.require(var).stage("chain")?;
            data.extend((0..sites).map(|i| v.site(i)));
        }
        segments.push(Segment { name: var.name(), dims: vec![samples.len() as u64, sites as u64], data });
    }
    write_container(&out.join("samples.bin"), &segments)?;
    let mut csv = String::from("sweep,variable,flip_rate\n");
    for (sweep, var, rate) in &estimate.flip_rates {
        let _ = writeln!(csv, "{sweep},{},{rate:.6}", var.name());
    }
    write(&out.join("chain.csv"), &csv)?;
    let stationary_tv = match (Evaluator::new(&p).tabular, estimate.marginal(Var::X)) {
        (true, Some(m)) => {
            let (tx, _) = tabular_kernel(&models).stage("chain")?;
            let exact = stationary_distribution(&tx, 1e-13).stage("chain")?;
            Some(0.5 * m.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>())
        }
        _ => None,
    };
    let mut report = format!("samples: {}\nburn_in: {}\n", samples.len(), cfg.chain.burn_in);
    if let Some(t) = stationary_tv {
        let _ = writeln!(report, "stationary_tv: {t:.6e}");
    }
    write(&out.join("chain_report.txt"), &report)?;
    Ok(ChainOutcome { estimate, stationary_tv })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompleteOutcome {
    pub records: usize,
    /// Accuracy of the inferred targets with every data site observed.
    pub accuracy_full: f64,
    /// Accuracy with `mask_fraction` of the data sites hidden.
    pub accuracy_masked: f64,
    /// Frequency of the most common training label.
    pub chance: f64,
}

fn majority_rate<'a>(labels: impl Iterator<Item = &'a usize>) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut n = 0usize;
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
        n += 1;
    }
    counts.values().max().map_or(0.0, |&c| c as f64 / n as f64)
}

/// Infers held-out targets (segmentations or class labels) from complete and
/// partially masked data with the clamped limiting chain. Writes
/// `completion.csv` and `complete_report.txt`.
pub fn run_complete(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<CompleteOutcome> {
    let out = cfg.output_dir.clone();
    create_out_dir(&out)?;
    let p = prepare(cfg)?;
    let no_targets = || HarnessError::Validation {
        field: "dataset".into(),
        message: "completion needs held-out segmentations or labels".into(),
    };
    let (target, truth, chance): (Var, Vec<Vec<usize>>, f64) = match p.scenario.variant {
        Variant::TripleGame => {
            let s = p.test.segments.clone().ok_or_else(no_targets)?;
            let train = p.train.segments.as_ref().ok_or_else(no_targets)?;
            (Var::S, s, majority_rate(train.iter().flatten()))
        }
        Variant::Hierarchical | Variant::SemiSupervisedMixed => {
            let var = if p.scenario.options.classes.is_some() && p.scenario.variant == Variant::Hierarchical {
                Var::Class
            } else {
                Var::Z(0)
            };
            let l = p.test.labels.as_ref().ok_or_else(no_targets)?;
            let train = p.train.labels.as_ref().ok_or_else(no_targets)?;
            (var, l.iter().map(|&x| vec![x]).collect(), majority_rate(train.iter()))
        }
        _ => return Err(no_targets()),
    };
    let models = trained_models(cfg, &p, checkpoint)?;
    let spec = ChainSpec::limiting(&p.scenario, &models).stage("chain")?;
    let opts = chain_options(cfg, false);
    let mut chain_rng = stream_rng(cfg.seed, CHAIN_STREAM);
    let mut mask_rng = stream_rng(cfg.seed, MASK_STREAM);
    let n = cfg.chain.completions.min(p.test.len());
    let mut csv = String::from("record,masked_sites,accuracy_full,accuracy_masked\n");
    let (mut hits_full, mut hits_masked, mut total) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let x = &p.test.x[i];
        let sites = x.site_count();
        let masked: Vec<bool> = (0..sites).map(|_| mask_rng.random::<f64>() >= cfg.chain.mask_fraction).collect();
        let mut acc = [0usize; 2];
        for (k, observed) in [vec![true; sites], masked.clone()].into_iter().enumerate() {
            let obs = PartialObservation { clamps: vec![Clamp { var: Var::X, observed, values: x.clone() }] };
            let c = complete_partial(&models, &spec, &obs, &opts, &mut chain_rng).stage("chain")?;
            let decision = &c.var(target).ok_or_else(no_targets)?.decision;
            let Value::Labels(pred) = decision else { return Err(no_targets()) };
            acc[k] = pred.iter().zip(&truth[i]).filter(|(a, b)| a == b).count();
        }
        hits_full += acc[0];
        hits_masked += acc[1];
        total += truth[i].len();
        let len = truth[i].len() as f64;
        let hidden = masked.iter().filter(|o| !**o).count();
        let _ = writeln!(csv, "{i},{hidden},{:.6},{:.6}", acc[0] as f64 / len, acc[1] as f64 / len);
    }
    if total == 0 {
        return Err(no_targets());
    }
    let outcome = CompleteOutcome {
        records: n,
        accuracy_full: hits_full as f64 / total as f64,
        accuracy_masked: hits_masked as f64 / total as f64,
        chance,
    };
    write(&out.join("completion.csv"), &csv)?;
    let report = format!(
        "records: {}\nmask_fraction: {}\naccuracy_full: {:.6}\naccuracy_masked: {:.6}\nmajority_rate: {:.6}\n",
        outcome.records, cfg.chain.mask_fraction, outcome.accuracy_full, outcome.accuracy_masked, outcome.chance
    );
    write(&out.join("complete_report.txt"), &report)?;
    Ok(outcome)
}
