//! Alternating-conditional Markov chains: limiting distributions, exact
//! stationary analysis on small spaces, and completion of partially observed
//! configurations.

use rand::Rng;

use crate::efcore::{FamilyDescriptor, Value};
use crate::equilibrium::{factor_names, Assignment, ModelSet, Scenario, Use, Var, Variant};
use crate::error::{invalid, Error, Result};
use crate::tabular_oracle::SUPPORT_CAP;

/// How a chain variable gets its starting value.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Sample from a model factor (e.g. the decoder prior).
    Sample(Use),
    /// Sample from the family's reference member (uniform / standard normal).
    Reference(Var),
    /// A fixed value, e.g. a conditioning latent code.
    Fixed(Var, Value),
}

/// One half-sweep: a group of conditionals sampled in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub uses: Vec<Use>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub init: Vec<Init>,
    /// A sweep runs every stage in order (data variable first).
    pub stages: Vec<Stage>,
}

impl ChainSpec {
    /// The alternating chain `x ~ p(x|z)`, `z ~ q(z|x)` of a scenario. The
    /// latent state starts from the decoder prior when the model has one,
    /// uniformly otherwise. For the three-player game the chain also resamples
    /// the segmentation after the image.
    pub fn limiting(scenario: &Scenario, models: &ModelSet) -> Result<Self> {
        let z0 = Var::Z(0);
        let prior_or_reference = |name: &str, var: Var| match models.use_of(name) {
            Ok(u) => Init::Sample(u),
            Err(_) => Init::Reference(var),
        };
        Ok(match scenario.variant {
            Variant::TripleGame => Self {
                init: vec![prior_or_reference(&factor_names::prior(0), z0), Init::Reference(Var::S)],
                stages: vec![
                    Stage { name: "x".into(), uses: vec![models.use_of(factor_names::IMG)?] },
                    Stage { name: "s".into(), uses: vec![models.use_of(factor_names::SEG)?] },
                    Stage { name: "z".into(), uses: vec![models.use_of(&factor_names::enc(0))?] },
                ],
            },
            Variant::Hierarchical => {
                let layers = scenario.layers();
                let mut init = vec![];
                let mut dec_order = vec![models.use_of(&factor_names::prior(0))?];
                let mut enc = vec![];
                if scenario.options.classes.is_some() {
                    dec_order.push(models.use_of(factor_names::PRIOR_C)?);
                    enc.push(models.use_of(factor_names::ENC_C)?);
                }
                for i in 1..layers {
                    dec_order.push(models.use_of(&factor_names::prior(i))?);
                }
                for i in 0..layers {
                    enc.push(models.use_of(&factor_names::enc(i))?);
                }
                init.extend(dec_order.into_iter().map(Init::Sample));
                Self {
                    init,
                    stages: vec![
                        Stage { name: "x".into(), uses: vec![models.use_of(factor_names::DEC_X)?] },
                        Stage { name: "z".into(), uses: enc },
                    ],
                }
            }
            _ => Self {
                init: vec![prior_or_reference(&factor_names::prior(0), z0)],
                stages: vec![
                    Stage { name: "x".into(), uses: vec![models.use_of(factor_names::DEC_X)?] },
                    Stage { name: "z".into(), uses: vec![models.use_of(&factor_names::enc(0))?] },
                ],
            },
        })
    }

    /// The three-player chain over `(x, s)` for a fixed latent code.
    pub fn conditioned_on_z(models: &ModelSet, z: Value) -> Result<Self> {
        Ok(Self {
            init: vec![Init::Fixed(Var::Z(0), z), Init::Reference(Var::S)],
            stages: vec![
                Stage { name: "x".into(), uses: vec![models.use_of(factor_names::IMG)?] },
                Stage { name: "s".into(), uses: vec![models.use_of(factor_names::SEG)?] },
            ],
        })
    }

    /// Variables resampled by the stages, in first-sampled order.
    pub fn sampled_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for s in &self.stages {
            for u in &s.uses {
                if !out.contains(&u.output) {
                    out.push(u.output);
                }
            }
        }
        out
    }
}

/// Observed sites of some variables; every other site is inferred.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialObservation {
    pub clamps: Vec<Clamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clamp {
    pub var: Var,
    /// `observed[i]` marks site `i` as clamped to `values.site(i)`.
    pub observed: Vec<bool>,
    pub values: Value,
}

impl PartialObservation {
    fn apply(&self, asg: &mut Assignment, var: Var) {
        for c in self.clamps.iter().filter(|c| c.var == var) {
            if let Some(v) = asg.get_mut(var) {
                for (i, o) in c.observed.iter().enumerate() {
                    if *o {
                        v.copy_site_from(&c.values, i);
                    }
                }
            }
        }
    }

    fn observed_sites(&self, var: Var) -> usize {
        self.clamps.iter().filter(|c| c.var == var).map(|c| c.observed.iter().filter(|o| **o).count()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub current: Assignment,
    /// Completed sweeps.
    pub step_count: u64,
    /// Index of the stage that fired last.
    pub last_sampled: Option<usize>,
}

/// Draws the initial configuration (clamped sites overwritten).
pub fn init_state<R: Rng + ?Sized>(
    models: &ModelSet,
    spec: &ChainSpec,
    clamp: Option<&PartialObservation>,
    rng: &mut R,
) -> Result<ChainState> {
    let mut asg = Assignment::new();
    for i in &spec.init {
        let (var, value) = match i {
            Init::Sample(u) => (u.output, models.sample(u, &asg, rng)?),
            Init::Reference(v) => {
                let f = models.family(*v)?;
                (*v, f.sample(&f.reference_params(), rng)?)
            }
            Init::Fixed(v, value) => {
                models.family(*v)?.check_value(value)?;
                (*v, value.clone())
            }
        };
        asg.set(var, value);
        if let Some(c) = clamp {
            c.apply(&mut asg, var);
        }
    }
    // Clamped variables that no init step covers start at the observation
    // with hidden sites drawn from the reference member.
    if let Some(c) = clamp {
        for cl in &c.clamps {
            if asg.get(cl.var).is_none() {
                let f = models.family(cl.var)?;
                asg.set(cl.var, f.sample(&f.reference_params(), rng)?);
                c.apply(&mut asg, cl.var);
            }
        }
    }
    Ok(ChainState { current: asg, step_count: 0, last_sampled: None })
}

/// Runs one stage: each conditional is resampled in full and clamped sites
/// are then restored. For factorized families this equals sampling the
/// hidden sites from their exact conditional.
pub fn gibbs_stage<R: Rng + ?Sized>(
    models: &ModelSet,
    spec: &ChainSpec,
    state: &mut ChainState,
    stage: usize,
    clamp: Option<&PartialObservation>,
    rng: &mut R,
) -> Result<()> {
    for u in &spec.stages[stage].uses {
        let value = models.sample(u, &state.current, rng)?;
        state.current.set(u.output, value);
        if let Some(c) = clamp {
            c.apply(&mut state.current, u.output);
        }
    }
    state.last_sampled = Some(stage);
    Ok(())
}

/// One full sweep over every stage in order.
pub fn gibbs_step<R: Rng + ?Sized>(
    models: &ModelSet,
    spec: &ChainSpec,
    state: &mut ChainState,
    clamp: Option<&PartialObservation>,
    rng: &mut R,
) -> Result<()> {
    for s in 0..spec.stages.len() {
        gibbs_stage(models, spec, state, s, clamp, rng)?;
    }
    state.step_count += 1;
    Ok(())
}

/// A row-stochastic matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub n: usize,
    pub probs: Vec<f64>,
}

impl TransitionMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n..(i + 1) * self.n]
    }

    /// `m T` for a row vector `m`.
    pub fn left_apply(&self, m: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, mi) in m.iter().enumerate() {
            if *mi == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(self.row(i)) {
                *o += mi * t;
            }
        }
        out
    }
}

fn conditional_table(models: &ModelSet, u: &Use, inputs: &[Value], outputs: &[Value]) -> Result<Vec<f64>> {
    let in_var = u.inputs[0];
    let fam = models.factors[u.factor].family;
    let mut asg = Assignment::new();
    let mut table = vec![0.0; inputs.len() * outputs.len()];
    for (i, a) in inputs.iter().enumerate() {
        asg.set(in_var, a.clone());
        let eta = models.natural_params(u, &asg)?;
        for (o, b) in outputs.iter().enumerate() {
            table[i * outputs.len() + o] = fam.log_density(&eta, b)?.exp();
        }
    }
    Ok(table)
}

/// Exact kernels of the alternating chain of a single-latent model:
/// `T(x'|x) = sum_z p(x'|z) q(z|x)` over X and `T(z'|z) = sum_x q(z'|x) p(x|z)`
/// over Z.
pub fn tabular_kernel(models: &ModelSet) -> Result<(TransitionMatrix, TransitionMatrix)> {
    let dec = models.use_of(factor_names::DEC_X)?;
    let enc = models.use_of(&factor_names::enc(0))?;
    if dec.inputs.len() != 1 || enc.inputs.len() != 1 {
        return invalid("tabular kernels need p(x|z) and q(z|x) with single inputs");
    }
    let xs = models.family(Var::X)?.enumerate(SUPPORT_CAP)?;
    let zs = models.family(Var::Z(0))?.enumerate(SUPPORT_CAP)?;
    let (nx, nz) = (xs.len(), zs.len());
    if nx * nz > SUPPORT_CAP {
        return Err(Error::SupportTooLarge { size: (nx * nz) as u128, cap: SUPPORT_CAP });
    }
    let p_xz = conditional_table(models, &dec, &zs, &xs)?; // [z][x]
    let q_zx = conditional_table(models, &enc, &xs, &zs)?; // [x][z]
    let mut tx = vec![0.0; nx * nx];
    for a in 0..nx {
        for z in 0..nz {
            let w = q_zx[a * nz + z];
            for b in 0..nx {
                tx[a * nx + b] += w * p_xz[z * nx + b];
            }
        }
    }
    let mut tz = vec![0.0; nz * nz];
    for a in 0..nz {
        for x in 0..nx {
            let w = p_xz[a * nx + x];
            for b in 0..nz {
                tz[a * nz + b] += w * q_zx[x * nz + b];
            }
        }
    }
    Ok((TransitionMatrix { n: nx, probs: tx }, TransitionMatrix { n: nz, probs: tz }))
}

const POWER_MAX_ITERS: usize = 1_000_000;

/// Power iteration from the uniform vector until `||m T - m||_1 < tol`.
pub fn stationary_distribution(kernel: &TransitionMatrix, tol: f64) -> Result<Vec<f64>> {
    let n = kernel.n;
    if n == 0 || kernel.probs.len() != n * n {
        return invalid("kernel must be a non-empty square matrix");
    }
    for i in 0..n {
        let s: f64 = kernel.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 || kernel.row(i).iter().any(|p| *p < 0.0) {
            return invalid(format!("kernel row {i} is not a probability vector"));
        }
    }
    let mut m = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let next = kernel.left_apply(&m);
        residual = next.iter().zip(&m).map(|(a, b)| (a - b).abs()).sum();
        let total: f64 = next.iter().sum();
        m = next.into_iter().map(|x| x / total).collect();
        if residual < tol {
            return Ok(m);
        }
    }
    Err(Error::NoConvergence { iterations: POWER_MAX_ITERS, residual, trace: Vec::new() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainOptions {
    pub burn_in: usize,
    /// Recorded sweeps.
    pub n_samples: usize,
    /// Sweeps between recorded sweeps.
    pub thinning: usize,
    /// Keep the configuration after every recorded sweep.
    pub keep_samples: bool,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self { burn_in: 1000, n_samples: 10_000, thinning: 1, keep_samples: false }
    }
}

/// Accumulators for one chain variable.
#[derive(Debug, Clone, PartialEq)]
pub struct VarEstimate {
    pub var: Var,
    pub family: FamilyDescriptor,
    /// Visit counts per support point (enumerable families only).
    pub counts: Option<Vec<f64>>,
    /// Sums of sufficient statistics.
    pub stat_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryEstimate {
    pub vars: Vec<VarEstimate>,
    /// Number of recorded configurations (one per stage of each recorded sweep).
    pub records: u64,
    pub sample_count: usize,
    pub burn_in: usize,
    /// `(sweep, variable, fraction of sites changed during the sweep)`.
    pub flip_rates: Vec<(u64, Var, f64)>,
}

impl StationaryEstimate {
    fn new(models: &ModelSet, vars: &[Var], burn_in: usize) -> Result<Self> {
        let vars = vars
            .iter()
            .map(|&v| {
                let family = models.family(v)?;
                let counts = match family.support_size() {
                    Some(n) if n <= SUPPORT_CAP as u128 => Some(vec![0.0; n as usize]),
                    _ => None,
                };
                Ok(VarEstimate { var: v, family, counts, stat_sums: vec![0.0; family.stat_dim()] })
            })
            .collect::<Result<_>>()?;
        Ok(Self { vars, records: 0, sample_count: 0, burn_in, flip_rates: Vec::new() })
    }

    fn record(&mut self, asg: &Assignment) -> Result<()> {
        for e in &mut self.vars {
            let v = asg.require(e.var)?;
            if let Some(c) = &mut e.counts {
                c[e.family.index_of(v)? as usize] += 1.0;
            }
            for (s, x) in e.stat_sums.iter_mut().zip(e.family.suff_stats(v)?) {
                *s += x;
            }
        }
        self.records += 1;
        Ok(())
    }

    pub fn var(&self, var: Var) -> Option<&VarEstimate> {
        self.vars.iter().find(|e| e.var == var)
    }

    /// Empirical marginal of an enumerable variable.
    pub fn marginal(&self, var: Var) -> Option<Vec<f64>> {
        let e = self.var(var)?;
        let c = e.counts.as_ref()?;
        Some(c.iter().map(|x| x / self.records as f64).collect())
    }

    /// Average sufficient statistics of a variable.
    pub fn mean_stats(&self, var: Var) -> Option<Vec<f64>> {
        let e = self.var(var)?;
        Some(e.stat_sums.iter().map(|x| x / self.records as f64).collect())
    }
}

fn flips(before: &Value, after: &Value) -> f64 {
    let n = before.site_count();
    if n == 0 {
        return 0.0;
    }
    (0..n).filter(|&i| before.site(i) != after.site(i)).count() as f64 / n as f64
}

fn run_recorded<R: Rng + ?Sized>(
    models: &ModelSet,
    spec: &ChainSpec,
    clamp: Option<&PartialObservation>,
    opts: &ChainOptions,
    per_stage: bool,
    rng: &mut R,
) -> Result<(Vec<Assignment>, StationaryEstimate)> {
    if opts.n_samples == 0 {
        return invalid("n_samples must be at least 1");
    }
    if opts.thinning == 0 {
        return invalid("thinning must be at least 1");
    }
    let vars = spec.sampled_vars();
    let mut est = StationaryEstimate::new(models, &vars, opts.burn_in)?;
    let mut state = init_state(models, spec, clamp, rng)?;
    for _ in 0..opts.burn_in {
        gibbs_step(models, spec, &mut state, clamp, rng)?;
    }
    let mut samples = Vec::new();
    for _ in 0..opts.n_samples {
        for t in 0..opts.thinning {
            let last = t + 1 == opts.thinning;
            let before: Vec<Option<Value>> = vars.iter().map(|v| state.current.get(*v).cloned()).collect();
            for s in 0..spec.stages.len() {
                gibbs_stage(models, spec, &mut state, s, clamp, rng)?;
                if last && per_stage {
                    est.record(&state.current)?;
                }
            }
            state.step_count += 1;
            if last {
                if !per_stage {
                    est.record(&state.current)?;
                }
                for (v, b) in vars.iter().zip(&before) {
                    // A variable first assigned during this sweep counts as fully flipped.
                    let rate = match b {
                        Some(b) => flips(b, state.current.require(*v)?),
                        None => 1.0,
                    };
                    est.flip_rates.push((state.step_count, *v, rate));
                }
            }
        }
        est.sample_count += 1;
        if opts.keep_samples {
            samples.push(state.current.clone());
        }
    }
    Ok((samples, est))
}

/// Samples the limiting distribution. Statistics are recorded after every
/// stage of each recorded sweep, so the estimate averages the limiting
/// joints of all stage orders.
pub fn sample_limiting<R: Rng + ?Sized>(
    models: &ModelSet,
    spec: &ChainSpec,
    opts: &ChainOptions,
    rng: &mut R,
) -> Result<(Vec<Assignment>, StationaryEstimate)> {
    run_recorded(models, spec, None, opts, true, rng)
}

/// Per-variable completion of a partially observed configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct VarCompletion {
    pub var: Var,
    /// Per-site marginals: label frequencies (`sites x k`, row-major) for
    /// categorical variables, `P(bit = 1)` for Bernoulli variables, mean
    /// values for Gaussian variables.
    pub marginals: Vec<f64>,
    /// Maximum-marginal (discrete) or mean-marginal (continuous) decision.
    pub decision: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub vars: Vec<VarCompletion>,
    pub estimate: StationaryEstimate,
}

impl Completion {
    pub fn var(&self, var: Var) -> Option<&VarCompletion> {
        self.vars.iter().find(|c| c.var == var)
    }
}

fn decide(family: FamilyDescriptor, mean_stats: &[f64]) -> (Vec<f64>, Value) {
    match family {
        FamilyDescriptor::BernoulliVector { .. } => {
            (mean_stats.to_vec(), Value::Bits(mean_stats.iter().map(|p| *p > 0.5).collect()))
        }
        FamilyDescriptor::Categorical { k, .. } => {
            let labels = mean_stats
                .chunks(k)
                .map(|row| {
                    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, p)| if *p > best.1 { (i, *p) } else { best }).0
                })
                .collect();
            (mean_stats.to_vec(), Value::Labels(labels))
        }
        FamilyDescriptor::DiagonalGaussian { n } => {
            let means = mean_stats[..n].to_vec();
            (means.clone(), Value::Reals(means))
        }
    }
}

/// Gibbs completion with the observed sites clamped. Marginals are averaged
/// over the recorded sweeps.
pub fn complete_partial<R: Rng + ?Sized>(
    models: &ModelSet,
    spec: &ChainSpec,
    obs: &PartialObservation,
    opts: &ChainOptions,
    rng: &mut R,
) -> Result<Completion> {
    for c in &obs.clamps {
        let fam = models.family(c.var)?;
        fam.check_value(&c.values)?;
        if c.observed.len() != c.values.site_count() {
            return invalid(format!("mask of {} has the wrong length", c.var.name()));
        }
    }
    let vars = spec.sampled_vars();
    let hidden: usize = vars
        .iter()
        .map(|v| models.family(*v).map(|f| f.site_count().saturating_sub(obs.observed_sites(*v))))
        .sum::<Result<usize>>()?;
    if hidden == 0 {
        return Err(Error::NothingToInfer);
    }
    let (_, estimate) = run_recorded(models, spec, Some(obs), opts, false, rng)?;
    let vars = estimate
        .vars
        .iter()
        .map(|e| {
            let mean = estimate.mean_stats(e.var).expect("recorded");
            let (marginals, decision) = decide(e.family, &mean);
            VarCompletion { var: e.var, marginals, decision }
        })
        .collect();
    Ok(Completion { vars, estimate })
}
