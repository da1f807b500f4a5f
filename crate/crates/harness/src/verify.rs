//! Numerical checks of the equilibrium theory on small exact instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use symvae::efcore::{FamilyDescriptor, Value};
use symvae::equilibrium::{
    build_models, Architecture, Batch, EmpiricalData, ModelSet, PriorKind, Scenario, ScenarioOptions, TrainerState,
    utility_terms, Variant,
};
use symvae::tabular_oracle::{
    dual_solve, exact_player_estimate, prop1_residual, realize, solve_equilibrium, tv, SolveOptions, TabularDecoder,
    TabularDist, TabularGameSpec, TabularParams,
};

use crate::error::{Result, Stage};

pub fn positive_probs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

fn normals<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A lifted game with full-support base measures and Gaussian statistics.
pub fn random_game<R: Rng + ?Sized>(nx: usize, nz: usize, du: usize, dv: usize, rng: &mut R) -> Result<TabularGameSpec> {
    let pi_x = positive_probs(nx, rng);
    let pi_z = positive_probs(nz, rng);
    let phi = normals(nx * nz * du, 1.0, rng);
    let psi = normals(nx * nz * dv, 1.0, rng);
    TabularGameSpec::new(pi_x, pi_z, du, phi, dv, psi).stage("tabular_oracle")
}

/// Shapes `(nx, nz, dim_u, dim_v)` of the instances checked by
/// [`verify_theorem1`].
pub const THEOREM1_SHAPES: [(usize, usize, usize, usize); 3] = [(4, 4, 3, 3), (8, 6, 4, 5), (16, 16, 6, 6)];

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub nx: usize,
    pub nz: usize,
    pub starts: usize,
    /// Largest TV between the realized `p` (or `q`) of any two starts.
    pub max_pair_tv: f64,
    /// Largest `|E_p stat - E_q stat|` over both statistic maps and all starts.
    pub max_moment_gap: f64,
    /// Largest TV between an equilibrium and the dual solution of its moments.
    pub max_dual_tv: f64,
    pub max_iterations: usize,
}

fn moment_gap(spec: &TabularGameSpec, p: &TabularDist, q: &TabularDist) -> f64 {
    let gap = |stats: &[f64], d: usize| {
        p.expect(stats, d).iter().zip(q.expect(stats, d)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    };
    gap(&spec.phi, spec.dim_u).max(gap(&spec.psi, spec.dim_v))
}

/// Solves `spec` from `starts` random initializations and compares the
/// realized equilibria.
pub fn uniqueness<R: Rng + ?Sized>(spec: &TabularGameSpec, starts: usize, rng: &mut R) -> Result<UniquenessReport> {
    let opts = SolveOptions { tol: 1e-10, max_iters: 200_000, ..Default::default() };
    let mut joints = Vec::with_capacity(starts);
    let mut report = UniquenessReport {
        nx: spec.nx,
        nz: spec.nz,
        starts,
        max_pair_tv: 0.0,
        max_moment_gap: 0.0,
        max_dual_tv: 0.0,
        max_iterations: 0,
    };
    for _ in 0..starts {
        let init = TabularParams { u: normals(spec.dim_u, 2.0, rng), v: normals(spec.dim_v, 2.0, rng) };
        let (eq, trace) = solve_equilibrium(spec, &init, &opts).stage("tabular_oracle")?;
        let (p, q) = realize(spec, &eq).stage("tabular_oracle")?;
        report.max_iterations = report.max_iterations.max(trace.iterations);
        report.max_moment_gap = report.max_moment_gap.max(moment_gap(spec, &p, &q));
        let (rp, rq) =
            dual_solve(spec, &q.expect(&spec.phi, spec.dim_u), &p.expect(&spec.psi, spec.dim_v)).stage("tabular_oracle")?;
        report.max_dual_tv = report.max_dual_tv.max(tv(&rp.solution, &p)).max(tv(&rq.solution, &q));
        joints.push((p, q));
    }
    for (i, a) in joints.iter().enumerate() {
        for b in &joints[i + 1..] {
            report.max_pair_tv = report.max_pair_tv.max(tv(&a.0, &b.0)).max(tv(&a.1, &b.1));
        }
    }
    Ok(report)
}

pub fn verify_theorem1(seed: u64, starts: usize) -> Result<Vec<UniquenessReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    THEOREM1_SHAPES
        .iter()
        .map(|&(nx, nz, du, dv)| {
            let spec = random_game(nx, nz, du, dv, &mut rng)?;
            uniqueness(&spec, starts, &mut rng)
        })
        .collect()
}

/// Random decoder with log-linear conditionals and an arbitrary encoder joint.
pub fn random_decoder<R: Rng + ?Sized>(rng: &mut R) -> (TabularDecoder, TabularDist, Vec<f64>) {
    let nx = rng.random_range(2..8);
    let nz = rng.random_range(2..6);
    let dim = rng.random_range(1..5);
    let dec = TabularDecoder { nx, nz, pi_z: positive_probs(nz, rng), dim, stats: normals(nx * nz * dim, 1.0, rng) };
    let q = TabularDist { probs: positive_probs(nx * nz, rng) };
    let theta = normals(dim, 1.5, rng);
    (dec, q, theta)
}

/// Largest residual of the ELBO identity over `instances` random decoders.
pub fn verify_prop1(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (dec, q, theta) = random_decoder(&mut rng);
        worst = worst.max(prop1_residual(&dec, &q, &theta).stage("tabular_oracle")?);
    }
    Ok(worst)
}

/// Per-coordinate agreement of two Monte-Carlo means, or of one mean with an
/// exact value.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanComparison {
    pub samples: usize,
    pub coords: usize,
    /// Largest `|difference| / standard error`.
    pub max_z: f64,
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn add(&mut self, g: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; g.len()];
            self.sq = vec![0.0; g.len()];
        }
        self.n += 1.0;
        for (i, x) in g.iter().enumerate() {
            self.sum[i] += x;
            self.sq[i] += x * x;
        }
    }

    fn mean(&self, i: usize) -> f64 {
        self.sum[i] / self.n
    }

    /// Squared standard error of the mean.
    fn se2(&self, i: usize) -> f64 {
        let m = self.mean(i);
        (self.sq[i] / self.n - m * m).max(0.0) / self.n
    }
}

fn z_score(diff: f64, se2: f64) -> f64 {
    if diff.abs() < 1e-12 {
        0.0
    } else {
        diff.abs() / se2.sqrt()
    }
}

/// Mean of `n` single-sample gradient estimates of every player against the
/// exact expected gradients.
pub fn unbiasedness(scenario: &Scenario, models: &ModelSet, batch: &Batch, n: usize, seed: u64) -> Result<MeanComparison> {
    let plans = utility_terms(scenario, models, batch).stage("equilibrium")?;
    let exact: Vec<Vec<f64>> = plans
        .iter()
        .map(|p| exact_player_estimate(models, p, batch).map(|e| e.grad))
        .collect::<symvae::Result<_>>()
        .stage("tabular_oracle")?;
    let mut st = TrainerState::new(scenario.clone(), models.clone(), 0.0, seed).stage("equilibrium")?;
    let mut moments: Vec<Moments> = exact.iter().map(|_| Moments::default()).collect();
    for _ in 0..n {
        for (m, e) in moments.iter_mut().zip(st.gradients(batch).stage("equilibrium")?) {
            m.add(&e.grad);
        }
    }
    let mut out = MeanComparison { samples: n, coords: 0, max_z: 0.0 };
    for (m, ex) in moments.iter().zip(&exact) {
        for (i, g) in ex.iter().enumerate() {
            out.coords += 1;
            out.max_z = out.max_z.max(z_score(m.mean(i) - g, m.se2(i)));
        }
    }
    Ok(out)
}

/// Decoder updates of the ELBO step against those of the equilibrium step,
/// from `n` single-sample estimates of each.
pub fn elbo_vs_nash(scenario: &Scenario, models: &ModelSet, batch: &Batch, n: usize, seed: u64) -> Result<MeanComparison> {
    let mut st = TrainerState::new(scenario.clone(), models.clone(), 0.0, seed).stage("equilibrium")?;
    let (mut e, mut g) = (Moments::default(), Moments::default());
    for _ in 0..n {
        e.add(&st.elbo_gradients(batch).stage("equilibrium")?[0].grad);
        g.add(&st.gradients(batch).stage("equilibrium")?[0].grad);
    }
    let mut out = MeanComparison { samples: n, coords: e.sum.len(), max_z: 0.0 };
    for i in 0..e.sum.len() {
        out.max_z = out.max_z.max(z_score(e.mean(i) - g.mean(i), e.se2(i) + g.se2(i)));
    }
    Ok(out)
}

/// A categorical unsupervised instance with affine maps and random
/// parameters, so that every conditional table is realizable.
pub fn tabular_instance(
    variant: Variant,
    nx: usize,
    nz: usize,
    prior: PriorKind,
    seed: u64,
) -> Result<(Scenario, ModelSet)> {
    let cat = |k| FamilyDescriptor::categorical(k, 1).stage("efcore");
    let mut o = ScenarioOptions::new(cat(nx)?, cat(nz)?);
    o.prior = prior;
    let scenario = Scenario::new(variant, o).stage("equilibrium")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut models = build_models(&scenario, &Architecture { hidden: vec![] }, &mut rng).stage("equilibrium")?;
    for p in 0..models.players.len() {
        let theta = normals(models.player_param_len(p), 1.0, &mut rng);
        models.set_player_params(p, &theta).stage("equilibrium")?;
    }
    Ok((scenario, models))
}

pub fn label_records(labels: &[usize]) -> Vec<Vec<Value>> {
    labels.iter().map(|&l| vec![Value::Labels(vec![l])]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WakeSleepReport {
    pub steps: u64,
    /// First step after which the parameter vectors differ in any bit.
    pub first_divergence: Option<u64>,
}

/// Runs the equilibrium and wake-sleep updates side by side on identical
/// batches and random streams and compares every parameter bit after each step.
pub fn wake_sleep_equivalence(
    scenario: &Scenario,
    models: &ModelSet,
    data: &EmpiricalData,
    batch_size: usize,
    alpha: f64,
    steps: u64,
    seed: u64,
) -> Result<WakeSleepReport> {
    let mut a = TrainerState::new(scenario.clone(), models.clone(), alpha, seed).stage("equilibrium")?;
    let mut b = TrainerState::new(scenario.clone(), models.clone(), alpha, seed).stage("equilibrium")?;
    let mut cursor = symvae::equilibrium::BatchCursor::new(data);
    let bits = |m: &ModelSet| -> Vec<u64> {
        (0..m.players.len()).flat_map(|p| m.player_params(p)).map(f64::to_bits).collect()
    };
    for s in 1..=steps {
        let batch = cursor.next_batch(data, batch_size, &mut a.rngs.data);
        a.nash_step(&batch).stage("equilibrium")?;
        b.wake_sleep_step(&batch).stage("equilibrium")?;
        if bits(&a.models) != bits(&b.models) {
            return Ok(WakeSleepReport { steps, first_divergence: Some(s) });
        }
    }
    Ok(WakeSleepReport { steps, first_divergence: None })
}
