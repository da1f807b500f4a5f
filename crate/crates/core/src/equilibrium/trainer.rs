//! Gradient play, the wake-sleep and ELBO baselines, and the training loop.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::tabular_oracle;

use super::data::{Batch, BatchCursor, EmpiricalData, Stream};
use super::estimate::{estimate_player, PlayerEstimate, PlayerTotals, RngStreams, TermSums};
use super::models::{Assignment, ModelSet, Var};
use super::plan::{utility_terms, PlayerPlan};
use super::scenario::{names, PriorKind, Scenario, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Every player's gradient is taken at the pre-step models.
    Parallel,
    /// Players move in index order; later players see earlier updates.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSource {
    MonteCarlo,
    /// Exact expectations by enumeration (small discrete instances only).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Nash,
    WakeSleep,
    Elbo,
}

const UTILITY_DECAY: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub scenario: Scenario,
    pub models: ModelSet,
    pub step: u64,
    pub alpha: f64,
    pub mode: UpdateMode,
    pub n_mc: usize,
    pub source: GradientSource,
    /// Exponential moving averages of each player's utility estimates.
    pub utility_estimates: Vec<f64>,
    /// Euclidean norms of the most recent gradients.
    pub grad_norms: Vec<f64>,
    pub rngs: RngStreams,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl TrainerState {
    pub fn new(scenario: Scenario, models: ModelSet, alpha: f64, seed: u64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        scenario.validate()?;
        let n = models.players.len();
        Ok(Self {
            scenario,
            models,
            step: 0,
            alpha,
            mode: UpdateMode::Parallel,
            n_mc: 1,
            source: GradientSource::MonteCarlo,
            utility_estimates: vec![0.0; n],
            grad_norms: vec![0.0; n],
            rngs: RngStreams::new(seed, n),
        })
    }

    fn player_estimate(&mut self, plan: &PlayerPlan, batch: &Batch) -> Result<PlayerEstimate> {
        match self.source {
            GradientSource::MonteCarlo => {
                estimate_player(&self.models, plan, batch, self.n_mc, &mut self.rngs.players[plan.player])
            }
            GradientSource::Exact => tabular_oracle::exact_player_estimate(&self.models, plan, batch),
        }
    }

    fn record(&mut self, est: &PlayerEstimate) -> Result<()> {
        if !est.utility.is_finite() {
            return Err(Error::NonFinite { term: format!("utility of {}", self.models.players[est.player]) });
        }
        let u = &mut self.utility_estimates[est.player];
        *u = if self.step == 0 { est.utility } else { UTILITY_DECAY * *u + (1.0 - UTILITY_DECAY) * est.utility };
        self.grad_norms[est.player] = norm(&est.grad);
        Ok(())
    }

    fn apply(&mut self, estimates: &[PlayerEstimate]) -> Result<()> {
        for e in estimates {
            self.record(e)?;
        }
        for e in estimates {
            self.models.ascend(e.player, &e.grad, self.alpha)?;
        }
        Ok(())
    }

    /// Gradients of every player at the current models, without updating.
    pub fn gradients(&mut self, batch: &Batch) -> Result<Vec<PlayerEstimate>> {
        let plans = utility_terms(&self.scenario, &self.models, batch)?;
        plans.iter().map(|p| self.player_estimate(p, batch)).collect()
    }

    /// One step of simultaneous (or sequential) gradient ascent of every
    /// player on its own utility.
    pub fn nash_step(&mut self, batch: &Batch) -> Result<()> {
        let plans = utility_terms(&self.scenario, &self.models, batch)?;
        match self.mode {
            UpdateMode::Parallel => {
                let est: Vec<PlayerEstimate> =
                    plans.iter().map(|p| self.player_estimate(p, batch)).collect::<Result<_>>()?;
                self.apply(&est)?;
            }
            UpdateMode::Sequential => {
                for p in &plans {
                    let e = self.player_estimate(p, batch)?;
                    self.apply(std::slice::from_ref(&e))?;
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    fn require_unsupervised(&self, what: &str) -> Result<()> {
        if self.scenario.variant != Variant::Unsupervised {
            return Err(Error::Configuration(format!("{what} needs the unsupervised scenario")));
        }
        Ok(())
    }

    /// Wake phase (complete data with the encoder, fit the decoder on the
    /// joint) and sleep phase (dream from the decoder, fit the encoder),
    /// both taken at the pre-step models.
    pub fn wake_sleep_step(&mut self, batch: &Batch) -> Result<()> {
        self.require_unsupervised("wake-sleep")?;
        if self.source != GradientSource::MonteCarlo {
            return Err(Error::Configuration("wake-sleep runs on Monte-Carlo samples".into()));
        }
        let m = &self.models;
        let enc = m.use_of(&names::enc(0))?;
        let dec = m.use_of(names::DEC_X)?;
        let prior = match self.scenario.options.prior {
            PriorKind::Implicit => None,
            _ => Some(m.use_of(&names::prior(0))?),
        };
        let n_mc = self.n_mc;
        if n_mc == 0 {
            return invalid("n_mc must be at least 1");
        }

        // Wake.
        let xs = batch.records(Stream::X);
        if xs.is_empty() {
            return Err(Error::Configuration("wake phase needs x samples".into()));
        }
        let mut sums = TermSums::new(m);
        let rng = &mut self.rngs.players[0];
        for rec in xs {
            for _ in 0..n_mc {
                let mut asg = Assignment::new();
                asg.set(Var::X, rec[0].clone());
                let z = m.sample(&enc, &asg, rng)?;
                asg.set(Var::Z(0), z);
                if let Some(p) = &prior {
                    sums.log_density += m.accumulate_log_density_grad(p, &asg, &mut sums.grads)?;
                }
                sums.log_density += m.accumulate_log_density_grad(&dec, &asg, &mut sums.grads)?;
            }
        }
        let mut wake = PlayerTotals::new(m);
        wake.fold(m, 0, "p.data_x", 1.0, xs.len() * n_mc, &sums)?;

        // Sleep.
        let dreams: Vec<Option<&crate::efcore::Value>> = match &prior {
            Some(_) => vec![None; batch.model_draws],
            None => batch.records(Stream::Z).iter().map(|r| Some(&r[0])).collect(),
        };
        if dreams.is_empty() {
            return Err(Error::Configuration("sleep phase has nothing to dream from".into()));
        }
        let mut sums = TermSums::new(m);
        let rng = &mut self.rngs.players[1];
        for given in &dreams {
            for _ in 0..n_mc {
                let mut asg = Assignment::new();
                let z = match (given, &prior) {
                    (Some(z), _) => (*z).clone(),
                    (None, Some(p)) => m.sample(p, &asg, rng)?,
                    (None, None) => unreachable!(),
                };
                asg.set(Var::Z(0), z);
                let x = m.sample(&dec, &asg, rng)?;
                asg.set(Var::X, x);
                sums.log_density += m.accumulate_log_density_grad(&enc, &asg, &mut sums.grads)?;
            }
        }
        let mut sleep = PlayerTotals::new(m);
        sleep.fold(m, 1, "q.dream", 1.0, dreams.len() * n_mc, &sums)?;

        let est = [wake.finish(m, 0), sleep.finish(m, 1)];
        self.apply(&est)?;
        self.step += 1;
        Ok(())
    }

    /// Gradients of the evidence lower bound for both players from one set
    /// of encoder samples. The decoder prior enters analytically; the encoder
    /// reconstruction term uses the score-function estimator with a
    /// leave-one-out batch-mean baseline, and its KL term is analytic.
    pub fn elbo_gradients(&mut self, batch: &Batch) -> Result<[PlayerEstimate; 2]> {
        self.require_unsupervised("the ELBO baseline")?;
        if self.scenario.options.prior == PriorKind::Implicit {
            return Err(Error::Configuration(
                "the ELBO needs an explicit latent prior; an implicit (sample-only) prior is unsupported".into(),
            ));
        }
        let m = &self.models;
        let enc = m.use_of(&names::enc(0))?;
        let dec = m.use_of(names::DEC_X)?;
        let prior = m.use_of(&names::prior(0))?;
        let zfam = m.family(Var::Z(0))?;
        let xs = batch.records(Stream::X);
        if xs.is_empty() {
            return Err(Error::Configuration("the ELBO needs x samples".into()));
        }
        let n_mc = self.n_mc.max(1);
        let asg0 = Assignment::new();
        let eta_p = m.natural_params(&prior, &asg0)?;
        let mu_p = zfam.mean_params(&eta_p)?;
        let rng = &mut self.rngs.players[0];

        // Draw every completion first so the baseline can see the batch.
        let mut draws = Vec::with_capacity(xs.len() * n_mc);
        for rec in xs {
            for _ in 0..n_mc {
                let mut asg = Assignment::new();
                asg.set(Var::X, rec[0].clone());
                let z = m.sample(&enc, &asg, rng)?;
                asg.set(Var::Z(0), z);
                let reward = m.log_density(&dec, &asg)?;
                draws.push((asg, reward));
            }
        }
        let n = draws.len();
        let total_reward: f64 = draws.iter().map(|(_, r)| r).sum();

        let mut dsums = TermSums::new(m);
        let mut esums = TermSums::new(m);
        for (asg, reward) in &draws {
            let eta_q = m.natural_params(&enc, asg)?;
            let kl = zfam.kl(&eta_q, &eta_p)?;
            // Decoder: reconstruction sample plus analytic E_q grad log p(z).
            dsums.log_density += m.accumulate_log_density_grad(&dec, asg, &mut dsums.grads)? - kl;
            let mu_q = zfam.mean_params(&eta_q)?;
            let cot: Vec<f64> = mu_q.iter().zip(&mu_p).map(|(a, b)| a - b).collect();
            m.accumulate_eta_cotangent(&prior, asg, &cot, &mut dsums.grads)?;

            // Encoder: (f - b) grad log q(z|x) - grad KL(q || p).
            let baseline = if n > 1 { (total_reward - reward) / (n - 1) as f64 } else { 0.0 };
            let stats = zfam.suff_stats(asg.require(Var::Z(0))?)?;
            let kl_grad = zfam.kl_grad_first(&eta_q, &eta_p)?;
            let cot: Vec<f64> = stats
                .iter()
                .zip(&mu_q)
                .zip(&kl_grad)
                .map(|((s, mq), g)| (reward - baseline) * (s - mq) - g)
                .collect();
            m.accumulate_eta_cotangent(&enc, asg, &cot, &mut esums.grads)?;
            esums.log_density += reward - kl;
        }
        let mut d = PlayerTotals::new(m);
        d.fold(m, 0, "elbo.decoder", 1.0, n, &dsums)?;
        let mut e = PlayerTotals::new(m);
        e.fold(m, 1, "elbo.encoder", 1.0, n, &esums)?;
        Ok([d.finish(m, 0), e.finish(m, 1)])
    }

    /// Joint ascent of both players on the evidence lower bound.
    pub fn elbo_step(&mut self, batch: &Batch) -> Result<()> {
        let est = self.elbo_gradients(batch)?;
        self.apply(&est)?;
        self.step += 1;
        Ok(())
    }

    pub fn step_with(&mut self, algorithm: Algorithm, batch: &Batch) -> Result<()> {
        match algorithm {
            Algorithm::Nash => self.nash_step(batch),
            Algorithm::WakeSleep => self.wake_sleep_step(batch),
            Algorithm::Elbo => self.elbo_step(batch),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Records per stream per step; `None` uses every record each step.
    pub batch_size: Option<usize>,
    /// Model draws per step for full-batch training.
    pub model_draws: usize,
    pub eval_every: u64,
    pub algorithm: Algorithm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: Some(32), model_draws: 32, eval_every: 100, algorithm: Algorithm::Nash }
    }
}

/// Scenario-level metrics computed by the caller at evaluation points.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Evaluation {
    pub kl_fwd: Option<f64>,
    pub kl_rev: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub player: String,
    pub utility: f64,
    pub grad_norm: f64,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "step,player,utility,grad_norm,kl_fwd,kl_rev,accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.17e},{:.17e},{},{},{}",
                r.step,
                r.player,
                r.utility,
                r.grad_norm,
                opt(r.eval.kl_fwd),
                opt(r.eval.kl_rev),
                opt(r.eval.accuracy)
            );
        }
        s
    }
}

/// Runs `config.steps` updates, logging one row per player at every
/// `eval_every`-th step and at the last step.
pub fn train<F>(state: &mut TrainerState, data: &EmpiricalData, config: &TrainConfig, mut evaluate: F) -> Result<MetricsLog>
where
    F: FnMut(&TrainerState) -> Result<Evaluation>,
{
    if config.eval_every == 0 {
        return Err(Error::Configuration("eval_every must be positive".into()));
    }
    let mut cursor = BatchCursor::new(data);
    let mut log = MetricsLog::default();
    for s in 1..=config.steps {
        let batch = match config.batch_size {
            Some(n) => cursor.next_batch(data, n, &mut state.rngs.data),
            None => data.full_batch(config.model_draws),
        };
        state.step_with(config.algorithm, &batch)?;
        if s % config.eval_every == 0 || s == config.steps {
            let eval = evaluate(state)?;
            for (p, name) in state.models.players.iter().enumerate() {
                log.rows.push(MetricRow {
                    step: state.step,
                    player: name.clone(),
                    utility: state.utility_estimates[p],
                    grad_norm: state.grad_norms[p],
                    eval,
                });
            }
        }
    }
    Ok(log)
}
